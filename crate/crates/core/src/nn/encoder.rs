//! Pre-norm transformer encoder used by the prefix encoder (causal), the
//! span encoder (bidirectional) and the preference scorer (causal).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::ParamSet;
use super::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Slot indices of one encoder inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub shape: EncoderShape,
    pub causal: bool,
    tok: usize,
    pos: usize,
    blocks: Vec<Block>,
    lnf_g: usize,
    lnf_b: usize,
}

impl Encoder {
    /// Allocates the encoder's tensors under `prefix.` in `set`.
    pub fn init<R: Rng>(
        set: &mut ParamSet,
        prefix: &str,
        shape: EncoderShape,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        let d = shape.d;
        assert!(shape.heads > 0 && d % shape.heads == 0, "d must divide into heads");
        let hidden = 4 * d;
        let w_std = 1.0 / (d as f64).sqrt();
        let tok = set.add_normal(format!("{prefix}.tok"), shape.vocab_size, d, 0.1, rng);
        let pos = set.add_normal(format!("{prefix}.pos"), shape.context, d, 0.1, rng);
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(Block {
                ln1_g: set.add(format!("{p}.ln1.g"), Mat::filled(1, d, 1.0)),
                ln1_b: set.add(format!("{p}.ln1.b"), Mat::zeros(1, d)),
                wq: set.add_normal(format!("{p}.attn.wq"), d, d, w_std, rng),
                wk: set.add_normal(format!("{p}.attn.wk"), d, d, w_std, rng),
                wv: set.add_normal(format!("{p}.attn.wv"), d, d, w_std, rng),
                wo: set.add_normal(format!("{p}.attn.wo"), d, d, w_std / 2.0, rng),
                ln2_g: set.add(format!("{p}.ln2.g"), Mat::filled(1, d, 1.0)),
                ln2_b: set.add(format!("{p}.ln2.b"), Mat::zeros(1, d)),
                w1: set.add_normal(format!("{p}.ffn.w1"), d, hidden, w_std, rng),
                b1: set.add(format!("{p}.ffn.b1"), Mat::zeros(1, hidden)),
                w2: set.add_normal(
                    format!("{p}.ffn.w2"),
                    hidden,
                    d,
                    0.5 / (hidden as f64).sqrt(),
                    rng,
                ),
                b2: set.add(format!("{p}.ffn.b2"), Mat::zeros(1, d)),
            });
        }
        let lnf_g = set.add(format!("{prefix}.lnf.g"), Mat::filled(1, d, 1.0));
        let lnf_b = set.add(format!("{prefix}.lnf.b"), Mat::zeros(1, d));
        Self {
            shape,
            causal,
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        }
    }

    /// Re-derives slot indices from names, for parameters loaded from disk.
    pub fn locate(set: &ParamSet, prefix: &str, shape: EncoderShape, causal: bool) -> Option<Self> {
        let s = |n: String| set.index_of(&n);
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(Block {
                ln1_g: s(format!("{p}.ln1.g"))?,
                ln1_b: s(format!("{p}.ln1.b"))?,
                wq: s(format!("{p}.attn.wq"))?,
                wk: s(format!("{p}.attn.wk"))?,
                wv: s(format!("{p}.attn.wv"))?,
                wo: s(format!("{p}.attn.wo"))?,
                ln2_g: s(format!("{p}.ln2.g"))?,
                ln2_b: s(format!("{p}.ln2.b"))?,
                w1: s(format!("{p}.ffn.w1"))?,
                b1: s(format!("{p}.ffn.b1"))?,
                w2: s(format!("{p}.ffn.w2"))?,
                b2: s(format!("{p}.ffn.b2"))?,
            });
        }
        Some(Self {
            shape,
            causal,
            tok: s(format!("{prefix}.tok"))?,
            pos: s(format!("{prefix}.pos"))?,
            blocks,
            lnf_g: s(format!("{prefix}.lnf.g"))?,
            lnf_b: s(format!("{prefix}.lnf.b"))?,
        })
    }

    /// Encodes `ids` (length ≤ context) into a `len × d` node.
    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> NodeId {
        let n = ids.len();
        assert!(n > 0 && n <= self.shape.context, "sequence length out of range");
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.embed(self.tok, ids);
        let pos = tape.embed(self.pos, &positions);
        let mut x = tape.add(tok, pos);

        let d = self.shape.d;
        let heads = self.shape.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let g = tape.param(b.ln1_g);
            let be = tape.param(b.ln1_b);
            let a = tape.layer_norm(x, g, be);
            let wq = tape.param(b.wq);
            let wk = tape.param(b.wk);
            let wv = tape.param(b.wv);
            let q = tape.matmul(a, wq);
            let k = tape.matmul(a, wk);
            let v = tape.matmul(a, wv);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax(s, self.causal);
                outs.push(tape.matmul(p, vh));
            }
            let cat = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)
            };
            let wo = tape.param(b.wo);
            let o = tape.matmul(cat, wo);
            x = tape.add(x, o);

            let g = tape.param(b.ln2_g);
            let be = tape.param(b.ln2_b);
            let f = tape.layer_norm(x, g, be);
            let w1 = tape.param(b.w1);
            let b1 = tape.param(b.b1);
            let f = tape.matmul(f, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let w2 = tape.param(b.w2);
            let b2 = tape.param(b.b2);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        let g = tape.param(self.lnf_g);
        let be = tape.param(self.lnf_b);
        tape.layer_norm(x, g, be)
    }
}

/// Two-layer GELU MLP `d → d → out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Mlp {
    pub fn init<R: Rng>(set: &mut ParamSet, prefix: &str, d: usize, out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w1: set.add_normal(format!("{prefix}.w1"), d, d, std, rng),
            b1: set.add(format!("{prefix}.b1"), Mat::zeros(1, d)),
            w2: set.add_normal(format!("{prefix}.w2"), d, out, 0.1 * std, rng),
            b2: set.add(format!("{prefix}.b2"), Mat::zeros(1, out)),
        }
    }

    pub fn locate(set: &ParamSet, prefix: &str) -> Option<Self> {
        Some(Self {
            w1: set.index_of(&format!("{prefix}.w1"))?,
            b1: set.index_of(&format!("{prefix}.b1"))?,
            w2: set.index_of(&format!("{prefix}.w2"))?,
            b2: set.index_of(&format!("{prefix}.b2"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }
}
