//! Minimal reverse-mode autodiff tape over [`Mat`] values.
//!
//! A tape borrows a [`ParamSet`]; parameter leaves and embedding lookups
//! route their gradients back to parameter slots. Losses that are easier to
//! differentiate by hand (SubTB, Bradley–Terry) are computed outside the tape
//! and enter [`Tape::backward`] as seed gradients on the nodes they consume.

use std::collections::HashMap;

use super::mat::{dot, Mat};
use super::params::ParamSet;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(usize),
    Embed { param: usize, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaskedLogSoftmax { x: NodeId, mask: Vec<bool> },
    GroupLogSumExp { x: NodeId, groups: Vec<(usize, Vec<usize>)> },
    Select { x: NodeId, idx: Vec<(usize, usize)> },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a whole parameter tensor; repeated calls share one node.
    pub fn param(&mut self, slot: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&slot) {
            return id;
        }
        let value = self.params.get(slot).clone();
        let id = self.push(value, Op::Param(slot));
        self.param_nodes.insert(slot, id);
        id
    }

    /// Rows `ids` of a parameter table, without materialising the table.
    pub fn embed(&mut self, slot: usize, ids: &[usize]) -> NodeId {
        let table = self.params.get(slot);
        let mut out = Mat::zeros(ids.len(), table.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        self.push(
            out,
            Op::Embed {
                param: slot,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, b.cols, "bias width");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, xhat.get(r, c) * g.data[c] + b.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax; with `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let limit = if causal { (r + 1).min(x.cols) } else { x.cols };
            let row = &x.row(r)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let o = out.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[c] = e;
                sum += e;
            }
            for v in &mut o[..limit] {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = self.value(a);
        let mut out = Mat::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row-wise log-softmax over the entries where `mask` is true; masked
    /// entries become `-inf`. Every row must keep at least one entry.
    pub fn masked_log_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask size");
        let mut out = Mat::filled(x.rows, x.cols, f64::NEG_INFINITY);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = &mask[r * x.cols..(r + 1) * x.cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "row with no admissible entry");
            let sum: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            let o = out.row_mut(r);
            for c in 0..row.len() {
                if m[c] {
                    o[c] = row[c] - lse;
                }
            }
        }
        self.push(out, Op::MaskedLogSoftmax { x: a, mask })
    }

    /// For each `(row, cols)` group, `log Σ_c exp(x[row, c])`, as a column.
    pub fn group_log_sum_exp(&mut self, a: NodeId, groups: Vec<(usize, Vec<usize>)>) -> NodeId {
        let x = self.value(a);
        let data = groups
            .iter()
            .map(|(r, cols)| super::mat::log_sum_exp(cols.iter().map(|&c| x.get(*r, c))))
            .collect::<Vec<_>>();
        let n = data.len();
        self.push(Mat::from_vec(n, 1, data), Op::GroupLogSumExp { x: a, groups })
    }

    /// Picks individual entries, as a column.
    pub fn select(&mut self, a: NodeId, idx: Vec<(usize, usize)>) -> NodeId {
        let x = self.value(a);
        let data = idx.iter().map(|&(r, c)| x.get(r, c)).collect::<Vec<_>>();
        let n = data.len();
        self.push(Mat::from_vec(n, 1, data), Op::Select { x: a, idx })
    }

    /// Propagates the seed gradients back through the tape and returns the
    /// gradient of every parameter slot (zeros for untouched slots).
    pub fn backward(&self, seeds: &[(NodeId, Mat)]) -> Vec<Mat> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.nodes[*id].value.shape(), "seed shape");
            accumulate(&mut grads[*id], g.clone());
        }
        let mut param_grads = self.params.zeros_like();

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => param_grads[*slot].add_assign(&g),
                Op::Embed { param, ids } => {
                    let pg = &mut param_grads[*param];
                    for (r, &i) in ids.iter().enumerate() {
                        for (p, v) in pg.row_mut(i).iter_mut().zip(g.row(r)) {
                            *p += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::MatMulBT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads[*a], g);
                    accumulate(&mut grads[*bias], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[*a], g.scaled(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| {
                            let u = GELU_C * (v + 0.044715 * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads[*a], Mat::from_vec(x.rows, x.cols, data));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = xhat.shape();
                    let mut gx = Mat::zeros(rows, cols);
                    let mut gg = Mat::zeros(1, cols);
                    let mut gbeta = Mat::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> =
                            gr.iter().zip(&gam.data).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xh) / cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            gg.data[c] += gr[c] * xh[c];
                            gbeta.data[c] += gr[c];
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                    accumulate(&mut grads[*gamma], gg);
                    accumulate(&mut grads[*beta], gbeta);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let s = dot(g.row(r), yr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (g.get(r, c) - s);
                        }
                    }
                    accumulate(&mut grads[*a], gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (p, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *p += v;
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut gp = Mat::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pv.cols]);
                        }
                        off += pv.cols;
                        accumulate(&mut grads[p], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let gp = Mat::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec());
                        off += n;
                        accumulate(&mut grads[p], gp);
                    }
                }
                Op::MaskedLogSoftmax { x, mask } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let m = &mask[r * y.cols..(r + 1) * y.cols];
                        let gsum: f64 = (0..y.cols).filter(|&c| m[c]).map(|c| g.get(r, c)).sum();
                        for c in 0..y.cols {
                            if m[c] {
                                gx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::GroupLogSumExp { x, groups } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (k, (r, cols)) in groups.iter().enumerate() {
                        let lse = node.value.data[k];
                        let gk = g.data[k];
                        if gk == 0.0 || lse == f64::NEG_INFINITY {
                            continue;
                        }
                        for &c in cols {
                            let w = (xv.get(*r, c) - lse).exp();
                            let cur = gx.get(*r, c);
                            gx.set(*r, c, cur + gk * w);
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::Select { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        let cur = gx.get(r, c);
                        gx.set(r, c, cur + g.data[k]);
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
        }
        param_grads
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `Σ w ⊙ f(params)` for a random weight matrix `w`,
    /// differentiated on the tape and by central differences.
    fn check<F>(set: &mut ParamSet, build: F)
    where
        F: Fn(&mut Tape) -> NodeId,
    {
        let weights = {
            let mut tape = Tape::new(set);
            let out = build(&mut tape);
            let v = tape.value(out);
            Mat::from_vec(
                v.rows,
                v.cols,
                (0..v.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
            )
        };
        let objective = |set: &ParamSet| {
            let mut tape = Tape::new(set);
            let out = build(&mut tape);
            tape.value(out)
                .data
                .iter()
                .zip(&weights.data)
                .filter(|(v, _)| v.is_finite())
                .map(|(v, w)| v * w)
                .sum::<f64>()
        };
        let grads = {
            let mut tape = Tape::new(set);
            let out = build(&mut tape);
            let mut seed = weights.clone();
            for (s, v) in seed.data.iter_mut().zip(&tape.value(out).data) {
                if !v.is_finite() {
                    *s = 0.0;
                }
            }
            tape.backward(&[(out, seed)])
        };
        let flat: Vec<f64> = grads.iter().flat_map(|m| m.data.clone()).collect();
        let h = 1e-6;
        for i in 0..set.num_scalars() {
            let orig = set.scalar(i);
            set.set_scalar(i, orig + h);
            let fp = objective(set);
            set.set_scalar(i, orig - h);
            let fm = objective(set);
            set.set_scalar(i, orig);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - flat[i]).abs() / fd.abs().max(flat[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} vs analytic {}", flat[i]);
        }
    }

    fn random_set(shapes: &[(usize, usize)]) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = ParamSet::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            set.add_normal(format!("p{i}"), r, c, 0.7, &mut rng);
        }
        set
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut set = random_set(&[(3, 4), (4, 5), (1, 5), (1, 5), (1, 5)]);
        check(&mut set, |t| {
            let a = t.param(0);
            let b = t.param(1);
            let m = t.matmul(a, b);
            let bias = t.param(2);
            let m = t.add_row(m, bias);
            let g = t.gelu(m);
            let gam = t.param(3);
            let bet = t.param(4);
            let ln = t.layer_norm(g, gam, bet);
            let s = t.scale(ln, 0.3);
            t.add(s, m)
        });
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut set = random_set(&[(4, 6), (6, 6), (5, 6)]);
        check(&mut set, |t| {
            let x = t.param(0);
            let w = t.param(1);
            let q = t.matmul(x, w);
            let qa = t.slice_cols(q, 0, 3);
            let qb = t.slice_cols(q, 3, 3);
            let xa = t.slice_cols(x, 0, 3);
            let s = t.matmul_bt(qa, xa);
            let p = t.softmax(s, true);
            let o = t.matmul(p, qb);
            let o2 = t.concat_cols(&[o, qa]);
            let e = t.embed(2, &[4, 0, 4]);
            let r = t.gather_rows(o2, &[1, 3, 3]);
            t.concat_rows(&[r, e])
        });
    }

    #[test]
    fn log_softmax_ops_match_finite_differences() {
        let mut set = random_set(&[(3, 5)]);
        check(&mut set, |t| {
            let x = t.param(0);
            let mut mask = vec![true; 15];
            mask[3] = false;
            mask[9] = false;
            let l = t.masked_log_softmax(x, mask);
            let a = t.group_log_sum_exp(l, vec![(0, vec![0, 1]), (1, vec![2, 4]), (2, vec![0])]);
            let b = t.select(l, vec![(2, 3), (0, 4)]);
            t.concat_rows(&[a, b])
        });
    }
}
