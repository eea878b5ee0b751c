//! The span language model used as forward policy, the uniform-suffix
//! backward policy, and trajectory sampling.
//!
//! A state is the prefix plus the generated tokens; its identity is the token
//! content, so different span paths to the same text meet in one state.
//!
//! Scoring: a causal prefix encoder maps the state to `h` (final-layer row of
//! the last token). Every action unit gets a vector `v`: fixed tokens and ⊤
//! use output embeddings, each span occurrence `[s, e)` in a supporting
//! document uses `concat(start_mlp(rep_s), end_mlp(rep_{e-1}))` over a
//! bidirectional encoding of that document. Units are normalised jointly
//! with `softmax(h·v)`; an action's probability is the mass of its units.
//! Actions that would push the generated length past `max_len` are masked.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::dynvocab::{ActionId, ActionKind, DynamicVocabulary};
use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderShape, Mat, Mlp, NodeId, ParamSet, Tape};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

impl PolicyConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d: 64,
            layers: 2,
            heads: 4,
            context: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Config("embedding width must be even and positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config("heads must divide the embedding width".into()));
        }
        if self.context == 0 || self.vocab_size == 0 {
            return Err(Error::Config("context and vocabulary must be non-empty".into()));
        }
        Ok(())
    }

    fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            vocab_size: self.vocab_size,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            context: self.context,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CheckpointMeta<C> {
    pub config: C,
    pub tag: String,
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub set: ParamSet,
    prefix_encoder: Encoder,
    span_encoder: Encoder,
    token_embeddings: usize,
    terminal_embedding: usize,
    start_mlp: Mlp,
    end_mlp: Mlp,
}

impl PolicyParams {
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::domain::POLICY_INIT]);
        let mut set = ParamSet::new();
        let shape = config.encoder_shape();
        let d = config.d;
        let prefix_encoder = Encoder::init(&mut set, "prefix", shape, true, &mut rng);
        let span_encoder = Encoder::init(&mut set, "span", shape, false, &mut rng);
        let token_embeddings = set.add_normal("token_embeddings", config.vocab_size, d, 0.1, &mut rng);
        let terminal_embedding = set.add_normal("terminal_embedding", 1, d, 0.1, &mut rng);
        let start_mlp = Mlp::init(&mut set, "start_mlp", d, d / 2, &mut rng);
        let end_mlp = Mlp::init(&mut set, "end_mlp", d, d / 2, &mut rng);
        Ok(Self {
            config,
            set,
            prefix_encoder,
            span_encoder,
            token_embeddings,
            terminal_embedding,
            start_mlp,
            end_mlp,
        })
    }

    /// Rebinds a parameter set (e.g. from a checkpoint) to the layout.
    pub fn from_set(config: PolicyConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config, 0)?;
        reference.set.check_layout(&set)?;
        let shape = config.encoder_shape();
        let missing = || Error::Checkpoint("policy tensor missing".into());
        Ok(Self {
            config,
            prefix_encoder: Encoder::locate(&set, "prefix", shape, true).ok_or_else(missing)?,
            span_encoder: Encoder::locate(&set, "span", shape, false).ok_or_else(missing)?,
            token_embeddings: set.index_of("token_embeddings").ok_or_else(missing)?,
            terminal_embedding: set.index_of("terminal_embedding").ok_or_else(missing)?,
            start_mlp: Mlp::locate(&set, "start_mlp").ok_or_else(missing)?,
            end_mlp: Mlp::locate(&set, "end_mlp").ok_or_else(missing)?,
            set,
        })
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.save_tagged(w, "")
    }

    /// Saves with a free-form `tag` (the CLI stores its config hash here).
    pub fn save_tagged<W: std::io::Write>(&self, w: W, tag: &str) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            tag: tag.to_string(),
        })?;
        self.set.write_checkpoint(w, &meta)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(Self::load_tagged(r)?.0)
    }

    pub fn load_tagged<R: std::io::Read>(r: R) -> Result<(Self, String)> {
        let (set, meta) = ParamSet::read_checkpoint(r)?;
        let meta: CheckpointMeta<PolicyConfig> = serde_json::from_str(&meta)?;
        Ok((Self::from_set(meta.config, set)?, meta.tag))
    }

    /// Final-layer prefix-encoder rows for `tokens` (one row per position).
    pub fn encode_sequence(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::InvalidState("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                limit: self.config.context,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.prefix_encoder.forward(tape, &ids))
    }

    /// Bidirectional token representations of a document, encoded in
    /// context-sized windows.
    pub fn encode_document(&self, tape: &mut Tape, tokens: &[TokenId]) -> NodeId {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let chunks: Vec<NodeId> = ids
            .chunks(self.config.context)
            .map(|c| self.span_encoder.forward(tape, c))
            .collect();
        if chunks.len() == 1 {
            chunks[0]
        } else {
            tape.concat_rows(&chunks)
        }
    }

    /// Span vectors for half-open occurrences `[s, e)` of one document.
    pub fn encode_spans(&self, tape: &mut Tape, tokens: &[TokenId], occurrences: &[(usize, usize)]) -> NodeId {
        let reps = self.encode_document(tape, tokens);
        let starts: Vec<usize> = occurrences.iter().map(|o| o.0).collect();
        let ends: Vec<usize> = occurrences.iter().map(|o| o.1 - 1).collect();
        self.span_vectors(tape, &[(reps, starts, ends)])
    }

    fn span_vectors(&self, tape: &mut Tape, parts: &[(NodeId, Vec<usize>, Vec<usize>)]) -> NodeId {
        let mut starts = Vec::with_capacity(parts.len());
        let mut ends = Vec::with_capacity(parts.len());
        for (reps, s, e) in parts {
            starts.push(tape.gather_rows(*reps, s));
            ends.push(tape.gather_rows(*reps, e));
        }
        let s = if starts.len() == 1 { starts[0] } else { tape.concat_rows(&starts) };
        let e = if ends.len() == 1 { ends[0] } else { tape.concat_rows(&ends) };
        let s = self.start_mlp.forward(tape, s);
        let e = self.end_mlp.forward(tape, e);
        tape.concat_cols(&[s, e])
    }
}

/// Unit bookkeeping for one vocabulary: unit `u` belongs to `unit_action[u]`.
#[derive(Clone, Debug)]
pub struct UnitLayout {
    pub unit_action: Vec<ActionId>,
    unit_len: Vec<usize>,
    action_units: Vec<Vec<usize>>,
    fixed_tokens: Vec<usize>,
    terminal_unit: usize,
    /// Per source document: (doc position, occurrence starts, inclusive ends).
    span_parts: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl UnitLayout {
    pub fn new(vocab: &DynamicVocabulary) -> Self {
        let mut unit_action = Vec::new();
        let mut unit_len = Vec::new();
        let mut action_units = vec![Vec::new(); vocab.len()];
        let mut fixed_tokens = Vec::new();
        for (a, act) in vocab.actions().iter().enumerate() {
            if act.kind == ActionKind::FixedToken {
                action_units[a].push(unit_action.len());
                unit_action.push(a);
                unit_len.push(1);
                fixed_tokens.push(act.content[0] as usize);
            }
        }
        let terminal_unit = unit_action.len();
        action_units[vocab.terminal()].push(terminal_unit);
        unit_action.push(vocab.terminal());
        unit_len.push(0);

        let doc_pos: HashMap<u32, usize> = vocab
            .source_docs()
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id, i))
            .collect();
        let mut per_doc: Vec<Vec<(usize, usize, ActionId)>> = vec![Vec::new(); vocab.source_docs().len()];
        for (a, act) in vocab.actions().iter().enumerate() {
            if act.kind == ActionKind::RetrievedSpan {
                for o in &act.occurrences {
                    per_doc[doc_pos[&o.doc_id]].push((o.start, o.end - 1, a));
                }
            }
        }
        let mut span_parts = Vec::new();
        for (pos, occs) in per_doc.into_iter().enumerate() {
            if occs.is_empty() {
                continue;
            }
            let mut starts = Vec::with_capacity(occs.len());
            let mut ends = Vec::with_capacity(occs.len());
            for (s, e, a) in occs {
                action_units[a].push(unit_action.len());
                unit_action.push(a);
                unit_len.push(e + 1 - s);
                starts.push(s);
                ends.push(e);
            }
            span_parts.push((pos, starts, ends));
        }
        Self {
            unit_action,
            unit_len,
            action_units,
            fixed_tokens,
            terminal_unit,
            span_parts,
        }
    }

    pub fn num_units(&self) -> usize {
        self.unit_action.len()
    }

    pub fn units_of(&self, action: ActionId) -> &[usize] {
        &self.action_units[action]
    }

    /// Admissibility of every unit when `remaining` tokens may still be generated.
    fn mask_row(&self, remaining: usize) -> impl Iterator<Item = bool> + '_ {
        self.unit_len.iter().map(move |&l| l <= remaining)
    }
}

/// Builds the `units × d` action-vector node for `vocab`.
pub fn unit_vectors(tape: &mut Tape, params: &PolicyParams, vocab: &DynamicVocabulary, layout: &UnitLayout) -> NodeId {
    let mut rows = Vec::new();
    if !layout.fixed_tokens.is_empty() {
        rows.push(tape.embed(params.token_embeddings, &layout.fixed_tokens));
    }
    rows.push(tape.param(params.terminal_embedding));
    if !layout.span_parts.is_empty() {
        let mut parts = Vec::new();
        for (pos, starts, ends) in &layout.span_parts {
            let reps = params.encode_document(tape, &vocab.source_docs()[*pos].tokens);
            parts.push((reps, starts.clone(), ends.clone()));
        }
        rows.push(params.span_vectors(tape, &parts));
    }
    let v = tape.concat_rows(&rows);
    debug_assert_eq!(tape.value(v).rows, layout.num_units());
    debug_assert_eq!(layout.terminal_unit, layout.fixed_tokens.len());
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub prefix: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub terminated: bool,
}

impl State {
    pub fn initial(prefix: Vec<TokenId>) -> Self {
        Self {
            prefix,
            generated: Vec::new(),
            terminated: false,
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prefix.clone();
        t.extend(&self.generated);
        t
    }

    pub fn append(&self, content: &[TokenId]) -> Self {
        let mut generated = self.generated.clone();
        generated.extend_from_slice(content);
        Self {
            prefix: self.prefix.clone(),
            generated,
            terminated: false,
        }
    }

    pub fn terminate(&self) -> Self {
        Self {
            terminated: true,
            ..self.clone()
        }
    }
}

/// Forward-policy log-probabilities indexed by [`ActionId`]; masked actions
/// hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentDistribution {
    pub log_probs: Vec<f64>,
}

impl ContentDistribution {
    pub fn prob(&self, a: ActionId) -> f64 {
        self.log_probs[a].exp()
    }

    pub fn total(&self) -> f64 {
        self.log_probs.iter().map(|l| l.exp()).sum()
    }

    /// Inverse-CDF draw; masked actions are never chosen.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> ActionId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (a, &lp) in self.log_probs.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            acc += lp.exp();
            last = a;
            if u < acc {
                return a;
            }
        }
        last
    }
}

/// Anything that assigns forward-policy distributions to states; the neural
/// policy and the exact tabular policies of the oracle both implement it.
pub trait ForwardPolicy {
    fn vocab(&self) -> &DynamicVocabulary;
    fn max_len(&self) -> usize;
    /// Distributions at `prefix · generated[..j]` for every `j` in `0..=len`.
    fn distributions_along(&self, prefix: &[TokenId], generated: &[TokenId]) -> Result<Vec<ContentDistribution>>;

    fn distribution(&self, state: &State) -> Result<ContentDistribution> {
        if state.terminated {
            return Err(Error::InvalidState("terminated states accept no actions".into()));
        }
        let mut all = self.distributions_along(&state.prefix, &state.generated)?;
        Ok(all.pop().expect("at least one distribution"))
    }
}

/// The neural policy bound to one episode vocabulary; action vectors are
/// computed once.
pub struct PolicySession<'a> {
    params: &'a PolicyParams,
    vocab: &'a DynamicVocabulary,
    layout: UnitLayout,
    units: Mat,
    max_len: usize,
}

impl<'a> PolicySession<'a> {
    pub fn new(params: &'a PolicyParams, vocab: &'a DynamicVocabulary, max_len: usize) -> Self {
        let layout = UnitLayout::new(vocab);
        let mut tape = Tape::new(&params.set);
        let v = unit_vectors(&mut tape, params, vocab, &layout);
        let units = tape.value(v).clone();
        Self {
            params,
            vocab,
            layout,
            units,
            max_len,
        }
    }

    /// Prefix-encoder output `h` for a non-terminated state.
    pub fn encode_prefix(&self, state: &State) -> Result<Vec<f64>> {
        if state.terminated {
            return Err(Error::InvalidState("terminated states accept no actions".into()));
        }
        let tokens = state.tokens();
        let mut tape = Tape::new(&self.params.set);
        let h = self.params.encode_sequence(&mut tape, &tokens)?;
        Ok(tape.value(h).row(tokens.len() - 1).to_vec())
    }
}

impl ForwardPolicy for PolicySession<'_> {
    fn vocab(&self) -> &DynamicVocabulary {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn distributions_along(&self, prefix: &[TokenId], generated: &[TokenId]) -> Result<Vec<ContentDistribution>> {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(generated);
        let mut tape = Tape::new(&self.params.set);
        let hs = self.params.encode_sequence(&mut tape, &tokens)?;
        let units = tape.constant(self.units.clone());
        let rows: Vec<usize> = (0..=generated.len()).map(|g| prefix.len() + g - 1).collect();
        let lsm = state_log_softmax(&mut tape, hs, units, &self.layout, &rows, prefix.len(), self.max_len)?;
        let lsm = tape.value(lsm);
        Ok((0..rows.len())
            .map(|i| ContentDistribution {
                log_probs: action_log_probs(lsm.row(i), &self.layout),
            })
            .collect())
    }
}

fn action_log_probs(unit_lsm: &[f64], layout: &UnitLayout) -> Vec<f64> {
    layout
        .action_units
        .iter()
        .map(|units| crate::nn::mat::log_sum_exp(units.iter().map(|&u| unit_lsm[u])))
        .collect()
}

/// Masked log-softmax over units for the states whose last token sits at
/// `rows` of the encoded sequence.
fn state_log_softmax(
    tape: &mut Tape,
    hs: NodeId,
    units: NodeId,
    layout: &UnitLayout,
    rows: &[usize],
    prefix_len: usize,
    max_len: usize,
) -> Result<NodeId> {
    if prefix_len == 0 {
        return Err(Error::InvalidState("the prefix must be non-empty".into()));
    }
    let h = tape.gather_rows(hs, rows);
    let logits = tape.matmul_bt(h, units);
    let mut mask = Vec::with_capacity(rows.len() * layout.num_units());
    for &r in rows {
        let generated = r + 1 - prefix_len;
        let remaining = max_len.saturating_sub(generated);
        mask.extend(layout.mask_row(remaining));
    }
    Ok(tape.masked_log_softmax(logits, mask))
}

/// Tape nodes for the forward log-probabilities along one trajectory.
pub struct TrajectoryTerms {
    /// `n × 1`: `log P_F(s_k | s_{k-1})` for the content steps `k = 1..=n`.
    pub step_log_pf: Option<NodeId>,
    /// `(n + 1) × 1`: `log P_F(⊤ | s_i)` for `i = 0..=n`.
    pub log_pf_terminal: NodeId,
}

/// Records the forward log-probabilities of `traj` on `tape`.
pub fn trajectory_terms(
    tape: &mut Tape,
    params: &PolicyParams,
    vocab: &DynamicVocabulary,
    layout: &UnitLayout,
    traj: &Trajectory,
    max_len: usize,
) -> Result<TrajectoryTerms> {
    let units = unit_vectors(tape, params, vocab, layout);
    trajectory_terms_with_units(tape, params, vocab, layout, units, traj, max_len)
}

/// As [`trajectory_terms`], reusing action vectors already on the tape.
pub fn trajectory_terms_with_units(
    tape: &mut Tape,
    params: &PolicyParams,
    vocab: &DynamicVocabulary,
    layout: &UnitLayout,
    units: NodeId,
    traj: &Trajectory,
    max_len: usize,
) -> Result<TrajectoryTerms> {
    let mut action_ids = Vec::with_capacity(traj.actions.len());
    for a in &traj.actions {
        action_ids.push(
            vocab
                .lookup(a)
                .ok_or_else(|| Error::InvalidState("trajectory action outside the vocabulary".into()))?,
        );
    }
    let generated = traj.generated();
    if generated.len() > max_len {
        return Err(Error::InvalidState("trajectory longer than max_len".into()));
    }
    let mut tokens = traj.prefix.clone();
    tokens.extend(&generated);
    let hs = params.encode_sequence(tape, &tokens)?;
    let mut rows = Vec::with_capacity(traj.actions.len() + 1);
    let mut at = traj.prefix.len();
    rows.push(at - 1);
    for a in &traj.actions {
        at += a.len();
        rows.push(at - 1);
    }
    let lsm = state_log_softmax(tape, hs, units, layout, &rows, traj.prefix.len(), max_len)?;
    let step_groups: Vec<(usize, Vec<usize>)> = action_ids
        .iter()
        .enumerate()
        .map(|(k, &a)| (k, layout.units_of(a).to_vec()))
        .collect();
    let step_log_pf = if step_groups.is_empty() {
        None
    } else {
        Some(tape.group_log_sum_exp(lsm, step_groups))
    };
    let term: Vec<(usize, usize)> = (0..rows.len()).map(|i| (i, layout.terminal_unit)).collect();
    let log_pf_terminal = tape.select(lsm, term);
    Ok(TrajectoryTerms {
        step_log_pf,
        log_pf_terminal,
    })
}

/// Convenience wrapper: the forward distribution at one state.
pub fn forward_policy(
    state: &State,
    vocab: &DynamicVocabulary,
    params: &PolicyParams,
    max_len: usize,
) -> Result<ContentDistribution> {
    PolicySession::new(params, vocab, max_len).distribution(state)
}

/// Uniform distribution over predecessors obtained by removing a vocabulary
/// content that is a suffix of the generated text.
pub fn backward_policy(state: &State, vocab: &DynamicVocabulary) -> Result<Vec<(State, f64)>> {
    if state.terminated {
        return Err(Error::InvalidState(
            "remove ⊤ first; the step before a terminal state is deterministic".into(),
        ));
    }
    if state.generated.is_empty() {
        return Err(Error::NoPredecessor);
    }
    let suffixes = vocab.suffix_actions(&state.generated);
    let p = 1.0 / suffixes.len() as f64;
    let n = state.generated.len();
    Ok(suffixes
        .into_iter()
        .map(|a| {
            let cut = n - vocab.action(a).content.len();
            (
                State {
                    prefix: state.prefix.clone(),
                    generated: state.generated[..cut].to_vec(),
                    terminated: false,
                },
                p,
            )
        })
        .collect())
}

/// `log P_B(s_{k-1} | s_k)` for a state whose generated text is `generated`.
pub fn log_backward_prob(vocab: &DynamicVocabulary, generated: &[TokenId]) -> f64 {
    -(vocab.suffix_actions(generated).len() as f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prefix: Vec<TokenId>,
    /// Content actions in order; the closing ⊤ is implied by `terminated`.
    pub actions: Vec<Vec<TokenId>>,
    /// Forward log-probabilities recorded at sampling time, including the
    /// final ⊤ step. Empty for trajectories built from data.
    pub step_logprobs: Vec<f64>,
    pub terminated: bool,
}

impl Trajectory {
    pub fn generated(&self) -> Vec<TokenId> {
        self.actions.iter().flatten().copied().collect()
    }

    /// `s_0 … s_n` followed by the terminal state when terminated.
    pub fn states(&self) -> Vec<State> {
        let mut s = State::initial(self.prefix.clone());
        let mut out = vec![s.clone()];
        for a in &self.actions {
            s = s.append(a);
            out.push(s.clone());
        }
        if self.terminated {
            out.push(s.terminate());
        }
        out
    }

    pub fn log_prob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

/// Ancestral sampling from the forward policy until ⊤.
pub fn sample_trajectory<P: ForwardPolicy + ?Sized>(
    prefix: &[TokenId],
    policy: &P,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, &[rng::domain::SAMPLE]);
    sample_trajectory_with(prefix, policy, &mut rng)
}

pub fn sample_trajectory_with<P: ForwardPolicy + ?Sized, R: Rng>(
    prefix: &[TokenId],
    policy: &P,
    rng: &mut R,
) -> Result<Trajectory> {
    let vocab = policy.vocab();
    let mut state = State::initial(prefix.to_vec());
    let mut traj = Trajectory {
        prefix: prefix.to_vec(),
        actions: Vec::new(),
        step_logprobs: Vec::new(),
        terminated: false,
    };
    loop {
        let dist = policy.distribution(&state)?;
        let a = dist.sample(rng);
        traj.step_logprobs.push(dist.log_probs[a]);
        if a == vocab.terminal() {
            traj.terminated = true;
            return Ok(traj);
        }
        let content = vocab.action(a).content.clone();
        state = state.append(&content);
        traj.actions.push(content);
    }
}
