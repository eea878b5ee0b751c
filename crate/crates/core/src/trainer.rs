//! Sub-trajectory balance over valid states, the per-prefix replay buffer
//! and the hybrid offline/online training loop.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_prefix, CorpusIndex, DocId, TokenId, Vocab};
use crate::dynvocab::{build_training_vocabulary, DynamicVocabulary};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Mat, NodeId, Tape};
use crate::policy::{
    log_backward_prob, sample_trajectory_with, trajectory_terms, trajectory_terms_with_units, unit_vectors,
    ForwardPolicy, PolicyParams, PolicySession, State, Trajectory, TrajectoryTerms, UnitLayout,
};
use crate::reward::RewardFn;
use crate::rng;
use crate::segmentation::{segment_document, Segmentation, SegmentationConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Probability of sampling online after the first epoch.
    pub pi: f64,
    pub lr: f64,
    /// Learning rate reached by linear decay after `decay_steps`; ignored
    /// when `decay_steps` is 0.
    pub lr_final: f64,
    pub decay_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub sentence_end_tokens: Vec<TokenId>,
    pub max_len: usize,
    /// Maximum-likelihood warm-up in epoch 1 instead of the balance loss.
    pub warmup_mle: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pi: 0.8,
            lr: 1e-3,
            lr_final: 1e-3,
            decay_steps: 0,
            epochs: 10,
            batch_size: 8,
            buffer_capacity: 16,
            sentence_end_tokens: Vec::new(),
            max_len: 32,
            warmup_mle: true,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config("pi must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.buffer_capacity == 0 || self.batch_size == 0 {
            return Err(Error::Config("buffer capacity and batch size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sentence-complete states: the initial state, or one whose generated text
/// ends with a sentence-end token.
pub fn is_valid_state(state: &State, cfg: &TrainConfig) -> bool {
    match state.generated.last() {
        None => true,
        Some(t) => cfg.sentence_end_tokens.contains(t),
    }
}

/// Balance loss and its gradient with respect to the forward terms.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTbTerms {
    pub loss: f64,
    /// `∂L/∂ log P_F(⊤ | s_i)`, `i = 0..=n`.
    pub d_log_pt: Vec<f64>,
    /// `∂L/∂ log P_F(s_k | s_{k-1})`, `k = 1..=n`.
    pub d_step_pf: Vec<f64>,
}

/// Sum over valid pairs `i < j` of
/// `(log R_i + Σ_{i<k≤j} log P_F + log P⊤_j − log R_j − Σ log P_B − log P⊤_i)²`.
/// `log_r[i]` is read only where `valid[i]`.
pub fn subtb_from_logs(log_r: &[f64], log_pt: &[f64], step_pf: &[f64], step_pb: &[f64], valid: &[bool]) -> SubTbTerms {
    let n = step_pf.len();
    assert_eq!(log_pt.len(), n + 1);
    assert_eq!(log_r.len(), n + 1);
    assert_eq!(valid.len(), n + 1);
    assert_eq!(step_pb.len(), n);
    let mut cum_f = vec![0.0; n + 1];
    let mut cum_b = vec![0.0; n + 1];
    for k in 0..n {
        cum_f[k + 1] = cum_f[k] + step_pf[k];
        cum_b[k + 1] = cum_b[k] + step_pb[k];
    }
    let idx: Vec<usize> = (0..=n).filter(|&i| valid[i]).collect();
    let mut loss = 0.0;
    let mut d_log_pt = vec![0.0; n + 1];
    let mut d_cum_f = vec![0.0; n + 1];
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let delta = (log_r[i] - log_pt[i]) - (log_r[j] - log_pt[j]) + (cum_f[j] - cum_f[i]) - (cum_b[j] - cum_b[i]);
            loss += delta * delta;
            let g = 2.0 * delta;
            d_log_pt[i] -= g;
            d_log_pt[j] += g;
            d_cum_f[i] -= g;
            d_cum_f[j] += g;
        }
    }
    let mut d_step_pf = vec![0.0; n];
    let mut acc = 0.0;
    for k in (1..=n).rev() {
        acc += d_cum_f[k];
        d_step_pf[k - 1] = acc;
    }
    SubTbTerms {
        loss,
        d_log_pt,
        d_step_pf,
    }
}

/// Per-state rewards, backward log-probabilities and validity along `traj`.
pub struct StateTerms {
    pub log_r: Vec<f64>,
    pub step_pb: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn state_terms(
    traj: &Trajectory,
    vocab: &DynamicVocabulary,
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
) -> Result<StateTerms> {
    let states: Vec<State> = traj.states().into_iter().filter(|s| !s.terminated).collect();
    let mut log_r = Vec::with_capacity(states.len());
    let mut valid = Vec::with_capacity(states.len());
    for s in &states {
        let v = is_valid_state(s, cfg);
        valid.push(v);
        log_r.push(if v { reward.log_reward(&s.terminate())? } else { 0.0 });
    }
    let step_pb = states[1..]
        .iter()
        .map(|s| log_backward_prob(vocab, &s.generated))
        .collect();
    Ok(StateTerms { log_r, step_pb, valid })
}

fn require_complete(traj: &Trajectory) -> Result<()> {
    if traj.terminated {
        Ok(())
    } else {
        Err(Error::InvalidState("the balance loss needs a ⊤-terminated trajectory".into()))
    }
}

/// Balance loss of `traj` under any forward policy.
pub fn subtb_loss<P: ForwardPolicy + ?Sized>(
    traj: &Trajectory,
    policy: &P,
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
) -> Result<f64> {
    require_complete(traj)?;
    let vocab = policy.vocab();
    let generated = traj.generated();
    let dists = policy.distributions_along(&traj.prefix, &generated)?;
    let mut log_pt = Vec::with_capacity(traj.actions.len() + 1);
    let mut step_pf = Vec::with_capacity(traj.actions.len());
    let mut at = 0;
    log_pt.push(dists[0].log_probs[vocab.terminal()]);
    for a in &traj.actions {
        let id = vocab
            .lookup(a)
            .ok_or_else(|| Error::InvalidState("trajectory action outside the vocabulary".into()))?;
        step_pf.push(dists[at].log_probs[id]);
        at += a.len();
        log_pt.push(dists[at].log_probs[vocab.terminal()]);
    }
    let st = state_terms(traj, vocab, reward, cfg)?;
    Ok(subtb_from_logs(&st.log_r, &log_pt, &step_pf, &st.step_pb, &st.valid).loss)
}

fn column(values: Vec<f64>, scale: f64) -> Mat {
    let n = values.len();
    Mat::from_vec(n, 1, values.into_iter().map(|v| v * scale).collect())
}

/// Balance loss and the backward seeds (scaled by `scale`) for recorded terms.
fn subtb_seeds(tape: &Tape, terms: &TrajectoryTerms, st: &StateTerms, scale: f64) -> (f64, Vec<(NodeId, Mat)>) {
    let log_pt = tape.value(terms.log_pf_terminal).data.clone();
    let step_pf = terms
        .step_log_pf
        .map(|n| tape.value(n).data.clone())
        .unwrap_or_default();
    let g = subtb_from_logs(&st.log_r, &log_pt, &step_pf, &st.step_pb, &st.valid);
    let mut seeds = vec![(terms.log_pf_terminal, column(g.d_log_pt, scale))];
    if let Some(node) = terms.step_log_pf {
        seeds.push((node, column(g.d_step_pf, scale)));
    }
    (g.loss, seeds)
}

fn mle_seeds(tape: &Tape, terms: &TrajectoryTerms, scale: f64) -> (f64, Vec<(NodeId, Mat)>) {
    let pt = &tape.value(terms.log_pf_terminal).data;
    let n = pt.len() - 1;
    let mut loss = -pt[n];
    let mut d_pt = vec![0.0; n + 1];
    d_pt[n] = -1.0;
    let mut seeds = vec![(terms.log_pf_terminal, column(d_pt, scale))];
    if let Some(node) = terms.step_log_pf {
        loss -= tape.value(node).data.iter().sum::<f64>();
        seeds.push((node, Mat::filled(n, 1, -scale)));
    }
    (loss, seeds)
}

/// Balance loss of `traj` and its gradient for every policy tensor.
pub fn subtb_loss_and_grad(
    traj: &Trajectory,
    params: &PolicyParams,
    vocab: &DynamicVocabulary,
    layout: &UnitLayout,
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Mat>)> {
    require_complete(traj)?;
    let st = state_terms(traj, vocab, reward, cfg)?;
    let mut tape = Tape::new(&params.set);
    let terms = trajectory_terms(&mut tape, params, vocab, layout, traj, cfg.max_len)?;
    let (loss, seeds) = subtb_seeds(&tape, &terms, &st, 1.0);
    Ok((loss, tape.backward(&seeds)))
}

/// Negative log-likelihood of the action sequence including the final ⊤.
pub fn mle_loss_and_grad(
    traj: &Trajectory,
    params: &PolicyParams,
    vocab: &DynamicVocabulary,
    layout: &UnitLayout,
    max_len: usize,
) -> Result<(f64, Vec<Mat>)> {
    require_complete(traj)?;
    let mut tape = Tape::new(&params.set);
    let terms = trajectory_terms(&mut tape, params, vocab, layout, traj, max_len)?;
    let (loss, seeds) = mle_seeds(&tape, &terms, 1.0);
    Ok((loss, tape.backward(&seeds)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub trajectory: Trajectory,
    pub reward: f64,
}

/// Per-prefix trajectory stores kept sorted by reward, highest first.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: BTreeMap<Vec<TokenId>, Vec<BufferEntry>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: BTreeMap::new(),
        }
    }

    /// Inserts unless the same action sequence is already stored; drops the
    /// lowest-reward entry when over capacity.
    pub fn insert(&mut self, prefix: &[TokenId], trajectory: Trajectory, reward: f64) -> Result<()> {
        if !(reward >= 0.0) || !reward.is_finite() {
            return Err(Error::InvalidState(format!("buffer reward must be finite and ≥ 0, got {reward}")));
        }
        let bucket = self.entries.entry(prefix.to_vec()).or_default();
        if bucket.iter().any(|e| e.trajectory.actions == trajectory.actions) {
            return Ok(());
        }
        let at = bucket.partition_point(|e| e.reward >= reward);
        bucket.insert(at, BufferEntry { trajectory, reward });
        bucket.truncate(self.capacity);
        Ok(())
    }

    pub fn entries(&self, prefix: &[TokenId]) -> &[BufferEntry] {
        self.entries.get(prefix).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self, prefix: &[TokenId]) -> usize {
        self.entries(prefix).len()
    }

    /// Draw with probability proportional to reward; uniform when every
    /// stored reward is zero.
    pub fn sample<R: Rng>(&self, prefix: &[TokenId], rng: &mut R) -> Result<&Trajectory> {
        let bucket = self.entries.get(prefix).filter(|b| !b.is_empty()).ok_or(Error::UnknownPrefix)?;
        let total: f64 = bucket.iter().map(|e| e.reward).sum();
        if total <= 0.0 {
            return Ok(&bucket[rng.random_range(0..bucket.len())].trajectory);
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for e in bucket {
            acc += e.reward;
            if u < acc {
                return Ok(&e.trajectory);
            }
        }
        Ok(&bucket.last().expect("non-empty").trajectory)
    }
}

/// Converts the residual part of a document segmentation into a trajectory:
/// pieces are clipped to the residual window `[prefix_len, prefix_len + max_len)`;
/// a clipped piece missing from the vocabulary is emitted token by token.
pub fn offline_trajectory(
    seg: &Segmentation,
    prefix_len: usize,
    vocab: &DynamicVocabulary,
    max_len: usize,
) -> Trajectory {
    let tokens = seg.concat();
    let end = tokens.len().min(prefix_len + max_len);
    let mut actions = Vec::new();
    let mut at = 0;
    for p in &seg.pieces {
        let (s, e) = (at, at + p.tokens.len());
        at = e;
        let (s, e) = (s.max(prefix_len), e.min(end));
        if s >= e {
            continue;
        }
        let piece = &tokens[s..e];
        if piece.len() == 1 || vocab.lookup(piece).is_some() {
            actions.push(piece.to_vec());
        } else {
            actions.extend(piece.iter().map(|&t| vec![t]));
        }
    }
    Trajectory {
        prefix: tokens[..prefix_len].to_vec(),
        actions,
        step_logprobs: Vec::new(),
        terminated: true,
    }
}

/// One training document: its prefix, action set and offline trajectories
/// (one per segmentation threshold).
#[derive(Clone, Debug)]
pub struct Episode {
    pub doc_id: DocId,
    pub prefix: Vec<TokenId>,
    pub vocab: DynamicVocabulary,
    pub layout: UnitLayout,
    pub offline: Vec<Trajectory>,
}

/// Builds episodes for every indexed document. Segmentation references are
/// the document itself plus its top-`k_train` neighbours for the prefix.
pub fn build_episodes(
    index: &CorpusIndex,
    fixed: &Vocab,
    seg_cfg: &SegmentationConfig,
    target_len: usize,
    max_len: usize,
) -> Vec<Episode> {
    let ends = fixed.sentence_end_ids();
    index
        .documents
        .iter()
        .map(|doc| {
            let (prefix, _) = split_prefix(doc, target_len, &ends);
            let vocab = build_training_vocabulary(doc, &prefix, fixed, index, index.k_train, seg_cfg);
            let refs: Vec<&_> = vocab.source_docs().iter().collect();
            let offline = segment_document(doc, &refs, seg_cfg)
                .iter()
                .map(|s| offline_trajectory(s, prefix.len(), &vocab, max_len))
                .collect();
            Episode {
                doc_id: doc.doc_id,
                layout: UnitLayout::new(&vocab),
                prefix,
                vocab,
                offline,
            }
        })
        .collect()
}

/// Memoises terminal log-rewards by state.
pub struct CachedReward<'a> {
    inner: &'a dyn RewardFn,
    cache: RefCell<HashMap<State, f64>>,
}

impl<'a> CachedReward<'a> {
    pub fn new(inner: &'a dyn RewardFn) -> Self {
        Self {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl RewardFn for CachedReward<'_> {
    fn log_reward(&self, state: &State) -> Result<f64> {
        if let Some(&v) = self.cache.borrow().get(state) {
            return Ok(v);
        }
        let v = self.inner.log_reward(state)?;
        self.cache.borrow_mut().insert(state.clone(), v);
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    /// Fraction of the batch sampled from the current policy.
    pub online: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub items: usize,
    pub mean_loss: f64,
    pub mean_reward: f64,
    pub online_fraction: f64,
}

pub struct Trainer<'r> {
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub buffer: ReplayBuffer,
    adam: Adam,
    reward: CachedReward<'r>,
    rng: ChaCha8Rng,
    step: u64,
    pub log: Vec<StepLog>,
}

fn clip_global_norm(grads: &mut [Mat], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl<'r> Trainer<'r> {
    pub fn new(config: TrainConfig, params: PolicyParams, reward: &'r dyn RewardFn) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &params.set,
        );
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: rng::stream(config.seed, &[rng::domain::TRAIN]),
            reward: CachedReward::new(reward),
            config,
            params,
            adam,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One pass over every (episode, threshold) item; returns epoch averages.
    pub fn train_epoch(&mut self, episodes: &[Episode], epoch: usize) -> Result<EpochStats> {
        if epoch == 0 {
            return Err(Error::Config("epochs are numbered from 1".into()));
        }
        let mut items: Vec<(usize, usize)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.offline.len()).map(move |t| (e, t)))
            .collect();
        items.shuffle(&mut self.rng);

        let mut stats = EpochStats {
            epoch,
            items: items.len(),
            mean_loss: 0.0,
            mean_reward: 0.0,
            online_fraction: 0.0,
        };
        let max_len = self.config.max_len;
        let mle = epoch == 1 && self.config.warmup_mle;
        for batch in items.chunks(self.config.batch_size) {
            let mut picked = Vec::with_capacity(batch.len());
            let mut sessions: HashMap<Vec<DocId>, PolicySession> = HashMap::new();
            for &(e, t) in batch {
                let ep = &episodes[e];
                let offline = || ep.offline[t].clone();
                let (traj, was_online) = if epoch == 1 {
                    (offline(), false)
                } else if self.rng.random::<f64>() < self.config.pi {
                    let session = sessions
                        .entry(ep.vocab.source_doc_ids())
                        .or_insert_with(|| PolicySession::new(&self.params, &ep.vocab, max_len));
                    (sample_trajectory_with(&ep.prefix, session, &mut self.rng)?, true)
                } else {
                    match self.buffer.sample(&ep.prefix, &mut self.rng) {
                        Ok(tr) => (tr.clone(), false),
                        Err(Error::UnknownPrefix) => (offline(), false),
                        Err(err) => return Err(err),
                    }
                };
                let r = self.reward.log_reward(&traj.states().pop().expect("terminal state"))?.exp();
                self.buffer.insert(&ep.prefix, traj.clone(), r)?;
                picked.push((e, traj, r, was_online));
            }
            drop(sessions);

            let b = batch.len() as f64;
            let mut tape = Tape::new(&self.params.set);
            let mut units: HashMap<Vec<DocId>, NodeId> = HashMap::new();
            let mut seeds = Vec::new();
            let (mut loss_sum, mut reward_sum, mut online) = (0.0, 0.0, 0usize);
            for (e, traj, r, was_online) in &picked {
                let ep = &episodes[*e];
                let u = match units.get(&ep.vocab.source_doc_ids()) {
                    Some(&u) => u,
                    None => {
                        let u = unit_vectors(&mut tape, &self.params, &ep.vocab, &ep.layout);
                        units.insert(ep.vocab.source_doc_ids(), u);
                        u
                    }
                };
                require_complete(traj)?;
                let terms = trajectory_terms_with_units(&mut tape, &self.params, &ep.vocab, &ep.layout, u, traj, max_len)?;
                let (loss, s) = if mle {
                    mle_seeds(&tape, &terms, 1.0 / b)
                } else {
                    let st = state_terms(traj, &ep.vocab, &self.reward, &self.config)?;
                    subtb_seeds(&tape, &terms, &st, 1.0 / b)
                };
                seeds.extend(s);
                loss_sum += loss;
                reward_sum += r;
                online += *was_online as usize;
            }
            let mut grads = tape.backward(&seeds);
            drop(tape);
            clip_global_norm(&mut grads, self.config.grad_clip);
            self.adam.config.lr = self.lr_at(self.step);
            self.adam.step(&mut self.params.set, &grads);
            self.step += 1;
            self.log.push(StepLog {
                epoch,
                step: self.step,
                loss: loss_sum / b,
                mean_reward: reward_sum / b,
                online: online as f64 / b,
            });
            stats.mean_loss += loss_sum;
            stats.mean_reward += reward_sum;
            stats.online_fraction += online as f64;
        }
        let n = items.len().max(1) as f64;
        stats.mean_loss /= n;
        stats.mean_reward /= n;
        stats.online_fraction /= n;
        Ok(stats)
    }

    /// Linearly decayed learning rate for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.config;
        if c.decay_steps == 0 {
            return c.lr;
        }
        let f = (step as f64 / c.decay_steps as f64).min(1.0);
        c.lr + (c.lr_final - c.lr) * f
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for entry in &self.log {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use crate::policy::PolicyConfig;
    use proptest::prelude::*;
    use rand::Rng;

    struct LenReward;
    impl RewardFn for LenReward {
        fn log_reward(&self, s: &State) -> Result<f64> {
            Ok(-(s.generated.len() as f64) * 0.3 + s.generated.iter().map(|&t| t as f64 * 0.01).sum::<f64>())
        }
    }

    fn cfg(ends: Vec<TokenId>) -> TrainConfig {
        TrainConfig {
            sentence_end_tokens: ends,
            max_len: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn valid_state_rule() {
        let c = cfg(vec![5]);
        let s = State::initial(vec![2]);
        assert!(is_valid_state(&s, &c));
        assert!(is_valid_state(&s.append(&[3, 5]), &c));
        assert!(!is_valid_state(&s.append(&[5, 3]), &c));
    }

    #[test]
    fn single_pair_collapses_to_full_trajectory_ratio() {
        let log_r = [0.4, 0.0, -1.2];
        let log_pt = [-2.0, -1.0, -0.5];
        let pf = [-0.7, -0.3];
        let pb = [0.0, -0.69];
        let valid = [true, false, true];
        let t = subtb_from_logs(&log_r, &log_pt, &pf, &pb, &valid);
        let d = (0.4 + (-0.7 - 0.3) + -0.5) - (-1.2 + (0.0 - 0.69) + -2.0);
        assert!((t.loss - d * d).abs() < 1e-12);
        let none = subtb_from_logs(&log_r, &log_pt, &pf, &pb, &[true, false, false]);
        assert_eq!(none.loss, 0.0);
    }

    proptest! {
        #[test]
        fn subtb_gradient_matches_differences(
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut r = rng::stream(seed, &[]);
            let mut v = |k: usize| (0..k).map(|_| r.random_range(-2.0..0.0)).collect::<Vec<f64>>();
            let log_r = v(n + 1);
            let log_pt = v(n + 1);
            let pf = v(n);
            let pb = v(n);
            let valid: Vec<bool> = (0..=n).map(|i| i == 0 || (seed >> i) & 1 == 1 || i == n).collect();
            let t = subtb_from_logs(&log_r, &log_pt, &pf, &pb, &valid);
            prop_assert!(t.loss >= 0.0);
            let h = 1e-6;
            for i in 0..=n {
                let mut a = log_pt.clone();
                a[i] += h;
                let mut b = log_pt.clone();
                b[i] -= h;
                let num = (subtb_from_logs(&log_r, &a, &pf, &pb, &valid).loss
                    - subtb_from_logs(&log_r, &b, &pf, &pb, &valid).loss) / (2.0 * h);
                prop_assert!((num - t.d_log_pt[i]).abs() < 1e-6 * (1.0 + num.abs()));
            }
            for k in 0..n {
                let mut a = pf.clone();
                a[k] += h;
                let mut b = pf.clone();
                b[k] -= h;
                let num = (subtb_from_logs(&log_r, &log_pt, &a, &pb, &valid).loss
                    - subtb_from_logs(&log_r, &log_pt, &b, &pb, &valid).loss) / (2.0 * h);
                prop_assert!((num - t.d_step_pf[k]).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }

        #[test]
        fn buffer_respects_capacity_and_order(rewards in prop::collection::vec(0.0f64..10.0, 1..30), cap in 1usize..6) {
            let mut b = ReplayBuffer::new(cap);
            for (i, &r) in rewards.iter().enumerate() {
                let t = Trajectory { prefix: vec![2], actions: vec![vec![i as TokenId]], step_logprobs: vec![], terminated: true };
                b.insert(&[2], t, r).unwrap();
            }
            let e = b.entries(&[2]);
            prop_assert!(e.len() <= cap);
            prop_assert!(e.windows(2).all(|w| w[0].reward >= w[1].reward));
            let mut sorted = rewards.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let kept: Vec<f64> = e.iter().map(|x| x.reward).collect();
            prop_assert_eq!(kept, sorted[..e.len()].to_vec());
        }
    }

    fn traj(actions: &[&[TokenId]]) -> Trajectory {
        Trajectory {
            prefix: vec![9],
            actions: actions.iter().map(|a| a.to_vec()).collect(),
            step_logprobs: vec![],
            terminated: true,
        }
    }

    #[test]
    fn buffer_eviction_and_sampling() {
        let mut b = ReplayBuffer::new(2);
        b.insert(&[9], traj(&[&[2]]), 1.0).unwrap();
        b.insert(&[9], traj(&[&[3]]), 2.0).unwrap();
        b.insert(&[9], traj(&[&[4]]), 3.0).unwrap();
        let kept: Vec<f64> = b.entries(&[9]).iter().map(|e| e.reward).collect();
        assert_eq!(kept, vec![3.0, 2.0]);

        let mut b = ReplayBuffer::new(4);
        b.insert(&[9], traj(&[&[2]]), 1.0).unwrap();
        b.insert(&[9], traj(&[&[3]]), 3.0).unwrap();
        b.insert(&[9], traj(&[&[3]]), 3.0).unwrap();
        assert_eq!(b.len(&[9]), 2);
        let mut r = rng::stream(1, &[]);
        let n = 40_000;
        let hits = (0..n).filter(|_| b.sample(&[9], &mut r).unwrap().actions == vec![vec![3]]).count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
        assert!(matches!(b.sample(&[8], &mut r), Err(Error::UnknownPrefix)));
        assert!(b.insert(&[9], traj(&[&[5]]), -1.0).is_err());

        let mut z = ReplayBuffer::new(4);
        z.insert(&[9], traj(&[&[2]]), 0.0).unwrap();
        z.insert(&[9], traj(&[&[3]]), 0.0).unwrap();
        let hits = (0..n).filter(|_| z.sample(&[9], &mut r).unwrap().actions == vec![vec![3]]).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    fn toy() -> (Corpus, DynamicVocabulary) {
        let corpus = Corpus::from_texts(&["a b c . d e .", "a b . c d e ."]).unwrap();
        let v = DynamicVocabulary::from_documents(
            &corpus.vocab,
            corpus.documents.clone(),
            &SegmentationConfig::default(),
        );
        (corpus, v)
    }

    #[test]
    fn offline_trajectory_from_pieces() {
        let (corpus, vocab) = toy();
        let t = |s: &str| corpus.vocab.tokenize(s);
        let seg = Segmentation {
            doc_id: 0,
            threshold_index: 0,
            pieces: vec![
                crate::segmentation::Piece { tokens: t("a b"), provenance: None },
                crate::segmentation::Piece { tokens: t("c . d"), provenance: None },
                crate::segmentation::Piece { tokens: t("e ."), provenance: None },
            ],
        };
        let tr = offline_trajectory(&seg, 3, &vocab, 10);
        assert_eq!(tr.prefix, t("a b c"));
        assert_eq!(tr.actions, vec![t(". d"), t("e .")]);
        assert_eq!(tr.generated(), t(". d e ."));
        let states = tr.states();
        assert_eq!(states.len(), 4);
        assert!(states[3].terminated);

        let short = offline_trajectory(&seg, 3, &vocab, 3);
        assert_eq!(short.generated(), t(". d e"));
        assert_eq!(short.actions, vec![t(". d"), t("e")]);
    }

    fn small_params(corpus: &Corpus) -> PolicyParams {
        PolicyParams::init(
            PolicyConfig {
                vocab_size: corpus.vocab.len(),
                d: 8,
                layers: 1,
                heads: 2,
                context: 16,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn tape_loss_matches_policy_loss() {
        let (corpus, vocab) = toy();
        let params = small_params(&corpus);
        let t = |s: &str| corpus.vocab.tokenize(s);
        let tr = Trajectory {
            prefix: t("a b"),
            actions: vec![t("c ."), t("d"), t("e .")],
            step_logprobs: vec![],
            terminated: true,
        };
        let c = cfg(corpus.vocab.sentence_end_ids());
        let layout = UnitLayout::new(&vocab);
        let (l1, _) = subtb_loss_and_grad(&tr, &params, &vocab, &layout, &LenReward, &c).unwrap();
        let session = PolicySession::new(&params, &vocab, c.max_len);
        let l2 = subtb_loss(&tr, &session, &LenReward, &c).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * (1.0 + l1));
        assert!(l1 > 0.0);

        let mut open = tr.clone();
        open.terminated = false;
        assert!(subtb_loss(&open, &session, &LenReward, &c).is_err());
    }

    #[test]
    fn resegmented_trajectories_share_valid_pairs() {
        let (corpus, vocab) = toy();
        let params = small_params(&corpus);
        let t = |s: &str| corpus.vocab.tokenize(s);
        let c = cfg(corpus.vocab.sentence_end_ids());
        let session = PolicySession::new(&params, &vocab, c.max_len);
        let a = Trajectory { prefix: t("a"), actions: vec![t("b ."), t("c"), t("d e .")], step_logprobs: vec![], terminated: true };
        let b = Trajectory { prefix: t("a"), actions: vec![t("b"), t("."), t("c d"), t("e .")], step_logprobs: vec![], terminated: true };
        let va: Vec<State> = a.states().into_iter().filter(|s| !s.terminated && is_valid_state(s, &c)).collect();
        let vb: Vec<State> = b.states().into_iter().filter(|s| !s.terminated && is_valid_state(s, &c)).collect();
        assert_eq!(va, vb);
        assert!(subtb_loss(&a, &session, &LenReward, &c).unwrap() >= 0.0);
    }

    #[test]
    fn first_epoch_is_offline_and_training_is_deterministic() {
        let corpus = Corpus::from_texts(&["a b . c d .", "a b . d c .", "a b . c c ."]).unwrap();
        let index = CorpusIndex::build(corpus.documents.clone(), 2, 3).unwrap();
        let seg = SegmentationConfig::default();
        let episodes = build_episodes(&index, &corpus.vocab, &seg, 3, 4);
        assert_eq!(episodes.len(), 3);
        let c = TrainConfig {
            sentence_end_tokens: corpus.vocab.sentence_end_ids(),
            max_len: 4,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(c.clone(), small_params(&corpus), &LenReward).unwrap();
            let s1 = tr.train_epoch(&episodes, 1).unwrap();
            let s2 = tr.train_epoch(&episodes, 2).unwrap();
            let mut buf = Vec::new();
            tr.write_log(&mut buf).unwrap();
            (s1, s2, buf, tr.params.set.clone())
        };
        let (s1, s2, log1, p1) = run();
        assert_eq!(s1.online_fraction, 0.0);
        assert_eq!(s1.items, 9);
        assert!(s2.mean_loss.is_finite());
        let (_, _, log2, p2) = run();
        assert_eq!(log1, log2);
        assert_eq!(p1, p2);
    }
}
