//! Terminal rewards: `log R = α·log p_LM + (1 − α)·log σ(f_PM)`.
//!
//! `p_LM` is an add-δ trigram model that scores the continuation after the
//! prefix plus an end-of-sequence event; `f_PM` is a causal encoder with a
//! scalar head trained with a Bradley–Terry loss.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOT};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Encoder, EncoderShape, Mat, NodeId, ParamSet, Tape};
use crate::policy::{CheckpointMeta, State};
use crate::rng;

/// Context filler before the first token.
pub const PAD: TokenId = TokenId::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigramConfig {
    pub delta: f64,
    /// Count the end-of-sequence event when fitting.
    pub count_eos: bool,
}

impl Default for TrigramConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            count_eos: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrigramLM {
    pub delta: f64,
    pub vocab_size: usize,
    pub eos: TokenId,
    unigrams: HashMap<TokenId, u64>,
    bigrams: HashMap<(TokenId, TokenId), u64>,
    trigrams: HashMap<(TokenId, TokenId, TokenId), u64>,
    contexts: HashMap<(TokenId, TokenId), u64>,
}

#[derive(Serialize, Deserialize)]
struct TrigramFile {
    #[serde(default)]
    tag: String,
    delta: f64,
    vocab_size: usize,
    eos: TokenId,
    unigrams: BTreeMap<TokenId, u64>,
    bigrams: Vec<([TokenId; 2], u64)>,
    trigrams: Vec<([TokenId; 3], u64)>,
}

fn context_at(tokens: &[TokenId], i: usize) -> (TokenId, TokenId) {
    let a = if i >= 2 { tokens[i - 2] } else { PAD };
    let b = if i >= 1 { tokens[i - 1] } else { PAD };
    (a, b)
}

impl TrigramLM {
    /// `vocab_size` is the full table size, reserved ids included.
    pub fn fit(docs: &[Vec<TokenId>], vocab_size: usize, cfg: TrigramConfig) -> Result<Self> {
        if docs.iter().all(|d| d.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        if cfg.delta <= 0.0 || !cfg.delta.is_finite() {
            return Err(Error::Config("delta must be positive".into()));
        }
        let mut lm = Self {
            delta: cfg.delta,
            vocab_size,
            eos: EOT,
            unigrams: HashMap::new(),
            bigrams: HashMap::new(),
            trigrams: HashMap::new(),
            contexts: HashMap::new(),
        };
        for doc in docs {
            let mut seq = doc.clone();
            if cfg.count_eos {
                seq.push(EOT);
            }
            for (i, &w) in seq.iter().enumerate() {
                *lm.unigrams.entry(w).or_default() += 1;
                if i >= 1 {
                    *lm.bigrams.entry((seq[i - 1], w)).or_default() += 1;
                }
                let (a, b) = context_at(&seq, i);
                *lm.trigrams.entry((a, b, w)).or_default() += 1;
            }
        }
        lm.rebuild_contexts();
        Ok(lm)
    }

    fn rebuild_contexts(&mut self) {
        self.contexts.clear();
        for (&(a, b, _), &c) in &self.trigrams {
            *self.contexts.entry((a, b)).or_default() += c;
        }
    }

    pub fn trigram_count(&self, a: TokenId, b: TokenId, w: TokenId) -> u64 {
        self.trigrams.get(&(a, b, w)).copied().unwrap_or(0)
    }

    pub fn context_count(&self, a: TokenId, b: TokenId) -> u64 {
        self.contexts.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn unigram_count(&self, w: TokenId) -> u64 {
        self.unigrams.get(&w).copied().unwrap_or(0)
    }

    pub fn bigram_count(&self, a: TokenId, w: TokenId) -> u64 {
        self.bigrams.get(&(a, w)).copied().unwrap_or(0)
    }

    /// `p(w | a b)`; use [`PAD`] for missing context.
    pub fn cond_prob(&self, a: TokenId, b: TokenId, w: TokenId) -> f64 {
        let num = self.trigram_count(a, b, w) as f64 + self.delta;
        let den = self.context_count(a, b) as f64 + self.delta * self.vocab_size as f64;
        num / den
    }

    /// `Σ_{i=M+1..N} log p(w_i | w_{i-2} w_{i-1})` plus the end-of-sequence term.
    pub fn lm_logprob(&self, tokens: &[TokenId], prefix_len: usize) -> Result<f64> {
        if prefix_len > tokens.len() {
            return Err(Error::PrefixTooLong {
                prefix: prefix_len,
                len: tokens.len(),
            });
        }
        let mut total = 0.0;
        for i in prefix_len..tokens.len() {
            let (a, b) = context_at(tokens, i);
            total += self.cond_prob(a, b, tokens[i]).ln();
        }
        let (a, b) = context_at(tokens, tokens.len());
        Ok(total + self.cond_prob(a, b, self.eos).ln())
    }

    pub fn write_json<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.write_json_tagged(w, "")
    }

    pub fn write_json_tagged<W: std::io::Write>(&self, w: W, tag: &str) -> Result<()> {
        let mut bigrams: Vec<_> = self.bigrams.iter().map(|(&(a, b), &c)| ([a, b], c)).collect();
        bigrams.sort_unstable();
        let mut trigrams: Vec<_> = self.trigrams.iter().map(|(&(a, b, c), &n)| ([a, b, c], n)).collect();
        trigrams.sort_unstable();
        let file = TrigramFile {
            tag: tag.to_string(),
            delta: self.delta,
            vocab_size: self.vocab_size,
            eos: self.eos,
            unigrams: self.unigrams.iter().map(|(&k, &v)| (k, v)).collect(),
            bigrams,
            trigrams,
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(Self::read_json_tagged(r)?.0)
    }

    pub fn read_json_tagged<R: std::io::Read>(r: R) -> Result<(Self, String)> {
        let f: TrigramFile = serde_json::from_reader(r)?;
        let mut lm = Self {
            delta: f.delta,
            vocab_size: f.vocab_size,
            eos: f.eos,
            unigrams: f.unigrams.into_iter().collect(),
            bigrams: f.bigrams.into_iter().map(|([a, b], c)| ((a, b), c)).collect(),
            trigrams: f.trigrams.into_iter().map(|([a, b, c], n)| ((a, b, c), n)).collect(),
            contexts: HashMap::new(),
        };
        lm.rebuild_contexts();
        Ok((lm, f.tag))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub margin: f64,
    pub lambda: f64,
}

impl Default for PmConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 1,
            heads: 2,
            context: 128,
            margin: 0.0,
            lambda: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreferenceModel {
    pub config: PmConfig,
    pub vocab_size: usize,
    pub set: ParamSet,
    encoder: Encoder,
    head_w: usize,
    head_b: usize,
}

/// Mean Bradley–Terry loss with score centring over `(f⁺, f⁻)` pairs and its
/// gradient with respect to each score.
pub fn pm_loss(scores: &[(f64, f64)], margin: f64, lambda: f64) -> Result<(f64, Vec<(f64, f64)>)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("preference batch"));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for &(p, q) in scores {
        let x = p - q - margin;
        let s = p + q;
        loss += -log_sigmoid(x) + lambda * s * s;
        let g = -sigmoid(-x);
        grads.push(((g + 2.0 * lambda * s) / n, (-g + 2.0 * lambda * s) / n));
    }
    Ok((loss / n, grads))
}

impl PreferenceModel {
    pub fn init(config: PmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.d % config.heads != 0 || config.context == 0 {
            return Err(Error::Config("invalid preference-model shape".into()));
        }
        if config.margin < 0.0 || config.lambda < 0.0 {
            return Err(Error::Config("margin and lambda must be non-negative".into()));
        }
        let mut rng = rng::stream(seed, &[rng::domain::PM_INIT]);
        let mut set = ParamSet::new();
        let shape = EncoderShape {
            vocab_size,
            d: config.d,
            layers: config.layers,
            heads: config.heads,
            context: config.context,
        };
        let encoder = Encoder::init(&mut set, "pm", shape, true, &mut rng);
        let head_w = set.add_normal("pm.head.w", config.d, 1, 0.1 / (config.d as f64).sqrt(), &mut rng);
        let head_b = set.add("pm.head.b", Mat::zeros(1, 1));
        Ok(Self {
            config,
            vocab_size,
            set,
            encoder,
            head_w,
            head_b,
        })
    }

    /// The last `context` tokens are scored.
    fn window<'t>(&self, tokens: &'t [TokenId]) -> Result<&'t [TokenId]> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("preference-model input"));
        }
        Ok(&tokens[tokens.len().saturating_sub(self.config.context)..])
    }

    fn score_node(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<NodeId> {
        let ids: Vec<usize> = self.window(tokens)?.iter().map(|&t| t as usize).collect();
        let h = self.encoder.forward(tape, &ids);
        let last = tape.gather_rows(h, &[ids.len() - 1]);
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        let s = tape.matmul(last, w);
        Ok(tape.add(s, b))
    }

    /// Scalar logit `f_PM(tokens)`.
    pub fn score(&self, tokens: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new(&self.set);
        let s = self.score_node(&mut tape, tokens)?;
        Ok(tape.value(s).data[0])
    }

    pub fn log_prob(&self, tokens: &[TokenId]) -> Result<f64> {
        Ok(log_sigmoid(self.score(tokens)?))
    }

    /// Loss of the batch and its gradient for every parameter tensor.
    pub fn loss_and_grad(&self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new(&self.set);
        let mut nodes = Vec::with_capacity(pairs.len());
        let mut scores = Vec::with_capacity(pairs.len());
        for (pos, neg) in pairs {
            let a = self.score_node(&mut tape, pos)?;
            let b = self.score_node(&mut tape, neg)?;
            scores.push((tape.value(a).data[0], tape.value(b).data[0]));
            nodes.push((a, b));
        }
        let (loss, grads) = pm_loss(&scores, self.config.margin, self.config.lambda)?;
        let mut seeds = Vec::with_capacity(2 * nodes.len());
        for ((a, b), (ga, gb)) in nodes.into_iter().zip(grads) {
            seeds.push((a, Mat::filled(1, 1, ga)));
            seeds.push((b, Mat::filled(1, 1, gb)));
        }
        Ok((loss, tape.backward(&seeds)))
    }

    pub fn loss(&self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
        let mut scores = Vec::with_capacity(pairs.len());
        for (p, n) in pairs {
            scores.push((self.score(p)?, self.score(n)?));
        }
        Ok(pm_loss(&scores, self.config.margin, self.config.lambda)?.0)
    }

    pub fn accuracy(&self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("preference pairs"));
        }
        let mut correct = 0;
        for (p, n) in pairs {
            if self.score(p)? > self.score(n)? {
                correct += 1;
            }
        }
        Ok(correct as f64 / pairs.len() as f64)
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.save_tagged(w, "")
    }

    pub fn save_tagged<W: std::io::Write>(&self, w: W, tag: &str) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: (self.config, self.vocab_size),
            tag: tag.to_string(),
        })?;
        self.set.write_checkpoint(w, &meta)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(Self::load_tagged(r)?.0)
    }

    pub fn load_tagged<R: std::io::Read>(r: R) -> Result<(Self, String)> {
        let (set, meta) = ParamSet::read_checkpoint(r)?;
        let meta: CheckpointMeta<(PmConfig, usize)> = serde_json::from_str(&meta)?;
        let (config, vocab_size) = meta.config;
        let mut pm = Self::init(config, vocab_size, 0)?;
        pm.set.check_layout(&set)?;
        pm.set = set;
        Ok((pm, meta.tag))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of pairs kept out of training for the reported loss.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for PmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 8,
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PmReport {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub final_train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

/// Pairs `positives[i]` with `negatives[i]` and minimises the preference
/// loss with Adam on minibatches.
pub fn train_pm(
    pm: &mut PreferenceModel,
    positives: &[Vec<TokenId>],
    negatives: &[Vec<TokenId>],
    cfg: &PmTrainConfig,
) -> Result<PmReport> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyInput("preference training set"));
    }
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = positives
        .iter()
        .cloned()
        .zip(negatives.iter().cloned())
        .collect();
    let mut heldout_n = (pairs.len() as f64 * cfg.heldout_fraction).floor() as usize;
    if heldout_n >= pairs.len() {
        heldout_n = pairs.len() - 1;
    }
    let (train, heldout) = pairs.split_at(pairs.len() - heldout_n);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &pm.set,
    );
    let mut rng = rng::stream(cfg.seed, &[rng::domain::PM_TRAIN]);
    let batch = cfg.batch_size.clamp(1, train.len());
    let mut last = f64::NAN;
    for _ in 0..cfg.steps {
        let items: Vec<_> = (0..batch)
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let (loss, grads) = pm.loss_and_grad(&items)?;
        adam.step(&mut pm.set, &grads);
        last = loss;
    }
    if cfg.steps == 0 {
        last = pm.loss(train)?;
    }
    let (heldout_loss, heldout_accuracy) = if heldout.is_empty() {
        (None, None)
    } else {
        (Some(pm.loss(heldout)?), Some(pm.accuracy(heldout)?))
    };
    Ok(PmReport {
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
        final_train_loss: last,
        heldout_loss,
        heldout_accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(Error::Config("alpha must lie in (0, 1)".into()))
        }
    }
}

/// `p_LM^α · p_PM^{1−α}` evaluated in log space.
pub fn combine_log(alpha: f64, log_lm: f64, log_pm: f64) -> f64 {
    alpha * log_lm + (1.0 - alpha) * log_pm
}

pub fn combine(alpha: f64, p_lm: f64, p_pm: f64) -> f64 {
    combine_log(alpha, p_lm.ln(), p_pm.ln()).exp()
}

/// Source of terminal log-rewards.
pub trait RewardFn {
    fn log_reward(&self, state: &State) -> Result<f64>;

    fn reward(&self, state: &State) -> Result<f64> {
        Ok(self.log_reward(state)?.exp())
    }
}

#[derive(Clone, Debug)]
pub struct RewardModels {
    pub lm: TrigramLM,
    pub pm: PreferenceModel,
    pub config: RewardConfig,
}

impl RewardFn for RewardModels {
    fn log_reward(&self, state: &State) -> Result<f64> {
        if !state.terminated {
            return Err(Error::InvalidState("reward is defined on terminated states only".into()));
        }
        let tokens = state.tokens();
        let log_lm = self.lm.lm_logprob(&tokens, state.prefix.len())?;
        let log_pm = self.pm.log_prob(&tokens)?;
        Ok(combine_log(self.config.alpha, log_lm, log_pm))
    }
}

/// Reward of a terminated state under the two models.
pub fn reward(state: &State, lm: &TrigramLM, pm: &PreferenceModel, cfg: &RewardConfig) -> Result<f64> {
    RewardModels {
        lm: lm.clone(),
        pm: pm.clone(),
        config: *cfg,
    }
    .reward(state)
}
