//! Run configuration read from TOML, with defaults for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::reward::{PmConfig, RewardConfig};
use crate::segmentation::SegmentationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub segmentation: SegmentationSection,
    pub policy: PolicySection,
    pub reward: RewardSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// One document per line.
    pub path: PathBuf,
    /// Prefix length budget, in tokens, for splitting documents.
    pub target_len: usize,
    pub k_train: usize,
    pub k_infer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub l_min: usize,
    pub l_max: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    /// Additive smoothing of the trigram model.
    pub delta: f64,
    pub count_eos: bool,
    pub margin: f64,
    pub lambda: f64,
    pub pm_d: usize,
    pub pm_layers: usize,
    pub pm_heads: usize,
    pub pm_context: usize,
    pub pm_steps: usize,
    pub pm_lr: f64,
    pub pm_batch_size: usize,
    pub heldout_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidStates {
    /// States ending in `.`, `!` or `?`.
    Sentence,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pi: f64,
    pub lr: f64,
    pub lr_final: f64,
    pub decay_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub max_len: usize,
    pub warmup_mle: bool,
    pub grad_clip: f64,
    pub valid_states: ValidStates,
    /// `false` trains and samples with single tokens only.
    pub use_spans: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub num_samples: usize,
    /// Optional file of prefixes, one per line; defaults to every document's
    /// prefix.
    pub prefixes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Document whose prefix roots the enumerated space.
    pub doc_index: usize,
    pub bound: u64,
    pub qa_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            segmentation: SegmentationSection::default(),
            policy: PolicySection::default(),
            reward: RewardSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus.txt"),
            target_len: 32,
            k_train: 8,
            k_infer: 16,
        }
    }
}

impl Default for SegmentationSection {
    fn default() -> Self {
        let s = SegmentationConfig::default();
        Self {
            l_min: s.l_min,
            l_max: s.l_max,
            thresholds: s.thresholds,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            context: 128,
        }
    }
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            delta: 0.1,
            count_eos: true,
            margin: 0.0,
            lambda: 0.01,
            pm_d: 32,
            pm_layers: 1,
            pm_heads: 2,
            pm_context: 128,
            pm_steps: 200,
            pm_lr: 1e-3,
            pm_batch_size: 8,
            heldout_fraction: 0.2,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pi: 0.8,
            lr: 1e-3,
            lr_final: 1e-3,
            decay_steps: 0,
            epochs: 10,
            batch_size: 8,
            buffer_capacity: 16,
            max_len: 32,
            warmup_mle: true,
            grad_clip: 10.0,
            valid_states: ValidStates::Sentence,
            use_spans: true,
        }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            num_samples: 4,
            prefixes: None,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            doc_index: 0,
            bound: 1_000_000,
            qa_path: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        join(&mut self.corpus.path);
        if let Some(p) = self.sample.prefixes.as_mut() {
            join(p);
        }
        if let Some(p) = self.eval.qa_path.as_mut() {
            join(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn segmentation_config(&self) -> SegmentationConfig {
        SegmentationConfig {
            l_min: self.segmentation.l_min,
            l_max: self.segmentation.l_max,
            thresholds: self.segmentation.thresholds.clone(),
            seed: crate::rng::derive(self.seed, &[crate::rng::domain::SEGMENT]),
        }
    }

    pub fn policy_config(&self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            d: self.policy.d,
            layers: self.policy.layers,
            heads: self.policy.heads,
            context: self.policy.context,
        }
    }

    pub fn pm_config(&self) -> PmConfig {
        PmConfig {
            d: self.reward.pm_d,
            layers: self.reward.pm_layers,
            heads: self.reward.pm_heads,
            context: self.reward.pm_context,
            margin: self.reward.margin,
            lambda: self.reward.lambda,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            alpha: self.reward.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation_config().validate()?;
        self.reward_config().validate()?;
        self.policy_config(1).validate()?;
        let r = &self.reward;
        if !(r.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if r.pm_d == 0 || r.pm_heads == 0 || r.pm_d % r.pm_heads != 0 || r.pm_layers == 0 || r.pm_context == 0 {
            return Err(Error::Config("preference model shape is invalid".into()));
        }
        if !(r.pm_lr > 0.0) || r.pm_batch_size == 0 || !(0.0..1.0).contains(&r.heldout_fraction) {
            return Err(Error::Config("preference training settings are invalid".into()));
        }
        if self.corpus.k_train == 0 || self.corpus.k_infer == 0 || self.corpus.target_len == 0 {
            return Err(Error::Config("retrieval depths and target_len must be at least 1".into()));
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.pi) || !(t.lr > 0.0) || !(t.lr_final > 0.0) {
            return Err(Error::Config("train.pi must lie in [0, 1] and learning rates must be positive".into()));
        }
        if t.batch_size == 0 || t.buffer_capacity == 0 || t.max_len == 0 || t.epochs == 0 {
            return Err(Error::Config("train sizes must be at least 1".into()));
        }
        if self.sample.num_samples == 0 || self.eval.bound == 0 {
            return Err(Error::Config("num_samples and eval.bound must be at least 1".into()));
        }
        Ok(())
    }

    /// The enumerable toy environment: four words, ten documents, spans up to
    /// the whole continuation and a budget of about 2000 steps.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection {
                path: PathBuf::from("toy.txt"),
                target_len: 3,
                k_train: 10,
                k_infer: 10,
            },
            segmentation: SegmentationSection::default(),
            policy: PolicySection {
                d: 32,
                layers: 1,
                heads: 4,
                context: 16,
            },
            reward: RewardSection {
                pm_d: 16,
                pm_heads: 2,
                pm_context: 16,
                pm_steps: 100,
                pm_lr: 1e-2,
                pm_batch_size: 5,
                heldout_fraction: 0.0,
                ..RewardSection::default()
            },
            train: TrainSection {
                lr: 1e-3,
                lr_final: 1e-4,
                decay_steps: 1998,
                epochs: 666,
                batch_size: 10,
                buffer_capacity: 32,
                max_len: 4,
                valid_states: ValidStates::All,
                ..TrainSection::default()
            },
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}
