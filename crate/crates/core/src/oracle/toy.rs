//! A small enumerable environment: four word tokens, ten documents sharing
//! one prefix sentence, a trigram + preference reward, and exact targets.

use crate::cli::config::RunConfig;
use crate::cli::pipeline::Workspace;
use crate::corpus::{Corpus, TokenId};
use crate::dynvocab::DynamicVocabulary;
use crate::error::Result;
use crate::oracle::{exact_terminal_distribution, reward_distribution, tv_distance, Distribution, EnumeratedSpace};
use crate::policy::{PolicyParams, PolicySession};
use crate::reward::RewardModels;
use crate::trainer::{StepLog, Trainer};

pub const TOY_DOCS: [&str; 10] = [
    "a b . c a .",
    "a b . b c .",
    "a b . c c a",
    "a b . a c .",
    "a b . c a b",
    "a b . b a .",
    "a b . c b .",
    "a b . a a c",
    "a b . c a .",
    "a b . b c a",
];

pub struct ToyEnv {
    pub workspace: Workspace,
    pub prefix: Vec<TokenId>,
    pub vocab: DynamicVocabulary,
    pub reward: RewardModels,
    pub space: EnumeratedSpace,
    pub target: Distribution,
}

pub struct ToyRun {
    pub params: PolicyParams,
    pub log: Vec<StepLog>,
    pub tv: f64,
}

impl ToyEnv {
    /// Builds the environment for `config`, normally a variant of
    /// [`RunConfig::toy`]; the corpus is always [`TOY_DOCS`].
    pub fn build(config: RunConfig) -> Result<Self> {
        let ws = Workspace::new(config, Corpus::from_texts(&TOY_DOCS)?)?;
        Self::from_workspace(ws)
    }

    pub fn from_workspace(workspace: Workspace) -> Result<Self> {
        let (lm, (pm, _)) = (workspace.fit_lm()?, workspace.train_pm()?);
        let reward = workspace.reward_models(lm, pm);
        let (prefix, _) = workspace.split(workspace.config.eval.doc_index)?;
        let vocab = workspace.inference_vocab(&prefix);
        let space = EnumeratedSpace::build(&vocab, &prefix, workspace.max_len(), workspace.config.eval.bound as u128)?;
        let target = reward_distribution(&space, &reward)?;
        Ok(Self {
            workspace,
            prefix,
            vocab,
            reward,
            space,
            target,
        })
    }

    pub fn exact(&self, params: &PolicyParams) -> Result<Distribution> {
        let session = PolicySession::new(params, &self.vocab, self.workspace.max_len());
        exact_terminal_distribution(&session, &self.space)
    }

    pub fn tv(&self, params: &PolicyParams) -> Result<f64> {
        Ok(tv_distance(&self.exact(params)?, &self.target))
    }

    pub fn train(&self) -> Result<ToyRun> {
        self.train_observed(|_| Ok(()))
    }

    /// As [`ToyEnv::train`], calling `after_epoch` once per epoch.
    pub fn train_observed(&self, after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<ToyRun> {
        let mut trainer = self.workspace.train_policy(&self.reward, after_epoch)?;
        let tv = self.tv(&trainer.params)?;
        Ok(ToyRun {
            log: std::mem::take(&mut trainer.log),
            params: trainer.params,
            tv,
        })
    }
}
