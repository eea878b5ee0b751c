//! Stages shared by the command line and the toy environment.

use crate::corpus::{split_prefix, Corpus, CorpusIndex, DocId, TokenId};
use crate::dynvocab::{build_vocabulary, DynamicVocabulary};
use crate::error::{Error, Result};
use crate::policy::{sample_trajectory, PolicyParams, PolicySession, UnitLayout};
use crate::reward::{train_pm, PmReport, PmTrainConfig, PreferenceModel, RewardModels, TrigramConfig, TrigramLM};
use crate::rng;
use crate::segmentation::{segment_document, Segmentation, SegmentationConfig};
use crate::trainer::{build_episodes, offline_trajectory, Episode, TrainConfig, Trainer};

use super::config::{RunConfig, ValidStates};

/// A validated config together with its corpus and retrieval index.
pub struct Workspace {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub index: CorpusIndex,
    pub seg: SegmentationConfig,
}

impl Workspace {
    pub fn new(config: RunConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let index = CorpusIndex::build(corpus.documents.clone(), config.corpus.k_train, config.corpus.k_infer)?;
        Ok(Self {
            seg: config.segmentation_config(),
            config,
            corpus,
            index,
        })
    }

    pub fn load(config: RunConfig) -> Result<Self> {
        let corpus = Corpus::load(&config.corpus.path)?;
        Self::new(config, corpus)
    }

    pub fn max_len(&self) -> usize {
        self.config.train.max_len
    }

    /// Prefix and residual of document `doc_index`.
    pub fn split(&self, doc_index: usize) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let doc = self
            .corpus
            .documents
            .get(doc_index)
            .ok_or_else(|| Error::Config(format!("document {doc_index} is out of range")))?;
        Ok(split_prefix(doc, self.config.corpus.target_len, &self.corpus.vocab.sentence_end_ids()))
    }

    /// Span vocabulary from the top-`k_infer` documents for `prefix`.
    pub fn span_vocab(&self, prefix: &[TokenId]) -> DynamicVocabulary {
        build_vocabulary(prefix, &self.corpus.vocab, &self.index, self.index.k_infer, &self.seg)
    }

    /// Inference action set; single tokens only when spans are disabled.
    pub fn inference_vocab(&self, prefix: &[TokenId]) -> DynamicVocabulary {
        if self.config.train.use_spans {
            self.span_vocab(prefix)
        } else {
            DynamicVocabulary::tokens_only(&self.corpus.vocab)
        }
    }

    /// Segmentations of every document against its own training references.
    pub fn segmentations(&self) -> Vec<(DocId, Vec<Segmentation>)> {
        self.episodes_with_spans()
            .iter()
            .map(|ep| {
                let doc = self.index.document(ep.doc_id).expect("indexed");
                let refs: Vec<&_> = ep.vocab.source_docs().iter().collect();
                (ep.doc_id, segment_document(doc, &refs, &self.seg))
            })
            .collect()
    }

    fn episodes_with_spans(&self) -> Vec<Episode> {
        build_episodes(
            &self.index,
            &self.corpus.vocab,
            &self.seg,
            self.config.corpus.target_len,
            self.max_len(),
        )
    }

    /// Training episodes. Without spans every action is a single token and
    /// the offline trajectories are the token sequences.
    pub fn episodes(&self) -> Vec<Episode> {
        let mut episodes = self.episodes_with_spans();
        if !self.config.train.use_spans {
            let vocab = DynamicVocabulary::tokens_only(&self.corpus.vocab);
            for ep in &mut episodes {
                let doc = self.index.document(ep.doc_id).expect("indexed");
                ep.offline = segment_document(doc, &[doc], &self.seg)
                    .iter()
                    .map(|s| offline_trajectory(s, ep.prefix.len(), &vocab, self.max_len()))
                    .collect();
                ep.layout = UnitLayout::new(&vocab);
                ep.vocab = vocab.clone();
            }
        }
        episodes
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        let sentence_end_tokens = match t.valid_states {
            ValidStates::Sentence => self.corpus.vocab.sentence_end_ids(),
            ValidStates::All => self.corpus.vocab.word_ids().collect(),
        };
        TrainConfig {
            pi: t.pi,
            lr: t.lr,
            lr_final: t.lr_final,
            decay_steps: t.decay_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            buffer_capacity: t.buffer_capacity,
            sentence_end_tokens,
            max_len: t.max_len,
            warmup_mle: t.warmup_mle,
            grad_clip: t.grad_clip,
            seed: self.config.seed,
        }
    }

    pub fn fit_lm(&self) -> Result<TrigramLM> {
        let texts: Vec<Vec<TokenId>> = self.corpus.documents.iter().map(|d| d.tokens.clone()).collect();
        TrigramLM::fit(
            &texts,
            self.corpus.vocab.len(),
            TrigramConfig {
                delta: self.config.reward.delta,
                count_eos: self.config.reward.count_eos,
            },
        )
    }

    /// Preference pairs: each document's prefix with its true continuation
    /// against a continuation sampled from an untrained policy. Negatives
    /// always use span vocabularies so the reward does not depend on
    /// `use_spans`.
    pub fn preference_pairs(&self) -> Result<(Vec<Vec<TokenId>>, Vec<Vec<TokenId>>)> {
        let seed = self.config.seed;
        let policy = PolicyParams::init(
            self.config.policy_config(self.corpus.vocab.len()),
            rng::derive(seed, &[rng::domain::NEGATIVES]),
        )?;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for i in 0..self.corpus.documents.len() {
            let (prefix, residual) = self.split(i)?;
            let mut pos = prefix.clone();
            pos.extend(residual.iter().take(self.max_len()));
            let vocab = self.span_vocab(&prefix);
            let session = PolicySession::new(&policy, &vocab, self.max_len());
            let t = sample_trajectory(&prefix, &session, rng::derive(seed, &[rng::domain::NEGATIVES, i as u64]))?;
            let mut neg = prefix;
            neg.extend(t.generated());
            positives.push(pos);
            negatives.push(neg);
        }
        Ok((positives, negatives))
    }

    pub fn train_pm(&self) -> Result<(PreferenceModel, PmReport)> {
        let (positives, negatives) = self.preference_pairs()?;
        let r = &self.config.reward;
        let mut pm = PreferenceModel::init(self.config.pm_config(), self.corpus.vocab.len(), self.config.seed)?;
        let report = train_pm(
            &mut pm,
            &positives,
            &negatives,
            &PmTrainConfig {
                steps: r.pm_steps,
                lr: r.pm_lr,
                batch_size: r.pm_batch_size,
                heldout_fraction: r.heldout_fraction,
                seed: self.config.seed,
            },
        )?;
        Ok((pm, report))
    }

    pub fn reward_models(&self, lm: TrigramLM, pm: PreferenceModel) -> RewardModels {
        RewardModels {
            lm,
            pm,
            config: self.config.reward_config(),
        }
    }

    pub fn init_policy(&self) -> Result<PolicyParams> {
        PolicyParams::init(self.config.policy_config(self.corpus.vocab.len()), self.config.seed)
    }

    /// Runs every configured epoch, calling `after_epoch` after each.
    pub fn train_policy<'r>(
        &self,
        reward: &'r RewardModels,
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Trainer<'r>> {
        let episodes = self.episodes();
        let mut trainer = Trainer::new(self.train_config(), self.init_policy()?, reward)?;
        for epoch in 1..=self.config.train.epochs {
            trainer.train_epoch(&episodes, epoch)?;
            after_epoch(&trainer)?;
        }
        Ok(trainer)
    }
}
