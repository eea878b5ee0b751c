//! Per-episode action sets: the fixed word vocabulary, the termination
//! action, and every admissible substring of the supporting documents.
//!
//! Actions are keyed by content. A substring that occurs several times keeps
//! one action carrying all of its occurrences; the policy scores occurrences
//! individually and sums their probability mass per action.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::corpus::{CorpusIndex, DocId, Document, TokenId, Vocab};
use crate::segmentation::{Provenance, SegmentationConfig};

pub type ActionId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    FixedToken,
    RetrievedSpan,
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanAction {
    pub kind: ActionKind,
    pub content: Vec<TokenId>,
    pub occurrences: Vec<Provenance>,
}

#[derive(Clone, Debug)]
pub struct DynamicVocabulary {
    actions: Vec<SpanAction>,
    by_content: HashMap<Vec<TokenId>, ActionId>,
    terminal: ActionId,
    source_docs: Vec<Document>,
    max_content_len: usize,
}

/// All contiguous substrings of `doc` with length in `[l_min, l_max]`.
pub fn extract_spans(doc: &Document, cfg: &SegmentationConfig) -> Vec<(Vec<TokenId>, Provenance)> {
    let n = doc.tokens.len();
    let mut out = Vec::new();
    for len in cfg.l_min..=cfg.l_max.min(n) {
        for start in 0..=n - len {
            out.push((
                doc.tokens[start..start + len].to_vec(),
                Provenance {
                    doc_id: doc.doc_id,
                    start,
                    end: start + len,
                },
            ));
        }
    }
    out
}

impl DynamicVocabulary {
    /// Fixed tokens, then ⊤, then spans of `docs` in document order.
    pub fn from_documents(fixed: &Vocab, docs: Vec<Document>, cfg: &SegmentationConfig) -> Self {
        let mut actions = Vec::new();
        let mut by_content = HashMap::new();
        for id in fixed.word_ids() {
            by_content.insert(vec![id], actions.len());
            actions.push(SpanAction {
                kind: ActionKind::FixedToken,
                content: vec![id],
                occurrences: Vec::new(),
            });
        }
        let terminal = actions.len();
        actions.push(SpanAction {
            kind: ActionKind::Terminal,
            content: Vec::new(),
            occurrences: Vec::new(),
        });
        let mut max_content_len = 1;
        for d in &docs {
            for (content, occ) in extract_spans(d, cfg) {
                match by_content.get(&content) {
                    Some(&a) => actions[a].occurrences.push(occ),
                    None => {
                        max_content_len = max_content_len.max(content.len());
                        by_content.insert(content.clone(), actions.len());
                        actions.push(SpanAction {
                            kind: ActionKind::RetrievedSpan,
                            content,
                            occurrences: vec![occ],
                        });
                    }
                }
            }
        }
        Self {
            actions,
            by_content,
            terminal,
            source_docs: docs,
            max_content_len,
        }
    }

    /// Single tokens and ⊤ only: every state has exactly one parent.
    pub fn tokens_only(fixed: &Vocab) -> Self {
        Self::from_documents(fixed, Vec::new(), &SegmentationConfig::default())
    }

    pub fn actions(&self) -> &[SpanAction] {
        &self.actions
    }

    pub fn action(&self, id: ActionId) -> &SpanAction {
        &self.actions[id]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal(&self) -> ActionId {
        self.terminal
    }

    pub fn lookup(&self, content: &[TokenId]) -> Option<ActionId> {
        self.by_content.get(content).copied()
    }

    pub fn source_docs(&self) -> &[Document] {
        &self.source_docs
    }

    pub fn source_doc_ids(&self) -> Vec<DocId> {
        self.source_docs.iter().map(|d| d.doc_id).collect()
    }

    pub fn max_content_len(&self) -> usize {
        self.max_content_len
    }

    pub fn has_spans(&self) -> bool {
        self.actions.iter().any(|a| a.kind == ActionKind::RetrievedSpan)
    }

    /// Actions whose content is a suffix of `generated`.
    pub fn suffix_actions(&self, generated: &[TokenId]) -> Vec<ActionId> {
        let n = generated.len();
        (1..=self.max_content_len.min(n))
            .filter_map(|len| self.lookup(&generated[n - len..]))
            .collect()
    }

    /// Actions whose content equals `text[..j]`'s suffix ending exactly at `j`.
    pub fn actions_ending_at(&self, text: &[TokenId], j: usize) -> Vec<ActionId> {
        self.suffix_actions(&text[..j])
    }

    pub fn dump(&self, fixed: &Vocab) -> VocabularyDump {
        VocabularyDump {
            source_docs: self.source_doc_ids(),
            actions: self
                .actions
                .iter()
                .map(|a| ActionDump {
                    kind: a.kind,
                    content: a.content.iter().map(|&t| fixed.surface(t).to_string()).collect(),
                    occurrences: a.occurrences.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ActionDump {
    pub kind: ActionKind,
    pub content: Vec<String>,
    pub occurrences: usize,
}

#[derive(Debug, Serialize)]
pub struct VocabularyDump {
    pub source_docs: Vec<DocId>,
    pub actions: Vec<ActionDump>,
}

fn docs_by_id(index: &CorpusIndex, ids: &[DocId]) -> Vec<Document> {
    ids.iter()
        .filter_map(|&id| index.document(id).cloned())
        .collect()
}

/// Vocabulary over the top-`k` documents retrieved for `prefix`.
pub fn build_vocabulary(
    prefix: &[TokenId],
    fixed: &Vocab,
    index: &CorpusIndex,
    k: usize,
    cfg: &SegmentationConfig,
) -> DynamicVocabulary {
    let ids = index.retrieve_topk(prefix, k);
    DynamicVocabulary::from_documents(fixed, docs_by_id(index, &ids), cfg)
}

/// Training-episode vocabulary: the episode's own document plus the top-`k`
/// documents retrieved for its prefix, in doc-id order.
pub fn build_training_vocabulary(
    doc: &Document,
    prefix: &[TokenId],
    fixed: &Vocab,
    index: &CorpusIndex,
    k: usize,
    cfg: &SegmentationConfig,
) -> DynamicVocabulary {
    let mut ids: BTreeSet<DocId> = index.retrieve_topk(prefix, k).into_iter().collect();
    ids.remove(&doc.doc_id);
    let mut docs = docs_by_id(index, &ids.into_iter().collect::<Vec<_>>());
    let at = docs.partition_point(|d| d.doc_id < doc.doc_id);
    docs.insert(at, doc.clone());
    DynamicVocabulary::from_documents(fixed, docs, cfg)
}
