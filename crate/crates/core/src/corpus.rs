//! Corpus ingestion: word-level tokenisation, the fixed vocabulary, TF-IDF
//! document retrieval and sentence-aligned prefix splitting.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type DocId = u32;

pub const UNK: TokenId = 0;
/// Termination symbol, also the end-of-sequence token of the n-gram LM.
pub const EOT: TokenId = 1;
pub const UNK_SURFACE: &str = "<unk>";
pub const EOT_SURFACE: &str = "<eot>";
pub const RESERVED: usize = 2;

const SENTENCE_PUNCT: [char; 3] = ['.', '!', '?'];

/// Splits text into word surfaces: whitespace separates words and each of
/// `. ! ?` becomes a standalone token.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in word.char_indices() {
            if SENTENCE_PUNCT.contains(&ch) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

pub fn is_sentence_end(surface: &str) -> bool {
    surface.len() == 1 && surface.starts_with(SENTENCE_PUNCT)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    surfaces: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(surfaces: Vec<String>) -> Self {
        let mut v = Self {
            surfaces,
            ids: HashMap::new(),
        };
        v.rebuild_lookup();
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.surfaces
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Self {
            surfaces: Vec::new(),
            ids: HashMap::new(),
        };
        v.insert(UNK_SURFACE);
        v.insert(EOT_SURFACE);
        v
    }

    pub fn from_surfaces<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for s in surfaces {
            v.insert(s.as_ref());
        }
        v
    }

    fn insert(&mut self, surface: &str) -> TokenId {
        if let Some(&id) = self.ids.get(surface) {
            return id;
        }
        let id = self.surfaces.len() as TokenId;
        self.surfaces.push(surface.to_string());
        self.ids.insert(surface.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == RESERVED
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.ids.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.surfaces
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_SURFACE)
    }

    /// Ids of the generatable word tokens (everything but the reserved ids).
    pub fn word_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (RESERVED as TokenId)..(self.surfaces.len() as TokenId)
    }

    pub fn sentence_end_ids(&self) -> Vec<TokenId> {
        self.word_ids()
            .filter(|&id| is_sentence_end(self.surface(id)))
            .collect()
    }

    /// Tokenises while growing the vocabulary (corpus build).
    pub fn tokenize_mut(&mut self, text: &str) -> Vec<TokenId> {
        split_words(text).into_iter().map(|w| self.insert(w)).collect()
    }

    /// Tokenises against a frozen vocabulary; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.surface(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One surface per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.surfaces {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut surfaces = Vec::new();
        for line in r.lines() {
            surfaces.push(line?);
        }
        if surfaces.len() < RESERVED
            || surfaces[UNK as usize] != UNK_SURFACE
            || surfaces[EOT as usize] != EOT_SURFACE
        {
            return Err(Error::Config("vocabulary file lacks reserved entries".into()));
        }
        let mut v = Self::new();
        for s in &surfaces[RESERVED..] {
            if v.ids.contains_key(s) {
                return Err(Error::Config(format!("duplicate vocabulary entry {s:?}")));
            }
            v.insert(s);
        }
        Ok(v)
    }

    fn rebuild_lookup(&mut self) {
        self.ids = self
            .surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
    }
}

/// Builds the fixed word-level vocabulary from raw document texts.
pub fn build_fixed_vocab<S: AsRef<str>>(texts: &[S]) -> Result<Vocab> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut v = Vocab::new();
    for t in texts {
        v.tokenize_mut(t.as_ref());
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocab,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Tokenises each non-empty text into a document; ids follow input order.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let texts: Vec<&str> = texts
            .iter()
            .map(|t| t.as_ref())
            .filter(|t| !t.trim().is_empty())
            .collect();
        let mut vocab = build_fixed_vocab(&texts)?;
        let documents = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                doc_id: i as DocId,
                tokens: vocab.tokenize_mut(t),
            })
            .collect();
        Ok(Self { vocab, documents })
    }

    /// Reads one document per line, skipping blank lines.
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut lines = Vec::new();
        for line in BufReader::new(f).lines() {
            lines.push(line?);
        }
        Self::from_texts(&lines)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub documents: Vec<Document>,
    /// Per-document `(term, weight)` pairs, sorted by term, L2-normalised.
    pub term_weights: Vec<Vec<(TokenId, f64)>>,
    idf: BTreeMap<TokenId, f64>,
    pub k_train: usize,
    pub k_infer: usize,
}

fn idf_value(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn term_counts(tokens: &[TokenId]) -> BTreeMap<TokenId, f64> {
    let mut counts = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts
}

impl CorpusIndex {
    pub fn build(documents: Vec<Document>, k_train: usize, k_infer: usize) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if k_train == 0 || k_infer == 0 {
            return Err(Error::Config("retrieval depths must be at least 1".into()));
        }
        let n = documents.len();
        let mut df: BTreeMap<TokenId, usize> = BTreeMap::new();
        for d in &documents {
            for t in term_counts(&d.tokens).keys() {
                *df.entry(*t).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<TokenId, f64> = df.iter().map(|(&t, &c)| (t, idf_value(n, c))).collect();
        let term_weights = documents
            .iter()
            .map(|d| {
                let mut w: Vec<(TokenId, f64)> = term_counts(&d.tokens)
                    .into_iter()
                    .map(|(t, c)| (t, c * idf[&t]))
                    .collect();
                normalise(&mut w);
                w
            })
            .collect();
        Ok(Self {
            documents,
            term_weights,
            idf,
            k_train,
            k_infer,
        })
    }

    fn query_vector(&self, query: &[TokenId]) -> Vec<(TokenId, f64)> {
        let n = self.documents.len();
        let mut w: Vec<(TokenId, f64)> = term_counts(query)
            .into_iter()
            .map(|(t, c)| (t, c * self.idf.get(&t).copied().unwrap_or_else(|| idf_value(n, 0))))
            .collect();
        normalise(&mut w);
        w
    }

    /// Cosine similarity of the query against every document.
    pub fn scores(&self, query: &[TokenId]) -> Vec<f64> {
        let q = self.query_vector(query);
        self.term_weights.iter().map(|d| sparse_dot(&q, d)).collect()
    }

    /// Up to `k` document positions by descending cosine similarity; ties go
    /// to the lower doc id.
    pub fn retrieve_topk(&self, query: &[TokenId], k: usize) -> Vec<DocId> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.documents.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(self.documents[a].doc_id.cmp(&self.documents[b].doc_id))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| self.documents[i].doc_id)
            .collect()
    }

    pub fn document(&self, doc_id: DocId) -> Option<&Document> {
        self.documents
            .get(doc_id as usize)
            .filter(|d| d.doc_id == doc_id)
            .or_else(|| self.documents.iter().find(|d| d.doc_id == doc_id))
    }
}

fn normalise(w: &mut [(TokenId, f64)]) {
    let norm = w.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in w.iter_mut() {
            *v /= norm;
        }
    }
}

fn sparse_dot(a: &[(TokenId, f64)], b: &[(TokenId, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Sentence boundaries of `tokens`: each sentence ends at a sentence-end
/// token or at the end of the sequence. Returns exclusive end offsets.
pub fn sentence_ends(tokens: &[TokenId], end_ids: &[TokenId]) -> Vec<usize> {
    let mut ends: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| end_ids.contains(t))
        .map(|(i, _)| i + 1)
        .collect();
    if ends.last() != Some(&tokens.len()) && !tokens.is_empty() {
        ends.push(tokens.len());
    }
    ends
}

/// Splits a document into a prefix of whole leading sentences, grown while
/// its length stays within `target_len` (always at least one sentence), and
/// the residual.
pub fn split_prefix(
    doc: &Document,
    target_len: usize,
    end_ids: &[TokenId],
) -> (Vec<TokenId>, Vec<TokenId>) {
    let ends = sentence_ends(&doc.tokens, end_ids);
    let mut cut = match ends.first() {
        Some(&e) => e,
        None => 0,
    };
    for &e in ends.iter().skip(1) {
        if e <= target_len {
            cut = e;
        } else {
            break;
        }
    }
    (doc.tokens[..cut].to_vec(), doc.tokens[cut..].to_vec())
}
