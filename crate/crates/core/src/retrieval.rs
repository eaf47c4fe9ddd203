//! Top-k document retrieval.
//!
//! [`LexicalIndex`] scores documents by IDF-weighted overlap of distinct query
//! tokens. It also implements noisy retrieval: each relevant (non-distractor)
//! document is dropped independently with a seeded probability and the gap
//! is backfilled from further down the ranking.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::seed::Draw;
use crate::tree::Document;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    MalformedCorpus { line: usize, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Probability of dropping each relevant document (simulation only).
    pub noise_drop_prob: f64,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            noise_drop_prob: 0.0,
            seed: 0,
        }
    }
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str) -> Result<Vec<Document>, RetrievalError>;
}

impl<T: Retriever + ?Sized> Retriever for Arc<T> {
    fn retrieve(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        (**self).retrieve(query)
    }
}

/// One corpus record. `distractor` marks documents that never count as
/// relevant for noisy retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distractor: bool,
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusDoc>, RetrievalError> {
    let mut docs = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| RetrievalError::MalformedCorpus {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDoc = serde_json::from_str(&line).map_err(|e| RetrievalError::MalformedCorpus {
            line: n + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LexicalIndex {
    docs: Vec<CorpusDoc>,
    postings: HashMap<String, Vec<u32>>,
    idf: HashMap<String, f64>,
}

impl LexicalIndex {
    pub fn new(docs: Vec<CorpusDoc>) -> Self {
        let mut postings: HashMap<String, Vec<u32>> = HashMap::new();
        for (i, doc) in docs.iter().enumerate() {
            let mut tokens = tokenize(&format!("{} {}", doc.title, doc.text));
            tokens.sort_unstable();
            tokens.dedup();
            for tok in tokens {
                postings.entry(tok).or_default().push(i as u32);
            }
        }
        let n = docs.len() as f64;
        let idf = postings
            .iter()
            .map(|(tok, list)| {
                let df = list.len() as f64;
                (tok.clone(), (1.0 + (n - df + 0.5) / (df + 0.5)).ln())
            })
            .collect();
        Self { docs, postings, idf }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[CorpusDoc] {
        &self.docs
    }

    /// Every document sharing a token with `query`, best first; ties by doc_id.
    fn ranking(&self, query: &str) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if self.docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut terms = tokenize(query);
        terms.sort_unstable();
        terms.dedup();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            if let Some(list) = self.postings.get(term) {
                let weight = self.idf[term];
                for &doc in list {
                    *scores.entry(doc).or_default() += weight;
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().map(|(d, s)| (d as usize, s)).collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0].doc_id.cmp(&self.docs[b.0].doc_id))
        });
        Ok(ranked)
    }

    fn document(&self, index: usize, score: f64) -> Document {
        let d = &self.docs[index];
        Document {
            doc_id: d.doc_id.clone(),
            title: d.title.clone(),
            text: d.text.clone(),
            score,
        }
    }

    pub fn retrieve(&self, query: &str, cfg: &RetrievalConfig) -> Result<Vec<Document>, RetrievalError> {
        Ok(self
            .ranking(query)?
            .into_iter()
            .take(cfg.top_k)
            .map(|(i, s)| self.document(i, s))
            .collect())
    }

    /// Like [`retrieve`](Self::retrieve), but each relevant document is
    /// dropped with probability `noise_drop_prob`, keyed on (seed, query, doc_id).
    pub fn retrieve_noisy(&self, query: &str, cfg: &RetrievalConfig) -> Result<Vec<Document>, RetrievalError> {
        if cfg.noise_drop_prob <= 0.0 {
            return self.retrieve(query, cfg);
        }
        let draw = Draw::new(cfg.seed).with(query);
        Ok(self
            .ranking(query)?
            .into_iter()
            .filter(|(i, _)| {
                let doc = &self.docs[*i];
                doc.distractor || !draw.with(&doc.doc_id).bernoulli(cfg.noise_drop_prob)
            })
            .take(cfg.top_k)
            .map(|(i, s)| self.document(i, s))
            .collect())
    }
}

/// An index paired with a fixed configuration.
#[derive(Debug, Clone)]
pub struct LocalRetriever {
    pub index: Arc<LexicalIndex>,
    pub cfg: RetrievalConfig,
}

impl LocalRetriever {
    pub fn new(index: Arc<LexicalIndex>, cfg: RetrievalConfig) -> Self {
        Self { index, cfg }
    }
}

impl Retriever for LocalRetriever {
    fn retrieve(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        self.index.retrieve_noisy(query, &self.cfg)
    }
}

/// Concatenates per-query results, keeps the best-scoring copy of each doc_id,
/// and returns the top `top_k` by score (ties by doc_id).
pub fn merge_results(results: impl IntoIterator<Item = Vec<Document>>, top_k: usize) -> Vec<Document> {
    let mut best: HashMap<String, Document> = HashMap::new();
    for doc in results.into_iter().flatten() {
        match best.get(&doc.doc_id) {
            Some(existing) if existing.score >= doc.score => {}
            _ => {
                best.insert(doc.doc_id.clone(), doc);
            }
        }
    }
    let mut docs: Vec<Document> = best.into_values().collect();
    docs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    docs.truncate(top_k);
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<CorpusDoc> {
        let mk = |id: &str, text: &str, distractor| CorpusDoc {
            doc_id: id.into(),
            title: String::new(),
            text: text.into(),
            distractor,
        };
        vec![
            mk("d1", "E0001's spouse is E0002.", false),
            mk("d2", "E0001's father is E0003.", false),
            mk("d3", "E0002's father is E0004.", false),
            mk("d4", "Records mention E0001 and a spouse but give no name.", true),
            mk("d5", "Unrelated text about weather.", true),
        ]
    }

    #[test]
    fn stored_sentence_ranks_first() {
        let index = LexicalIndex::new(corpus());
        let cfg = RetrievalConfig::default();
        let docs = index.retrieve("E0002's father is E0004.", &cfg).unwrap();
        assert_eq!(docs[0].doc_id, "d3");
        assert!(docs.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn no_overlap_gives_empty_list() {
        let index = LexicalIndex::new(corpus());
        let docs = index.retrieve("zebra xylophone", &RetrievalConfig::default()).unwrap();
        assert!(docs.is_empty());
    }

    #[test]
    fn errors_for_empty_inputs() {
        let index = LexicalIndex::new(corpus());
        assert_eq!(
            index.retrieve("  ", &RetrievalConfig::default()),
            Err(RetrievalError::EmptyQuery)
        );
        let empty = LexicalIndex::new(vec![]);
        assert_eq!(
            empty.retrieve("x", &RetrievalConfig::default()),
            Err(RetrievalError::EmptyCorpus)
        );
    }

    #[test]
    fn top_k_respected() {
        let index = LexicalIndex::new(corpus());
        let cfg = RetrievalConfig {
            top_k: 2,
            ..RetrievalConfig::default()
        };
        assert_eq!(index.retrieve("E0001 spouse father", &cfg).unwrap().len(), 2);
    }

    #[test]
    fn zero_noise_matches_plain_retrieval() {
        let index = LexicalIndex::new(corpus());
        let cfg = RetrievalConfig::default();
        for q in ["E0001 spouse", "father of E0002", "weather"] {
            assert_eq!(index.retrieve(q, &cfg), index.retrieve_noisy(q, &cfg));
        }
    }

    #[test]
    fn full_noise_leaves_only_distractors() {
        let index = LexicalIndex::new(corpus());
        let cfg = RetrievalConfig {
            noise_drop_prob: 1.0,
            ..RetrievalConfig::default()
        };
        let docs = index.retrieve_noisy("E0001 spouse", &cfg).unwrap();
        assert!(!docs.is_empty());
        assert!(docs.iter().all(|d| d.doc_id == "d4" || d.doc_id == "d5"));
    }

    #[test]
    fn ties_broken_by_doc_id() {
        let mk = |id: &str| CorpusDoc {
            doc_id: id.into(),
            title: String::new(),
            text: "same words".into(),
            distractor: false,
        };
        let index = LexicalIndex::new(vec![mk("b"), mk("c"), mk("a")]);
        let ids: Vec<_> = index
            .retrieve("same", &RetrievalConfig::default())
            .unwrap()
            .into_iter()
            .map(|d| d.doc_id)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn merge_dedups_by_doc_id() {
        let doc = |id: &str, score| Document {
            doc_id: id.into(),
            title: String::new(),
            text: String::new(),
            score,
        };
        let merged = merge_results(vec![vec![doc("a", 1.0), doc("b", 3.0)], vec![doc("a", 2.0)]], 5);
        let ids: Vec<_> = merged.iter().map(|d| (d.doc_id.as_str(), d.score)).collect();
        assert_eq!(ids, [("b", 3.0), ("a", 2.0)]);
    }

    #[test]
    fn corpus_lines_parse() {
        let text = "{\"doc_id\":\"x\",\"title\":\"t\",\"text\":\"body\"}\n\n";
        let docs = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(!docs[0].distractor);
        assert!(matches!(
            read_corpus("{oops".as_bytes()),
            Err(RetrievalError::MalformedCorpus { line: 1, .. })
        ));
    }
}
