//! Sparse retrieval over a JSONL corpus: an in-memory BM25 index, the
//! retriever trait the engine calls, and a thin client for a remote
//! retrieval service.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// One corpus passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// One ranked hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has no text")]
    EmptyDocument(String),
    #[error("query must contain at least one token")]
    EmptyQuery,
    #[error("retrieval backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Splits text into lowercase alphanumeric runs. No stemming, no stopword
/// removal; scoring must be reproducible from the raw text alone.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Posting {
    doc: usize,
    tf: u32,
}

/// In-memory BM25 index. Serializes in full, so a snapshot written to disk
/// reloads into an identical index.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    total_len: u64,
}

impl Corpus {
    pub fn new() -> Self {
        Corpus::default()
    }

    /// Loads a JSONL corpus: one document object per line, blank lines
    /// skipped.
    pub fn ingest(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut corpus = Corpus::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            corpus.add(doc).map_err(|e| match e {
                RetrievalError::Parse { .. } => e,
                other => RetrievalError::Parse {
                    line: i + 1,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(corpus)
    }

    pub fn from_documents(docs: Vec<Document>) -> Result<Self, RetrievalError> {
        let mut corpus = Corpus::new();
        for doc in docs {
            corpus.add(doc)?;
        }
        Ok(corpus)
    }

    /// Indexes one document over its title and text.
    pub fn add(&mut self, doc: Document) -> Result<(), RetrievalError> {
        if doc.id.trim().is_empty() {
            return Err(RetrievalError::EmptyDocument(doc.id));
        }
        if doc.text.trim().is_empty() {
            return Err(RetrievalError::EmptyDocument(doc.id));
        }
        if self.by_id.contains_key(&doc.id) {
            return Err(RetrievalError::DuplicateId(doc.id));
        }
        let idx = self.docs.len();
        let tokens = tokenize(&format!("{} {}", doc.title, doc.text));
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for token in &tokens {
            *counts.entry(token).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            self.postings
                .entry(term.to_string())
                .or_default()
                .push(Posting { doc: idx, tf });
        }
        self.doc_len.push(tokens.len() as u32);
        self.total_len += tokens.len() as u64;
        self.by_id.insert(doc.id.clone(), idx);
        self.docs.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// Number of distinct index terms.
    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    fn avg_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every document against the query and returns the top `k`,
    /// highest score first, ties broken by ascending id. Documents sharing
    /// no term with the query score zero, so `k > len` returns the whole
    /// corpus rather than failing.
    fn rank(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>, RetrievalError> {
        let terms = tokenize(query);
        if terms.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if k == 0 || self.docs.is_empty() {
            return Ok(Vec::new());
        }
        let avg = self.avg_len();
        let mut scores = vec![0.0f64; self.docs.len()];
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(postings.len());
            for posting in postings {
                let tf = posting.tf as f64;
                let len = self.doc_len[posting.doc] as f64;
                let norm = if avg > 0.0 {
                    1.0 - BM25_B + BM25_B * len / avg
                } else {
                    1.0
                };
                scores[posting.doc] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        let mut ranked: Vec<ScoredDoc> = scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| ScoredDoc {
                id: self.docs[i].id.clone(),
                score,
            })
            .collect();
        sort_ranked(&mut ranked);
        ranked.truncate(k.min(self.docs.len()));
        Ok(ranked)
    }
}

fn sort_ranked(ranked: &mut [ScoredDoc]) {
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("BM25 scores are finite")
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Document store the engine retrieves from.
pub trait Retriever: Send + Sync {
    /// Top `k` documents for a free-text query.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>, RetrievalError>;

    /// Passage lookup for prompt construction.
    fn document(&self, id: &str) -> Option<Document>;

    /// Entity-anchored retrieval: each entity queries independently and the
    /// per-document maximum score wins. Counts as a single retrieval call.
    fn retrieve_entities(
        &self,
        entities: &[String],
        k: usize,
    ) -> Result<Vec<ScoredDoc>, RetrievalError> {
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        let mut any = false;
        for entity in entities {
            if entity.trim().is_empty() {
                continue;
            }
            any = true;
            for hit in self.retrieve(entity, k)? {
                let entry = best.entry(hit.id).or_insert(f64::NEG_INFINITY);
                if hit.score > *entry {
                    *entry = hit.score;
                }
            }
        }
        if !any {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut merged: Vec<ScoredDoc> = best
            .into_iter()
            .map(|(id, score)| ScoredDoc { id, score })
            .collect();
        sort_ranked(&mut merged);
        merged.truncate(k);
        Ok(merged)
    }
}

impl Retriever for Corpus {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>, RetrievalError> {
        self.rank(query, k)
    }

    fn document(&self, id: &str) -> Option<Document> {
        self.by_id.get(id).map(|&i| self.docs[i].clone())
    }
}

#[derive(Serialize)]
struct RemoteQuery<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct RemoteResults {
    results: Vec<ScoredDoc>,
}

/// Client for a retrieval service that answers `POST {query, k}` with
/// `{"results": [{id, score}]}`. Passage text comes from a local document
/// store when one is attached.
pub struct RemoteRetriever {
    base_url: String,
    agent: ureq::Agent,
    store: Option<Arc<Corpus>>,
}

impl RemoteRetriever {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteRetriever {
            base_url: base_url.into(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(std::time::Duration::from_secs(60)))
                .build()
                .into(),
            store: None,
        }
    }

    /// Attaches a local corpus used only for document text lookup.
    pub fn with_store(mut self, store: Arc<Corpus>) -> Self {
        self.store = Some(store);
        self
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>, RetrievalError> {
        if tokenize(query).is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut response = self
            .agent
            .post(&self.base_url)
            .send_json(&RemoteQuery { query, k })
            .map_err(|e| RetrievalError::Backend(e.to_string()))?;
        let parsed: RemoteResults = response
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::Backend(format!("malformed response: {e}")))?;
        let mut results = parsed.results;
        results.truncate(k);
        Ok(results)
    }

    fn document(&self, id: &str) -> Option<Document> {
        self.store.as_ref().and_then(|s| s.document(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::TcpListener;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.to_string(),
            title: String::new(),
            text: text.to_string(),
        }
    }

    fn apple_corpus() -> Corpus {
        Corpus::from_documents(vec![
            doc("d1", "apple apple"),
            doc("d2", "apple banana"),
            doc("d3", "cherry"),
        ])
        .unwrap()
    }

    /// Per-document BM25 computed directly from the formula, used to check
    /// the inverted-index accumulation.
    fn brute_force_score(corpus: &Corpus, query: &str, doc_idx: usize) -> f64 {
        let terms = tokenize(query);
        let doc = &corpus.docs[doc_idx];
        let doc_tokens = tokenize(&format!("{} {}", doc.title, doc.text));
        let avg = corpus.avg_len();
        let mut score = 0.0;
        for term in &terms {
            let tf = doc_tokens.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = corpus
                .docs
                .iter()
                .filter(|d| tokenize(&format!("{} {}", d.title, d.text)).contains(term))
                .count();
            let idf = corpus.idf(df);
            let len = doc_tokens.len() as f64;
            let norm = if avg > 0.0 {
                1.0 - BM25_B + BM25_B * len / avg
            } else {
                1.0
            };
            score += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
        }
        score
    }

    #[test]
    fn test_tokenize_lowercases_and_splits_on_nonalphanumeric() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(
            tokenize("state-of-the-art (2024)"),
            vec!["state", "of", "the", "art", "2024"]
        );
        assert!(tokenize("?!...").is_empty());
        assert_eq!(tokenize("Åland café"), vec!["åland", "café"]);
    }

    #[test]
    fn test_ranking_prefers_higher_term_frequency() {
        let corpus = apple_corpus();
        let hits = corpus.retrieve("apple", 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].id, "d1");
        assert_eq!(hits[1].id, "d2");
        assert!(hits[0].score > hits[1].score);
        for (rank, hit) in hits.iter().enumerate() {
            let idx = corpus.by_id[&hit.id];
            let expect = brute_force_score(&corpus, "apple", idx);
            assert_eq!(hit.score, expect, "rank {rank}");
        }
    }

    #[test]
    fn test_k_larger_than_corpus_returns_everything() {
        let corpus = apple_corpus();
        let hits = corpus.retrieve("apple", 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[2].id, "d3");
        assert_eq!(hits[2].score, 0.0);
    }

    #[test]
    fn test_zero_k_returns_nothing() {
        assert!(apple_corpus().retrieve("apple", 0).unwrap().is_empty());
    }

    #[test]
    fn test_blank_query_is_rejected() {
        assert!(matches!(
            apple_corpus().retrieve("  ,, !", 3),
            Err(RetrievalError::EmptyQuery)
        ));
    }

    #[test]
    fn test_zero_score_ties_break_by_id() {
        let corpus =
            Corpus::from_documents(vec![doc("b", "beta"), doc("a", "alpha"), doc("c", "gamma")])
                .unwrap();
        let hits = corpus.retrieve("nothing matches this", 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn test_duplicate_id_is_rejected() {
        let mut corpus = Corpus::new();
        corpus.add(doc("d1", "one")).unwrap();
        assert!(matches!(
            corpus.add(doc("d1", "again")),
            Err(RetrievalError::DuplicateId(_))
        ));
    }

    #[test]
    fn test_empty_document_is_rejected() {
        let mut corpus = Corpus::new();
        assert!(matches!(
            corpus.add(doc("d1", "   ")),
            Err(RetrievalError::EmptyDocument(_))
        ));
    }

    #[test]
    fn test_title_participates_in_scoring() {
        let corpus = Corpus::from_documents(vec![
            Document {
                id: "t".into(),
                title: "quantum computing".into(),
                text: "an unrelated body".into(),
            },
            doc("p", "classical computing in the body"),
        ])
        .unwrap();
        let hits = corpus.retrieve("quantum", 1).unwrap();
        assert_eq!(hits[0].id, "t");
        assert!(hits[0].score > 0.0);
    }

    #[test]
    fn test_ingest_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"id\": \"d1\", \"text\": \"fine\"}\n\n{\"id\": \"d2\", \"text\":\n",
        )
        .unwrap();
        let err = Corpus::ingest(&path).unwrap_err();
        match err {
            RetrievalError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn test_ingest_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"id\": \"d1\", \"text\": \"alpha\"}\n\n  \n{\"id\": \"d2\", \"text\": \"beta\"}\n",
        )
        .unwrap();
        assert_eq!(Corpus::ingest(&path).unwrap().len(), 2);
    }

    #[test]
    fn test_snapshot_round_trip_preserves_ranking() {
        let corpus = apple_corpus();
        let json = serde_json::to_string(&corpus).unwrap();
        let reloaded: Corpus = serde_json::from_str(&json).unwrap();
        assert_eq!(
            corpus.retrieve("apple banana", 3).unwrap(),
            reloaded.retrieve("apple banana", 3).unwrap()
        );
        assert_eq!(reloaded.document("d3").unwrap().text, "cherry");
    }

    #[test]
    fn test_insertion_order_does_not_change_scores() {
        let a = Corpus::from_documents(vec![doc("d1", "x y"), doc("d2", "y z"), doc("d3", "z x")])
            .unwrap();
        let b = Corpus::from_documents(vec![doc("d3", "z x"), doc("d1", "x y"), doc("d2", "y z")])
            .unwrap();
        assert_eq!(a.retrieve("x z", 3).unwrap(), b.retrieve("x z", 3).unwrap());
    }

    #[test]
    fn test_entity_retrieval_max_merges_disjoint_lists() {
        let corpus = Corpus::from_documents(vec![
            doc("d1", "apple orchard"),
            doc("d2", "banana grove"),
            doc("d3", "cherry tree"),
        ])
        .unwrap();
        let merged = corpus
            .retrieve_entities(&["apple".into(), "banana".into()], 2)
            .unwrap();
        let ids: Vec<&str> = merged.iter().map(|h| h.id.as_str()).collect();
        assert!(ids.contains(&"d1") && ids.contains(&"d2"), "got {ids:?}");
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn test_entity_retrieval_takes_per_document_maximum() {
        let corpus = apple_corpus();
        let merged = corpus
            .retrieve_entities(&["apple".into(), "banana".into()], 3)
            .unwrap();
        let apple_only = corpus.retrieve("apple", 3).unwrap();
        let banana_only = corpus.retrieve("banana", 3).unwrap();
        for hit in &merged {
            let a = apple_only.iter().find(|h| h.id == hit.id).map(|h| h.score);
            let b = banana_only.iter().find(|h| h.id == hit.id).map(|h| h.score);
            let expect = a
                .unwrap_or(f64::NEG_INFINITY)
                .max(b.unwrap_or(f64::NEG_INFINITY));
            assert_eq!(hit.score, expect, "doc {}", hit.id);
        }
    }

    #[test]
    fn test_entity_retrieval_skips_blank_anchors() {
        let corpus = apple_corpus();
        let merged = corpus
            .retrieve_entities(&["".into(), "apple".into()], 2)
            .unwrap();
        assert_eq!(merged, corpus.retrieve("apple", 2).unwrap());
        assert!(matches!(
            corpus.retrieve_entities(&["".into(), "  ".into()], 2),
            Err(RetrievalError::EmptyQuery)
        ));
    }

    #[test]
    fn test_remote_retriever_matches_local_ranking() {
        use std::io::{Read, Write};

        let corpus = Arc::new(apple_corpus());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let serve_corpus = Arc::clone(&corpus);
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim_end().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let query: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let hits = serve_corpus
                .retrieve(
                    query["query"].as_str().unwrap(),
                    query["k"].as_u64().unwrap() as usize,
                )
                .unwrap();
            let reply_body = serde_json::json!({ "results": hits }).to_string();
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply_body}",
                reply_body.len()
            );
            reader.into_inner().write_all(reply.as_bytes()).unwrap();
        });

        let remote = RemoteRetriever::new(url).with_store(Arc::clone(&corpus));
        let got = remote.retrieve("apple banana", 2).unwrap();
        assert_eq!(got, corpus.retrieve("apple banana", 2).unwrap());
        assert_eq!(remote.document("d1").unwrap().text, "apple apple");
    }

    #[test]
    fn test_remote_retriever_surfaces_transport_failure() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let remote = RemoteRetriever::new(url);
        assert!(matches!(
            remote.retrieve("apple", 2),
            Err(RetrievalError::Backend(_))
        ));
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Document>> {
        proptest::collection::vec("[a-f]{1,4}( [a-f]{1,4}){0,9}", 1..20).prop_map(|texts| {
            texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| doc(&format!("d{i:03}"), &text))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn prop_ranking_has_no_duplicates_and_bounded_len(
            docs in arb_corpus(),
            query in "[a-f]{1,4}( [a-f]{1,4}){0,3}",
            k in 0usize..30,
        ) {
            let n = docs.len();
            let corpus = Corpus::from_documents(docs).unwrap();
            let hits = corpus.retrieve(&query, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            let mut ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), hits.len());
        }

        #[test]
        fn prop_scores_are_non_increasing(
            docs in arb_corpus(),
            query in "[a-f]{1,4}( [a-f]{1,4}){0,3}",
        ) {
            let corpus = Corpus::from_documents(docs).unwrap();
            let hits = corpus.retrieve(&query, corpus.len()).unwrap();
            for pair in hits.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
                if pair[0].score == pair[1].score {
                    prop_assert!(pair[0].id < pair[1].id);
                }
            }
        }

        #[test]
        fn prop_singleton_entity_equals_plain_retrieval(
            docs in arb_corpus(),
            query in "[a-f]{1,4}",
            k in 1usize..10,
        ) {
            let corpus = Corpus::from_documents(docs).unwrap();
            let plain = corpus.retrieve(&query, k).unwrap();
            let merged = corpus.retrieve_entities(&[query.clone()], k).unwrap();
            prop_assert_eq!(plain, merged);
        }
    }
}
