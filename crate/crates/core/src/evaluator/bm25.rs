use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_query, Product};
use crate::dataset::{serialize_product_with, SerializeOptions};
use crate::encoder::{words, SPECIAL_TOKENS};
use crate::error::{Error, Result};

use super::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Terms of a text with field markers removed.
pub fn keyword_terms(text: &str) -> Vec<String> {
    words(text)
        .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
        .collect()
}

/// Inverted index over product texts.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    doc_len: Vec<f64>,
    avg_len: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build<I, S>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (S, String)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut positions = HashMap::new();
        let mut doc_len = Vec::new();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (id, text) in docs {
            let id = id.into();
            let doc = ids.len() as u32;
            if positions.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            let terms = keyword_terms(&text);
            doc_len.push(terms.len() as f64);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((doc, n));
            }
        }
        if ids.is_empty() {
            return Err(Error::Empty("BM25 index"));
        }
        let avg_len = doc_len.iter().sum::<f64>() / ids.len() as f64;
        Ok(Self {
            params,
            ids,
            positions,
            doc_len,
            avg_len,
            postings,
        })
    }

    pub fn from_products(products: &[Product], params: Bm25Params) -> Result<Self> {
        let opts = SerializeOptions::default();
        Self::build(
            products
                .iter()
                .map(|p| (p.id.clone(), serialize_product_with(p, opts))),
            params,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn query_terms(query: &str) -> BTreeSet<String> {
        keyword_terms(&normalize_query(query)).into_iter().collect()
    }

    /// Non-zero scores as `(document position, score)`, ordered by position.
    pub fn sparse_scores(&self, query: &str) -> Vec<(usize, f64)> {
        let Bm25Params { k1, b } = self.params;
        let mut acc: HashMap<u32, f64> = HashMap::new();
        // terms in sorted order so float accumulation order is fixed
        for term in Self::query_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let norm = 1.0 - b + b * self.doc_len[doc as usize] / self.avg_len;
                *acc.entry(doc).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        let mut out: Vec<(usize, f64)> = acc.into_iter().map(|(d, s)| (d as usize, s)).collect();
        out.sort_unstable_by_key(|&(d, _)| d);
        out
    }

    /// Dense scores aligned with [`Bm25Index::ids`].
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut dense = vec![0.0; self.ids.len()];
        for (d, s) in self.sparse_scores(query) {
            dense[d] = s;
        }
        dense
    }

    /// All documents ranked for `query`.
    pub fn rank(&self, query: &str) -> RankedList {
        let scores = self.scores(query);
        RankedList::from_scores(query, self.ids.iter().cloned().zip(scores).collect())
    }
}

pub fn bm25_rank(query: &str, products: &[Product], k1: f64, b: f64) -> Result<RankedList> {
    Ok(Bm25Index::from_products(products, Bm25Params { k1, b })?.rank(query))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(docs: &[(&str, &str)]) -> Bm25Index {
        Bm25Index::build(
            docs.iter().map(|(i, t)| (*i, t.to_string())),
            Bm25Params::default(),
        )
        .unwrap()
    }

    #[test]
    fn absent_term_scores_zero() {
        let idx = index(&[("a", "red wine"), ("b", "white bread")]);
        assert_eq!(idx.scores("cheese"), vec![0.0, 0.0]);
        let r = idx.rank("cheese");
        assert_eq!(r.ids(), vec!["a", "b"]);
    }

    #[test]
    fn single_document_ranked_first() {
        let idx = index(&[("only", "[PN] whole milk [PBN] acme")]);
        let r = idx.rank("milk");
        assert_eq!(r.items()[0].0, "only");
        assert!(r.items()[0].1 > 0.0);
    }

    #[test]
    fn markers_are_not_terms() {
        let idx = index(&[("a", "[PN] x [PBN] y"), ("b", "[PN] z")]);
        assert_eq!(idx.scores("[PN] pn"), vec![0.0, 0.0]);
    }

    #[test]
    fn term_frequency_matches_hand_value() {
        // equal lengths: a = "milk milk", b = "milk bread"
        let idx = index(&[("a", "milk milk"), ("b", "milk bread")]);
        let s = idx.scores("milk");
        let idf = (1.0f64 + (2.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
        let (k1, b) = (1.2, 0.75);
        let norm = 1.0 - b + b * 2.0 / 2.0;
        let expect = |tf: f64| idf * tf * (k1 + 1.0) / (tf + k1 * norm);
        assert!((s[0] - expect(2.0)).abs() < 1e-12);
        assert!((s[1] - expect(1.0)).abs() < 1e-12);
        assert!(s[0] > s[1]);
        assert!(s[0] < 2.0 * s[1], "tf saturates");
    }

    #[test]
    fn more_matched_terms_never_lowers_score() {
        let idx = index(&[("a", "red wine bottle"), ("b", "bread loaf white")]);
        let one = idx.scores("red")[0];
        let two = idx.scores("red wine")[0];
        assert!(two >= one);
    }

    #[test]
    fn empty_index_rejected() {
        assert!(Bm25Index::build(Vec::<(String, String)>::new(), Bm25Params::default()).is_err());
    }
}
