//! Offline evaluation: graded-relevance metrics over human labels, the BM25 baseline, and
//! analysis exports (score distributions, category separation, raw embeddings).

mod bm25;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bm25::{bm25_rank, keyword_terms, Bm25Index, Bm25Params};

use crate::corpus::{normalize_query, Catalog, EngagementRecord, HumanLabel, Product};
use crate::encoder::{dot, score_order_desc, EmbeddingModel};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::trainer::sigmoid;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Products for one query, best first. Ties are broken by product id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    query: String,
    items: Vec<(String, f64)>,
}

fn ranking_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    score_order_desc(a.1, b.1).then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    /// Sorts `scored` into ranking order. Ids are assumed unique.
    pub fn from_scores(query: impl Into<String>, mut scored: Vec<(String, f64)>) -> Self {
        scored.sort_by(ranking_order);
        Self {
            query: query.into(),
            items: scored,
        }
    }

    /// Accepts an already ordered list, validating order and uniqueness.
    pub fn new(query: impl Into<String>, items: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.0.as_str()) {
                return Err(Error::DuplicateId(it.0.clone()));
            }
        }
        if items
            .windows(2)
            .any(|w| ranking_order(&w[0], &w[1]).is_gt())
        {
            return Err(Error::Invariant("ranked list out of order".into()));
        }
        Ok(Self {
            query: query.into(),
            items,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn items(&self) -> &[(String, f64)] {
        &self.items
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|x| x.0.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.items.truncate(k);
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(())
}

/// Linear-gain NDCG@K. The ideal DCG ranks every labeled item, not only those retrieved;
/// unlabeled items have gain 0. Returns 0 when no labeled item has positive gain.
pub fn ndcg_at_k(ranked: &RankedList, gains: &HashMap<String, u32>, k: usize) -> Result<f64> {
    check_k(k)?;
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, (id, _))| f64::from(gains.get(id).copied().unwrap_or(0)) * discount(r))
        .sum();
    let mut ideal: Vec<u32> = gains.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, g)| f64::from(*g) * discount(r))
        .sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// `|relevant ∩ top-K| / min(K, |relevant|)`; 0 when nothing is relevant.
///
/// Not monotone in K: a list can reach 1.0 at K=5 and fall below it at K=20.
pub fn recall_at_k(ranked: &RankedList, relevant: &HashSet<String>, k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let hits = ranked
        .items
        .iter()
        .take(k)
        .filter(|(id, _)| relevant.contains(id))
        .count();
    Ok(hits as f64 / k.min(relevant.len()) as f64)
}

/// 1/rank of the first relevant item, 0 if none is ranked.
pub fn reciprocal_rank(ranked: &RankedList, relevant: &HashSet<String>) -> f64 {
    ranked
        .items
        .iter()
        .position(|(id, _)| relevant.contains(id))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Mean reciprocal rank over paired lists and relevant sets.
pub fn mrr(ranked: &[RankedList], relevant: &[HashSet<String>]) -> Result<f64> {
    if ranked.len() != relevant.len() {
        return Err(Error::DimensionMismatch {
            expected: ranked.len(),
            actual: relevant.len(),
        });
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = ranked
        .iter()
        .zip(relevant)
        .map(|(r, s)| reciprocal_rank(r, s))
        .sum();
    Ok(sum / ranked.len() as f64)
}

/// Anything that scores products against a raw query string.
pub trait Scorer: Sync {
    fn name(&self) -> String;
    fn score(&self, query: &str, products: &[&Product]) -> Result<Vec<f64>>;
}

/// Dot product of tower outputs, with catalog embeddings computed once up front.
pub struct EmbeddingScorer<'a> {
    model: &'a EmbeddingModel,
    rows: HashMap<String, usize>,
    embeddings: Vec<Vec<f64>>,
}

impl<'a> EmbeddingScorer<'a> {
    pub fn new(model: &'a EmbeddingModel, catalog: &Catalog, mode: ExecMode) -> Result<Self> {
        let embeddings = model.embed_products(catalog.products(), mode)?;
        let rows = catalog
            .products()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        Ok(Self {
            model,
            rows,
            embeddings,
        })
    }

    pub fn product_embedding(&self, product: &Product) -> Result<std::borrow::Cow<'_, [f64]>> {
        Ok(match self.rows.get(&product.id) {
            Some(&r) => std::borrow::Cow::Borrowed(&self.embeddings[r]),
            None => std::borrow::Cow::Owned(self.model.embed_product(product)?),
        })
    }
}

impl Scorer for EmbeddingScorer<'_> {
    fn name(&self) -> String {
        "embedding".into()
    }

    fn score(&self, query: &str, products: &[&Product]) -> Result<Vec<f64>> {
        let q = self.model.embed_query(query)?;
        products
            .iter()
            .map(|p| Ok(dot(&q, &self.product_embedding(p)?)))
            .collect()
    }
}

pub struct Bm25Scorer {
    index: Bm25Index,
}

impl Bm25Scorer {
    pub fn new(catalog: &Catalog, params: Bm25Params) -> Result<Self> {
        Ok(Self {
            index: Bm25Index::from_products(catalog.products(), params)?,
        })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }
}

impl Scorer for Bm25Scorer {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn score(&self, query: &str, products: &[&Product]) -> Result<Vec<f64>> {
        let sparse: HashMap<usize, f64> = self.index.sparse_scores(query).into_iter().collect();
        Ok(products
            .iter()
            .map(|p| {
                self.index
                    .position(&p.id)
                    .and_then(|d| sparse.get(&d).copied())
                    .unwrap_or(0.0)
            })
            .collect())
    }
}

/// Adapts a per-pair closure.
pub struct FnScorer<F> {
    name: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&str, &Product) -> f64 + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&str, &Product) -> f64 + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn score(&self, query: &str, products: &[&Product]) -> Result<Vec<f64>> {
        Ok(products.iter().map(|p| (self.f)(query, p)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Rank only the labeled products of each query.
    Rerank,
    /// Rank the full catalog.
    Retrieval,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rerank" => Ok(EvalMode::Rerank),
            "retrieval" => Ok(EvalMode::Retrieval),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub mode: EvalMode,
    #[serde(default)]
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            mode: EvalMode::Rerank,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub relevant: usize,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scorer: String,
    pub mode: EvalMode,
    pub query_count: usize,
    /// Labeled queries without any positive-gain product; excluded from the means.
    pub skipped_queries: usize,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }
}

/// Labels grouped by normalized query; a duplicated (query, product) keeps its highest gain.
pub fn group_labels(labels: &[HumanLabel]) -> BTreeMap<String, HashMap<String, u32>> {
    let mut out: BTreeMap<String, HashMap<String, u32>> = BTreeMap::new();
    for l in labels {
        let g = out.entry(normalize_query(&l.query)).or_default();
        let e = g.entry(l.product_id.clone()).or_insert(0);
        *e = (*e).max(l.gain());
    }
    out
}

/// Scores each labeled query's candidate pool and averages the metrics over queries.
///
/// Labels whose product is missing from the catalog are ignored.
pub fn evaluate(
    scorer: &dyn Scorer,
    catalog: &Catalog,
    labels: &[HumanLabel],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    for &k in &cfg.ks {
        check_k(k)?;
    }
    let mut grouped = group_labels(labels);
    let mut missing = 0usize;
    for gains in grouped.values_mut() {
        let before = gains.len();
        gains.retain(|id, _| catalog.get(id).is_some());
        missing += before - gains.len();
    }
    if missing > 0 {
        log::warn!("{missing} labeled pairs reference products outside the catalog");
    }
    let queries: Vec<(String, HashMap<String, u32>)> = grouped.into_iter().collect();
    let all: Vec<&Product> = catalog.products().iter().collect();
    let max_k = cfg.ks.iter().copied().max().unwrap_or(1);

    let per_query = exec::map(
        cfg.exec,
        &queries,
        |(query, gains)| -> Result<Option<QueryMetrics>> {
            let relevant: HashSet<String> = gains
                .iter()
                .filter(|(_, g)| **g > 0)
                .map(|(id, _)| id.clone())
                .collect();
            if relevant.is_empty() {
                return Ok(None);
            }
            let pool: Vec<&Product> = match cfg.mode {
                EvalMode::Rerank => {
                    let mut ids: Vec<&String> = gains.keys().collect();
                    ids.sort();
                    ids.into_iter().filter_map(|id| catalog.get(id)).collect()
                }
                EvalMode::Retrieval => all.clone(),
            };
            let scores = scorer.score(query, &pool)?;
            let ranked = RankedList::from_scores(
                query.as_str(),
                pool.iter().map(|p| p.id.clone()).zip(scores).collect(),
            );
            let rr = reciprocal_rank(&ranked, &relevant);
            let mut top = ranked;
            top.truncate(max_k);
            let mut ndcg = BTreeMap::new();
            let mut recall = BTreeMap::new();
            for &k in &cfg.ks {
                ndcg.insert(k, ndcg_at_k(&top, gains, k)?);
                recall.insert(k, recall_at_k(&top, &relevant, k)?);
            }
            Ok(Some(QueryMetrics {
                query: query.clone(),
                relevant: relevant.len(),
                ndcg,
                recall,
                reciprocal_rank: rr,
            }))
        },
    );

    let mut kept = Vec::new();
    let mut skipped = 0;
    for q in per_query {
        match q? {
            Some(m) => kept.push(m),
            None => skipped += 1,
        }
    }
    let n = kept.len().max(1) as f64;
    let mean = |f: &dyn Fn(&QueryMetrics) -> f64| kept.iter().map(f).sum::<f64>() / n;
    let ndcg = cfg.ks.iter().map(|&k| (k, mean(&|m| m.ndcg[&k]))).collect();
    let recall = cfg
        .ks
        .iter()
        .map(|&k| (k, mean(&|m| m.recall[&k])))
        .collect();
    let mrr = mean(&|m| m.reciprocal_rank);
    Ok(MetricReport {
        scorer: scorer.name(),
        mode: cfg.mode,
        query_count: kept.len(),
        skipped_queries: skipped,
        ndcg,
        recall,
        mrr,
        per_query: kept,
    })
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let path = path.as_ref();
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub query: String,
    pub product_id: String,
    pub gain: u32,
    /// σ(q·p)
    pub score: f64,
}

/// σ-scores for every labeled pair whose product is in the catalog, ordered by (query, product).
pub fn score_distribution(
    model: &EmbeddingModel,
    catalog: &Catalog,
    labels: &[HumanLabel],
    mode: ExecMode,
) -> Result<Vec<ScoreRow>> {
    let grouped: Vec<(String, HashMap<String, u32>)> = group_labels(labels).into_iter().collect();
    let rows = exec::map(mode, &grouped, |(query, gains)| -> Result<Vec<ScoreRow>> {
        let q = model.embed_query(query)?;
        let mut ids: Vec<(&String, &u32)> = gains.iter().collect();
        ids.sort();
        ids.into_iter()
            .filter_map(|(id, g)| catalog.get(id).map(|p| (p, *g)))
            .map(|(p, gain)| {
                Ok(ScoreRow {
                    query: query.clone(),
                    product_id: p.id.clone(),
                    gain,
                    score: sigmoid(dot(&q, &model.embed_product(p)?)),
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Writes `query,product_id,gain,score` rows; returns the row count.
pub fn export_score_distribution(
    model: &EmbeddingModel,
    catalog: &Catalog,
    labels: &[HumanLabel],
    path: impl AsRef<Path>,
    mode: ExecMode,
) -> Result<usize> {
    let path = path.as_ref();
    let rows = score_distribution(model, catalog, labels, mode)?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["query", "product_id", "gain", "score"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.query.as_str(),
            r.product_id.as_str(),
            &r.gain.to_string(),
            &r.score.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub category: String,
    /// `(product_id, q·p)`, best first.
    pub scores: Vec<(String, f64)>,
    /// `(product_id, CTR)` for products with engagement on this query, highest first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctr: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub query: String,
    pub category_a: CategoryScores,
    pub category_b: CategoryScores,
    /// Probability that a random category-a product outscores a random category-b product
    /// (ties count one half).
    pub auc: f64,
}

/// Exact pairwise AUC of `a` over `b`.
pub fn pairwise_auc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("score list"));
    }
    let mut wins = 0.0;
    for x in a {
        for y in b {
            wins += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (a.len() * b.len()) as f64)
}

fn in_category(p: &Product, category: &str) -> bool {
    p.categories.iter().any(|c| c == category)
}

/// Embedding scores of two categories' products against one query, and how well they separate.
pub fn category_separation_report(
    model: &EmbeddingModel,
    query: &str,
    category_a: &str,
    category_b: &str,
    products: &[Product],
    engagement: Option<&[EngagementRecord]>,
) -> Result<SeparationReport> {
    let q = model.embed_query(query)?;
    let norm_query = normalize_query(query);
    let side = |category: &str| -> Result<CategoryScores> {
        let members: Vec<&Product> = products
            .iter()
            .filter(|p| in_category(p, category))
            .collect();
        if members.is_empty() {
            return Err(Error::Invariant(format!(
                "no products in category `{category}`"
            )));
        }
        let mut scores = members
            .iter()
            .map(|p| Ok((p.id.clone(), dot(&q, &model.embed_product(p)?))))
            .collect::<Result<Vec<_>>>()?;
        scores.sort_by(ranking_order);
        let ctr = engagement.map(|records| {
            let ids: HashSet<&str> = members.iter().map(|p| p.id.as_str()).collect();
            let mut agg: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
            for r in records {
                if ids.contains(r.product_id.as_str()) && normalize_query(&r.query) == norm_query {
                    let e = agg.entry(r.product_id.as_str()).or_default();
                    e.0 += u64::from(r.conversions);
                    e.1 += u64::from(r.impressions);
                }
            }
            let mut list: Vec<(String, f64)> = agg
                .into_iter()
                .map(|(id, (c, i))| (id.to_string(), c as f64 / i as f64))
                .collect();
            list.sort_by(ranking_order);
            list
        });
        Ok(CategoryScores {
            category: category.to_string(),
            scores,
            ctr,
        })
    };
    let a = side(category_a)?;
    let b = side(category_b)?;
    let sa: Vec<f64> = a.scores.iter().map(|x| x.1).collect();
    let sb: Vec<f64> = b.scores.iter().map(|x| x.1).collect();
    let auc = pairwise_auc(&sa, &sb)?;
    Ok(SeparationReport {
        query: query.to_string(),
        category_a: a,
        category_b: b,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    /// "product" or "query"
    pub kind: String,
    /// Leaf category for products, empty for queries.
    pub label: String,
    pub embedding: Vec<f64>,
}

/// Dumps product (and optional query) embeddings as JSON lines for external projection tools.
pub fn export_embeddings(
    model: &EmbeddingModel,
    products: &[Product],
    queries: &[String],
    path: impl AsRef<Path>,
    mode: ExecMode,
) -> Result<usize> {
    let path = path.as_ref();
    let embeddings = model.embed_products(products, mode)?;
    let mut rows: Vec<EmbeddingRow> = products
        .iter()
        .zip(embeddings)
        .map(|(p, e)| EmbeddingRow {
            id: p.id.clone(),
            kind: "product".into(),
            label: p.leaf_category().to_string(),
            embedding: e,
        })
        .collect();
    for q in queries {
        rows.push(EmbeddingRow {
            id: q.clone(),
            kind: "query".into(),
            label: String::new(),
            embedding: model.embed_query(q)?,
        });
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in &rows {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}
