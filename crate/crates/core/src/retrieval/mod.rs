//! Per-retailer embedding indices and the online search path: k-NN retrieval, threshold,
//! category whitelist, availability, keyword merge, and blended re-rank.

mod format;
mod knn;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use format::{
    index_file_name, RetailerIndex, Sidecar, FORMAT_VERSION, INDEX_EXTENSION, INDEX_MAGIC,
    SIDECAR_FILE, SIDECAR_MAGIC,
};
pub use knn::{knn_approx, knn_exact, knn_exact_with, Hit, IvfConfig, IvfIndex};

use crate::corpus::{load_catalog, normalize_query, Catalog, Product};
use crate::encoder::{dot, score_order_desc, EmbeddingModel};
use crate::error::{Error, Result};
use crate::evaluator::{Bm25Index, Bm25Params};
use crate::exec::ExecMode;

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub index_files: Vec<PathBuf>,
    pub sidecar: PathBuf,
    /// Rows across all retailer indices (a product carried by r retailers counts r times).
    pub total_embeddings: usize,
}

/// Embeds every catalog product once and writes one index per retailer plus the sidecar.
/// Existing index files in `out_dir` are replaced.
pub fn build_indices(
    model: &EmbeddingModel,
    catalog: &Catalog,
    out_dir: impl AsRef<Path>,
    timestamp: u64,
    mode: ExecMode,
) -> Result<BuildSummary> {
    build_indices_for(
        model,
        catalog,
        &catalog.retailers(),
        out_dir,
        timestamp,
        mode,
    )
}

pub fn build_indices_for(
    model: &EmbeddingModel,
    catalog: &Catalog,
    retailers: &[String],
    out_dir: impl AsRef<Path>,
    timestamp: u64,
    mode: ExecMode,
) -> Result<BuildSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for stale in index_files_in(out_dir)? {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let products = catalog.products();
    let embeddings = model.embed_products(products, mode)?;
    let dim = model.dim();

    let mut index_files = Vec::new();
    let mut total = 0;
    let mut retailers: Vec<&String> = retailers.iter().collect();
    retailers.sort();
    retailers.dedup();
    for retailer in retailers {
        let rows: Vec<(String, Vec<f64>, String, bool)> = products
            .iter()
            .zip(&embeddings)
            .filter(|(p, _)| p.carried_by(retailer))
            .map(|(p, e)| {
                (
                    p.id.clone(),
                    e.clone(),
                    p.leaf_category().to_string(),
                    p.is_available_at(retailer),
                )
            })
            .collect();
        if rows.is_empty() {
            log::warn!("retailer `{retailer}` carries no products; writing an empty index");
        }
        total += rows.len();
        let index = RetailerIndex::new(retailer.clone(), timestamp, dim, rows)?;
        let path = out_dir.join(index_file_name(retailer));
        index.write(&path)?;
        index_files.push(path);
    }

    let sidecar = Sidecar::new(
        timestamp,
        dim,
        products.iter().map(|p| p.id.clone()).collect(),
        embeddings.concat(),
    )?;
    let sidecar_path = out_dir.join(SIDECAR_FILE);
    sidecar.write(&sidecar_path)?;
    Ok(BuildSummary {
        index_files,
        sidecar: sidecar_path,
        total_embeddings: total,
    })
}

fn index_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(INDEX_EXTENSION) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    /// Retrieval depth.
    pub k: usize,
    /// On the raw dot product.
    pub score_threshold: f64,
    /// Leading survivors whose leaf categories form the whitelist.
    pub whitelist_top_m: usize,
    pub final_size: usize,
    pub merge_keyword: bool,
    pub embedding_weight: f64,
    pub keyword_weight: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            k: 100,
            score_threshold: 0.0,
            whitelist_top_m: 10,
            final_size: 20,
            merge_keyword: false,
            embedding_weight: 1.0,
            keyword_weight: 0.0,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.final_size < 1 || self.whitelist_top_m < 1 {
            return Err(Error::Config(
                "k, final_size and whitelist_top_m must be at least 1".into(),
            ));
        }
        if self.final_size > self.k || self.whitelist_top_m > self.k {
            return Err(Error::Config(
                "final_size and whitelist_top_m must not exceed k".into(),
            ));
        }
        if !self.score_threshold.is_finite() && self.score_threshold != f64::NEG_INFINITY {
            return Err(Error::Config("score_threshold must be a number".into()));
        }
        Ok(())
    }

    /// Same settings with retrieval depth `k`; the result size and whitelist depth shrink to fit.
    pub fn with_depth(mut self, k: usize) -> Self {
        self.k = k;
        self.final_size = self.final_size.min(k);
        self.whitelist_top_m = self.whitelist_top_m.min(k);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Embedding,
    Keyword,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub product_id: String,
    pub embedding_score: f64,
    /// BM25 score; 0 unless the keyword path returned the product.
    pub keyword_score: f64,
    /// Blended re-rank score.
    pub score: f64,
    pub source: Source,
    pub category: String,
}

/// Products removed at each pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub retrieved: usize,
    pub below_threshold: usize,
    pub outside_whitelist: usize,
    pub unavailable: usize,
    pub keyword_candidates: usize,
    pub keyword_unavailable: usize,
    pub keyword_added: usize,
    pub truncated: usize,
    pub whitelist: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub retailer_id: String,
    pub query: String,
    pub items: Vec<ResultItem>,
    pub trace: FilterTrace,
}

#[derive(Debug, Clone)]
pub struct RetailerEntry {
    pub index: RetailerIndex,
    positions: HashMap<String, usize>,
    ivf: Option<IvfIndex>,
}

impl RetailerEntry {
    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn ivf(&self) -> Option<&IvfIndex> {
        self.ivf.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetailerHealth {
    pub products: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub retailers: BTreeMap<String, RetailerHealth>,
}

/// Immutable serving state: model, indices, sidecar, and the optional keyword index.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub model: EmbeddingModel,
    retailers: BTreeMap<String, RetailerEntry>,
    sidecar: Sidecar,
    keyword: Option<Bm25Index>,
}

impl Snapshot {
    /// `catalog` enables keyword merging; `ann` switches retrieval to an IVF index per retailer.
    pub fn new(
        model: EmbeddingModel,
        indices: Vec<RetailerIndex>,
        sidecar: Sidecar,
        catalog: Option<&[Product]>,
        ann: Option<&IvfConfig>,
    ) -> Result<Self> {
        let dim = model.dim();
        if sidecar.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: sidecar.dim,
            });
        }
        let mut retailers = BTreeMap::new();
        for index in indices {
            if index.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: index.dim,
                });
            }
            let positions = index
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i))
                .collect();
            let ivf = match ann {
                Some(cfg) if !index.is_empty() => {
                    Some(IvfIndex::build(&index, cfg, ExecMode::default())?)
                }
                _ => None,
            };
            let id = index.retailer_id.clone();
            if retailers
                .insert(
                    id.clone(),
                    RetailerEntry {
                        index,
                        positions,
                        ivf,
                    },
                )
                .is_some()
            {
                return Err(Error::DuplicateId(id));
            }
        }
        let keyword = match catalog {
            Some(products) if !products.is_empty() => {
                Some(Bm25Index::from_products(products, Bm25Params::default())?)
            }
            _ => None,
        };
        Ok(Self {
            model,
            retailers,
            sidecar,
            keyword,
        })
    }

    /// Reads every index file and the sidecar in `dir`.
    pub fn load(
        dir: impl AsRef<Path>,
        checkpoint: impl AsRef<Path>,
        catalog: Option<&Path>,
        ann: Option<&IvfConfig>,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let model = EmbeddingModel::load(checkpoint)?;
        let indices = index_files_in(dir)?
            .iter()
            .map(|p| RetailerIndex::read(p))
            .collect::<Result<Vec<_>>>()?;
        let sidecar = Sidecar::read(&dir.join(SIDECAR_FILE))?;
        let products = catalog.map(load_catalog).transpose()?;
        Self::new(model, indices, sidecar, products.as_deref(), ann)
    }

    pub fn retailer(&self, id: &str) -> Result<&RetailerEntry> {
        self.retailers
            .get(id)
            .ok_or_else(|| Error::UnknownRetailer(id.to_string()))
    }

    pub fn retailer_ids(&self) -> impl Iterator<Item = &str> {
        self.retailers.keys().map(String::as_str)
    }

    pub fn has_keyword_index(&self) -> bool {
        self.keyword.is_some()
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            retailers: self
                .retailers
                .iter()
                .map(|(id, e)| {
                    (
                        id.clone(),
                        RetailerHealth {
                            products: e.index.len(),
                            timestamp: e.index.timestamp,
                        },
                    )
                })
                .collect(),
        }
    }
}

struct Candidate {
    pos: usize,
    embedding_score: f64,
    keyword_score: f64,
    source: Source,
}

/// Runs the search pipeline for one request against `snapshot`.
pub fn serve_search(
    snapshot: &Snapshot,
    retailer_id: &str,
    query: &str,
    cfg: &ServeConfig,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    if normalize_query(query).is_empty() {
        return Err(Error::Empty("query"));
    }
    let entry = snapshot.retailer(retailer_id)?;
    let index = &entry.index;
    let q = snapshot.model.embed_query(query)?;
    let mut trace = FilterTrace::default();

    let hits = if index.is_empty() {
        Vec::new()
    } else if let Some(ivf) = &entry.ivf {
        ivf.search(index, &q, cfg.k, None)?
    } else {
        knn_exact(index, &q, cfg.k)?
    };
    trace.retrieved = hits.len();

    let hits: Vec<Hit> = hits
        .into_iter()
        .filter(|h| h.score >= cfg.score_threshold)
        .collect();
    trace.below_threshold = trace.retrieved - hits.len();

    let whitelist: BTreeSet<&str> = hits
        .iter()
        .take(cfg.whitelist_top_m)
        .map(|h| index.categories[h.pos].as_str())
        .collect();
    let before = hits.len();
    let hits: Vec<Hit> = hits
        .into_iter()
        .filter(|h| whitelist.contains(index.categories[h.pos].as_str()))
        .collect();
    trace.outside_whitelist = before - hits.len();
    trace.whitelist = whitelist.iter().map(|s| s.to_string()).collect();

    let before = hits.len();
    let hits: Vec<Hit> = hits
        .into_iter()
        .filter(|h| index.available[h.pos])
        .collect();
    trace.unavailable = before - hits.len();

    let mut candidates: Vec<Candidate> = hits
        .iter()
        .map(|h| Candidate {
            pos: h.pos,
            embedding_score: h.score,
            keyword_score: 0.0,
            source: Source::Embedding,
        })
        .collect();

    if cfg.merge_keyword {
        let bm25 = snapshot
            .keyword
            .as_ref()
            .ok_or_else(|| Error::Config("keyword merge requires a catalog".into()))?;
        let mut kw: Vec<(usize, f64)> = bm25
            .sparse_scores(query)
            .into_iter()
            .filter_map(|(doc, s)| entry.position(&bm25.ids()[doc]).map(|pos| (pos, s)))
            .collect();
        kw.sort_by(|a, b| {
            score_order_desc(a.1, b.1).then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
        });
        kw.truncate(cfg.k);
        trace.keyword_candidates = kw.len();
        let by_pos: HashMap<usize, usize> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.pos, i))
            .collect();
        for (pos, s) in kw {
            if !index.available[pos] {
                trace.keyword_unavailable += 1;
                continue;
            }
            match by_pos.get(&pos) {
                Some(&i) => {
                    candidates[i].keyword_score = s;
                    candidates[i].source = Source::Both;
                }
                None => {
                    let emb = snapshot
                        .sidecar
                        .embedding(&index.ids[pos])
                        .unwrap_or_else(|| index.row(pos));
                    candidates.push(Candidate {
                        pos,
                        embedding_score: dot(&q, emb),
                        keyword_score: s,
                        source: Source::Keyword,
                    });
                    trace.keyword_added += 1;
                }
            }
        }
    }

    let mut items: Vec<ResultItem> = candidates
        .into_iter()
        .map(|c| ResultItem {
            product_id: index.ids[c.pos].clone(),
            embedding_score: c.embedding_score,
            keyword_score: c.keyword_score,
            score: cfg.embedding_weight * c.embedding_score + cfg.keyword_weight * c.keyword_score,
            source: c.source,
            category: index.categories[c.pos].clone(),
        })
        .collect();
    items.sort_by(|a, b| {
        score_order_desc(a.score, b.score).then_with(|| a.product_id.cmp(&b.product_id))
    });
    trace.truncated = items.len().saturating_sub(cfg.final_size);
    items.truncate(cfg.final_size);
    Ok(RetrievalResult {
        retailer_id: retailer_id.to_string(),
        query: query.to_string(),
        items,
        trace,
    })
}

/// Shared handle to the current snapshot. Readers clone the `Arc` and never block on a
/// rebuild; [`ServiceHandle::swap`] publishes a new snapshot atomically.
#[derive(Debug)]
pub struct ServiceHandle {
    current: RwLock<Arc<Snapshot>>,
}

impl ServiceHandle {
    pub fn new(snapshot: Snapshot) -> Self {
        Self {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current.read())
    }

    /// Installs `next`, returning the previous snapshot.
    pub fn swap(&self, next: Snapshot) -> Arc<Snapshot> {
        std::mem::replace(&mut *self.current.write(), Arc::new(next))
    }

    pub fn search(
        &self,
        retailer_id: &str,
        query: &str,
        cfg: &ServeConfig,
    ) -> Result<RetrievalResult> {
        serve_search(&self.snapshot(), retailer_id, query, cfg)
    }
}
