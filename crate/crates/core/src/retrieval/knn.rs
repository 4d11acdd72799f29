use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::RetailerIndex;
use crate::encoder::{dot, score_order_desc};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

const SCAN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Row in the retailer index.
    pub pos: usize,
    pub score: f64,
}

fn check_query(index: &RetailerIndex, query: &[f64], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Empty("index"));
    }
    if query.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            actual: query.len(),
        });
    }
    Ok(())
}

fn hit_order(index: &RetailerIndex) -> impl Fn(&Hit, &Hit) -> Ordering + '_ {
    move |a, b| {
        score_order_desc(a.score, b.score).then_with(|| index.ids[a.pos].cmp(&index.ids[b.pos]))
    }
}

fn select_top(index: &RetailerIndex, mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    let order = hit_order(index);
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, &order);
        hits.truncate(k);
    }
    hits.sort_by(&order);
    hits
}

/// Exhaustive dot-product scan; best first, ties by product id.
pub fn knn_exact(index: &RetailerIndex, query: &[f64], k: usize) -> Result<Vec<Hit>> {
    knn_exact_with(index, query, k, ExecMode::Sequential)
}

pub fn knn_exact_with(
    index: &RetailerIndex,
    query: &[f64],
    k: usize,
    mode: ExecMode,
) -> Result<Vec<Hit>> {
    check_query(index, query, k)?;
    let n = index.len();
    let chunks = exec::map_range(mode, n.div_ceil(SCAN_CHUNK), |c| {
        let lo = c * SCAN_CHUNK;
        let hi = (lo + SCAN_CHUNK).min(n);
        (lo..hi)
            .map(|pos| Hit {
                pos,
                score: dot(query, index.row(pos)),
            })
            .collect::<Vec<_>>()
    });
    Ok(select_top(index, chunks.concat(), k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfConfig {
    /// Coarse clusters; defaults to ⌈√n⌉.
    #[serde(default)]
    pub clusters: Option<usize>,
    /// Lists scanned per query; defaults to a quarter of the clusters.
    #[serde(default)]
    pub probes: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfConfig {
    fn default() -> Self {
        Self {
            clusters: None,
            probes: None,
            iterations: 10,
            seed: 0,
        }
    }
}

/// Inverted-file index: k-means (L2) coarse clusters over the index rows. Queries rank
/// centroids by dot product and scan the best lists exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f64>,
    lists: Vec<Vec<usize>>,
    probes: usize,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl IvfIndex {
    pub fn build(index: &RetailerIndex, cfg: &IvfConfig, mode: ExecMode) -> Result<Self> {
        let n = index.len();
        if n == 0 {
            return Err(Error::Empty("index"));
        }
        let d = index.dim;
        let c = cfg
            .clusters
            .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
            .clamp(1, n);
        let probes = cfg.probes.unwrap_or_else(|| c.div_ceil(4)).clamp(1, c);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seeds = sample(&mut rng, n, c).into_vec();
        seeds.sort_unstable();
        let mut centroids: Vec<f64> = seeds
            .iter()
            .flat_map(|&p| index.row(p).iter().copied())
            .collect();

        let assign = |centroids: &[f64]| -> Vec<usize> {
            exec::map_range(mode, n.div_ceil(SCAN_CHUNK), |chunk| {
                let lo = chunk * SCAN_CHUNK;
                let hi = (lo + SCAN_CHUNK).min(n);
                (lo..hi)
                    .map(|pos| {
                        let row = index.row(pos);
                        (0..c)
                            .map(|j| (j, l2(row, &centroids[j * d..(j + 1) * d])))
                            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                            .map_or(0, |x| x.0)
                    })
                    .collect::<Vec<_>>()
            })
            .concat()
        };

        let mut labels = assign(&centroids);
        for _ in 0..cfg.iterations {
            let mut sums = vec![0.0; c * d];
            let mut counts = vec![0usize; c];
            for (pos, &j) in labels.iter().enumerate() {
                counts[j] += 1;
                for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(index.row(pos)) {
                    *s += x;
                }
            }
            for j in 0..c {
                if counts[j] > 0 {
                    for t in 0..d {
                        centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
                    }
                }
            }
            let next = assign(&centroids);
            if next == labels {
                break;
            }
            labels = next;
        }
        let mut lists = vec![Vec::new(); c];
        for (pos, j) in labels.into_iter().enumerate() {
            lists[j].push(pos);
        }
        Ok(Self {
            dim: d,
            centroids,
            lists,
            probes,
        })
    }

    pub fn clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn default_probes(&self) -> usize {
        self.probes
    }

    /// Scans the `probes` best lists (more if they hold fewer than `k` rows).
    pub fn search(
        &self,
        index: &RetailerIndex,
        query: &[f64],
        k: usize,
        probes: Option<usize>,
    ) -> Result<Vec<Hit>> {
        check_query(index, query, k)?;
        if index.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: index.dim,
            });
        }
        let d = self.dim;
        let mut order: Vec<(usize, f64)> = (0..self.clusters())
            .map(|j| (j, dot(query, &self.centroids[j * d..(j + 1) * d])))
            .collect();
        order.sort_by(|a, b| score_order_desc(a.1, b.1).then(a.0.cmp(&b.0)));
        let probes = probes.unwrap_or(self.probes).max(1);
        let mut hits = Vec::new();
        for (probed, (j, _)) in order.into_iter().enumerate() {
            if probed >= probes && hits.len() >= k {
                break;
            }
            hits.extend(self.lists[j].iter().map(|&pos| Hit {
                pos,
                score: dot(query, index.row(pos)),
            }));
        }
        Ok(select_top(index, hits, k))
    }
}

pub fn knn_approx(
    index: &RetailerIndex,
    ivf: &IvfIndex,
    query: &[f64],
    k: usize,
) -> Result<Vec<Hit>> {
    ivf.search(index, query, k, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_index(n: usize, d: usize, seed: u64) -> RetailerIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let e: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (format!("p{i:04}"), e, "C".to_string(), true)
            })
            .collect();
        RetailerIndex::new("r", 0, d, rows).unwrap()
    }

    #[test]
    fn k_at_least_n_sorts_everything() {
        let idx = random_index(7, 3, 1);
        let q = [0.3, -0.2, 0.9];
        let hits = knn_exact(&idx, &q, 50).unwrap();
        assert_eq!(hits.len(), 7);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn zero_query_orders_by_id() {
        let mut idx = random_index(5, 2, 2);
        idx.ids.reverse();
        let hits = knn_exact(&idx, &[0.0, 0.0], 5).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| idx.ids[h.pos].as_str()).collect();
        assert_eq!(ids, vec!["p0000", "p0001", "p0002", "p0003", "p0004"]);
    }

    #[test]
    fn parallel_scan_matches_sequential() {
        let idx = random_index(3000, 8, 3);
        let q: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        assert_eq!(
            knn_exact_with(&idx, &q, 25, ExecMode::Sequential).unwrap(),
            knn_exact_with(&idx, &q, 25, ExecMode::Parallel).unwrap()
        );
    }

    #[test]
    fn exhaustive_probing_equals_exact() {
        let idx = random_index(400, 6, 4);
        let ivf = IvfIndex::build(&idx, &IvfConfig::default(), ExecMode::default()).unwrap();
        let q: Vec<f64> = vec![0.5, -0.1, 0.2, 0.0, 0.9, -0.4];
        assert_eq!(
            ivf.search(&idx, &q, 20, Some(ivf.clusters())).unwrap(),
            knn_exact(&idx, &q, 20).unwrap()
        );
    }

    #[test]
    fn single_product_index() {
        let idx = random_index(1, 3, 5);
        let ivf = IvfIndex::build(&idx, &IvfConfig::default(), ExecMode::Sequential).unwrap();
        let hits = knn_approx(&idx, &ivf, &[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].pos, 0);
    }

    #[test]
    fn errors() {
        let idx = random_index(3, 2, 6);
        assert!(knn_exact(&idx, &[1.0], 1).is_err());
        assert!(knn_exact(&idx, &[1.0, 0.0], 0).is_err());
        let empty = RetailerIndex::new("e", 0, 2, vec![]).unwrap();
        assert!(knn_exact(&empty, &[1.0, 0.0], 1).is_err());
    }
}
