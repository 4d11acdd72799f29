//! Training-set construction: warm-up and cascade positive pairs from the engagement log,
//! catalog-synthesized pairs, and the marker-token text serialization both towers consume.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_query, Catalog, Product, QueryEngagement};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

pub const QUERY_MARKER: &str = "[QRY]";
pub const NAME_MARKER: &str = "[PN]";
pub const BRAND_MARKER: &str = "[PBN]";
pub const SIZE_MARKER: &str = "[PSZ]";
pub const CATEGORY_MARKER: &str = "[PCS]";
pub const ATTRIBUTE_MARKER: &str = "[PAS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializeOptions {
    /// Emit the `[PSZ]` size field.
    pub include_size: bool,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        Self { include_size: true }
    }
}

pub fn serialize_query(query: &str) -> Result<String> {
    if query.trim().is_empty() {
        return Err(Error::Empty("query"));
    }
    Ok(format!("{QUERY_MARKER} {query}"))
}

pub fn serialize_product(p: &Product) -> String {
    serialize_product_with(p, SerializeOptions::default())
}

pub fn serialize_product_with(p: &Product, opts: SerializeOptions) -> String {
    let mut attributes: Vec<&str> = p.attributes.iter().map(String::as_str).collect();
    attributes.sort_unstable();
    attributes.dedup();
    let mut out = format!("{NAME_MARKER} {} {BRAND_MARKER} {}", p.name, p.brand);
    if opts.include_size {
        out.push_str(&format!(" {SIZE_MARKER} {}", p.size_info));
    }
    out.push_str(&format!(
        " {CATEGORY_MARKER} {} {ATTRIBUTE_MARKER} {}",
        p.categories.join(", "),
        attributes.join(", ")
    ));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CascadeConfig {
    /// Initial per-query cut, in percent.
    pub k0_percent: f64,
    /// Per-round decay of the cut.
    pub theta: f64,
    pub min_conversions: u32,
    /// `(frequency_quantile_upper_bound, k_percent)`, bounds ascending, last bound >= 1.
    pub frequency_k_map: Vec<(f64, f64)>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            k0_percent: 50.0,
            theta: 0.5,
            min_conversions: 2,
            frequency_k_map: vec![(0.25, 100.0), (0.5, 75.0), (0.75, 50.0), (1.0, 25.0)],
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!(
                "theta must lie in (0, 1), got {}",
                self.theta
            )));
        }
        if !(self.k0_percent > 0.0 && self.k0_percent <= 100.0) {
            return Err(Error::Config(format!(
                "k0_percent must lie in (0, 100], got {}",
                self.k0_percent
            )));
        }
        if self.min_conversions < 2 {
            return Err(Error::Config("min_conversions must be at least 2".into()));
        }
        self.validate_frequency_map()
    }

    fn validate_frequency_map(&self) -> Result<()> {
        let map = &self.frequency_k_map;
        if map.is_empty() {
            return Err(Error::Config("frequency_k_map is empty".into()));
        }
        for w in map.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("frequency_k_map bounds must ascend".into()));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::Config(
                    "frequency_k_map k values must not increase with frequency".into(),
                ));
            }
        }
        if map.last().map(|e| e.0).unwrap_or(0.0) < 1.0 {
            return Err(Error::Config(
                "last frequency_k_map bound must be >= 1".into(),
            ));
        }
        if map.iter().any(|e| !(e.1 > 0.0 && e.1 <= 100.0)) {
            return Err(Error::Config(
                "frequency_k_map k values must lie in (0, 100]".into(),
            ));
        }
        Ok(())
    }

    fn k_for_quantile(&self, quantile: f64) -> f64 {
        self.frequency_k_map
            .iter()
            .find(|(bound, _)| quantile <= *bound)
            .or(self.frequency_k_map.last())
            .map(|e| e.1)
            .unwrap_or(100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Engagement,
    Synthetic,
}

/// One positive example, as stored in `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    #[serde(rename = "q")]
    pub query_text: String,
    #[serde(rename = "p")]
    pub product_text: String,
    #[serde(rename = "pid")]
    pub product_id: String,
    pub source: PairSource,
    #[serde(rename = "w")]
    pub multiplicity: u32,
}

/// A (query, product) pair picked from the log, before text serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Selection {
    pub query: String,
    pub product_id: String,
    pub multiplicity: u32,
}

fn qualifying(q: &QueryEngagement, min_conversions: u32) -> Vec<&str> {
    q.products
        .iter()
        .filter(|(_, c)| *c >= min_conversions)
        .map(|(id, _)| id.as_str())
        .collect()
}

/// Warm-up selection: the top `ceil(len * k / 100)` products per query, `k` looked up by the
/// query's frequency quantile (the fraction of queries at or below its frequency).
pub fn select_warmup(
    engagement: &[QueryEngagement],
    cfg: &CascadeConfig,
) -> Result<Vec<Selection>> {
    if engagement.is_empty() {
        return Err(Error::Empty("engagement"));
    }
    cfg.validate_frequency_map()?;
    let mut freqs: Vec<u32> = engagement.iter().map(|q| q.frequency).collect();
    freqs.sort_unstable();
    let n = freqs.len() as f64;
    let per_query = exec::map(ExecMode::default(), engagement, |q| {
        let at_or_below = freqs.partition_point(|&f| f <= q.frequency) as f64;
        let k = cfg.k_for_quantile(at_or_below / n);
        let products = qualifying(q, cfg.min_conversions);
        let keep = ((products.len() as f64 * k) / 100.0).ceil() as usize;
        products
            .into_iter()
            .take(keep)
            .map(|id| Selection {
                query: q.query.clone(),
                product_id: id.to_string(),
                multiplicity: 1,
            })
            .collect::<Vec<_>>()
    });
    Ok(per_query.into_iter().flatten().collect())
}

/// Cascade selection.
///
/// Round `n` keeps, per query, the products at 1-based rank `j <= len * k_n / 100` with
/// `k_n = k0 * theta^n`; rounds continue until one adds nothing. A pair kept in several rounds
/// is emitted once with `multiplicity` = number of rounds.
pub fn select_cascade(
    engagement: &[QueryEngagement],
    cfg: &CascadeConfig,
) -> Result<Vec<Selection>> {
    cfg.validate()?;
    let per_query = exec::map(ExecMode::default(), engagement, |q| {
        let products = qualifying(q, cfg.min_conversions);
        let len = products.len() as f64;
        let mut rounds = vec![0u32; products.len()];
        let mut k = cfg.k0_percent;
        loop {
            let cut = ((len * k) / 100.0).floor() as usize;
            if cut == 0 {
                break;
            }
            for r in rounds.iter_mut().take(cut) {
                *r += 1;
            }
            k *= cfg.theta;
        }
        products
            .into_iter()
            .zip(rounds)
            .filter(|(_, m)| *m > 0)
            .map(|(id, m)| Selection {
                query: q.query.clone(),
                product_id: id.to_string(),
                multiplicity: m,
            })
            .collect::<Vec<_>>()
    });
    Ok(per_query.into_iter().flatten().collect())
}

/// Drops engagement for products absent from the catalog; queries left empty disappear.
pub fn restrict_to_catalog(
    engagement: &[QueryEngagement],
    catalog: &Catalog,
) -> Vec<QueryEngagement> {
    let mut dropped = 0usize;
    let out = engagement
        .iter()
        .filter_map(|q| {
            let products: Vec<(String, u32)> = q
                .products
                .iter()
                .filter(|(id, _)| {
                    let known = catalog.get(id).is_some();
                    if !known {
                        dropped += 1;
                    }
                    known
                })
                .cloned()
                .collect();
            (!products.is_empty())
                .then(|| QueryEngagement::new(q.query.clone(), q.frequency, products))
        })
        .collect();
    if dropped > 0 {
        log::warn!("dropped {dropped} engagement pairs referencing products not in the catalog");
    }
    out
}

pub fn materialize(
    selections: &[Selection],
    catalog: &Catalog,
    opts: SerializeOptions,
) -> Result<Vec<TrainingPair>> {
    selections
        .iter()
        .map(|s| {
            let product = catalog
                .get(&s.product_id)
                .ok_or_else(|| Error::Invariant(format!("unknown product `{}`", s.product_id)))?;
            Ok(TrainingPair {
                query_text: serialize_query(&s.query)?,
                product_text: serialize_product_with(product, opts),
                product_id: s.product_id.clone(),
                source: PairSource::Engagement,
                multiplicity: s.multiplicity,
            })
        })
        .collect()
}

pub fn build_warmup(
    engagement: &[QueryEngagement],
    catalog: &Catalog,
    cfg: &CascadeConfig,
    opts: SerializeOptions,
) -> Result<Vec<TrainingPair>> {
    if engagement.is_empty() {
        return Err(Error::Empty("engagement"));
    }
    let restricted = restrict_to_catalog(engagement, catalog);
    if restricted.is_empty() {
        return Err(Error::Empty("engagement after catalog join"));
    }
    materialize(&select_warmup(&restricted, cfg)?, catalog, opts)
}

pub fn build_cascade(
    engagement: &[QueryEngagement],
    catalog: &Catalog,
    cfg: &CascadeConfig,
    opts: SerializeOptions,
) -> Result<Vec<TrainingPair>> {
    let restricted = restrict_to_catalog(engagement, catalog);
    materialize(&select_cascade(&restricted, cfg)?, catalog, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Name,
    Brand,
    Categories,
    Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Upper bound on the synthetic fraction of the assembled dataset.
    pub ratio: f64,
    pub field_sources: Vec<FieldSource>,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            ratio: 0.05,
            field_sources: vec![
                FieldSource::Name,
                FieldSource::Brand,
                FieldSource::Categories,
                FieldSource::Attributes,
            ],
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "synthetic ratio must lie in [0, 0.5), got {}",
                self.ratio
            )));
        }
        if self.field_sources.is_empty() {
            return Err(Error::Config(
                "synthesis needs at least one field source".into(),
            ));
        }
        Ok(())
    }

    /// Largest synthetic count that keeps the fraction within `ratio` next to `base` pairs.
    pub fn synthetic_count_for(&self, base: usize) -> usize {
        if self.ratio <= 0.0 {
            return 0;
        }
        let mut n = ((self.ratio * base as f64) / (1.0 - self.ratio)).floor() as usize;
        while n > 0 && n as f64 / (base + n) as f64 > self.ratio {
            n -= 1;
        }
        n
    }
}

/// Renders a synthetic query from the chosen fields of `p`; brand first, then catalog order.
pub fn render_synthetic_query<R: Rng + ?Sized>(
    p: &Product,
    fields: &[FieldSource],
    rng: &mut R,
) -> Option<String> {
    let mut chosen: Vec<FieldSource> = fields.to_vec();
    chosen.sort();
    chosen.dedup();
    let mut parts: Vec<&str> = Vec::new();
    if chosen.contains(&FieldSource::Brand) && !p.brand.trim().is_empty() {
        parts.push(&p.brand);
    }
    if chosen.contains(&FieldSource::Name) {
        parts.push(&p.name);
    }
    if chosen.contains(&FieldSource::Categories) && !p.leaf_category().is_empty() {
        parts.push(p.leaf_category());
    }
    if chosen.contains(&FieldSource::Attributes) && !p.attributes.is_empty() {
        let mut attrs: Vec<&str> = p.attributes.iter().map(String::as_str).collect();
        attrs.sort_unstable();
        parts.push(attrs[rng.gen_range(0..attrs.len())]);
    }
    let query = normalize_query(&parts.join(" "));
    (!query.is_empty()).then_some(query)
}

pub fn synthesize_pairs(
    products: &[Product],
    cfg: &SynthesisConfig,
    target_count: usize,
    opts: SerializeOptions,
) -> Result<Vec<TrainingPair>> {
    if target_count == 0 {
        return Ok(Vec::new());
    }
    if products.is_empty() {
        return Err(Error::Empty("products for synthesis"));
    }
    if cfg.field_sources.is_empty() {
        return Err(Error::Config(
            "synthesis needs at least one field source".into(),
        ));
    }
    let mut sources = cfg.field_sources.clone();
    sources.sort();
    sources.dedup();
    let subsets = (1u32 << sources.len()) - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(target_count);
    let mut misses = 0usize;
    while out.len() < target_count {
        let p = &products[rng.gen_range(0..products.len())];
        let mask = rng.gen_range(1..=subsets);
        let subset: Vec<FieldSource> = sources
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, f)| *f)
            .collect();
        match render_synthetic_query(p, &subset, &mut rng) {
            Some(query) => out.push(TrainingPair {
                query_text: serialize_query(&query)?,
                product_text: serialize_product_with(p, opts),
                product_id: p.id.clone(),
                source: PairSource::Synthetic,
                multiplicity: 1,
            }),
            None => {
                misses += 1;
                if misses > 100 * target_count + 1000 {
                    return Err(Error::Invariant(
                        "catalog has no values for the configured synthesis fields".into(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates engagement and synthetic pairs and shuffles them under `cfg.rng_seed`.
pub fn assemble_dataset(
    base: Vec<TrainingPair>,
    synth: Vec<TrainingPair>,
    cfg: &SynthesisConfig,
) -> Result<Vec<TrainingPair>> {
    let total = base.len() + synth.len();
    if !synth.is_empty() && synth.len() as f64 / total as f64 > cfg.ratio {
        return Err(Error::Invariant(format!(
            "synthetic fraction {}/{} exceeds ratio {}",
            synth.len(),
            total,
            cfg.ratio
        )));
    }
    let mut all = base;
    all.extend(synth);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_da7a);
    all.shuffle(&mut rng);
    Ok(all)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    crate::corpus::write_json_lines(path.as_ref(), pairs)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainingPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if pair.multiplicity == 0 {
            return Err(Error::Parse {
                line: i + 1,
                message: "multiplicity must be >= 1".into(),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

/// Distinct (query, product) keys of a pair list.
pub fn pair_keys(pairs: &[TrainingPair]) -> HashSet<(String, String)> {
    pairs
        .iter()
        .map(|p| (p.query_text.clone(), p.product_id.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn milk() -> Product {
        Product {
            id: "p1".into(),
            name: "Organic 2% Reduced Fat Milk".into(),
            brand: "GreenWise".into(),
            size_info: String::new(),
            categories: vec!["Food".into(), "Dairy".into(), "Milk".into()],
            attributes: vec!["organic".into(), "kosher".into(), "gluten free".into()],
            retailer_ids: vec!["r1".into()],
            available: Default::default(),
        }
    }

    fn qe(query: &str, freq: u32, n: usize) -> QueryEngagement {
        QueryEngagement::new(
            query,
            freq,
            (0..n)
                .map(|i| (format!("p{i:02}"), 100 - i as u32))
                .collect(),
        )
    }

    #[test]
    fn query_serialization() {
        assert_eq!(serialize_query("milk").unwrap(), "[QRY] milk");
        assert_eq!(serialize_query("red wine").unwrap(), "[QRY] red wine");
        assert!(serialize_query("").is_err());
    }

    #[test]
    fn product_serialization() {
        assert_eq!(
            serialize_product(&milk()),
            "[PN] Organic 2% Reduced Fat Milk [PBN] GreenWise [PSZ]  [PCS] Food, Dairy, Milk [PAS] gluten free, kosher, organic"
        );
        let salt = Product {
            id: "s".into(),
            name: "Salt".into(),
            categories: vec!["Food".into()],
            ..milk()
        };
        let salt = Product {
            brand: String::new(),
            attributes: vec![],
            ..salt
        };
        assert_eq!(
            serialize_product(&salt),
            "[PN] Salt [PBN]  [PSZ]  [PCS] Food [PAS] "
        );
        let mut ab = salt.clone();
        ab.attributes = vec!["b".into(), "a".into()];
        assert!(serialize_product(&ab).ends_with("[PAS] a, b"));
        assert_eq!(
            serialize_product_with(
                &salt,
                SerializeOptions {
                    include_size: false
                }
            ),
            "[PN] Salt [PBN]  [PCS] Food [PAS] "
        );
    }

    #[test]
    fn warmup_cuts() {
        let mut cfg = CascadeConfig::default();
        // two queries: the busier one is in the top quantile
        let eng = vec![qe("busy", 1000, 8), qe("quiet", 1, 3)];
        cfg.frequency_k_map = vec![(0.5, 100.0), (1.0, 25.0)];
        let sel = select_warmup(&eng, &cfg).unwrap();
        let busy: Vec<_> = sel.iter().filter(|s| s.query == "busy").collect();
        let quiet: Vec<_> = sel.iter().filter(|s| s.query == "quiet").collect();
        assert_eq!(busy.len(), 2);
        assert_eq!(busy[0].product_id, "p00");
        assert_eq!(busy[1].product_id, "p01");
        assert_eq!(quiet.len(), 3);
        assert!(sel.iter().all(|s| s.multiplicity == 1));

        cfg.frequency_k_map = vec![(1.0, 50.0)];
        let sel = select_warmup(&[qe("one", 5, 1)], &cfg).unwrap();
        assert_eq!(sel.len(), 1);

        assert!(matches!(select_warmup(&[], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn cascade_hand_traces() {
        let cfg = CascadeConfig::default();
        let sel = select_cascade(&[qe("q", 10, 8)], &cfg).unwrap();
        let mult: Vec<u32> = sel.iter().map(|s| s.multiplicity).collect();
        assert_eq!(mult, vec![3, 2, 1, 1]);

        let cfg100 = CascadeConfig {
            k0_percent: 100.0,
            ..CascadeConfig::default()
        };
        let sel = select_cascade(&[qe("q", 10, 1)], &cfg100).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].multiplicity, 1);

        assert!(select_cascade(&[], &cfg).unwrap().is_empty());

        let bad = CascadeConfig {
            theta: 1.0,
            ..CascadeConfig::default()
        };
        assert!(matches!(
            select_cascade(&[qe("q", 1, 3)], &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn min_conversions_respected() {
        let eng = vec![QueryEngagement::new(
            "q",
            3,
            vec![("a".into(), 5), ("b".into(), 1)],
        )];
        let cfg = CascadeConfig {
            frequency_k_map: vec![(1.0, 100.0)],
            ..CascadeConfig::default()
        };
        let sel = select_warmup(&eng, &cfg).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].product_id, "a");
    }

    #[test]
    fn build_joins_catalog() {
        let catalog = Catalog::new(vec![milk()]).unwrap();
        let eng = vec![QueryEngagement::new(
            "milk",
            3,
            vec![("p1".into(), 5), ("gone".into(), 4)],
        )];
        let cfg = CascadeConfig {
            frequency_k_map: vec![(1.0, 100.0)],
            ..CascadeConfig::default()
        };
        let pairs = build_warmup(&eng, &catalog, &cfg, SerializeOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].query_text, "[QRY] milk");
        assert!(pairs[0].product_text.starts_with("[PN] "));
        assert_eq!(pairs[0].source, PairSource::Engagement);
    }

    #[test]
    fn synthetic_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = milk();
        assert_eq!(
            render_synthetic_query(&p, &[FieldSource::Categories, FieldSource::Brand], &mut rng)
                .unwrap(),
            "greenwise milk"
        );
        let only_organic = Product {
            attributes: vec!["Organic".into()],
            ..milk()
        };
        assert_eq!(
            render_synthetic_query(&only_organic, &[FieldSource::Attributes], &mut rng).unwrap(),
            "organic"
        );
        let no_brand = Product {
            brand: String::new(),
            ..milk()
        };
        assert!(render_synthetic_query(&no_brand, &[FieldSource::Brand], &mut rng).is_none());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let products = vec![
            milk(),
            Product {
                id: "p2".into(),
                name: "Whole Milk".into(),
                ..milk()
            },
        ];
        let cfg = SynthesisConfig {
            rng_seed: 9,
            ..SynthesisConfig::default()
        };
        let a = synthesize_pairs(&products, &cfg, 20, SerializeOptions::default()).unwrap();
        let b = synthesize_pairs(&products, &cfg, 20, SerializeOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a
            .iter()
            .all(|p| p.source == PairSource::Synthetic && p.query_text.starts_with("[QRY] ")));
        assert!(synthesize_pairs(&[], &cfg, 1, SerializeOptions::default()).is_err());
        assert!(synthesize_pairs(&[], &cfg, 0, SerializeOptions::default())
            .unwrap()
            .is_empty());
    }

    fn dummy(n: usize, source: PairSource) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| TrainingPair {
                query_text: format!("[QRY] q{i}"),
                product_text: format!("[PN] p{i}"),
                product_id: format!("{source:?}{i}"),
                source,
                multiplicity: 1,
            })
            .collect()
    }

    #[test]
    fn assembly_ratio() {
        let cfg = SynthesisConfig::default();
        let out = assemble_dataset(
            dummy(95, PairSource::Engagement),
            dummy(5, PairSource::Synthetic),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(
            out.iter()
                .filter(|p| p.source == PairSource::Synthetic)
                .count(),
            5
        );

        let zero = SynthesisConfig {
            ratio: 0.0,
            ..cfg.clone()
        };
        assert!(assemble_dataset(
            dummy(95, PairSource::Engagement),
            dummy(1, PairSource::Synthetic),
            &zero
        )
        .is_err());

        let base = dummy(10, PairSource::Engagement);
        let mut out = assemble_dataset(base.clone(), vec![], &cfg).unwrap();
        out.sort_by(|a, b| a.product_id.cmp(&b.product_id));
        let mut sorted = base;
        sorted.sort_by(|a, b| a.product_id.cmp(&b.product_id));
        assert_eq!(out, sorted);

        assert_eq!(cfg.synthetic_count_for(95), 5);
    }

    #[test]
    fn pairs_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = dummy(3, PairSource::Synthetic);
        write_pairs(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            r#"{"q":"[QRY] q0","p":"[PN] p0","pid":"Synthetic0","source":"synthetic","w":1}"#
        ));
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    fn engagement_strategy() -> impl Strategy<Value = Vec<QueryEngagement>> {
        prop::collection::vec((1u32..500, prop::collection::vec(2u32..50, 1..30)), 1..8).prop_map(
            |qs| {
                qs.into_iter()
                    .enumerate()
                    .map(|(qi, (freq, convs))| {
                        QueryEngagement::new(
                            format!("q{qi}"),
                            freq,
                            convs
                                .into_iter()
                                .enumerate()
                                .map(|(pi, c)| (format!("p{pi}"), c))
                                .collect(),
                        )
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn cascade_multiplicity_non_increasing_in_rank(eng in engagement_strategy(), k0 in prop::sample::select(vec![12.5, 25.0, 50.0, 100.0])) {
            let cfg = CascadeConfig { k0_percent: k0, ..CascadeConfig::default() };
            let sel = select_cascade(&eng, &cfg).unwrap();
            for q in &eng {
                let mults: Vec<u32> = q.products.iter().map(|(id, _)| {
                    sel.iter().find(|s| s.query == q.query && &s.product_id == id).map_or(0, |s| s.multiplicity)
                }).collect();
                prop_assert!(mults.windows(2).all(|w| w[0] >= w[1]));
            }
        }

        #[test]
        fn full_warmup_keeps_every_pair_once(eng in engagement_strategy()) {
            let cfg = CascadeConfig { frequency_k_map: vec![(1.0, 100.0)], ..CascadeConfig::default() };
            let sel = select_warmup(&eng, &cfg).unwrap();
            let total: usize = eng.iter().map(|q| q.products.len()).sum();
            prop_assert_eq!(sel.len(), total);
            let distinct: HashSet<_> = sel.iter().map(|s| (&s.query, &s.product_id)).collect();
            prop_assert_eq!(distinct.len(), total);
        }

        #[test]
        fn product_serialization_distinguishes_fields(a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
            prop_assume!(a != b);
            let p = milk();
            let mut q = p.clone();
            q.name = a.clone();
            let mut r = p.clone();
            r.name = b.clone();
            prop_assert_ne!(serialize_product(&q), serialize_product(&r));
            let mut s = p.clone();
            s.brand = a;
            let mut t = p;
            t.brand = b;
            prop_assert_ne!(serialize_product(&s), serialize_product(&t));
        }

        #[test]
        fn assembly_is_a_permutation(n in 0usize..60, m in 0usize..3, seed in any::<u64>()) {
            let cfg = SynthesisConfig { ratio: 0.49, rng_seed: seed, ..SynthesisConfig::default() };
            prop_assume!(m == 0 || (m as f64) / ((n + m) as f64) <= cfg.ratio);
            let base = dummy(n, PairSource::Engagement);
            let synth = dummy(m, PairSource::Synthetic);
            let out = assemble_dataset(base.clone(), synth.clone(), &cfg).unwrap();
            prop_assert_eq!(out.len(), n + m);
            let mut ids: Vec<_> = out.iter().map(|p| p.product_id.clone()).collect();
            let mut expect: Vec<_> = base.iter().chain(synth.iter()).map(|p| p.product_id.clone()).collect();
            ids.sort();
            expect.sort();
            prop_assert_eq!(ids, expect);
        }
    }
}
