//! Catalog, engagement-log and human-label records, plus their file loaders.
//!
//! Three on-disk formats are read here:
//!
//! * `catalog.jsonl`: one [`Product`] JSON object per line.
//! * `engagement.tsv`: `query \t product_id \t conversions \t impressions \t query_frequency`
//!   (JSON-lines with the same keys is accepted too).
//! * `labels.jsonl`: `{"query", "product_id", "raters": [level, ...]}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Canonical query form: NFC, lowercase, trimmed, internal whitespace collapsed.
pub fn normalize_query(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub brand: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub size_info: String,
    /// Taxonomy path, root first.
    pub categories: Vec<String>,
    /// Treated as a set: duplicates are removed on load, order is not significant.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retailer_ids: Vec<String>,
    /// Per-retailer availability. A carrying retailer missing from the map counts as available.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub available: BTreeMap<String, bool>,
}

impl Product {
    pub fn leaf_category(&self) -> &str {
        self.categories.last().map(String::as_str).unwrap_or("")
    }

    pub fn carried_by(&self, retailer: &str) -> bool {
        self.retailer_ids.iter().any(|r| r == retailer)
    }

    pub fn is_available_at(&self, retailer: &str) -> bool {
        self.carried_by(retailer) && self.available.get(retailer).copied().unwrap_or(true)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("product id is empty".into());
        }
        if self.name.trim().is_empty() {
            return Err(format!("product `{}` has an empty name", self.id));
        }
        if self.categories.is_empty() {
            return Err(format!("product `{}` has no categories", self.id));
        }
        Ok(())
    }
}

/// Raw line shape; every field optional so missing ones can be reported by name.
#[derive(Deserialize)]
struct RawProduct {
    id: Option<String>,
    name: Option<String>,
    #[serde(default)]
    brand: Option<String>,
    #[serde(default)]
    size_info: Option<String>,
    categories: Option<Vec<String>>,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    retailer_ids: Vec<String>,
    #[serde(default)]
    available: BTreeMap<String, bool>,
}

fn dedup_preserving_order(values: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(values.len());
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Products indexed by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(products: Vec<Product>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            p.validate().map_err(Error::Invariant)?;
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { products, by_id })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, id: &str) -> Option<&Product> {
        self.by_id.get(id).map(|&i| &self.products[i])
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Every retailer id mentioned by any product, sorted.
    pub fn retailers(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .products
            .iter()
            .flat_map(|p| p.retailer_ids.iter().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(&owned, e)))))
}

/// Parses one catalog line. `line` is only used for error messages.
pub fn parse_product_line(text: &str, line: usize) -> Result<Product> {
    let raw: RawProduct = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let product = Product {
        id: raw.id.ok_or(Error::MissingField { line, field: "id" })?,
        name: raw.name.ok_or(Error::MissingField {
            line,
            field: "name",
        })?,
        brand: raw.brand.unwrap_or_default(),
        size_info: raw.size_info.unwrap_or_default(),
        categories: raw.categories.ok_or(Error::MissingField {
            line,
            field: "categories",
        })?,
        attributes: dedup_preserving_order(raw.attributes),
        retailer_ids: dedup_preserving_order(raw.retailer_ids),
        available: raw.available,
    };
    product
        .validate()
        .map_err(|message| Error::Parse { line, message })?;
    Ok(product)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<Product>> {
    let path = path.as_ref();
    let mut products = Vec::new();
    let mut seen = HashMap::new();
    for (line, text) in open_lines(path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let product = parse_product_line(&text, line)?;
        if seen.insert(product.id.clone(), line).is_some() {
            return Err(Error::DuplicateId(product.id));
        }
        products.push(product);
    }
    Ok(products)
}

pub fn write_catalog(path: impl AsRef<Path>, products: &[Product]) -> Result<()> {
    write_json_lines(path.as_ref(), products)
}

pub(crate) fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// One (query, product) row of the engagement log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub query: String,
    pub product_id: String,
    /// Distinct converting users.
    pub conversions: u32,
    pub impressions: u32,
    /// Total searches for the query; 0 when the log does not carry it.
    #[serde(default)]
    pub query_frequency: u32,
}

impl EngagementRecord {
    pub fn new(
        query: &str,
        product_id: impl Into<String>,
        conversions: u32,
        impressions: u32,
        query_frequency: u32,
    ) -> Result<Self> {
        if impressions == 0 {
            return Err(Error::Invariant("impressions must be positive".into()));
        }
        if conversions > impressions {
            return Err(Error::Invariant(format!(
                "conversions ({conversions}) exceed impressions ({impressions})"
            )));
        }
        Ok(Self {
            query: normalize_query(query),
            product_id: product_id.into(),
            conversions,
            impressions,
            query_frequency,
        })
    }

    pub fn ctr(&self) -> f64 {
        f64::from(self.conversions) / f64::from(self.impressions)
    }

    /// Whether the pair passes a minimum-conversions filter. Loading never drops rows.
    pub fn qualifies(&self, min_conversions: u32) -> bool {
        self.conversions >= min_conversions
    }
}

fn parse_count(field: &str, line: usize, name: &str) -> Result<u32> {
    field.trim().parse::<u32>().map_err(|e| Error::Parse {
        line,
        message: format!("{name}: {e}"),
    })
}

pub fn load_engagement(path: impl AsRef<Path>) -> Result<Vec<EngagementRecord>> {
    let mut out = Vec::new();
    for (line, text) in open_lines(path.as_ref())? {
        let text = text?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw = if trimmed.starts_with('{') {
            serde_json::from_str::<EngagementRecord>(trimmed).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?
        } else {
            let cols: Vec<&str> = text.split('\t').collect();
            if cols.len() < 4 {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "expected at least 4 tab-separated columns, got {}",
                        cols.len()
                    ),
                });
            }
            EngagementRecord {
                query: cols[0].to_string(),
                product_id: cols[1].trim().to_string(),
                conversions: parse_count(cols[2], line, "conversions")?,
                impressions: parse_count(cols[3], line, "impressions")?,
                query_frequency: match cols.get(4) {
                    Some(f) => parse_count(f, line, "query_frequency")?,
                    None => 0,
                },
            }
        };
        let record = EngagementRecord::new(
            &raw.query,
            raw.product_id,
            raw.conversions,
            raw.impressions,
            raw.query_frequency,
        )
        .map_err(|e| match e {
            Error::Invariant(message) => Error::Parse { line, message },
            other => other,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_engagement(path: impl AsRef<Path>, records: &[EngagementRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.query, r.product_id, r.conversions, r.impressions, r.query_frequency
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// All qualifying products converted for one query, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryEngagement {
    pub query: String,
    pub frequency: u32,
    /// `(product_id, conversions)`, conversions descending, ties by id ascending.
    pub products: Vec<(String, u32)>,
}

impl QueryEngagement {
    pub fn new(query: impl Into<String>, frequency: u32, mut products: Vec<(String, u32)>) -> Self {
        products.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self {
            query: query.into(),
            frequency,
            products,
        }
    }

    /// Groups log rows by query, keeping pairs with at least `min_conversions`.
    ///
    /// Repeated (query, product) rows have their conversions summed. Query frequency is the
    /// largest `query_frequency` seen, falling back to total impressions when the log has none.
    /// Queries left with no qualifying product are omitted. Output is sorted by query.
    pub fn group(records: &[EngagementRecord], min_conversions: u32) -> Vec<QueryEngagement> {
        struct Acc {
            frequency: u32,
            impressions: u64,
            products: BTreeMap<String, u32>,
        }
        let mut by_query: BTreeMap<&str, Acc> = BTreeMap::new();
        for r in records {
            let acc = by_query.entry(r.query.as_str()).or_insert_with(|| Acc {
                frequency: 0,
                impressions: 0,
                products: BTreeMap::new(),
            });
            acc.frequency = acc.frequency.max(r.query_frequency);
            acc.impressions += u64::from(r.impressions);
            *acc.products.entry(r.product_id.clone()).or_insert(0) += r.conversions;
        }
        by_query
            .into_iter()
            .filter_map(|(query, acc)| {
                let products: Vec<(String, u32)> = acc
                    .products
                    .into_iter()
                    .filter(|(_, c)| *c >= min_conversions)
                    .collect();
                if products.is_empty() {
                    return None;
                }
                let frequency = if acc.frequency > 0 {
                    acc.frequency
                } else {
                    u32::try_from(acc.impressions).unwrap_or(u32::MAX)
                };
                Some(QueryEngagement::new(query, frequency, products))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceLevel {
    StronglyRelevant,
    Relevant,
    SomewhatRelevant,
    NotRelevant,
    Offensive,
}

impl RelevanceLevel {
    pub const ALL: [RelevanceLevel; 5] = [
        RelevanceLevel::StronglyRelevant,
        RelevanceLevel::Relevant,
        RelevanceLevel::SomewhatRelevant,
        RelevanceLevel::NotRelevant,
        RelevanceLevel::Offensive,
    ];

    pub fn gain(self) -> u32 {
        match self {
            RelevanceLevel::StronglyRelevant => 3,
            RelevanceLevel::Relevant => 2,
            RelevanceLevel::SomewhatRelevant => 1,
            RelevanceLevel::NotRelevant | RelevanceLevel::Offensive => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceLevel::StronglyRelevant => "strongly_relevant",
            RelevanceLevel::Relevant => "relevant",
            RelevanceLevel::SomewhatRelevant => "somewhat_relevant",
            RelevanceLevel::NotRelevant => "not_relevant",
            RelevanceLevel::Offensive => "offensive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanLabel {
    pub query: String,
    pub product_id: String,
    pub level: RelevanceLevel,
}

impl HumanLabel {
    pub fn gain(&self) -> u32 {
        self.level.gain()
    }
}

/// A labels-file row before agreement filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterRow {
    pub query: String,
    pub product_id: String,
    pub raters: Vec<RelevanceLevel>,
}

impl RaterRow {
    /// The level chosen by at least `threshold` raters, if any. When several levels reach the
    /// threshold the most frequent wins, then the most relevant.
    pub fn agreed_level(&self, threshold: usize) -> Option<RelevanceLevel> {
        let mut counts = [0usize; 5];
        for level in &self.raters {
            counts[*level as usize] += 1;
        }
        RelevanceLevel::ALL
            .iter()
            .copied()
            .filter(|l| counts[*l as usize] >= threshold)
            .max_by(|a, b| counts[*a as usize].cmp(&counts[*b as usize]).then(b.cmp(a)))
    }
}

pub fn load_labels(path: impl AsRef<Path>, agreement_threshold: usize) -> Result<Vec<HumanLabel>> {
    if agreement_threshold == 0 {
        return Err(Error::Config(
            "agreement threshold must be at least 1".into(),
        ));
    }
    let mut out = Vec::new();
    for (line, text) in open_lines(path.as_ref())? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let row: RaterRow = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if row.raters.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty rater list".into(),
            });
        }
        if let Some(level) = row.agreed_level(agreement_threshold) {
            out.push(HumanLabel {
                query: normalize_query(&row.query),
                product_id: row.product_id,
                level,
            });
        }
    }
    Ok(out)
}

pub fn write_rater_rows(path: impl AsRef<Path>, rows: &[RaterRow]) -> Result<()> {
    write_json_lines(path.as_ref(), rows)
}
