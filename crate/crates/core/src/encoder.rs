//! Tokenizer and the two-tower text encoder.
//!
//! Each tower maps a token list to a `dim`-vector: mean of the token embedding rows, one affine
//! projection, elementwise `tanh`. Relevance between a query and a product is the raw dot
//! product of their tower outputs.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_query, Product};
use crate::dataset::{
    serialize_product_with, serialize_query, SerializeOptions, ATTRIBUTE_MARKER, BRAND_MARKER,
    CATEGORY_MARKER, NAME_MARKER, QUERY_MARKER, SIZE_MARKER,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

pub const UNK_TOKEN: &str = "[UNK]";

/// Reserved tokens, in index order.
pub const SPECIAL_TOKENS: [&str; 7] = [
    QUERY_MARKER,
    NAME_MARKER,
    BRAND_MARKER,
    SIZE_MARKER,
    CATEGORY_MARKER,
    ATTRIBUTE_MARKER,
    UNK_TOKEN,
];

pub const UNK_INDEX: u32 = 6;

/// Lowercases and strips everything but letters and digits.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Splits text into marker tokens and normalized words, dropping words that normalize to "".
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|w| {
        if SPECIAL_TOKENS.contains(&w) {
            Some(w.to_string())
        } else {
            let n = normalize_word(w);
            (!n.is_empty()).then_some(n)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new()).expect("special tokens are distinct")
    }
}

impl Vocabulary {
    /// Special tokens followed by `extra` (duplicates of specials are ignored).
    pub fn from_tokens(extra: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            extra
                .into_iter()
                .filter(|t| !SPECIAL_TOKENS.contains(&t.as_str())),
        );
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invariant(format!(
                    "duplicate vocabulary token `{t}`"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Words occurring at least `min_frequency` times across `texts`, sorted lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_frequency: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                if !SPECIAL_TOKENS.contains(&w.as_str()) {
                    *counts.entry(w).or_insert(0) += 1;
                }
            }
        }
        let kept = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_frequency.max(1))
            .map(|(w, _)| w)
            .collect();
        Self::from_tokens(kept).expect("counted words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    words(text).map(|w| vocab.index_of(&w)).collect()
}

/// Parameters of one encoder tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerModel {
    pub vocab_size: usize,
    pub hidden: usize,
    pub dim: usize,
    /// `vocab_size x hidden`, row-major.
    pub embedding: Vec<f64>,
    /// `hidden x dim`, row-major.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct TowerActivation {
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

impl TowerModel {
    pub fn zeros(vocab_size: usize, hidden: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            dim,
            embedding: vec![0.0; vocab_size * hidden],
            projection: vec![0.0; hidden * dim],
            bias: vec![0.0; dim],
        }
    }

    /// Uniform embedding init in `[-scale, scale]`, Glorot-uniform projection, zero bias.
    pub fn random<R: Rng + ?Sized>(
        vocab_size: usize,
        hidden: usize,
        dim: usize,
        embedding_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::zeros(vocab_size, hidden, dim);
        for x in &mut m.embedding {
            *x = rng.gen_range(-embedding_scale..=embedding_scale);
        }
        let limit = (6.0 / (hidden + dim) as f64).sqrt();
        for x in &mut m.projection {
            *x = rng.gen_range(-limit..=limit);
        }
        m
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding.len() + self.projection.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        let ok = self.embedding.len() == self.vocab_size * self.hidden
            && self.projection.len() == self.hidden * self.dim
            && self.bias.len() == self.dim;
        if !ok {
            return Err(Error::Invariant(
                "tower parameter shapes are inconsistent".into(),
            ));
        }
        if self
            .embedding
            .iter()
            .chain(&self.projection)
            .chain(&self.bias)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Invariant(
                "tower parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<TowerActivation> {
        if tokens.is_empty() {
            return Err(Error::Empty("token list"));
        }
        let h = self.hidden;
        let mut pooled = vec![0.0; h];
        for &t in tokens {
            let t = t as usize;
            if t >= self.vocab_size {
                return Err(Error::Invariant(format!(
                    "token index {t} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            for (p, e) in pooled.iter_mut().zip(&self.embedding[t * h..(t + 1) * h]) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let mut output = self.bias.clone();
        for (hi, &p) in pooled.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row = &self.projection[hi * self.dim..(hi + 1) * self.dim];
            for (o, w) in output.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        output.iter_mut().for_each(|o| *o = o.tanh());
        Ok(TowerActivation { pooled, output })
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.output)
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d output`.
    pub fn backward(
        &self,
        tokens: &[u32],
        act: &TowerActivation,
        grad_output: &[f64],
        grads: &mut TowerGrads,
    ) {
        let (h, d) = (self.hidden, self.dim);
        let dz: Vec<f64> = grad_output
            .iter()
            .zip(&act.output)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        for (b, z) in grads.bias.iter_mut().zip(&dz) {
            *b += z;
        }
        let mut dpooled = vec![0.0; h];
        for hi in 0..h {
            let row = &self.projection[hi * d..(hi + 1) * d];
            let grow = &mut grads.projection[hi * d..(hi + 1) * d];
            let p = act.pooled[hi];
            let mut acc = 0.0;
            for o in 0..d {
                grow[o] += p * dz[o];
                acc += row[o] * dz[o];
            }
            dpooled[hi] = acc;
        }
        let inv = 1.0 / tokens.len() as f64;
        for &t in tokens {
            grads.add_embedding_row(t, &dpooled, inv);
        }
    }
}

/// Gradient buffer for one tower; embedding rows are stored sparsely.
#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub hidden: usize,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    rows: HashMap<u32, usize>,
    row_ids: Vec<u32>,
    row_values: Vec<f64>,
}

impl TowerGrads {
    pub fn for_tower(tower: &TowerModel) -> Self {
        Self {
            hidden: tower.hidden,
            projection: vec![0.0; tower.projection.len()],
            bias: vec![0.0; tower.bias.len()],
            rows: HashMap::new(),
            row_ids: Vec::new(),
            row_values: Vec::new(),
        }
    }

    pub fn add_embedding_row(&mut self, token: u32, values: &[f64], scale: f64) {
        let h = self.hidden;
        let slot = match self.rows.get(&token) {
            Some(&s) => s,
            None => {
                let s = self.row_ids.len();
                self.rows.insert(token, s);
                self.row_ids.push(token);
                self.row_values.extend(std::iter::repeat_n(0.0, h));
                s
            }
        };
        for (g, v) in self.row_values[slot * h..(slot + 1) * h]
            .iter_mut()
            .zip(values)
        {
            *g += v * scale;
        }
    }

    /// Touched embedding rows, in first-touch order.
    pub fn embedding_rows(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.row_ids
            .iter()
            .enumerate()
            .map(move |(s, &t)| (t, &self.row_values[s * self.hidden..(s + 1) * self.hidden]))
    }

    pub fn embedding_row(&self, token: u32) -> Option<&[f64]> {
        self.rows
            .get(&token)
            .map(|&s| &self.row_values[s * self.hidden..(s + 1) * self.hidden])
    }

    /// `self += other`.
    pub fn merge(&mut self, other: &TowerGrads) {
        for (a, b) in self.projection.iter_mut().zip(&other.projection) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        for (t, row) in other.embedding_rows() {
            self.add_embedding_row(t, row, 1.0);
        }
    }

    /// Writes the embedding gradient into a dense `vocab x hidden` buffer (overwriting it).
    pub fn dense_embedding(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let h = self.hidden;
        for (t, row) in self.embedding_rows() {
            let t = t as usize;
            out[t * h..(t + 1) * h].copy_from_slice(row);
        }
    }
}

/// Descending score order. `0.0` and `-0.0` compare equal; NaN sorts last.
pub fn score_order_desc(a: f64, b: f64) -> std::cmp::Ordering {
    match b.partial_cmp(&a) {
        Some(o) => o,
        None => a.is_nan().cmp(&b.is_nan()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw dot-product relevance.
pub fn score(query: &[f64], product: &[f64]) -> Result<f64> {
    if query.len() != product.len() {
        return Err(Error::DimensionMismatch {
            expected: query.len(),
            actual: product.len(),
        });
    }
    Ok(dot(query, product))
}

#[derive(Debug, Clone, PartialEq)]
enum Towers {
    Tied(TowerModel),
    Untied {
        query: TowerModel,
        product: TowerModel,
    },
}

/// Query and product towers, either sharing one parameter set or owning separate copies.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    towers: Towers,
}

impl TwoTowerModel {
    pub fn tied(tower: TowerModel) -> Self {
        Self {
            towers: Towers::Tied(tower),
        }
    }

    pub fn untied(query: TowerModel, product: TowerModel) -> Result<Self> {
        if (query.vocab_size, query.hidden, query.dim)
            != (product.vocab_size, product.hidden, product.dim)
        {
            return Err(Error::Invariant("tower shapes differ".into()));
        }
        Ok(Self {
            towers: Towers::Untied { query, product },
        })
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.towers, Towers::Tied(_))
    }

    pub fn query_tower(&self) -> &TowerModel {
        match &self.towers {
            Towers::Tied(t) => t,
            Towers::Untied { query, .. } => query,
        }
    }

    pub fn product_tower(&self) -> &TowerModel {
        match &self.towers {
            Towers::Tied(t) => t,
            Towers::Untied { product, .. } => product,
        }
    }

    /// For a tied model this is the shared tower.
    pub fn query_tower_mut(&mut self) -> &mut TowerModel {
        match &mut self.towers {
            Towers::Tied(t) => t,
            Towers::Untied { query, .. } => query,
        }
    }

    pub fn product_tower_mut(&mut self) -> &mut TowerModel {
        match &mut self.towers {
            Towers::Tied(t) => t,
            Towers::Untied { product, .. } => product,
        }
    }

    /// Mutable access to every distinct parameter set (one when tied, two when untied).
    pub fn towers_mut(&mut self) -> Vec<&mut TowerModel> {
        match &mut self.towers {
            Towers::Tied(t) => vec![t],
            Towers::Untied { query, product } => vec![query, product],
        }
    }

    pub fn dim(&self) -> usize {
        self.query_tower().dim
    }

    /// Splits shared parameters into two independent copies.
    pub fn untie(self) -> Result<Self> {
        match self.towers {
            Towers::Tied(t) => Ok(Self {
                towers: Towers::Untied {
                    query: t.clone(),
                    product: t,
                },
            }),
            Towers::Untied { .. } => Err(Error::AlreadyUntied),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dim: usize,
    pub min_token_frequency: usize,
    pub embedding_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dim: 100,
            min_token_frequency: 2,
            embedding_init_scale: 0.5,
        }
    }
}

/// Vocabulary plus towers: everything needed to embed raw queries and catalog products.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub vocab: Vocabulary,
    pub towers: TwoTowerModel,
    pub stage: Stage,
    pub serialize: SerializeOptions,
}

const CHECKPOINT_FORMAT: &str = "ebr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    stage: Stage,
    tied: bool,
    dim: usize,
    hidden: usize,
    include_size: bool,
    vocab: Vec<String>,
    query_tower: TowerModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    product_tower: Option<TowerModel>,
}

impl EmbeddingModel {
    /// Fresh tied model over `vocab`.
    pub fn new_random<R: Rng + ?Sized>(vocab: Vocabulary, cfg: &ModelConfig, rng: &mut R) -> Self {
        let tower = TowerModel::random(
            vocab.len(),
            cfg.hidden,
            cfg.dim,
            cfg.embedding_init_scale,
            rng,
        );
        Self {
            vocab,
            towers: TwoTowerModel::tied(tower),
            stage: Stage::Warmup,
            serialize: SerializeOptions::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.towers.dim()
    }

    pub fn query_tokens(&self, query: &str) -> Result<Vec<u32>> {
        let text = serialize_query(&normalize_query(query))?;
        Ok(tokenize(&text, &self.vocab))
    }

    pub fn product_tokens(&self, product: &Product) -> Vec<u32> {
        tokenize(
            &serialize_product_with(product, self.serialize),
            &self.vocab,
        )
    }

    pub fn embed_query(&self, query: &str) -> Result<Vec<f64>> {
        self.towers.query_tower().encode(&self.query_tokens(query)?)
    }

    pub fn embed_query_text(&self, serialized: &str) -> Result<Vec<f64>> {
        self.towers
            .query_tower()
            .encode(&tokenize(serialized, &self.vocab))
    }

    pub fn embed_product(&self, product: &Product) -> Result<Vec<f64>> {
        self.towers
            .product_tower()
            .encode(&self.product_tokens(product))
    }

    pub fn embed_product_text(&self, serialized: &str) -> Result<Vec<f64>> {
        self.towers
            .product_tower()
            .encode(&tokenize(serialized, &self.vocab))
    }

    pub fn embed_products(&self, products: &[Product], mode: ExecMode) -> Result<Vec<Vec<f64>>> {
        exec::map(mode, products, |p| self.embed_product(p))
            .into_iter()
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (query_tower, product_tower) = if self.towers.is_tied() {
            (self.towers.query_tower().clone(), None)
        } else {
            (
                self.towers.query_tower().clone(),
                Some(self.towers.product_tower().clone()),
            )
        };
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            tied: self.towers.is_tied(),
            dim: self.dim(),
            hidden: self.towers.query_tower().hidden,
            include_size: self.serialize.include_size,
            vocab: self.vocab.tokens().to_vec(),
            query_tower,
            product_tower,
        };
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &file).map_err(|e| Error::format(path, e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", file.format, file.version),
            ));
        }
        let extra: Vec<String> = file
            .vocab
            .iter()
            .skip(SPECIAL_TOKENS.len())
            .cloned()
            .collect();
        if file.vocab.len() < SPECIAL_TOKENS.len()
            || file.vocab[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(Error::format(
                path,
                "vocabulary does not start with the special tokens",
            ));
        }
        let vocab = Vocabulary::from_tokens(extra)?;
        let towers = match (file.tied, file.product_tower) {
            (true, None) => TwoTowerModel::tied(file.query_tower),
            (false, Some(p)) => TwoTowerModel::untied(file.query_tower, p)?,
            _ => {
                return Err(Error::format(
                    path,
                    "tied flag disagrees with stored towers",
                ))
            }
        };
        for t in [towers.query_tower(), towers.product_tower()] {
            t.check().map_err(|e| Error::format(path, e.to_string()))?;
            if t.vocab_size != vocab.len() || t.dim != file.dim || t.hidden != file.hidden {
                return Err(Error::format(path, "tower shape disagrees with header"));
            }
        }
        Ok(Self {
            vocab,
            towers,
            stage: file.stage,
            serialize: SerializeOptions {
                include_size: file.include_size,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(vec!["milk".into(), "organic".into(), "kosher".into()]).unwrap()
    }

    #[test]
    fn special_tokens_lead() {
        let v = vocab();
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.index_of(t), i as u32);
        }
        assert_eq!(v.index_of(UNK_TOKEN), UNK_INDEX);
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn tokenization() {
        let v = vocab();
        assert_eq!(tokenize("[QRY] Milk", &v), vec![0, v.index_of("milk")]);
        assert_eq!(tokenize("[PBN] GreenWise", &v), vec![2, UNK_INDEX]);
        assert_eq!(
            tokenize("[PAS] organic, kosher", &v),
            vec![5, v.index_of("organic"), v.index_of("kosher")]
        );
    }

    #[test]
    fn vocabulary_min_frequency() {
        let v = Vocabulary::build(["[QRY] milk", "[PN] Milk, Whole", "[QRY] tea"], 2);
        assert_eq!(v.len(), SPECIAL_TOKENS.len() + 1);
        assert_ne!(v.index_of("milk"), UNK_INDEX);
        assert_eq!(v.index_of("tea"), UNK_INDEX);
    }

    #[test]
    fn encode_edge_cases() {
        let zero = TowerModel::zeros(10, 4, 3);
        assert_eq!(zero.encode(&[7, 8]).unwrap(), vec![0.0; 3]);
        assert!(matches!(zero.encode(&[]), Err(Error::Empty(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = TowerModel::random(10, 4, 3, 2.0, &mut rng);
        assert_eq!(t.encode(&[7, 7]).unwrap(), t.encode(&[7]).unwrap());
        let out = t.encode(&[1, 2, 3]).unwrap();
        assert!(out.iter().all(|x| *x > -1.0 && *x < 1.0));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(
            score(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn untie_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tied = TwoTowerModel::tied(TowerModel::random(10, 4, 3, 0.5, &mut rng));
        let tokens = [1u32, 8, 9];

        let mut t2 = tied.clone();
        t2.query_tower_mut().bias[0] = 0.7;
        assert_eq!(t2.product_tower().bias[0], 0.7);

        let mut untied = tied.untie().unwrap();
        assert!(!untied.is_tied());
        assert_eq!(
            untied.query_tower().encode(&tokens).unwrap(),
            untied.product_tower().encode(&tokens).unwrap()
        );
        let before = untied.query_tower().encode(&tokens).unwrap();
        untied.product_tower_mut().projection[0] += 1.0;
        untied.product_tower_mut().embedding[9 * 4] += 1.0;
        assert_eq!(untied.query_tower().encode(&tokens).unwrap(), before);
        assert_ne!(untied.product_tower().encode(&tokens).unwrap(), before);
        assert!(matches!(untied.untie(), Err(Error::AlreadyUntied)));
    }

    /// `score(encode_q(tq), encode_p(tp))` as a plain function of a parameter vector.
    fn flat(t: &TowerModel) -> Vec<f64> {
        t.embedding
            .iter()
            .chain(&t.projection)
            .chain(&t.bias)
            .copied()
            .collect()
    }

    fn unflat(t: &mut TowerModel, v: &[f64]) {
        let (e, rest) = v.split_at(t.embedding.len());
        let (p, b) = rest.split_at(t.projection.len());
        t.embedding.copy_from_slice(e);
        t.projection.copy_from_slice(p);
        t.bias.copy_from_slice(b);
    }

    fn grads_flat(t: &TowerModel, g: &TowerGrads) -> Vec<f64> {
        let mut emb = vec![0.0; t.embedding.len()];
        g.dense_embedding(&mut emb);
        emb.into_iter()
            .chain(g.projection.iter().copied())
            .chain(g.bias.iter().copied())
            .collect()
    }

    fn check_score_gradient(model: &TwoTowerModel, tq: &[u32], tp: &[u32]) {
        let qa = model.query_tower().forward(tq).unwrap();
        let pa = model.product_tower().forward(tp).unwrap();
        let mut gq = TowerGrads::for_tower(model.query_tower());
        let mut gp = TowerGrads::for_tower(model.product_tower());
        model.query_tower().backward(tq, &qa, &pa.output, &mut gq);
        model.product_tower().backward(tp, &pa, &qa.output, &mut gp);

        let eval = |m: &TwoTowerModel| {
            dot(
                &m.query_tower().encode(tq).unwrap(),
                &m.product_tower().encode(tp).unwrap(),
            )
        };
        let step = 1e-5;
        let mut analytic: Vec<(bool, Vec<f64>)> = Vec::new();
        if model.is_tied() {
            let mut g = gq.clone();
            g.merge(&gp);
            analytic.push((true, grads_flat(model.query_tower(), &g)));
        } else {
            analytic.push((true, grads_flat(model.query_tower(), &gq)));
            analytic.push((false, grads_flat(model.product_tower(), &gp)));
        }
        for (is_query, grad) in analytic {
            let base = if is_query {
                flat(model.query_tower())
            } else {
                flat(model.product_tower())
            };
            for i in 0..base.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let mut v = base.clone();
                v[i] += step;
                unflat(
                    if is_query {
                        plus.query_tower_mut()
                    } else {
                        plus.product_tower_mut()
                    },
                    &v,
                );
                v[i] -= 2.0 * step;
                unflat(
                    if is_query {
                        minus.query_tower_mut()
                    } else {
                        minus.product_tower_mut()
                    },
                    &v,
                );
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..4 {
            let mut tower = TowerModel::random(9, 3, 4, 1.0, &mut rng);
            for b in tower.bias.iter_mut().zip([0.1, -0.2, 0.3, 0.0]) {
                *b.0 = b.1;
            }
            let tied = TwoTowerModel::tied(tower);
            let tq = [0u32, 7, 8, 7];
            let tp = [1u32, 8, 2, 3, 4];
            if trial % 2 == 0 {
                check_score_gradient(&tied, &tq, &tp);
            } else {
                let mut untied = tied.untie().unwrap();
                untied
                    .product_tower_mut()
                    .embedding
                    .iter_mut()
                    .for_each(|x| *x *= -0.7);
                check_score_gradient(&untied, &tq, &tp);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig {
            hidden: 4,
            dim: 3,
            ..ModelConfig::default()
        };
        let model = EmbeddingModel::new_random(vocab(), &cfg, &mut rng);
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        assert_eq!(EmbeddingModel::load(&path).unwrap(), model);

        let mut untied = model.clone();
        untied.towers = untied.towers.untie().unwrap();
        untied.towers.product_tower_mut().bias[1] = 0.123456789012345;
        untied.stage = Stage::Cascade;
        untied.save(&path).unwrap();
        let back = EmbeddingModel::load(&path).unwrap();
        assert_eq!(back, untied);
        assert!(!back.towers.is_tied());
    }

    proptest! {
        #[test]
        fn encode_is_permutation_invariant(mut tokens in prop::collection::vec(0u32..12, 1..10), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = TowerModel::random(12, 5, 4, 1.0, &mut rng);
            let a = t.encode(&tokens).unwrap();
            tokens.reverse();
            let b = t.encode(&tokens).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
