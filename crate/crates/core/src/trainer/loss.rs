//! Binary cross-entropy over in-batch query/product pairs with pluggable negative selection.
//!
//! Every strategy reduces to a *negative plan*: a `b x b` matrix of per-pair weights (zero on
//! the diagonal and for unselected pairs). The loss for a plan `W` is
//!
//! ```text
//! L = sum_i w_i * BCE(sigma(q_i.p_i), 1) + lambda_neg * sum_i sum_{j != i} W_ij * BCE(sigma(q_i.p_j), 0)
//! ```
//!
//! so all strategies share the same summation order and the all-ones plan is reached bit for
//! bit from every route that selects everything.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

pub const BCE_EPSILON: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a probability against a 0/1 label, probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce(prob: f64, label: bool) -> f64 {
    let p = prob.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Maps a raw score to a self-adversarial weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Activation::Identity),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AllInBatch,
    RandomK,
    SelfAdvReweight,
    SelfAdvSampling,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "all_in_batch" | "all" | "vanilla" => Ok(Strategy::AllInBatch),
            "random_k" | "random" => Ok(Strategy::RandomK),
            "self_adv_reweight" | "selfadv_reweight" | "reweight" => Ok(Strategy::SelfAdvReweight),
            "self_adv_sampling" | "selfadv_sampling" | "sampling" => Ok(Strategy::SelfAdvSampling),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub strategy: Strategy,
    /// Negatives per query for `RandomK` (required) and cap for `SelfAdvSampling` (optional).
    #[serde(default)]
    pub k: Option<usize>,
    pub lambda_neg: f64,
    pub activation: Activation,
    pub temperature: f64,
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::AllInBatch,
            k: None,
            lambda_neg: 1.0,
            activation: Activation::Identity,
            temperature: 1.0,
            detach_weights: true,
        }
    }
}

impl LossConfig {
    pub fn all_in_batch() -> Self {
        Self::default()
    }

    pub fn self_adv_reweight(activation: Activation) -> Self {
        Self {
            strategy: Strategy::SelfAdvReweight,
            activation,
            ..Self::default()
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.lambda_neg > 0.0) {
            return Err(Error::Config("lambda_neg must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        match (self.strategy, self.k) {
            (Strategy::RandomK, None) => Err(Error::Config("random_k needs k".into())),
            (Strategy::RandomK | Strategy::SelfAdvSampling, Some(k))
                if k == 0 || k >= batch_size =>
            {
                Err(Error::Config(format!(
                    "k must lie in [1, {}], got {k}",
                    batch_size - 1
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Embeddings of one batch: row `i` of `queries` and `products` form positive pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub size: usize,
    pub dim: usize,
    pub queries: Vec<f64>,
    pub products: Vec<f64>,
    /// Per-example weight on the positive term.
    pub weights: Vec<f64>,
}

impl BatchEmbeddings {
    pub fn new(
        dim: usize,
        queries: Vec<f64>,
        products: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let size = weights.len();
        if queries.len() != size * dim || products.len() != size * dim {
            return Err(Error::DimensionMismatch {
                expected: size * dim,
                actual: queries.len().max(products.len()),
            });
        }
        Ok(Self {
            size,
            dim,
            queries,
            products,
            weights,
        })
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn product(&self, j: usize) -> &[f64] {
        &self.products[j * self.dim..(j + 1) * self.dim]
    }

    /// `b x b` matrix of `q_i . p_j`.
    pub fn scores(&self, mode: ExecMode) -> Vec<f64> {
        exec::map_range(mode, self.size, |i| {
            let q = self.query(i);
            (0..self.size)
                .map(|j| crate::encoder::dot(q, self.product(j)))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    fn check(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!(
                "in-batch negatives need a batch of at least 2, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Per-pair negative weights for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativePlan {
    pub size: usize,
    pub weights: Vec<f64>,
    /// `d W_ij / d s_ij` when weights are not detached.
    pub slopes: Option<Vec<f64>>,
}

impl NegativePlan {
    pub fn all(size: usize) -> Self {
        let mut weights = vec![1.0; size * size];
        for i in 0..size {
            weights[i * size + i] = 0.0;
        }
        Self {
            size,
            weights,
            slopes: None,
        }
    }

    pub fn selected(&self, i: usize) -> Vec<usize> {
        (0..self.size)
            .filter(|&j| self.weights[i * self.size + j] != 0.0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub pos_loss: f64,
    /// Negative term before multiplication by `lambda_neg`.
    pub neg_loss: f64,
    pub grad_queries: Vec<f64>,
    pub grad_products: Vec<f64>,
}

/// Loss and exact gradients for a fixed plan. `scores` must be `batch.scores(..)`.
pub fn loss_with_plan(
    batch: &BatchEmbeddings,
    scores: &[f64],
    plan: &NegativePlan,
    lambda_neg: f64,
    mode: ExecMode,
) -> LossOutput {
    let b = batch.size;
    let d = batch.dim;
    // row i -> (pos_i, neg_i, G_i.)
    let rows = exec::map_range(mode, b, |i| {
        let mut grad = vec![0.0; b];
        let s_ii = scores[i * b + i];
        let sig = sigmoid(s_ii);
        let pos = batch.weights[i] * bce(sig, true);
        grad[i] = batch.weights[i] * (sig - 1.0);
        let mut neg = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            let w = plan.weights[i * b + j];
            let slope = plan.slopes.as_ref().map_or(0.0, |s| s[i * b + j]);
            if w == 0.0 && slope == 0.0 {
                continue;
            }
            let s = scores[i * b + j];
            let sig = sigmoid(s);
            let term = bce(sig, false);
            neg += w * term;
            grad[j] = lambda_neg * (w * sig + slope * term);
        }
        (pos, neg, grad)
    });

    let mut pos_loss = 0.0;
    let mut neg_loss = 0.0;
    let mut g = Vec::with_capacity(b * b);
    for (p, n, row) in rows {
        pos_loss += p;
        neg_loss += n;
        g.extend(row);
    }

    let grad_queries = exec::map_range(mode, b, |i| {
        let mut out = vec![0.0; d];
        for j in 0..b {
            let gij = g[i * b + j];
            if gij != 0.0 {
                for (o, p) in out.iter_mut().zip(batch.product(j)) {
                    *o += gij * p;
                }
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    let grad_products = exec::map_range(mode, b, |j| {
        let mut out = vec![0.0; d];
        for i in 0..b {
            let gij = g[i * b + j];
            if gij != 0.0 {
                for (o, q) in out.iter_mut().zip(batch.query(i)) {
                    *o += gij * q;
                }
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();

    LossOutput {
        loss: pos_loss + lambda_neg * neg_loss,
        pos_loss,
        neg_loss,
        grad_queries,
        grad_products,
    }
}

pub fn loss_all_inbatch(batch: &BatchEmbeddings, lambda_neg: f64) -> Result<LossOutput> {
    batch.check()?;
    let mode = ExecMode::default();
    let scores = batch.scores(mode);
    Ok(loss_with_plan(
        batch,
        &scores,
        &NegativePlan::all(batch.size),
        lambda_neg,
        mode,
    ))
}

/// Uniformly samples `k` of the other `b - 1` products for every query.
pub fn random_k_plan<R: Rng + ?Sized>(size: usize, k: usize, rng: &mut R) -> Result<NegativePlan> {
    if k == 0 || k >= size {
        return Err(Error::Config(format!(
            "k must lie in [1, {}], got {k}",
            size.saturating_sub(1)
        )));
    }
    let mut weights = vec![0.0; size * size];
    for i in 0..size {
        for m in sample(rng, size - 1, k).into_iter() {
            let j = if m >= i { m + 1 } else { m };
            weights[i * size + j] = 1.0;
        }
    }
    Ok(NegativePlan {
        size,
        weights,
        slopes: None,
    })
}

pub fn loss_random_k<R: Rng + ?Sized>(
    batch: &BatchEmbeddings,
    k: usize,
    lambda_neg: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    batch.check()?;
    let plan = random_k_plan(batch.size, k, rng)?;
    let mode = ExecMode::default();
    let scores = batch.scores(mode);
    Ok(loss_with_plan(batch, &scores, &plan, lambda_neg, mode))
}

/// Plan whose weight for negative `(i, j)` is `weight(s_ij)`; `slope`, if given, is its
/// derivative and makes the weights part of the gradient.
pub fn reweight_plan(
    size: usize,
    scores: &[f64],
    weight: impl Fn(f64) -> f64,
    slope: Option<&dyn Fn(f64) -> f64>,
) -> NegativePlan {
    let mut weights = vec![0.0; size * size];
    let mut slopes = slope.map(|_| vec![0.0; size * size]);
    for i in 0..size {
        for j in 0..size {
            if i == j {
                continue;
            }
            let s = scores[i * size + j];
            weights[i * size + j] = weight(s);
            if let (Some(out), Some(f)) = (slopes.as_mut(), slope) {
                out[i * size + j] = f(s);
            }
        }
    }
    NegativePlan {
        size,
        weights,
        slopes,
    }
}

pub fn loss_selfadv_reweight(
    batch: &BatchEmbeddings,
    activation: Activation,
    lambda_neg: f64,
    detach_weights: bool,
) -> Result<LossOutput> {
    batch.check()?;
    let mode = ExecMode::default();
    let scores = batch.scores(mode);
    let slope = move |s: f64| activation.derivative(s);
    let plan = reweight_plan(
        batch.size,
        &scores,
        |s| activation.apply(s),
        (!detach_weights).then_some(&slope as &dyn Fn(f64) -> f64),
    );
    Ok(loss_with_plan(batch, &scores, &plan, lambda_neg, mode))
}

/// Re-weighting with an arbitrary detached weight function.
pub fn loss_reweighted_with(
    batch: &BatchEmbeddings,
    weight: impl Fn(f64) -> f64,
    lambda_neg: f64,
) -> Result<LossOutput> {
    batch.check()?;
    let mode = ExecMode::default();
    let scores = batch.scores(mode);
    let plan = reweight_plan(batch.size, &scores, weight, None);
    Ok(loss_with_plan(batch, &scores, &plan, lambda_neg, mode))
}

/// Inclusion probability of every product `j` as a negative for query `i`:
/// `min(1, softmax_j(w_ij / T) * T^2)` over `j != i`, and 0 for `j == i`.
/// `weights_row` holds the activated scores `w_ij` for all `j`.
pub fn inclusion_probabilities(
    weights_row: &[f64],
    i: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let max = weights_row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, w)| w / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights_row
        .iter()
        .enumerate()
        .map(|(j, w)| {
            if j == i {
                0.0
            } else {
                (w / temperature - max).exp()
            }
        })
        .collect();
    let z: f64 = exps.iter().sum();
    let t2 = temperature * temperature;
    Ok(exps
        .into_iter()
        .enumerate()
        .map(|(j, e)| if j == i { 0.0 } else { (e / z * t2).min(1.0) })
        .collect())
}

/// Independent Bernoulli draws at the inclusion probabilities; with a cap, only the `k`
/// most probable drawn candidates (ties by index) are kept.
pub fn self_adv_sampling_plan<R: Rng + ?Sized>(
    size: usize,
    scores: &[f64],
    cap: Option<usize>,
    temperature: f64,
    activation: Activation,
    rng: &mut R,
) -> Result<NegativePlan> {
    let mut weights = vec![0.0; size * size];
    for i in 0..size {
        let row: Vec<f64> = scores[i * size..(i + 1) * size]
            .iter()
            .map(|s| activation.apply(*s))
            .collect();
        let probs = inclusion_probabilities(&row, i, temperature)?;
        let mut drawn: Vec<usize> = Vec::new();
        for (j, &p) in probs.iter().enumerate() {
            if j == i {
                continue;
            }
            let u: f64 = rng.gen();
            if u < p {
                drawn.push(j);
            }
        }
        if let Some(k) = cap {
            if drawn.len() > k {
                drawn.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
                drawn.truncate(k);
            }
        }
        for j in drawn {
            weights[i * size + j] = 1.0;
        }
    }
    Ok(NegativePlan {
        size,
        weights,
        slopes: None,
    })
}

pub fn loss_selfadv_sampling<R: Rng + ?Sized>(
    batch: &BatchEmbeddings,
    cap: Option<usize>,
    temperature: f64,
    activation: Activation,
    lambda_neg: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    batch.check()?;
    let mode = ExecMode::default();
    let scores = batch.scores(mode);
    let plan = self_adv_sampling_plan(batch.size, &scores, cap, temperature, activation, rng)?;
    Ok(loss_with_plan(batch, &scores, &plan, lambda_neg, mode))
}

impl LossConfig {
    /// Builds the negative plan this configuration prescribes for a batch.
    pub fn plan<R: Rng + ?Sized>(
        &self,
        scores: &[f64],
        size: usize,
        rng: &mut R,
    ) -> Result<NegativePlan> {
        self.validate(size)?;
        match self.strategy {
            Strategy::AllInBatch => Ok(NegativePlan::all(size)),
            Strategy::RandomK => random_k_plan(size, self.k.unwrap_or(size - 1), rng),
            Strategy::SelfAdvReweight => {
                let act = self.activation;
                let slope = move |s: f64| act.derivative(s);
                Ok(reweight_plan(
                    size,
                    scores,
                    |s| act.apply(s),
                    (!self.detach_weights).then_some(&slope as &dyn Fn(f64) -> f64),
                ))
            }
            Strategy::SelfAdvSampling => {
                self_adv_sampling_plan(size, scores, self.k, self.temperature, self.activation, rng)
            }
        }
    }

    pub fn compute<R: Rng + ?Sized>(
        &self,
        batch: &BatchEmbeddings,
        rng: &mut R,
        mode: ExecMode,
    ) -> Result<LossOutput> {
        batch.check()?;
        let scores = batch.scores(mode);
        let plan = self.plan(&scores, batch.size, rng)?;
        Ok(loss_with_plan(batch, &scores, &plan, self.lambda_neg, mode))
    }
}
