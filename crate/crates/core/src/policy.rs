//! Linear-softmax token policy, linear value model and supervised
//! pre-training.
//!
//! The policy scores every vocabulary token as a dot product between one
//! weight row and a hand-built state feature vector, so log-probabilities and
//! their gradients are available in closed form.

use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{TaskInstance, TaskSpec, Token};
use crate::error::{ensure_same_len, Error, Result};
use crate::hashing::hash_words;

/// Fixed slots at the front of every policy feature vector.
pub mod slot {
    pub const BIAS: usize = 0;
    pub const RELEVANT: usize = 1;
    pub const FORBIDDEN: usize = 2;
    pub const REQUIRED: usize = 3;
    pub const POSITION: usize = 4;
    pub const FIXED: usize = 5;
}

/// Named policy capacities.
pub const FEATURE_DIM_SMALL: usize = 16;
pub const FEATURE_DIM_BASE: usize = 64;
pub const FEATURE_DIM_LARGE: usize = 256;

/// Deterministic map from (prompt, generated prefix) to a feature vector.
///
/// Layout: bias, relevant and forbidden emission counts divided by
/// `max_gen_len`, required-set coverage, position, a one-hot of the last
/// token folded into `last_buckets` slots, and the prompt token histogram
/// folded into `prompt_buckets` slots. Slots beyond those stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub max_gen_len: usize,
    pub last_buckets: usize,
    pub prompt_buckets: usize,
}

impl FeatureMap {
    pub fn new(spec: &TaskSpec, feature_dim: usize) -> Result<Self> {
        if feature_dim < slot::FIXED + 2 {
            return Err(Error::config(format!(
                "policy.feature_dim must be at least {}, got {feature_dim}",
                slot::FIXED + 2
            )));
        }
        let free = feature_dim - slot::FIXED;
        let last_buckets = (free / 2).min(spec.vocab_size);
        let prompt_buckets = (free - last_buckets).min(spec.vocab_size);
        Ok(Self {
            feature_dim,
            vocab_size: spec.vocab_size,
            max_gen_len: spec.max_gen_len,
            last_buckets,
            prompt_buckets,
        })
    }

    fn last_offset(&self) -> usize {
        slot::FIXED
    }

    fn prompt_offset(&self) -> usize {
        slot::FIXED + self.last_buckets
    }

    pub fn featurize(&self, instance: &TaskInstance, generated: &[Token]) -> Vec<f64> {
        let mut x = vec![0.0; self.feature_dim];
        self.prompt_part(instance, &mut x);
        self.state_part(instance, generated, &mut x);
        x
    }

    /// Features for every prefix `generated[..t]`, `t = 0..len`, sharing the
    /// prompt histogram and the running counts.
    pub fn featurize_prefixes(&self, instance: &TaskInstance, generated: &[Token]) -> Vec<Vec<f64>> {
        let mut base = vec![0.0; self.feature_dim];
        self.prompt_part(instance, &mut base);
        (0..generated.len())
            .map(|t| {
                let mut x = base.clone();
                self.state_part(instance, &generated[..t], &mut x);
                x
            })
            .collect()
    }

    fn prompt_part(&self, instance: &TaskInstance, x: &mut [f64]) {
        let n = instance.prompt_tokens.len().max(1) as f64;
        let off = self.prompt_offset();
        if self.prompt_buckets >= self.vocab_size {
            for &t in &instance.prompt_tokens {
                x[off + t as usize] += 1.0 / n;
            }
            return;
        }
        let norm = (self.prompt_buckets as f64).sqrt();
        for &t in &instance.prompt_tokens {
            for j in 0..self.prompt_buckets {
                x[off + j] += prompt_code(t, j) / (n * norm);
            }
        }
    }

    fn state_part(&self, instance: &TaskInstance, generated: &[Token], x: &mut [f64]) {
        let scale = self.max_gen_len.max(1) as f64;
        let relevant = generated.iter().filter(|&&t| instance.is_relevant(t)).count();
        let forbidden = generated.iter().filter(|&&t| instance.is_forbidden(t)).count();
        x[slot::BIAS] = 1.0;
        x[slot::RELEVANT] = relevant as f64 / scale;
        x[slot::FORBIDDEN] = forbidden as f64 / scale;
        x[slot::REQUIRED] = if instance.required_set.is_empty() || generated.is_empty() {
            0.0
        } else {
            instance.coverage(generated)
        };
        x[slot::POSITION] = generated.len() as f64 / scale;
        if let Some(&last) = generated.last() {
            x[self.last_offset() + last as usize % self.last_buckets] = 1.0;
        }
    }
}

/// Deterministic ±1 code of token `t` in prompt slot `j`.
fn prompt_code(t: Token, j: usize) -> f64 {
    if hash_words(&[0x7072_6f6d_7074, u64::from(t), j as u64]) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Row-major `vocab_size x feature_dim` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixFile", into = "MatrixFile")]
pub struct PolicyParams {
    vocab_size: usize,
    feature_dim: usize,
    weights: Vec<f64>,
}

/// On-disk checkpoint layout: a shape header and the row-major entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TryFrom<MatrixFile> for PolicyParams {
    type Error = String;

    fn try_from(m: MatrixFile) -> std::result::Result<Self, String> {
        let [rows, cols] = m.shape;
        if rows * cols != m.data.len() {
            return Err(format!(
                "shape {rows}x{cols} does not match {} entries",
                m.data.len()
            ));
        }
        if m.data.iter().any(|w| !w.is_finite()) {
            return Err("non-finite policy weight".into());
        }
        Ok(Self {
            vocab_size: rows,
            feature_dim: cols,
            weights: m.data,
        })
    }
}

impl From<PolicyParams> for MatrixFile {
    fn from(p: PolicyParams) -> Self {
        MatrixFile {
            shape: [p.vocab_size, p.feature_dim],
            data: p.weights,
        }
    }
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            feature_dim,
            weights: vec![0.0; vocab_size * feature_dim],
        }
    }

    pub fn from_weights(vocab_size: usize, feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        MatrixFile {
            shape: [vocab_size, feature_dim],
            data: weights,
        }
        .try_into()
        .map_err(Error::usage)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.weights[token * self.feature_dim..(token + 1) * self.feature_dim]
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        ensure_same_len("policy features", features.len(), self.feature_dim)?;
        Ok(self
            .weights
            .chunks_exact(self.feature_dim)
            .map(|row| dot(row, features))
            .collect())
    }

    pub fn log_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(features)?))
    }

    /// Gradient of `log pi(token | features)` with respect to the weights:
    /// `(onehot(token) - softmax(logits)) ⊗ features`.
    pub fn grad_log_prob(&self, features: &[f64], token: Token) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.weights.len()];
        self.accumulate_grad_log_prob(features, token, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `grad += scale * d log pi(token | features) / dW`.
    pub fn accumulate_grad_log_prob(
        &self,
        features: &[f64],
        token: Token,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let probs = softmax(&self.logits(features)?);
        self.accumulate_with_probs(&probs, features, token, scale, grad)
    }

    pub(crate) fn accumulate_with_probs(
        &self,
        probs: &[f64],
        features: &[f64],
        token: Token,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let token = token as usize;
        if token >= self.vocab_size {
            return Err(Error::usage(format!(
                "token {token} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        ensure_same_len("gradient buffer", grad.len(), self.weights.len())?;
        for (v, (row, &p)) in grad.chunks_exact_mut(self.feature_dim).zip(probs).enumerate() {
            let coef = scale * (f64::from(u8::from(v == token)) - p);
            if coef != 0.0 {
                for (g, &x) in row.iter_mut().zip(features) {
                    *g += coef * x;
                }
            }
        }
        Ok(())
    }
}

/// Frozen copy of a policy. There is no way to mutate the weights through
/// it, and later updates to the source never reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy(Arc<PolicyParams>);

impl FrozenPolicy {
    pub fn snapshot(&self) -> FrozenPolicy {
        self.clone()
    }

    pub fn to_params(&self) -> PolicyParams {
        (*self.0).clone()
    }
}

impl Deref for FrozenPolicy {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot_reference(params: &PolicyParams) -> FrozenPolicy {
    FrozenPolicy(Arc::new(params.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub weights: Vec<f64>,
}

impl ValueParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim],
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        ensure_same_len("value features", features.len(), self.weights.len())?;
        Ok(dot(&self.weights, features))
    }
}

pub fn value_predict(params: &ValueParams, features: &[f64]) -> Result<f64> {
    params.predict(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_k: 20,
            temperature: 0.7,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::config(format!(
                "sampler.top_k must lie in [1, {vocab_size}], got {}",
                self.top_k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sampler.temperature must be positive"));
        }
        Ok(())
    }
}

/// Draws from the temperature-rescaled distribution restricted to the
/// `top_k` most likely tokens. Ties in likelihood go to the lower token id.
pub fn sample_token<R: Rng + ?Sized>(
    log_probs: &[f64],
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Token> {
    sampler.validate(log_probs.len())?;
    let top = top_k_indices(log_probs, sampler.top_k);
    let best = log_probs[top[0]];
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| ((log_probs[i] - best) / sampler.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return Ok(i as Token);
        }
        u -= w;
    }
    Ok(*top.last().expect("top_k >= 1") as Token)
}

pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Highest-scoring token, lowest id on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A response drawn from the demonstration behaviour: each token comes from
/// the relevant set with probability `focus`, otherwise uniformly from the
/// vocabulary.
pub fn gold_behavior_demo<R: Rng + ?Sized>(
    instance: &TaskInstance,
    spec: &TaskSpec,
    focus: f64,
    rng: &mut R,
) -> Vec<Token> {
    (0..spec.max_gen_len)
        .map(|_| {
            if !instance.relevant_set.is_empty() && rng.gen::<f64>() < focus {
                instance.relevant_set[rng.gen_range(0..instance.relevant_set.len())]
            } else {
                rng.gen_range(0..spec.vocab_size as Token)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

struct DemoTokens {
    features: Vec<Vec<f64>>,
    tokens: Vec<Token>,
}

fn prepare_demos(fmap: &FeatureMap, demos: &[(TaskInstance, Vec<Token>)]) -> Vec<DemoTokens> {
    demos
        .iter()
        .map(|(inst, resp)| DemoTokens {
            features: fmap.featurize_prefixes(inst, resp),
            tokens: resp.clone(),
        })
        .collect()
}

fn demo_nll(params: &PolicyParams, demos: &[DemoTokens]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in demos {
        for (x, &t) in d.features.iter().zip(&d.tokens) {
            total -= params.log_probs(x)?[t as usize];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean per-token negative log-likelihood of the demonstrations.
pub fn mean_nll(
    params: &PolicyParams,
    fmap: &FeatureMap,
    demos: &[(TaskInstance, Vec<Token>)],
) -> Result<f64> {
    demo_nll(params, &prepare_demos(fmap, demos))
}

/// Maximises demonstration log-likelihood with minibatch gradient ascent,
/// starting from the uniform policy.
pub fn sft_train(
    fmap: &FeatureMap,
    demos: &[(TaskInstance, Vec<Token>)],
    config: &SftConfig,
) -> Result<PolicyParams> {
    if demos.is_empty() {
        return Err(Error::usage("supervised fine-tuning needs at least one demonstration"));
    }
    let prepared = prepare_demos(fmap, demos);
    let mut params = PolicyParams::zeros(fmap.vocab_size, fmap.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.clamp(1, prepared.len());
    let mut grad = vec![0.0; params.weights.len()];
    for _ in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut count = 0usize;
        for _ in 0..batch {
            let d = &prepared[rng.gen_range(0..prepared.len())];
            for (x, &t) in d.features.iter().zip(&d.tokens) {
                params.accumulate_grad_log_prob(x, t, 1.0, &mut grad)?;
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let step = config.learning_rate / count as f64;
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w += step * g;
        }
    }
    if params.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("supervised fine-tuning diverged".into()));
    }
    Ok(params)
}
