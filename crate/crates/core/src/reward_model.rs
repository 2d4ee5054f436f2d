//! Reward models: logistic classifiers trained with periodic checkpoints,
//! the proxy labeller that produces their training labels, and noisy gold
//! oracles with an exact accuracy knob.
//!
//! Proxy labels agree with gold except on a fixed pseudo-random slice of
//! item keys, where they are flipped. The key of a segment is its closing
//! token, so the disagreement is systematic: a classifier that fits its
//! proxy labels closely also learns to reward the flipped slice, and a
//! policy trained against it can exploit that.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{segment_response, Axis, Segment, Splits, TaskInstance, TaskSpec, Token};
use crate::error::{Error, Result};
use crate::hashing::{hash_words, mix64, unit_interval};
use crate::policy::{dot, gold_behavior_demo};
use crate::shaping::Feedback;

const PROXY_KEY_TAG: u64 = 0x5052_4f58_595f_4b45;
const ORACLE_KEY_TAG: u64 = 0x4f52_4143_4c45_4b59;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyLabelerConfig {
    disagreement_frac: f64,
    seed: u64,
}

impl ProxyLabelerConfig {
    pub fn new(disagreement_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&disagreement_frac) {
            return Err(Error::config(format!(
                "reward_model.proxy_disagreement must lie in [0, 1), got {disagreement_frac}"
            )));
        }
        Ok(Self {
            disagreement_frac,
            seed,
        })
    }

    pub fn disagreement_frac(&self) -> f64 {
        self.disagreement_frac
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flips(&self, item_hash: u64) -> bool {
        unit_interval(mix64(item_hash ^ mix64(self.seed))) < self.disagreement_frac
    }
}

pub fn proxy_label(gold_label: bool, item_hash: u64, cfg: &ProxyLabelerConfig) -> bool {
    gold_label ^ cfg.flips(item_hash)
}

/// Proxy key of a scored span: its axis and closing token.
pub fn proxy_item_key(axis: Axis, tokens: &[Token]) -> u64 {
    let last = tokens.last().map_or(u64::MAX, |&t| u64::from(t));
    hash_words(&[PROXY_KEY_TAG, axis as u64, last])
}

/// Gold binary label of a scored span. Completeness counts as satisfied at
/// half coverage or more.
pub fn gold_label(instance: &TaskInstance, tokens: &[Token], axis: Axis) -> bool {
    match axis {
        Axis::Relevance => instance.segment_relevant(tokens),
        Axis::Factuality => instance.segment_factual(tokens),
        Axis::Completeness => instance.coverage(tokens) >= 0.5,
    }
}

const HIDDEN: usize = 8;
const ID_SCALE: f64 = 0.5;

/// Reward-model input features.
///
/// Gold-set membership rates enter only through a fixed random projection
/// followed by `tanh`, so the classifier has to discover the decision rule.
/// A one-hot of the closing token and its product with the axis membership
/// rate let it model token-specific exceptions, which is how it fits the
/// proxy slice. The last slot is a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RmFeatureMap {
    vocab_size: usize,
    projection_seed: u64,
    projection: Vec<f64>,
    offsets: Vec<f64>,
}

impl RmFeatureMap {
    pub fn new(vocab_size: usize, projection_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[0x524d, projection_seed]));
        let projection = (0..HIDDEN * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let offsets = (0..HIDDEN).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self {
            vocab_size,
            projection_seed,
            projection,
            offsets,
        }
    }

    pub fn dim(&self) -> usize {
        HIDDEN + 2 * self.vocab_size + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    /// Slot of the closing-token indicator for `token`.
    pub fn token_slot(&self, token: Token) -> usize {
        HIDDEN + token as usize % self.vocab_size
    }

    pub fn bias_slot(&self) -> usize {
        self.dim() - 1
    }

    pub fn features(&self, instance: &TaskInstance, tokens: &[Token], axis: Axis) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let n = tokens.len().max(1) as f64;
        let count = |f: &dyn Fn(Token) -> bool| tokens.iter().filter(|&&t| f(t)).count() as f64 / n;
        let rates = [
            count(&|t| instance.is_relevant(t)),
            count(&|t| instance.is_forbidden(t)),
            count(&|t| instance.is_required(t)),
            if tokens.is_empty() { 0.0 } else { instance.coverage(tokens) },
        ];
        for k in 0..HIDDEN {
            let z: f64 = self.projection[k * 4..(k + 1) * 4]
                .iter()
                .zip(&rates)
                .map(|(a, r)| a * (r - 0.5))
                .sum();
            x[k] = (z + self.offsets[k]).tanh();
        }
        if let Some(&last) = tokens.last() {
            let signal = match axis {
                Axis::Relevance => rates[0],
                Axis::Factuality => rates[1],
                Axis::Completeness => rates[3],
            };
            let t = last as usize % self.vocab_size;
            x[HIDDEN + t] = ID_SCALE;
            x[HIDDEN + self.vocab_size + t] = ID_SCALE * signal;
        }
        let bias = self.dim() - 1;
        x[bias] = 1.0;
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmParams {
    pub weights: Vec<f64>,
}

impl RmParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub probability: f64,
    pub label: bool,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability exactly 0.5 is labelled `false`.
pub fn classify_features(params: &RmParams, features: &[f64]) -> Classification {
    let probability = logistic(dot(&params.weights, features));
    Classification {
        probability,
        label: probability > 0.5,
    }
}

pub fn classify(
    params: &RmParams,
    fmap: &RmFeatureMap,
    instance: &TaskInstance,
    tokens: &[Token],
    axis: Axis,
) -> Classification {
    classify_features(params, &fmap.features(instance, tokens, axis))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub instance_id: u64,
    pub tokens: Vec<Token>,
    pub key: u64,
    pub gold: bool,
    pub proxy: bool,
    pub features: Vec<f64>,
}

impl LabeledItem {
    pub fn new(
        instance: &TaskInstance,
        tokens: Vec<Token>,
        axis: Axis,
        fmap: &RmFeatureMap,
        proxy: &ProxyLabelerConfig,
    ) -> Self {
        let key = proxy_item_key(axis, &tokens);
        let gold = gold_label(instance, &tokens, axis);
        Self {
            instance_id: instance.instance_id,
            features: fmap.features(instance, &tokens, axis),
            proxy: proxy_label(gold, key, proxy),
            tokens,
            key,
            gold,
        }
    }

    pub fn label(&self, target: LabelTarget) -> bool {
        match target {
            LabelTarget::Proxy => self.proxy,
            LabelTarget::Gold => self.gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelTarget {
    Proxy,
    Gold,
}

/// Fraction of items whose predicted label matches the chosen target.
pub fn measure_accuracy(params: &RmParams, items: &[LabeledItem], target: LabelTarget) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::usage("accuracy needs a non-empty test set"));
    }
    let correct = items
        .iter()
        .filter(|it| classify_features(params, &it.features).label == it.label(target))
        .count();
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmDataset {
    pub axis: Axis,
    pub train: Vec<LabeledItem>,
    pub test: Vec<LabeledItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub responses_per_instance: usize,
    pub seed: u64,
}

/// Draws responses from a mix of behaviours (uniform noise, relevance
/// focused, repeated tokens, forbidden heavy) and labels every scored span.
pub fn sample_responses<R: Rng + ?Sized>(
    instance: &TaskInstance,
    spec: &TaskSpec,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<Token>> {
    let vocab = spec.vocab_size as Token;
    (0..count)
        .map(|i| match i % 4 {
            0 => (0..spec.max_gen_len).map(|_| rng.gen_range(0..vocab)).collect(),
            1 => gold_behavior_demo(instance, spec, 0.7, rng),
            2 => {
                let mut out = Vec::with_capacity(spec.max_gen_len);
                while out.len() < spec.max_gen_len {
                    let t = rng.gen_range(0..vocab);
                    let run = spec.segment_len.min(spec.max_gen_len - out.len());
                    out.extend(std::iter::repeat(t).take(run));
                }
                out
            }
            _ => (0..spec.max_gen_len)
                .map(|_| {
                    let pool = if rng.gen_bool(0.5) || instance.relevant_set.is_empty() {
                        &instance.forbidden_set
                    } else {
                        &instance.relevant_set
                    };
                    if pool.is_empty() {
                        rng.gen_range(0..vocab)
                    } else {
                        *pool.choose(rng).expect("non-empty pool")
                    }
                })
                .collect(),
        })
        .collect()
}

fn items_for(
    instances: &[TaskInstance],
    spec: &TaskSpec,
    axis: Axis,
    fmap: &RmFeatureMap,
    proxy: &ProxyLabelerConfig,
    cfg: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledItem>> {
    let mut items = Vec::new();
    for inst in instances {
        for resp in sample_responses(inst, spec, cfg.responses_per_instance, rng) {
            if axis.is_segment_level() {
                for seg in segment_response(&resp, spec.segment_len)? {
                    items.push(LabeledItem::new(inst, seg.tokens, axis, fmap, proxy));
                }
            } else {
                items.push(LabeledItem::new(inst, resp, axis, fmap, proxy));
            }
        }
    }
    Ok(items)
}

/// Labelled training items from the train split and evaluation items from
/// the test split.
pub fn build_dataset(
    splits: &Splits,
    spec: &TaskSpec,
    axis: Axis,
    fmap: &RmFeatureMap,
    proxy: &ProxyLabelerConfig,
    cfg: &DatasetConfig,
) -> Result<RmDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = items_for(&splits.train, spec, axis, fmap, proxy, cfg, &mut rng)?;
    let test = items_for(&splits.test, spec, axis, fmap, proxy, cfg, &mut rng)?;
    Ok(RmDataset { axis, train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelCheckpoint {
    pub step: u64,
    pub params: RmParams,
    pub accuracy_proxy: f64,
    pub accuracy_gold: f64,
    pub task_axis: Axis,
    pub vocab_size: usize,
    pub projection_seed: u64,
}

impl RewardModelCheckpoint {
    pub fn feature_map(&self) -> RmFeatureMap {
        RmFeatureMap::new(self.vocab_size, self.projection_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub learning_rate: f64,
    pub total_steps: u64,
    pub checkpoint_stride: u64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Minibatch logistic-regression training on proxy labels. A checkpoint is
/// taken every `checkpoint_stride` steps and after the final step; each one
/// carries its proxy and gold accuracy on the test items.
pub fn train_with_checkpoints(
    dataset: &RmDataset,
    fmap: &RmFeatureMap,
    config: &RmTrainConfig,
) -> Result<Vec<RewardModelCheckpoint>> {
    if dataset.train.is_empty() {
        return Err(Error::usage("reward-model training needs a non-empty dataset"));
    }
    if dataset.test.is_empty() {
        return Err(Error::usage("reward-model accuracy needs a non-empty test split"));
    }
    if config.checkpoint_stride == 0 {
        return Err(Error::config("reward_model.checkpoint_stride must be at least 1"));
    }
    let dim = fmap.dim();
    let mut params = RmParams::zeros(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.max(1);
    let mut grad = vec![0.0; dim];
    let mut family = Vec::new();
    for step in 1..=config.total_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch {
            let item = &dataset.train[rng.gen_range(0..dataset.train.len())];
            let p = logistic(dot(&params.weights, &item.features));
            let err = p - f64::from(u8::from(item.proxy));
            for (g, x) in grad.iter_mut().zip(&item.features) {
                *g += err * x;
            }
        }
        let scale = config.learning_rate / batch as f64;
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= scale * g;
        }
        if step % config.checkpoint_stride == 0 || step == config.total_steps {
            if params.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Numeric(format!("reward-model weights diverged at step {step}")));
            }
            family.push(RewardModelCheckpoint {
                step,
                accuracy_proxy: measure_accuracy(&params, &dataset.test, LabelTarget::Proxy)?,
                accuracy_gold: measure_accuracy(&params, &dataset.test, LabelTarget::Gold)?,
                params: params.clone(),
                task_axis: dataset.axis,
                vocab_size: fmap.vocab_size(),
                projection_seed: fmap.projection_seed(),
            });
        }
    }
    Ok(family)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub step: u64,
    pub accuracy_proxy: f64,
    pub accuracy_gold: f64,
}

pub fn family_summary(family: &[RewardModelCheckpoint]) -> Vec<FamilyRow> {
    let mut rows: Vec<FamilyRow> = family
        .iter()
        .map(|c| FamilyRow {
            step: c.step,
            accuracy_proxy: c.accuracy_proxy,
            accuracy_gold: c.accuracy_gold,
        })
        .collect();
    rows.sort_by_key(|r| r.step);
    rows
}

pub const FAMILY_SUMMARY_FILE: &str = "family_summary.csv";

fn checkpoint_file(step: u64) -> String {
    format!("checkpoint_{step:08}.json")
}

/// Writes one JSON file per checkpoint plus `family_summary.csv`.
pub fn save_family(dir: &Path, family: &[RewardModelCheckpoint]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ckpt in family {
        let path = dir.join(checkpoint_file(ckpt.step));
        let json = serde_json::to_vec_pretty(ckpt)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(FAMILY_SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for row in family_summary(family) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_family(dir: &Path) -> Result<Vec<RewardModelCheckpoint>> {
    let summary = read_family_summary(&dir.join(FAMILY_SUMMARY_FILE))?;
    summary
        .iter()
        .map(|row| {
            let path = dir.join(checkpoint_file(row.step));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect()
}

pub fn read_family_summary(path: &Path) -> Result<Vec<FamilyRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<FamilyRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyOracleConfig {
    pub target_accuracy: f64,
    pub seed: u64,
}

/// Gold scorer that agrees with the gold label on each distinct item with
/// probability `target_accuracy`, deterministically per item and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracle {
    pub axis: Axis,
    pub config: NoisyOracleConfig,
}

impl NoisyOracle {
    pub fn agrees(&self, item_hash: u64) -> bool {
        unit_interval(mix64(item_hash ^ mix64(self.config.seed))) < self.config.target_accuracy
    }

    pub fn item_hash(instance: &TaskInstance, start: usize, tokens: &[Token]) -> u64 {
        let mut words = Vec::with_capacity(tokens.len() + 3);
        words.extend([ORACLE_KEY_TAG, instance.instance_id, start as u64]);
        words.extend(tokens.iter().map(|&t| u64::from(t)));
        hash_words(&words)
    }

    pub fn label(&self, instance: &TaskInstance, start: usize, tokens: &[Token]) -> bool {
        let gold = gold_label(instance, tokens, self.axis);
        if self.agrees(Self::item_hash(instance, start, tokens)) {
            gold
        } else {
            !gold
        }
    }
}

pub fn make_noisy_oracle(cfg: NoisyOracleConfig, axis: Axis) -> Result<NoisyOracle> {
    if !(0.0..=1.0).contains(&cfg.target_accuracy) {
        return Err(Error::config(format!(
            "reward_model.oracle.target_accuracy must lie in [0, 1], got {}",
            cfg.target_accuracy
        )));
    }
    Ok(NoisyOracle { axis, config: cfg })
}

/// Which reward model drove a run, as recorded next to its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardModelIdentity {
    pub kind: String,
    pub axis: Axis,
    pub step: u64,
    pub accuracy_proxy: f64,
    pub accuracy_gold: f64,
}

/// A reward model usable during policy training.
#[derive(Debug, Clone)]
pub enum RewardModel {
    Learned {
        checkpoint: RewardModelCheckpoint,
        fmap: RmFeatureMap,
    },
    Oracle(NoisyOracle),
}

impl RewardModel {
    pub fn learned(checkpoint: RewardModelCheckpoint) -> Self {
        let fmap = checkpoint.feature_map();
        RewardModel::Learned { checkpoint, fmap }
    }

    pub fn axis(&self) -> Axis {
        match self {
            RewardModel::Learned { checkpoint, .. } => checkpoint.task_axis,
            RewardModel::Oracle(o) => o.axis,
        }
    }

    pub fn identity(&self) -> RewardModelIdentity {
        match self {
            RewardModel::Learned { checkpoint, .. } => RewardModelIdentity {
                kind: "checkpoint".into(),
                axis: checkpoint.task_axis,
                step: checkpoint.step,
                accuracy_proxy: checkpoint.accuracy_proxy,
                accuracy_gold: checkpoint.accuracy_gold,
            },
            RewardModel::Oracle(o) => RewardModelIdentity {
                kind: "oracle".into(),
                axis: o.axis,
                step: 0,
                accuracy_proxy: o.config.target_accuracy,
                accuracy_gold: o.config.target_accuracy,
            },
        }
    }

    /// Judgements on this model's axis only; other axes stay `None`.
    pub fn feedback(&self, instance: &TaskInstance, response: &[Token], segments: &[Segment]) -> Feedback {
        let axis = self.axis();
        let mut fb = Feedback::default();
        match axis {
            Axis::Relevance | Axis::Factuality => {
                let labels = segments
                    .iter()
                    .map(|s| match self {
                        RewardModel::Learned { checkpoint, fmap } => {
                            classify(&checkpoint.params, fmap, instance, &s.tokens, axis).label
                        }
                        RewardModel::Oracle(o) => o.label(instance, s.start, &s.tokens),
                    })
                    .collect();
                if axis == Axis::Relevance {
                    fb.relevance = Some(labels);
                } else {
                    fb.factuality = Some(labels);
                }
            }
            Axis::Completeness => {
                let raw = match self {
                    RewardModel::Learned { checkpoint, fmap } => {
                        classify(&checkpoint.params, fmap, instance, response, axis).probability
                    }
                    RewardModel::Oracle(o) => {
                        let coverage = instance.coverage(response);
                        if o.agrees(NoisyOracle::item_hash(instance, 0, response)) {
                            coverage
                        } else {
                            1.0 - coverage
                        }
                    }
                };
                fb.completeness = Some(raw);
            }
        }
        fb
    }
}
