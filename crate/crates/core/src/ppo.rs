//! PPO training against a reward model: rollouts, generalised advantage
//! estimation, clipped policy and value objectives, KL monitoring and the
//! KL-threshold interruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{segment_response, Axis, TaskInstance, TaskSpec, Token};
use crate::error::{ensure_same_len, Error, Result};
use crate::eval::{evaluate_policy, EvalPoint};
use crate::hashing::hash_words;
use crate::policy::{
    sample_token, snapshot_reference, softmax, FeatureMap, FrozenPolicy, PolicyParams,
    SamplerConfig, ValueParams,
};
use crate::reward_model::{RewardModel, RewardModelIdentity};
use crate::shaping::{assemble_rewards, kl_penalty, whiten, KlPenaltyConfig, ShapingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub kl_coefficient: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub policy_grad_coef: f64,
    pub value_coef: f64,
    pub clip_policy: f64,
    pub clip_value: f64,
    pub whiten_rewards: bool,
    pub epochs_per_rollout: usize,
    pub samples_per_input: usize,
    /// Prompts per rollout; a step consumes `inputs_per_step *
    /// samples_per_input` episodes.
    pub inputs_per_step: usize,
    pub total_episodes: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub kl_threshold: f64,
    pub clip_gradients: bool,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PpoConfig {
    /// Full-size run length and learning rate.
    pub fn paper() -> Self {
        Self {
            kl_coefficient: 0.3,
            lambda: 0.95,
            gamma: 1.0,
            policy_grad_coef: 1.0,
            value_coef: 1.0,
            clip_policy: 0.2,
            clip_value: 0.2,
            whiten_rewards: true,
            epochs_per_rollout: 4,
            samples_per_input: 4,
            inputs_per_step: 8,
            total_episodes: 80_000,
            learning_rate: 1e-5,
            warmup_steps: 100,
            kl_threshold: 20.0,
            clip_gradients: false,
            max_grad_norm: 0.5,
            seed: 42,
        }
    }

    /// Same objective constants; shorter run, smaller batch and a learning
    /// rate suited to a linear policy.
    pub fn desk() -> Self {
        Self {
            total_episodes: 64_000,
            learning_rate: 0.002,
            ..Self::paper()
        }
    }

    pub fn episodes_per_step(&self) -> u64 {
        (self.inputs_per_step * self.samples_per_input) as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_episodes / self.episodes_per_step().max(1)).max(1)
    }

    /// Linear warmup from `lr / warmup_steps` to `lr`, flat afterwards.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [("ppo.lambda", self.lambda), ("ppo.gamma", self.gamma)];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{key} must lie in [0, 1], got {v}")));
            }
        }
        let positive = [
            ("ppo.clip_policy", self.clip_policy),
            ("ppo.clip_value", self.clip_value),
            ("ppo.learning_rate", self.learning_rate),
            ("ppo.max_grad_norm", self.max_grad_norm),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{key} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("ppo.kl_coefficient", self.kl_coefficient),
            ("ppo.policy_grad_coef", self.policy_grad_coef),
            ("ppo.value_coef", self.value_coef),
            ("ppo.kl_threshold", self.kl_threshold),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{key} must be non-negative, got {v}")));
            }
        }
        let counts = [
            ("ppo.epochs_per_rollout", self.epochs_per_rollout),
            ("ppo.samples_per_input", self.samples_per_input),
            ("ppo.inputs_per_step", self.inputs_per_step),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{key} must be at least 1")));
            }
        }
        if self.total_episodes == 0 {
            return Err(Error::config("ppo.total_episodes must be at least 1"));
        }
        Ok(())
    }
}

/// `sum_i P(i) ln(P(i) / Q(i))` in nats, with `0 ln(0/q) = 0`.
///
/// Returns `f64::INFINITY` (and logs the offending index) when `P` puts mass
/// where `Q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len("kl divergence", p.len(), q.len())?;
    for (name, dist) in [("P", p), ("Q", q)] {
        if dist.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::usage(format!("{name} has a negative or NaN entry")));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("{name} sums to {total}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            log::warn!("kl divergence: P({i}) = {pi} but Q({i}) = 0; reporting infinity");
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: u64,
    pub tokens: Vec<Token>,
    #[serde(skip)]
    pub features: Vec<Vec<f64>>,
    pub logp_policy: Vec<f64>,
    pub logp_reference: Vec<f64>,
    /// Full next-token distribution KL(policy || reference) at each step.
    pub kl: Vec<f64>,
    pub values: Vec<f64>,
    /// Reward-model contribution only, before the KL penalty.
    pub score_rewards: Vec<f64>,
    /// Score plus KL penalty; whitened in place before advantage estimation.
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct RolloutContext<'a> {
    pub spec: &'a TaskSpec,
    pub fmap: &'a FeatureMap,
    pub policy: &'a PolicyParams,
    pub reference: &'a FrozenPolicy,
    pub value: &'a ValueParams,
    pub reward_model: &'a RewardModel,
    pub shaping: &'a ShapingConfig,
    pub kl: KlPenaltyConfig,
    pub sampler: &'a SamplerConfig,
    /// Axis the run is configured for; the reward model must match.
    pub axis: Axis,
}

/// `n_samples` sampled responses per input, with reference log-probs, full
/// KL, value predictions and shaped rewards filled in.
pub fn collect_rollouts<R: Rng + ?Sized>(
    ctx: &RolloutContext<'_>,
    inputs: &[&TaskInstance],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if n_samples == 0 {
        return Err(Error::usage("rollouts need at least one sample per input"));
    }
    if ctx.reward_model.axis() != ctx.axis {
        return Err(Error::config(format!(
            "reward model scores {} but the run is configured for {}",
            ctx.reward_model.axis(),
            ctx.axis
        )));
    }
    let mut out = Vec::with_capacity(inputs.len() * n_samples);
    for inst in inputs {
        for _ in 0..n_samples {
            out.push(rollout_one(ctx, inst, rng)?);
        }
    }
    Ok(out)
}

fn rollout_one<R: Rng + ?Sized>(
    ctx: &RolloutContext<'_>,
    inst: &TaskInstance,
    rng: &mut R,
) -> Result<Trajectory> {
    let len = ctx.spec.max_gen_len;
    let mut tokens = Vec::with_capacity(len);
    let mut features = Vec::with_capacity(len);
    let (mut logp_policy, mut logp_reference) = (Vec::with_capacity(len), Vec::with_capacity(len));
    let (mut kl, mut values) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for _ in 0..len {
        let x = ctx.fmap.featurize(inst, &tokens);
        let lp = ctx.policy.log_probs(&x)?;
        let lr = ctx.reference.log_probs(&x)?;
        let tok = sample_token(&lp, ctx.sampler, rng)?;
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let q: Vec<f64> = lr.iter().map(|v| v.exp()).collect();
        kl.push(kl_divergence(&p, &q)?);
        logp_policy.push(lp[tok as usize]);
        logp_reference.push(lr[tok as usize]);
        values.push(ctx.value.predict(&x)?);
        features.push(x);
        tokens.push(tok);
    }
    let segments = segment_response(&tokens, ctx.spec.segment_len)?;
    let feedback = ctx.reward_model.feedback(inst, &tokens, &segments);
    let score_rewards = assemble_rewards(&segments, &feedback, ctx.shaping)?;
    let penalty = kl_penalty(&logp_policy, &logp_reference, &ctx.kl)?;
    let rewards = score_rewards.iter().zip(&penalty).map(|(s, k)| s + k).collect();
    Ok(Trajectory {
        instance_id: inst.instance_id,
        tokens,
        features,
        logp_policy,
        logp_reference,
        kl,
        values,
        score_rewards,
        rewards,
        advantages: Vec::new(),
        returns: Vec::new(),
    })
}

/// GAE with a terminal bootstrap value of zero. Returns `(advantages,
/// returns)` where `returns = advantages + values`.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_same_len("gae inputs", rewards.len(), values.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Mean over tokens of `-min(r A, clip(r, 1-eps, 1+eps) A)` with
/// `r = exp(logp_new - logp_old)`.
pub fn policy_loss_clipped(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    ensure_same_len("policy loss", logp_new.len(), logp_old.len())?;
    ensure_same_len("policy loss", logp_new.len(), advantages.len())?;
    if logp_new.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .map(|((n, o), a)| policy_term(n - o, *a, eps).0)
        .sum();
    Ok(total / logp_new.len() as f64)
}

/// Per-token clipped loss and `d loss / d logp_new`.
fn policy_term(log_ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let ratio = log_ratio.exp();
    let unclipped = ratio * adv;
    let clipped = clip(ratio, 1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (-unclipped, -unclipped)
    } else {
        (-clipped, 0.0)
    }
}

/// `0.5 * mean(max((v - R)^2, (clip(v, v_old - eps, v_old + eps) - R)^2))`.
pub fn value_loss_clipped(v_new: &[f64], v_old: &[f64], returns: &[f64], eps: f64) -> Result<f64> {
    ensure_same_len("value loss", v_new.len(), v_old.len())?;
    ensure_same_len("value loss", v_new.len(), returns.len())?;
    if v_new.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = v_new
        .iter()
        .zip(v_old)
        .zip(returns)
        .map(|((v, o), r)| value_term(*v, *o, *r, eps).0)
        .sum();
    Ok(total / v_new.len() as f64)
}

/// Per-token clipped value loss and its derivative in `v_new`.
fn value_term(v: f64, v_old: f64, ret: f64, eps: f64) -> (f64, f64) {
    let plain = (v - ret).powi(2);
    let clipped = (clip(v, v_old - eps, v_old + eps) - ret).powi(2);
    if plain >= clipped {
        (0.5 * plain, v - ret)
    } else {
        (0.5 * clipped, 0.0)
    }
}

/// One sampled token with everything the update phase needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub features: Vec<f64>,
    pub token: Token,
    pub logp_old: f64,
    pub value_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Clipped policy loss of `params` on `samples` and its gradient with
/// respect to the policy weights.
pub fn policy_loss_and_grad(params: &PolicyParams, samples: &[TokenSample], eps: f64) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.weights().len()];
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let probs = softmax(&params.logits(&s.features)?);
        let logp_new = probs[s.token as usize].ln();
        let (l, dl_dlogp) = policy_term(logp_new - s.logp_old, s.advantage, eps);
        loss += l;
        if dl_dlogp != 0.0 {
            params.accumulate_with_probs(&probs, &s.features, s.token, dl_dlogp / n, &mut grad)?;
        }
    }
    Ok((loss / n, grad))
}

/// Clipped value loss and its gradient with respect to the value weights.
pub fn value_loss_and_grad(params: &ValueParams, samples: &[TokenSample], eps: f64) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.weights.len()];
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let v = params.predict(&s.features)?;
        let (l, dl_dv) = value_term(v, s.value_old, s.ret, eps);
        loss += l;
        for (g, x) in grad.iter_mut().zip(&s.features) {
            *g += dl_dv * x / n;
        }
    }
    Ok((loss / n, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((w, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Everything a single training run needs besides its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub ppo: PpoConfig,
    pub shaping: ShapingConfig,
    pub sampler: SamplerConfig,
    pub axis: Axis,
    pub eval_every: u64,
}

impl RunConfig {
    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        self.ppo.validate()?;
        self.shaping.validate()?;
        self.sampler.validate(spec.vocab_size)?;
        if self.eval_every == 0 {
            return Err(Error::config("sweep.eval_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean and population variance of per-response reward-model score.
    pub reward_mean: f64,
    pub reward_var: f64,
    /// Mean and population variance of per-token full-distribution KL.
    pub kl_mean: f64,
    pub kl_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub train_step: u64,
    pub mean_kl: f64,
    pub var_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interruption {
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Interrupted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub reward_model: RewardModelIdentity,
    pub status: RunStatus,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    /// Steps whose rollout was followed by a parameter update.
    pub update_steps: Vec<u64>,
    pub interruption: Option<Interruption>,
    pub diagnostic: Option<String>,
    pub final_policy: PolicyParams,
    pub final_value: ValueParams,
}

impl RunRecord {
    pub fn kl_records(&self) -> Vec<KlRecord> {
        self.metrics
            .iter()
            .map(|m| KlRecord {
                train_step: m.step,
                mean_kl: m.kl_mean,
                var_kl: m.kl_var,
            })
            .collect()
    }

    pub fn steps_completed(&self) -> u64 {
        self.update_steps.len() as u64
    }
}

/// The data and model shapes a run operates on.
pub struct RunEnv<'a> {
    pub spec: &'a TaskSpec,
    pub fmap: &'a FeatureMap,
    pub train: &'a [TaskInstance],
    pub valid: &'a [TaskInstance],
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Alternates rollout and update phases against `reward_model`, starting
/// from `init` (which also becomes the frozen reference).
///
/// Before every update phase the batch mean full KL is compared with
/// `kl_threshold`; reaching it ends the run as interrupted. Evaluation runs
/// at step 0, every `eval_every` updates and at the end.
pub fn train_run(
    config: &RunConfig,
    env: &RunEnv<'_>,
    init: &PolicyParams,
    reward_model: &RewardModel,
) -> Result<RunRecord> {
    config.validate(env.spec)?;
    if env.train.is_empty() {
        return Err(Error::usage("training needs a non-empty train split"));
    }
    let ppo = &config.ppo;
    let reference = snapshot_reference(init);
    let mut policy = init.clone();
    let mut value = ValueParams::zeros(env.fmap.feature_dim);
    let mut policy_opt = Adam::new(policy.weights().len());
    let mut value_opt = Adam::new(value.weights.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[0x5050_4f, ppo.seed]));
    let kl_cfg = KlPenaltyConfig {
        beta: ppo.kl_coefficient,
    };
    let total_steps = ppo.total_steps();

    let mut record = RunRecord {
        config: config.clone(),
        reward_model: reward_model.identity(),
        status: RunStatus::Completed,
        metrics: Vec::new(),
        evals: Vec::new(),
        update_steps: Vec::new(),
        interruption: None,
        diagnostic: None,
        final_policy: policy.clone(),
        final_value: value.clone(),
    };
    let evaluate = |p: &PolicyParams, step: u64| -> Result<EvalPoint> {
        Ok(EvalPoint {
            step,
            perf: evaluate_policy(p, env.fmap, env.spec.segment_len, env.valid)?,
        })
    };

    let mut step = 0u64;
    while step < total_steps {
        if step % config.eval_every == 0 {
            record.evals.push(evaluate(&policy, step)?);
        }
        let inputs: Vec<&TaskInstance> = (0..ppo.inputs_per_step)
            .map(|_| &env.train[rng.gen_range(0..env.train.len())])
            .collect();
        let ctx = RolloutContext {
            spec: env.spec,
            fmap: env.fmap,
            policy: &policy,
            reference: &reference,
            value: &value,
            reward_model,
            shaping: &config.shaping,
            kl: kl_cfg,
            sampler: &config.sampler,
            axis: config.axis,
        };
        let mut batch = collect_rollouts(&ctx, &inputs, ppo.samples_per_input, &mut rng)?;

        let (reward_mean, reward_var) = mean_var(batch.iter().map(|t| t.score_rewards.iter().sum::<f64>()));
        let (kl_mean, kl_var) = mean_var(batch.iter().flat_map(|t| t.kl.iter().copied()));
        record.metrics.push(StepMetrics {
            step,
            reward_mean,
            reward_var,
            kl_mean,
            kl_var,
        });
        if kl_mean >= ppo.kl_threshold {
            record.status = RunStatus::Interrupted;
            record.interruption = Some(Interruption {
                step,
                reason: format!(
                    "batch mean KL {kl_mean:.6} reached the threshold {}",
                    ppo.kl_threshold
                ),
            });
            break;
        }

        if ppo.whiten_rewards {
            let flat: Vec<f64> = batch.iter().flat_map(|t| t.rewards.iter().copied()).collect();
            let white = whiten(&flat);
            let mut offset = 0;
            for t in &mut batch {
                let n = t.rewards.len();
                t.rewards.copy_from_slice(&white[offset..offset + n]);
                offset += n;
            }
        }
        let mut samples = Vec::with_capacity(batch.iter().map(Trajectory::len).sum());
        for t in &mut batch {
            let (adv, ret) = compute_gae(&t.rewards, &t.values, ppo.gamma, ppo.lambda)?;
            for i in 0..t.len() {
                samples.push(TokenSample {
                    features: std::mem::take(&mut t.features[i]),
                    token: t.tokens[i],
                    logp_old: t.logp_policy[i],
                    value_old: t.values[i],
                    advantage: adv[i],
                    ret: ret[i],
                });
            }
            t.advantages = adv;
            t.returns = ret;
        }

        let lr = ppo.learning_rate_at(step);
        for _ in 0..ppo.epochs_per_rollout {
            let (pl, mut pg) = policy_loss_and_grad(&policy, &samples, ppo.clip_policy)?;
            let (vl, mut vg) = value_loss_and_grad(&value, &samples, ppo.clip_value)?;
            let loss = ppo.policy_grad_coef * pl + ppo.value_coef * vl;
            if !loss.is_finite() || pg.iter().chain(&vg).any(|g| !g.is_finite()) {
                record.status = RunStatus::Failed;
                record.diagnostic = Some(format!("non-finite loss {loss} at step {step}"));
                record.final_policy = policy;
                record.final_value = value;
                return Ok(record);
            }
            pg.iter_mut().for_each(|g| *g *= ppo.policy_grad_coef);
            vg.iter_mut().for_each(|g| *g *= ppo.value_coef);
            if ppo.clip_gradients {
                let norm = pg.iter().chain(&vg).map(|g| g * g).sum::<f64>().sqrt();
                if norm > ppo.max_grad_norm {
                    let s = ppo.max_grad_norm / norm;
                    pg.iter_mut().chain(vg.iter_mut()).for_each(|g| *g *= s);
                }
            }
            policy_opt.step(policy.weights_mut(), &pg, lr);
            value_opt.step(&mut value.weights, &vg, lr);
        }
        record.update_steps.push(step);
        step += 1;
    }

    if record.evals.last().map(|e| e.step) != Some(step) {
        record.evals.push(evaluate(&policy, step)?);
    }
    record.final_policy = policy;
    record.final_value = value;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Splits;
    use crate::reward_model::{make_noisy_oracle, NoisyOracleConfig};
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let ln2 = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-12);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - 0.143_841_036_225_890_3).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn gae_single_step() {
        let (a, r) = compute_gae(&[1.0], &[0.5], 1.0, 0.95).unwrap();
        assert_eq!(a, vec![0.5]);
        assert_eq!(r, vec![1.0]);
        assert!(compute_gae(&[1.0, 2.0], &[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.4, -0.3];
        let (a, _) = compute_gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let next = if t + 1 < 3 { v[t + 1] } else { 0.0 };
            assert!((a[t] - (r[t] + 0.9 * next - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_loss_examples() {
        let adv = [0.5, -1.0, 2.0];
        let lp = [-1.0, -2.0, -0.5];
        let l = policy_loss_clipped(&lp, &lp, &adv, 0.2).unwrap();
        assert!((l + (0.5 - 1.0 + 2.0) / 3.0).abs() < 1e-15);
        let up = policy_loss_clipped(&[1.5f64.ln()], &[0.0], &[1.0], 0.2).unwrap();
        assert!((up + 1.2).abs() < 1e-12);
        let down = policy_loss_clipped(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2).unwrap();
        assert!((down - 0.8).abs() < 1e-12);
        assert!(policy_loss_clipped(&[0.0], &[0.0, 1.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn value_loss_examples() {
        assert_eq!(value_loss_clipped(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 0.2).unwrap(), 0.0);
        assert!((value_loss_clipped(&[1.0], &[0.0], &[0.0], 0.2).unwrap() - 0.5).abs() < 1e-15);
        assert!(value_loss_clipped(&[1.0], &[0.0, 1.0], &[0.0], 0.2).is_err());
    }

    #[test]
    fn warmup_is_monotone_then_flat() {
        let cfg = PpoConfig::desk();
        let lrs: Vec<f64> = (0..250).map(|s| cfg.learning_rate_at(s)).collect();
        assert!(lrs[..100].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[99..].iter().all(|&l| l == cfg.learning_rate));
        let none = PpoConfig { warmup_steps: 0, ..cfg };
        assert_eq!(none.learning_rate_at(0), cfg.learning_rate);
    }

    #[test]
    fn config_ranges() {
        assert!(PpoConfig { lambda: 2.0, ..PpoConfig::desk() }.validate().is_err());
        assert!(PpoConfig { gamma: -0.1, ..PpoConfig::desk() }.validate().is_err());
        assert!(PpoConfig { clip_policy: 0.0, ..PpoConfig::desk() }.validate().is_err());
        assert!(PpoConfig { kl_threshold: 0.0, ..PpoConfig::desk() }.validate().is_ok());
        assert!(PpoConfig::paper().validate().is_ok());
    }

    fn tiny_env() -> (TaskSpec, Splits, FeatureMap) {
        let spec = TaskSpec {
            max_gen_len: 8,
            split_sizes: [16, 4, 4],
            ..TaskSpec::desk()
        };
        let splits = Splits::generate(&spec, 2).unwrap();
        let fmap = FeatureMap::new(&spec, 16).unwrap();
        (spec, splits, fmap)
    }

    #[test]
    fn rollout_shapes_and_identity_kl() {
        let (spec, splits, fmap) = tiny_env();
        let policy = PolicyParams::zeros(32, 16);
        let reference = snapshot_reference(&policy);
        let value = ValueParams::zeros(16);
        let rm = RewardModel::Oracle(
            make_noisy_oracle(NoisyOracleConfig { target_accuracy: 1.0, seed: 0 }, Axis::Relevance).unwrap(),
        );
        let shaping = ShapingConfig::default();
        let sampler = SamplerConfig::default();
        let ctx = RolloutContext {
            spec: &spec,
            fmap: &fmap,
            policy: &policy,
            reference: &reference,
            value: &value,
            reward_model: &rm,
            shaping: &shaping,
            kl: KlPenaltyConfig::default(),
            sampler: &sampler,
            axis: Axis::Relevance,
        };
        let inputs: Vec<&TaskInstance> = splits.train.iter().take(8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = collect_rollouts(&ctx, &inputs, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        for t in &batch {
            assert_eq!(t.len(), 8);
            assert!(t.kl.iter().all(|k| *k == 0.0));
            assert_eq!(t.logp_policy, t.logp_reference);
        }
        let again = collect_rollouts(&ctx, &inputs, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(batch.iter().zip(&again).all(|(a, b)| a.tokens == b.tokens));

        let wrong = RolloutContext { axis: Axis::Factuality, ..ctx };
        assert!(matches!(
            collect_rollouts(&wrong, &inputs, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_threshold_interrupts_at_step_zero() {
        let (spec, splits, fmap) = tiny_env();
        let rm = RewardModel::Oracle(
            make_noisy_oracle(NoisyOracleConfig { target_accuracy: 1.0, seed: 0 }, Axis::Relevance).unwrap(),
        );
        let cfg = RunConfig {
            ppo: PpoConfig {
                kl_threshold: 0.0,
                total_episodes: 64,
                ..PpoConfig::desk()
            },
            shaping: ShapingConfig::default(),
            sampler: SamplerConfig::default(),
            axis: Axis::Relevance,
            eval_every: 1,
        };
        let env = RunEnv {
            spec: &spec,
            fmap: &fmap,
            train: &splits.train,
            valid: &splits.valid,
        };
        let rec = train_run(&cfg, &env, &PolicyParams::zeros(32, 16), &rm).unwrap();
        assert_eq!(rec.status, RunStatus::Interrupted);
        assert_eq!(rec.interruption.as_ref().unwrap().step, 0);
        assert!(rec.update_steps.is_empty());
        assert_eq!(rec.final_policy, PolicyParams::zeros(32, 16));
        assert!(rec.evals.iter().all(|e| e.step == 0));
    }

    proptest! {
        #[test]
        fn gae_matches_double_loop(
            pairs in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..20),
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (a, ret) = compute_gae(&r, &v, gamma, lambda).unwrap();
            let n = r.len();
            for t in 0..n {
                let mut expect = 0.0;
                for l in 0..n - t {
                    let next = if t + l + 1 < n { v[t + l + 1] } else { 0.0 };
                    let delta = r[t + l] + gamma * next - v[t + l];
                    expect += (gamma * lambda).powi(l as i32) * delta;
                }
                prop_assert!((a[t] - expect).abs() < 1e-10);
                prop_assert!((ret[t] - (expect + v[t])).abs() < 1e-10);
            }
        }

        #[test]
        fn value_loss_permutation_invariant(
            triples in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..12),
            rot in 0usize..12,
        ) {
            let (v, o, r) = (
                triples.iter().map(|t| t.0).collect::<Vec<_>>(),
                triples.iter().map(|t| t.1).collect::<Vec<_>>(),
                triples.iter().map(|t| t.2).collect::<Vec<_>>(),
            );
            let k = rot % triples.len();
            let rotate = |x: &[f64]| { let mut y = x.to_vec(); y.rotate_left(k); y };
            let a = value_loss_clipped(&v, &o, &r, 0.2).unwrap();
            let b = value_loss_clipped(&rotate(&v), &rotate(&o), &rotate(&r), 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn kl_non_negative(raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..16)) {
            let sp: f64 = raw.iter().map(|x| x.0).sum();
            let sq: f64 = raw.iter().map(|x| x.1).sum();
            let p: Vec<f64> = raw.iter().map(|x| x.0 / sp).collect();
            let q: Vec<f64> = raw.iter().map(|x| x.1 / sq).collect();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }
}
