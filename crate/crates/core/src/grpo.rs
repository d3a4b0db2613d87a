//! Group Relative Policy Optimization.
//!
//! For a group of `G` responses to one task with rewards `r_i`:
//!
//! ```text
//! A_i   = (r_i - mean(r)) / std(r)                     population std
//! rho   = pi(o_t) / pi_old(o_t)                        per token
//! KL_t  = x - ln x - 1,  x = pi(o_t) / pi_ref(o_t)
//! J     = 1/G sum_i 1/|o_i| sum_t [ min(rho A_i, clip(rho, 1-eps, 1+eps) A_i) - beta KL_t ]
//! ```
//!
//! The gradient is analytic for the linear toy policy: only the current
//! log-probabilities depend on the parameters, the clip/min pair acts as a
//! piecewise-constant selector and ties take the unclipped branch.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardConfig;
use crate::rng;
use crate::toyenv::{
    logprob_grads_from_features, logprobs_from_features, rollout, task_features, SyntheticSpec, ToyPolicyParams,
    ToyTask,
};

/// Which probability ratio feeds the `x - ln x - 1` estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `x = pi / pi_ref`.
    #[default]
    PolicyOverRef,
    /// `x = pi_ref / pi`.
    RefOverPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub seed: u64,
    /// Tasks per iteration.
    pub batch_size: usize,
    /// Gradient steps per iteration against the same rollouts.
    pub inner_steps: usize,
    /// Rescale the update when the gradient norm exceeds this.
    pub max_grad_norm: Option<f64>,
    pub kl_direction: KlDirection,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            temperature: 1.0,
            learning_rate: 0.05,
            std_floor: 0.0,
            seed: 7,
            batch_size: 8,
            inner_steps: 1,
            max_grad_norm: Some(1.0),
            kl_direction: KlDirection::PolicyOverRef,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.group_size < 2 {
            return bad(format!("group size must be >= 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return bad(format!("clip epsilon must be > 0, got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("KL beta must be >= 0, got {}", self.kl_beta));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.std_floor >= 0.0 && self.std_floor.is_finite()) {
            return bad(format!("std floor must be >= 0, got {}", self.std_floor));
        }
        if self.batch_size == 0 || self.inner_steps == 0 {
            return bad("batch size and inner steps must be >= 1".into());
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0 && n.is_finite()) {
                return bad(format!("max gradient norm must be > 0, got {n}"));
            }
        }
        Ok(())
    }
}

/// Per-token log-probabilities of one response under the three policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub current: Vec<f64>,
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
}

impl TokenLogProbs {
    pub fn validate(&self) -> Result<()> {
        let n = self.current.len();
        if n == 0 || self.old.len() != n || self.reference.len() != n {
            return Err(Error::InvalidArgument(format!(
                "token log-prob lists must be nonempty and equal length (got {}, {}, {})",
                n,
                self.old.len(),
                self.reference.len()
            )));
        }
        let ok = |v: &f64| v.is_finite() && *v <= 0.0;
        if !(self.current.iter().all(ok) && self.old.iter().all(ok) && self.reference.iter().all(ok)) {
            return Err(Error::InvalidArgument(
                "log-probabilities must be finite and <= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub raw: String,
    pub logprobs: TokenLogProbs,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub responses: Vec<Response>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        if self.responses.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "group {} needs at least 2 responses, got {}",
                self.task_id,
                self.responses.len()
            )));
        }
        for r in &self.responses {
            if !r.reward.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite reward in group {}",
                    self.task_id
                )));
            }
            r.logprobs.validate()?;
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }
}

/// Group-relative advantages with population standard deviation.
///
/// Groups whose spread is at most `std_floor` get all-zero advantages.
/// Deviations are taken from the first reward before averaging, which keeps
/// the result unchanged under exact constant shifts of the rewards.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument("rewards must be finite".into()));
    }
    let pivot = rewards[0];
    let dev: Vec<f64> = rewards.iter().map(|r| r - pivot).collect();
    let n = dev.len() as f64;
    let mean = dev.iter().sum::<f64>() / n;
    let centered: Vec<f64> = dev.iter().map(|d| d - mean).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    if std <= std_floor || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.iter().map(|c| c / std).collect())
}

pub fn importance_ratio(logp_current: f64, logp_old: f64) -> f64 {
    (logp_current - logp_old).exp()
}

/// `x - ln x - 1` with `x = exp(log_ratio)`; never negative.
fn k3_from_log_ratio(log_ratio: f64) -> f64 {
    (log_ratio.exp_m1() - log_ratio).max(0.0)
}

/// KL estimator with `x = pi / pi_ref`.
pub fn kl_term(logp_current: f64, logp_ref: f64) -> f64 {
    k3_from_log_ratio(logp_current - logp_ref)
}

pub fn kl_term_directed(logp_current: f64, logp_ref: f64, direction: KlDirection) -> f64 {
    match direction {
        KlDirection::PolicyOverRef => k3_from_log_ratio(logp_current - logp_ref),
        KlDirection::RefOverPolicy => k3_from_log_ratio(logp_ref - logp_current),
    }
}

/// Derivative of the KL estimator with respect to `logp_current`.
fn kl_slope(logp_current: f64, logp_ref: f64, direction: KlDirection) -> f64 {
    match direction {
        KlDirection::PolicyOverRef => (logp_current - logp_ref).exp_m1(),
        KlDirection::RefOverPolicy => -(logp_ref - logp_current).exp_m1(),
    }
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Surrogate value and whether the clipped branch was selected.
fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = clip(ratio, 1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub tokens: usize,
}

/// Objective of one group plus token-level KL and clip statistics.
pub fn group_stats(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<ObjectiveStats> {
    group.validate()?;
    let adv = normalize_advantages(&group.rewards(), cfg.std_floor)?;
    let g = group.responses.len() as f64;
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for (resp, &a) in group.responses.iter().zip(&adv) {
        let lp = &resp.logprobs;
        let mut per_response = 0.0;
        for t in 0..lp.len() {
            let rho = importance_ratio(lp.current[t], lp.old[t]);
            let (surr, was_clipped) = clipped_surrogate(rho, a, cfg.clip_eps);
            let kl = kl_term_directed(lp.current[t], lp.reference[t], cfg.kl_direction);
            per_response += surr - cfg.kl_beta * kl;
            kl_sum += kl;
            clipped += usize::from(was_clipped);
        }
        tokens += lp.len();
        objective += per_response / lp.len() as f64;
    }
    Ok(ObjectiveStats {
        objective: objective / g,
        mean_kl: kl_sum / tokens as f64,
        clip_fraction: clipped as f64 / tokens as f64,
        tokens,
    })
}

pub fn grpo_objective(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<f64> {
    Ok(group_stats(group, cfg)?.objective)
}

/// A rollout group plus what is needed to recompute its current
/// log-probabilities from policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInputs {
    pub group: RolloutGroup,
    /// Decision features, one row per token (shared by all responses).
    pub features: Vec<Vec<f64>>,
    /// Include/exclude decisions of each response.
    pub selections: Vec<Vec<bool>>,
}

impl GroupInputs {
    fn check(&self) -> Result<()> {
        if self.selections.len() != self.group.responses.len() {
            return Err(Error::DimensionMismatch {
                expected: self.group.responses.len(),
                actual: self.selections.len(),
            });
        }
        Ok(())
    }

    /// Overwrite the current log-probabilities with those under `params`.
    pub fn refresh_current(&mut self, params: &ToyPolicyParams, temperature: f64) -> Result<()> {
        self.check()?;
        for (resp, sel) in self.group.responses.iter_mut().zip(&self.selections) {
            resp.logprobs.current = logprobs_from_features(params, &self.features, sel, temperature)?;
        }
        Ok(())
    }
}

/// Sum of group objectives with current log-probabilities taken from `params`.
pub fn batch_objective(params: &ToyPolicyParams, batch: &[GroupInputs], cfg: &GrpoConfig) -> Result<f64> {
    let mut total = 0.0;
    for inputs in batch {
        let mut inputs = inputs.clone();
        inputs.refresh_current(params, cfg.temperature)?;
        total += grpo_objective(&inputs.group, cfg)?;
    }
    Ok(total)
}

/// Analytic gradient of one group's objective with respect to `params`.
pub fn group_gradient(params: &ToyPolicyParams, inputs: &GroupInputs, cfg: &GrpoConfig) -> Result<Vec<f64>> {
    inputs.check()?;
    for phi in &inputs.features {
        if phi.len() != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                actual: phi.len(),
            });
        }
    }
    let group = &inputs.group;
    group.validate()?;
    let adv = normalize_advantages(&group.rewards(), cfg.std_floor)?;
    let g = group.responses.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    for ((resp, sel), &a) in group.responses.iter().zip(&inputs.selections).zip(&adv) {
        let current = logprobs_from_features(params, &inputs.features, sel, cfg.temperature)?;
        let grads = logprob_grads_from_features(params, &inputs.features, sel, cfg.temperature)?;
        if current.len() != resp.logprobs.len() {
            return Err(Error::DimensionMismatch {
                expected: resp.logprobs.len(),
                actual: current.len(),
            });
        }
        let scale = 1.0 / (g * current.len() as f64);
        for (t, dlogp) in grads.iter().enumerate() {
            let rho = importance_ratio(current[t], resp.logprobs.old[t]);
            let (_, was_clipped) = clipped_surrogate(rho, a, cfg.clip_eps);
            let surrogate_slope = if was_clipped { 0.0 } else { rho * a };
            let kl = kl_slope(current[t], resp.logprobs.reference[t], cfg.kl_direction);
            let coef = scale * (surrogate_slope - cfg.kl_beta * kl);
            for (acc, d) in grad.iter_mut().zip(dlogp) {
                *acc += coef * d;
            }
        }
    }
    Ok(grad)
}

/// Gradient of [`batch_objective`].
pub fn grpo_gradient(params: &ToyPolicyParams, batch: &[GroupInputs], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    let mut total = vec![0.0; params.dim()];
    for inputs in batch {
        for (acc, v) in total.iter_mut().zip(group_gradient(params, inputs, cfg)?) {
            *acc += v;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyPolicyParams,
    pub log: Vec<TrainLogRecord>,
}

/// Sample `G` rollouts for every task in `batch` under `behavior`.
pub fn collect_groups(
    behavior: &ToyPolicyParams,
    reference: &ToyPolicyParams,
    tasks: &[&ToyTask],
    spec: &SyntheticSpec,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
    iteration: usize,
) -> Result<Vec<GroupInputs>> {
    tasks
        .iter()
        .enumerate()
        .map(|(b, toy)| {
            let features = task_features(toy);
            let mut responses = Vec::with_capacity(cfg.group_size);
            let mut selections = Vec::with_capacity(cfg.group_size);
            for g in 0..cfg.group_size {
                let mut stream = rng::stream(cfg.seed, "rollout", &[iteration as u64, b as u64, g as u64]);
                let r = rollout(behavior, toy, spec, cfg.temperature, reward_cfg, &mut stream)?;
                let reference_lp = logprobs_from_features(reference, &features, &r.selection, cfg.temperature)?;
                responses.push(Response {
                    raw: r.raw,
                    logprobs: TokenLogProbs {
                        current: r.logprobs.clone(),
                        old: r.logprobs,
                        reference: reference_lp,
                    },
                    reward: r.reward.total,
                });
                selections.push(r.selection);
            }
            Ok(GroupInputs {
                group: RolloutGroup {
                    task_id: toy.task.task_id.clone(),
                    responses,
                },
                features,
                selections,
            })
        })
        .collect()
}

/// Run GRPO on the toy environment.
///
/// Each iteration snapshots the behavior policy, samples a task batch,
/// rolls out `G` responses per task, and takes `inner_steps` gradient
/// ascent steps. The reference policy is `init` throughout.
pub fn train(
    tasks: &[ToyTask],
    spec: &SyntheticSpec,
    init: &ToyPolicyParams,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
    iterations: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    reward_cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no training tasks".into()));
    }
    let reference = init.clone();
    let mut params = init.clone();
    let mut log = Vec::with_capacity(iterations);
    let batch_size = cfg.batch_size.min(tasks.len());

    for iter in 0..iterations {
        let old = params.clone();
        let mut pick = rng::stream(cfg.seed, "batch", &[iter as u64]);
        let mut chosen = index::sample(&mut pick, tasks.len(), batch_size).into_vec();
        chosen.sort_unstable();
        let batch_tasks: Vec<&ToyTask> = chosen.iter().map(|&i| &tasks[i]).collect();
        let mut batch = collect_groups(&old, &reference, &batch_tasks, spec, cfg, reward_cfg, iter)?;

        let reward_sum: f64 = batch
            .iter()
            .flat_map(|g| g.group.responses.iter().map(|r| r.reward))
            .sum();
        let n_responses = (batch.len() * cfg.group_size) as f64;

        let mut objective = 0.0;
        let mut kl = 0.0;
        let mut clip_fraction = 0.0;
        for _ in 0..cfg.inner_steps {
            let mut grad = vec![0.0; params.dim()];
            let mut step_obj = 0.0;
            let mut kl_sum = 0.0;
            let mut clip_sum = 0.0;
            let mut tokens = 0usize;
            for inputs in batch.iter_mut() {
                inputs.refresh_current(&params, cfg.temperature)?;
                let stats = group_stats(&inputs.group, cfg)?;
                let g = group_gradient(&params, inputs, cfg)?;
                if !stats.objective.is_finite() {
                    return Err(Error::NonFinite {
                        what: "objective",
                        iteration: iter,
                        task_id: inputs.group.task_id.clone(),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "gradient",
                        iteration: iter,
                        task_id: inputs.group.task_id.clone(),
                    });
                }
                step_obj += stats.objective;
                kl_sum += stats.mean_kl * stats.tokens as f64;
                clip_sum += stats.clip_fraction * stats.tokens as f64;
                tokens += stats.tokens;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = match cfg.max_grad_norm {
                Some(max) if norm > max => max / norm,
                _ => 1.0,
            };
            for (w, d) in params.weights.iter_mut().zip(&grad) {
                *w += cfg.learning_rate * scale * d;
            }
            objective += step_obj / batch.len() as f64;
            kl += kl_sum / tokens as f64;
            clip_fraction += clip_sum / tokens as f64;
        }
        let steps = cfg.inner_steps as f64;
        log.push(TrainLogRecord {
            iter,
            mean_reward: reward_sum / n_responses,
            objective: objective / steps,
            mean_kl: kl / steps,
            clip_fraction: clip_fraction / steps,
        });
    }
    Ok(TrainOutcome { params, log })
}
