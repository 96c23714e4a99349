//! Online preference optimization with a leave-one-out policy-gradient
//! estimator.
//!
//! Per prompt, `k` completions are sampled from the current policy; each
//! sample's baseline is the mean KL-shaped reward of the other `k - 1`
//! samples, and the gradient estimate is the advantage-weighted mean of
//! `grad log pi`. Rewards are shaped per sequence as
//! `R - beta * (logp - logp_ref)` with temperature-1 log-probabilities, while
//! generation runs at the configured sampling temperature.
//!
//! [`exact_gradient_oracle`] computes the same gradient by full enumeration
//! and anchors the unbiasedness tests.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mixtures::{allocate, MixtureSpec};
use crate::policy::{PolicyParams, Prev, SamplingConfig, WeightMat};
use crate::reward::{shaped_reward, RewardModel};
use crate::scalar::Scalar;
use crate::seed::{self, stream};
use crate::synthlang::{DataGenConfig, Environment};
use crate::types::{Completion, LanguageId, Prompt};

/// Online trainer configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RlooConfig {
    /// Samples per prompt; the leave-one-out baseline needs at least 2.
    pub k: usize,
    pub beta: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub prompts_per_step: usize,
    pub seed: u64,
}

impl Default for RlooConfig {
    fn default() -> Self {
        Self {
            k: 2,
            beta: 0.01,
            temperature: 0.75,
            learning_rate: 1e-2,
            epochs: 2,
            prompts_per_step: 8,
            seed: 0,
        }
    }
}

impl RlooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("rloo requires k >= 2 (leave-one-out baseline)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("rloo temperature must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("rloo beta must be non-negative"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("rloo learning_rate must be non-negative"));
        }
        if self.epochs == 0 || self.prompts_per_step == 0 {
            return Err(Error::config("rloo epochs and prompts_per_step must be positive"));
        }
        Ok(())
    }
}

/// Leave-one-out advantages: `a_i = r_i - mean_{j != i} r_j`. Sums to zero.
pub fn rloo_advantages<S: Scalar>(rewards: &[S]) -> Result<Vec<S>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::config("rloo advantages need at least 2 rewards"));
    }
    let sum = rewards.iter().fold(S::zero(), |a, &r| a + r);
    let denom = S::from_f64_lossy((k - 1) as f64);
    Ok(rewards.iter().map(|&r| r - (sum - r) / denom).collect())
}

/// Per-sample diagnostics gathered while estimating.
#[derive(Debug, Clone)]
pub struct SampleDiag {
    pub raw: f64,
    pub shaped: f64,
    /// Sum of conditional KLs to the reference along the drawn positions.
    pub kl_sum: f64,
    pub kl_steps: usize,
    pub exploit_hits: usize,
    pub content_tokens: usize,
}

/// One prompt's gradient estimate plus sample diagnostics.
#[derive(Debug, Clone)]
pub struct PromptEstimate<S> {
    pub grad: WeightMat<S>,
    pub samples: Vec<SampleDiag>,
}

/// Core estimator, parametric in the reward function.
pub fn estimate_with<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    prompt: &Prompt,
    score: impl Fn(&Prompt, &Completion) -> f64,
    beta: f64,
    k: usize,
    temperature: f64,
    exploit_token: Option<u32>,
    rng: &mut impl Rng,
) -> Result<PromptEstimate<S>> {
    if k < 2 {
        return Err(Error::config("rloo estimator needs k >= 2"));
    }
    let sampling =
        SamplingConfig { temperature, max_len: policy.vocab().max_len, seed: 0 };
    let beta_s = S::from_f64_lossy(beta);
    let mut completions = Vec::with_capacity(k);
    let mut shaped = Vec::with_capacity(k);
    let mut diags = Vec::with_capacity(k);
    for _ in 0..k {
        let y = policy.sample(prompt, &sampling, rng);
        let raw = score(prompt, &y);
        let logp = policy.log_prob(prompt, &y);
        let logp_ref = reference.log_prob(prompt, &y);
        let r = shaped_reward(S::from_f64_lossy(raw), logp, logp_ref, beta_s);
        let (kl_sum, kl_steps) = trajectory_conditional_kl(policy, reference, prompt, &y);
        let exploit_hits = exploit_token
            .map(|t| y.content().iter().filter(|&&x| x == t).count())
            .unwrap_or(0);
        diags.push(SampleDiag {
            raw,
            shaped: r.as_f64(),
            kl_sum,
            kl_steps,
            exploit_hits,
            content_tokens: y.content().len(),
        });
        completions.push(y);
        shaped.push(r);
    }
    let advantages = rloo_advantages(&shaped)?;
    let inv_k = S::from_f64_lossy(1.0 / k as f64);
    let mut grad = WeightMat::<S>::zeros(policy.feature_dim(), policy.vocab_size());
    for (y, &a) in completions.iter().zip(advantages.iter()) {
        if a != S::zero() {
            grad.add_scaled(&policy.grad_log_prob(prompt, y), a * inv_k);
        }
    }
    Ok(PromptEstimate { grad, samples: diags })
}

/// Mean conditional KL to the reference along one trajectory's drawn steps.
fn trajectory_conditional_kl<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    prompt: &Prompt,
    y: &Completion,
) -> (f64, usize) {
    let mut prev = Prev::from_prompt(prompt);
    let mut sum = 0.0f64;
    let mut steps = 0usize;
    for (i, &tok) in y.tokens.iter().enumerate() {
        let is_final_eos = i + 1 == y.tokens.len();
        if is_final_eos && y.content_len() == policy.vocab().max_len {
            break; // forced eos: not a drawn step
        }
        sum += policy.conditional_kl(reference, prev, prompt.language).as_f64();
        steps += 1;
        prev = Prev::Token(tok);
    }
    (sum, steps)
}

/// The spec'd Monte-Carlo gradient estimate for one prompt under a bound
/// reward model.
pub fn rloo_gradient_estimate<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    prompt: &Prompt,
    reward: &RewardModel,
    cfg: &RlooConfig,
    rng: &mut impl Rng,
) -> Result<WeightMat<S>> {
    cfg.validate()?;
    let exploit = reward.spec.exploit.map(|e| e.token);
    Ok(estimate_with(
        policy,
        reference,
        prompt,
        |p, y| reward.score(p, y),
        cfg.beta,
        cfg.k,
        cfg.temperature,
        exploit,
        rng,
    )?
    .grad)
}

/// Enumerated KL-regularized objective `J = E[R] - beta * E[logp - logp_ref]`.
pub fn enumerated_objective<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    prompt: &Prompt,
    reward: &RewardModel,
    beta: f64,
) -> Result<S> {
    let beta_s = S::from_f64_lossy(beta);
    let mut j = S::zero();
    for (y, mass) in policy.enumerate_completions(prompt, policy.vocab().max_len)? {
        let r = S::from_f64_lossy(reward.score(prompt, &y));
        let lp = policy.log_prob(prompt, &y);
        let lq = reference.log_prob(prompt, &y);
        j = j + mass * shaped_reward(r, lp, lq, beta_s);
    }
    Ok(j)
}

/// Ground-truth gradient by full enumeration:
/// `sum_y p(y) * (shaped(y) - E[shaped]) * grad log p(y)`.
pub fn exact_gradient_oracle<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    prompt: &Prompt,
    reward: &RewardModel,
    beta: f64,
) -> Result<WeightMat<S>> {
    let beta_s = S::from_f64_lossy(beta);
    let all = policy.enumerate_completions(prompt, policy.vocab().max_len)?;
    let mut shaped = Vec::with_capacity(all.len());
    let mut expectation = S::zero();
    for (y, mass) in &all {
        let r = S::from_f64_lossy(reward.score(prompt, y));
        let s = shaped_reward(r, policy.log_prob(prompt, y), reference.log_prob(prompt, y), beta_s);
        shaped.push(s);
        expectation = expectation + *mass * s;
    }
    let mut grad = WeightMat::<S>::zeros(policy.feature_dim(), policy.vocab_size());
    for ((y, mass), s) in all.iter().zip(shaped.iter()) {
        let advantage = *s - expectation;
        grad.add_scaled(&policy.grad_log_prob(prompt, y), *mass * advantage);
    }
    Ok(grad)
}

/// Per-language prompt streams for online training: the environment, a
/// per-language allocation, and the prompt-generation config.
#[derive(Debug, Clone)]
pub struct PromptMixture<'a, S> {
    pub env: &'a Environment<S>,
    pub allocation: Vec<(LanguageId, usize)>,
    pub gen: DataGenConfig,
}

impl<'a, S: Scalar> PromptMixture<'a, S> {
    pub fn from_spec(env: &'a Environment<S>, spec: &MixtureSpec, gen: DataGenConfig) -> Result<Self> {
        for &lang in &spec.languages {
            if lang.0 >= env.num_languages() {
                return Err(Error::config(format!(
                    "mixture language {lang} not present in the environment"
                )));
            }
        }
        let allocation = allocate(spec).into_iter().collect();
        Ok(Self { env, allocation, gen })
    }

    pub fn total(&self) -> usize {
        self.allocation.iter().map(|(_, c)| c).sum()
    }
}

/// Deterministic proportional round-robin over the mixture's languages: each
/// draw goes to the language furthest behind its target share, ties to the
/// lowest index.
struct LanguageScheduler {
    allocation: Vec<(LanguageId, usize)>,
    drawn: Vec<usize>,
    total_alloc: usize,
    total_drawn: usize,
}

impl LanguageScheduler {
    fn new(allocation: &[(LanguageId, usize)]) -> Self {
        Self {
            allocation: allocation.to_vec(),
            drawn: vec![0; allocation.len()],
            total_alloc: allocation.iter().map(|(_, c)| c).sum(),
            total_drawn: 0,
        }
    }

    fn next(&mut self) -> LanguageId {
        let t = self.total_drawn + 1;
        let mut best = 0usize;
        let mut best_deficit = i128::MIN;
        for (i, (_, alloc)) in self.allocation.iter().enumerate() {
            let deficit =
                (*alloc as i128) * (t as i128) - (self.drawn[i] as i128) * (self.total_alloc as i128);
            if deficit > best_deficit {
                best_deficit = deficit;
                best = i;
            }
        }
        self.drawn[best] += 1;
        self.total_drawn += 1;
        self.allocation[best].0
    }
}

/// One history row per (step, language).
#[derive(Debug, Clone, PartialEq)]
pub struct RlooStepRecord {
    pub step: usize,
    pub lang: LanguageId,
    pub mean_reward_raw: f64,
    pub mean_reward_shaped: f64,
    pub mean_cond_kl: f64,
    pub grad_norm: f64,
    pub exploit_freq: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RlooHistory {
    pub steps: Vec<RlooStepRecord>,
}

impl RlooHistory {
    pub fn last_step(&self) -> Option<usize> {
        self.steps.last().map(|r| r.step)
    }

    /// Mean conditional KL over the rows of the final step.
    pub fn final_mean_kl(&self) -> f64 {
        let Some(last) = self.last_step() else { return 0.0 };
        let rows: Vec<&RlooStepRecord> = self.steps.iter().filter(|r| r.step == last).collect();
        rows.iter().map(|r| r.mean_cond_kl).sum::<f64>() / rows.len() as f64
    }

    /// Mean raw reward over the rows of one step.
    pub fn step_mean_raw(&self, step: usize) -> f64 {
        let rows: Vec<&RlooStepRecord> = self.steps.iter().filter(|r| r.step == step).collect();
        rows.iter().map(|r| r.mean_reward_raw).sum::<f64>() / rows.len() as f64
    }

    pub fn final_exploit_freq(&self) -> f64 {
        let Some(last) = self.last_step() else { return 0.0 };
        let rows: Vec<&RlooStepRecord> = self.steps.iter().filter(|r| r.step == last).collect();
        rows.iter().map(|r| r.exploit_freq).sum::<f64>() / rows.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct RlooOutcome<S> {
    pub params: PolicyParams<S>,
    pub history: RlooHistory,
    pub epoch_snapshots: Vec<PolicyParams<S>>,
}

/// Gradient ascent on the KL-shaped reward over fresh per-step prompts drawn
/// proportionally from the mixture's languages. Completions are never reused
/// across steps.
pub fn train_rloo<S: Scalar>(
    init: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    mixture: &PromptMixture<'_, S>,
    reward: &RewardModel,
    cfg: &RlooConfig,
) -> Result<RlooOutcome<S>> {
    cfg.validate()?;
    assert!(init.same_shape(reference), "policy and reference must share V and K");
    let total = mixture.total();
    if total == 0 {
        return Err(Error::config("rloo training requires a non-empty prompt mixture"));
    }
    let steps_per_epoch = total.div_ceil(cfg.prompts_per_step);
    let lr = S::from_f64_lossy(cfg.learning_rate);
    let exploit = reward.spec.exploit.map(|e| e.token);
    let mut params = init.clone();
    let mut scheduler = LanguageScheduler::new(&mixture.allocation);
    let mut prompt_counters: BTreeMap<LanguageId, u64> = BTreeMap::new();
    let mut history = RlooHistory::default();
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let inv_p = S::from_f64_lossy(1.0 / cfg.prompts_per_step as f64);
            let mut grad = WeightMat::<S>::zeros(params.feature_dim(), params.vocab_size());
            let mut per_lang: BTreeMap<LanguageId, Vec<SampleDiag>> = BTreeMap::new();
            for j in 0..cfg.prompts_per_step {
                let lang = scheduler.next();
                let counter = prompt_counters.entry(lang).or_insert(0);
                let prompt = mixture.env.gen_prompt(lang, *counter, &mixture.gen);
                *counter += 1;
                let mut rng = seed::rng(cfg.seed, &[stream::RLOO_SAMPLE, step as u64, j as u64]);
                let est = estimate_with(
                    &params,
                    reference,
                    &prompt,
                    |p, y| reward.score(p, y),
                    cfg.beta,
                    cfg.k,
                    cfg.temperature,
                    exploit,
                    &mut rng,
                )?;
                grad.add_scaled(&est.grad, inv_p);
                per_lang.entry(lang).or_default().extend(est.samples);
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { what: "rloo gradient", step });
            }
            params.weights_mut().add_scaled(&grad, lr);
            if !params.weights().is_finite() {
                return Err(Error::NonFinite { what: "rloo update", step });
            }
            let grad_norm = grad.norm_l2().as_f64();
            for (lang, diags) in per_lang {
                let n = diags.len() as f64;
                let kl_steps: usize = diags.iter().map(|d| d.kl_steps).sum();
                let kl_sum: f64 = diags.iter().map(|d| d.kl_sum).sum();
                let content: usize = diags.iter().map(|d| d.content_tokens).sum();
                let hits: usize = diags.iter().map(|d| d.exploit_hits).sum();
                history.steps.push(RlooStepRecord {
                    step,
                    lang,
                    mean_reward_raw: diags.iter().map(|d| d.raw).sum::<f64>() / n,
                    mean_reward_shaped: diags.iter().map(|d| d.shaped).sum::<f64>() / n,
                    mean_cond_kl: if kl_steps == 0 { 0.0 } else { kl_sum / kl_steps as f64 },
                    grad_norm,
                    exploit_freq: if content == 0 { 0.0 } else { hits as f64 / content as f64 },
                });
            }
            step += 1;
        }
        snapshots.push(params.clone());
    }
    Ok(RlooOutcome { params, history, epoch_snapshots: snapshots })
}

/// Fraction of content tokens equal to `token` among `n` fresh samples.
pub fn sampled_token_frequency<S: Scalar>(
    policy: &PolicyParams<S>,
    env: &Environment<S>,
    lang: LanguageId,
    token: u32,
    n: usize,
    gen: &DataGenConfig,
    temperature: f64,
    seed_base: u64,
) -> f64 {
    let sampling = SamplingConfig { temperature, max_len: policy.vocab().max_len, seed: 0 };
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..n as u64 {
        let prompt = env.gen_prompt(lang, i, gen);
        let mut rng = seed::rng(seed_base, &[stream::EVAL_COMPLETION, i]);
        let y = policy.sample(&prompt, &sampling, &mut rng);
        total += y.content().len();
        hits += y.content().iter().filter(|&&t| t == token).count();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
