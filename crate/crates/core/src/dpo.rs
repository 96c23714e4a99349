//! Offline preference optimization: the contrastive sigmoid loss on
//! log-probability ratios, its exact gradient, and a minibatch gradient
//! descent trainer over a labeled dataset.

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, WeightMat};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::seed::{self, stream};
use crate::types::{Dataset, PreferencePair};

/// Offline trainer configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.5, learning_rate: 1e-2, epochs: 2, batch_size: 32, seed: 0 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config("dpo beta must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("dpo learning_rate must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("dpo epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// The sigmoid argument `z = beta * (ratio_chosen - ratio_rejected)`, where a
/// ratio is `logp_policy - logp_ref` for one completion. `z` is also the
/// implicit-reward margin of the pair.
pub fn margin_from_log_ratios<S: Scalar>(ratio_chosen: S, ratio_rejected: S, beta: S) -> S {
    beta * (ratio_chosen - ratio_rejected)
}

/// Loss given precomputed log ratios: `-ln sigma(z)` evaluated as
/// `softplus(-z)` so saturated pairs stay finite.
pub fn loss_from_log_ratios<S: Scalar>(ratio_chosen: S, ratio_rejected: S, beta: S) -> S {
    softplus(-margin_from_log_ratios(ratio_chosen, ratio_rejected, beta))
}

fn pair_log_ratios<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    pair: &PreferencePair,
) -> (S, S) {
    let rc = policy.log_prob(&pair.prompt, &pair.chosen)
        - reference.log_prob(&pair.prompt, &pair.chosen);
    let rr = policy.log_prob(&pair.prompt, &pair.rejected)
        - reference.log_prob(&pair.prompt, &pair.rejected);
    (rc, rr)
}

/// Loss of one preference pair. Always positive; exactly `ln 2` at
/// `policy == reference`.
pub fn dpo_loss<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    pair: &PreferencePair,
    beta: f64,
) -> S {
    let (rc, rr) = pair_log_ratios(policy, reference, pair);
    loss_from_log_ratios(rc, rr, S::from_f64_lossy(beta))
}

/// Implicit-reward margin `z` of one pair.
pub fn dpo_margin<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    pair: &PreferencePair,
    beta: f64,
) -> S {
    let (rc, rr) = pair_log_ratios(policy, reference, pair);
    margin_from_log_ratios(rc, rr, S::from_f64_lossy(beta))
}

/// Exact gradient of [`dpo_loss`] with respect to the policy weights:
/// `-beta * sigma(-z) * (grad logp(chosen) - grad logp(rejected))`.
pub fn dpo_grad<S: Scalar>(
    policy: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    pair: &PreferencePair,
    beta: f64,
) -> WeightMat<S> {
    let beta_s = S::from_f64_lossy(beta);
    let (rc, rr) = pair_log_ratios(policy, reference, pair);
    let z = margin_from_log_ratios(rc, rr, beta_s);
    let coeff = -(beta_s * sigmoid(-z));
    let mut grad = policy.grad_log_prob(&pair.prompt, &pair.chosen);
    grad.scale(coeff);
    grad.add_scaled(&policy.grad_log_prob(&pair.prompt, &pair.rejected), -coeff);
    grad
}

/// One row per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoStepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
    pub grad_norm: f64,
}

/// Per-epoch aggregate over every pair visited in the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoEpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DpoHistory {
    pub steps: Vec<DpoStepRecord>,
    pub epochs: Vec<DpoEpochSummary>,
}

/// Trainer output: final parameters, history, and one snapshot per epoch
/// (checkpoint selection happens downstream).
#[derive(Debug, Clone)]
pub struct DpoOutcome<S> {
    pub params: PolicyParams<S>,
    pub history: DpoHistory,
    pub epoch_snapshots: Vec<PolicyParams<S>>,
}

/// Plain gradient descent on the mean minibatch loss, with deterministic
/// per-(seed, epoch) shuffling. Aborts with the step index if the loss stops
/// being finite.
pub fn train_dpo<S: Scalar>(
    init: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    data: &Dataset,
    cfg: &DpoConfig,
) -> Result<DpoOutcome<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("dpo training requires a non-empty dataset"));
    }
    assert!(init.same_shape(reference), "policy and reference must share V and K");
    let n = data.len();
    let lr = S::from_f64_lossy(cfg.learning_rate);
    let mut params = init.clone();
    let mut history = DpoHistory::default();
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_indices(&mut order, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut epoch_margin = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let m = batch.len();
            let inv_m = S::from_f64_lossy(1.0 / m as f64);
            let mut grad = WeightMat::<S>::zeros(params.feature_dim(), params.vocab_size());
            let mut batch_loss = 0.0f64;
            let mut batch_margin = 0.0f64;
            for &idx in batch {
                let pair = &data.pairs[idx];
                let loss = dpo_loss(&params, reference, pair, cfg.beta);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { what: "dpo loss", step });
                }
                batch_loss += loss.as_f64();
                batch_margin += dpo_margin(&params, reference, pair, cfg.beta).as_f64();
                grad.add_scaled(&dpo_grad(&params, reference, pair, cfg.beta), inv_m);
            }
            params.weights_mut().add_scaled(&grad, -lr);
            if !params.weights().is_finite() {
                return Err(Error::NonFinite { what: "dpo update", step });
            }
            epoch_loss += batch_loss;
            epoch_margin += batch_margin;
            history.steps.push(DpoStepRecord {
                epoch,
                step,
                mean_loss: batch_loss / m as f64,
                mean_margin: batch_margin / m as f64,
                grad_norm: grad.norm_l2().as_f64(),
            });
            step += 1;
        }
        history.epochs.push(DpoEpochSummary {
            epoch,
            mean_loss: epoch_loss / n as f64,
            mean_margin: epoch_margin / n as f64,
        });
        snapshots.push(params.clone());
    }
    Ok(DpoOutcome { params, history, epoch_snapshots: snapshots })
}

fn shuffle_indices(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::Rng;
    let mut rng = seed::rng(seed, &[stream::SHUFFLE, epoch]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::{BudgetMode, MixtureSpec};
    use crate::types::{Channel, Completion, LanguageId, Prompt, Provenance, VocabSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lang0() -> LanguageId {
        LanguageId(0)
    }

    fn vocab() -> VocabSpec {
        VocabSpec::new(6, 5).unwrap()
    }

    fn make_pair(chosen: Vec<u32>, rejected: Vec<u32>) -> PreferencePair {
        PreferencePair {
            prompt: Prompt::new(vec![1, 2], lang0()),
            chosen: Completion::new(chosen, lang0()),
            rejected: Completion::new(rejected, lang0()),
            channel_chosen: Channel::Direct,
            channel_rejected: Channel::Translated,
            labeler_margin: 0.5,
        }
    }

    fn tiny_dataset(pairs: Vec<PreferencePair>) -> Dataset {
        Dataset {
            pairs,
            provenance: Provenance {
                mixture: MixtureSpec::new("t", vec![lang0()], BudgetMode::PerLanguage(1)).unwrap(),
                seed: 0,
            },
        }
    }

    #[test]
    fn loss_at_reference_is_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let p = PolicyParams::<f64>::random(vocab(), 1, 1.0, &mut rng);
        let pair = make_pair(vec![0, 3, 5], vec![2, 5]);
        let loss = dpo_loss(&p, &p, &pair, 0.5);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_scalar_evaluation() {
        // Log ratios (+0.2, -0.1) at beta = 0.5: -ln sigma(0.15).
        let direct = (1.0 + (-0.15f64).exp()).ln();
        let got = loss_from_log_ratios(0.2f64, -0.1, 0.5);
        assert!((got - direct).abs() < 1e-12);
        assert!((got - 0.620957).abs() < 1e-6, "loss {got}");
    }

    #[test]
    fn swapping_the_pair_reflects_the_sigmoid_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let p = PolicyParams::<f64>::random(vocab(), 1, 0.7, &mut rng);
        let r = PolicyParams::<f64>::random(vocab(), 1, 0.7, &mut rng);
        let pair = make_pair(vec![0, 3, 5], vec![2, 5]);
        let mut swapped = pair.clone();
        std::mem::swap(&mut swapped.chosen, &mut swapped.rejected);
        let ell = dpo_loss(&p, &r, &pair, 0.5);
        let ell_swapped = dpo_loss(&p, &r, &swapped, 0.5);
        // -ln(1 - e^{-ell}) is the loss with the sigmoid argument negated.
        let reflected = -(-(-ell).exp()).ln_1p();
        assert!((ell_swapped - reflected).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        use rand::Rng;
        for trial in 0..20 {
            let p = PolicyParams::<f64>::random(vocab(), 1, 0.8, &mut rng);
            let r = PolicyParams::<f64>::random(vocab(), 1, 0.8, &mut rng);
            let pair = make_pair(vec![0, 3, 2, 5], vec![4, 4, 5]);
            let grad = dpo_grad(&p, &r, &pair, 0.5);
            let h = 1e-5;
            for _ in 0..10 {
                let f = rng.gen_range(0..p.feature_dim());
                let v = rng.gen_range(0..p.vocab_size());
                let mut plus = p.clone();
                plus.weights_mut().set(f, v, p.weights().get(f, v) + h);
                let mut minus = p.clone();
                minus.weights_mut().set(f, v, p.weights().get(f, v) - h);
                let fd =
                    (dpo_loss(&plus, &r, &pair, 0.5) - dpo_loss(&minus, &r, &pair, 0.5)) / (2.0 * h);
                let g = grad.get(f, v);
                let denom = fd.abs().max(1e-8);
                assert!(
                    (g - fd).abs() / denom < 1e-6,
                    "trial {trial} f={f} v={v}: grad {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_at_reference_is_half_beta_grad_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let p = PolicyParams::<f64>::random(vocab(), 1, 0.8, &mut rng);
        let pair = make_pair(vec![0, 3, 5], vec![2, 5]);
        let beta = 0.5;
        let grad = dpo_grad(&p, &p, &pair, beta);
        let mut expect = p.grad_log_prob(&pair.prompt, &pair.chosen);
        expect.add_scaled(&p.grad_log_prob(&pair.prompt, &pair.rejected), -1.0);
        expect.scale(-beta * 0.5);
        for f in 0..p.feature_dim() {
            for v in 0..p.vocab_size() {
                assert!((grad.get(f, v) - expect.get(f, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_pairs_have_vanishing_gradient() {
        // Drive z far positive by separating the chosen and rejected tokens'
        // bias-row weights; z = beta * gap exceeds 30.
        let mut p = PolicyParams::<f64>::zeros(vocab(), 1);
        let bias = p.bias_row();
        p.weights_mut().set(bias, 0, 40.0);
        p.weights_mut().set(bias, 2, -40.0);
        let r = PolicyParams::<f64>::zeros(vocab(), 1);
        let pair = make_pair(vec![0, 5], vec![2, 5]);
        let z = dpo_margin(&p, &r, &pair, 0.5);
        assert!(z > 30.0, "z = {z}");
        let grad = dpo_grad(&p, &r, &pair, 0.5);
        assert!(grad.norm_l2() < 1e-10, "norm {}", grad.norm_l2());
    }

    #[test]
    fn full_batch_descent_on_one_pair_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let init = PolicyParams::<f64>::random(vocab(), 1, 0.3, &mut rng);
        let reference = init.clone();
        let pair = make_pair(vec![0, 3, 5], vec![2, 5]);
        let data = tiny_dataset(vec![pair.clone()]);
        let cfg = DpoConfig {
            beta: 0.5,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 1,
            seed: 9,
        };
        let out = train_dpo(&init, &reference, &data, &cfg).unwrap();
        let losses: Vec<f64> = out.history.steps.iter().map(|s| s.mean_loss).collect();
        assert_eq!(losses.len(), 200);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(losses.last().unwrap() < &std::f64::consts::LN_2);
    }

    #[test]
    fn zero_learning_rate_returns_init_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let init = PolicyParams::<f64>::random(vocab(), 1, 0.5, &mut rng);
        let reference = PolicyParams::<f64>::random(vocab(), 1, 0.5, &mut rng);
        let data = tiny_dataset(vec![make_pair(vec![0, 5], vec![1, 5])]);
        let cfg = DpoConfig { learning_rate: 0.0, epochs: 3, ..DpoConfig::default() };
        let out = train_dpo(&init, &reference, &data, &cfg).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn identical_config_reproduces_identical_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let init = PolicyParams::<f64>::random(vocab(), 1, 0.5, &mut rng);
        let reference = init.clone();
        let pairs: Vec<PreferencePair> = (0..7)
            .map(|i| make_pair(vec![i % 5, 0, 5], vec![(i + 1) % 5, 5]))
            .collect();
        let data = tiny_dataset(pairs);
        let cfg = DpoConfig { batch_size: 3, seed: 77, ..DpoConfig::default() };
        let a = train_dpo(&init, &reference, &data, &cfg).unwrap();
        let b = train_dpo(&init, &reference, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_snapshots.len(), cfg.epochs);
    }

    #[test]
    fn margins_flip_positive_on_single_token_difference_data() {
        // Chosen and rejected differ in one position; after training the
        // policy should rank chosen above rejected more strongly than the
        // reference does, for nearly every pair.
        let init = PolicyParams::<f64>::zeros(vocab(), 1);
        let reference = init.clone();
        let pairs: Vec<PreferencePair> = (0..40)
            .map(|i| {
                let shared = vec![i % 5, (i + 2) % 5];
                let mut chosen = shared.clone();
                chosen[0] = 0;
                let mut rejected = shared;
                rejected[0] = 2;
                chosen.push(5);
                rejected.push(5);
                make_pair(chosen, rejected)
            })
            .collect();
        let data = tiny_dataset(pairs);
        let cfg = DpoConfig { learning_rate: 0.05, epochs: 10, batch_size: 8, seed: 3, ..DpoConfig::default() };
        let out = train_dpo(&init, &reference, &data, &cfg).unwrap();
        let positive = data
            .pairs
            .iter()
            .filter(|p| dpo_margin(&out.params, &reference, p, cfg.beta) > 0.0)
            .count();
        assert!(
            positive as f64 >= 0.95 * data.len() as f64,
            "{positive}/{} positive margins",
            data.len()
        );
    }
}
