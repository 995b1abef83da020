//! Phase two: PPO fine-tuning with generalized advantage estimation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::ActionSpec;
use crate::error::ShopError;
use crate::model::{ContextEncoding, SeqModel};
use crate::nn::{clip_global_norm, Adam, AdamConfig, GradStore, Tape};
use crate::rollout::RolloutBuffer;
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// One collected step: everything needed to recompute the policy probability
/// and value under new parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub context: ContextEncoding,
    pub action_index: usize,
    /// The concrete action set (any query slot already materialized).
    pub action_set: Vec<ActionSpec>,
    /// Softmax-normalized action log-probability at collection time.
    pub logprob_old: f64,
    pub value_old: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PPOConfig {
    pub n_streams: usize,
    pub steps_per_stream: usize,
    pub epochs_per_update: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub clip_eps: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            n_streams: 16,
            steps_per_stream: 40,
            epochs_per_update: 1,
            batch_size: 8,
            learning_rate: 1e-6,
            adam_eps: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            discount: 0.99,
            gae_lambda: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            clip_eps: 0.2,
        }
    }
}

impl PPOConfig {
    pub fn transitions_per_update(&self) -> usize {
        self.n_streams * self.steps_per_stream
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_eps,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

/// Recursive generalized advantage estimation over one stream.
///
/// delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t, with the bootstrap
/// value standing in for V past the end; A_t = delta_t + gamma * lambda *
/// (1 - done_t) * A_{t+1}; returns_t = A_t + V_t.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + discount * next_value * not_done - values[t];
        acc = delta + discount * lambda * not_done * acc;
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    (advantages, returns)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Reference (scalar) form of the per-sample PPO loss.
pub fn ppo_losses(
    logprob_new: f64,
    logprob_old: f64,
    advantage: f64,
    value_new: f64,
    return_target: f64,
    entropy: f64,
    cfg: &PPOConfig,
) -> PpoLossParts {
    let ratio = (logprob_new - logprob_old).exp();
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let policy = -f64::min(ratio * advantage, clipped * advantage);
    let value = (value_new - return_target) * (value_new - return_target);
    PpoLossParts {
        total: policy + cfg.value_coef * value - cfg.entropy_coef * entropy,
        policy,
        value,
        entropy,
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub max_ratio_deviation: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: Vec<MinibatchStats>,
}

struct Sample<'a> {
    transition: &'a Transition,
    advantage: f64,
    return_target: f64,
}

struct SampleOutcome<S: Scalar> {
    grads: GradStore<S>,
    parts: PpoLossParts,
    ratio: f64,
}

fn sample_loss<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    sample: &Sample<'_>,
    cfg: &PPOConfig,
) -> Result<SampleOutcome<S>, ShopError> {
    let t = sample.transition;
    let mut tape = Tape::recording();
    let summary = model.encode(&mut tape, &t.context);
    let mut scores = Vec::with_capacity(t.action_set.len());
    for action in &t.action_set {
        let ids = vocab.encode(&action.surface);
        scores.push(model.action_score(&mut tape, summary, &ids)?);
    }
    let stacked = tape.stack(&scores);
    let logp = tape.log_softmax(stacked);
    let logprob_new = tape.pick(logp, t.action_index);
    let entropy = tape.entropy(logp);
    let value_new = model.value(&mut tape, summary);

    let adv = S::from_f64_c(sample.advantage);
    let old = tape.scalar(S::from_f64_c(t.logprob_old));
    let diff = tape.sub(logprob_new, old);
    let ratio = tape.exp(diff);
    let surr1 = tape.scale(ratio, adv);
    let clipped = tape.clamp(ratio, S::from_f64_c(1.0 - cfg.clip_eps), S::from_f64_c(1.0 + cfg.clip_eps));
    let surr2 = tape.scale(clipped, adv);
    let best = tape.min2(surr1, surr2);
    let policy = tape.neg(best);

    let ret = tape.scalar(S::from_f64_c(sample.return_target));
    let vdiff = tape.sub(value_new, ret);
    let value_sq = tape.square(vdiff);

    let scaled_value = tape.scale(value_sq, S::from_f64_c(cfg.value_coef));
    let scaled_entropy = tape.scale(entropy, S::from_f64_c(-cfg.entropy_coef));
    let partial = tape.add(policy, scaled_value);
    let total = tape.add(partial, scaled_entropy);

    let grads = tape.backward(total, &model.params)?;
    let parts = PpoLossParts {
        total: tape.scalar_value(total).to_f64_c(),
        policy: tape.scalar_value(policy).to_f64_c(),
        value: tape.scalar_value(value_sq).to_f64_c(),
        entropy: tape.scalar_value(entropy).to_f64_c(),
    };
    Ok(SampleOutcome {
        grads,
        parts,
        ratio: tape.scalar_value(ratio).to_f64_c(),
    })
}

/// One PPO update over a full rollout buffer: per-update advantage
/// normalization, shuffled minibatches, clipped-surrogate descent with
/// gradient-norm clipping.
pub fn ppo_update<S: Scalar>(
    model: &mut SeqModel<S>,
    vocab: &Vocabulary,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    adam: &mut Adam<S>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, ShopError> {
    let mut samples: Vec<Sample<'_>> = Vec::with_capacity(buffer.len());
    for stream in &buffer.streams {
        let rewards: Vec<f64> = stream.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = stream.transitions.iter().map(|t| t.value_old).collect();
        let dones: Vec<bool> = stream.transitions.iter().map(|t| t.done).collect();
        let (advantages, returns) =
            compute_gae(&rewards, &values, &dones, stream.bootstrap_value, cfg.discount, cfg.gae_lambda);
        for (i, t) in stream.transitions.iter().enumerate() {
            samples.push(Sample { transition: t, advantage: advantages[i], return_target: returns[i] });
        }
    }
    if samples.is_empty() {
        return Err(ShopError::Contract("empty rollout buffer".into()));
    }

    // Normalize advantages across the whole update.
    let n = samples.len() as f64;
    let mean: f64 = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var: f64 = samples.iter().map(|s| (s.advantage - mean) * (s.advantage - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for s in &mut samples {
        s.advantage = (s.advantage - mean) / (std + 1e-8);
    }

    let mut stats = UpdateStats::default();
    for _epoch in 0..cfg.epochs_per_update {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for (mb_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let outcomes: Result<Vec<SampleOutcome<S>>, ShopError> = chunk
                .par_iter()
                .map(|i| sample_loss(model, vocab, &samples[*i], cfg))
                .collect();
            let outcomes = outcomes.map_err(|e| {
                ShopError::Numeric(format!("minibatch {mb_index}: {e}"))
            })?;

            let mut grads = GradStore::zeros_like(&model.params);
            let mut mb = MinibatchStats::default();
            for o in &outcomes {
                if !o.parts.total.is_finite() {
                    return Err(ShopError::Numeric(format!(
                        "non-finite loss in minibatch {mb_index}"
                    )));
                }
                grads.add_from(&o.grads);
                mb.policy_loss += o.parts.policy;
                mb.value_loss += o.parts.value;
                mb.entropy += o.parts.entropy;
                mb.approx_kl += o.transition_kl();
                if (o.ratio - 1.0).abs() > cfg.clip_eps {
                    mb.clip_fraction += 1.0;
                }
                mb.max_ratio_deviation = mb.max_ratio_deviation.max((o.ratio - 1.0).abs());
            }
            let b = outcomes.len() as f64;
            grads.scale(S::from_f64_c(1.0 / b));
            mb.policy_loss /= b;
            mb.value_loss /= b;
            mb.entropy /= b;
            mb.approx_kl /= b;
            mb.clip_fraction /= b;

            if !grads.is_finite() {
                return Err(ShopError::Numeric(format!(
                    "non-finite gradient in minibatch {mb_index}"
                )));
            }
            mb.grad_norm_pre_clip = clip_global_norm(&mut grads, S::from_f64_c(cfg.max_grad_norm)).to_f64_c();
            mb.grad_norm_post_clip = grads.global_norm().to_f64_c();
            adam.step(&mut model.params, &grads)?;
            stats.minibatches.push(mb);
        }
    }

    let m = stats.minibatches.len() as f64;
    stats.policy_loss = stats.minibatches.iter().map(|s| s.policy_loss).sum::<f64>() / m;
    stats.value_loss = stats.minibatches.iter().map(|s| s.value_loss).sum::<f64>() / m;
    stats.entropy = stats.minibatches.iter().map(|s| s.entropy).sum::<f64>() / m;
    stats.clip_fraction = stats.minibatches.iter().map(|s| s.clip_fraction).sum::<f64>() / m;
    stats.approx_kl = stats.minibatches.iter().map(|s| s.approx_kl).sum::<f64>() / m;
    Ok(stats)
}

impl<S: Scalar> SampleOutcome<S> {
    /// Nonnegative estimator of KL(old || new): (ratio - 1) - ln(ratio).
    fn transition_kl(&self) -> f64 {
        (self.ratio - 1.0) - self.ratio.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unrolled-sum oracle: A_t = sum_k (gamma*lambda)^k delta_{t+k}, cut at
    /// episode ends.
    fn gae_brute_force(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        let delta = |t: usize| {
            let next = if dones[t] {
                0.0
            } else if t + 1 < n {
                values[t + 1]
            } else {
                bootstrap
            };
            rewards[t] + gamma * next - values[t]
        };
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                let mut coef = 1.0;
                for k in t..n {
                    acc += coef * delta(k);
                    if dones[k] {
                        break;
                    }
                    coef *= gamma * lambda;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn single_terminal_step_reduces_to_r_minus_v() {
        let (adv, ret) = compute_gae(&[0.7], &[0.2], &[true], 99.0, 0.99, 0.99);
        assert!((adv[0] - (0.7 - 0.2)).abs() < 1e-15);
        assert!((ret[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let rewards = [0.1, 0.0, 0.5];
        let values = [0.3, 0.2, 0.4];
        let dones = [false, false, true];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 0.9, 0.95, 0.0);
        for t in 0..3 {
            let next = if dones[t] { 0.0 } else { values[t + 1] };
            let delta = rewards[t] + 0.95 * next - values[t];
            assert!((adv[t] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_matches_the_unrolled_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let bootstrap = rng.gen_range(-1.0..1.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, 0.99, 0.99);
            let oracle = gae_brute_force(&rewards, &values, &dones, bootstrap, 0.99, 0.99);
            for t in 0..n {
                assert!((adv[t] - oracle[t]).abs() < 1e-10, "t={t}: {} vs {}", adv[t], oracle[t]);
                assert!((ret[t] - (oracle[t] + values[t])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn terminal_reward_discounts_back_to_the_start() {
        // Sparse terminal reward; with lambda = 1 the return at t=0 is the
        // plain discounted episode return.
        let gamma = 0.99;
        let rewards = [0.0, 0.0, 0.0, 0.0, 1.0];
        let values = [0.3, -0.1, 0.2, 0.05, 0.4];
        let dones = [false, false, false, false, true];
        let (_, ret) = compute_gae(&rewards, &values, &dones, 7.0, gamma, 1.0);
        let brute = gamma.powi(4);
        assert!((ret[0] - brute).abs() < 1e-10, "{} vs {brute}", ret[0]);
    }

    #[test]
    fn loss_at_ratio_one_is_negative_advantage() {
        let cfg = PPOConfig::default();
        for adv in [-2.0, -0.3, 0.0, 0.5, 3.0] {
            let parts = ppo_losses(-1.2, -1.2, adv, 0.0, 0.0, 0.0, &cfg);
            assert_eq!(parts.policy, -adv);
        }
    }

    #[test]
    fn positive_advantage_clips_at_upper_bound() {
        let cfg = PPOConfig::default();
        // ratio = 2 from logprob difference ln 2.
        let parts = ppo_losses((2.0f64).ln() - 1.0, -1.0, 1.5, 0.0, 0.0, 0.0, &cfg);
        assert!((parts.policy - (-1.2 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn negative_advantage_keeps_the_pessimistic_term() {
        let cfg = PPOConfig::default();
        // ratio = 0.5, A = -1: min(0.5 * -1, 0.8 * -1) = -0.8.
        let parts = ppo_losses((0.5f64).ln() - 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, &cfg);
        assert!((parts.policy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn policy_loss_never_exceeds_either_surrogate() {
        let cfg = PPOConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let lp_new: f64 = rng.gen_range(-3.0..0.0);
            let lp_old: f64 = rng.gen_range(-3.0..0.0);
            let adv: f64 = rng.gen_range(-2.0..2.0);
            let parts = ppo_losses(lp_new, lp_old, adv, 0.0, 0.0, 0.0, &cfg);
            let ratio = (lp_new - lp_old).exp();
            let clipped = ratio.clamp(0.8, 1.2);
            let bound = -f64::max(ratio * adv, clipped * adv);
            assert!(parts.policy >= bound - 1e-12);
        }
    }

    #[test]
    fn default_config_carries_the_expected_values() {
        let cfg = PPOConfig::default();
        assert_eq!(cfg.transitions_per_update(), 640);
        assert_eq!(cfg.n_streams, 16);
        assert_eq!(cfg.steps_per_stream, 40);
        assert_eq!(cfg.epochs_per_update, 1);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 1e-6);
        assert_eq!(cfg.adam_eps, 1e-5);
        assert_eq!(cfg.discount, 0.99);
        assert_eq!(cfg.gae_lambda, 0.99);
        assert_eq!(cfg.entropy_coef, 0.01);
        assert_eq!(cfg.value_coef, 0.5);
        assert_eq!(cfg.max_grad_norm, 0.5);
        assert_eq!(cfg.clip_eps, 0.2);
    }
}
