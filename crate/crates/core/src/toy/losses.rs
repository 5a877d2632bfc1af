//! Batch losses of the toy policy and their analytic gradients.
//!
//! Each `*_loss` function evaluates the objective by composing the scalar
//! losses in [`crate::objectives`] with log-probabilities read off the policy.
//! Each `*_loss_grad` function returns the same value together with the
//! gradient with respect to every logit, derived by hand. [`grad_check`]
//! compares the two routes with central differences.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::objectives::{
    self, clipped_surrogate, clipped_surrogate_grad, kl_penalty, odds_ratio_loss_grad, HyperParams, KlDirection,
    PolicyLogProbs, PreferenceLogProbs, Reduction,
};

use super::policy::ToyPolicy;

/// A demonstration: the response to a prompt with this target had `gold_length` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SftSample {
    pub target: usize,
    pub gold_length: usize,
}

/// A preference pair reduced to lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyPair {
    pub target: usize,
    pub chosen_length: usize,
    pub rejected_length: usize,
}

/// One sampled response with the behaviour policy's log-probability and its advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub target: usize,
    pub length: usize,
    pub old_logprob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(domain(format!("empty {what} batch")));
    }
    Ok(())
}

fn same_shape(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<()> {
    if policy.max_target() != reference.max_target() || policy.max_len() != reference.max_len() {
        return Err(domain("policy and reference tables differ in shape"));
    }
    Ok(())
}

/// Mean over samples of the per-token SFT loss of the gold length.
pub fn sft_loss(policy: &ToyPolicy, samples: &[SftSample]) -> Result<f64> {
    nonempty(samples, "sft")?;
    let mut total = 0.0;
    for s in samples {
        total += objectives::sft_loss(&policy.token_logprobs(s.target, s.gold_length)?)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn sft_loss_grad(policy: &ToyPolicy, samples: &[SftSample]) -> Result<LossGrad> {
    nonempty(samples, "sft")?;
    let n = samples.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let mut loss = 0.0;
    for s in samples {
        let tokens = policy.token_logprobs(s.target, s.gold_length)?;
        let d = objectives::sft_loss_token_grad(tokens.len(), Reduction::Mean);
        loss += -tokens.iter().sum::<f64>() / tokens.len() as f64;
        policy.accumulate_logprob_grad(s.target, s.gold_length, d / n, &mut grad);
    }
    Ok(LossGrad { loss: loss / n, grad })
}

fn pair_logprobs(policy: &ToyPolicy, reference: &ToyPolicy, p: &ToyPair) -> Result<PreferenceLogProbs> {
    Ok(PreferenceLogProbs {
        chosen: PolicyLogProbs::new(
            policy.response_logprob(p.target, p.chosen_length)?,
            reference.response_logprob(p.target, p.chosen_length)?,
        )?,
        rejected: PolicyLogProbs::new(
            policy.response_logprob(p.target, p.rejected_length)?,
            reference.response_logprob(p.target, p.rejected_length)?,
        )?,
    })
}

pub fn dpo_loss(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair], beta: f64) -> Result<f64> {
    nonempty(pairs, "dpo")?;
    same_shape(policy, reference)?;
    let mut total = 0.0;
    for p in pairs {
        total += objectives::dpo_loss(&pair_logprobs(policy, reference, p)?, beta);
    }
    Ok(total / pairs.len() as f64)
}

pub fn dpo_loss_grad(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair], beta: f64) -> Result<LossGrad> {
    nonempty(pairs, "dpo")?;
    same_shape(policy, reference)?;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let mut loss = 0.0;
    for p in pairs {
        let g = objectives::dpo_loss_grad(&pair_logprobs(policy, reference, p)?, beta);
        loss += g.loss;
        policy.accumulate_logprob_grad(p.target, p.chosen_length, g.d_chosen / n, &mut grad);
        policy.accumulate_logprob_grad(p.target, p.rejected_length, g.d_rejected / n, &mut grad);
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Mean over pairs of `sft(chosen) + λ · odds_ratio(chosen, rejected)`.
pub fn orpo_loss(policy: &ToyPolicy, pairs: &[ToyPair], lambda: f64) -> Result<f64> {
    nonempty(pairs, "orpo")?;
    let mut total = 0.0;
    for p in pairs {
        let sft = objectives::sft_loss(&policy.token_logprobs(p.target, p.chosen_length)?)?;
        let or = objectives::odds_ratio_loss(
            policy.response_logprob(p.target, p.chosen_length)?,
            policy.response_logprob(p.target, p.rejected_length)?,
        )?;
        total += objectives::orpo_loss(sft, or, lambda);
    }
    Ok(total / pairs.len() as f64)
}

pub fn orpo_loss_grad(policy: &ToyPolicy, pairs: &[ToyPair], lambda: f64) -> Result<LossGrad> {
    nonempty(pairs, "orpo")?;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let mut loss = 0.0;
    for p in pairs {
        let tokens = policy.token_logprobs(p.target, p.chosen_length)?;
        let sft = -tokens.iter().sum::<f64>() / tokens.len() as f64;
        let d_sft = objectives::sft_loss_token_grad(tokens.len(), Reduction::Mean);
        policy.accumulate_logprob_grad(p.target, p.chosen_length, d_sft / n, &mut grad);
        let mut or = 0.0;
        if lambda != 0.0 {
            let g = odds_ratio_loss_grad(
                policy.response_logprob(p.target, p.chosen_length)?,
                policy.response_logprob(p.target, p.rejected_length)?,
            )?;
            or = g.loss;
            policy.accumulate_logprob_grad(p.target, p.chosen_length, lambda * g.d_chosen / n, &mut grad);
            policy.accumulate_logprob_grad(p.target, p.rejected_length, lambda * g.d_rejected / n, &mut grad);
        }
        loss += objectives::orpo_loss(sft, or, lambda);
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Exact KL penalty for one target row, summed over every non-terminal state.
pub fn row_kl(policy: &ToyPolicy, reference: &ToyPolicy, target: usize, direction: KlDirection) -> Result<f64> {
    same_shape(policy, reference)?;
    policy.check_target(target)?;
    let mut total = 0.0;
    for s in 0..policy.max_len() {
        total += kl_penalty(&reference.step_probs(target, s), &policy.step_probs(target, s), direction)?;
    }
    Ok(total)
}

fn accumulate_row_kl_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    target: usize,
    direction: KlDirection,
    scale: f64,
    grad: &mut [f64],
) {
    for s in 0..policy.max_len() {
        let p = policy.step_probs(target, s);
        let q = reference.step_probs(target, s);
        let i = policy.index(target, s);
        match direction {
            // ∂ KL[q, p] / ∂θ_j = p_j − q_j
            KlDirection::ReferenceToPolicy => {
                for j in 0..2 {
                    grad[i + j] += scale * (p[j] - q[j]);
                }
            }
            // ∂ KL[p, q] / ∂θ_j = p_j (ln(p_j / q_j) − KL[p, q])
            KlDirection::PolicyToReference => {
                let terms: Vec<f64> = (0..2).map(|j| if p[j] > 0.0 { (p[j] / q[j]).ln() } else { 0.0 }).collect();
                let kl: f64 = (0..2).map(|j| p[j] * terms[j]).sum();
                for j in 0..2 {
                    grad[i + j] += scale * p[j] * (terms[j] - kl);
                }
            }
        }
    }
}

/// −mean clipped surrogate + β · mean row KL over the rollouts' targets.
pub fn ppo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    rollouts: &[Rollout],
    hyper: &HyperParams,
    direction: KlDirection,
) -> Result<f64> {
    nonempty(rollouts, "ppo")?;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for r in rollouts {
        let ratio = (policy.response_logprob(r.target, r.length)? - r.old_logprob).exp();
        surrogate += clipped_surrogate(ratio, r.advantage, hyper.clip_epsilon);
        kl += row_kl(policy, reference, r.target, direction)?;
    }
    let n = rollouts.len() as f64;
    Ok(-surrogate / n + hyper.beta * kl / n)
}

pub fn ppo_loss_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    rollouts: &[Rollout],
    hyper: &HyperParams,
    direction: KlDirection,
) -> Result<LossGrad> {
    nonempty(rollouts, "ppo")?;
    same_shape(policy, reference)?;
    let n = rollouts.len() as f64;
    let mut grad = vec![0.0; policy.logits().len()];
    let mut loss = 0.0;
    for r in rollouts {
        let ratio = (policy.response_logprob(r.target, r.length)? - r.old_logprob).exp();
        loss -= clipped_surrogate(ratio, r.advantage, hyper.clip_epsilon);
        // d ratio / d logp = ratio
        let d = -clipped_surrogate_grad(ratio, r.advantage, hyper.clip_epsilon) * ratio;
        if d != 0.0 {
            policy.accumulate_logprob_grad(r.target, r.length, d / n, &mut grad);
        }
        loss += hyper.beta * row_kl(policy, reference, r.target, direction)?;
        accumulate_row_kl_grad(policy, reference, r.target, direction, hyper.beta / n, &mut grad);
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// What to differentiate in [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub enum GradCheckCase<'a> {
    Sft(&'a [SftSample]),
    Dpo { reference: &'a ToyPolicy, pairs: &'a [ToyPair], beta: f64 },
    Orpo { pairs: &'a [ToyPair], lambda: f64 },
    Ppo { reference: &'a ToyPolicy, rollouts: &'a [Rollout], hyper: HyperParams, direction: KlDirection },
}

impl GradCheckCase<'_> {
    fn value(&self, policy: &ToyPolicy) -> Result<f64> {
        match *self {
            GradCheckCase::Sft(samples) => sft_loss(policy, samples),
            GradCheckCase::Dpo { reference, pairs, beta } => dpo_loss(policy, reference, pairs, beta),
            GradCheckCase::Orpo { pairs, lambda } => orpo_loss(policy, pairs, lambda),
            GradCheckCase::Ppo { reference, rollouts, ref hyper, direction } => {
                ppo_loss(policy, reference, rollouts, hyper, direction)
            }
        }
    }

    fn value_and_grad(&self, policy: &ToyPolicy) -> Result<LossGrad> {
        match *self {
            GradCheckCase::Sft(samples) => sft_loss_grad(policy, samples),
            GradCheckCase::Dpo { reference, pairs, beta } => dpo_loss_grad(policy, reference, pairs, beta),
            GradCheckCase::Orpo { pairs, lambda } => orpo_loss_grad(policy, pairs, lambda),
            GradCheckCase::Ppo { reference, rollouts, ref hyper, direction } => {
                ppo_loss_grad(policy, reference, rollouts, hyper, direction)
            }
        }
    }

    fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = match *self {
            GradCheckCase::Sft(s) => s.iter().map(|s| s.target).collect(),
            GradCheckCase::Dpo { pairs, .. } | GradCheckCase::Orpo { pairs, .. } => {
                pairs.iter().map(|p| p.target).collect()
            }
            GradCheckCase::Ppo { rollouts, .. } => rollouts.iter().map(|r| r.target).collect(),
        };
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Step used for the central differences in [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Largest discrepancy between the analytic gradient and central differences
/// over every logit in the rows the case touches, measured as
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(policy: &ToyPolicy, case: GradCheckCase<'_>) -> Result<f64> {
    let analytic = case.value_and_grad(policy)?;
    let value = case.value(policy)?;
    if (value - analytic.loss).abs() > 1e-9 * value.abs().max(1.0) {
        return Err(domain(format!("loss routes disagree: {value} vs {}", analytic.loss)));
    }
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for target in case.targets() {
        let start = policy.index(target, 0);
        for k in start..start + 2 * (policy.max_len() + 1) {
            let x = policy.logits()[k];
            probe.logits_mut()[k] = x + GRAD_CHECK_STEP;
            let up = case.value(&probe)?;
            probe.logits_mut()[k] = x - GRAD_CHECK_STEP;
            let down = case.value(&probe)?;
            probe.logits_mut()[k] = x;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.grad[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
