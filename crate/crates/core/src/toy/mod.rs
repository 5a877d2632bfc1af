//! A tabular, length-conditioned generator that stands in for a language
//! model so every stage of the SFT → PPO/DPO/ORPO pipeline can be run and
//! checked exactly at desk scale.
//!
//! The policy's outcome space for a target is the finite set of lengths
//! `0..=max_len`, so every expectation below is computed by enumeration
//! rather than sampling.

mod checkpoint;
mod losses;
mod policy;
mod train;

pub use checkpoint::{corpus_digest, sha256_hex, Checkpoint, Stage, CHECKPOINT_FORMAT_VERSION};
pub use losses::{
    dpo_loss, dpo_loss_grad, grad_check, orpo_loss, orpo_loss_grad, ppo_loss, ppo_loss_grad, row_kl, sft_loss,
    sft_loss_grad, GradCheckCase, LossGrad, Rollout, SftSample, ToyPair, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP,
};
pub use policy::{ToyPolicy, FILLER};
pub use train::{select_epoch, train_dpo, train_orpo, train_ppo, train_sft, EpochStats, TrainConfig, TrainRun};

use crate::error::{domain, Result};
use crate::metrics::{measure, LengthRequirement, MeasureConfig};
use crate::objectives::relative_deviation;

/// Expected |relative deviation| in percent when the policy answers a
/// requirement.
///
/// The policy only sees the number in the requirement, so the target row is
/// the target value itself; the response of length `L` is
/// [`ToyPolicy::render`]`(L)` measured under the requirement's metric.
pub fn expected_abs_deviation(
    policy: &ToyPolicy,
    requirement: &LengthRequirement,
    config: &MeasureConfig,
) -> Result<f64> {
    let row = requirement.target();
    if row.fract() != 0.0 || row < 1.0 {
        return Err(domain(format!("toy policy needs a positive integral target, got {row}")));
    }
    let row = row as usize;
    policy.check_target(row)?;
    let dist = policy.length_distribution(row)?;
    let mut total = 0.0;
    for (len, p) in dist.into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let actual = measure(&ToyPolicy::render(len), requirement.kind(), config)?;
        total += p * relative_deviation(actual, requirement.target())?.abs();
    }
    Ok(total)
}

/// Mean over `targets` of the expected |relative deviation| in percent of the
/// generated length from the target.
pub fn mean_abs_length_deviation(policy: &ToyPolicy, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(domain("no targets to evaluate"));
    }
    let mut total = 0.0;
    for &t in targets {
        let tf = t as f64;
        total += policy.expectation(t, |len| ((len as f64 - tf) * 100.0 / tf).abs())?;
    }
    Ok(total / targets.len() as f64)
}
