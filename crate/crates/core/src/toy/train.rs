//! Gradient-descent trainers for the toy policy.
//!
//! All trainers are deterministic given `(seed, data, config)`. With
//! `batch_size: None` every epoch is a single full-batch step; otherwise the
//! data is reshuffled each epoch and visited in mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::objectives::{length_reward, ppo_objective, HyperParams, KlDirection};

use super::checkpoint::{corpus_digest, Checkpoint, Stage};
use super::losses::{
    dpo_loss, dpo_loss_grad, orpo_loss, orpo_loss_grad, ppo_loss_grad, row_kl, sft_loss, sft_loss_grad, LossGrad,
    Rollout, SftSample, ToyPair,
};
use super::policy::ToyPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Passes over the data; for PPO, rollout iterations.
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub hyper: HyperParams,
    pub seed: u64,
    pub kl_direction: KlDirection,
    /// PPO: responses sampled per prompt in each iteration.
    pub samples_per_prompt: usize,
    /// PPO: gradient steps taken on each batch of rollouts.
    pub ppo_update_steps: usize,
    /// PPO: divide advantages by the per-prompt reward standard deviation.
    pub normalize_advantages: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 3,
            batch_size: None,
            hyper: HyperParams::default(),
            seed: 0,
            kl_direction: KlDirection::default(),
            samples_per_prompt: 8,
            ppo_update_steps: 4,
            normalize_advantages: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(domain(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(domain("epochs must be > 0"));
        }
        if self.batch_size == Some(0) {
            return Err(domain("batch size must be > 0"));
        }
        if self.samples_per_prompt < 2 {
            return Err(domain("PPO needs at least 2 samples per prompt for a baseline"));
        }
        if self.ppo_update_steps == 0 {
            return Err(domain("PPO update steps must be > 0"));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Training loss over the whole data after the epoch. For PPO, the
    /// clipped-surrogate loss of the last update step.
    pub loss: f64,
    /// PPO only: sample estimate of mean reward − β · mean KL at rollout time.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Loss of the input policy on the training data.
    pub initial_loss: f64,
    pub history: Vec<EpochStats>,
    /// One per epoch, in order.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainRun {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least one epoch")
    }
}

/// Earliest epoch (0-based index) whose evaluation deviation is within 5%
/// (relative) of the best one.
pub fn select_epoch(deviations: &[f64]) -> Option<usize> {
    let best = deviations.iter().copied().filter(|d| d.is_finite()).reduce(f64::min)?;
    deviations.iter().position(|&d| d <= best * 1.05)
}

fn finite_grad(lg: &LossGrad) -> bool {
    lg.loss.is_finite() && lg.grad.iter().all(|g| g.is_finite())
}

fn apply(policy: &mut ToyPolicy, grad: &[f64], lr: f64) {
    for (w, g) in policy.logits_mut().iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

fn diverged(epoch: usize, reason: impl Into<String>, last_good: &Checkpoint) -> Error {
    Error::Diverged { epoch, reason: reason.into(), last_good: Box::new(last_good.clone()) }
}

fn batches<T: Copy>(items: &[T], batch_size: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    match batch_size {
        Some(b) if b < items.len() => {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(rng);
            order.chunks(b).map(|c| c.iter().map(|&i| items[i]).collect()).collect()
        }
        _ => vec![items.to_vec()],
    }
}

fn descend<T: Copy + Serialize>(
    mut policy: ToyPolicy,
    items: &[T],
    config: &TrainConfig,
    stage: Stage,
    value: impl Fn(&ToyPolicy, &[T]) -> Result<f64>,
    value_and_grad: impl Fn(&ToyPolicy, &[T]) -> Result<LossGrad>,
) -> Result<TrainRun> {
    config.validate()?;
    let digest = corpus_digest(items)?;
    let initial_loss = value(&policy, items)?;
    let mut last_good = Checkpoint::new(Stage::Init, 0, digest.clone(), policy.clone());
    if !initial_loss.is_finite() {
        return Err(diverged(0, "initial loss is not finite", &last_good));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        for batch in batches(items, config.batch_size, &mut rng) {
            let lg = value_and_grad(&policy, &batch)?;
            if !finite_grad(&lg) {
                return Err(diverged(epoch, "non-finite loss or gradient", &last_good));
            }
            apply(&mut policy, &lg.grad, config.learning_rate);
        }
        if policy.logits().iter().any(|w| !w.is_finite()) {
            return Err(diverged(epoch, "non-finite parameters", &last_good));
        }
        let loss = value(&policy, items)?;
        if !loss.is_finite() {
            return Err(diverged(epoch, format!("training loss became {loss}"), &last_good));
        }
        history.push(EpochStats { epoch, loss, objective: None });
        last_good = Checkpoint::new(stage, epoch, digest.clone(), policy.clone());
        checkpoints.push(last_good.clone());
    }
    Ok(TrainRun { initial_loss, history, checkpoints })
}

fn check_lengths(policy: &ToyPolicy, target: usize, lengths: &[usize]) -> Result<()> {
    policy.check_target(target)?;
    if let Some(&l) = lengths.iter().find(|&&l| l > policy.max_len()) {
        return Err(domain(format!("length {l} exceeds the policy's max_len {}", policy.max_len())));
    }
    Ok(())
}

/// Supervised fine-tuning: descends the mean per-token loss of gold lengths.
pub fn train_sft(policy: ToyPolicy, samples: &[SftSample], config: &TrainConfig) -> Result<TrainRun> {
    if samples.is_empty() {
        return Err(domain("empty SFT corpus"));
    }
    for s in samples {
        check_lengths(&policy, s.target, &[s.gold_length])?;
    }
    descend(policy, samples, config, Stage::Sft, sft_loss, sft_loss_grad)
}

/// DPO against a frozen reference.
pub fn train_dpo(
    policy: ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[ToyPair],
    config: &TrainConfig,
) -> Result<TrainRun> {
    if pairs.is_empty() {
        return Err(domain("empty preference set"));
    }
    for p in pairs {
        check_lengths(&policy, p.target, &[p.chosen_length, p.rejected_length])?;
    }
    let beta = config.hyper.beta;
    descend(
        policy,
        pairs,
        config,
        Stage::Dpo,
        |pol, batch| dpo_loss(pol, reference, batch, beta),
        |pol, batch| dpo_loss_grad(pol, reference, batch, beta),
    )
}

/// ORPO: SFT on chosen plus λ times the odds-ratio term. No reference.
pub fn train_orpo(policy: ToyPolicy, pairs: &[ToyPair], config: &TrainConfig) -> Result<TrainRun> {
    if pairs.is_empty() {
        return Err(domain("empty preference set"));
    }
    for p in pairs {
        check_lengths(&policy, p.target, &[p.chosen_length, p.rejected_length])?;
    }
    let lambda = config.hyper.lambda;
    descend(
        policy,
        pairs,
        config,
        Stage::Orpo,
        |pol, batch| orpo_loss(pol, batch, lambda),
        |pol, batch| orpo_loss_grad(pol, batch, lambda),
    )
}

/// PPO with the negated-square length reward and an exact per-state KL
/// penalty toward `reference`.
///
/// Each iteration samples `samples_per_prompt` responses per prompt from the
/// current policy, takes the reward minus the prompt's batch mean as the
/// advantage and runs `ppo_update_steps` steps on the clipped surrogate with
/// step size `lr / (1 + lr·β/2)`.
pub fn train_ppo(
    policy: ToyPolicy,
    reference: &ToyPolicy,
    prompts: &[usize],
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(domain("no prompts for PPO"));
    }
    for &t in prompts {
        policy.check_target(t)?;
    }
    if policy.max_target() != reference.max_target() || policy.max_len() != reference.max_len() {
        return Err(domain("policy and reference tables differ in shape"));
    }
    let hyper = config.hyper;
    let lr = config.learning_rate / (1.0 + config.learning_rate * hyper.beta / 2.0);
    let digest = corpus_digest(prompts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = policy;
    let mut last_good = Checkpoint::new(Stage::Init, 0, digest.clone(), policy.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;

    for epoch in 1..=config.epochs {
        let batch: Vec<usize> = match config.batch_size {
            Some(b) if b < prompts.len() => prompts.choose_multiple(&mut rng, b).copied().collect(),
            _ => prompts.to_vec(),
        };
        let mut rollouts = Vec::with_capacity(batch.len() * config.samples_per_prompt);
        let mut rewards = Vec::with_capacity(rollouts.capacity());
        let mut kls = Vec::with_capacity(rollouts.capacity());
        for &target in &batch {
            let row_kl_now = row_kl(&policy, reference, target, config.kl_direction)?;
            let mut group = Vec::with_capacity(config.samples_per_prompt);
            for _ in 0..config.samples_per_prompt {
                let length = policy.sample(target, &mut rng)?;
                let reward = length_reward(length as f64, target as f64)?;
                group.push((length, reward));
                rewards.push(reward);
                kls.push(row_kl_now);
            }
            let n = group.len() as f64;
            let mean = group.iter().map(|(_, r)| r.value()).sum::<f64>() / n;
            let sd = (group.iter().map(|(_, r)| (r.value() - mean).powi(2)).sum::<f64>() / n).sqrt();
            let scale = if config.normalize_advantages && sd > 0.0 { sd } else { 1.0 };
            for (length, reward) in group {
                rollouts.push(Rollout {
                    target,
                    length,
                    old_logprob: policy.response_logprob(target, length)?,
                    advantage: (reward.value() - mean) / scale,
                });
            }
        }
        let objective = ppo_objective(&rewards, &kls, hyper.beta)?;

        let mut loss = f64::NAN;
        for _ in 0..config.ppo_update_steps {
            let lg = ppo_loss_grad(&policy, reference, &rollouts, &hyper, config.kl_direction)?;
            if !finite_grad(&lg) {
                return Err(diverged(epoch, "non-finite PPO loss or gradient", &last_good));
            }
            initial_loss.get_or_insert(lg.loss);
            loss = lg.loss;
            apply(&mut policy, &lg.grad, lr);
        }
        if policy.logits().iter().any(|w| !w.is_finite()) {
            return Err(diverged(epoch, "non-finite parameters", &last_good));
        }
        history.push(EpochStats { epoch, loss, objective: Some(objective) });
        last_good = Checkpoint::new(Stage::Ppo, epoch, digest.clone(), policy.clone());
        checkpoints.push(last_good.clone());
    }
    Ok(TrainRun { initial_loss: initial_loss.unwrap_or(f64::NAN), history, checkpoints })
}
