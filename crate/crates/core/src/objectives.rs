//! Reward and training objectives over log-probabilities.
//!
//! Every loss here comes with an analytic gradient with respect to the policy
//! log-probabilities it consumes, so that callers holding a differentiable
//! policy can chain through them. All sigmoid and odds computations stay in
//! log space.
//!
//! The length reward is the *negated* squared deviation, so that maximizing
//! reward minimizes the distance to the target.

use crate::error::{domain, Result};

/// Log-probability of one response under the trained policy and under the
/// frozen reference (the SFT checkpoint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLogProbs {
    pub policy: f64,
    pub reference: f64,
}

impl PolicyLogProbs {
    pub fn new(policy: f64, reference: f64) -> Result<Self> {
        for (name, v) in [("policy", policy), ("reference", reference)] {
            if !(v.is_finite() && v <= 0.0) {
                return Err(domain(format!("{name} log-probability must be finite and <= 0, got {v}")));
            }
        }
        Ok(Self { policy, reference })
    }

    /// log π(y|x) − log π_ref(y|x)
    pub fn log_ratio(&self) -> f64 {
        self.policy - self.reference
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceLogProbs {
    pub chosen: PolicyLogProbs,
    pub rejected: PolicyLogProbs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// KL / DPO temperature.
    pub beta: f64,
    /// Weight of the odds-ratio term in ORPO.
    pub lambda: f64,
    /// PPO ratio clipping.
    pub clip_epsilon: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(domain(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(domain(format!("clip epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { beta: 0.1, lambda: 1.0, clip_epsilon: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RewardValue(pub f64);

impl RewardValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_target(target: f64) -> Result<()> {
    if !(target.is_finite() && target > 0.0) {
        return Err(domain(format!("target must be finite and > 0, got {target}")));
    }
    Ok(())
}

/// −(actual − target)²
pub fn length_reward(actual: f64, target: f64) -> Result<RewardValue> {
    check_target(target)?;
    if !(actual.is_finite() && actual >= 0.0) {
        return Err(domain(format!("actual length must be finite and >= 0, got {actual}")));
    }
    let d = actual - target;
    Ok(RewardValue(-(d * d)))
}

/// Signed deviation from the target in percent.
pub fn relative_deviation(actual: f64, target: f64) -> Result<f64> {
    check_target(target)?;
    // Scaling before dividing keeps values like -21/200 exact (-10.5).
    Ok((actual - target) * 100.0 / target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Negative mean log-likelihood of the tokens.
pub fn sft_loss(token_logprobs: &[f64]) -> Result<f64> {
    sft_loss_with(token_logprobs, Reduction::Mean)
}

pub fn sft_loss_with(token_logprobs: &[f64], reduction: Reduction) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(domain("sft loss over an empty token sequence"));
    }
    if let Some(bad) = token_logprobs.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
        return Err(domain(format!("token log-probability must be finite and <= 0, got {bad}")));
    }
    let total: f64 = -token_logprobs.iter().sum::<f64>();
    Ok(match reduction {
        Reduction::Mean => total / token_logprobs.len() as f64,
        Reduction::Sum => total,
    })
}

/// ∂ sft_loss / ∂ logp_i, identical for every token.
pub fn sft_loss_token_grad(n_tokens: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => -1.0 / n_tokens as f64,
        Reduction::Sum => -1.0,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// log(1 − exp(a)) for a < 0.
fn log1m_exp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Loss value and its partials with respect to the chosen and rejected policy
/// log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossGrad {
    pub loss: f64,
    pub d_chosen: f64,
    pub d_rejected: f64,
}

/// −log σ(β · [(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))])
pub fn dpo_loss(p: &PreferenceLogProbs, beta: f64) -> f64 {
    -log_sigmoid(beta * (p.chosen.log_ratio() - p.rejected.log_ratio()))
}

pub fn dpo_loss_grad(p: &PreferenceLogProbs, beta: f64) -> PairLossGrad {
    let z = beta * (p.chosen.log_ratio() - p.rejected.log_ratio());
    // d/dz −log σ(z) = −σ(−z)
    let dz = -sigmoid(-z);
    PairLossGrad { loss: -log_sigmoid(z), d_chosen: beta * dz, d_rejected: -beta * dz }
}

/// log(p / (1 − p)) given log p.
pub fn log_odds(logp: f64) -> Result<f64> {
    if logp.is_nan() || logp >= 0.0 {
        return Err(domain(format!("log-odds needs log p < 0, got {logp}")));
    }
    Ok(logp - log1m_exp(logp))
}

/// d log_odds / d logp = 1 / (1 − p)
pub fn log_odds_grad(logp: f64) -> Result<f64> {
    if logp.is_nan() || logp >= 0.0 {
        return Err(domain(format!("log-odds needs log p < 0, got {logp}")));
    }
    Ok(1.0 / -logp.exp_m1())
}

/// −log σ(log odds(y_w) − log odds(y_l))
pub fn odds_ratio_loss(logp_w: f64, logp_l: f64) -> Result<f64> {
    Ok(-log_sigmoid(log_odds(logp_w)? - log_odds(logp_l)?))
}

pub fn odds_ratio_loss_grad(logp_w: f64, logp_l: f64) -> Result<PairLossGrad> {
    let z = log_odds(logp_w)? - log_odds(logp_l)?;
    let dz = -sigmoid(-z);
    Ok(PairLossGrad {
        loss: -log_sigmoid(z),
        d_chosen: dz * log_odds_grad(logp_w)?,
        d_rejected: -dz * log_odds_grad(logp_l)?,
    })
}

/// sft + λ · odds-ratio term
pub fn orpo_loss(sft: f64, or_loss: f64, lambda: f64) -> f64 {
    sft + lambda * or_loss
}

/// Σ p_i ln(p_i / q_i), with 0 · ln 0 = 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(domain(format!("distributions of different or zero length ({} vs {})", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain(format!("{name} has a negative or non-finite entry")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(domain(format!("{name} sums to {s}, not 1")));
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(domain("support violation: p > 0 where q = 0"));
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negatives when p ≈ q.
    Ok(total.max(0.0))
}

/// Which way round the KL penalty is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// KL[π_ref, π_θ], the order written in the KL-penalized PPO objective.
    #[default]
    ReferenceToPolicy,
    /// KL[π_θ, π_ref], the more common choice in RLHF code.
    PolicyToReference,
}

pub fn kl_penalty(reference: &[f64], policy: &[f64], direction: KlDirection) -> Result<f64> {
    match direction {
        KlDirection::ReferenceToPolicy => kl_divergence(reference, policy),
        KlDirection::PolicyToReference => kl_divergence(policy, reference),
    }
}

/// mean(rewards) − β · mean(kls)
pub fn ppo_objective(rewards: &[RewardValue], kls: &[f64], beta: f64) -> Result<f64> {
    if rewards.is_empty() || rewards.len() != kls.len() {
        return Err(domain(format!(
            "rewards and kls must be nonempty and equally long ({} vs {})",
            rewards.len(),
            kls.len()
        )));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(domain(format!("beta must be > 0, got {beta}")));
    }
    if let Some(k) = kls.iter().find(|k| k.is_nan() || **k < 0.0) {
        return Err(domain(format!("kl terms must be >= 0, got {k}")));
    }
    let n = rewards.len() as f64;
    let mean_reward = rewards.iter().map(|r| r.0).sum::<f64>() / n;
    let mean_kl = kls.iter().sum::<f64>() / n;
    Ok(mean_reward - beta * mean_kl)
}

/// min(r · A, clamp(r, 1 − ε, 1 + ε) · A)
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// ∂ clipped_surrogate / ∂ ratio. Zero whenever the clipped branch is the
/// active one.
pub fn clipped_surrogate_grad(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn lp(policy: f64, reference: f64) -> PolicyLogProbs {
        PolicyLogProbs::new(policy, reference).unwrap()
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn reward_examples() {
        assert_eq!(length_reward(100.0, 100.0).unwrap().value(), 0.0);
        assert_eq!(length_reward(105.0, 100.0).unwrap().value(), -25.0);
        assert_eq!(length_reward(74.0, 10.0).unwrap().value(), -4096.0);
        assert!(length_reward(5.0, 0.0).is_err());
        assert!(length_reward(5.0, -1.0).is_err());
        assert!(length_reward(-1.0, 10.0).is_err());
    }

    #[test]
    fn relative_deviation_examples() {
        assert_eq!(relative_deviation(105.0, 100.0).unwrap(), 5.0);
        assert_eq!(relative_deviation(74.0, 10.0).unwrap(), 640.0);
        assert_eq!(relative_deviation(245.0, 250.0).unwrap(), -2.0);
        assert_eq!(relative_deviation(179.0, 200.0).unwrap(), -10.5);
        assert!(relative_deviation(1.0, 0.0).is_err());
    }

    #[test]
    fn sft_examples() {
        assert_eq!(sft_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((sft_loss(&[0.5f64.ln()]).unwrap() - LN_2).abs() < 1e-15);
        let v = sft_loss(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((v - 1.5 * LN_2).abs() < 1e-15);
        assert!((v - 1.039721).abs() < 1e-6);
        assert!((sft_loss_with(&[0.5f64.ln(), 0.25f64.ln()], Reduction::Sum).unwrap() - 3.0 * LN_2).abs() < 1e-15);
        assert!(sft_loss(&[]).is_err());
        assert!(sft_loss(&[0.1]).is_err());
    }

    #[test]
    fn dpo_examples() {
        let same = PreferenceLogProbs { chosen: lp(-3.0, -3.0), rejected: lp(-1.5, -1.5) };
        assert!((dpo_loss(&same, 0.1) - LN_2).abs() < 1e-12);

        // β=1, Δw=ln 2, Δl=0 → −ln σ(ln 2) = ln(3/2)
        let p = PreferenceLogProbs { chosen: lp(-2.0 + LN_2, -2.0), rejected: lp(-1.0, -1.0) };
        let v = dpo_loss(&p, 1.0);
        assert!((v - 1.5f64.ln()).abs() < 1e-12);
        assert!((v - 0.405465).abs() < 1e-6);

        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 10.0, 100.0, 700.0] {
            let p = PreferenceLogProbs { chosen: lp(-1.0, -1.0 - margin), rejected: lp(-1.0, -1.0) };
            let v = dpo_loss(&p, 1.0);
            assert!(v < prev && v >= 0.0 && v.is_finite());
            prev = v;
        }
        assert!(prev < 1e-200);
    }

    #[test]
    fn log_odds_examples() {
        assert!(log_odds(0.5f64.ln()).unwrap().abs() < 1e-15);
        assert!((log_odds(0.75f64.ln()).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((log_odds(0.9f64.ln()).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!(log_odds(0.0).is_err());
        assert!(log_odds(0.1).is_err());
        assert!(log_odds(-1e-12).unwrap().is_finite());
        assert!((log_odds(-700.0).unwrap() - -700.0).abs() < 1e-12);
    }

    #[test]
    fn odds_ratio_examples() {
        assert!((odds_ratio_loss(-0.3, -0.3).unwrap() - LN_2).abs() < 1e-12);
        let v = odds_ratio_loss(0.75f64.ln(), 0.5f64.ln()).unwrap();
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v - 0.287682).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for w in [-5.0, -2.0, -1.0, -0.5, -0.1, -1e-3] {
            let v = odds_ratio_loss(w, -1.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn orpo_examples() {
        assert_eq!(orpo_loss(1.0, 5.0, 0.0), 1.0);
        assert_eq!(orpo_loss(1.0, 0.5, 1.0), 1.5);
        assert!((orpo_loss(0.0, LN_2, 2.0) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        let v = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((v - 0.130812).abs() < 1e-6);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[0.5]).is_err());
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        // argument order is respected
        let a = [0.9, 0.1];
        let b = [0.5, 0.5];
        assert_eq!(kl_penalty(&a, &b, KlDirection::ReferenceToPolicy).unwrap(), kl_divergence(&a, &b).unwrap());
        assert_eq!(kl_penalty(&a, &b, KlDirection::PolicyToReference).unwrap(), kl_divergence(&b, &a).unwrap());
    }

    #[test]
    fn ppo_objective_examples() {
        assert_eq!(ppo_objective(&[RewardValue(0.0); 2], &[0.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(ppo_objective(&[RewardValue(-25.0)], &[0.5], 2.0).unwrap(), -26.0);
        let r = [RewardValue(-1.0), RewardValue(-3.0)];
        let k = [0.1, 0.3];
        let mut prev = f64::INFINITY;
        for beta in [0.1, 1.0, 10.0, 1e3, 1e6] {
            let v = ppo_objective(&r, &k, beta).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(ppo_objective(&[], &[], 1.0).is_err());
        assert!(ppo_objective(&[RewardValue(0.0)], &[-0.1], 1.0).is_err());
    }

    #[test]
    fn clipped_surrogate_examples() {
        for a in [-3.0, -0.5, 0.0, 2.0] {
            assert_eq!(clipped_surrogate(1.0, a, 0.2), a);
        }
        assert!((clipped_surrogate(2.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - -0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate_grad(2.0, 1.0, 0.2), 0.0);
        assert_eq!(clipped_surrogate_grad(0.5, -1.0, 0.2), 0.0);
        assert_eq!(clipped_surrogate_grad(0.5, 1.0, 0.2), 1.0);
    }

    #[test]
    fn losses_are_finite_at_extremes() {
        for &w in &[-1e-12, -700.0] {
            for &l in &[-1e-12, -700.0] {
                assert!(odds_ratio_loss(w, l).unwrap().is_finite());
                let p = PreferenceLogProbs { chosen: lp(w, l), rejected: lp(l, w) };
                assert!(dpo_loss(&p, 1.0).is_finite());
                assert!(dpo_loss_grad(&p, 1.0).d_chosen.is_finite());
                let g = odds_ratio_loss_grad(w, l).unwrap();
                assert!(g.d_chosen.is_finite() && g.d_rejected.is_finite());
            }
        }
        assert!(sft_loss(&[-1e-12, -700.0]).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn dpo_grad_matches_finite_differences(
            pw in -8.0f64..-0.05, rw in -8.0f64..-0.05,
            pl in -8.0f64..-0.05, rl in -8.0f64..-0.05,
            beta in 0.05f64..2.0,
        ) {
            let p = PreferenceLogProbs { chosen: lp(pw, rw), rejected: lp(pl, rl) };
            let g = dpo_loss_grad(&p, beta);
            prop_assert!((g.loss - dpo_loss(&p, beta)).abs() < 1e-12);
            let fw = |x: f64| dpo_loss(&PreferenceLogProbs { chosen: PolicyLogProbs { policy: x, reference: rw }, ..p }, beta);
            let fl = |x: f64| dpo_loss(&PreferenceLogProbs { rejected: PolicyLogProbs { policy: x, reference: rl }, ..p }, beta);
            prop_assert!(rel_err(g.d_chosen, central_diff(fw, pw)) < 1e-5);
            prop_assert!(rel_err(g.d_rejected, central_diff(fl, pl)) < 1e-5);
        }

        #[test]
        fn odds_ratio_grad_matches_finite_differences(w in -8.0f64..-0.05, l in -8.0f64..-0.05) {
            let g = odds_ratio_loss_grad(w, l).unwrap();
            let fw = |x: f64| odds_ratio_loss(x, l).unwrap();
            let fl = |x: f64| odds_ratio_loss(w, x).unwrap();
            prop_assert!(rel_err(g.d_chosen, central_diff(fw, w)) < 1e-5);
            prop_assert!(rel_err(g.d_rejected, central_diff(fl, l)) < 1e-5);
        }

        #[test]
        fn clipped_surrogate_grad_matches_away_from_kinks(ratio in 0.3f64..2.0, adv in -3.0f64..3.0) {
            let eps = 0.2;
            prop_assume!((ratio - 0.8).abs() > 1e-4 && (ratio - 1.2).abs() > 1e-4);
            let f = |r: f64| clipped_surrogate(r, adv, eps);
            prop_assert!(rel_err(clipped_surrogate_grad(ratio, adv, eps), central_diff(f, ratio)) < 1e-5);
        }

        #[test]
        fn dpo_depends_only_on_log_ratio_difference(
            pw in -8.0f64..-1.0, rw in -8.0f64..-1.0, pl in -8.0f64..-1.0, rl in -8.0f64..-1.0, c in -0.9f64..0.9,
        ) {
            let p = PreferenceLogProbs { chosen: lp(pw, rw), rejected: lp(pl, rl) };
            // shift both log-ratios by c through the policy side
            let q = PreferenceLogProbs { chosen: lp(pw + c, rw), rejected: lp(pl + c, rl) };
            prop_assert!((dpo_loss(&p, 0.5) - dpo_loss(&q, 0.5)).abs() < 1e-12);
        }

        #[test]
        fn dpo_below_ln2_for_positive_margin(
            r in -8.0f64..-1.0, l in -8.0f64..-1.0, m in 1e-3f64..0.9,
        ) {
            let p = PreferenceLogProbs { chosen: lp(r + m, r), rejected: lp(l, l) };
            prop_assert!(dpo_loss(&p, 1.0) < LN_2);
        }

        #[test]
        fn reward_is_symmetric_and_nonpositive(t in 1.0f64..1e4, d in 0.0f64..1.0) {
            let d = d * t;
            let up = length_reward(t + d, t).unwrap().value();
            let down = length_reward(t - d, t).unwrap().value();
            prop_assert!(up <= 0.0);
            prop_assert!((up - down).abs() <= 1e-9 * up.abs().max(1.0));
            prop_assert_eq!(length_reward(t, t).unwrap().value(), 0.0);
        }

        #[test]
        fn log_odds_is_increasing(a in -50.0f64..-1e-6, b in -50.0f64..-1e-6) {
            prop_assume!(a < b);
            prop_assert!(log_odds(a).unwrap() < log_odds(b).unwrap());
        }

        #[test]
        fn gibbs_inequality(raw_p in proptest::collection::vec(0.01f64..1.0, 2..8), seed in 0.01f64..1.0) {
            let sp: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
            let raw_q: Vec<f64> = raw_p.iter().enumerate().map(|(i, v)| (v * (i as f64 + seed)).fract() + 0.01).collect();
            let sq: f64 = raw_q.iter().sum();
            let q: Vec<f64> = raw_q.iter().map(|v| v / sq).collect();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }
    }
}
