use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Text the toy policy "writes": a response of length `n` is the first `n`
/// characters of this sentence repeated. ASCII, so characters equal bytes.
pub const FILLER: &str = "the quick brown fox jumps over the lazy dog ";

const CONTINUE: usize = 0;
const STOP: usize = 1;

/// A length-conditioned stop/continue chain.
///
/// For every integral target `t` in `1..=max_target` and every emitted length
/// `s` in `0..=max_len` the table holds a pair of logits (continue, stop).
/// Generation starts at `s = 0` and at each step either stops, producing a
/// response of length `s`, or emits one more unit. At `s = max_len` stopping
/// is forced and the logits stored there are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct ToyPolicy {
    max_target: usize,
    max_len: usize,
    seed: u64,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    max_target: usize,
    max_len: usize,
    seed: u64,
    logits: Vec<f64>,
}

impl From<ToyPolicy> for PolicyRepr {
    fn from(p: ToyPolicy) -> Self {
        Self { max_target: p.max_target, max_len: p.max_len, seed: p.seed, logits: p.logits }
    }
}

impl TryFrom<PolicyRepr> for ToyPolicy {
    type Error = crate::error::Error;

    fn try_from(r: PolicyRepr) -> Result<Self> {
        ToyPolicy::from_logits(r.max_target, r.max_len, r.seed, r.logits)
    }
}

impl ToyPolicy {
    /// Logits drawn uniformly from ±0.05 with a seeded generator; the table
    /// extends to twice the largest target.
    pub fn new(max_target: usize, seed: u64) -> Result<Self> {
        if max_target == 0 {
            return Err(domain("max_target must be >= 1"));
        }
        let max_len = 2 * max_target;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..Self::param_count(max_target, max_len)).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Ok(Self { max_target, max_len, seed, logits })
    }

    pub fn from_logits(max_target: usize, max_len: usize, seed: u64, logits: Vec<f64>) -> Result<Self> {
        if max_target == 0 {
            return Err(domain("max_target must be >= 1"));
        }
        if max_len < 2 * max_target {
            return Err(domain(format!("max_len {max_len} must be at least twice max_target {max_target}")));
        }
        let expected = Self::param_count(max_target, max_len);
        if logits.len() != expected {
            return Err(domain(format!("expected {expected} logits, got {}", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(domain("logits must be finite"));
        }
        Ok(Self { max_target, max_len, seed, logits })
    }

    fn param_count(max_target: usize, max_len: usize) -> usize {
        max_target * (max_len + 1) * 2
    }

    pub fn max_target(&self) -> usize {
        self.max_target
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Index of the continue logit at `(target, s)`; the stop logit follows it.
    pub fn index(&self, target: usize, s: usize) -> usize {
        ((target - 1) * (self.max_len + 1) + s) * 2
    }

    pub fn check_target(&self, target: usize) -> Result<()> {
        if target == 0 || target > self.max_target {
            return Err(domain(format!("target {target} outside 1..={}", self.max_target)));
        }
        Ok(())
    }

    fn check_length(&self, length: usize) -> Result<()> {
        if length > self.max_len {
            return Err(domain(format!("length {length} exceeds max_len {}", self.max_len)));
        }
        Ok(())
    }

    /// (continue, stop) probabilities at a state.
    pub fn step_probs(&self, target: usize, s: usize) -> [f64; 2] {
        if s == self.max_len {
            return [0.0, 1.0];
        }
        let i = self.index(target, s);
        let (c, st) = (self.logits[i + CONTINUE], self.logits[i + STOP]);
        let m = c.max(st);
        let (ec, es) = ((c - m).exp(), (st - m).exp());
        [ec / (ec + es), es / (ec + es)]
    }

    /// (log continue, log stop) at a state.
    pub fn step_logprobs(&self, target: usize, s: usize) -> [f64; 2] {
        if s == self.max_len {
            return [f64::NEG_INFINITY, 0.0];
        }
        let i = self.index(target, s);
        let (c, st) = (self.logits[i + CONTINUE], self.logits[i + STOP]);
        let m = c.max(st);
        let lse = m + ((c - m).exp() + (st - m).exp()).ln();
        [c - lse, st - lse]
    }

    /// Per-decision log-probabilities along the path to `length`: `length`
    /// continues followed by one stop.
    pub fn token_logprobs(&self, target: usize, length: usize) -> Result<Vec<f64>> {
        self.check_target(target)?;
        self.check_length(length)?;
        let mut out: Vec<f64> = (0..length).map(|s| self.step_logprobs(target, s)[CONTINUE]).collect();
        out.push(self.step_logprobs(target, length)[STOP]);
        Ok(out)
    }

    /// log π(length | target)
    pub fn response_logprob(&self, target: usize, length: usize) -> Result<f64> {
        Ok(self.token_logprobs(target, length)?.iter().sum())
    }

    /// Adds `scale · ∂ response_logprob(target, length) / ∂ logits` to `grad`.
    pub fn accumulate_logprob_grad(&self, target: usize, length: usize, scale: f64, grad: &mut [f64]) {
        for s in 0..length {
            let [pc, ps] = self.step_probs(target, s);
            let i = self.index(target, s);
            grad[i + CONTINUE] += scale * (1.0 - pc);
            grad[i + STOP] -= scale * ps;
        }
        if length < self.max_len {
            let [pc, ps] = self.step_probs(target, length);
            let i = self.index(target, length);
            grad[i + CONTINUE] -= scale * pc;
            grad[i + STOP] += scale * (1.0 - ps);
        }
    }

    /// Exact distribution over response lengths `0..=max_len`.
    pub fn length_distribution(&self, target: usize) -> Result<Vec<f64>> {
        self.check_target(target)?;
        let mut survive = 1.0;
        let mut dist = Vec::with_capacity(self.max_len + 1);
        for s in 0..=self.max_len {
            let [pc, ps] = self.step_probs(target, s);
            dist.push(survive * ps);
            survive *= pc;
        }
        Ok(dist)
    }

    pub fn sample<R: Rng + ?Sized>(&self, target: usize, rng: &mut R) -> Result<usize> {
        self.check_target(target)?;
        for s in 0..self.max_len {
            let [_, ps] = self.step_probs(target, s);
            if rng.gen::<f64>() < ps {
                return Ok(s);
            }
        }
        Ok(self.max_len)
    }

    /// Expectation of `f(length)` under the exact length distribution.
    pub fn expectation(&self, target: usize, mut f: impl FnMut(usize) -> f64) -> Result<f64> {
        Ok(self
            .length_distribution(target)?
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(len, p)| p * f(len))
            .sum())
    }

    /// The text a response of `length` units stands for.
    pub fn render(length: usize) -> String {
        FILLER.chars().cycle().take(length).collect()
    }
}
