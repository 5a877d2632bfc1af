//! Corpus ingestion, prompt augmentation and preference-pair construction.
//!
//! A prompt is augmented by appending one sentence that states the length
//! requirement, with the target set to the measured length of the response
//! that accompanies it. Preference pairs rank candidate responses by the
//! length reward against a fixed requirement.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{domain, Error, Result};
use crate::metrics::{measure, LengthMetricKind, LengthRequirement, MeasureConfig, Resolution};
use crate::objectives::length_reward;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub id: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub base: PromptResponse,
    pub requirement: LengthRequirement,
    pub augmented_prompt: String,
}

/// On-disk form of an augmented sample. `prompt` holds the augmented prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedRecord {
    pub id: String,
    pub prompt: String,
    pub response: String,
    #[serde(flatten)]
    pub requirement: LengthRequirement,
}

impl From<&AugmentedSample> for AugmentedRecord {
    fn from(s: &AugmentedSample) -> Self {
        Self {
            id: s.base.id.clone(),
            prompt: s.augmented_prompt.clone(),
            response: s.base.response.clone(),
            requirement: s.requirement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    #[serde(flatten)]
    pub requirement: LengthRequirement,
    pub chosen: String,
    pub rejected: String,
    /// Chosen and rejected earn the same reward; the earlier candidate won.
    pub tied: bool,
}

pub const LEN_PLACEHOLDER: &str = "{LEN}";

/// One requirement sentence per metric, each with a single `{LEN}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    patterns: BTreeMap<LengthMetricKind, String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let patterns = [
            (LengthMetricKind::Characters, "characters"),
            (LengthMetricKind::Letters, "letters"),
            (LengthMetricKind::SpeechSeconds, "seconds of speech"),
            (LengthMetricKind::PrintCm, "centimeters of printed text"),
            (LengthMetricKind::Words, "words"),
        ]
        .into_iter()
        .map(|(k, unit)| (k, format!("Generate precisely {{LEN}} {unit} in your response.")))
        .collect();
        Self { patterns }
    }
}

impl PromptTemplate {
    pub fn with_pattern(mut self, kind: LengthMetricKind, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(LEN_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "template for {kind} must contain exactly one {LEN_PLACEHOLDER}: {pattern:?}"
            )));
        }
        self.patterns.insert(kind, pattern);
        Ok(self)
    }

    pub fn pattern(&self, kind: LengthMetricKind) -> &str {
        &self.patterns[&kind]
    }

    pub fn render(&self, requirement: &LengthRequirement) -> String {
        self.pattern(requirement.kind()).replace(LEN_PLACEHOLDER, &requirement.format_target())
    }

    /// Appends the requirement sentence after a single space.
    pub fn augment_prompt(&self, prompt: &str, requirement: &LengthRequirement) -> String {
        format!("{prompt} {}", self.render(requirement))
    }

    /// Recovers the requirement and the original prompt from an augmented
    /// prompt. When several templates match, the longest one wins.
    pub fn parse(&self, augmented: &str) -> Option<(LengthRequirement, String)> {
        let mut best: Option<(usize, LengthRequirement, String)> = None;
        for (&kind, pattern) in &self.patterns {
            let (prefix, suffix) = pattern.split_once(LEN_PLACEHOLDER)?;
            let Some(rest) = augmented.strip_suffix(suffix) else { continue };
            let (head, number) = if prefix.is_empty() {
                let start = rest
                    .rfind(|c: char| !(c.is_ascii_digit() || c == '.'))
                    .map_or(0, |i| i + rest[i..].chars().next().map_or(1, char::len_utf8));
                (&rest[..start], &rest[start..])
            } else {
                let Some(at) = rest.rfind(prefix) else { continue };
                (&rest[..at], &rest[at + prefix.len()..])
            };
            let Some(target) = parse_target(number, kind.resolution()) else { continue };
            let Ok(req) = LengthRequirement::new(kind, target) else { continue };
            let score = pattern.len();
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                let base = head.strip_suffix(' ').unwrap_or(head).to_string();
                best = Some((score, req, base));
            }
        }
        best.map(|(_, req, base)| (req, base))
    }
}

fn parse_target(text: &str, resolution: Resolution) -> Option<f64> {
    let (int, frac) = match text.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (text, None),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    match (resolution, frac) {
        (Resolution::Integer, None) => {}
        (Resolution::Tenth, Some(f)) if f.len() == 1 && f.bytes().all(|b| b.is_ascii_digit()) => {}
        _ => return None,
    }
    text.parse().ok()
}

/// Outcome of reading a JSONL corpus.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub samples: Vec<PromptResponse>,
    pub skipped: usize,
    pub total: usize,
}

/// Reads `{"id","prompt","response"}` or `{"id","conversation":[...]}` lines.
/// For conversations only the first user turn and the first assistant turn
/// are kept. Lines that do not parse are skipped and counted.
pub fn ingest_jsonl(source: impl BufRead) -> Result<Ingested> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    let mut total = 0;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let lineno = i + 1;
        match parse_record(&line, lineno) {
            Ok(rec) if seen.insert(rec.id.clone()) => samples.push(rec),
            Ok(rec) => {
                log::warn!("line {lineno}: duplicate id `{}`, skipped", rec.id);
                skipped += 1;
            }
            Err(reason) => {
                log::warn!("line {lineno}: {reason}, skipped");
                skipped += 1;
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus { skipped });
    }
    Ok(Ingested { samples, skipped, total })
}

fn turn_text(turn: &Value) -> Option<&str> {
    match turn {
        Value::String(s) => Some(s),
        Value::Object(o) => o.get("content").and_then(Value::as_str),
        _ => None,
    }
}

fn parse_record(line: &str, lineno: usize) -> std::result::Result<PromptResponse, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON ({e})"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        None => lineno.to_string(),
        Some(_) => return Err("id must be a nonempty string or a number".into()),
    };
    let (prompt, response) = if let Some(conv) = obj.get("conversation") {
        let turns = conv.as_array().ok_or("conversation is not an array")?;
        if turns.len() < 2 {
            return Err("conversation has fewer than two turns".into());
        }
        let q = turn_text(&turns[0]).ok_or("first turn is not text")?;
        let a = turn_text(&turns[1]).ok_or("second turn is not text")?;
        (q, a)
    } else {
        let q = obj.get("prompt").and_then(Value::as_str).ok_or("missing string field `prompt`")?;
        let a = obj.get("response").and_then(Value::as_str).ok_or("missing string field `response`")?;
        (q, a)
    };
    if prompt.is_empty() {
        return Err("empty prompt".into());
    }
    Ok(PromptResponse { id, prompt: prompt.to_string(), response: response.to_string() })
}

/// Sets the requirement to the response's own length under `kind`, rounded to
/// the metric's resolution, and appends the requirement sentence.
pub fn augment(
    sample: &PromptResponse,
    kind: LengthMetricKind,
    template: &PromptTemplate,
    config: &MeasureConfig,
) -> Result<AugmentedSample> {
    if kind.held_out() {
        return Err(domain(format!("metric `{kind}` is held out and cannot be used for training data")));
    }
    let degenerate = |reason: &str| Error::DegenerateSample { id: sample.id.clone(), reason: reason.into() };
    if sample.response.is_empty() {
        return Err(degenerate("empty response"));
    }
    let requirement = LengthRequirement::rounded(kind, measure(&sample.response, kind, config)?)?;
    if requirement.target() == 0.0 {
        return Err(degenerate(&format!("response measures 0 under {kind}")));
    }
    Ok(AugmentedSample {
        base: sample.clone(),
        augmented_prompt: template.augment_prompt(&sample.prompt, &requirement),
        requirement,
    })
}

/// The candidate with the highest length reward becomes `chosen`; every other
/// candidate is paired against it as `rejected`. Ties go to the earlier
/// candidate and are flagged.
pub fn build_preference_pairs(
    id: &str,
    prompt: &str,
    candidates: &[String],
    requirement: &LengthRequirement,
    config: &MeasureConfig,
) -> Result<Vec<PreferencePair>> {
    if candidates.len() < 2 {
        return Err(domain(format!("need at least 2 candidates, got {}", candidates.len())));
    }
    let rewards = candidates
        .iter()
        .map(|c| Ok(length_reward(measure(c, requirement.kind(), config)?, requirement.target())?.value()))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate().skip(1) {
        if r > rewards[best] {
            best = i;
        }
    }
    Ok(candidates
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(i, rejected)| PreferencePair {
            id: format!("{id}-{i}"),
            prompt: prompt.to_string(),
            requirement: *requirement,
            chosen: candidates[best].clone(),
            rejected: rejected.clone(),
            tied: rewards[i] == rewards[best],
        })
        .collect())
}

/// Seeded synthetic corpus whose response lengths (in characters) are uniform
/// over `[min_len, max_len]`.
pub fn synthesize_toy_corpus(
    seed: u64,
    n: usize,
    (min_len, max_len): (usize, usize),
    alphabet: &str,
) -> Result<Vec<PromptResponse>> {
    if n == 0 {
        return Err(domain("corpus size must be > 0"));
    }
    if min_len == 0 || min_len > max_len {
        return Err(domain(format!("invalid length range [{min_len}, {max_len}]")));
    }
    let symbols: Vec<char> = alphabet.chars().collect();
    if symbols.is_empty() {
        return Err(domain("alphabet is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((1..=n)
        .map(|i| {
            let len = rng.gen_range(min_len..=max_len);
            let response: String = (0..len).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect();
            PromptResponse { id: format!("toy-{i}"), prompt: format!("Write a passage for request {i}."), response }
        })
        .collect())
}

/// Seeded train/eval/test split. Part sizes use largest-remainder rounding,
/// so each is within one sample of its exact share. Items keep their corpus
/// order inside each part.
pub fn split<T: Clone>(corpus: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if corpus.len() < 3 {
        return Err(domain(format!("cannot split a corpus of {} samples three ways", corpus.len())));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(domain(format!("split fractions must be positive: {fractions:?}")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(domain(format!("split fractions must sum to 1: {fractions:?}")));
    }
    let n = corpus.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = sizes.iter().sum();
    for &k in order.iter().take(n - assigned) {
        sizes[k] += 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for size in sizes {
        let mut chunk = idx[start..start + size].to_vec();
        chunk.sort_unstable();
        parts.push(chunk.into_iter().map(|i| corpus[i].clone()).collect::<Vec<T>>());
        start += size;
    }
    let test = parts.pop().unwrap();
    let eval = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, eval, test))
}
