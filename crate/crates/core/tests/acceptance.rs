//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lenforge::dataset::{
    augment, build_preference_pairs, split, synthesize_toy_corpus, AugmentedRecord, PromptResponse, PromptTemplate,
};
use lenforge::evaluation::{compare, display_pct, evaluate, EvaluateOptions, EvaluationRecord};
use lenforge::io::to_jsonl;
use lenforge::metrics::{LengthMetricKind, LengthRequirement, MeasureConfig};
use lenforge::objectives::{
    dpo_loss, kl_divergence, length_reward, odds_ratio_loss, orpo_loss, relative_deviation, HyperParams, KlDirection,
    PolicyLogProbs, PreferenceLogProbs,
};
use lenforge::toy::{
    self, expected_abs_deviation, grad_check, mean_abs_length_deviation, train_orpo, train_ppo, train_sft,
    GradCheckCase, Rollout, SftSample, ToyPair, ToyPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const IDENTITY_TOL: f64 = 1e-12;
const COMPARISON_TOL: f64 = 0.15;
const GRAD_TOL: f64 = 1e-5;
const NORMALIZATION_TOL: f64 = 1e-9;
const CHI_SQUARE_ALPHA: f64 = 0.001;
const SFT_REDUCTION: f64 = 0.80;
const ORPO_MIN_WINS: usize = 8;
const TV_BOUND: f64 = 0.01;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn req(kind: LengthMetricKind, target: f64) -> LengthRequirement {
    LengthRequirement::new(kind, target).unwrap()
}

fn published_rows() -> Outcome {
    let rows: [(f64, f64, &str); 7] = [
        (10.0, 74.0, "+640%"),
        (50.0, 106.0, "+112%"),
        (100.0, 105.0, "+5%"),
        (150.0, 154.0, "+3%"),
        (200.0, 179.0, "-10%"),
        (250.0, 245.0, "-2%"),
        (300.0, 318.0, "+6%"),
    ];
    let printed = [640.0, 112.0, 5.0, 3.0, -10.0, -2.0, 6.0];
    let mut exact = 0;
    for ((target, actual, shown), want) in rows.iter().zip(printed) {
        let dev = relative_deviation(*actual, *target).map_err(err)?;
        ensure((dev - want).abs() <= 0.5, || format!("target {target}: deviation {dev} too far from printed {want}"))?;
        if dev.round() == want {
            exact += 1;
        }
        ensure(display_pct(dev) == *shown, || format!("target {target}: displayed {} not {shown}", display_pct(dev)))?;
    }
    ensure(exact >= 6, || format!("only {exact} rows match exactly"))?;
    Ok(format!("{exact}/7 rows exact under half-up, 7/7 under half-even display"))
}

fn single(mean: f64) -> lenforge::evaluation::EvaluationReport {
    let record = EvaluationRecord::new("r", req(LengthMetricKind::Characters, 100.0), 100.0 + mean).unwrap();
    evaluate(&[record], &EvaluateOptions::default()).unwrap()
}

fn comparison_figures() -> Outcome {
    let cases =
        [(108.0, 7.61, -92.95), (7.61, 6.05, -20.5), (6.05, 3.12, -48.4), (6.05, 4.64, -23.3), (6.05, 7.16, 18.3)];
    let mut parts = Vec::new();
    for (base, cand, want) in cases {
        let c = compare(&single(base), &single(cand)).map_err(err)?;
        let got = c.per_metric_pct_change[&LengthMetricKind::Characters];
        let overall = c.overall_pct_change.ok_or("missing overall change")?;
        ensure((got - want).abs() <= COMPARISON_TOL && (overall - got).abs() < 1e-12, || {
            format!("{base} -> {cand}: got {got}, want {want}")
        })?;
        parts.push(format!("{got:+.2}"));
    }
    Ok(parts.join(" "))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let lp = -rng.gen_range(0.01..50.0);
        let lr = -rng.gen_range(0.01..50.0);
        let p = PreferenceLogProbs {
            chosen: PolicyLogProbs::new(lp, lp).unwrap(),
            rejected: PolicyLogProbs::new(lr, lr).unwrap(),
        };
        let beta = rng.gen_range(0.01..10.0);
        let d = dpo_loss(&p, beta);
        ensure((d - std::f64::consts::LN_2).abs() <= IDENTITY_TOL, || format!("dpo {d}"))?;
        let o = odds_ratio_loss(lp, lp).map_err(err)?;
        ensure((o - std::f64::consts::LN_2).abs() <= IDENTITY_TOL, || format!("odds ratio {o}"))?;
        let sft = rng.gen_range(0.0..20.0);
        ensure(orpo_loss(sft, rng.gen_range(0.0..5.0), 0.0).to_bits() == sft.to_bits(), || "orpo(λ=0) != sft".into())?;
    }
    let policy = ToyPolicy::new(8, 11).unwrap();
    let pairs: Vec<ToyPair> =
        (1..=8).map(|t| ToyPair { target: t, chosen_length: t, rejected_length: 2 * t }).collect();
    let chosen: Vec<SftSample> =
        pairs.iter().map(|p| SftSample { target: p.target, gold_length: p.chosen_length }).collect();
    let a = toy::orpo_loss(&policy, &pairs, 0.0).map_err(err)?;
    let b = toy::sft_loss(&policy, &chosen).map_err(err)?;
    ensure(a.to_bits() == b.to_bits(), || format!("toy orpo(λ=0) {a} vs sft {b}"))?;

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..12);
        let raw: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        worst = worst.max(kl_divergence(&p, &p).map_err(err)?.abs());
    }
    ensure(worst <= IDENTITY_TOL, || format!("KL(p, p) reached {worst}"))?;
    Ok(format!("max KL(p,p) over 1000 simplex points {worst:.1e}"))
}

fn random_policy(rng: &mut ChaCha8Rng, max_target: usize) -> ToyPolicy {
    let max_len = 2 * max_target;
    let logits = (0..max_target * (max_len + 1) * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    ToyPolicy::from_logits(max_target, max_len, rng.gen(), logits).unwrap()
}

fn gradient_suite() -> Outcome {
    const MAX_TARGET: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let policy = random_policy(&mut rng, MAX_TARGET);
        let reference = random_policy(&mut rng, MAX_TARGET);
        let max_len = policy.max_len();
        let samples: Vec<SftSample> = (0..6)
            .map(|_| SftSample { target: rng.gen_range(1..=MAX_TARGET), gold_length: rng.gen_range(0..=max_len) })
            .collect();
        let pairs: Vec<ToyPair> = (0..6)
            .map(|_| ToyPair {
                target: rng.gen_range(1..=MAX_TARGET),
                chosen_length: rng.gen_range(0..=max_len),
                rejected_length: rng.gen_range(0..=max_len),
            })
            .collect();
        let rollouts: Vec<Rollout> = (0..8)
            .map(|_| {
                let target = rng.gen_range(1..=MAX_TARGET);
                let length = rng.gen_range(0..=max_len);
                let current = policy.response_logprob(target, length).unwrap();
                Rollout {
                    target,
                    length,
                    old_logprob: current + rng.gen_range(-0.5..0.5),
                    advantage: rng.gen_range(-2.0..2.0),
                }
            })
            .collect();
        let hyper = HyperParams { beta: rng.gen_range(0.01..1.0), lambda: 1.0, clip_epsilon: 0.2 };
        let direction = if rng.gen() { KlDirection::ReferenceToPolicy } else { KlDirection::PolicyToReference };
        let cases = [
            GradCheckCase::Sft(&samples),
            GradCheckCase::Dpo { reference: &reference, pairs: &pairs, beta: rng.gen_range(0.05..2.0) },
            GradCheckCase::Orpo { pairs: &pairs, lambda: rng.gen_range(0.0..2.0) },
            GradCheckCase::Ppo { reference: &reference, rollouts: &rollouts, hyper, direction },
        ];
        for (w, case) in worst.iter_mut().zip(cases) {
            *w = w.max(grad_check(&policy, case).map_err(err)?);
        }
    }
    let names = ["sft", "dpo", "orpo", "ppo"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < GRAD_TOL, || format!("{name} max relative error {w:.2e}"))?;
    }
    Ok(names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", "))
}

fn enumeration_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let policy = random_policy(&mut rng, 12);
    let mut worst: f64 = 0.0;
    for t in 1..=policy.max_target() {
        let total: f64 = (0..=policy.max_len()).map(|l| policy.response_logprob(t, l).unwrap().exp()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    ensure(worst <= NORMALIZATION_TOL, || format!("Σ exp(logprob) off by {worst:.2e}"))?;

    let target = 7;
    let max_len = policy.max_len();
    let spread = (0..policy.logits().len())
        .map(|i| if i % 2 == 0 { 1.5 + rng.gen_range(-0.3..0.3) } else { rng.gen_range(-0.3..0.3) })
        .collect();
    let policy = ToyPolicy::from_logits(policy.max_target(), max_len, 0, spread).map_err(err)?;
    let dist = policy.length_distribution(target).map_err(err)?;
    let draws = 100_000usize;
    let mut counts = vec![0usize; dist.len()];
    let mut sampler = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..draws {
        counts[policy.sample(target, &mut sampler).map_err(err)?] += 1;
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut exp_acc, mut obs_acc) = (0.0, 0.0);
    for (p, c) in dist.iter().zip(&counts) {
        exp_acc += p * draws as f64;
        obs_acc += *c as f64;
        if exp_acc >= 5.0 {
            cells.push((obs_acc, exp_acc));
            exp_acc = 0.0;
            obs_acc = 0.0;
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += obs_acc;
        last.1 += exp_acc;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (cells.len() - 1) as f64;
    let critical = ChiSquared::new(df).map_err(err)?.inverse_cdf(1.0 - CHI_SQUARE_ALPHA);
    ensure(stat < critical, || format!("χ² = {stat:.2} ≥ {critical:.2} (df {df})"))?;
    Ok(format!("max |Σp−1| {worst:.1e}; χ² {stat:.2} < {critical:.2} on {df} df"))
}

fn sft_corpus(seed: u64) -> Vec<SftSample> {
    let template = PromptTemplate::default();
    let config = MeasureConfig::standard();
    synthesize_toy_corpus(seed, 5000, (1, 50), "abcdefghij")
        .unwrap()
        .iter()
        .map(|s| {
            let a = augment(s, LengthMetricKind::Characters, &template, &config).unwrap();
            SftSample { target: a.requirement.target() as usize, gold_length: s.response.chars().count() }
        })
        .collect()
}

fn orpo_pairs(policy: &ToyPolicy, samples: &[SftSample], seed: u64) -> Vec<ToyPair> {
    let config = MeasureConfig::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for s in samples.iter().take(1000) {
        let mut lengths = vec![s.gold_length];
        for _ in 0..4 {
            lengths.push(policy.sample(s.target, &mut rng).unwrap());
        }
        let texts: Vec<String> = lengths.iter().map(|&l| ToyPolicy::render(l)).collect();
        let requirement = req(LengthMetricKind::Characters, s.target as f64);
        for p in build_preference_pairs("p", "q", &texts, &requirement, &config).unwrap() {
            pairs.push(ToyPair {
                target: s.target,
                chosen_length: p.chosen.chars().count(),
                rejected_length: p.rejected.chars().count(),
            });
        }
    }
    pairs
}

fn training_analog() -> Outcome {
    let targets: Vec<usize> = (1..=50).collect();
    let mut wins = 0;
    let mut worst_reduction: f64 = 1.0;
    for seed in 0..10u64 {
        let samples = sft_corpus(seed);
        let fresh = ToyPolicy::new(50, seed).unwrap();
        let before = mean_abs_length_deviation(&fresh, &targets).map_err(err)?;
        let config =
            toy::TrainConfig { learning_rate: 200.0, epochs: 3, batch_size: Some(20), seed, ..Default::default() };
        let sft = train_sft(fresh, &samples, &config).map_err(err)?.last().policy.clone();
        let after_sft = mean_abs_length_deviation(&sft, &targets).map_err(err)?;
        let reduction = 1.0 - after_sft / before;
        worst_reduction = worst_reduction.min(reduction);
        ensure(reduction >= SFT_REDUCTION, || {
            format!("seed {seed}: SFT reduced deviation by only {:.1}%", reduction * 100.0)
        })?;

        let pairs = orpo_pairs(&sft, &samples, seed);
        let orpo_config = toy::TrainConfig { learning_rate: 100.0, ..config };
        let orpo = train_orpo(sft, &pairs, &orpo_config).map_err(err)?.last().policy.clone();
        if mean_abs_length_deviation(&orpo, &targets).map_err(err)? < after_sft {
            wins += 1;
        }
    }
    ensure(wins >= ORPO_MIN_WINS, || format!("ORPO improved in {wins}/10 seeds"))?;
    Ok(format!("SFT reduction ≥ {:.1}%; ORPO improved in {wins}/10 seeds", worst_reduction * 100.0))
}

fn kl_anchor() -> Outcome {
    let reference = ToyPolicy::new(10, 21).unwrap();
    let prompts: Vec<usize> = (1..=10).collect();
    let config = toy::TrainConfig {
        learning_rate: 1.0,
        epochs: 20,
        hyper: HyperParams { beta: 1e6, ..HyperParams::default() },
        seed: 7,
        ..Default::default()
    };
    let run = train_ppo(reference.clone(), &reference, &prompts, &config).map_err(err)?;
    let mut worst: f64 = 0.0;
    for ck in &run.checkpoints {
        for t in 1..=reference.max_target() {
            for s in 0..=reference.max_len() {
                let p = ck.policy.step_probs(t, s);
                let q = reference.step_probs(t, s);
                worst = worst.max(0.5 * ((p[0] - q[0]).abs() + (p[1] - q[1]).abs()));
            }
        }
    }
    ensure(worst <= TV_BOUND, || format!("total variation reached {worst:.3e}"))?;
    Ok(format!("max per-state TV {worst:.2e} over {} checkpoints", run.checkpoints.len()))
}

fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    const POOL: &[char] = &['a', 'Z', 'é', 'ß', '7', ' ', ' ', '.', ',', '?', '日', 'ж', 'q', 'x', '-', '\'', 'M'];
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| POOL[rng.gen_range(0..POOL.len())]).collect()
}

fn pipeline_bytes(seed: u64) -> Vec<Vec<u8>> {
    let template = PromptTemplate::default();
    let config = MeasureConfig::standard();
    let corpus = synthesize_toy_corpus(seed, 300, (1, 20), "abcde fgh").unwrap();
    let (train, eval, _) = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
    let augmented: Vec<AugmentedRecord> = train
        .iter()
        .filter_map(|s| augment(s, LengthMetricKind::Characters, &template, &config).ok())
        .map(|a| AugmentedRecord::from(&a))
        .collect();
    let samples: Vec<SftSample> = augmented
        .iter()
        .map(|r| SftSample { target: r.requirement.target() as usize, gold_length: r.response.chars().count() })
        .collect();
    let cfg = toy::TrainConfig { learning_rate: 50.0, epochs: 2, batch_size: Some(16), seed, ..Default::default() };
    let sft = train_sft(ToyPolicy::new(20, seed).unwrap(), &samples, &cfg).unwrap();
    let policy = sft.last().policy.clone();
    let pairs = orpo_pairs(&policy, &samples, seed);
    let orpo = train_orpo(policy.clone(), &pairs, &cfg).unwrap();
    let ppo = train_ppo(policy.clone(), &policy, &(1..=20).collect::<Vec<_>>(), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<EvaluationRecord> = eval
        .iter()
        .map(|s| {
            let r = req(LengthMetricKind::Characters, s.response.chars().count() as f64);
            let len = orpo.last().policy.sample(r.target() as usize, &mut rng).unwrap();
            EvaluationRecord::new(s.id.clone(), r, len as f64).unwrap()
        })
        .collect();
    let report = evaluate(&records, &EvaluateOptions::default()).unwrap();
    let mut out = vec![to_jsonl(&corpus).unwrap(), to_jsonl(&augmented).unwrap(), to_jsonl(&pairs).unwrap()];
    for run in [&sft, &orpo, &ppo] {
        out.extend(run.checkpoints.iter().map(|c| c.to_bytes().unwrap()));
    }
    out.push(report.to_json().unwrap());
    out
}

fn round_trip_and_determinism() -> Outcome {
    let template = PromptTemplate::default();
    let config = MeasureConfig::standard();
    let kinds = LengthMetricKind::TRAINING;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for i in 0..10_000 {
        let prompt = random_text(&mut rng, 1, 40);
        let response = format!("{}a", random_text(&mut rng, 0, 80));
        let sample = PromptResponse { id: format!("s{i}"), prompt: prompt.clone(), response };
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let augmented = augment(&sample, kind, &template, &config).map_err(err)?;
        let (parsed, base) = template
            .parse(&augmented.augmented_prompt)
            .ok_or_else(|| format!("could not parse {:?}", augmented.augmented_prompt))?;
        ensure(parsed == augmented.requirement && base == prompt, || {
            format!("{:?} parsed as {parsed:?} / {base:?}", augmented.augmented_prompt)
        })?;
        checked += 1;
    }

    let mut pairs_checked = 0;
    for i in 0..500 {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let target = LengthRequirement::rounded(kind, rng.gen_range(1.0..60.0)).map_err(err)?;
        let candidates: Vec<String> = (0..rng.gen_range(2..6)).map(|_| random_text(&mut rng, 1, 90)).collect();
        for p in build_preference_pairs(&format!("p{i}"), "q", &candidates, &target, &config).map_err(err)? {
            let score = |text: &str| {
                length_reward(lenforge::metrics::measure(text, kind, &config).unwrap(), target.target())
                    .unwrap()
                    .value()
            };
            ensure(score(&p.chosen) >= score(&p.rejected), || format!("pair {} ranks rejected above chosen", p.id))?;
            pairs_checked += 1;
        }
    }

    let first = pipeline_bytes(17);
    let second = pipeline_bytes(17);
    ensure(first == second, || "pipeline rerun produced different bytes".into())?;
    ensure(pipeline_bytes(18) != first, || "different seeds produced identical artifacts".into())?;
    Ok(format!("{checked} round trips, {pairs_checked} ordered pairs, {} identical artifacts", first.len()))
}

fn generalization_probe() -> Outcome {
    let samples = sft_corpus(0);
    let config = toy::TrainConfig { learning_rate: 200.0, epochs: 3, batch_size: Some(20), ..Default::default() };
    let policy = train_sft(ToyPolicy::new(50, 0).unwrap(), &samples, &config).map_err(err)?.last().policy.clone();
    let measure = MeasureConfig::standard();
    let mean_for = |kind: LengthMetricKind| -> Result<f64, String> {
        let mut total = 0.0;
        for t in 1..=50 {
            total += expected_abs_deviation(&policy, &req(kind, t as f64), &measure).map_err(err)?;
        }
        Ok(total / 50.0)
    };
    let chars = mean_for(LengthMetricKind::Characters)?;
    let words = mean_for(LengthMetricKind::Words)?;
    ensure(words > chars, || format!("word deviation {words:.2}% does not exceed character deviation {chars:.2}%"))?;
    Ok(format!("words {words:.2}% > characters {chars:.2}%"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 published deviations", published_rows, Duration::from_secs(1)),
        ("2 comparison figures", comparison_figures, Duration::from_secs(1)),
        ("3 loss identities", loss_identities, Duration::MAX),
        ("4 gradient suite", gradient_suite, Duration::from_secs(30)),
        ("5 enumeration oracle", enumeration_oracle, Duration::MAX),
        ("6 training analog", training_analog, Duration::from_secs(300)),
        ("7 KL anchor", kl_anchor, Duration::MAX),
        ("8 round trip and determinism", round_trip_and_determinism, Duration::MAX),
        ("9 generalization probe", generalization_probe, Duration::MAX),
    ];
    let mut failures = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed > budget {
                Err(format!("took {elapsed:.2?}, budget {budget:.0?}"))
            } else {
                Ok(detail)
            }
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
