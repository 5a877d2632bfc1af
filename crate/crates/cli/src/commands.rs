//! One function per subcommand.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use lenforge::dataset::{self, ingest_jsonl, AugmentedRecord, PreferencePair};
use lenforge::evaluation::{self, EvaluateOptions, EvaluationRecord, EvaluationReport};
use lenforge::io::{read_jsonl, to_jsonl, write_atomic};
use lenforge::metrics::{measure as measure_text, measure_words, LengthMetricKind, LengthRequirement};
use lenforge::toy::{self, sha256_hex, Checkpoint, SftSample, Stage, ToyPair, ToyPolicy, TrainRun};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

/// Candidate responses for one augmented prompt; input to `pairs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub id: String,
    pub prompt: String,
    #[serde(flatten)]
    pub requirement: LengthRequirement,
    pub candidates: Vec<String>,
}

fn open_input(path: Option<&Path>) -> Result<Box<dyn BufRead>, Failure> {
    match path {
        None => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) if p.as_os_str() == "-" => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) => File::open(p)
            .map(|f| Box::new(BufReader::new(f)) as Box<dyn BufRead>)
            .map_err(|e| Failure::usage(format!("cannot open {}: {e}", p.display()))),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn read_records<T: DeserializeOwned>(path: Option<&Path>) -> Result<Vec<T>, Failure> {
    read_jsonl(open_input(path)?).map_err(|e| match e {
        lenforge::Error::Io(io) => Failure::usage(format!("cannot read input: {io}")),
        other => Failure::usage(format!("invalid input: {other}")),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::from_bytes(&read_file(path)?)
        .map_err(|e| Failure::usage(format!("invalid checkpoint {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) if p.as_os_str() != "-" => write_atomic(p, bytes).map_err(Failure::from),
        _ => io::stdout().lock().write_all(bytes).map_err(|e| Failure::runtime(format!("cannot write output: {e}"))),
    }
}

/// The toy policy's row for a requirement: its target, when that is a
/// positive integer the policy covers.
fn toy_row(requirement: &LengthRequirement, policy: &ToyPolicy) -> Option<usize> {
    let t = requirement.target();
    (t.fract() == 0.0 && t >= 1.0 && t <= policy.max_target() as f64).then_some(t as usize)
}

fn integral_row(id: &str, requirement: &LengthRequirement) -> Result<usize, Failure> {
    let t = requirement.target();
    if t.fract() != 0.0 || t < 1.0 {
        return Err(Failure::usage(format!(
            "record `{id}`: the toy policy needs a positive integral target, got {}",
            requirement.format_target()
        )));
    }
    Ok(t as usize)
}

fn char_len(text: &str) -> usize {
    text.chars().count()
}

pub fn measure(config: &RunConfig, input: Option<&Path>, jsonl: bool) -> Result<(), Failure> {
    let kinds = config.metrics(LengthMetricKind::Characters)?;
    let reader = open_input(input)?;
    let texts: Vec<(String, String)> = if jsonl {
        let ingested = ingest_jsonl(reader)?;
        if ingested.skipped > 0 {
            warn!("skipped {} of {} records", ingested.skipped, ingested.total);
        }
        ingested.samples.into_iter().map(|s| (s.id, s.response)).collect()
    } else {
        reader
            .lines()
            .enumerate()
            .map(|(i, line)| {
                line.map(|l| ((i + 1).to_string(), l)).map_err(|e| Failure::usage(format!("cannot read input: {e}")))
            })
            .collect::<Result<_, _>>()?
    };
    let mut out = String::new();
    for (id, text) in &texts {
        for &kind in &kinds {
            let value = measure_text(text, kind, &config.measure)?;
            out.push_str(&format!("{id}\t{kind}\t{value}\n"));
        }
    }
    emit(None, out.as_bytes())
}

pub fn synthesize(
    config: &RunConfig,
    n: usize,
    lengths: (usize, usize),
    alphabet: &str,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let corpus = dataset::synthesize_toy_corpus(config.seed(), n, lengths, alphabet)?;
    info!("synthesized {} samples with seed {}", corpus.len(), config.seed());
    emit(output, &to_jsonl(&corpus)?)
}

pub fn augment(config: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Result<(), Failure> {
    let kind = config.metric(LengthMetricKind::Characters)?;
    if kind.held_out() {
        return Err(Failure::usage(format!("metric `{kind}` is held out for evaluation and cannot be trained on")));
    }
    let template = config.template(kind)?;
    let ingested = ingest_jsonl(open_input(input)?)?;
    let mut records = Vec::with_capacity(ingested.samples.len());
    let mut degenerate = 0;
    for sample in &ingested.samples {
        match dataset::augment(sample, kind, &template, &config.measure) {
            Ok(a) => records.push(AugmentedRecord::from(&a)),
            Err(lenforge::Error::DegenerateSample { id, reason }) => {
                warn!("skipping `{id}`: {reason}");
                degenerate += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    info!(
        "augmented {} of {} records ({} unparseable, {} degenerate)",
        records.len(),
        ingested.total,
        ingested.skipped,
        degenerate
    );
    emit(output, &to_jsonl(&records)?)
}

pub fn split(config: &RunConfig, input: Option<&Path>, fractions: &str, out_dir: &Path) -> Result<(), Failure> {
    let parts: Vec<f64> = fractions
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("bad --fractions `{fractions}`: {e}")))?;
    let fractions: [f64; 3] = parts.try_into().map_err(|_| Failure::usage("--fractions takes exactly three values"))?;
    let lines: Vec<String> = open_input(input)?
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(format!("cannot read input: {e}")))?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let (train, eval, test) = dataset::split(&lines, fractions, config.seed())?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    for (name, part) in [("train.jsonl", &train), ("eval.jsonl", &eval), ("test.jsonl", &test)] {
        let mut body = part.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_atomic(out_dir.join(name), body.as_bytes())?;
    }
    info!("split {} lines into {}/{}/{}", lines.len(), train.len(), eval.len(), test.len());
    Ok(())
}

pub fn candidates(
    config: &RunConfig,
    input: Option<&Path>,
    checkpoint: &Path,
    k: usize,
    output: Option<&Path>,
) -> Result<(), Failure> {
    if k == 0 {
        return Err(Failure::usage("-k must be at least 1"));
    }
    let policy = load_checkpoint(checkpoint)?.policy;
    let records: Vec<AugmentedRecord> = read_records(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    let mut sets = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in &records {
        let Some(row) = toy_row(&r.requirement, &policy) else {
            skipped += 1;
            continue;
        };
        let mut candidates = vec![r.response.clone()];
        for _ in 0..k {
            candidates.push(ToyPolicy::render(policy.sample(row, &mut rng)?));
        }
        sets.push(CandidateSet { id: r.id.clone(), prompt: r.prompt.clone(), requirement: r.requirement, candidates });
    }
    if skipped > 0 {
        warn!("skipped {skipped} records whose target the policy does not cover");
    }
    info!("sampled {} candidate sets", sets.len());
    emit(output, &to_jsonl(&sets)?)
}

pub fn pairs(config: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Result<(), Failure> {
    let sets: Vec<CandidateSet> = read_records(input)?;
    let mut pairs = Vec::new();
    for s in &sets {
        pairs.extend(dataset::build_preference_pairs(
            &s.id,
            &s.prompt,
            &s.candidates,
            &s.requirement,
            &config.measure,
        )?);
    }
    let tied = pairs.iter().filter(|p| p.tied).count();
    info!("built {} pairs from {} candidate sets ({tied} tied)", pairs.len(), sets.len());
    emit(output, &to_jsonl(&pairs)?)
}

fn toy_pairs(pairs: &[PreferencePair]) -> Result<Vec<ToyPair>, Failure> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs.iter().filter(|p| !p.tied) {
        out.push(ToyPair {
            target: integral_row(&p.id, &p.requirement)?,
            chosen_length: char_len(&p.chosen),
            rejected_length: char_len(&p.rejected),
        });
    }
    let tied = pairs.len() - out.len();
    if tied > 0 {
        info!("ignoring {tied} tied pairs");
    }
    if out.is_empty() {
        return Err(Failure::usage("no untied preference pairs to train on"));
    }
    Ok(out)
}

fn write_run(run: &TrainRun, out_dir: &Path) -> Result<(), Failure> {
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::runtime(format!("cannot write metrics: {e}"));
    csv.write_record(["epoch", "loss", "objective"]).map_err(csv_err)?;
    csv.write_record(["0".to_string(), run.initial_loss.to_string(), String::new()]).map_err(csv_err)?;
    for h in &run.history {
        let objective = h.objective.map(|o| o.to_string()).unwrap_or_default();
        csv.write_record([h.epoch.to_string(), h.loss.to_string(), objective]).map_err(csv_err)?;
    }
    let body = csv.into_inner().map_err(|e| Failure::runtime(format!("cannot write metrics: {e}")))?;
    write_atomic(out_dir.join("metrics.csv"), &body)?;

    let mut listing = String::new();
    for ck in &run.checkpoints {
        let path = out_dir.join(format!("epoch-{}.json", ck.epoch));
        ck.save(&path)?;
        listing.push_str(&format!("{}\t{}\n", path.display(), ck.digest()?));
    }
    emit(None, listing.as_bytes())
}

pub fn train(
    config: &RunConfig,
    stage: &str,
    input: Option<&Path>,
    init: Option<&Path>,
    out_dir: &Path,
) -> Result<(), Failure> {
    let stage: Stage = stage.parse()?;
    let reference = match &config.opts.reference {
        Some(path) => Some(load_checkpoint(path)?.policy),
        None if matches!(stage, Stage::Dpo | Stage::Ppo) => {
            return Err(Failure::usage(format!("{stage} training needs --reference (the SFT checkpoint)")));
        }
        None => None,
    };
    let start = match init {
        Some(path) => Some(load_checkpoint(path)?.policy),
        None => reference.clone(),
    };
    let fresh = |rows: &[usize]| -> Result<ToyPolicy, Failure> {
        let max_target = match config.opts.max_target {
            Some(m) => m,
            None => rows.iter().copied().max().unwrap_or(1),
        };
        Ok(ToyPolicy::new(max_target, config.seed())?)
    };
    let cfg = &config.train;

    let result = match stage {
        Stage::Sft | Stage::Ppo => {
            let records: Vec<AugmentedRecord> = read_records(input)?;
            let rows = records.iter().map(|r| integral_row(&r.id, &r.requirement)).collect::<Result<Vec<_>, _>>()?;
            if rows.is_empty() {
                return Err(Failure::usage("no training records"));
            }
            let policy = match start {
                Some(p) => p,
                None => fresh(&rows)?,
            };
            if stage == Stage::Sft {
                let samples: Vec<SftSample> = records
                    .iter()
                    .zip(&rows)
                    .map(|(r, &target)| SftSample { target, gold_length: char_len(&r.response) })
                    .collect();
                toy::train_sft(policy, &samples, cfg)
            } else {
                toy::train_ppo(policy, reference.as_ref().expect("checked above"), &rows, cfg)
            }
        }
        Stage::Dpo | Stage::Orpo => {
            let pairs = toy_pairs(&read_records::<PreferencePair>(input)?)?;
            let policy = match start {
                Some(p) => p,
                None => fresh(&pairs.iter().map(|p| p.target).collect::<Vec<_>>())?,
            };
            if stage == Stage::Dpo {
                toy::train_dpo(policy, reference.as_ref().expect("checked above"), &pairs, cfg)
            } else {
                toy::train_orpo(policy, &pairs, cfg)
            }
        }
        Stage::Init => return Err(Failure::usage("`init` is not a training stage")),
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    match result {
        Ok(run) => {
            if let Some(last) = run.history.last() {
                info!("{stage}: loss {} -> {} over {} epochs", run.initial_loss, last.loss, run.history.len());
            }
            write_run(&run, out_dir)
        }
        Err(lenforge::Error::Diverged { epoch, reason, last_good }) => {
            let path = out_dir.join("last-good.json");
            last_good.save(&path)?;
            Err(Failure::runtime(format!(
                "training diverged at epoch {epoch}: {reason}; last good checkpoint written to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn checkpoint_records(
    config: &RunConfig,
    records: &[AugmentedRecord],
    policy: &ToyPolicy,
    probe_words: bool,
) -> Result<Vec<EvaluationRecord>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    let mut out = Vec::with_capacity(records.len() * if probe_words { 2 } else { 1 });
    let mut skipped = 0;
    for r in records {
        match toy_row(&r.requirement, policy) {
            Some(row) => {
                let response = ToyPolicy::render(policy.sample(row, &mut rng)?);
                let actual = measure_text(&response, r.requirement.kind(), &config.measure)?;
                out.push(EvaluationRecord::new(r.id.clone(), r.requirement, actual)?);
            }
            None => skipped += 1,
        }
        if probe_words {
            let words = LengthRequirement::new(LengthMetricKind::Words, measure_words(&r.response) as f64)?;
            if let Some(row) = toy_row(&words, policy) {
                let response = ToyPolicy::render(policy.sample(row, &mut rng)?);
                out.push(EvaluationRecord::new(format!("{}#words", r.id), words, measure_words(&response) as f64)?);
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} records whose target the policy does not cover");
    }
    Ok(out)
}

pub fn evaluate(
    config: &RunConfig,
    input: Option<&Path>,
    checkpoint: Option<&Path>,
    records_csv: Option<&Path>,
    probe_words: bool,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let (records, label) = match (checkpoint, records_csv) {
        (Some(ck_path), None) => {
            let ck = load_checkpoint(ck_path)?;
            let augmented: Vec<AugmentedRecord> = read_records(input)?;
            let records = checkpoint_records(config, &augmented, &ck.policy, probe_words)?;
            let label = format!("checkpoint={};seed={};probe_words={probe_words}", ck.digest()?, config.seed());
            (records, label)
        }
        (None, Some(csv_path)) => {
            let bytes = read_file(csv_path)?;
            (evaluation::records_from_csv(&bytes)?, format!("records={}", sha256_hex(&bytes)))
        }
        _ => return Err(Failure::usage("evaluate needs either --checkpoint or --records")),
    };
    let options = EvaluateOptions { label, ..EvaluateOptions::default() };
    let report = evaluation::evaluate(&records, &options)?;
    for (kind, summary) in report.metrics.iter().chain(&report.held_out) {
        info!("{kind}: mean |deviation| {:.2}% over {} records", summary.mean_abs_deviation_pct, summary.n);
    }
    emit(output, &evaluation::export(&report, config.format("json")?)?)
}

fn load_report(path: &Path) -> Result<EvaluationReport, Failure> {
    EvaluationReport::from_json(&read_file(path)?)
        .map_err(|e| Failure::usage(format!("invalid report {}: {e}", path.display())))
}

pub fn compare(baseline: &Path, candidate: &Path, output: Option<&Path>) -> Result<(), Failure> {
    let comparison = evaluation::compare(&load_report(baseline)?, &load_report(candidate)?)?;
    for (kind, change) in &comparison.per_metric_pct_change {
        info!("{kind}: {} change in mean |deviation|", evaluation::display_pct(*change));
    }
    let mut body = serde_json::to_vec_pretty(&comparison).map_err(lenforge::Error::from)?;
    body.push(b'\n');
    emit(output, &body)
}

pub fn report(config: &RunConfig, input: &Path, output: Option<&Path>) -> Result<(), Failure> {
    let report = load_report(input)?;
    emit(output, &evaluation::export(&report, config.format("svg")?)?)
}

pub fn describe(checkpoint: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let summary = serde_json::json!({
        "stage": ck.stage,
        "epoch": ck.epoch,
        "format_version": ck.format_version,
        "digest": ck.digest()?,
        "corpus_digest": ck.corpus_digest,
        "max_target": ck.policy.max_target(),
        "max_len": ck.policy.max_len(),
        "seed": ck.policy.seed(),
    });
    let mut body = serde_json::to_vec_pretty(&summary).map_err(lenforge::Error::from)?;
    body.push(b'\n');
    emit(None, &body)
}
