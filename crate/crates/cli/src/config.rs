//! Run configuration: command-line flags layered over an optional flat
//! `key = value` file.
//!
//! File grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Keys are the long flag names (`speech-rate`, or equivalently
//! `speech_rate`). Blank lines and lines starting with `#` are ignored.
//! Unknown or repeated keys are errors. A flag given on the command line
//! overrides the file's value.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use lenforge::dataset::PromptTemplate;
use lenforge::metrics::{FontMetricTable, LengthMetricKind, MeasureConfig, SpeechRateModel};
use lenforge::objectives::{HyperParams, KlDirection};
use lenforge::toy::TrainConfig;

use crate::failure::Failure;

pub const CONFIG_ENV: &str = "LENFORGE_CONFIG";

#[derive(Args, Debug, Clone, Default)]
pub struct Opts {
    /// Flat key = value config file (default: $LENFORGE_CONFIG).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Length metric; `measure` accepts a comma-separated list.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// Requirement sentence for the selected metric, with one {LEN}.
    #[arg(long, global = true)]
    pub template: Option<String>,
    /// Characters per second for the speech-duration metric.
    #[arg(long, global = true)]
    pub speech_rate: Option<f64>,
    /// Character width table for the printed-length metric.
    #[arg(long, global = true, value_name = "PATH")]
    pub font_table: Option<PathBuf>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub clip_eps: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reference checkpoint (required for dpo and ppo).
    #[arg(long, global = true, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// Output format: json, csv or svg.
    #[arg(long, global = true)]
    pub format: Option<String>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// reference-to-policy or policy-to-reference.
    #[arg(long, global = true)]
    pub kl_direction: Option<String>,
    #[arg(long, global = true)]
    pub samples_per_prompt: Option<usize>,
    #[arg(long, global = true)]
    pub ppo_update_steps: Option<usize>,
    #[arg(long, global = true)]
    pub normalize_advantages: Option<bool>,
    /// Largest integral target a fresh toy policy can serve.
    #[arg(long, global = true)]
    pub max_target: Option<usize>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Failure::usage(format!("config line {line}: bad value for `{key}`: {e}")))
}

impl Opts {
    /// Parses a config file body.
    pub fn from_config_str(source: &str) -> Result<Self, Failure> {
        let mut out = Opts::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in source.lines().enumerate() {
            let line = i + 1;
            let text = raw.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let (key, value) = text
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("config line {line}: expected `key = value`")))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim();
            if !seen.insert(key.clone()) {
                return Err(Failure::usage(format!("config line {line}: `{key}` set twice")));
            }
            match key.as_str() {
                "metric" => out.metric = Some(value.to_string()),
                "template" => out.template = Some(value.to_string()),
                "speech-rate" => out.speech_rate = Some(parse_value(&key, value, line)?),
                "font-table" => out.font_table = Some(PathBuf::from(value)),
                "beta" => out.beta = Some(parse_value(&key, value, line)?),
                "lambda" => out.lambda = Some(parse_value(&key, value, line)?),
                "clip-eps" => out.clip_eps = Some(parse_value(&key, value, line)?),
                "lr" => out.lr = Some(parse_value(&key, value, line)?),
                "epochs" => out.epochs = Some(parse_value(&key, value, line)?),
                "seed" => out.seed = Some(parse_value(&key, value, line)?),
                "reference" => out.reference = Some(PathBuf::from(value)),
                "format" => out.format = Some(value.to_string()),
                "batch-size" => out.batch_size = Some(parse_value(&key, value, line)?),
                "kl-direction" => out.kl_direction = Some(value.to_string()),
                "samples-per-prompt" => out.samples_per_prompt = Some(parse_value(&key, value, line)?),
                "ppo-update-steps" => out.ppo_update_steps = Some(parse_value(&key, value, line)?),
                "normalize-advantages" => out.normalize_advantages = Some(parse_value(&key, value, line)?),
                "max-target" => out.max_target = Some(parse_value(&key, value, line)?),
                _ => return Err(Failure::usage(format!("config line {line}: unknown key `{key}`"))),
            }
        }
        Ok(out)
    }

    pub fn from_config_file(path: &Path) -> Result<Self, Failure> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_config_str(&source)
    }

    /// Flags from the command line win over the config file.
    fn over(self, file: Opts) -> Opts {
        Opts {
            config: self.config,
            metric: self.metric.or(file.metric),
            template: self.template.or(file.template),
            speech_rate: self.speech_rate.or(file.speech_rate),
            font_table: self.font_table.or(file.font_table),
            beta: self.beta.or(file.beta),
            lambda: self.lambda.or(file.lambda),
            clip_eps: self.clip_eps.or(file.clip_eps),
            lr: self.lr.or(file.lr),
            epochs: self.epochs.or(file.epochs),
            seed: self.seed.or(file.seed),
            reference: self.reference.or(file.reference),
            format: self.format.or(file.format),
            batch_size: self.batch_size.or(file.batch_size),
            kl_direction: self.kl_direction.or(file.kl_direction),
            samples_per_prompt: self.samples_per_prompt.or(file.samples_per_prompt),
            ppo_update_steps: self.ppo_update_steps.or(file.ppo_update_steps),
            normalize_advantages: self.normalize_advantages.or(file.normalize_advantages),
            max_target: self.max_target.or(file.max_target),
        }
    }
}

/// Fully resolved and validated settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub opts: Opts,
    pub measure: MeasureConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(flags: Opts) -> Result<Self, Failure> {
        let file = match flags.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(path) => Opts::from_config_file(&path)?,
            None => Opts::default(),
        };
        let opts = flags.over(file);

        let speech = match opts.speech_rate {
            Some(rate) => SpeechRateModel::new(rate)?,
            None => SpeechRateModel::default(),
        };
        let font = match &opts.font_table {
            Some(path) => FontMetricTable::load(path)
                .map_err(|e| Failure::usage(format!("font table {}: {e}", path.display())))?,
            None => FontMetricTable::times_roman(),
        };
        let measure = MeasureConfig { speech: Some(speech), font: Some(font) };

        let defaults = TrainConfig::default();
        let hyper_defaults = HyperParams::default();
        let kl_direction = match opts.kl_direction.as_deref() {
            None => defaults.kl_direction,
            Some("reference-to-policy") => KlDirection::ReferenceToPolicy,
            Some("policy-to-reference") => KlDirection::PolicyToReference,
            Some(other) => {
                return Err(Failure::usage(format!(
                    "unknown KL direction `{other}` (reference-to-policy or policy-to-reference)"
                )))
            }
        };
        let train = TrainConfig {
            learning_rate: opts.lr.unwrap_or(defaults.learning_rate),
            epochs: opts.epochs.unwrap_or(defaults.epochs),
            batch_size: opts.batch_size.or(defaults.batch_size),
            hyper: HyperParams {
                beta: opts.beta.unwrap_or(hyper_defaults.beta),
                lambda: opts.lambda.unwrap_or(hyper_defaults.lambda),
                clip_epsilon: opts.clip_eps.unwrap_or(hyper_defaults.clip_epsilon),
            },
            seed: opts.seed.unwrap_or(defaults.seed),
            kl_direction,
            samples_per_prompt: opts.samples_per_prompt.unwrap_or(defaults.samples_per_prompt),
            ppo_update_steps: opts.ppo_update_steps.unwrap_or(defaults.ppo_update_steps),
            normalize_advantages: opts.normalize_advantages.unwrap_or(defaults.normalize_advantages),
        };
        train.validate()?;
        if let Some(format) = &opts.format {
            format.parse::<lenforge::evaluation::ExportFormat>()?;
        }
        Ok(Self { opts, measure, train })
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn metrics(&self, default: LengthMetricKind) -> Result<Vec<LengthMetricKind>, Failure> {
        match &self.opts.metric {
            None => Ok(vec![default]),
            Some(list) => {
                list.split(',').map(|m| m.trim().parse::<LengthMetricKind>().map_err(Failure::from)).collect()
            }
        }
    }

    pub fn metric(&self, default: LengthMetricKind) -> Result<LengthMetricKind, Failure> {
        match self.metrics(default)?.as_slice() {
            [one] => Ok(*one),
            _ => Err(Failure::usage("this command takes a single --metric")),
        }
    }

    pub fn template(&self, kind: LengthMetricKind) -> Result<PromptTemplate, Failure> {
        let template = PromptTemplate::default();
        Ok(match &self.opts.template {
            Some(pattern) => template.with_pattern(kind, pattern.clone())?,
            None => template,
        })
    }

    pub fn format(&self, default: &str) -> Result<lenforge::evaluation::ExportFormat, Failure> {
        Ok(self.opts.format.as_deref().unwrap_or(default).parse()?)
    }
}
