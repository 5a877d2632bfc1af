//! Length measures for text.
//!
//! Four measures can be used as training requirements (characters, letters,
//! speech seconds, printed centimeters). A fifth, word count, is held out and
//! only ever used to probe generalization.
//!
//! Character units are Unicode scalar values. Letters are the scalars whose
//! general category is a Letter (`L*`) or a Decimal Number (`Nd`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{domain, Error, Result};

/// Points to centimeters.
pub const CM_PER_POINT: f64 = 0.0352778;

const TIMES_ROMAN_WIDTHS: &str = include_str!("../data/times_roman.widths");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMetricKind {
    Characters,
    Letters,
    SpeechSeconds,
    PrintCm,
    /// Evaluation-only.
    Words,
}

/// How finely a target for a given metric is stated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Integer,
    Tenth,
}

impl Resolution {
    pub fn round(self, value: f64) -> f64 {
        match self {
            Resolution::Integer => value.round(),
            Resolution::Tenth => (value * 10.0).round() / 10.0,
        }
    }

    /// Largest distance between a raw measurement and its rounded form.
    pub fn half_step(self) -> f64 {
        match self {
            Resolution::Integer => 0.5,
            Resolution::Tenth => 0.05,
        }
    }
}

impl LengthMetricKind {
    pub const ALL: [LengthMetricKind; 5] = [
        LengthMetricKind::Characters,
        LengthMetricKind::Letters,
        LengthMetricKind::SpeechSeconds,
        LengthMetricKind::PrintCm,
        LengthMetricKind::Words,
    ];

    pub const TRAINING: [LengthMetricKind; 4] = [
        LengthMetricKind::Characters,
        LengthMetricKind::Letters,
        LengthMetricKind::SpeechSeconds,
        LengthMetricKind::PrintCm,
    ];

    pub fn held_out(self) -> bool {
        matches!(self, LengthMetricKind::Words)
    }

    pub fn resolution(self) -> Resolution {
        match self {
            LengthMetricKind::SpeechSeconds | LengthMetricKind::PrintCm => Resolution::Tenth,
            _ => Resolution::Integer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LengthMetricKind::Characters => "characters",
            LengthMetricKind::Letters => "letters",
            LengthMetricKind::SpeechSeconds => "speech_seconds",
            LengthMetricKind::PrintCm => "print_cm",
            LengthMetricKind::Words => "words",
        }
    }
}

impl fmt::Display for LengthMetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthMetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LengthMetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric `{s}`")))
    }
}

/// A metric paired with the length the response should have under it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthRequirement {
    kind: LengthMetricKind,
    target: f64,
}

impl LengthRequirement {
    /// Fails if the target is negative, non-finite, or not representable at
    /// the metric's resolution.
    pub fn new(kind: LengthMetricKind, target: f64) -> Result<Self> {
        if !target.is_finite() || target < 0.0 {
            return Err(domain(format!("target must be finite and >= 0, got {target}")));
        }
        if kind.resolution().round(target) != target {
            return Err(domain(format!("target {target} is not on the {kind} resolution grid")));
        }
        Ok(Self { kind, target })
    }

    /// Rounds `raw` onto the metric's grid first.
    pub fn rounded(kind: LengthMetricKind, raw: f64) -> Result<Self> {
        Self::new(kind, kind.resolution().round(raw))
    }

    pub fn kind(&self) -> LengthMetricKind {
        self.kind
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// Human-readable target: no fractional part for integral metrics, one
    /// decimal otherwise.
    pub fn format_target(&self) -> String {
        match self.kind.resolution() {
            Resolution::Integer => format!("{:.0}", self.target),
            Resolution::Tenth => format!("{:.1}", self.target),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RequirementRepr {
    metric: LengthMetricKind,
    target: serde_json::Number,
}

impl Serialize for LengthRequirement {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let target = match self.kind.resolution() {
            Resolution::Integer => serde_json::Number::from(self.target as u64),
            Resolution::Tenth => serde_json::Number::from_f64(self.target)
                .ok_or_else(|| serde::ser::Error::custom("non-finite target"))?,
        };
        RequirementRepr { metric: self.kind, target }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LengthRequirement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = RequirementRepr::deserialize(deserializer)?;
        let target = repr.target.as_f64().ok_or_else(|| serde::de::Error::custom("target is not a number"))?;
        LengthRequirement::new(repr.metric, target).map_err(serde::de::Error::custom)
    }
}

/// Linear reading-rate model: seconds = characters / rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechRateModel {
    chars_per_second: f64,
}

impl SpeechRateModel {
    pub const DEFAULT_RATE: f64 = 15.0;

    pub fn new(chars_per_second: f64) -> Result<Self> {
        if !(chars_per_second.is_finite() && chars_per_second > 0.0) {
            return Err(domain(format!("speech rate must be positive, got {chars_per_second}")));
        }
        Ok(Self { chars_per_second })
    }

    pub fn chars_per_second(&self) -> f64 {
        self.chars_per_second
    }
}

impl Default for SpeechRateModel {
    fn default() -> Self {
        Self { chars_per_second: Self::DEFAULT_RATE }
    }
}

/// Advance widths in 1/1000 em.
#[derive(Debug, Clone, PartialEq)]
pub struct FontMetricTable {
    widths: BTreeMap<char, u32>,
    default_width: u32,
    point_size: f64,
}

impl FontMetricTable {
    pub const DEFAULT_POINT_SIZE: f64 = 12.0;

    /// The embedded Times-Roman table at 12pt.
    pub fn times_roman() -> Self {
        Self::parse(TIMES_ROMAN_WIDTHS).expect("embedded width table is valid")
    }

    /// Parses the two-column width format:
    ///
    /// ```text
    /// # comment
    /// default 500
    /// 32 250
    /// 109 778
    /// ```
    ///
    /// The first column is a decimal code point (or `U+XXXX`), the second the
    /// advance width per mille of the em. Every printable ASCII character must
    /// be present.
    pub fn parse(source: &str) -> Result<Self> {
        let mut widths = BTreeMap::new();
        let mut default_width = 500;
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("font table line {}: {what}", lineno + 1));
            let mut cols = line.split_whitespace();
            let (Some(key), Some(value), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected two columns"));
            };
            let width: u32 = value.parse().map_err(|_| bad("width is not an integer"))?;
            if width == 0 {
                return Err(bad("width must be positive"));
            }
            if key == "default" {
                default_width = width;
                continue;
            }
            let code = match key.strip_prefix("U+").or_else(|| key.strip_prefix("u+")) {
                Some(hex) => u32::from_str_radix(hex, 16),
                None => key.parse(),
            }
            .map_err(|_| bad("bad code point"))?;
            let ch = char::from_u32(code).ok_or_else(|| bad("not a Unicode scalar value"))?;
            widths.insert(ch, width);
        }
        if let Some(missing) = (' '..='~').find(|c| !widths.contains_key(c)) {
            return Err(Error::Parse(format!("font table does not cover printable ASCII (missing {missing:?})")));
        }
        Ok(Self { widths, default_width, point_size: Self::DEFAULT_POINT_SIZE })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn with_point_size(mut self, point_size: f64) -> Result<Self> {
        if !(point_size.is_finite() && point_size > 0.0) {
            return Err(domain(format!("point size must be positive, got {point_size}")));
        }
        self.point_size = point_size;
        Ok(self)
    }

    pub fn advance(&self, c: char) -> u32 {
        self.widths.get(&c).copied().unwrap_or(self.default_width)
    }

    pub fn default_width(&self) -> u32 {
        self.default_width
    }

    pub fn point_size(&self) -> f64 {
        self.point_size
    }
}

impl Default for FontMetricTable {
    fn default() -> Self {
        Self::times_roman()
    }
}

/// Models needed by the derived (non-count) metrics.
#[derive(Debug, Clone, Default)]
pub struct MeasureConfig {
    pub speech: Option<SpeechRateModel>,
    pub font: Option<FontMetricTable>,
}

impl MeasureConfig {
    /// Default speech model and the embedded font table.
    pub fn standard() -> Self {
        Self { speech: Some(SpeechRateModel::default()), font: Some(FontMetricTable::default()) }
    }
}

pub fn measure_characters(text: &str) -> usize {
    text.chars().count()
}

pub fn is_letter_unit(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        UppercaseLetter | LowercaseLetter | TitlecaseLetter | ModifierLetter | OtherLetter | DecimalNumber
    )
}

pub fn measure_letters(text: &str) -> usize {
    text.chars().filter(|&c| is_letter_unit(c)).count()
}

pub fn measure_words(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn estimate_speech_seconds(text: &str, model: &SpeechRateModel) -> f64 {
    measure_characters(text) as f64 / model.chars_per_second
}

/// Width of `text` set on a single line. Line breaks are measured at the
/// default width and logged, since the measure assumes unbroken text.
pub fn estimate_print_cm(text: &str, table: &FontMetricTable) -> f64 {
    if text.contains(['\n', '\r']) {
        log::warn!("print measure given text containing a line break; measuring it as one line");
    }
    let per_mille: u64 = text.chars().map(|c| u64::from(table.advance(c))).sum();
    per_mille as f64 / 1000.0 * table.point_size * CM_PER_POINT
}

pub fn measure(text: &str, kind: LengthMetricKind, config: &MeasureConfig) -> Result<f64> {
    Ok(match kind {
        LengthMetricKind::Characters => measure_characters(text) as f64,
        LengthMetricKind::Letters => measure_letters(text) as f64,
        LengthMetricKind::Words => measure_words(text) as f64,
        LengthMetricKind::SpeechSeconds => {
            let model = config
                .speech
                .as_ref()
                .ok_or_else(|| Error::Config("speech metric requires a speech rate model".into()))?;
            estimate_speech_seconds(text, model)
        }
        LengthMetricKind::PrintCm => {
            let table = config
                .font
                .as_ref()
                .ok_or_else(|| Error::Config("print metric requires a font metric table".into()))?;
            estimate_print_cm(text, table)
        }
    })
}
