//! Structure, correctness, and intermediate-attribute rewards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::taxonomy::{names_match, AttributeMode, AttributeSchema, Lineage};
use crate::trace::{
    parse_trace_with, LevelRequirement, LevelValue, TraceDocument, TraceLevel, Verdict,
};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("label must be 0 or 1, got {0}")]
    Label(u8),
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("ground truth covers {got} levels, schema has {want}")]
    Coverage { got: usize, want: usize },
}

/// Which reward terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Structure + correctness + intermediate attributes.
    #[default]
    Intermediate,
    /// Structure + correctness only; think-block levels are not required.
    AnswerOnly,
}

impl RewardVariant {
    pub fn level_requirement(self) -> LevelRequirement {
        match self {
            RewardVariant::Intermediate => LevelRequirement::Hierarchical,
            RewardVariant::AnswerOnly => LevelRequirement::Optional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the structure reward.
    pub lambda: f64,
    pub mode: AttributeMode,
    /// Predictions are clamped into `[prob_floor, 1 - prob_floor]` before logs.
    pub prob_floor: f64,
    pub variant: RewardVariant,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            mode: AttributeMode::Concrete,
            prob_floor: 1e-4,
            variant: RewardVariant::Intermediate,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RewardError::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 0.5) {
            return Err(RewardError::Config(format!(
                "prob_floor {} outside (0, 0.5)",
                self.prob_floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<S = f64> {
    pub r_struct: S,
    pub r_corr: S,
    pub r_attr: S,
    pub r_total: S,
}

/// True per-image values at one schema level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelTruth {
    pub a: String,
    pub b: String,
}

impl LevelTruth {
    /// Same/different verdict implied by the two lineages at this level.
    pub fn verdict(&self) -> Verdict {
        if names_match(&self.a, &self.b) {
            Verdict::Same
        } else {
            Verdict::Different
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub label: u8,
    pub levels: Vec<LevelTruth>,
}

impl GroundTruth {
    pub fn from_lineages(a: &Lineage, b: &Lineage, label: u8, schema: &AttributeSchema) -> Self {
        let levels = schema
            .levels()
            .iter()
            .map(|l| LevelTruth {
                a: a.taxon(l.rank).to_string(),
                b: b.taxon(l.rank).to_string(),
            })
            .collect();
        Self { label, levels }
    }
}

/// 1 if the text parses under the schema, 0 otherwise.
pub fn structure_reward(text: &str, schema: &AttributeSchema, variant: RewardVariant) -> u8 {
    parse_trace_with(text, schema, variant.level_requirement()).is_ok() as u8
}

/// Log-likelihood of the label under the clamped prediction.
pub fn correctness_reward<S: Scalar>(y: u8, yhat: S, cfg: &RewardConfig) -> Result<S, RewardError> {
    if y > 1 {
        return Err(RewardError::Label(y));
    }
    let eps = S::of(cfg.prob_floor);
    let p = yhat.max(eps).min(S::one() - eps);
    Ok(if y == 1 { p.ln() } else { (S::one() - p).ln() })
}

pub fn worst_correctness<S: Scalar>(cfg: &RewardConfig) -> S {
    S::of(cfg.prob_floor).ln()
}

fn level_correct(pred: &TraceLevel, truth: &LevelTruth) -> bool {
    match &pred.value {
        LevelValue::Concrete { a, b } => names_match(a, &truth.a) && names_match(b, &truth.b),
        LevelValue::Binary(v) => *v == truth.verdict(),
    }
}

/// Per-level credit. A level omitted after a differing level inherits that
/// level's correctness; any other omission earns nothing.
pub fn level_credit(
    doc: &TraceDocument,
    truth: &GroundTruth,
    schema: &AttributeSchema,
) -> Vec<bool> {
    let present: Vec<bool> = doc
        .levels
        .iter()
        .zip(&truth.levels)
        .map(|(p, t)| level_correct(p, t))
        .collect();
    let inherited = match doc.levels.last() {
        Some(last) if last.value.differs() => *present.last().unwrap_or(&false),
        _ => false,
    };
    (0..schema.len())
        .map(|k| {
            if k < present.len() {
                present[k]
            } else {
                inherited
            }
        })
        .collect()
}

pub fn attribute_reward<S: Scalar>(
    doc: &TraceDocument,
    truth: &GroundTruth,
    schema: &AttributeSchema,
) -> Result<S, RewardError> {
    if truth.levels.len() != schema.len() {
        return Err(RewardError::Coverage {
            got: truth.levels.len(),
            want: schema.len(),
        });
    }
    let hits = level_credit(doc, truth, schema)
        .iter()
        .filter(|&&c| c)
        .count();
    Ok(S::of(hits as f64) / S::of(schema.len() as f64))
}

/// Weighted combination of the three components.
pub fn total_reward<S: Scalar>(
    r_struct: S,
    r_corr: S,
    r_attr: S,
    cfg: &RewardConfig,
) -> RewardBreakdown<S> {
    let lambda = S::of(cfg.lambda);
    let rest = S::one() - lambda;
    let half = rest / S::of(2.0);
    let r_total = match cfg.variant {
        RewardVariant::Intermediate => lambda * r_struct + half * r_corr + half * r_attr,
        RewardVariant::AnswerOnly => lambda * r_struct + rest * r_corr,
    };
    RewardBreakdown {
        r_struct,
        r_corr,
        r_attr,
        r_total,
    }
}

/// Parses and scores one trace. Unparseable traces get the worst correctness
/// and attribute values.
pub fn score_trace<S: Scalar>(
    text: &str,
    truth: &GroundTruth,
    schema: &AttributeSchema,
    cfg: &RewardConfig,
) -> Result<(RewardBreakdown<S>, Option<TraceDocument>), RewardError> {
    match parse_trace_with(text, schema, cfg.variant.level_requirement()) {
        Ok(doc) => {
            let corr = correctness_reward(truth.label, S::of(doc.answer), cfg)?;
            let attr = attribute_reward(&doc, truth, schema)?;
            Ok((total_reward(S::one(), corr, attr, cfg), Some(doc)))
        }
        Err(_) => {
            if truth.label > 1 {
                return Err(RewardError::Label(truth.label));
            }
            Ok((
                total_reward(S::zero(), worst_correctness(cfg), S::zero(), cfg),
                None,
            ))
        }
    }
}
