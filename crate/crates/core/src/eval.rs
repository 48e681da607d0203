//! Stratified verification accuracy, intermediate-prediction tables, format
//! adherence and length statistics over a corpus of traces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{level_credit, GroundTruth};
use crate::synthworld::PairSample;
use crate::taxonomy::{
    lowest_common_rank, names_match, AttributeMode, AttributeSchema, HierarchyKind, Stratum,
};
use crate::trace::{parse_trace_with, LevelRequirement, LevelValue, Tokenizer, TraceDocument};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trace refers to unknown pair id {0:?}")]
    UnknownPair(String),
    #[error("intermediate accuracy needs concrete level values, corpus uses binary verdicts")]
    BinaryMode,
    #[error("empty corpus")]
    Empty,
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Weighted,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decision_threshold: f64,
    pub averaging: Averaging,
    pub redistribute_visual: bool,
    /// Credit omitted levels after a differing level with that level's
    /// correctness.
    pub early_termination_credit: bool,
    /// Split decoded by `eval` when none is given on the command line.
    pub split: crate::synthworld::Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decision_threshold: 0.5,
            averaging: Averaging::Both,
            redistribute_visual: true,
            early_termination_credit: true,
            split: crate::synthworld::Split::Test,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(EvalError::Config(format!(
                "decision_threshold {} outside (0, 1)",
                self.decision_threshold
            )));
        }
        Ok(())
    }
}

/// One line of a trace corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub pair_id: String,
    pub trace: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumAccuracy {
    pub stratum: Stratum,
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntermediateRow {
    pub name: String,
    pub pairs: usize,
    /// One value per level column, then the final answer.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntermediateTable {
    pub columns: Vec<String>,
    pub rows: Vec<IntermediateRow>,
    pub macro_average: Vec<f64>,
    pub weighted_average: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub label: String,
    pub images: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Misclassified {
    pub pair_id: String,
    pub stratum: Stratum,
    pub label: u8,
    pub answer: Option<f64>,
    pub trace: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: HierarchyKind,
    pub mode: AttributeMode,
    pub pairs: usize,
    pub strata: Vec<StratumAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_average: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_average: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<IntermediateTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_accuracy: Option<Vec<TypeAccuracy>>,
    pub format_adherence: f64,
    pub length: LengthStats,
    pub misclassified: Vec<Misclassified>,
}

impl EvalReport {
    pub fn stratum(&self, s: Stratum) -> Option<&StratumAccuracy> {
        self.strata.iter().find(|a| a.stratum == s)
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 * 100.0 / total as f64
    }
}

/// Percentage of traces that parse.
pub fn format_adherence<'a>(
    traces: impl IntoIterator<Item = &'a str>,
    schema: &AttributeSchema,
    requirement: LevelRequirement,
) -> Result<f64, EvalError> {
    let (mut ok, mut n) = (0, 0);
    for t in traces {
        n += 1;
        ok += parse_trace_with(t, schema, requirement).is_ok() as usize;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(percent(ok, n))
}

pub fn length_stats(lengths: &[usize]) -> Result<LengthStats, EvalError> {
    let (&min, &max) = match (lengths.iter().min(), lengths.iter().max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(EvalError::Empty),
    };
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    Ok(LengthStats { min, mean, max })
}

pub fn trace_lengths<'a>(
    traces: impl IntoIterator<Item = &'a str>,
    tokenizer: &dyn Tokenizer,
) -> Vec<usize> {
    traces
        .into_iter()
        .map(|t| tokenizer.count_tokens(t))
        .collect()
}

/// A resolved (pair, parsed trace) input for the aggregations below.
pub struct Scored<'a> {
    pub pair: &'a PairSample,
    pub text: &'a str,
    pub doc: Option<TraceDocument>,
}

fn resolve<'a>(
    traces: &'a [TraceRecord],
    dataset: &'a [PairSample],
    schema: &AttributeSchema,
    requirement: LevelRequirement,
) -> Result<Vec<Scored<'a>>, EvalError> {
    let index: HashMap<&str, &PairSample> = dataset.iter().map(|p| (p.id.as_str(), p)).collect();
    traces
        .iter()
        .map(|t| {
            let pair = index
                .get(t.pair_id.as_str())
                .ok_or_else(|| EvalError::UnknownPair(t.pair_id.clone()))?;
            Ok(Scored {
                pair,
                text: &t.trace,
                doc: parse_trace_with(&t.trace, schema, requirement).ok(),
            })
        })
        .collect()
}

fn predicts_correctly(doc: Option<&TraceDocument>, label: u8, threshold: f64) -> bool {
    match doc {
        Some(d) => ((d.answer >= threshold) as u8) == label,
        None => false,
    }
}

/// Row a pair lands in for the intermediate table.
fn intermediate_row(pair: &PairSample, redistribute: bool) -> String {
    if pair.stratum == Stratum::Visual && redistribute {
        if let Ok(Some(rank)) = lowest_common_rank(&pair.lineage_a, &pair.lineage_b) {
            if let Some(s) = Stratum::from_common_rank(rank) {
                return s.display_name().to_string();
            }
        }
    }
    pair.stratum.display_name().to_string()
}

fn row_order(kind: HierarchyKind) -> Vec<String> {
    let mut rows: Vec<String> = match kind {
        HierarchyKind::Taxonomy => [
            Stratum::SameClass,
            Stratum::SameOrder,
            Stratum::SameFamily,
            Stratum::SameGenus,
            Stratum::SameSpecies,
        ]
        .iter()
        .map(|s| s.display_name().to_string())
        .collect(),
        HierarchyKind::Identity => Stratum::IDENTITY_COLUMNS
            .iter()
            .map(|s| s.display_name().to_string())
            .collect(),
    };
    rows.push(Stratum::Visual.display_name().to_string());
    rows
}

/// Per-level correctness of one parsed trace, with or without the
/// early-termination credit.
pub fn level_correctness(
    doc: &TraceDocument,
    pair: &PairSample,
    schema: &AttributeSchema,
    credit: bool,
) -> Vec<bool> {
    let truth = GroundTruth::from_lineages(&pair.lineage_a, &pair.lineage_b, pair.label, schema);
    let mut c = level_credit(doc, &truth, schema);
    if !credit {
        for v in c.iter_mut().skip(doc.levels.len()) {
            *v = false;
        }
    }
    c
}

/// Per-rank accuracy table, rows by true taxonomic distance.
pub fn intermediate_accuracy(
    scored: &[Scored],
    schema: &AttributeSchema,
    cfg: &EvalConfig,
) -> Result<IntermediateTable, EvalError> {
    if schema.mode() == AttributeMode::Binary {
        return Err(EvalError::BinaryMode);
    }
    let k = schema.len();
    let mut counts: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for s in scored {
        let row = intermediate_row(s.pair, cfg.redistribute_visual);
        let entry = counts.entry(row).or_insert_with(|| (0, vec![0; k + 1]));
        entry.0 += 1;
        if let Some(doc) = &s.doc {
            for (j, ok) in level_correctness(doc, s.pair, schema, cfg.early_termination_credit)
                .into_iter()
                .enumerate()
            {
                entry.1[j] += ok as usize;
            }
        }
        entry.1[k] +=
            predicts_correctly(s.doc.as_ref(), s.pair.label, cfg.decision_threshold) as usize;
    }
    let mut rows = Vec::new();
    for name in row_order(schema.kind()) {
        if let Some((n, hits)) = counts.get(&name) {
            rows.push(IntermediateRow {
                name: name.clone(),
                pairs: *n,
                accuracy: hits.iter().map(|&h| percent(h, *n)).collect(),
            });
        }
    }
    let macro_average = (0..=k)
        .map(|j| rows.iter().map(|r| r.accuracy[j]).sum::<f64>() / rows.len().max(1) as f64)
        .collect();
    let total: usize = counts.values().map(|c| c.0).sum();
    let weighted_average = (0..=k)
        .map(|j| percent(counts.values().map(|c| c.1[j]).sum(), total))
        .collect();
    let mut columns: Vec<String> = schema.levels().iter().map(|l| l.tag.clone()).collect();
    columns.push("answer".into());
    Ok(IntermediateTable {
        columns,
        rows,
        macro_average,
        weighted_average,
    })
}

/// Per-image accuracy of the first (type) level, grouped by true label.
fn type_accuracy(scored: &[Scored], schema: &AttributeSchema) -> Vec<TypeAccuracy> {
    let Some(level) = schema.levels().first() else {
        return Vec::new();
    };
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for label in &level.labels {
        counts.insert(label.clone(), (0, 0));
    }
    for s in scored {
        let truths = [
            s.pair.lineage_a.taxon(level.rank),
            s.pair.lineage_b.taxon(level.rank),
        ];
        let preds = match s.doc.as_ref().and_then(|d| d.levels.first()) {
            Some(l) if l.tag == level.tag => match &l.value {
                LevelValue::Concrete { a, b } => [Some(a.as_str()), Some(b.as_str())],
                LevelValue::Binary(_) => [None, None],
            },
            _ => [None, None],
        };
        for (t, p) in truths.iter().zip(preds) {
            let e = counts.entry(t.to_string()).or_insert((0, 0));
            e.0 += 1;
            e.1 += p.is_some_and(|p| names_match(p, t)) as usize;
        }
    }
    counts
        .into_iter()
        .map(|(label, (n, ok))| TypeAccuracy {
            label,
            images: n,
            accuracy: percent(ok, n),
        })
        .collect()
}

/// Scores a trace corpus against the dataset.
pub fn evaluate(
    traces: &[TraceRecord],
    dataset: &[PairSample],
    schema: &AttributeSchema,
    requirement: LevelRequirement,
    cfg: &EvalConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(EvalError::Empty);
    }
    let scored = resolve(traces, dataset, schema, requirement)?;
    let kind = schema.kind();
    let mut strata = Vec::new();
    for &stratum in Stratum::columns(kind) {
        let members: Vec<&Scored> = scored
            .iter()
            .filter(|s| s.pair.stratum == stratum)
            .collect();
        if members.is_empty() {
            continue;
        }
        let correct = members
            .iter()
            .filter(|s| predicts_correctly(s.doc.as_ref(), s.pair.label, cfg.decision_threshold))
            .count();
        strata.push(StratumAccuracy {
            stratum,
            name: stratum.display_name().to_string(),
            correct,
            total: members.len(),
            accuracy: percent(correct, members.len()),
        });
    }
    let total_correct: usize = strata.iter().map(|s| s.correct).sum();
    let macro_avg = strata.iter().map(|s| s.accuracy).sum::<f64>() / strata.len().max(1) as f64;
    let weighted = percent(total_correct, scored.len());
    let (macro_average, weighted_average) = match cfg.averaging {
        Averaging::Macro => (Some(macro_avg), None),
        Averaging::Weighted => (None, Some(weighted)),
        Averaging::Both => (Some(macro_avg), Some(weighted)),
    };
    let intermediate = match schema.mode() {
        AttributeMode::Concrete if requirement == LevelRequirement::Hierarchical => {
            Some(intermediate_accuracy(&scored, schema, cfg)?)
        }
        _ => None,
    };
    let type_acc = (kind == HierarchyKind::Identity && schema.mode() == AttributeMode::Concrete)
        .then(|| type_accuracy(&scored, schema));
    let misclassified = scored
        .iter()
        .filter(|s| !predicts_correctly(s.doc.as_ref(), s.pair.label, cfg.decision_threshold))
        .map(|s| Misclassified {
            pair_id: s.pair.id.clone(),
            stratum: s.pair.stratum,
            label: s.pair.label,
            answer: s.doc.as_ref().map(|d| d.answer),
            trace: s.text.to_string(),
        })
        .collect();
    let texts = || traces.iter().map(|t| t.trace.as_str());
    Ok(EvalReport {
        kind,
        mode: schema.mode(),
        pairs: scored.len(),
        strata,
        macro_average,
        weighted_average,
        intermediate,
        type_accuracy: type_acc,
        format_adherence: format_adherence(texts(), schema, requirement)?,
        length: length_stats(&trace_lengths(texts(), tokenizer))?,
        misclassified,
    })
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<w$}", c, w = w);
            } else {
                let _ = write!(s, "  {:>w$}", c, w = w);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Stratified accuracy, one row per named report.
pub fn render_accuracy_table(reports: &[(&str, &EvalReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let mut header = vec!["Method".to_string()];
    header.extend(first.strata.iter().map(|s| s.name.clone()));
    let has_macro = first.macro_average.is_some();
    let has_weighted = first.weighted_average.is_some();
    if has_macro {
        header.push("Macro Avg".into());
    }
    if has_weighted {
        header.push("Weighted Avg".into());
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.to_string()];
            for s in &first.strata {
                row.push(
                    r.stratum(s.stratum)
                        .map_or("-".into(), |a| format!("{:.1}", a.accuracy)),
                );
            }
            if has_macro {
                row.push(r.macro_average.map_or("-".into(), |v| format!("{v:.1}")));
            }
            if has_weighted {
                row.push(r.weighted_average.map_or("-".into(), |v| format!("{v:.1}")));
            }
            row
        })
        .collect();
    render_table(&header, &rows)
}

pub fn render_intermediate_table(t: &IntermediateTable) -> String {
    let mut header = vec!["Category".to_string()];
    header.extend(t.columns.iter().map(|c| {
        let mut s = c.clone();
        if let Some(f) = s.get_mut(0..1) {
            f.make_ascii_uppercase();
        }
        s
    }));
    let fmt_row = |name: &str, vals: &[f64]| {
        let mut r = vec![name.to_string()];
        r.extend(vals.iter().map(|v| format!("{v:.1}")));
        r
    };
    let mut rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| fmt_row(&r.name, &r.accuracy))
        .collect();
    rows.push(fmt_row("Macro Avg", &t.macro_average));
    rows.push(fmt_row("Weighted Avg", &t.weighted_average));
    render_table(&header, &rows)
}

pub fn render_length_table(rows: &[(&str, &LengthStats)]) -> String {
    let header = ["Method", "Min", "Mean", "Max"].map(String::from).to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(n, l)| {
            vec![
                n.to_string(),
                l.min.to_string(),
                format!("{:.2}", l.mean),
                l.max.to_string(),
            ]
        })
        .collect();
    render_table(&header, &body)
}

/// Every table of one report as plain text.
pub fn render_report(name: &str, r: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("Verification accuracy (%)\n");
    out.push_str(&render_accuracy_table(&[(name, r)]));
    if let Some(t) = &r.intermediate {
        out.push_str("\nIntermediate prediction accuracy (%)\n");
        out.push_str(&render_intermediate_table(t));
    }
    if let Some(types) = &r.type_accuracy {
        out.push_str("\nType prediction accuracy (%)\n");
        let header = ["Type", "Images", "Accuracy"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = types
            .iter()
            .map(|t| {
                vec![
                    t.label.clone(),
                    t.images.to_string(),
                    format!("{:.1}", t.accuracy),
                ]
            })
            .collect();
        out.push_str(&render_table(&header, &rows));
    }
    out.push_str("\nOutput length (tokens)\n");
    out.push_str(&render_length_table(&[(name, &r.length)]));
    let _ = writeln!(out, "\nFormat adherence: {:.1}%", r.format_adherence);
    let _ = writeln!(out, "Misclassified pairs: {}", r.misclassified.len());
    out
}
