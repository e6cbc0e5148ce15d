//! Accuracy and F1 metrics, the evaluator ablation, and report emission.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalItem, EvalOutcome, Evaluator, EvaluatorConfig, ImageSource, Refinements};
use crate::label::ReferenceDb;
use crate::clients::Clients;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of scores at or above `tau_reward`.
pub fn accuracy(scores: &[f64], tau_reward: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = scores.iter().filter(|&&s| s >= tau_reward).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean and sample standard deviation of per-seed accuracies, in percent.
pub fn aggregate_seeds(per_seed: &[f64]) -> Result<(f64, f64)> {
    if per_seed.len() < 2 {
        return Err(Error::TooFewSeeds(per_seed.len()));
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean * 100.0, var.sqrt() * 100.0))
}

/// `"30.3 ± 0.8"` style rendering of percentages.
pub fn format_mean_std(mean_pct: f64, std_pct: f64) -> String {
    format!("{mean_pct:.1} ± {std_pct:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub schema_version: u32,
    pub method: String,
    pub tau_reward: f64,
    pub per_seed: Vec<SeedAccuracy>,
    /// Percent.
    pub mean: f64,
    /// Sample standard deviation, percent.
    pub std: f64,
    pub n_items: usize,
}

impl AccuracyReport {
    /// Group outcomes by seed and aggregate. With `seeds` given, only those
    /// seeds are used, in that order, and each must have outcomes.
    pub fn from_outcomes(method: &str, outcomes: &[EvalOutcome], tau_reward: f64, seeds: Option<&[u64]>) -> Result<Self> {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for o in outcomes {
            let seed = o.seed.ok_or_else(|| {
                Error::InvalidInput(format!("outcome `{}` has no seed", o.image_id))
            })?;
            by_seed.entry(seed).or_default().push(o.score);
        }
        let order: Vec<u64> = match seeds {
            Some(s) => s.to_vec(),
            None => by_seed.keys().copied().collect(),
        };
        let mut per_seed = Vec::with_capacity(order.len());
        for seed in order {
            let scores = by_seed
                .get(&seed)
                .ok_or_else(|| Error::InvalidInput(format!("no outcomes for seed {seed}")))?;
            per_seed.push(SeedAccuracy {
                seed,
                accuracy: accuracy(scores, tau_reward)?,
                n: scores.len(),
            });
        }
        let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = aggregate_seeds(&accs)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.to_string(),
            tau_reward,
            n_items: per_seed.iter().map(|s| s.n).sum(),
            per_seed,
            mean,
            std,
        })
    }

    pub fn summary(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

/// Human verdict for one image, as stored in annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub image_id: String,
    pub human_label: bool,
}

/// Human verdict paired with the evaluator's prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub human_label: bool,
    pub predicted: bool,
}

/// An image counts as predicted positive when its score is strictly positive.
pub fn predicted_positive(score: f64) -> bool {
    score > 0.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            match (r.predicted, r.human_label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn f1(annotations: &[AnnotationRecord]) -> Result<f64> {
    if annotations.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Confusion::from_records(annotations).f1())
}

/// Evaluator variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    WithoutAdaptiveThresholds,
    WithoutAdaptiveThresholdsAndLabelVerification,
    /// Raw detector output only.
    WithoutAllRefinements,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::WithoutAdaptiveThresholds,
        AblationVariant::WithoutAdaptiveThresholdsAndLabelVerification,
        AblationVariant::WithoutAllRefinements,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutAdaptiveThresholds => "without_adaptive_thresholds",
            AblationVariant::WithoutAdaptiveThresholdsAndLabelVerification => {
                "without_adaptive_thresholds_and_label_verification"
            }
            AblationVariant::WithoutAllRefinements => "without_all_refinements",
        }
    }

    pub fn refinements(self) -> Refinements {
        let all = Refinements::all();
        match self {
            AblationVariant::Full => all,
            AblationVariant::WithoutAdaptiveThresholds => Refinements {
                adaptive_thresholds: false,
                ..all
            },
            AblationVariant::WithoutAdaptiveThresholdsAndLabelVerification => Refinements {
                adaptive_thresholds: false,
                label_verification: false,
                ..all
            },
            AblationVariant::WithoutAllRefinements => Refinements::none(),
        }
    }

    /// `base` with this variant's refinements applied.
    pub fn config(self, base: &EvaluatorConfig) -> EvaluatorConfig {
        EvaluatorConfig {
            refinements: self.refinements(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub f1: f64,
    /// 1 = best F1; ties share a rank.
    pub rank: usize,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub n: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Images plus human verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedCorpus {
    pub items: Vec<EvalItem>,
    pub annotations: Vec<HumanAnnotation>,
}

impl AnnotatedCorpus {
    pub fn load(items: impl AsRef<Path>, annotations: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            items: crate::jsonl::read_jsonl(items)?,
            annotations: crate::jsonl::read_jsonl(annotations)?,
        })
    }

    fn labels(&self) -> Result<HashMap<&str, bool>> {
        let mut map = HashMap::new();
        for a in &self.annotations {
            if map.insert(a.image_id.as_str(), a.human_label).is_some() {
                return Err(Error::InvalidInput(format!("duplicate annotation for `{}`", a.image_id)));
            }
        }
        Ok(map)
    }
}

/// Evaluate the corpus under every variant and score predictions against the annotations.
pub fn run_ablation(
    corpus: &AnnotatedCorpus,
    clients: &Clients,
    images: &dyn ImageSource,
    db: &ReferenceDb,
    base_config: &EvaluatorConfig,
    parallelism: usize,
) -> Result<AblationTable> {
    if corpus.items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let labels = corpus.labels()?;
    if let Some(missing) = corpus.items.iter().find(|i| !labels.contains_key(i.image_id.as_str())) {
        return Err(Error::InvalidInput(format!("no annotation for `{}`", missing.image_id)));
    }

    let mut rows = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let config = variant.config(base_config);
        config.validate()?;
        let evaluator = Evaluator::new(clients, images, db, &config);
        let mut records = Vec::new();
        let mut errors = Vec::new();
        for (item, result) in corpus.items.iter().zip(evaluator.evaluate_batch(&corpus.items, parallelism)) {
            match result {
                Ok(outcome) => records.push(AnnotationRecord {
                    image_id: item.image_id.clone(),
                    human_label: labels[item.image_id.as_str()],
                    predicted: predicted_positive(outcome.score),
                }),
                Err(e) => errors.push(format!("{}: {e}", item.image_id)),
            }
        }
        let confusion = Confusion::from_records(&records);
        rows.push(AblationRow {
            variant,
            f1: confusion.f1(),
            rank: 0,
            confusion,
            n: records.len(),
            errors,
        });
    }
    let f1s: Vec<f64> = rows.iter().map(|r| r.f1).collect();
    for row in &mut rows {
        row.rank = 1 + f1s.iter().filter(|&&f| f > row.f1).count();
    }
    Ok(AblationTable {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidInput(format!("unknown report format `{other}`"))),
        }
    }
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Render an accuracy report. CSV columns: `method,mean,std,n`.
pub fn render_accuracy(report: &AccuracyReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => json_string(report),
        ReportFormat::Csv => csv_string(
            &["method", "mean", "std", "n"],
            vec![vec![
                report.method.clone(),
                format!("{:.1}", report.mean),
                format!("{:.1}", report.std),
                report.n_items.to_string(),
            ]],
        ),
    }
}

/// Render an ablation table, one row per variant.
pub fn render_ablation(table: &AblationTable, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => json_string(table),
        ReportFormat::Csv => csv_string(
            &["variant", "f1", "rank", "tp", "fp", "fn", "tn", "n", "errors"],
            table
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.variant.name().to_string(),
                        format!("{:.6}", r.f1),
                        r.rank.to_string(),
                        r.confusion.tp.to_string(),
                        r.confusion.fp.to_string(),
                        r.confusion.fn_.to_string(),
                        r.confusion.tn.to_string(),
                        r.n.to_string(),
                        r.errors.len().to_string(),
                    ]
                })
                .collect(),
        ),
    }
}

/// Write rendered report text to `path`.
pub fn emit_report(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ann(human: bool, predicted: bool) -> AnnotationRecord {
        AnnotationRecord {
            image_id: String::new(),
            human_label: human,
            predicted,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1.5, -1.0, 1.5, 0.5], 1.5).unwrap(), 0.5);
        assert_eq!(accuracy(&[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(accuracy(&[-1.0, -3.375], 1.0).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], 1.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn seed_aggregation() {
        let (m, s) = aggregate_seeds(&[0.30, 0.30, 0.30]).unwrap();
        assert_eq!(format_mean_std(m, s), "30.0 ± 0.0");
        let (m, s) = aggregate_seeds(&[0.29, 0.30, 0.31]).unwrap();
        assert_relative_eq!(m, 30.0, epsilon = 1e-9);
        assert_relative_eq!(s, 1.0, epsilon = 1e-9);
        assert_eq!(format_mean_std(m, s), "30.0 ± 1.0");
        assert!(matches!(aggregate_seeds(&[0.3]), Err(Error::TooFewSeeds(1))));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[ann(true, true), ann(false, false)]).unwrap(), 1.0);
        let mut recs = vec![ann(true, true); 3];
        recs.push(ann(false, true));
        recs.push(ann(true, false));
        assert_relative_eq!(f1(&recs).unwrap(), 0.75);
        assert_eq!(f1(&[ann(true, false), ann(false, false)]).unwrap(), 0.0);
        assert_eq!(f1(&[ann(false, false)]).unwrap(), 0.0);
        assert!(matches!(f1(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn variants_differ_only_in_named_toggles() {
        let full = AblationVariant::Full.refinements();
        assert_eq!(full, Refinements::all());
        let na = AblationVariant::WithoutAdaptiveThresholds.refinements();
        assert!(!na.adaptive_thresholds && na.label_verification && na.exclusive_masks && na.tiny_filter);
        let nal = AblationVariant::WithoutAdaptiveThresholdsAndLabelVerification.refinements();
        assert!(!nal.adaptive_thresholds && !nal.label_verification && nal.exclusive_masks && nal.tiny_filter);
        assert_eq!(AblationVariant::WithoutAllRefinements.refinements(), Refinements::none());

        let base = EvaluatorConfig::default();
        for v in AblationVariant::ALL {
            let c = v.config(&base);
            assert_eq!(EvaluatorConfig { refinements: base.refinements, ..c.clone() }, base);
        }
    }

    #[test]
    fn accuracy_csv() {
        let report = AccuracyReport {
            schema_version: 1,
            method: "ours".into(),
            tau_reward: 1.0,
            per_seed: vec![],
            mean: 30.333,
            std: 0.81,
            n_items: 12,
        };
        let csv = render_accuracy(&report, ReportFormat::Csv).unwrap();
        assert_eq!(csv, "method,mean,std,n\nours,30.3,0.8,12\n");
    }

    #[test]
    fn unknown_format() {
        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }
}
