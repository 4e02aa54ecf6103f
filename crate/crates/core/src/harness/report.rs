//! The run's evaluation record and its JSON, CSV and scatter exports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ReportFormat;
use crate::attacks::{AttackConfig, Mode};
use crate::dedup::OverlapReport;
use crate::error::{invalid, Error, Result};
use crate::metrics::{
    compute_robustness_gaps, corruption_summary, fit_baseline_trend, format_attack_cell, format_points, probit, AttackSummary, BaselineTrend,
    CorruptionSummary, EvalRecord, RecordKind, ScatterRow, StabilityReport,
};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SCATTER_JSON: &str = "scatter.json";
pub const SCATTER_CSV: &str = "scatter.csv";
/// Evenly spaced trend samples in the scatter export.
pub const TREND_SAMPLES: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Supervised model under study.
    Supervised,
    /// Extra supervised model; only defines the trend.
    Baseline,
    ZeroShot,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Supervised => "supervised",
            ModelFamily::Baseline => "baseline",
            ModelFamily::ZeroShot => "zero_shot",
        }
    }

    /// Standard (supervised) models define β.
    pub fn on_trend(self) -> bool {
        self != ModelFamily::ZeroShot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub family: ModelFamily,
    pub snapshot_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub config_hash: String,
    /// `(dataset name, content hash)`.
    pub datasets: Vec<(String, String)>,
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub model: String,
    /// `(corruption, accuracy per severity)`.
    pub grid: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub model: String,
    pub report: StabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub model: String,
    /// Substitute model of a transfer attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub access: String,
    pub config: AttackConfig,
    /// Per-sample records, relative to the run directory.
    pub records: String,
    pub summary: AttackSummary,
}

/// Table-1 cell: median minimum distance next to accuracy at the table budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub method: String,
    pub median_min_linf: f64,
    pub accuracy: f64,
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypographicResult {
    pub model: String,
    pub success_rate: f64,
    pub accuracy: f64,
    pub count: usize,
    pub k_coords: usize,
    pub truncated_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupResult {
    pub encoder_id: String,
    pub model: String,
    pub sweep: Vec<OverlapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub rendered: Vec<String>,
    pub validation_accuracy: Vec<f64>,
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub dataset: String,
    pub trend: BaselineTrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub model: String,
    pub dataset: String,
    /// Comparison model of a relative gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<String>,
    /// Percentage points.
    pub value: f64,
    pub formatted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMean {
    pub model: String,
    pub summary: CorruptionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypographicComparison {
    pub zero_shot_model: String,
    pub zero_shot_success: f64,
    pub supervised_model: String,
    pub supervised_success: f64,
    pub zero_shot_more_susceptible: bool,
}

/// Values computed from the primitives above by [`derive`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub trends: Vec<TrendResult>,
    pub effective: Vec<GapResult>,
    pub relative: Vec<GapResult>,
    pub corruption: Vec<CorruptionMean>,
    pub attack_cells: Vec<AttackCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typographic: Option<TypographicComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub version: u32,
    pub metadata: Metadata,
    /// Clean and shifted accuracies of every model.
    pub runs: Vec<EvalRecord>,
    pub corruptions: Vec<CorruptionResult>,
    pub stability: Vec<StabilityResult>,
    pub attacks: Vec<AttackResult>,
    pub typographic: Vec<TypographicResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup: Option<DedupResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PromptSummary>,
    pub failures: Vec<StageFailure>,
    pub derived: Derived,
}

/// The dataset id of clean test accuracies.
pub const CLEAN: &str = "clean";

/// Recomputes every derived value from the report's primitives.
///
/// Each shifted dataset gets a probit trend over the standard models (when
/// at least two have distinct clean accuracy), effective robustness for
/// every model, and relative robustness of each zero-shot model over the
/// supervised one.
pub fn derive(
    metadata: &Metadata,
    runs: &[EvalRecord],
    corruptions: &[CorruptionResult],
    attacks: &[AttackResult],
    typographic: &[TypographicResult],
) -> Result<Derived> {
    let family = |m: &str| metadata.models.iter().find(|e| e.name == m).map(|e| e.family);
    let find = |m: &str, d: &str| runs.iter().find(|r| r.model_id == m && r.dataset_id == d);
    let mut shifts: Vec<&str> = Vec::new();
    for r in runs.iter().filter(|r| r.kind == RecordKind::Shift) {
        if !shifts.contains(&r.dataset_id.as_str()) {
            shifts.push(&r.dataset_id);
        }
    }
    let supervised = metadata.models.iter().find(|m| m.family == ModelFamily::Supervised).map(|m| m.name.as_str());
    let mut out = Derived::default();
    for shift in shifts {
        let points: Vec<(f64, f64)> = metadata
            .models
            .iter()
            .filter(|m| m.family.on_trend())
            .filter_map(|m| Some((find(&m.name, CLEAN)?.accuracy, find(&m.name, shift)?.accuracy)))
            .collect();
        let trend = match fit_baseline_trend(&points) {
            Ok(t) => t,
            Err(Error::DegenerateFit(_)) => continue,
            Err(e) => return Err(e),
        };
        for m in &metadata.models {
            let (Some(std), Some(sh)) = (find(&m.name, CLEAN), find(&m.name, shift)) else { continue };
            let other = match (m.family, supervised) {
                (ModelFamily::ZeroShot, Some(s)) => find(s, shift),
                _ => None,
            };
            let gaps = compute_robustness_gaps(std, sh, &trend, other)?;
            out.effective.push(GapResult {
                model: m.name.clone(),
                dataset: shift.to_string(),
                other: None,
                value: gaps.effective,
                formatted: format_points(gaps.effective),
            });
            if let (Some(rel), Some(o)) = (gaps.relative, other) {
                out.relative.push(GapResult {
                    model: m.name.clone(),
                    dataset: shift.to_string(),
                    other: Some(o.model_id.clone()),
                    value: rel,
                    formatted: format_points(rel),
                });
            }
        }
        out.trends.push(TrendResult { dataset: shift.to_string(), trend });
    }
    for c in corruptions {
        out.corruption.push(CorruptionMean { model: c.model.clone(), summary: corruption_summary(&c.grid)? });
    }
    out.attack_cells = attack_cells(attacks);
    let success = |f: ModelFamily| {
        typographic
            .iter()
            .filter(|t| family(&t.model) == Some(f))
            .max_by(|a, b| a.success_rate.total_cmp(&b.success_rate).then(b.model.cmp(&a.model)))
    };
    if let (Some(z), Some(s)) = (success(ModelFamily::ZeroShot), typographic.iter().find(|t| Some(t.model.as_str()) == supervised)) {
        out.typographic = Some(TypographicComparison {
            zero_shot_model: z.model.clone(),
            zero_shot_success: z.success_rate,
            supervised_model: s.model.clone(),
            supervised_success: s.success_rate,
            zero_shot_more_susceptible: z.success_rate > s.success_rate,
        });
    }
    Ok(out)
}

/// Budget whose accuracy sits next to the median distance in a Table-1 cell.
pub const TABLE_EPSILON: f64 = 8.0 / 255.0;

/// Pairs each minimum-perturbation run with the budgeted run of the same
/// model, source and method at [`TABLE_EPSILON`].
pub fn attack_cells(attacks: &[AttackResult]) -> Vec<AttackCell> {
    attacks
        .iter()
        .filter(|a| a.config.mode == Mode::MinPerturbation)
        .filter_map(|m| {
            let median = m.summary.median_min_linf?;
            let budgeted = attacks.iter().find(|b| {
                b.config.mode == Mode::Budgeted
                    && b.model == m.model
                    && b.source == m.source
                    && b.config.method == m.config.method
                    && (b.config.epsilon - TABLE_EPSILON).abs() < 1e-9
            })?;
            let accuracy = budgeted.summary.robust_accuracy;
            Some(AttackCell {
                model: m.model.clone(),
                source: m.source.clone(),
                method: m.config.method.as_str().to_string(),
                median_min_linf: median,
                accuracy,
                cell: format_attack_cell(median, accuracy),
            })
        })
        .collect()
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if r.version != REPORT_VERSION {
            return Err(invalid(format!("report version {} is not supported", r.version)));
        }
        Ok(r)
    }
}

/// One line of the flat CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub section: String,
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub value: String,
}

fn row(section: &str, model: &str, dataset: &str, metric: &str, value: impl ToString) -> CsvRow {
    CsvRow { section: section.into(), model: model.into(), dataset: dataset.into(), metric: metric.into(), value: value.to_string() }
}

/// Flattens the report; floats use the shortest text that parses back to
/// the same value.
pub fn csv_rows(report: &RobustnessReport) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for m in &report.metadata.models {
        rows.push(row("model", &m.name, "", "family", m.family.as_str()));
    }
    for r in &report.runs {
        let kind = match r.kind {
            RecordKind::Standard => "standard",
            RecordKind::Shift => "shift",
            RecordKind::Attack => "attack",
        };
        rows.push(row("accuracy", &r.model_id, &r.dataset_id, kind, r.accuracy));
    }
    for c in &report.corruptions {
        for (name, accs) in &c.grid {
            for (s, a) in accs.iter().enumerate() {
                rows.push(row("corruption", &c.model, name, &format!("severity_{}", s + 1), a));
            }
        }
    }
    for s in &report.stability {
        for k in &s.report.kinds {
            rows.push(row("stability", &s.model, &k.kind, "fr_raw", k.fr_raw));
            rows.push(row("stability", &s.model, &k.kind, "t5d_raw", k.t5d_raw));
            if let Some(v) = k.fr_normalized {
                rows.push(row("stability", &s.model, &k.kind, "fr_normalized", v));
            }
            if let Some(v) = k.t5d_normalized {
                rows.push(row("stability", &s.model, &k.kind, "t5d_normalized", v));
            }
        }
        if let Some(v) = s.report.mfr {
            rows.push(row("stability", &s.model, "", "mfr", v));
        }
        if let Some(v) = s.report.mt5d {
            rows.push(row("stability", &s.model, "", "mt5d", v));
        }
    }
    for a in &report.attacks {
        let label = attack_label(a);
        rows.push(row("attack", &a.model, &label, "robust_accuracy", a.summary.robust_accuracy));
        rows.push(row("attack", &a.model, &label, "success_rate", a.summary.success_rate));
        if let Some(m) = a.summary.median_min_linf {
            rows.push(row("attack", &a.model, &label, "median_min_linf", m));
        }
    }
    for t in &report.typographic {
        rows.push(row("typographic", &t.model, "typographic", "success_rate", t.success_rate));
        rows.push(row("typographic", &t.model, "typographic", "accuracy", t.accuracy));
    }
    if let Some(d) = &report.dedup {
        for r in &d.sweep {
            let t = r.threshold.to_string();
            rows.push(row("dedup", &d.model, &t, "overlap_fraction", r.overlap_fraction));
            rows.push(row("dedup", &d.model, &t, "accuracy_full", r.accuracy_full));
            rows.push(row("dedup", &d.model, &t, "accuracy_cleaned", r.accuracy_cleaned.map_or(crate::dedup::UNDEFINED.to_string(), |a| a.to_string())));
        }
    }
    let d = &report.derived;
    for t in &d.trends {
        rows.push(row("trend", "", &t.dataset, "slope", t.trend.slope));
        rows.push(row("trend", "", &t.dataset, "intercept", t.trend.intercept));
        rows.push(row("trend", "", &t.dataset, "transform", t.trend.transform.as_str()));
    }
    for g in &d.effective {
        rows.push(row("effective", &g.model, &g.dataset, "points", g.value));
    }
    for g in &d.relative {
        rows.push(row("relative", &g.model, &g.dataset, &format!("points_over:{}", g.other.as_deref().unwrap_or_default()), g.value));
    }
    for c in &d.corruption {
        for (name, mean) in &c.summary.per_corruption {
            rows.push(row("corruption_mean", &c.model, name, "mean", mean));
        }
        rows.push(row("corruption_mean", &c.model, "", "overall", c.summary.overall));
    }
    for c in &d.attack_cells {
        let from = c.source.as_deref().map(|s| format!(":from={s}")).unwrap_or_default();
        rows.push(row("attack_cell", &c.model, &format!("{}{from}", c.method), "cell", &c.cell));
    }
    if let Some(t) = &d.typographic {
        rows.push(row("typographic_gap", &t.zero_shot_model, &t.supervised_model, "zero_shot_more_susceptible", t.zero_shot_more_susceptible));
    }
    for f in &report.failures {
        rows.push(row("failure", "", &f.stage, "error", &f.error));
    }
    rows
}

fn attack_label(a: &AttackResult) -> String {
    let base = format!("{}:{}:{}:{}", a.access, a.config.method.as_str(), a.config.mode.as_str(), a.config.epsilon);
    match &a.source {
        Some(s) => format!("{base}:from={s}"),
        None => base,
    }
}

pub fn write_csv(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(bytes).deserialize().map(|r| r.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Figure-1 style plot data for one shifted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub dataset: String,
    pub transform: String,
    pub points: Vec<ScatterRow>,
    /// `(a, β(a))` over the accuracy range, plus every trend source point.
    pub trend: Vec<ScatterRow>,
    /// `y = x` at the same abscissae.
    pub ideal: Vec<ScatterRow>,
}

pub fn scatter_series(report: &RobustnessReport) -> Vec<ScatterSeries> {
    let find = |m: &str, d: &str| report.runs.iter().find(|r| r.model_id == m && r.dataset_id == d);
    report
        .derived
        .trends
        .iter()
        .map(|t| {
            let points = report
                .metadata
                .models
                .iter()
                .filter_map(|m| Some(ScatterRow::new(find(&m.name, CLEAN)?.accuracy, find(&m.name, &t.dataset)?.accuracy, &m.name)))
                .collect();
            let mut xs: Vec<f64> = t.trend.samples(0.01, 0.99, TREND_SAMPLES).into_iter().map(|(a, _)| a).collect();
            xs.extend(t.trend.source.iter().map(|(a, _)| *a));
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            ScatterSeries {
                dataset: t.dataset.clone(),
                transform: t.trend.transform.as_str().to_string(),
                points,
                trend: xs.iter().map(|&a| ScatterRow::new(a, t.trend.beta(a), "trend")).collect(),
                ideal: xs.iter().map(|&a| ScatterRow::new(a, a, "y=x")).collect(),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ScatterCsvRow<'a> {
    dataset: &'a str,
    series: &'a str,
    tag: &'a str,
    acc1: f64,
    acc2: f64,
    probit_acc1: f64,
    probit_acc2: f64,
}

fn scatter_csv(series: &[ScatterSeries]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in series {
        for (name, rows) in [("point", &s.points), ("trend", &s.trend), ("ideal", &s.ideal)] {
            for r in rows {
                w.serialize(ScatterCsvRow {
                    dataset: &s.dataset,
                    series: name,
                    tag: &r.tag,
                    acc1: r.acc1,
                    acc2: r.acc2,
                    probit_acc1: r.probit_acc1,
                    probit_acc2: r.probit_acc2,
                })
                .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Writes `report` in `format` under `dir`; returns the files written.
pub fn emit_report(report: &RobustnessReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files: Vec<(&str, Vec<u8>)> = match format {
        ReportFormat::Json => vec![(REPORT_JSON, report.to_json()?)],
        ReportFormat::Csv => vec![(REPORT_CSV, write_csv(&csv_rows(report))?)],
        ReportFormat::Scatter => {
            let series = scatter_series(report);
            let mut json = serde_json::to_vec_pretty(&series)?;
            json.push(b'\n');
            vec![(SCATTER_JSON, json), (SCATTER_CSV, scatter_csv(&series)?)]
        }
    };
    files
        .into_iter()
        .map(|(name, bytes)| {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}

/// Probit-space residual of a point against a trend.
pub fn trend_residual(trend: &BaselineTrend, acc1: f64, acc2: f64) -> f64 {
    probit(acc2) - (trend.slope * probit(acc1) + trend.intercept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Method;
    use crate::metrics::KindStability;

    fn rec(model: &str, dataset: &str, acc: f64) -> EvalRecord {
        let kind = if dataset == CLEAN { RecordKind::Standard } else { RecordKind::Shift };
        EvalRecord { model_id: model.into(), dataset_id: dataset.into(), accuracy: acc, kind, correct: 0, total: 0 }
    }

    fn entry(name: &str, family: ModelFamily) -> ModelEntry {
        ModelEntry { name: name.into(), family, snapshot_id: format!("id-{name}") }
    }

    fn sample_report() -> RobustnessReport {
        let metadata = Metadata {
            seed: 7,
            config_hash: "abc".into(),
            datasets: vec![],
            models: vec![
                entry("supervised", ModelFamily::Supervised),
                entry("baseline/a", ModelFamily::Baseline),
                entry("baseline/b", ModelFamily::Baseline),
                entry("zero-shot", ModelFamily::ZeroShot),
            ],
        };
        let runs = vec![
            rec("supervised", CLEAN, 0.9),
            rec("supervised", "texture", 0.41),
            rec("baseline/a", CLEAN, 0.6),
            rec("baseline/a", "texture", 0.22),
            rec("baseline/b", CLEAN, 0.75),
            rec("baseline/b", "texture", 0.35),
            rec("zero-shot", CLEAN, 0.7),
            rec("zero-shot", "texture", 0.55),
        ];
        let corruptions = vec![CorruptionResult { model: "zero-shot".into(), grid: vec![("noise".into(), vec![0.9, 0.8, 0.7, 0.6, 0.5])] }];
        let typographic = vec![
            TypographicResult { model: "supervised".into(), success_rate: 0.1, accuracy: 0.8, count: 10, k_coords: 4, truncated_count: 0 },
            TypographicResult { model: "zero-shot".into(), success_rate: 0.6, accuracy: 0.3, count: 10, k_coords: 4, truncated_count: 0 },
        ];
        let stability = vec![StabilityResult {
            model: "zero-shot".into(),
            report: StabilityReport {
                kinds: vec![KindStability {
                    kind: "shift".into(),
                    fr_raw: 0.25,
                    t5d_raw: 1.5,
                    fr_normalized: Some(125.0),
                    t5d_normalized: Some(80.0),
                    error: None,
                }],
                mfr: Some(125.0),
                mt5d: Some(80.0),
                reference_id: Some("id-supervised".into()),
            },
        }];
        let summary = AttackSummary {
            count: 4,
            robust_accuracy: 0.25,
            success_rate: 0.75,
            median_min_linf: Some(0.0125),
            unfound_count: 0,
            flagged_count: 0,
            total_queries: 40,
        };
        let attack = |config: AttackConfig, summary: AttackSummary| AttackResult {
            model: "zero-shot".into(),
            source: None,
            access: "white_box".into(),
            config,
            records: "attacks/x.jsonl".into(),
            summary,
        };
        let budgeted = AttackSummary { robust_accuracy: 0.5, median_min_linf: None, ..summary.clone() };
        let attacks = vec![
            attack(AttackConfig::min_perturbation(Method::Fgsm), summary.clone()),
            attack(AttackConfig::budgeted(Method::Fgsm, 4.0 / 255.0), summary.clone()),
            attack(AttackConfig::budgeted(Method::Fgsm, 8.0 / 255.0), budgeted),
        ];
        let derived = derive(&metadata, &runs, &corruptions, &attacks, &typographic).unwrap();
        RobustnessReport {
            version: REPORT_VERSION,
            metadata,
            runs,
            corruptions,
            stability,
            attacks,
            typographic,
            dedup: None,
            prompts: None,
            failures: vec![],
            derived,
        }
    }

    #[test]
    fn derived_values() {
        let r = sample_report();
        assert_eq!(r.derived.trends.len(), 1);
        assert_eq!(r.derived.trends[0].trend.source.len(), 3);
        let rel = &r.derived.relative[0];
        assert_eq!(rel.other.as_deref(), Some("supervised"));
        assert!((rel.value - 14.0).abs() < 1e-9);
        let t = r.derived.typographic.as_ref().unwrap();
        assert!(t.zero_shot_more_susceptible);
        assert!((r.derived.corruption[0].summary.overall - 0.7).abs() < 1e-12);
        assert_eq!(r.derived.attack_cells.len(), 1);
        assert_eq!(r.derived.attack_cells[0].cell, "0.013 / 50.00");
    }

    #[test]
    fn json_round_trip() {
        let r = sample_report();
        let back: RobustnessReport = serde_json::from_slice(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    /// Rebuilds the primitives from the CSV alone and recomputes every
    /// derived number.
    #[test]
    fn csv_reimport_reproduces_derived_metrics() {
        let r = sample_report();
        let rows = read_csv(&write_csv(&csv_rows(&r)).unwrap()).unwrap();
        let num = |v: &str| v.parse::<f64>().unwrap();
        let models: Vec<ModelEntry> = rows
            .iter()
            .filter(|x| x.section == "model")
            .map(|x| {
                let family = match x.value.as_str() {
                    "supervised" => ModelFamily::Supervised,
                    "baseline" => ModelFamily::Baseline,
                    _ => ModelFamily::ZeroShot,
                };
                ModelEntry { name: x.model.clone(), family, snapshot_id: String::new() }
            })
            .collect();
        let runs: Vec<EvalRecord> = rows.iter().filter(|x| x.section == "accuracy").map(|x| rec(&x.model, &x.dataset, num(&x.value))).collect();
        let mut grid: Vec<CorruptionResult> = Vec::new();
        for x in rows.iter().filter(|x| x.section == "corruption") {
            if grid.last().is_none_or(|g| g.model != x.model) {
                grid.push(CorruptionResult { model: x.model.clone(), grid: vec![] });
            }
            let g = grid.last_mut().unwrap();
            if g.grid.last().is_none_or(|(n, _)| *n != x.dataset) {
                g.grid.push((x.dataset.clone(), vec![]));
            }
            g.grid.last_mut().unwrap().1.push(num(&x.value));
        }
        let typo_val = |m: &str, metric: &str| {
            rows.iter().find(|x| x.section == "typographic" && x.model == m && x.metric == metric).map(|x| num(&x.value)).unwrap()
        };
        let typographic: Vec<TypographicResult> = ["supervised", "zero-shot"]
            .iter()
            .map(|m| TypographicResult {
                model: m.to_string(),
                success_rate: typo_val(m, "success_rate"),
                accuracy: typo_val(m, "accuracy"),
                count: 10,
                k_coords: 4,
                truncated_count: 0,
            })
            .collect();
        let metadata = Metadata { models, ..r.metadata.clone() };
        let derived = derive(&metadata, &runs, &grid, &r.attacks, &typographic).unwrap();
        let exported = |section: &str, model: &str, dataset: &str| {
            rows.iter().find(|x| x.section == section && x.model == model && x.dataset == dataset).map(|x| num(&x.value)).unwrap()
        };
        for g in &derived.effective {
            assert_eq!(g.value, exported("effective", &g.model, &g.dataset));
        }
        for g in &derived.relative {
            assert_eq!(g.value, exported("relative", &g.model, &g.dataset));
        }
        assert_eq!(derived.trends[0].trend.slope, num(&rows.iter().find(|x| x.metric == "slope").unwrap().value));
        assert_eq!(derived.corruption[0].summary.overall, exported("corruption_mean", "zero-shot", ""));
        assert_eq!(derived, r.derived);
        // Stability aggregates: mean over normalized kinds.
        let fr: Vec<f64> = rows.iter().filter(|x| x.metric == "fr_normalized").map(|x| num(&x.value)).collect();
        assert_eq!(fr.iter().sum::<f64>() / fr.len() as f64, exported("stability", "zero-shot", ""));
    }

    #[test]
    fn trend_sources_lie_on_emitted_trend() {
        let metadata = Metadata {
            seed: 0,
            config_hash: String::new(),
            datasets: vec![],
            models: vec![entry("a", ModelFamily::Baseline), entry("b", ModelFamily::Baseline), entry("z", ModelFamily::ZeroShot)],
        };
        let runs = vec![rec("a", CLEAN, 0.55), rec("a", "s", 0.2), rec("b", CLEAN, 0.85), rec("b", "s", 0.45), rec("z", CLEAN, 0.6), rec("z", "s", 0.5)];
        let derived = derive(&metadata, &runs, &[], &[], &[]).unwrap();
        let report = RobustnessReport {
            version: REPORT_VERSION,
            metadata,
            runs,
            corruptions: vec![],
            stability: vec![],
            attacks: vec![],
            typographic: vec![],
            dedup: None,
            prompts: None,
            failures: vec![],
            derived,
        };
        let series = scatter_series(&report);
        assert_eq!(series.len(), 1);
        let s = &series[0];
        for p in s.points.iter().filter(|p| p.tag != "z") {
            let on = s.trend.iter().find(|t| t.acc1 == p.acc1).expect("source abscissa sampled");
            assert!((on.acc2 - p.acc2).abs() < 1e-6, "{} vs {}", on.acc2, p.acc2);
        }
        assert!(s.ideal.iter().all(|r| r.acc1 == r.acc2));
        assert!(s.trend.iter().all(|r| r.probit_acc1 == probit(r.acc1)));
        // Effective robustness of the two trend-defining models is zero.
        for g in report.derived.effective.iter().filter(|g| g.model != "z") {
            assert!(g.value.abs() < 1e-6, "{g:?}");
        }
    }

    #[test]
    fn emits_every_format() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let mut all = Vec::new();
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Scatter] {
            all.extend(emit_report(&r, f, dir.path()).unwrap());
        }
        assert_eq!(all.len(), 4);
        assert_eq!(RobustnessReport::load(&dir.path().join(REPORT_JSON)).unwrap(), r);
        assert!("svg".parse::<ReportFormat>().is_err());
    }
}
