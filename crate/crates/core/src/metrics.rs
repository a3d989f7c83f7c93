//! Landmark and LVID errors, summary statistics, failure rate and EF.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_json;
use crate::geometry::LandmarkPair;
use crate::inference::Prediction;
use crate::plot;
use crate::sequence::CineSequence;

/// Average-LDE threshold above which a frame counts as a failure, cm.
pub const DEFAULT_FAILURE_THRESHOLD_CM: f64 = 2.0;

/// Statistic columns of the per-frame error tables, in order.
pub const TABLE_COLUMNS: [&str; 8] = ["mean", "std", "min", "25%", "median", "75%", "90%", "max"];
/// Statistic columns of the EF table, in order.
pub const EF_COLUMNS: [&str; 5] = ["mean", "std", "min", "median", "90%"];

/// Per-landmark location deviation `(il, al)` in cm.
pub fn lde(pred: &LandmarkPair<f64>, truth: &LandmarkPair<f64>, spacing: f64) -> (f64, f64) {
    assert!(spacing > 0.0, "pixel spacing must be positive");
    (
        pred.inferolateral.distance(truth.inferolateral) * spacing,
        pred.anteroseptal.distance(truth.anteroseptal) * spacing,
    )
}

/// Absolute LVID length error in cm.
pub fn le(pred: &LandmarkPair<f64>, truth: &LandmarkPair<f64>, spacing: f64) -> f64 {
    assert!(spacing > 0.0, "pixel spacing must be positive");
    (pred.lvid() - truth.lvid()).abs() * spacing
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameTag {
    Ed,
    Es,
    Frame(usize),
}

impl fmt::Display for FrameTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameTag::Ed => f.write_str("ED"),
            FrameTag::Es => f.write_str("ES"),
            FrameTag::Frame(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub id: String,
    pub frame: FrameTag,
    pub lde_il: f64,
    pub lde_al: f64,
    pub le: f64,
    pub spacing: f64,
}

impl ErrorRecord {
    pub fn new(id: &str, frame: FrameTag, pred: &LandmarkPair<f64>, truth: &LandmarkPair<f64>, spacing: f64) -> Self {
        let (lde_il, lde_al) = lde(pred, truth, spacing);
        Self { id: id.to_string(), frame, lde_il, lde_al, le: le(pred, truth, spacing), spacing }
    }

    /// Mean of the two landmark errors, cm.
    pub fn mean_lde(&self) -> f64 {
        0.5 * (self.lde_il + self.lde_al)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub max: f64,
}

impl Stats {
    pub fn row(&self) -> [f64; 8] {
        [self.mean, self.std, self.min, self.p25, self.median, self.p75, self.p90, self.max]
    }

    pub fn ef_row(&self) -> [f64; 5] {
        [self.mean, self.std, self.min, self.median, self.p90]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let r = self.row().map(|v| v * s);
        Self { mean: r[0], std: r[1], min: r[2], p25: r[3], median: r[4], p75: r[5], p90: r[6], max: r[7] }
    }
}

/// Percentile `q` in `[0, 1]` of ascending `sorted`, interpolating
/// linearly between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn stats_table(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::Empty("statistics need at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("statistics input contains a non-finite value".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Stats {
        mean,
        std: var.sqrt(),
        min: s[0],
        p25: percentile(&s, 0.25),
        median: percentile(&s, 0.5),
        p75: percentile(&s, 0.75),
        p90: percentile(&s, 0.9),
        max: s[s.len() - 1],
    })
}

/// Percentage of records whose average LDE exceeds `threshold_cm`.
pub fn failure_rate(records: &[ErrorRecord], threshold_cm: f64) -> f64 {
    assert!(threshold_cm > 0.0, "failure threshold must be positive");
    if records.is_empty() {
        return 0.0;
    }
    let failed = records.iter().filter(|r| r.mean_lde() > threshold_cm).count();
    100.0 * failed as f64 / records.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EfFormula {
    /// `V = 7 D / (2.4 + D)`.
    #[default]
    Linear,
    /// `V = 7 D³ / (2.4 + D)`, the usual clinical form.
    Cubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EFRecord {
    pub edd: f64,
    pub esd: f64,
    pub ed_vol: f64,
    pub es_vol: f64,
    pub ef: f64,
    /// Absolute difference to the reference EF, when compared.
    pub ef_error: Option<f64>,
}

fn teichholz_volume(d: f64, formula: EfFormula) -> f64 {
    let num = match formula {
        EfFormula::Linear => d,
        EfFormula::Cubic => d * d * d,
    };
    7.0 * num / (2.4 + d)
}

pub fn teichholz_ef(edd: f64, esd: f64) -> Result<EFRecord> {
    teichholz_ef_with(edd, esd, EfFormula::Linear)
}

pub fn teichholz_ef_with(edd: f64, esd: f64, formula: EfFormula) -> Result<EFRecord> {
    if !(edd > 0.0) {
        return Err(Error::config("edd", format!("end-diastolic diameter must be positive, got {edd}")));
    }
    if !(esd >= 0.0) {
        return Err(Error::config("esd", format!("end-systolic diameter must be non-negative, got {esd}")));
    }
    let ed_vol = teichholz_volume(edd, formula);
    let es_vol = teichholz_volume(esd, formula);
    Ok(EFRecord { edd, esd, ed_vol, es_vol, ef: 100.0 * (ed_vol - es_vol) / ed_vol, ef_error: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub failure_threshold_cm: f64,
    pub ef_formula: EfFormula,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { failure_threshold_cm: DEFAULT_FAILURE_THRESHOLD_CM, ef_formula: EfFormula::Linear }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfPair {
    pub id: String,
    pub truth: EFRecord,
    pub pred: EFRecord,
}

/// Error statistics of one frame (ED or ES) in cm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTable {
    pub frame: FrameTag,
    pub lde_al: Stats,
    pub lde_il: Stats,
    pub le: Stats,
    /// Average of the two landmark errors per sequence.
    pub lde_avg: Stats,
    pub failure_rate: f64,
}

impl FrameTable {
    fn from_records(frame: FrameTag, records: &[ErrorRecord], threshold: f64) -> Result<Self> {
        let col = |f: fn(&ErrorRecord) -> f64| stats_table(&records.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            frame,
            lde_al: col(|r| r.lde_al)?,
            lde_il: col(|r| r.lde_il)?,
            le: col(|r| r.le)?,
            lde_avg: col(ErrorRecord::mean_lde)?,
            failure_rate: failure_rate(records, threshold),
        })
    }

    /// Rows in table order: LDE of AL, LDE of IL, LE of LVID.
    pub fn rows(&self) -> [(&'static str, &Stats); 3] {
        [("LDE of AL", &self.lde_al), ("LDE of IL", &self.lde_il), ("LE of LVID", &self.le)]
    }
}

/// Per-frame average LDE of one sequence against hidden truth, cm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCurve {
    pub id: String,
    pub lde: Vec<f64>,
}

impl FrameCurve {
    pub fn k(&self) -> usize {
        self.lde.len()
    }

    /// Median over the tracked in-between frames `2..k-1`; `None` when k < 3.
    pub fn interior_median(&self) -> Option<f64> {
        let k = self.k();
        if k < 3 {
            return None;
        }
        let mut mid = self.lde[1..k - 1].to_vec();
        mid.sort_by(f64::total_cmp);
        Some(percentile(&mid, 0.5))
    }

    pub fn last(&self) -> f64 {
        self.lde[self.k() - 1]
    }
}

/// Compares the error at frame k against the typical in-between error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulationCheck {
    /// Mean over sequences of the frame-k LDE.
    pub mean_last: f64,
    /// Mean over sequences of the median LDE over frames 2..k-1.
    pub mean_interior_median: f64,
}

impl AccumulationCheck {
    pub fn from_curves(curves: &[FrameCurve]) -> Option<Self> {
        let pairs: Vec<(f64, f64)> = curves.iter().filter_map(|c| Some((c.last(), c.interior_median()?))).collect();
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.len() as f64;
        Some(Self {
            mean_last: pairs.iter().map(|p| p.0).sum::<f64>() / n,
            mean_interior_median: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        })
    }

    pub fn within(&self, factor: f64) -> bool {
        self.mean_last <= factor * self.mean_interior_median
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub ed_records: Vec<ErrorRecord>,
    pub es_records: Vec<ErrorRecord>,
    pub ed: FrameTable,
    pub es: FrameTable,
    pub ef_pairs: Vec<EfPair>,
    pub ef_error: Stats,
    pub curves: Vec<FrameCurve>,
    pub accumulation: Option<AccumulationCheck>,
    /// Mean pixel spacing over the dataset, for the px tables.
    pub mean_spacing: f64,
}

struct SeqEval {
    ed: ErrorRecord,
    es: ErrorRecord,
    ef: EfPair,
    curve: Option<FrameCurve>,
}

fn evaluate_one(pred: &Prediction, truth: &CineSequence, cfg: &EvalConfig) -> Result<SeqEval> {
    if pred.k != truth.k() {
        return Err(Error::Shape(format!("prediction for {} has k = {}, sequence has {}", truth.id, pred.k, truth.k())));
    }
    let s = truth.pixel_spacing;
    let ed = ErrorRecord::new(&truth.id, FrameTag::Ed, &pred.ed(), &truth.first, s);
    let es = ErrorRecord::new(&truth.id, FrameTag::Es, &pred.es(), &truth.last, s);
    let ef_of = |a: &LandmarkPair<f64>, b: &LandmarkPair<f64>| teichholz_ef_with(a.lvid() * s, b.lvid() * s, cfg.ef_formula);
    let t_ef = ef_of(&truth.first, &truth.last)?;
    let mut p_ef = ef_of(&pred.ed(), &pred.es())?;
    p_ef.ef_error = Some((p_ef.ef - t_ef.ef).abs());
    let curve = truth.hidden_truth.as_ref().map(|h| FrameCurve {
        id: truth.id.clone(),
        lde: h
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (a, b) = lde(&pred.at(i + 1), t, s);
                0.5 * (a + b)
            })
            .collect(),
    });
    Ok(SeqEval { ed, es, ef: EfPair { id: truth.id.clone(), truth: t_ef, pred: p_ef }, curve })
}

/// Matches predictions to sequences by id and builds every table.
pub fn evaluate_dataset(preds: &[Prediction], truths: &[CineSequence], cfg: &EvalConfig) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let truth_ids: std::collections::BTreeSet<&str> = truths.iter().map(|t| t.id.as_str()).collect();
    let missing_predictions: Vec<String> =
        truths.iter().filter(|t| !by_id.contains_key(t.id.as_str())).map(|t| t.id.clone()).collect();
    let missing_truth: Vec<String> = by_id.keys().filter(|id| !truth_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !missing_predictions.is_empty() || !missing_truth.is_empty() {
        return Err(Error::IdMismatch { missing_predictions, missing_truth });
    }
    if truths.is_empty() {
        return Err(Error::Empty("no sequences to evaluate"));
    }
    let mut sorted: Vec<&CineSequence> = truths.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let per: Vec<SeqEval> =
        sorted.par_iter().map(|t| evaluate_one(by_id[t.id.as_str()], t, cfg)).collect::<Result<_>>()?;
    let ed_records: Vec<ErrorRecord> = per.iter().map(|p| p.ed.clone()).collect();
    let es_records: Vec<ErrorRecord> = per.iter().map(|p| p.es.clone()).collect();
    let ef_pairs: Vec<EfPair> = per.iter().map(|p| p.ef.clone()).collect();
    let curves: Vec<FrameCurve> = per.iter().filter_map(|p| p.curve.clone()).collect();
    let ef_errors: Vec<f64> = ef_pairs.iter().map(|p| p.pred.ef_error.unwrap_or(0.0)).collect();
    Ok(EvalReport {
        config: *cfg,
        ed: FrameTable::from_records(FrameTag::Ed, &ed_records, cfg.failure_threshold_cm)?,
        es: FrameTable::from_records(FrameTag::Es, &es_records, cfg.failure_threshold_cm)?,
        ef_error: stats_table(&ef_errors)?,
        accumulation: AccumulationCheck::from_curves(&curves),
        mean_spacing: sorted.iter().map(|t| t.pixel_spacing).sum::<f64>() / sorted.len() as f64,
        ed_records,
        es_records,
        ef_pairs,
        curves,
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Csv { path: path.to_path_buf(), reason: e.to_string() }
}

/// Writes rows through the csv crate into a buffer, then atomically to disk.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(path, e))?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub const TABLE_FILE: &str = "errors_table.csv";
pub const EF_TABLE_FILE: &str = "ef_table.csv";
pub const EF_SCATTER_FILE: &str = "ef_scatter.csv";
pub const FAILURE_FILE: &str = "failure_rate.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const CURVES_FILE: &str = "per_frame_lde.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Header of the error table: frame, criterion, unit, then the statistics.
pub fn table_header() -> Vec<&'static str> {
    let mut h = vec!["frame", "criterion", "unit"];
    h.extend(TABLE_COLUMNS);
    h
}

impl EvalReport {
    /// Looks up a scalar by dotted name, for threshold checks:
    /// `ed|es . lde_il|lde_al|le|lde_avg . <stat>` in cm, the same with a
    /// `_px` suffix on the stat for pixels, `ed|es.failure_rate`,
    /// `ef_error.<stat>` and `accumulation.last|interior_median`.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let parts: Vec<&str> = name.split('.').collect();
        let stat = |s: &Stats, key: &str| -> Option<f64> {
            let (key, scale) = match key.strip_suffix("_px") {
                Some(k) => (k, 1.0 / self.mean_spacing),
                None => (key, 1.0),
            };
            let i = ["mean", "std", "min", "p25", "median", "p75", "p90", "max"].iter().position(|k| *k == key)?;
            Some(s.row()[i] * scale)
        };
        match parts.as_slice() {
            [f @ ("ed" | "es"), rest @ ..] => {
                let t = if *f == "ed" { &self.ed } else { &self.es };
                match rest {
                    ["failure_rate"] => Some(t.failure_rate),
                    [c, k] => {
                        let s = match *c {
                            "lde_il" => &t.lde_il,
                            "lde_al" => &t.lde_al,
                            "le" => &t.le,
                            "lde_avg" => &t.lde_avg,
                            _ => return None,
                        };
                        stat(s, k)
                    }
                    _ => None,
                }
            }
            ["ef_error", k] if !k.ends_with("_px") => stat(&self.ef_error, k),
            ["accumulation", "last"] => self.accumulation.map(|a| a.mean_last),
            ["accumulation", "interior_median"] => self.accumulation.map(|a| a.mean_interior_median),
            _ => None,
        }
    }

    fn table_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for t in [&self.ed, &self.es] {
            for (unit, scale) in [("cm", 1.0), ("px", 1.0 / self.mean_spacing)] {
                for (name, st) in t.rows() {
                    let mut r = vec![t.frame.to_string(), name.to_string(), unit.to_string()];
                    r.extend(st.scaled(scale).row().map(fmt_num));
                    rows.push(r);
                }
            }
        }
        rows
    }

    /// Writes the CSV tables, a JSON summary and the plots into `dir`.
    /// Returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut out = |name: &str| {
            let p = dir.join(name);
            written.push(p.clone());
            p
        };
        write_csv(&out(TABLE_FILE), &table_header(), &self.table_rows())?;

        let mut h = vec!["criterion"];
        h.extend(EF_COLUMNS);
        let mut ef_row = vec!["EF error (%)".to_string()];
        ef_row.extend(self.ef_error.ef_row().map(fmt_num));
        write_csv(&out(EF_TABLE_FILE), &h, &[ef_row])?;

        let scatter: Vec<Vec<String>> =
            self.ef_pairs.iter().map(|p| vec![p.id.clone(), fmt_num(p.truth.ef), fmt_num(p.pred.ef)]).collect();
        write_csv(&out(EF_SCATTER_FILE), &["id", "truth_ef", "pred_ef"], &scatter)?;

        let th = fmt_num(self.config.failure_threshold_cm);
        let fail = vec![
            vec!["ED".into(), th.clone(), fmt_num(self.ed.failure_rate)],
            vec!["ES".into(), th, fmt_num(self.es.failure_rate)],
        ];
        write_csv(&out(FAILURE_FILE), &["frame", "threshold_cm", "failure_percent"], &fail)?;

        let recs: Vec<Vec<String>> = self
            .ed_records
            .iter()
            .chain(&self.es_records)
            .map(|r| vec![r.id.clone(), r.frame.to_string(), fmt_num(r.lde_il), fmt_num(r.lde_al), fmt_num(r.le)])
            .collect();
        write_csv(&out(RECORDS_FILE), &["id", "frame", "lde_il_cm", "lde_al_cm", "le_cm"], &recs)?;

        if !self.curves.is_empty() {
            let rows: Vec<Vec<String>> = self
                .curves
                .iter()
                .flat_map(|c| c.lde.iter().enumerate().map(|(i, v)| vec![c.id.clone(), (i + 1).to_string(), fmt_num(*v)]))
                .collect();
            write_csv(&out(CURVES_FILE), &["id", "frame", "mean_lde_cm"], &rows)?;
            let p = out("per_frame_lde.png");
            plot::save_png(&plot::curves(&self.curves), &p)?;
        }

        for t in [&self.ed, &self.es] {
            let p = out(&format!("table_{}.png", t.frame.to_string().to_lowercase()));
            plot::save_png(&plot::stat_boxes(&t.rows().map(|(_, s)| *s)), &p)?;
        }
        let pts: Vec<(f64, f64)> = self.ef_pairs.iter().map(|p| (p.truth.ef, p.pred.ef)).collect();
        let p = out("ef_scatter.png");
        plot::save_png(&plot::scatter(&pts), &p)?;

        write_json(&out(SUMMARY_FILE), self)?;
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;

    fn pair(a: [f64; 4]) -> LandmarkPair<f64> {
        LandmarkPair::from_array(a)
    }

    #[test]
    fn lde_hand_values() {
        let t = pair([10.0, 10.0, 30.0, 10.0]);
        assert_eq!(lde(&t, &t, 0.05), (0.0, 0.0));
        let p = pair([13.0, 14.0, 30.0, 10.0]);
        let (il, al) = lde(&p, &t, 0.05);
        assert!((il - 0.25).abs() < 1e-12 && al == 0.0);
    }

    #[test]
    fn le_hand_values() {
        let t = pair([0.0, 0.0, 90.0, 0.0]);
        let p = pair([0.0, 5.0, 100.0, 5.0]);
        assert!((le(&p, &t, 0.05) - 0.5).abs() < 1e-12);
        assert!(le(&t.translate(Point2::new(3.0, -7.0)), &t, 0.05) < 1e-12);
    }

    #[test]
    fn stats_examples() {
        let s = stats_table(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!((s.min, s.max, s.mean), (1.0, 4.0, 2.5));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.p25, 1.75);
        let c = stats_table(&[0.7; 5]).unwrap();
        assert_eq!(c.row(), [0.7, 0.0, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7]);
        assert!(matches!(stats_table(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn ef_examples() {
        let r = teichholz_ef(5.0, 3.0).unwrap();
        let oracle = 100.0 * (35.0 / 7.4 - 21.0 / 5.4) / (35.0 / 7.4);
        assert!((r.ef - oracle).abs() < 1e-12);
        assert!((r.ef - 17.78).abs() < 0.01);
        assert_eq!(teichholz_ef(4.0, 4.0).unwrap().ef, 0.0);
        assert_eq!(teichholz_ef(4.0, 0.0).unwrap().ef, 100.0);
        assert!(teichholz_ef(0.0, 1.0).is_err());
        let c = teichholz_ef_with(5.0, 3.0, EfFormula::Cubic).unwrap();
        assert!((c.ed_vol - 7.0 * 125.0 / 7.4).abs() < 1e-12);
    }

    #[test]
    fn failure_rate_counts_average_lde() {
        let rec = |il: f64, al: f64| ErrorRecord { id: "a".into(), frame: FrameTag::Ed, lde_il: il, lde_al: al, le: 0.0, spacing: 1.0 };
        let rs = [rec(0.0, 0.0), rec(3.0, 2.0), rec(1.0, 2.9), rec(2.0, 2.0)];
        assert_eq!(failure_rate(&rs, 2.0), 25.0);
        assert_eq!(failure_rate(&rs[..1], 2.0), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn stats_ordered(v in proptest::collection::vec(0.0f64..100.0, 1..60)) {
            let s = stats_table(&v).unwrap();
            proptest::prop_assert!(s.min <= s.p25 && s.p25 <= s.median && s.median <= s.p75 && s.p75 <= s.p90 && s.p90 <= s.max);
        }

        #[test]
        fn ef_decreases_with_esd(edd in 0.5f64..8.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assume!(hi - lo > 1e-9);
            let e1 = teichholz_ef(edd, lo * edd).unwrap().ef;
            let e2 = teichholz_ef(edd, hi * edd).unwrap().ef;
            proptest::prop_assert!(e2 < e1);
        }

        #[test]
        fn failure_rate_monotone(v in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..30), t1 in 0.1f64..5.0, t2 in 0.1f64..5.0) {
            let rs: Vec<ErrorRecord> = v.iter().map(|&(il, al)| ErrorRecord { id: String::new(), frame: FrameTag::Es, lde_il: il, lde_al: al, le: 0.0, spacing: 1.0 }).collect();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            proptest::prop_assert!(failure_rate(&rs, hi) <= failure_rate(&rs, lo));
        }

        #[test]
        fn lde_le_translation_invariant(a in proptest::array::uniform8(-50.0f64..50.0), dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
            let p = pair([a[0], a[1], a[2], a[3]]);
            let t = pair([a[4], a[5], a[6], a[7]]);
            let d = Point2::new(dx, dy);
            let (i0, a0) = lde(&p, &t, 0.05);
            let (i1, a1) = lde(&p.translate(d), &t.translate(d), 0.05);
            proptest::prop_assert!((i0 - i1).abs() < 1e-9 && (a0 - a1).abs() < 1e-9);
            proptest::prop_assert!((le(&p, &t, 0.05) - le(&p.translate(d), &t.translate(d), 0.05)).abs() < 1e-9);
        }
    }
}
