//! Controlled comparisons run on phantom data: loss ablation, one-frame
//! supervision, reciprocal-rate sweep and annotation-sparsity analysis.
//!
//! Every arm of an experiment trains on the same phantom bytes for a given
//! seed, so arms can be compared seed by seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::generate_in_memory;
use crate::error::{Error, Result};
use crate::fsutil::{read_toml, write_json};
use crate::geometry::LandmarkPair;
use crate::inference::predict_all;
use crate::metrics::{evaluate_dataset, lde, le, percentile, stats_table, write_csv, EvalConfig, EvalReport, Stats};
use crate::network::ModelParams;
use crate::phantom::PhantomConfig;
use crate::scalar::Scalar;
use crate::sequence::CineSequence;
use crate::trainer::{encode_sequence, rollout, train, TrainConfig, TrainOutputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    OneFrame,
    RateSweep,
    Sparsity,
}

/// Changes applied to the base training config for one arm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmOverride {
    pub name: String,
    pub enable_rec_loss: Option<bool>,
    pub enable_adversarial: Option<bool>,
    pub one_frame_mode: Option<bool>,
    pub rec_rate: Option<usize>,
    pub epochs: Option<usize>,
}

impl ArmOverride {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(v) = self.enable_rec_loss {
            c.flags.enable_rec_loss = v;
        }
        if let Some(v) = self.enable_adversarial {
            c.flags.enable_adversarial = v;
        }
        if let Some(v) = self.one_frame_mode {
            c.flags.one_frame_mode = v;
        }
        if let Some(v) = self.rec_rate {
            c.rec_rate = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Arms; empty means the standard grid for `kind`.
    #[serde(default)]
    pub grid: Vec<ArmOverride>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    /// Concurrent training jobs.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_n_train() -> usize {
    16
}

fn default_n_test() -> usize {
    8
}

fn default_jobs() -> usize {
    1
}

/// The three ablation arms: no reciprocal loss, reciprocal loss only, and
/// reciprocal loss with adversarial training.
pub fn ablation_grid() -> Vec<ArmOverride> {
    let arm = |name: &str, rec: bool, adv: bool| ArmOverride {
        name: name.into(),
        enable_rec_loss: Some(rec),
        enable_adversarial: Some(adv),
        ..ArmOverride::default()
    };
    vec![arm("no_rec", false, false), arm("rec", true, false), arm("rec_adv", true, true)]
}

pub const SWEEP_RATES: [usize; 4] = [2, 3, 4, 5];

pub fn rate_grid() -> Vec<ArmOverride> {
    SWEEP_RATES
        .iter()
        .map(|&r| ArmOverride { name: format!("rate_{r}"), rec_rate: Some(r), ..ArmOverride::default() })
        .collect()
}

pub fn one_frame_grid() -> Vec<ArmOverride> {
    vec![ArmOverride { name: "one_frame".into(), one_frame_mode: Some(true), ..ArmOverride::default() }]
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_toml(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train", "both splits need at least one sequence"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        self.phantom.validate()?;
        for arm in self.arms() {
            arm.apply(&self.base).validate()?;
        }
        Ok(())
    }

    pub fn arms(&self) -> Vec<ArmOverride> {
        if !self.grid.is_empty() {
            return self.grid.clone();
        }
        match self.kind {
            ExperimentKind::Ablation => ablation_grid(),
            ExperimentKind::OneFrame => one_frame_grid(),
            ExperimentKind::RateSweep => rate_grid(),
            ExperimentKind::Sparsity => vec![ArmOverride { name: "full".into(), ..ArmOverride::default() }],
        }
    }

    /// Phantom config for one seed; shared by every arm.
    pub fn phantom_for(&self, seed: u64) -> PhantomConfig {
        PhantomConfig { seed: self.phantom.seed.wrapping_add(seed), ..self.phantom.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    /// `None` when training or evaluation failed; see `error`.
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    /// Test sequences whose frame-1 detection failed.
    pub detection_failures: usize,
    /// Tracking-only table, for sparsity experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityTable>,
}

impl ArmResult {
    /// Median over test sequences of the average landmark error at ED and
    /// ES, in pixels.
    pub fn median_lde_px(&self) -> Option<f64> {
        let r = self.report.as_ref()?;
        let mut v: Vec<f64> =
            r.ed_records.iter().chain(&r.es_records).map(|e| e.mean_lde() / e.spacing).collect();
        v.sort_by(f64::total_cmp);
        (!v.is_empty()).then(|| percentile(&v, 0.5))
    }

    /// Mean over test sequences of the average landmark error at ED and ES,
    /// in pixels.
    pub fn mean_lde_px(&self) -> Option<f64> {
        let r = self.report.as_ref()?;
        let v: Vec<f64> = r.ed_records.iter().chain(&r.es_records).map(|e| e.mean_lde() / e.spacing).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains one arm on `train_set` and evaluates it on `test_set`.
pub fn run_arm<T: Scalar>(
    arm: &ArmOverride,
    base: &TrainConfig,
    seed: u64,
    train_set: &[CineSequence],
    test_set: &[CineSequence],
    with_sparsity: bool,
) -> ArmResult {
    let cfg = TrainConfig { seed, ..arm.apply(base) };
    let fail = |e: Error| ArmResult {
        arm: arm.name.clone(),
        seed,
        report: None,
        error: Some(e.to_string()),
        detection_failures: 0,
        sparsity: None,
    };
    let state = match train::<T>(train_set, &cfg, &TrainOutputs::default()) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let mut res = evaluate_params(arm, seed, &state.params, test_set);
    if with_sparsity {
        match run_sparsity_analysis(&state.params, test_set) {
            Ok(t) => res.sparsity = Some(t),
            Err(e) => return fail(e),
        }
    }
    res
}

/// Evaluates trained parameters. Sequences whose detection fails are
/// scored with the detector-free fallback of a zero prediction at the image
/// centre, so a broken arm is penalized rather than silently dropped.
pub fn evaluate_params<T: Scalar>(arm: &ArmOverride, seed: u64, params: &ModelParams<T>, test_set: &[CineSequence]) -> ArmResult {
    let mut failures = 0;
    let preds: Vec<_> = predict_all(test_set, params, false)
        .into_iter()
        .zip(test_set)
        .map(|(p, s)| match p {
            Ok(p) => p,
            Err(_) => {
                failures += 1;
                centre_prediction(s)
            }
        })
        .collect();
    match evaluate_dataset(&preds, test_set, &EvalConfig::default()) {
        Ok(r) => ArmResult {
            arm: arm.name.clone(),
            seed,
            report: Some(r),
            error: None,
            detection_failures: failures,
            sparsity: None,
        },
        Err(e) => ArmResult {
            arm: arm.name.clone(),
            seed,
            report: None,
            error: Some(e.to_string()),
            detection_failures: failures,
            sparsity: None,
        },
    }
}

fn centre_prediction(s: &CineSequence) -> crate::inference::Prediction {
    use crate::geometry::{Motion2, Point2};
    use crate::inference::{FramePrediction, Prediction, Provenance, PREDICTION_VERSION};
    let c = Point2::new((s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0);
    Prediction {
        version: PREDICTION_VERSION,
        id: s.id.clone(),
        k: s.k(),
        pixel_spacing_cm: s.pixel_spacing,
        frames: (1..=s.k())
            .map(|t| FramePrediction {
                t,
                il: c,
                al: c,
                provenance: if t == 1 { Provenance::Detected } else { Provenance::Tracked },
                drift: false,
            })
            .collect(),
        motions: vec![Motion2::zero(); s.k() - 1],
        backward: None,
        cycle_residual_px: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub kind: ExperimentKind,
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    /// Arm-major: `results[a * seeds.len() + s]`.
    pub results: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn get(&self, arm: &str, seed: u64) -> Option<&ArmResult> {
        self.results.iter().find(|r| r.arm == arm && r.seed == seed)
    }
}

/// Runs every (arm, seed) job with at most `spec.jobs` running at once.
pub fn run_experiment<T: Scalar>(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let arms = spec.arms();
    let data: Vec<(Vec<CineSequence>, Vec<CineSequence>)> =
        spec.seeds.iter().map(|&s| generate_in_memory(&spec.phantom_for(s), spec.n_train, spec.n_test)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..spec.seeds.len()).map(move |s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let run = |&(a, s): &(usize, usize)| {
        let (tr, te) = &data[s];
        run_arm::<T>(&arms[a], &spec.base, spec.seeds[s], tr, te, spec.kind == ExperimentKind::Sparsity)
    };
    let results: Vec<ArmResult> = pool.install(|| jobs.par_iter().map(run).collect());
    Ok(ExperimentResult {
        name: spec.name.clone(),
        kind: spec.kind,
        arms: arms.iter().map(|a| a.name.clone()).collect(),
        seeds: spec.seeds.clone(),
        results,
    })
}

/// Outcome of a per-seed ordering check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    /// `None` for a seed where some arm failed.
    pub per_seed: Vec<Option<bool>>,
    pub holds: usize,
    pub required: usize,
}

impl TrendCheck {
    fn from(per_seed: Vec<Option<bool>>, required: usize) -> Self {
        let holds = per_seed.iter().filter(|v| **v == Some(true)).count();
        Self { per_seed, holds, required }
    }

    pub fn passed(&self) -> bool {
        self.holds >= self.required
    }
}

/// Majority count for `n` seeds.
pub fn majority(n: usize) -> usize {
    n / 2 + 1
}

/// Per seed: median LDE of (no rec) > (rec) >= (rec + adversarial).
pub fn ablation_trend(res: &ExperimentResult) -> TrendCheck {
    let per_seed = res
        .seeds
        .iter()
        .map(|&s| {
            let m = |arm: &str| res.get(arm, s).and_then(ArmResult::median_lde_px);
            Some(m("no_rec")? > m("rec")? && m("rec")? >= m("rec_adv")?)
        })
        .collect();
    TrendCheck::from(per_seed, majority(res.seeds.len()))
}

/// Per seed: mean ES landmark error is at least the mean ED error.
pub fn one_frame_trend(res: &ExperimentResult) -> TrendCheck {
    let per_seed = res
        .seeds
        .iter()
        .map(|&s| {
            let r = res.get("one_frame", s)?.report.as_ref()?;
            let mean = |rs: &[crate::metrics::ErrorRecord]| rs.iter().map(|e| e.mean_lde()).sum::<f64>() / rs.len() as f64;
            Some(mean(&r.es_records) >= mean(&r.ed_records))
        })
        .collect();
    TrendCheck::from(per_seed, majority(res.seeds.len()))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

/// Table rows: frame, criterion, arm, flags, seed, mean, median (cm).
fn comparison_rows(res: &ExperimentResult, flags: impl Fn(&str) -> Vec<String>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for frame in ["ED", "ES"] {
        for r in &res.results {
            let table = r.report.as_ref().map(|rep| if frame == "ED" { &rep.ed } else { &rep.es });
            for (i, crit) in ["LDE-AL", "LDE-IL", "LE"].iter().enumerate() {
                let st: Option<&Stats> = table.map(|t| t.rows()[i].1);
                let mut row = vec![frame.to_string(), crit.to_string(), r.arm.clone()];
                row.extend(flags(&r.arm));
                row.push(r.seed.to_string());
                row.push(fmt(st.map(|s| s.mean)));
                row.push(fmt(st.map(|s| s.median)));
                rows.push(row);
            }
        }
    }
    rows
}

pub const TABLE_FILE: &str = "table.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes the experiment's CSV table(s) and JSON summary under `dir`.
pub fn write_experiment(res: &ExperimentResult, spec: &ExperimentSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let arms = spec.arms();
    let arm = |name: &str| arms.iter().find(|a| a.name == name).map(|a| a.apply(&spec.base));
    let table = dir.join(TABLE_FILE);
    match res.kind {
        ExperimentKind::Ablation => {
            let flags = |name: &str| {
                let c = arm(name).unwrap_or_default();
                let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
                vec![mark(c.flags.enable_rec_loss && c.flags.enable_adversarial), mark(c.flags.enable_rec_loss)]
            };
            let header = ["frame", "criterion", "arm", "ad_t", "rec_l", "seed", "mean_cm", "median_cm"];
            write_csv(&table, &header, &comparison_rows(res, flags))?;
        }
        ExperimentKind::RateSweep => {
            let header = ["rate", "seed", "mean_lde_cm_per_sequence", "median_lde_px"];
            let rows: Vec<Vec<String>> = res
                .results
                .iter()
                .map(|r| {
                    let rate = arm(&r.arm).map_or(0, |c| c.rec_rate);
                    let spacing = r.report.as_ref().map_or(1.0, |rep| rep.mean_spacing);
                    vec![rate.to_string(), r.seed.to_string(), fmt(r.mean_lde_px().map(|v| v * spacing)), fmt(r.median_lde_px())]
                })
                .collect();
            write_csv(&table, &header, &rows)?;
        }
        ExperimentKind::OneFrame => {
            let header = ["frame", "criterion", "seed", "mean", "std", "min", "median"];
            let mut rows = Vec::new();
            for r in &res.results {
                let Some(rep) = &r.report else { continue };
                for (frame, recs) in [("ED", &rep.ed_records), ("ES", &rep.es_records)] {
                    let ldes: Vec<f64> = recs.iter().map(|e| e.mean_lde()).collect();
                    let les: Vec<f64> = recs.iter().map(|e| e.le).collect();
                    for (crit, vals) in [("LDE", ldes), ("LE", les)] {
                        let s = stats_table(&vals)?;
                        rows.push(vec![
                            frame.into(),
                            crit.into(),
                            r.seed.to_string(),
                            fmt(Some(s.mean)),
                            fmt(Some(s.std)),
                            fmt(Some(s.min)),
                            fmt(Some(s.median)),
                        ]);
                    }
                }
            }
            write_csv(&table, &header, &rows)?;
        }
        ExperimentKind::Sparsity => {
            let mut rows = Vec::new();
            for r in &res.results {
                let Some(t) = &r.sparsity else { continue };
                rows.extend(t.rows().into_iter().map(|mut row| {
                    row.splice(0..0, [r.arm.clone(), r.seed.to_string()]);
                    row
                }));
            }
            let mut header = vec!["arm", "seed", "row"];
            header.extend(SPARSITY_BIN_LABELS);
            write_csv(&table, &header, &rows)?;
        }
    }
    written.push(table);
    let summary = dir.join(SUMMARY_FILE);
    write_json(&summary, res)?;
    written.push(summary);
    Ok(written)
}

/// Half-open bins on k, except the last which includes 20.
pub const SPARSITY_BINS: [(usize, usize); 4] = [(5, 8), (8, 12), (12, 16), (16, 20)];
pub const SPARSITY_BIN_LABELS: [&str; 4] = ["5-8", "8-12", "12-16", "16-20"];

pub fn sparsity_bin(k: usize) -> Option<usize> {
    SPARSITY_BINS.iter().enumerate().position(|(i, &(lo, hi))| {
        let last = i == SPARSITY_BINS.len() - 1;
        k >= lo && (k < hi || (last && k == hi))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityBin {
    pub label: String,
    pub count: usize,
    /// Mean over sequences of the average landmark error at frame k, cm.
    pub per_sequence: Option<f64>,
    /// Mean over sequences of that error divided by the in-between frame
    /// count `k - 2`, cm.
    pub per_frame: Option<f64>,
    /// Mean LVID length error at frame k, cm.
    pub le: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub bins: Vec<SparsityBin>,
    /// Sequences whose k lies outside every bin.
    pub unbinned: usize,
}

impl SparsityTable {
    pub fn rows(&self) -> Vec<Vec<String>> {
        let row = |name: &str, f: fn(&SparsityBin) -> Option<f64>| {
            let mut r = vec![name.to_string()];
            r.extend(self.bins.iter().map(|b| fmt(f(b))));
            r
        };
        let mut count = vec!["sequences".to_string()];
        count.extend(self.bins.iter().map(|b| b.count.to_string()));
        vec![
            row("Average LDE (cm)/sequence", |b| b.per_sequence),
            row("Average LDE (cm)/frame", |b| b.per_frame),
            row("LE (cm)/sequence", |b| b.le),
            count,
        ]
    }
}

/// Tracks every sequence from its frame-1 annotation and scores the tracked
/// position at frame k against the frame-k annotation. No detection is used.
pub fn run_sparsity_analysis<T: Scalar>(params: &ModelParams<T>, data: &[CineSequence]) -> Result<SparsityTable> {
    let per_seq: Vec<(usize, f64, f64)> = data
        .par_iter()
        .map(|s| {
            let feats = encode_sequence(params, s)?;
            let pos = rollout(params, &feats, s.first.cast::<T>());
            let end: LandmarkPair<f64> = pos[pos.len() - 1].cast();
            let (il, al) = lde(&end, &s.last, s.pixel_spacing);
            Ok((s.k(), 0.5 * (il + al), le(&end, &s.last, s.pixel_spacing)))
        })
        .collect::<Result<_>>()?;
    let mut bins: Vec<SparsityBin> = SPARSITY_BIN_LABELS
        .iter()
        .map(|l| SparsityBin { label: l.to_string(), count: 0, per_sequence: None, per_frame: None, le: None })
        .collect();
    let mut sums = vec![(0.0, 0.0, 0.0); bins.len()];
    let mut unbinned = 0;
    for &(k, e, l) in &per_seq {
        match sparsity_bin(k) {
            Some(b) => {
                bins[b].count += 1;
                sums[b].0 += e;
                sums[b].1 += e / (k - 2) as f64;
                sums[b].2 += l;
            }
            None => unbinned += 1,
        }
    }
    for (b, s) in bins.iter_mut().zip(sums) {
        if b.count > 0 {
            let n = b.count as f64;
            b.per_sequence = Some(s.0 / n);
            b.per_frame = Some(s.1 / n);
            b.le = Some(s.2 / n);
        }
    }
    Ok(SparsityTable { bins, unbinned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Group, NetworkConfig};

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            encoder_channels: vec![3, 3, 4, 4, 4, 4],
            detector_channels: [4, 8],
            detector_convs_per_stage: 2,
            head_channels: 5,
            tracker_hidden: vec![6, 5],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn bins() {
        assert_eq!(sparsity_bin(4), None);
        assert_eq!(sparsity_bin(5), Some(0));
        assert_eq!(sparsity_bin(7), Some(0));
        assert_eq!(sparsity_bin(8), Some(1));
        assert_eq!(sparsity_bin(15), Some(2));
        assert_eq!(sparsity_bin(16), Some(3));
        assert_eq!(sparsity_bin(20), Some(3));
        assert_eq!(sparsity_bin(21), None);
    }

    #[test]
    fn grids() {
        let a = ablation_grid();
        assert_eq!(a.len(), 3);
        let base = TrainConfig::default();
        let flags: Vec<(bool, bool)> =
            a.iter().map(|o| o.apply(&base)).map(|c| (c.flags.enable_rec_loss, c.flags.enable_adversarial)).collect();
        assert_eq!(flags, [(false, false), (true, false), (true, true)]);
        let rates: Vec<usize> = rate_grid().iter().map(|o| o.apply(&base).rec_rate).collect();
        assert_eq!(rates, SWEEP_RATES);
        assert!(one_frame_grid()[0].apply(&base).flags.one_frame_mode);
    }

    #[test]
    fn zero_motion_gives_zero_sparsity_error() {
        let cfg = PhantomConfig { k_range: (5, 20), ..PhantomConfig::default() }.static_variant();
        let (data, _) = generate_in_memory(&cfg, 12, 0).unwrap();
        let mut params = ModelParams::<f64>::new(tiny_net(), 3).unwrap();
        for s in params.group_mut(Group::Tracker) {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = run_sparsity_analysis(&params, &data).unwrap();
        assert_eq!(t.bins.iter().map(|b| b.count).sum::<usize>() + t.unbinned, 12);
        for b in &t.bins {
            assert!(b.per_sequence.is_none_or(|v| v == 0.0), "{b:?}");
            assert!(b.per_frame.is_none_or(|v| v == 0.0));
        }
    }

    #[test]
    fn spec_toml_round_trip() {
        let text = r#"
            name = "abl"
            kind = "ablation"
            seeds = [1, 2]
            n_train = 4
            n_test = 2
            [base]
            epochs = 1
        "#;
        let spec: ExperimentSpec = toml::from_str(text).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.arms().len(), 3);
        assert_eq!(spec.base.epochs, 1);
        assert!(toml::from_str::<ExperimentSpec>("name='x'\nkind='ablation'\nseeds=[1]\nbogus=1").is_err());
        let bad = ExperimentSpec { seeds: vec![], ..spec };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field: "seeds", .. })));
    }

    #[test]
    fn trend_majority() {
        let t = TrendCheck::from(vec![Some(true), Some(false), Some(true), None, Some(true)], majority(5));
        assert_eq!((t.holds, t.required), (3, 3));
        assert!(t.passed());
    }
}
