use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rdt::checkpoint;
use rdt::dataset::{self, Split};
use rdt::experiments::{self, ExperimentKind, ExperimentSpec};
use rdt::fsutil::{read_json, read_toml, write_json};
use rdt::inference::{self, Prediction};
use rdt::metrics::{self, EfFormula, EvalConfig};
use rdt::phantom::PhantomConfig;
use rdt::plot;
use rdt::trainer::{self, TrainConfig, TrainOutputs, TrainState};

/// Bumped when the run-directory layout changes.
const RUN_LAYOUT_VERSION: u32 = 1;
const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Parser)]
#[command(name = "rdt", version, about = "Landmark detection and tracking on sparsely annotated cine sequences")]
struct Cli {
    /// Relative output paths are resolved under this directory.
    #[arg(long, global = true, env = "RDT_RUN_ROOT")]
    run_root: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a phantom dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Run inference with a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Run an experiment described by a TOML spec.
    Experiment(ExperimentArgs),
    /// Evaluation tables plus overlay images of predicted and annotated LVID.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 2)]
    n_test: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML phantom config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    contraction: Option<f64>,
    #[arg(long)]
    speckle: Option<f64>,
    /// Still heart (zero contraction).
    #[arg(long)]
    r#static: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rec_rate: Option<usize>,
    #[arg(long)]
    no_adversarial: bool,
    #[arg(long)]
    no_rec_loss: bool,
    #[arg(long)]
    one_frame: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Also track back to frame 1 and record the cycle residual.
    #[arg(long)]
    cycle: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// TOML list of thresholds; the exit code is non-zero if any fails.
    #[arg(long)]
    criteria: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_FAILURE_THRESHOLD_CM)]
    failure_threshold_cm: f64,
    /// Use the cubic volume formula for EF.
    #[arg(long)]
    cubic_ef: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; defaults to the spec's `outputs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Pixel upscale of overlay images.
    #[arg(long, default_value_t = 4)]
    scale: u32,
}

#[derive(Serialize, Deserialize)]
struct RunSnapshot {
    layout_version: u32,
    tool_version: String,
    data: PathBuf,
    train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CriteriaFile {
    #[serde(default)]
    criterion: Vec<Criterion>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Criterion {
    name: Option<String>,
    /// Dotted metric name, see `EvalReport::metric`.
    metric: String,
    max: Option<f64>,
    min: Option<f64>,
}

struct Ctx {
    run_root: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.run_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx { run_root: cli.run_root };
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Predict(a) => cmd_predict(&ctx, a),
        Cmd::Eval(a) => cmd_eval(&ctx, a, None),
        Cmd::Experiment(a) => cmd_experiment(&ctx, a),
        Cmd::Report(a) => {
            let scale = a.scale;
            cmd_eval(&ctx, a.eval, Some(scale))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> Result<bool> {
    let mut cfg: PhantomConfig = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => PhantomConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.k_min {
        cfg.k_range.0 = v;
    }
    if let Some(v) = a.k_max {
        cfg.k_range.1 = v;
    }
    if let Some(v) = a.contraction {
        cfg.contraction_fraction = v;
    }
    if let Some(v) = a.speckle {
        cfg.speckle_strength = v;
    }
    if a.r#static {
        cfg = cfg.static_variant();
    }
    let out = ctx.path(&a.out);
    let m = dataset::generate_dataset(&cfg, a.n_train, a.n_test, &out)?;
    println!("wrote {} train + {} test sequences to {}", m.train.len(), m.test.len(), out.display());
    Ok(true)
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.rec_rate {
        cfg.rec_rate = v;
    }
    if a.no_adversarial {
        cfg.flags.enable_adversarial = false;
    }
    if a.no_rec_loss {
        cfg.flags.enable_rec_loss = false;
    }
    if a.one_frame {
        cfg.flags.one_frame_mode = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<bool> {
    let cfg = train_config(ctx, &a)?;
    let data_dir = ctx.path(&a.data);
    let run = ctx.path(&a.out);
    let data = dataset::load_split(&data_dir, Split::Train)
        .with_context(|| format!("loading training data from {}", data_dir.display()))?;
    for sub in ["checkpoints", "predictions", "reports", "logs"] {
        std::fs::create_dir_all(run.join(sub)).with_context(|| format!("creating {}", run.join(sub).display()))?;
    }
    let snapshot = RunSnapshot {
        layout_version: RUN_LAYOUT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        data: data_dir.clone(),
        train: cfg.clone(),
    };
    let snap_path = run.join(CONFIG_SNAPSHOT);
    if snap_path.exists() {
        // The snapshot is never rewritten; a resumed run must match it.
        let old: RunSnapshot = read_json(&snap_path)?;
        if old.train.hash() != cfg.hash() && a.resume.is_none() {
            bail!("{} holds a different configuration; use a new run directory", snap_path.display());
        }
    } else {
        write_json(&snap_path, &snapshot)?;
    }
    let state: TrainState<f32> = match &a.resume {
        Some(p) => {
            let (s, header) = checkpoint::load_state(&ctx.path(p))?;
            let same = header.train_config.as_ref().is_some_and(|c| TrainConfig { epochs: cfg.epochs, ..c.clone() } == cfg);
            if !same {
                eprintln!("warning: resuming with a configuration that differs from the checkpoint's");
            }
            s
        }
        None => TrainState::new(&cfg)?,
    };
    let out = TrainOutputs {
        log_path: Some(run.join("logs").join("train.jsonl")),
        checkpoint_dir: Some(run.join("checkpoints")),
        progress: !a.quiet,
    };
    let state = trainer::resume(&data, &cfg, state, &out)?;
    println!("trained {} epochs; last checkpoint {}", state.epoch, run.join("checkpoints").join(trainer::checkpoint_name(state.epoch)).display());
    Ok(true)
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Result<bool> {
    let params = checkpoint::load_params::<f32>(&ctx.path(&a.checkpoint))?;
    let data = dataset::load_split(&ctx.path(&a.data), a.split.into())?;
    let out = ctx.path(&a.out);
    let mut ok = Vec::new();
    let mut failed = 0;
    for (seq, p) in data.iter().zip(inference::predict_all(&data, &params, a.cycle)) {
        match p {
            Ok(p) => ok.push(p),
            Err(e) => {
                eprintln!("{}: {e}", seq.id);
                failed += 1;
            }
        }
    }
    inference::export_all(&ok, &out)?;
    println!("wrote {} predictions to {} ({failed} failed)", ok.len(), out.display());
    Ok(failed == 0)
}

fn check_criteria(report: &metrics::EvalReport, path: &Path) -> Result<bool> {
    let file: CriteriaFile = read_toml(path)?;
    let mut all = true;
    for c in &file.criterion {
        let name = c.name.clone().unwrap_or_else(|| c.metric.clone());
        let Some(v) = report.metric(&c.metric) else {
            bail!("unknown metric `{}` in {}", c.metric, path.display());
        };
        let pass = c.max.is_none_or(|m| v <= m) && c.min.is_none_or(|m| v >= m);
        all &= pass;
        println!("{} {name}: {v:.4}", if pass { "PASS" } else { "FAIL" });
    }
    Ok(all)
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs, overlay_scale: Option<u32>) -> Result<bool> {
    let data = dataset::load_split(&ctx.path(&a.data), a.split.into())?;
    let preds: Vec<Prediction> = inference::read_all(&ctx.path(&a.predictions))?;
    let cfg = EvalConfig {
        failure_threshold_cm: a.failure_threshold_cm,
        ef_formula: if a.cubic_ef { EfFormula::Cubic } else { EfFormula::Linear },
    };
    let report = metrics::evaluate_dataset(&preds, &data, &cfg)?;
    let out = ctx.path(&a.out);
    report.write(&out)?;
    for t in [&report.ed, &report.es] {
        println!(
            "{}: LDE AL {:.3}±{:.3} cm, LDE IL {:.3}±{:.3} cm, LE {:.3}±{:.3} cm, failure {:.1}%",
            t.frame, t.lde_al.mean, t.lde_al.std, t.lde_il.mean, t.lde_il.std, t.le.mean, t.le.std, t.failure_rate
        );
    }
    println!("EF error {:.2}±{:.2} %", report.ef_error.mean, report.ef_error.std);
    if let Some(scale) = overlay_scale {
        write_overlays(&data, &preds, &out.join("overlays"), scale)?;
    }
    match &a.criteria {
        Some(c) => check_criteria(&report, &ctx.path(c)),
        None => Ok(true),
    }
}

fn write_overlays(data: &[rdt::CineSequence], preds: &[Prediction], dir: &Path, scale: u32) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for seq in data {
        let Some(p) = preds.iter().find(|p| p.id == seq.id) else { continue };
        for (tag, t, truth) in [("ed", 1, seq.first), ("es", seq.k(), seq.last)] {
            let img = plot::lvid_overlay(&seq.frames[t - 1], seq.width, seq.height, scale, &p.at(t), Some(&truth));
            plot::save_png(&img, &dir.join(format!("{}_{tag}.png", seq.id)))?;
        }
    }
    Ok(())
}

fn cmd_experiment(ctx: &Ctx, a: ExperimentArgs) -> Result<bool> {
    let spec = ExperimentSpec::load(&ctx.path(&a.spec))?;
    let out = a
        .out
        .or_else(|| spec.outputs.clone())
        .map(|p| ctx.path(&p))
        .context("no output directory: pass --out or set `outputs` in the spec")?;
    let res = experiments::run_experiment::<f32>(&spec)?;
    experiments::write_experiment(&res, &spec, &out)?;
    for r in &res.results {
        match (&r.error, r.median_lde_px()) {
            (Some(e), _) => println!("{} seed {}: failed: {e}", r.arm, r.seed),
            (None, m) => println!("{} seed {}: median LDE {:.3} px", r.arm, r.seed, m.unwrap_or(f64::NAN)),
        }
    }
    let trend = match spec.kind {
        ExperimentKind::Ablation => Some(experiments::ablation_trend(&res)),
        ExperimentKind::OneFrame => Some(experiments::one_frame_trend(&res)),
        _ => None,
    };
    if let Some(t) = trend {
        println!("expected ordering held in {}/{} seeds", t.holds, t.per_seed.len());
    }
    println!("wrote {}", out.display());
    Ok(res.results.iter().all(|r| r.error.is_none()))
}
