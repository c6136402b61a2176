use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vql_core::config::ExperimentConfig;
use vql_core::data::{generate_dataset, read_annotations, read_predictions, write_predictions, Dataset, PredictionRecord};
use vql_core::gradcheck::{run_suite, TOLERANCE};
use vql_core::inference::{predict_dataset, run_video, InferenceConfig};
use vql_core::metrics::{evaluate, pair_records, MetricsReport};
use vql_core::model::Model;
use vql_core::params::{load_checkpoint, ParamSet};
use vql_core::trainer::Trainer;

#[derive(Parser)]
#[command(name = "vql", version, about = "Visual query localization: generate, train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Localize every query of a dataset and write predictions.json.
    Infer(InferArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every block.
    Gradcheck(GradcheckArgs),
    /// Measure inference throughput in frames per second.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON); overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: toy or full.
    #[arg(long, default_value = "toy")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => Ok(ExperimentConfig::load(p)?),
            None => Ok(ExperimentConfig::preset(&self.preset)?),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of videos (one query each).
    #[arg(long, default_value_t = 4)]
    videos: usize,
    /// Append this many query-free frames (the scene's distractors only) to every video.
    #[arg(long)]
    tail_frames: Option<usize>,
    /// Add this many same-colour look-alikes to the appended frames.
    #[arg(long)]
    tail_lookalikes: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Worker threads; 1 is the bit-deterministic reference mode (results are identical
    /// for any value).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PostArgs {
    /// Zero per-frame probabilities below this before smoothing.
    #[arg(long)]
    phi: Option<f64>,
    /// Median filter length over the per-frame scores (odd).
    #[arg(long, alias = "median-kernel")]
    window: Option<usize>,
    /// Keep peaks at or above this fraction of the strongest one.
    #[arg(long)]
    peak_ratio: Option<f64>,
    /// Extend the track while scores stay at or above this fraction of its peak.
    #[arg(long)]
    extent_ratio: Option<f64>,
}

impl PostArgs {
    fn apply(&self, cfg: &mut InferenceConfig) -> Result<()> {
        if let Some(v) = self.phi {
            cfg.phi = v;
        }
        if let Some(v) = self.window {
            cfg.median_kernel = v;
        }
        if let Some(v) = self.peak_ratio {
            cfg.peak_ratio = v;
        }
        if let Some(v) = self.extent_ratio {
            cfg.extent_ratio = v;
        }
        Ok(cfg.validate()?)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Training output directory, or a checkpoint stem (`<stem>.bin` + `<stem>.json`).
    #[arg(long)]
    model: PathBuf,
    /// Experiment configuration; defaults to the config.json saved next to the model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    post: PostArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Directory for metrics.json and per_query.csv; prints the summary only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 when stAP25 falls below this.
    #[arg(long)]
    min_stap: Option<f64>,
    /// Exit with status 2 when tAP25 falls below this.
    #[arg(long)]
    min_tap: Option<f64>,
    /// Exit with status 2 when recovery (percent) falls below this.
    #[arg(long)]
    min_recovery: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Write the per-block report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Passes over the dataset.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

/// Failure kinds mapped to exit codes: validation problems exit 1, unmet acceptance
/// thresholds exit 2.
#[derive(Debug)]
struct ThresholdFailure(String);

impl std::fmt::Display for ThresholdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ThresholdFailure>() => {
            eprintln!("fail: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain, skipping causes already quoted by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(cfg.save(&dir.join("config.json"))?)
}

fn data_dir(given: Option<&PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match given.or(cfg.data.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("no dataset: pass --data or set `data` in the config"),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(t) = a.tail_frames {
        cfg.synthetic.tail_frames = t;
    }
    if let Some(n) = a.tail_lookalikes {
        cfg.synthetic.tail_lookalikes = n;
    }
    if let Some(d) = a.distractors {
        cfg.synthetic.distractors = d;
    }
    cfg.validate()?;
    let (ds, _) = generate_dataset(a.seed, a.videos, &cfg.synthetic)?;
    ds.save(&a.out)?;
    let echo = serde_json::json!({ "seed": a.seed, "videos": a.videos, "synthetic": cfg.synthetic });
    fs::write(a.out.join("generator.json"), serde_json::to_string_pretty(&echo)? + "\n")?;
    println!("wrote {} videos to {}", ds.videos.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
        cfg.train.warmup_iters = cfg.train.warmup_iters.min(n);
    }
    let data = data_dir(a.data.as_ref(), &cfg)?;
    let data = fs::canonicalize(&data).with_context(|| format!("dataset {}", data.display()))?;
    cfg.data = Some(data.clone());
    cfg.validate()?;
    let ds = Dataset::load(&data)?;
    echo_config(&cfg, &a.out)?;
    let (model, params) = Model::init::<f32>(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(&model, params, &ds, cfg.train.clone(), cfg.loss.clone(), a.workers)?;
    let every = (cfg.train.iterations / 20).max(1);
    let start = Instant::now();
    trainer.run(Some(&a.out), |l| {
        if l.iter % every == 0 || l.iter == 1 {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4} (bbox {:.4}, prob {:.4})  {:.0}s",
                l.iter,
                l.lr,
                l.total,
                l.l_bbox,
                l.l_prob,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("wrote {}", a.out.join("model.bin").display());
    Ok(())
}

struct Loaded {
    cfg: ExperimentConfig,
    model: Model,
    params: ParamSet<f32>,
    data: Dataset,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let (stem, dir) = if a.model.is_dir() {
        (a.model.join("model"), a.model.clone())
    } else {
        (a.model.clone(), a.model.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let p = dir.join("config.json");
            ExperimentConfig::load(&p).with_context(|| format!("no --config given and {} unusable", p.display()))?
        }
    };
    let data = Dataset::load(&data_dir(a.data.as_ref(), &cfg)?)?;
    let (model, template) = Model::init::<f32>(&cfg.model, cfg.train.seed)?;
    let params = load_checkpoint(&template, &stem)?;
    Ok(Loaded { cfg, model, params, data })
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let Loaded { mut cfg, model, params, data } = load_model(&a.model)?;
    a.post.apply(&mut cfg.inference)?;
    let preds = predict_dataset(&model, &params, &data, &cfg.inference, a.model.workers)?;
    let records: Vec<PredictionRecord> = preds
        .iter()
        .filter_map(|(id, t)| t.as_ref().map(|t| PredictionRecord::new(id.clone(), t)))
        .collect();
    echo_config(&cfg, &a.out)?;
    write_predictions(&records, &a.out.join("predictions.json"))?;
    println!("{} of {} queries localized; wrote {}", records.len(), preds.len(), a.out.join("predictions.json").display());
    Ok(())
}

fn write_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for q in &report.per_query {
        w.serialize(q)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let annotations = read_annotations(&a.annotations)?;
    let predictions = read_predictions(&a.predictions)?;
    let report = evaluate(&pair_records(&annotations, &predictions)?)?;
    println!(
        "tAP25 {:.4}  stAP25 {:.4}  recovery {:.2}%  success {:.2}%  ({} queries)",
        report.tap25, report.stap25, report.recovery_pct, report.success_pct, report.queries
    );
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        write_csv(&report, &dir.join("per_query.csv"))?;
    }
    let mut failed = Vec::new();
    for (name, min, got) in [
        ("tAP25", a.min_tap, report.tap25),
        ("stAP25", a.min_stap, report.stap25),
        ("recovery", a.min_recovery, report.recovery_pct),
    ] {
        if let Some(min) = min.filter(|m| got < *m) {
            failed.push(format!("{name} {got:.4} < {min}"));
        }
    }
    if !failed.is_empty() {
        return Err(ThresholdFailure(failed.join(", ")).into());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_suite(&a.seeds)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:4} {:<28} seed {:<3} {:>4} coords  max rel err {:.2e} ({})", r.block, r.seed, r.checked, r.max_rel_err, r.worst);
        failed += usize::from(!r.passed());
    }
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    if failed > 0 {
        return Err(ThresholdFailure(format!("{failed} of {} checks exceed relative error {TOLERANCE:e}", reports.len())).into());
    }
    println!("all {} checks below {TOLERANCE:e}", reports.len());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let Loaded { cfg, model, params, data } = load_model(&a.model)?;
    let frames: usize = data
        .queries
        .iter()
        .map(|q| data.videos[data.video_index(q).unwrap_or(0)].len())
        .sum::<usize>()
        * a.repeats;
    let start = Instant::now();
    for _ in 0..a.repeats {
        if a.model.workers > 1 {
            predict_dataset(&model, &params, &data, &cfg.inference, a.model.workers)?;
        } else {
            for q in &data.queries {
                let video = &data.videos[data.video_index(q)?];
                run_video(&model, &params, &video.frames, &q.image, &cfg.inference)?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    println!("{frames} frames in {secs:.2}s: {:.1} frames/s ({} workers)", frames as f64 / secs, a.model.workers);
    Ok(())
}
