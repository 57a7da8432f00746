//! Command-line front end: `gen-bench`, `train`, `eval`, `ablate`, `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{build_grid, compare_rows, run_grid, CellCache, GridData, GridName, GridResults};
use crate::config::RunConfig;
use crate::data::{Dataset, Domain, Split};
use crate::error::{Error, Result};
use crate::evaluation::map_report;
use crate::inference::{predict_dataset, write_predictions};
use crate::synthbench::{generate_splits, read_benchmark, summarize, write_benchmark, BenchSpec, Benchmark, ShiftSpec};
use crate::training::{dump_embeddings, fit, load_checkpoint, save_checkpoint, write_metric_log, FitData, LossFlags};

pub const THREADS_ENV: &str = "SADA_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sada", version, about = "Class-conditioned adversarial domain adaptation for temporal action localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target benchmark.
    GenBench(GenBenchArgs),
    /// Train a detector and write a checkpoint plus metric log.
    Train(TrainArgs),
    /// Predict on a split and write the mAP report.
    Eval(EvalArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Summarise one or more ablation result files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenBenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training videos per domain.
    #[arg(long, default_value_t = 40)]
    pub videos: usize,
    #[arg(long, default_value_t = 10)]
    pub val_videos: usize,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Rotation angle (radians) applied to target features.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Norm of the constant target offset.
    #[arg(long)]
    pub offset: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the alignment loss weight; 0 trains source-only.
    #[arg(long)]
    pub sada: Option<f64>,
    /// Alignment terms, comma separated from {local, global, bkg, mstn}, or `none`.
    #[arg(long)]
    pub align: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also write per-anchor embeddings of both validation splits.
    #[arg(long)]
    pub dump_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "target")]
    pub domain: String,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Fraction of background anchors removed before decoding.
    #[arg(long)]
    pub mask_background: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results CSV files written by `ablate`.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    /// Compare two rows by label: `--compare sada source-only`.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<String>>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads(std::env::var(THREADS_ENV).ok().as_deref()) {
        eprintln!("error: {e}");
        return 1;
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Sizes the global worker pool from the `SADA_NUM_THREADS` value, if any.
pub fn configure_threads(value: Option<&str>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBench(a) => cmd_gen_bench(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            must_exist(p, "config")?;
            RunConfig::load(p)
        }
        None => Ok(RunConfig::desk()),
    }
}

fn resolve(flag: Option<&PathBuf>, from_config: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(from_config)
        .cloned()
        .ok_or_else(|| Error::Validation(format!("no {what} directory given (flag or [paths] in config)")))
}

fn load_bench(dir: &Path, cfg: &RunConfig) -> Result<Benchmark> {
    must_exist(&dir.join("bench.json"), "benchmark")?;
    let (bench, meta) = read_benchmark(dir)?;
    if meta.bench.feature_dim != cfg.model.input_dim {
        return Err(Error::Validation(format!(
            "benchmark feature dim {} does not match model.input_dim {}",
            meta.bench.feature_dim, cfg.model.input_dim
        )));
    }
    Ok(bench)
}

pub fn parse_align(s: &str) -> Result<LossFlags> {
    let mut f = LossFlags::NONE;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "none" => {}
            "local" => f.local = true,
            "global" => f.global = true,
            "bkg" => f.bkg = true,
            "mstn" => f.mstn = true,
            other => {
                return Err(Error::Validation(format!(
                    "unknown alignment term {other:?}; use local, global, bkg, mstn or none"
                )))
            }
        }
    }
    Ok(f)
}

fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(Error::Validation(format!("--domain must be source or target, got {s:?}"))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(Error::Validation(format!("--split must be train or val, got {s:?}"))),
    }
}

pub fn cmd_gen_bench(a: &GenBenchArgs) -> Result<()> {
    let bench = BenchSpec {
        class_count: a.classes,
        videos_per_domain: a.videos,
        val_videos_per_domain: a.val_videos,
        length: a.length,
        feature_dim: a.dim,
        ..BenchSpec::default()
    };
    let d = ShiftSpec::default();
    let shift = ShiftSpec {
        rotation_angle_rad: a.shift.unwrap_or(d.rotation_angle_rad),
        offset_scale: a.offset.unwrap_or(d.offset_scale),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        seed: a.seed,
    };
    let data = generate_splits(&bench, &shift)?;
    write_benchmark(&data, &bench, &shift, &a.out)?;
    println!("wrote {}", a.out.display());
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Val] {
            println!("{domain}/{split}: {}", summarize(data.split(domain, split)));
        }
    }
    Ok(())
}

/// Applies `train` flag overrides to a loaded config.
pub fn apply_train_overrides(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = a.sada {
        cfg.train.lambda_sada = l;
    }
    if let Some(s) = &a.align {
        cfg.train.loss_flags = parse_align(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.data.is_some() {
        cfg.paths.data = a.data.clone();
    }
    if a.out.is_some() {
        cfg.paths.out = a.out.clone();
    }
    cfg.validate()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_train_overrides(&mut cfg, a)?;
    let data_dir = resolve(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = resolve(a.out.as_ref(), cfg.paths.out.as_ref(), "output")?;
    let bench = load_bench(&data_dir, &cfg)?;
    create_dir(&out)?;
    cfg.save(out.join("config.toml"))?;

    let outcome = fit(
        &cfg.model,
        &cfg.train,
        &FitData {
            source_train: Some(&bench.source_train),
            target_train: Some(&bench.target_train),
            source_val: Some(&bench.source_val),
            target_val: Some(&bench.target_val),
        },
    )?;
    save_checkpoint(&outcome.state, Some(&cfg.train), out.join("checkpoint.sadc"))?;
    write_metric_log(&outcome.log, out.join("metrics.csv"))?;
    if a.dump_embeddings {
        dump_embeddings(
            &outcome.state,
            &[&bench.source_val, &bench.target_val],
            cfg.train.alpha,
            out.join("embeddings.csv"),
        )?;
    }
    println!(
        "trained {} epochs, kept epoch {}; outputs in {}",
        outcome.log.len(),
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    must_exist(&a.checkpoint, "checkpoint")?;
    let mut cfg = match &a.config {
        Some(p) => load_config(Some(p))?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.mask_background {
        cfg.predict.mask_background = p;
    }
    if let Some(s) = a.seed {
        cfg.predict.mask_seed = s;
    }
    let domain = parse_domain(&a.domain)?;
    let split = parse_split(&a.split)?;
    let (state, _) = load_checkpoint(&a.checkpoint)?;
    cfg.model = state.model.config.clone();
    cfg.train.level_weights = vec![1.0; cfg.model.levels];
    if a.data.is_some() {
        cfg.paths.data = a.data.clone();
    }
    if a.out.is_some() {
        cfg.paths.out = a.out.clone();
    }
    cfg.validate()?;
    let data_dir = resolve(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let bench = load_bench(&data_dir, &cfg)?;
    let dataset: &Dataset = bench.split(domain, split);
    let preds = predict_dataset(&state.model, &state.ema, dataset, &cfg.predict, &cfg.nms)?;
    let report = map_report(&preds, dataset, &cfg.eval)?;
    print!("{report}");
    if let Some(out) = cfg.paths.out.clone() {
        create_dir(&out)?;
        let stem = format!("{domain}_{split}");
        write_predictions(&preds, out.join(format!("{stem}_predictions.jsonl")))?;
        report.write_csv(out.join(format!("{stem}_map.csv")))?;
        report.write_json(out.join(format!("{stem}_map.json")))?;
        cfg.save(out.join("eval_config.toml"))?;
    }
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let grid_name: GridName = a.grid.parse()?;
    if a.seeds == 0 {
        return Err(Error::Validation("--seeds must be at least 1".into()));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.paths.data = a.data.clone();
    }
    if a.out.is_some() {
        cfg.paths.out = a.out.clone();
    }
    let data_dir = resolve(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = resolve(a.out.as_ref(), cfg.paths.out.as_ref(), "output")?;
    let bench = load_bench(&data_dir, &cfg)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed + i).collect();
    let grid = build_grid(grid_name, &cfg, &seeds);
    create_dir(&out)?;
    cfg.save(out.join("config.toml"))?;

    let data = GridData {
        source_train: &bench.source_train,
        target_train: &bench.target_train,
        source_val: &bench.source_val,
        target_val: &bench.target_val,
    };
    let mut cache = CellCache::new();
    let results = run_grid(&grid, &data, &mut cache, |c| {
        eprintln!("{:<16} seed {:>3}  avg mAP {:.4}", c.label, c.seed, c.avg_map);
    })?;
    results.write_csv(out.join(format!("results_{grid_name}.csv")))?;
    let text = render_with_comparisons(&results);
    std::fs::write(out.join(format!("table_{grid_name}.txt")), &text).map_err(|e| Error::io(&out, e))?;
    print!("{text}");
    Ok(())
}

/// Row pairs worth comparing for each grid.
pub fn default_comparisons(grid: &str) -> Vec<(&'static str, &'static str)> {
    match grid {
        "table4" => vec![("local+bkg", "none"), ("local+bkg", "global")],
        "baselines" => vec![("sada", "source-only"), ("sada", "dann"), ("sada", "mstn")],
        "mask-bkg" => vec![("100%", "0%")],
        "lambda-levels" => vec![("configured", "all levels 1")],
        "class-emb" => vec![("learnable", "one_hot")],
        _ => vec![],
    }
}

fn comparison_line(results: &GridResults, a: &str, b: &str) -> Result<String> {
    let c = compare_rows(results, a, b)?;
    Ok(format!(
        "{a} vs {b}: {:+.2} points, wins {}/{}/{} (a/b/tie)\n",
        100.0 * c.mean_gap,
        c.wins_a,
        c.wins_b,
        c.ties
    ))
}

pub fn render_with_comparisons(results: &GridResults) -> String {
    let mut s = format!("grid {}\n{}", results.grid, results.render());
    for (a, b) in default_comparisons(&results.grid) {
        if let Ok(line) = comparison_line(results, a, b) {
            s.push_str(&line);
        }
    }
    s
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    for path in &a.results {
        must_exist(path, "results file")?;
        let results = GridResults::read_csv(path)?;
        print!("{}", render_with_comparisons(&results));
        if let Some(pair) = &a.compare {
            print!("{}", comparison_line(&results, &pair[0], &pair[1])?);
        }
        println!();
    }
    Ok(())
}
