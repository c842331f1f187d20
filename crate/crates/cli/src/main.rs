mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use addv::checkpoint;
use addv::datagen::{generate_set, load_dataset, read_pfm, read_png, save_triplet, triplet_dir_name, Layout, DEPTH_FILE};
use addv::discretize::Strategy;
use addv::gradsuite::{run_suite, Scope};
use addv::losses::{LossConfig, UniformizingVariant};
use addv::nets::check_resolution;
use addv::report;
use addv::trainer::{evaluate, train_with, EvalOptions, TrainConfig, TrainStatus};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use manifest::RunRecord;

const CORRUPT_ENV: &str = "ADDV_GRADCHECK_CORRUPT";
const THREADS_ENV: &str = "ADDV_THREADS";

#[derive(Parser, Debug)]
#[command(name = "addv", version, about = "Self-supervised depth with adaptive disparity bins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    TwoPlane,
    Heightfield,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Ud,
    Sid,
    Addv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Ops,
    Losses,
    E2e,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long, value_enum, default_value = "addv")]
    strategy: StrategyArg,
    #[arg(long)]
    no_uniformizing: bool,
    #[arg(long)]
    no_sharpening: bool,
    /// Softmax temperature when sharpening is on.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 15)]
    lr_decay_epoch: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr_after: f64,
    #[arg(long, value_enum, default_value = "v2")]
    variant: VariantArg,
    /// Absolute instead of squared deviations in the uniformizing loss.
    #[arg(long)]
    abs_norm: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of triplets.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, value_enum, default_value = "two-plane")]
        layout: LayoutArg,
        /// Resolution as HxW, each divisible by 16.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the depth and pose networks.
    Train(TrainArgs),
    /// Evaluate a checkpoint against ground-truth depth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        /// Report metrics without median scaling.
        #[arg(long)]
        no_median_scaling: bool,
    },
    /// Per-image bin curves and disparity histograms.
    BinsReport {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image files or triplet folders (comma separated or repeated).
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_svg: bool,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl From<addv::Error> for Failure {
    fn from(e: addv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--size expects HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    check_resolution(h, w).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((h, w))
}

fn record(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>, started: String) -> Result<(), Failure> {
    let hash = manifest::artifact_hash(dir).map_err(io_err(dir))?;
    let rec = RunRecord {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        config,
        seed,
        artifact_hash: hash,
        started,
        finished: manifest::now(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest::append(dir, rec).map_err(io_err(dir))
}

fn cmd_gen(out: &Path, scenes: usize, layout: LayoutArg, size: &str, seed: u64) -> Result<(), Failure> {
    let started = manifest::now();
    let (h, w) = parse_size(size)?;
    let layout = match layout {
        LayoutArg::TwoPlane => Layout::TwoPlane,
        LayoutArg::Heightfield => Layout::Heightfield,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let set = generate_set(layout, scenes, w, h, seed)?;
    for (i, t) in set.iter().enumerate() {
        save_triplet(&out.join(triplet_dir_name(i)), t)?;
    }
    println!("wrote {scenes} triplets to {}", out.display());
    let config = json!({ "scenes": scenes, "layout": layout.to_string(), "height": h, "width": w });
    record(out, "gen", config, Some(seed), started)
}

#[allow(clippy::too_many_arguments)]
fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    if a.no_sharpening && a.tau.is_some() {
        return Err(Failure::Usage("--tau cannot be combined with --no-sharpening".into()));
    }
    let defaults = LossConfig::default();
    let loss = LossConfig {
        tau: a.tau.unwrap_or(defaults.tau),
        uniformizing: !a.no_uniformizing,
        sharpening: !a.no_sharpening,
        variant: match a.variant {
            VariantArg::V1 => UniformizingVariant::V1,
            VariantArg::V2 => UniformizingVariant::V2,
        },
        squared_norm: !a.abs_norm,
        ..defaults
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        lr_decay_epoch: a.lr_decay_epoch,
        lr_after: a.lr_after,
        batch: a.batch,
        seed: a.seed,
        loss,
        n_bins: a.bins,
        strategy: match a.strategy {
            StrategyArg::Ud => Strategy::Ud,
            StrategyArg::Sid => Strategy::Sid,
            StrategyArg::Addv => Strategy::Addv,
        },
        augment: !a.no_augment,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(data: &Path, out: &Path, cfg: TrainConfig) -> Result<(), Failure> {
    let started = manifest::now();
    let dataset = load_dataset(data)?;
    let triplets = dataset.load_all()?;
    if triplets.is_empty() {
        return Err(Failure::Runtime(format!("{}: dataset is empty", data.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let outcome = train_with(&triplets, &cfg, Some(out), |r| {
        let u = if cfg.loss.uniformizing { format!("  L_u {:.5}", r.l_u) } else { String::new() };
        println!(
            "epoch {:>3}  L_p {:.5}  L_smooth {:.5}{u}  L_final {:.5}  lr {:e}",
            r.epoch, r.l_p, r.l_smooth, r.l_final, r.lr
        );
    })?;
    let config = serde_json::to_value(&cfg).unwrap_or_default();
    record(out, "train", config, Some(cfg.seed), started)?;
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { epoch, reason } => Err(Failure::Runtime(format!(
            "training diverged at epoch {epoch} ({reason}); last good checkpoint kept in {}",
            out.display()
        ))),
    }
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, median_scaling: bool) -> Result<(), Failure> {
    let started = manifest::now();
    let (model, _) = checkpoint::load(ckpt)?;
    let dataset = load_dataset(data)?;
    for dir in dataset.entries() {
        let p = dir.join(DEPTH_FILE);
        if !p.exists() {
            return Err(Failure::Runtime(format!("{}: missing ground-truth depth", p.display())));
        }
    }
    let triplets = dataset.load_all()?;
    if triplets.is_empty() {
        return Err(Failure::Runtime(format!("{}: dataset is empty", data.display())));
    }
    let opts = EvalOptions {
        median_scaling,
        ..EvalOptions::default()
    };
    let rep = evaluate(&model, &triplets, &opts)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(&rep.mean).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(out, json + "\n").map_err(io_err(out))?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into());
    let csv_path = dir.join(format!("{stem}_per_image.csv"));
    let mut csv = String::from("image,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3\n");
    for (entry, m) in dataset.entries().iter().zip(&rep.per_image) {
        let name = entry.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
        ));
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    println!(
        "abs_rel {:.4}  sq_rel {:.4}  rmse {:.4}  rmse_log {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}",
        rep.mean.abs_rel, rep.mean.sq_rel, rep.mean.rmse, rep.mean.rmse_log, rep.mean.delta1, rep.mean.delta2, rep.mean.delta3
    );
    let config = json!({ "ckpt": ckpt, "data": data, "median_scaling": median_scaling });
    record(dir, "eval", config, None, started)
}

/// Image path, report name and optional ground truth for one input.
fn resolve_image(p: &Path) -> Result<(PathBuf, String, Option<PathBuf>), Failure> {
    let (img, name) = if p.is_dir() {
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (p.join("frame_1.png"), name)
    } else {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned());
        (p.to_path_buf(), parent.map(|d| format!("{d}_{stem}")).unwrap_or(stem))
    };
    let gt = (img.file_name().is_some_and(|f| f == "frame_1.png"))
        .then(|| img.with_file_name(DEPTH_FILE))
        .filter(|g| g.exists());
    Ok((img, name, gt))
}

fn cmd_bins_report(ckpt: &Path, images: &[PathBuf], out: &Path, svg: bool) -> Result<(), Failure> {
    let started = manifest::now();
    let (model, _) = checkpoint::load(ckpt)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut summary = Vec::new();
    let mut used = std::collections::HashSet::new();
    for (i, p) in images.iter().enumerate() {
        let (img_path, mut name, gt_path) = resolve_image(p)?;
        if !used.insert(name.clone()) {
            name = format!("{name}_{}", i + 1);
            used.insert(name.clone());
        }
        let img = read_png(&img_path)?;
        let gt = gt_path.as_deref().map(read_pfm).transpose()?;
        let r = report::analyze(&name, &img, gt.as_ref(), &model)?;
        report::write_report(out, &r, svg)?;
        println!("{name}: {} bins per scale, {} valid pixels", r.bins[0].len(), r.predicted.valid);
        summary.push(json!({ "name": name, "image": img_path, "ground_truth": gt_path }));
    }
    let config = json!({ "ckpt": ckpt, "images": summary, "svg": svg });
    record(out, "bins-report", config, None, started)
}

fn cmd_gradcheck(scope: Option<ScopeArg>) -> Result<(), Failure> {
    let corrupt = std::env::var(CORRUPT_ENV).ok().filter(|s| !s.is_empty());
    let scopes = match scope {
        Some(ScopeArg::Ops) => vec![Scope::Ops],
        Some(ScopeArg::Losses) => vec![Scope::Losses],
        Some(ScopeArg::E2e) => vec![Scope::E2e],
        None => vec![Scope::Ops, Scope::Losses, Scope::E2e],
    };
    let mut failed = Vec::new();
    for s in scopes {
        for r in run_suite(s, corrupt.as_deref())? {
            let status = if r.passed { "ok  " } else { "FAIL" };
            println!("{status} {:<24} max rel err {:.3e} over {} coords", r.name, r.max_rel_err, r.coords_checked);
            if let Some(f) = &r.failure {
                println!("     {f}");
            }
            if !r.passed {
                failed.push(format!("{} (max rel err {:.3e})", r.name, r.max_rel_err));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { out, scenes, layout, size, seed } => cmd_gen(&out, scenes, layout, &size, seed),
        Command::Train(args) => cmd_train(&args.data, &args.out, train_config(&args)?),
        Command::Eval { ckpt, data, out, no_median_scaling } => cmd_eval(&ckpt, &data, &out, !no_median_scaling),
        Command::BinsReport { ckpt, images, out, no_svg } => cmd_bins_report(&ckpt, &images, &out, !no_svg),
        Command::Gradcheck { scope } => cmd_gradcheck(scope),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                addv::parallel::set_thread_limit(n);
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
