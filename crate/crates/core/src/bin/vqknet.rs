use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vqknet::config::RunConfig;
use vqknet::data_io::{generate_synthetic, load_dataset, Dataset};
use vqknet::diagnostics::{run_gradient_suite, TOLERANCE};
use vqknet::eval::{default_thresholds, evaluate};
use vqknet::inference::{detect_videos, read_proposals, write_proposals};
use vqknet::losses::QsDistance;
use vqknet::model::QueryMode;
use vqknet::trainer::{train, Checkpoint};

#[derive(Parser)]
#[command(name = "vqknet", version, about = "Weakly-supervised temporal action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/test manifests, feature files, config.toml).
    Synth(SynthArgs),
    /// Train on a manifest; writes checkpoint.vqkc, train_log.jsonl and config.toml.
    Train(TrainArgs),
    /// Run a checkpoint over a manifest and write the proposal file.
    Infer(InferArgs),
    /// Score a proposal file against a manifest's ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every op and loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["video_specific", "uniform"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["cosine", "jensen_shannon", "euclidean", "manhattan"])]
    qs_distance: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Print nothing per epoch.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Proposal file to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for report.txt and report.kv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(fallback),
    }
}

fn load_manifest(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("manifest {} does not exist", path.display());
    }
    Ok(load_dataset(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref(), RunConfig::synthetic())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    create_dir(&a.out)?;
    let data = generate_synthetic(&cfg.synth, cfg.train.seed)?;
    let (train_path, test_path) = data.write(&a.out)?;
    cfg.model.num_classes = cfg.synth.num_classes;
    cfg.model.feature_dim = cfg.synth.feature_dim;
    cfg.save(&a.out.join("config.toml"))?;
    println!("train manifest {}", train_path.display());
    println!("test manifest  {}", test_path.display());
    println!("config         {}", a.out.join("config.toml").display());
    Ok(ExitCode::SUCCESS)
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let data = load_manifest(&a.manifest)?;
    let width = data.feature_dim().context("manifest lists no videos")?;
    let mut cfg = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            if cfg.model.num_classes != data.classes.len() || cfg.model.feature_dim != width {
                bail!(
                    "{}: model expects {} classes x {} features, manifest has {} x {}",
                    p.display(),
                    cfg.model.num_classes,
                    cfg.model.feature_dim,
                    data.classes.len(),
                    width
                );
            }
            cfg
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.model.num_classes = data.classes.len();
            cfg.model.feature_dim = width;
            cfg
        }
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = &a.mode {
        cfg.train.mode = mode.parse::<QueryMode>().map_err(anyhow::Error::msg)?;
    }
    if let Some(d) = &a.qs_distance {
        cfg.train.loss.qs_distance = d.parse::<QsDistance>().map_err(anyhow::Error::msg)?;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;

    create_dir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?;
    let mut write_err = None;
    let total = cfg.train.epochs;
    let outcome = train(
        cfg.model.clone(),
        cfg.train.clone(),
        &data.videos,
        &data.classes,
        None,
        |entry| {
            if !a.quiet {
                eprintln!("epoch {:>4}/{total}  loss {:.5}", entry.epoch, entry.total);
            }
            let line = serde_json::to_string(entry).expect("epoch log serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let ckpt_path = a.out.join("checkpoint.vqkc");
    outcome.checkpoint.save(&ckpt_path)?;
    cfg.save(&a.out.join("config.toml"))?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = load_config(a.config.as_deref(), RunConfig::default())?;
    let data = load_manifest(&a.manifest)?;
    if data.classes.len() != ckpt.model.num_classes {
        bail!(
            "{} has {} classes, checkpoint was trained on {}",
            a.manifest.display(),
            data.classes.len(),
            ckpt.model.num_classes
        );
    }
    let dets = detect_videos(
        &data.videos,
        &data.classes,
        &ckpt.params,
        &ckpt.model,
        ckpt.train.mode,
        &cfg.inference,
    )?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_proposals(&a.out, &dets)?;
    println!("{} proposals -> {}", dets.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let data = load_manifest(&a.manifest)?;
    if !a.proposals.exists() {
        bail!("proposal file {} does not exist", a.proposals.display());
    }
    let dets = read_proposals(&a.proposals)?;
    let report = evaluate(&dets, &data.ground_truth(), &data.classes, &default_thresholds())?;
    create_dir(&a.out)?;
    let table = report.to_table();
    let txt = a.out.join("report.txt");
    let kv = a.out.join("report.kv");
    fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
    fs::write(&kv, report.to_key_values()).with_context(|| format!("writing {}", kv.display()))?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let results = run_gradient_suite(a.seeds)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.max_rel_error < TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{:<36} {:.3e}  (seed {}, {} entries){}",
            r.name,
            r.max_rel_error,
            r.worst_seed,
            r.entries_checked,
            if ok { "" } else { "  FAIL" }
        );
    }
    if failed > 0 {
        eprintln!("error: {failed} case(s) at or above {TOLERANCE:e}");
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} cases below {TOLERANCE:e}", results.len());
    Ok(ExitCode::SUCCESS)
}
