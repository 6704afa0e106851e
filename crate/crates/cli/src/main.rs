//! `mog`: generate data, train both phases, evaluate, check gradients and
//! run the α/β ablation grid. Every command writes `resolved_config.json`
//! next to its outputs.

use clap::{Args, Parser, Subcommand};
use mog_core::eval::{evaluate_net, oracle_metrics, MetricsTable};
use mog_core::experiment::{ablation_grid, AblationTable};
use mog_core::gradsuite::run_suite;
use mog_core::losses::LossConfig;
use mog_core::model::Phase;
use mog_core::scene::{generate_dataset, Dataset, GenConfig, Subset, SubsetMix};
use mog_core::trainer::{
    log_to_jsonl, train_auxiliary_with, train_inference_with, Checkpoint, EpochLog, TrainConfig, TrainOutput,
};
use mog_core::Error;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

#[derive(Parser, Debug)]
#[command(name = "mog", version, about = "Multi-object 3D grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark split.
    Gen(GenArgs),
    /// Train the auxiliary (aux) or inference (inf) network.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground-truth oracle) with F1@0.5.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train the inference network over an alpha x beta grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Subset proportions, e.g. `mt=0.5,st_w_d=0.5`.
    #[arg(long)]
    mix: Option<String>,
    /// Global index of the first scene (use disjoint ranges for splits).
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// Comma-separated stage thresholds in metres, one per fusion block.
    #[arg(long, default_value = "1.0,0.5,0.0")]
    deltas: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_phase)]
    phase: Phase,
    #[arg(long)]
    aux_ckpt: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle_gt")]
    ckpt: Option<PathBuf>,
    /// Select exactly the targets and score them with ground-truth boxes.
    #[arg(long)]
    oracle_gt: bool,
    /// Overrides the checkpoint's prediction threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random draws per primitive and per loss.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split used for scoring each grid point.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    aux_ckpt: PathBuf,
    #[arg(long, default_value = "0,0.2")]
    alphas: String,
    #[arg(long, default_value = "0")]
    betas: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    Phase::parse(s).ok_or_else(|| format!("unknown phase {s:?} (expected aux or inf)"))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} value {p:?}")))
        })
        .collect()
}

impl HyperArgs {
    fn train_config(&self, phase: Phase, aux: Option<&Path>) -> Result<TrainConfig, Error> {
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            loss: LossConfig {
                alpha: self.alpha,
                beta: self.beta,
                margin: self.margin,
                deltas: parse_list(&self.deltas, "delta")?,
                predict_threshold: self.threshold,
            },
            phase,
            seed: self.seed,
            aux_checkpoint: aux.map(|p| p.display().to_string()),
            ..TrainConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn require_dir(dir: &Path) -> Result<(), Error> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )))
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_resolved(dir: &Path, value: serde_json::Value) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    write(dir, RESOLVED_CONFIG, &s)
}

fn print_epoch(r: &EpochLog) {
    println!(
        "epoch {:>3}  total {:.6}  ground {:.6}  hier {:.6}  align_A {:.6}  align_H {:.6}  distinct {:.6}  ({:.1}s)",
        r.epoch, r.loss_total, r.loss_ground, r.loss_hier, r.loss_align_a, r.loss_align_h, r.loss_distinct, r.wall_time
    );
}

fn print_metrics(m: &MetricsTable) {
    for s in Subset::ALL {
        let r = m.get(s);
        println!("{:<8} {:>6}  F1@0.5 {:.4}", r.subset, r.count, r.f1);
    }
    println!("{:<8} {:>6}  F1@0.5 {:.4}", "all", m.all.count, m.all.f1);
}

fn cmd_gen(a: &GenArgs) -> Result<(), Error> {
    let config = GenConfig {
        scenes: a.scenes,
        index_offset: a.offset,
        queries_per_scene: a.queries,
        mix: match &a.mix {
            Some(m) => SubsetMix::parse(m)?,
            None => SubsetMix::default(),
        },
        ..GenConfig::default()
    };
    config.validate()?;
    require_dir(&a.out)?;
    let data = generate_dataset(&config, a.seed)?;
    data.save(&a.out)?;
    write_resolved(&a.out, json!({ "command": "gen", "seed": a.seed, "generation": config }))?;
    println!("scenes {}  queries {}", data.scenes.len(), data.query_count());
    let mut counts = [0usize; 5];
    for q in data.scenes.iter().flat_map(|s| &s.queries) {
        counts[q.subset.index()] += 1;
    }
    for s in Subset::ALL {
        println!("{:<8} {}", s.label(), counts[s.index()]);
    }
    Ok(())
}

fn finish_training(out: &Path, result: &TrainOutput) -> Result<(), Error> {
    result.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(out, TRAIN_LOG, &log_to_jsonl(&result.log)?)
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    if a.phase == Phase::Inference && a.aux_ckpt.is_none() {
        return Err(Error::Config("--phase inf requires --aux-ckpt".into()));
    }
    let config = a.hyper.train_config(a.phase, a.aux_ckpt.as_deref())?;
    require_dir(&a.out)?;
    let data = Dataset::load(&a.data)?;
    write_resolved(
        &a.out,
        json!({
            "command": "train",
            "data": a.data.display().to_string(),
            "dataset_fingerprint": data.fingerprint()?,
            "train": config,
        }),
    )?;
    let result = match a.phase {
        Phase::Auxiliary => train_auxiliary_with(&data, &config, print_epoch)?,
        Phase::Inference => {
            let aux = Checkpoint::load(a.aux_ckpt.as_deref().expect("checked above"))?;
            train_inference_with(&data, &aux, &config, print_epoch)?
        }
    };
    finish_training(&a.out, &result)?;
    println!("wrote {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Error> {
    require_dir(&a.out)?;
    let data = Dataset::load(&a.data)?;
    let (metrics, resolved) = if a.oracle_gt {
        let m = oracle_metrics(&data, a.tau)?;
        (m, json!({ "command": "eval", "mode": "oracle_gt", "tau": a.tau }))
    } else {
        let path = a.ckpt.as_deref().expect("clap requires --ckpt without --oracle-gt");
        let ckpt = Checkpoint::load(path)?;
        let threshold = a.threshold.unwrap_or(ckpt.loss_config.predict_threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config("--threshold must lie in (0, 1)".into()));
        }
        let net = ckpt.to_net()?;
        let m = evaluate_net(&data, &net, threshold, a.tau)?;
        let resolved = json!({
            "command": "eval",
            "mode": "checkpoint",
            "checkpoint": path.display().to_string(),
            "phase": ckpt.phase,
            "loss_config": ckpt.loss_config,
            "threshold": threshold,
            "tau": a.tau,
        });
        (m, resolved)
    };
    let mut resolved = resolved;
    resolved["data"] = json!(a.data.display().to_string());
    resolved["dataset_fingerprint"] = json!(data.fingerprint()?);
    write_resolved(&a.out, resolved)?;
    write(&a.out, METRICS_FILE, &metrics.to_csv())?;
    print_metrics(&metrics);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool, Error> {
    if let Some(out) = &a.out {
        require_dir(out)?;
    }
    let report = run_suite(a.points, a.seed)?;
    print!("{}", report.to_csv());
    if let Some(out) = &a.out {
        write_resolved(
            out,
            json!({ "command": "gradcheck", "points": a.points, "seed": a.seed, "tolerance": report.tolerance }),
        )?;
        write(out, GRADCHECK_FILE, &report.to_csv())?;
    }
    if report.passed() {
        println!("all {} checks passed", report.ops.len());
    } else {
        println!("FAILED: {}", report.failures().join(", "));
    }
    Ok(report.passed())
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), Error> {
    let alphas = parse_list(&a.alphas, "alpha")?;
    let betas = parse_list(&a.betas, "beta")?;
    let base = a.hyper.train_config(Phase::Inference, Some(&a.aux_ckpt))?;
    for &v in alphas.iter().chain(&betas) {
        if !(v >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
    }
    require_dir(&a.out)?;
    let train = Dataset::load(&a.data)?;
    let eval = Dataset::load(&a.eval_data)?;
    let aux = Checkpoint::load(&a.aux_ckpt)?;
    write_resolved(
        &a.out,
        json!({
            "command": "ablate",
            "data": a.data.display().to_string(),
            "eval_data": a.eval_data.display().to_string(),
            "alphas": alphas,
            "betas": betas,
            "train": base,
        }),
    )?;
    let table: AblationTable = ablation_grid(&train, &eval, &aux, &base, &alphas, &betas)?;
    write(&a.out, ABLATION_FILE, &table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Json(_)
        | Error::IdOutOfRange(_)
        | Error::UnknownToken { .. }
        | Error::SequenceTooLong { .. }
        | Error::EmptyPointSet => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(4),
            Err(e) => Err(e),
        },
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
