//! `daedl`: train, evaluate, map and ablate density aware evidential models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daedl::data::{self, LabeledDataset};
use daedl::experiment::{
    self, ablation_csv, history_csv, landscape_csv, score_dump_csv, GridSpec, Measure, RunConfig,
};
use daedl::{Checkpoint, Error, FittedModel};

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(
    name = "daedl",
    version,
    about = "Density aware evidential deep learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and fit its feature density; writes model.ckpt and history.csv.
    Train(RunArgs),
    /// Score an ID test set against one or more OOD sets.
    Eval(EvalArgs),
    /// Uncertainty scores over a 2-D grid.
    Landscape(LandscapeArgs),
    /// Train and evaluate every requested EXP/DE/SN combination.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key-value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// In-distribution test CSV.
    #[arg(long)]
    id: PathBuf,
    /// OOD CSV; repeatable. Each set is named after its file stem.
    #[arg(long, required = true)]
    ood: Vec<PathBuf>,
    #[arg(long, default_value = "aleatoric,epistemic", value_delimiter = ',')]
    measures: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_name = "LO:HI", default_value = "-2.5:3.5")]
    x_range: String,
    #[arg(long, value_name = "LO:HI", default_value = "-2:2.5")]
    y_range: String,
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// `DAEDL_THREADS` caps the worker pool used for prediction and ablations.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DAEDL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DAEDL_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(command: Command) -> daedl::Result<()> {
    match command {
        Command::Train(args) => train(&args),
        Command::Eval(args) => eval(&args),
        Command::Landscape(args) => landscape(&args),
        Command::Ablate(args) => ablate(&args),
    }
}

fn load_config(args: &RunArgs) -> daedl::Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("out={}", out.display()));
    }
    RunConfig::from_file(&args.config)?.with_overrides(&overrides)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> daedl::Result<()> {
    fs::write(path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train(args: &RunArgs) -> daedl::Result<()> {
    let cfg = load_config(args)?;
    let (model, history, prepared) = experiment::train_from_config(&cfg)?;
    let out = &cfg.out;
    fs::create_dir_all(out.join("data"))?;
    model
        .to_checkpoint(cfg.train.clone(), cfg.to_json())
        .save(out.join(CHECKPOINT_FILE))?;
    write(&out.join("history.csv"), history_csv(&history))?;
    // Held-out sets as CSV so `eval` can be run on them directly.
    data::write_csv(&prepared.test, out.join("data/test.csv"))?;
    for ds in &prepared.others {
        data::write_csv(ds, out.join(format!("data/{}.csv", ds.name())))?;
    }
    println!(
        "trained {} epochs, checkpoint {}",
        history.epochs.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_model(path: &Path) -> daedl::Result<FittedModel> {
    FittedModel::from_checkpoint(Checkpoint::load(path)?)
}

fn eval(args: &EvalArgs) -> daedl::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let measures: Vec<Measure> = args
        .measures
        .iter()
        .map(|m| m.trim().parse())
        .collect::<daedl::Result<_>>()?;
    let id = data::read_csv(&args.id)?;
    let others: Vec<LabeledDataset> = args
        .ood
        .iter()
        .map(data::read_csv)
        .collect::<daedl::Result<_>>()?;
    let (mut report, records) = experiment::evaluate(&model, &id, &others, &measures)?;
    fs::create_dir_all(&args.out)?;
    let dump = args.out.join("scores.csv");
    write(&dump, score_dump_csv(&records))?;
    report.score_dump = Some(dump);
    report.config = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "id": args.id.display().to_string(),
        "ood": args.ood.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "measures": measures.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        "use_density": model.use_density,
    });
    let text = report.to_text();
    write(&args.out.join("report.txt"), &text)?;
    write(&args.out.join("report.json"), report.to_json()?)?;
    print!("{text}");
    Ok(())
}

fn parse_range(s: &str, what: &str) -> daedl::Result<(f64, f64)> {
    let bad = || Error::Config(format!("{what} must look like LO:HI, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn landscape(args: &LandscapeArgs) -> daedl::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let grid = GridSpec {
        x_range: parse_range(&args.x_range, "--x-range")?,
        y_range: parse_range(&args.y_range, "--y-range")?,
        resolution: args.resolution,
    };
    let cells = experiment::landscape(&model, &grid)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("landscape.csv");
    write(&path, landscape_csv(&cells))?;
    println!("{} cells written to {}", cells.len(), path.display());
    Ok(())
}

fn ablate(args: &RunArgs) -> daedl::Result<()> {
    let cfg = load_config(args)?;
    let rows = experiment::run_ablation(&cfg, &cfg.ablate)?;
    fs::create_dir_all(&cfg.out)?;
    let table = ablation_csv(&rows);
    write(&cfg.out.join("ablation.csv"), &table)?;
    for row in &rows {
        let name = row.variant.to_string().replace('+', "_");
        write(
            &cfg.out.join(format!("report_{name}.txt")),
            row.report.to_text(),
        )?;
    }
    print!("{table}");
    Ok(())
}
