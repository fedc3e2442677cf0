//! `comaml` — train, evaluate, sweep, export, and compare the few-shot
//! meta-learners on synthetic concept-structured task families.
//!
//! Configuration comes from an optional JSON file plus flags that mirror the
//! config keys; flags win. The output root is `--out-root`, falling back to
//! the `COMAML_OUT` environment variable, then the working directory.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 training
//! divergence.

use clap::{Args, Parser, Subcommand};
use comaml_core::data::Split;
use comaml_core::error::{ConfigError, CoreError};
use comaml_core::harness::{
    atomic_write, compare_table, config_hash, evaluate_checkpoint, export_assignments,
    load_checkpoint, load_record, run_experiment, sweep_concepts, ExperimentConfig, ResultRecord,
    OUTPUT_ROOT_ENV,
};
use comaml_core::meta::Algorithm;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "comaml",
    version,
    about = "Few-shot meta-learning experiments with learned concept assignments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm, evaluate it on fresh test episodes, and write
    /// config/metrics/checkpoint/result artifacts.
    Train(TrainArgs),
    /// Re-evaluate a saved checkpoint on a chosen split.
    Eval(EvalArgs),
    /// Train once per concept count and emit a plot-ready sensitivity curve.
    Sweep(SweepArgs),
    /// Export a checkpoint's learned concept assignment with a purity score.
    ExportAssignments(ExportArgs),
    /// Render result records as a comparison table (text + CSV).
    Compare(CompareArgs),
}

/// Flags that mirror config keys; any flag overrides the config file.
#[derive(Args)]
struct Overrides {
    /// Configuration file (JSON, may be partial); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// protonet | maml | protomaml | comet | comaml-static | comaml-vq
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Outer iteration count; also re-anchors the temperature anneal horizon
    /// unless --anneal-horizon is given.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    q_query: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    per_concept_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_norm: Option<bool>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    second_order: Option<bool>,
    #[arg(long)]
    entropy_coefficient: Option<f64>,
    #[arg(long)]
    tasks_per_batch: Option<usize>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    anneal_horizon: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    val_episodes: Option<usize>,
    /// Test episodes behind every reported mean ± half-width.
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    family_concepts: Option<usize>,
    #[arg(long)]
    family_classes: Option<usize>,
    #[arg(long)]
    train_classes: Option<usize>,
    #[arg(long)]
    val_classes: Option<usize>,
    #[arg(long)]
    test_classes: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    family_seed: Option<u64>,
    /// Subdirectory under the output root for this run's artifacts.
    #[arg(long)]
    output_dir: Option<String>,
    /// Output root (default: $COMAML_OUT, then the working directory).
    #[arg(long)]
    out_root: Option<PathBuf>,
}

impl Overrides {
    fn build_config(&self) -> Result<ExperimentConfig, CoreError> {
        let mut config = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(id) = &self.algorithm {
            config.algorithm = Algorithm::from_id(id)?;
        }
        macro_rules! set {
            ($flag:expr, $slot:expr) => {
                if let Some(v) = $flag {
                    $slot = v;
                }
            };
        }
        set!(self.seed, config.seed);
        set!(self.iterations, config.train.iterations);
        if self.iterations.is_some() && self.anneal_horizon.is_none() {
            config.train.schedule.horizon = config.train.iterations;
        }
        set!(self.n_way, config.train.n_way);
        set!(self.k_shot, config.train.k_shot);
        set!(self.q_query, config.train.q_query);
        set!(self.hidden, config.train.hidden);
        set!(self.embed_dim, config.train.embed_dim);
        set!(self.per_concept_dim, config.train.per_concept_dim);
        set!(self.dropout, config.train.dropout);
        set!(self.batch_norm, config.train.batch_norm);
        set!(self.inner_lr, config.train.adaptation.inner_lr);
        set!(self.inner_steps, config.train.adaptation.inner_steps);
        set!(self.outer_lr, config.train.adaptation.outer_lr);
        set!(self.second_order, config.train.adaptation.second_order);
        set!(self.entropy_coefficient, config.train.adaptation.entropy_coefficient);
        set!(self.tasks_per_batch, config.train.adaptation.tasks_per_batch);
        set!(self.lambda0, config.train.schedule.lambda0);
        set!(self.lambda_min, config.train.schedule.lambda_min);
        set!(self.anneal_horizon, config.train.schedule.horizon);
        set!(self.val_every, config.train.val_every);
        set!(self.val_episodes, config.train.val_episodes);
        set!(self.eval_episodes, config.eval_episodes);
        set!(self.family_concepts, config.family.n_concepts);
        set!(self.family_classes, config.family.n_classes);
        set!(self.train_classes, config.family.train_classes);
        set!(self.val_classes, config.family.val_classes);
        set!(self.test_classes, config.family.test_classes);
        set!(self.noise_std, config.family.noise_std);
        set!(self.family_seed, config.family.seed);
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        Ok(config)
    }

    fn output_root(&self) -> PathBuf {
        self.out_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Model-side concept count c.
    #[arg(long)]
    concepts: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// checkpoint.json written by `train`.
    checkpoint: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Episode count (default: the checkpoint's eval_episodes).
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation stream seed (default: the checkpoint's seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    q_query: Option<usize>,
    /// Where to write the evaluation record (default: next to the checkpoint).
    #[arg(long)]
    record_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Concept counts, ascending (e.g. 1,5,10,20).
    #[arg(long, value_delimiter = ',', required = true)]
    concepts: Vec<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// checkpoint.json written by `train`.
    checkpoint: PathBuf,
    /// Output stem; writes <stem>.csv, <stem>.json, <stem>.report.json
    /// (default: "assignments" next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// result.json files to compare.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Also write the table's CSV form here.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn parse_split(name: &str) -> Result<Split, CoreError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => {
            Err(ConfigError::Invalid(format!("unknown split {other:?} (train|val|test)")).into())
        }
    }
}

fn print_record(record: &ResultRecord) {
    for s in &record.splits {
        println!(
            "{} {}: accuracy {:.1} ± {:.1} over {} episodes (loss {:.4})",
            record.algorithm.id(),
            s.split,
            100.0 * s.mean_accuracy,
            100.0 * s.half_width,
            s.episodes,
            s.mean_loss,
        );
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Train(args) => {
            let mut config = args.overrides.build_config()?;
            if let Some(c) = args.concepts {
                config.train.concepts = c;
            }
            let root = args.overrides.output_root();
            println!("config {}", config_hash(&config));
            let output = run_experiment(&config, &root)?;
            print_record(&output.record);
            println!("wall clock {:.1}s", output.record.wall_clock_seconds);
            println!("artifacts in {}", output.dir.display());
        }
        Command::Eval(args) => {
            let mut checkpoint = load_checkpoint(&args.checkpoint)?;
            if let Some(n) = args.n_way {
                checkpoint.config.train.n_way = n;
            }
            if let Some(k) = args.k_shot {
                checkpoint.config.train.k_shot = k;
            }
            if let Some(q) = args.q_query {
                checkpoint.config.train.q_query = q;
            }
            let split = parse_split(&args.split)?;
            let episodes = args.episodes.unwrap_or(checkpoint.config.eval_episodes);
            let seed = args.seed.unwrap_or(checkpoint.config.seed);
            let record = evaluate_checkpoint(&checkpoint, split, episodes, seed)?;
            print_record(&record);
            let out = args.record_out.unwrap_or_else(|| {
                sibling(&args.checkpoint, &format!("eval-{}.json", split.tag()))
            });
            atomic_write(&out, serde_json::to_string_pretty(&record)?.as_bytes())?;
            println!("record written to {}", out.display());
        }
        Command::Sweep(args) => {
            let config = args.overrides.build_config()?;
            let root = args.overrides.output_root();
            let sweep = sweep_concepts(&config, &args.concepts, &root)?;
            for point in &sweep.points {
                match (&point.record, &point.error) {
                    (Some(record), _) => {
                        let s = record.primary_split().expect("completed record has a summary");
                        println!(
                            "c={}: accuracy {:.1} ± {:.1}",
                            point.concepts,
                            100.0 * s.mean_accuracy,
                            100.0 * s.half_width
                        );
                    }
                    (None, Some(error)) => println!("c={}: failed ({error})", point.concepts),
                    (None, None) => unreachable!("sweep point with neither record nor error"),
                }
            }
            println!("curve written to {}", sweep.csv_path.display());
        }
        Command::ExportAssignments(args) => {
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let stem = args.out.unwrap_or_else(|| sibling(&args.checkpoint, "assignments"));
            let report = export_assignments(&checkpoint, &stem)?;
            println!(
                "{} assignment over {} items: purity {:.3}, {} active concepts{}",
                report.mode,
                report.items,
                report.purity,
                report.active_concepts,
                if report.degenerate { " (degenerate)" } else { "" }
            );
            println!("assignment written to {}", stem.with_extension("csv").display());
        }
        Command::Compare(args) => {
            let records = args
                .records
                .iter()
                .map(|p| load_record(p))
                .collect::<Result<Vec<_>, _>>()?;
            let table = compare_table(&records)?;
            print!("{}", table.text);
            if let Some(path) = args.csv_out {
                atomic_write(&path, table.csv.as_bytes())?;
                println!("csv written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn sibling(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CoreError::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
