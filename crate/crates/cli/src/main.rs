//! `synergy-ctl`: train, evaluate and inspect synergy-structured policies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synergy_core::clustering::ApConfig;
use synergy_core::harness::{
    cmd_cluster, cmd_eval, cmd_export_synergies, cmd_rank_check, cmd_train, load_family, resolve_output, EvalPolicy,
    EvalRequest, EvalRow, HarnessError, RankRequest, RunConfig,
};
use synergy_core::linkworld::PhysicsConfig;

#[derive(Parser)]
#[command(name = "synergy-ctl", version, about = "Synergy-structured multi-robot TD3 runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a run config.
    Train(TrainArgs),
    /// Evaluate checkpoints or a random policy on family variants.
    Eval(EvalArgs),
    /// Cluster one morphology file.
    Cluster(ClusterArgs),
    /// Write the synergy history stored in a checkpoint as CSV.
    ExportSynergies(ExportArgs),
    /// Check that actions stay within the span of the synergy actions.
    RankCheck(RankArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Train only these seeds instead of the config's list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Parallel rollout workers.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; repeat for several seeds.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Run directory; evaluates every `seed_*/final.ckpt` inside.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Evaluate uniform random actions instead of a checkpoint.
    #[arg(long)]
    random: bool,
    /// Family for `--random` (file or built-in name).
    #[arg(long)]
    family: Option<String>,
    /// Seeds of the random policy.
    #[arg(long = "random-seeds", value_delimiter = ',', default_value = "0,1,2,3")]
    random_seeds: Vec<u64>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Evaluate the family's held-out split.
    #[arg(long)]
    heldout: bool,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Morphology JSON with `robot_id`, `state_dim` and `parents`.
    #[arg(long)]
    morphology: PathBuf,
    /// Comma-separated preference per actuator; median similarity when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    preference: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 15)]
    stable_window: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Use a contiguous split into this many synergies.
    #[arg(long)]
    synergies: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    explore_noise: f64,
}

fn seed_checkpoints(run: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let entries = std::fs::read_dir(run).map_err(|e| HarnessError::Io { path: run.into(), reason: e.to_string() })?;
    let mut found: Vec<(u64, PathBuf)> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix("seed_")?.parse().ok()?;
            let ckpt = e.path().join("final.ckpt");
            ckpt.is_file().then_some((seed, ckpt))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(HarnessError::Usage(format!("no seed_*/final.ckpt under {}", run.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn print_rows(rows: &[EvalRow]) {
    println!("{:<28} {:>3} {:>7} {:>12} {:>25}", "variant", "K", "sources", "mean", "95% CI");
    for r in rows {
        let ci = match r.ci95 {
            Some((lo, hi)) => format!("[{lo:.2}, {hi:.2}]"),
            None => "-".into(),
        };
        println!("{:<28} {:>3} {:>7} {:>12.2} {:>25}", r.variant, r.num_actuators, r.per_source.len(), r.mean, ci);
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            cfg.validate()?;
            let seeds = (!a.seeds.is_empty()).then_some(&a.seeds[..]);
            for s in cmd_train(&cfg, seeds)? {
                println!(
                    "seed {}: {} steps, {} episodes, final return {:.2}, outputs in {}",
                    s.seed,
                    s.total_steps,
                    s.episodes,
                    s.final_return,
                    s.dir.display()
                );
            }
        }
        Command::Eval(a) => {
            let policy = if a.random {
                let name = a.family.ok_or_else(|| HarnessError::Usage("--random needs --family".into()))?;
                let family = load_family(&name, Path::new("."))?;
                EvalPolicy::Random { seeds: a.random_seeds, family, physics: PhysicsConfig::default() }
            } else {
                let mut paths = a.checkpoints;
                if let Some(run) = &a.run {
                    paths.extend(seed_checkpoints(run)?);
                }
                if paths.is_empty() {
                    return Err(HarnessError::Usage("give --checkpoint, --run or --random".into()));
                }
                EvalPolicy::Checkpoints(paths)
            };
            let req = EvalRequest {
                policy,
                variants: a.variants,
                heldout: a.heldout,
                episodes: a.episodes,
                seed: a.seed,
                output: a.out.map(|p| resolve_output(&p)),
            };
            print_rows(&cmd_eval(&req)?);
        }
        Command::Cluster(a) => {
            let ap = ApConfig { damping: a.damping, max_iter: a.max_iter, stable_window: a.stable_window };
            let report = cmd_cluster(&a.morphology, a.preference.as_deref(), &ap)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::ExportSynergies(a) => {
            for p in cmd_export_synergies(&a.checkpoint, &resolve_output(&a.out))? {
                println!("{}", p.display());
            }
        }
        Command::RankCheck(a) => {
            let req = RankRequest {
                checkpoint: a.checkpoint,
                variant: a.variant,
                samples: a.samples,
                synergies: a.synergies,
                seed: a.seed,
                explore_noise: a.explore_noise,
            };
            let r = cmd_rank_check(&req)?;
            println!(
                "variant {} K {} L {} samples {} rank {} transformation_rank {}",
                r.variant, r.num_actuators, r.synergies, r.samples, r.rank, r.transformation_rank
            );
        }
    }
    Ok(())
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::ConfigInvalid { .. } => 2,
        HarnessError::IncompatibleCheckpoint(_) => 3,
        HarnessError::RankViolation { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
