//! Command-line front end for the navigation experiments.
//!
//! Subcommands mirror the pipeline stages: `train` fits the value models,
//! `improve` picks thresholds on fresh tasks, `evaluate` runs the coupled
//! policy comparison, `exact` solves one task by enumeration, `compare`
//! runs the whole pipeline, and `report` verifies emitted statistics
//! against the trajectory log. Exit code 2 flags validation or input
//! problems, 3 numerical failures.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskgrid_core::harness::{
    evaluate_policies, exact_baseline, improve, parse_stats_csv, parse_trajectories_csv,
    read_json, run_experiment, sample_fresh_instance, sample_train_instances,
    stats_from_trajectories, train, write_json, write_stats_csv, write_theta_history,
    ConfigReport, ExperimentConfig, GammaChoice, HarnessError, StatsRow, TrainArtifact,
    TRAJECTORY_HEADER,
};
use riskgrid_core::nav::{instances_to_json_string, NavInstance};
use riskgrid_core::risk::RiskMappingSpec;
use riskgrid_core::rng::derive_seed;

#[derive(Parser)]
#[command(
    name = "riskgrid",
    version,
    about = "Risk-averse evaluation and control on grid navigation tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the risk-neutral and risk-averse value models on a pool of
    /// sampled tasks.
    Train {
        /// Experiment configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for train_instances.json, theta.json,
        /// theta_history.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the outer refitting iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Override the episodes per refitting iteration.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Pick thresholds on fresh tasks using trained models from `--out`.
    Improve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory holding theta.json; receives fresh_<k>.json and gammas.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the number of fresh tasks.
        #[arg(long)]
        configs: Option<usize>,
    },
    /// Run the coupled policy comparison on the fresh tasks in `--out`.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory holding gammas.json and fresh_<k>.json; receives
        /// stats.csv and trajectories.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the evaluation episode count per task.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Solve one task exactly by state enumeration.
    Exact {
        /// Task instance JSON.
        #[arg(long)]
        config: PathBuf,
        /// Risk mapping JSON; the batch-of-2 worst case when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Optional directory for exact.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline: train, improve, evaluate, exact references.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of fresh tasks.
        #[arg(long)]
        configs: Option<usize>,
        /// Override the evaluation episode count per task.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override the outer refitting iteration count.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Verify stats.csv against trajectories.csv and print a summary.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = configure_threads().and_then(|()| dispatch(cli.command));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Numerical { .. } => 3,
        HarnessError::Validation { .. } | HarnessError::Io(_) => 2,
    }
}

/// Honors RISKGRID_THREADS by sizing the global worker pool before any
/// parallel work runs.
fn configure_threads() -> Result<(), HarnessError> {
    let Ok(raw) = std::env::var("RISKGRID_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.parse().map_err(|_| HarnessError::Validation {
        reason: format!("RISKGRID_THREADS must be a positive integer, got {raw:?}"),
    })?;
    if threads == 0 {
        return Err(HarnessError::Validation {
            reason: "RISKGRID_THREADS must be a positive integer, got \"0\"".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| HarnessError::Validation {
            reason: format!("cannot size the worker pool: {e}"),
        })
}

fn load_config(
    path: Option<&Path>,
    iters: Option<usize>,
    episodes: Option<usize>,
    configs: Option<usize>,
    eval_episodes: Option<usize>,
) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json_str(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = iters {
        cfg.iterations = n;
    }
    if let Some(n) = episodes {
        cfg.episodes_per_iteration = n;
    }
    if let Some(n) = configs {
        cfg.fresh_configs = n;
    }
    if let Some(n) = eval_episodes {
        cfg.eval_episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_instance(path: &Path) -> Result<NavInstance, HarnessError> {
    Ok(NavInstance::from_json_str(&fs::read_to_string(path)?)?)
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train { config, seed, out, iters, episodes } => {
            let cfg = load_config(config.as_deref(), iters, episodes, None, None)?;
            fs::create_dir_all(&out)?;
            let instances = sample_train_instances(&cfg, seed)?;
            fs::write(
                out.join("train_instances.json"),
                instances_to_json_string(&instances),
            )?;
            let trained = train(&instances, &cfg, derive_seed(seed, &[1]))?;
            write_json(&out.join("theta.json"), &trained.artifact)?;
            write_theta_history(
                &out.join("theta_history.csv"),
                &trained.history_neutral,
                &trained.history_averse,
            )?;
            let last = trained.history_averse.last().expect("training iterates");
            println!(
                "trained {} iterations on {} pooled tasks (ridge neutral {:.3e}, averse {:.3e}); final averse objective {:.6}",
                trained.history_averse.len(),
                instances.len(),
                trained.artifact.lambda_neutral,
                trained.artifact.lambda_averse,
                last.objective
            );
            Ok(())
        }
        Command::Improve { config, seed, out, configs } => {
            let cfg = load_config(config.as_deref(), None, None, configs, None)?;
            let artifact: TrainArtifact = read_json(&out.join("theta.json"))?;
            let mut gammas = Vec::with_capacity(cfg.fresh_configs);
            for k in 0..cfg.fresh_configs {
                let fresh = sample_fresh_instance(&cfg, seed, k)?;
                fs::write(out.join(format!("fresh_{k}.json")), fresh.to_json_string())?;
                let choice = improve(&fresh, &cfg, &artifact, derive_seed(seed, &[3, k as u64]))?;
                println!(
                    "task {k}: gamma_averse={} gamma_neutral={}",
                    choice.gamma_averse, choice.gamma_neutral
                );
                gammas.push(choice);
            }
            write_json(&out.join("gammas.json"), &gammas)?;
            Ok(())
        }
        Command::Evaluate { config, seed, out, episodes } => {
            let cfg = load_config(config.as_deref(), None, None, None, episodes)?;
            let gammas: Vec<GammaChoice> = read_json(&out.join("gammas.json"))?;
            let traj_file = fs::File::create(out.join("trajectories.csv"))?;
            let mut traj = BufWriter::new(traj_file);
            writeln!(traj, "{TRAJECTORY_HEADER}")?;
            let mut reports = Vec::with_capacity(gammas.len());
            for (k, choice) in gammas.iter().enumerate() {
                let instance = load_instance(&out.join(format!("fresh_{k}.json")))?;
                let stats = evaluate_policies(
                    &instance,
                    &cfg,
                    choice,
                    k,
                    derive_seed(seed, &[4, k as u64]),
                    Some(&mut traj),
                )?;
                for row in &stats {
                    println!(
                        "task {k} {:<8} mean={:+.4} semidev={:.4} composite={:+.4}",
                        row.policy,
                        row.stats.mean_cost,
                        row.stats.upper_semideviation,
                        row.stats.composite()
                    );
                }
                reports.push(ConfigReport {
                    config_id: k,
                    gammas: choice.clone(),
                    stats,
                    exact: None,
                });
            }
            traj.flush()?;
            write_stats_csv(&out.join("stats.csv"), &reports)?;
            Ok(())
        }
        Command::Exact { config, spec, out } => {
            let instance = load_instance(&config)?;
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    serde_json::from_str::<RiskMappingSpec>(&text).map_err(|e| {
                        HarnessError::Validation {
                            reason: format!("cannot parse {}: {e}", p.display()),
                        }
                    })?
                }
                None => RiskMappingSpec::worst_case_batch(2).expect("batch of 2 is valid"),
            };
            let defaults = ExperimentConfig::default();
            let summary = exact_baseline(
                &instance,
                &spec,
                defaults.gamma_init,
                defaults.gamma_init,
                defaults.exact_state_cap,
            )?
            .ok_or_else(|| HarnessError::Validation {
                reason: format!(
                    "reachable state space exceeds the {}-state cap",
                    defaults.exact_state_cap
                ),
            })?;
            println!("{}", summary.solve_report.trim_end());
            println!(
                "states={} optimal={} threshold@{}={}",
                summary.states, summary.optimal_value, defaults.gamma_init, summary.learned_value
            );
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_json(&dir.join("exact.json"), &summary)?;
            }
            Ok(())
        }
        Command::Compare { config, seed, out, configs, episodes, iters } => {
            let cfg = load_config(config.as_deref(), iters, None, configs, episodes)?;
            let summary = run_experiment(&cfg, seed, &out)?;
            println!(
                "averse composite improves on the initial policy on {} of {} tasks; reports in {}",
                summary.averse_wins,
                summary.configs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report { out } => {
            let stats_text = fs::read_to_string(out.join("stats.csv"))?;
            let traj_text = fs::read_to_string(out.join("trajectories.csv"))?;
            let published = parse_stats_csv(&stats_text)?;
            let recomputed = stats_from_trajectories(&parse_trajectories_csv(&traj_text)?);
            if published != recomputed {
                return Err(HarnessError::Validation {
                    reason: "stats.csv does not match the trajectory log".into(),
                });
            }
            println!(
                "statistics verified against the trajectory log ({} policy rows)",
                published.len()
            );
            print_summary(&published);
            Ok(())
        }
    }
}

fn print_summary(rows: &[StatsRow]) {
    let mut wins = 0usize;
    let mut tasks = 0usize;
    let mut config_ids: Vec<usize> = rows.iter().map(|r| r.config_id).collect();
    config_ids.dedup();
    for &cid in &config_ids {
        let composite = |policy: &str| -> Option<f64> {
            rows.iter()
                .find(|r| r.config_id == cid && r.policy == policy)
                .map(|r| r.mean_cost + r.upper_semideviation)
        };
        for row in rows.iter().filter(|r| r.config_id == cid) {
            println!(
                "task {cid} {:<8} mean={:+.4} semidev={:.4} composite={:+.4}",
                row.policy,
                row.mean_cost,
                row.upper_semideviation,
                row.mean_cost + row.upper_semideviation
            );
        }
        if let (Some(a), Some(i)) = (composite("averse"), composite("initial")) {
            tasks += 1;
            // Non-strict: matching the initial policy is an acceptable
            // outcome of the threshold search.
            if a <= i {
                wins += 1;
            }
        }
    }
    println!("averse composite improves on the initial policy on {wins} of {tasks} tasks");
}
