//! Command-line front end for the benchmark suite.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tombench::harness::{
    emit_plot_data, evaluate, load_config, load_model, read_results, sweep, train_learner,
    transfer_eval, write_demos, write_results, ExperimentConfig, LearnerKind, ResolvedConfig,
    TrainedModel,
};
use tombench::human::{HumanModel, HumanVariant};
use tombench::irl::generate_demos;
use tombench::modelfree::PpoConfig;

#[derive(Parser)]
#[command(name = "tombench", about = "Benchmark of interaction learners around a simulated human driver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Learner key: tom, vanilla_mb, robust_mb, model_free.
    #[arg(long, global = true)]
    learner: Option<String>,
    /// Human simulator key, e.g. ground_truth, myopic, panicking.
    #[arg(long, global = true)]
    human: Option<String>,
    /// Use the full-scale repetition count (30 seeds).
    #[arg(long, global = true, default_value_t = false)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Record demonstrations of the human simulator and write them as CSV.
    DemoGen {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of demonstrations.
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Train one learner at one sample budget and save the model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample budget (windows for demonstration learners, frames for
        /// the model-free learner).
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Evaluate a saved model over the shared test environments.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Path to a saved model file.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a sample-complexity sweep and write the results CSV.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate saved ground-truth-trained models on every modification.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
        /// Saved model files, re-evaluated on each human variant.
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
    },
    /// Aggregate a results CSV into per-grid-point plot data.
    PlotData {
        #[command(flatten)]
        common: CommonArgs,
        /// Input results CSV.
        #[arg(long)]
        results: PathBuf,
    },
}

fn resolve(common: &CommonArgs) -> tombench::Result<ResolvedConfig> {
    let mut resolved = load_config(common.config.as_deref())?;
    if let Some(learner) = &common.learner {
        let kind = LearnerKind::from_key(learner)
            .ok_or_else(|| tombench::Error::Config(format!("unknown learner key: {learner}")))?;
        let human = resolved.experiment.human;
        let base = ExperimentConfig::for_learner(kind);
        resolved.experiment = ExperimentConfig {
            human,
            eval_envs: resolved.experiment.eval_envs,
            base_seed: resolved.experiment.base_seed,
            record_timing: resolved.experiment.record_timing,
            ..base
        };
    }
    if let Some(human) = &common.human {
        resolved.experiment.human = HumanVariant::from_key(human)
            .ok_or_else(|| tombench::Error::Config(format!("unknown human key: {human}")))?;
    }
    if let Some(seed) = common.seed {
        resolved.experiment.base_seed = seed;
    }
    if common.paper_scale {
        resolved.experiment = resolved.experiment.clone().paper_scale();
    }
    Ok(resolved)
}

fn out_path(common: &CommonArgs, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> tombench::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::DemoGen { common, n } => {
            let cfg = resolve(&common)?;
            let model = HumanModel::new(cfg.experiment.human);
            let demos = generate_demos(
                &model,
                &cfg.scenario.theta_star,
                &cfg.scenario.params,
                &cfg.scenario.world,
                n,
                cfg.experiment.base_seed,
            );
            let path = out_path(&common, "demos.csv");
            write_demos(&demos, &cfg.scenario.world, &path)?;
            println!("wrote {n} demonstrations to {}", path.display());
        }
        Command::Train { common, n } => {
            let cfg = resolve(&common)?;
            let path = out_path(&common, "model.json");
            let kind = cfg.experiment.learner;
            let model = match kind {
                LearnerKind::ModelFree => {
                    let env = tombench::modelfree::PpoEnv::interactive(
                        cfg.scenario.world,
                        cfg.scenario.robot_objective(),
                        HumanModel::new(cfg.experiment.human),
                        cfg.scenario.theta_star,
                        cfg.scenario.params,
                    );
                    let ppo = PpoConfig {
                        total_frames: n.max(cfg.ppo.batch_frames),
                        seed: cfg.experiment.base_seed,
                        ..cfg.ppo
                    };
                    let (policy, curve) = tombench::modelfree::train_modelfree(&env, &ppo)?;
                    for p in &curve {
                        println!("frames {:>8}  mean reward {:.3}", p.frames, p.mean_reward);
                    }
                    TrainedModel::Policy(policy)
                }
                _ => train_learner(
                    kind,
                    HumanModel::new(cfg.experiment.human),
                    &cfg.scenario,
                    n,
                    cfg.experiment.base_seed,
                    &cfg.robust,
                )?,
            };
            model.save(&path)?;
            println!("trained {} on {n} samples -> {}", kind.key(), path.display());
        }
        Command::Eval { common, model } => {
            let cfg = resolve(&common)?;
            let trained = load_model(&model)?;
            let outcome = evaluate(
                &trained,
                HumanModel::new(cfg.experiment.human),
                &cfg.scenario,
                cfg.experiment.eval_envs,
                cfg.experiment.base_seed,
            );
            println!(
                "human {}  envs {}  mean {:.3}  std {:.3}  converged {:.2}",
                cfg.experiment.human.key(),
                cfg.experiment.eval_envs,
                outcome.mean,
                outcome.std,
                outcome.converged_fraction
            );
        }
        Command::Sweep { common } => {
            let cfg = resolve(&common)?;
            let records = sweep(&cfg.experiment, &cfg.scenario, &cfg.robust, &cfg.ppo);
            let path = out_path(&common, "results.csv");
            write_results(&records, &path)?;
            println!(
                "swept {} on {} over {} cells -> {}",
                cfg.experiment.learner.key(),
                cfg.experiment.human.key(),
                records.len(),
                path.display()
            );
        }
        Command::Transfer { common, model } => {
            let cfg = resolve(&common)?;
            let mut models = Vec::new();
            for path in &model {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".to_string());
                models.push((name, load_model(path)?));
            }
            let mods: Vec<HumanVariant> = HumanVariant::ALL
                .into_iter()
                .filter(|v| *v != HumanVariant::GroundTruth)
                .collect();
            let records = transfer_eval(
                &models,
                &mods,
                &cfg.scenario,
                cfg.experiment.eval_envs,
                cfg.experiment.base_seed,
            );
            let path = out_path(&common, "transfer.csv");
            write_results(&records, &path)?;
            println!("transfer matrix ({} rows) -> {}", records.len(), path.display());
        }
        Command::PlotData { common, results } => {
            let records = read_results(&results)?;
            let path = out_path(&common, "plot_data.csv");
            emit_plot_data(&records, &path)?;
            println!("aggregated {} records -> {}", records.len(), path.display());
        }
    }
    Ok(())
}
