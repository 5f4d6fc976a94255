//! Experiment orchestration: training each learner at each sample budget,
//! paired evaluation over shared test environments, sample-complexity
//! sweeps, transfer experiments, and CSV persistence.
//!
//! Determinism contract: every cell of a sweep derives its randomness from
//! (base_seed, sample size, repetition index), evaluation episodes use the
//! shared seeds base_seed..base_seed+n_envs-1 for every learner, cells run
//! in parallel but results are assembled in grid order, and the results CSV
//! is byte-identical across reruns of the same configuration. Wall-clock
//! timing is recorded only when `record_timing` is set, since measured
//! times would break byte-identical output.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{
    robust_train, vanilla_pipeline, BlackboxPlanner, Predictor, RobustConfig, TrainConfig,
};
use crate::human::{HumanModel, HumanPlanner, HumanVariant};
use crate::irl::{fit_theta, generate_demos, DemoDataset, IrlConfig};
use crate::modelfree::{collect_rollouts, ppo_update, PolicyParams, PolicyPlanner, PpoConfig, PpoEnv};
use crate::nn::Mlp;
use crate::rewards::{robot_weights, FeatureParams, JointObjective, RewardWeights};
use crate::trajopt::{run_episode, OptimizerConfig, RobotPlanner, ScriptedPlanner, TomPlanner};
use crate::world::{sample_initial_state, Control, WorldConfig};
use crate::{Error, Result};

/// World, feature, and ground-truth reward settings shared by every
/// experiment.
#[derive(Debug, Clone, Copy)]
pub struct Scenario {
    pub world: WorldConfig,
    pub params: FeatureParams,
    pub theta_star: RewardWeights,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            params: FeatureParams::default(),
            theta_star: RewardWeights::ground_truth(),
        }
    }
}

impl Scenario {
    /// The robot's ground-truth reward objective (used for planning with
    /// known dynamics and for measuring test reward).
    pub fn robot_objective(&self) -> JointObjective {
        JointObjective::with_caps(
            robot_weights(&self.theta_star),
            self.params,
            self.world.road,
            self.world.dt,
            self.world.v_max,
            self.world.human_v_max,
        )
    }

    /// The human objective the theory-of-mind learner assumes, with the
    /// given (learned) weights.
    pub fn assumed_human_objective(&self, theta: RewardWeights) -> JointObjective {
        JointObjective::with_caps(
            theta,
            self.params,
            self.world.road,
            self.world.dt,
            self.world.human_v_max,
            self.world.v_max,
        )
    }

    pub fn human_planner(&self, model: HumanModel) -> HumanPlanner {
        HumanPlanner::new(
            model,
            self.theta_star,
            self.params,
            self.world,
            OptimizerConfig::inner(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerKind {
    Tom,
    VanillaMb,
    RobustMb,
    ModelFree,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 4] =
        [LearnerKind::Tom, LearnerKind::VanillaMb, LearnerKind::RobustMb, LearnerKind::ModelFree];

    pub fn key(&self) -> &'static str {
        match self {
            LearnerKind::Tom => "tom",
            LearnerKind::VanillaMb => "vanilla_mb",
            LearnerKind::RobustMb => "robust_mb",
            LearnerKind::ModelFree => "model_free",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.key() == key)
    }

    /// Default sample-size grid. Demonstration learners count length-T
    /// windows; the model-free learner counts frames.
    pub fn default_grid(&self) -> Vec<usize> {
        match self {
            LearnerKind::Tom => vec![0, 5, 10, 25, 50, 100, 250],
            LearnerKind::VanillaMb | LearnerKind::RobustMb => {
                vec![0, 100, 250, 500, 1000, 2500, 5000]
            }
            LearnerKind::ModelFree => {
                vec![0, 25_000, 50_000, 100_000, 200_000, 350_000, 500_000]
            }
        }
    }
}

/// A trained model of any paradigm, ready to be frozen and evaluated.
#[derive(Clone)]
pub enum TrainedModel {
    Tom(RewardWeights),
    Predictor(Predictor),
    Policy(PolicyParams),
}

impl TrainedModel {
    pub fn planner(&self, scenario: &Scenario) -> Box<dyn RobotPlanner> {
        let robot_obj = scenario.robot_objective();
        match self {
            // The nested objective converges more slowly than the smooth
            // predictor-backed one; give it a larger iteration budget.
            TrainedModel::Tom(theta_hat) => Box::new(TomPlanner::new(
                robot_obj,
                scenario.assumed_human_objective(*theta_hat),
                scenario.world.horizon,
                OptimizerConfig { max_iters: 60, ..OptimizerConfig::outer() },
                OptimizerConfig::inner(),
            )),
            TrainedModel::Predictor(p) => Box::new(BlackboxPlanner::new(
                p.clone(),
                robot_obj,
                scenario.world.horizon,
                OptimizerConfig::outer(),
            )),
            TrainedModel::Policy(p) => {
                Box::new(PolicyPlanner { policy: p.clone(), world: scenario.world })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::Tom(theta) => {
                let file = std::fs::File::create(path)?;
                serde_json::to_writer(
                    std::io::BufWriter::new(file),
                    &serde_json::json!({"version": 1, "kind": "tom", "theta": theta.0}),
                )
                .map_err(|e| Error::Config(format!("model serialization: {e}")))
            }
            TrainedModel::Predictor(p) => p.save(path),
            TrainedModel::Policy(p) => {
                let file = std::fs::File::create(path)?;
                serde_json::to_writer(
                    std::io::BufWriter::new(file),
                    &serde_json::json!({
                        "version": 1,
                        "kind": "policy",
                        "mean_net": p.mean_net,
                        "log_std": p.log_std,
                        "value_net": p.value_net,
                    }),
                )
                .map_err(|e| Error::Config(format!("model serialization: {e}")))
            }
        }
    }
}

/// Outcome of evaluating one frozen model over the shared test environments.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mean: f64,
    pub std: f64,
    pub rewards: Vec<f64>,
    /// Fraction of episodes with no planner failure at any step.
    pub converged_fraction: f64,
}

/// Run the frozen planner against the human simulator on `n_envs` seeded
/// initial states (seeds base_seed..base_seed+n_envs-1, shared across all
/// learners for paired comparison).
pub fn evaluate(
    model: &TrainedModel,
    human: HumanModel,
    scenario: &Scenario,
    n_envs: usize,
    base_seed: u64,
) -> EvalOutcome {
    let reward_obj = scenario.robot_objective();
    let rewards_and_flags: Vec<(f64, bool)> = (0..n_envs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            let init = sample_initial_state(&mut rng, &scenario.world);
            let mut planner = model.planner(scenario);
            let mut human_planner = scenario.human_planner(human);
            let rec = run_episode(
                planner.as_mut(),
                &mut human_planner,
                &reward_obj,
                &scenario.world,
                init,
            );
            (rec.total_reward, rec.planner_failures == 0)
        })
        .collect();
    let rewards: Vec<f64> = rewards_and_flags.iter().map(|(r, _)| *r).collect();
    let mean = rewards.iter().sum::<f64>() / n_envs as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n_envs as f64;
    let converged =
        rewards_and_flags.iter().filter(|(_, ok)| *ok).count() as f64 / n_envs as f64;
    EvalOutcome { mean, std: var.sqrt(), rewards, converged_fraction: converged }
}

/// Deterministic per-cell seed from the experiment base seed, the sample
/// size, and the repetition index.
fn cell_seed(base: u64, n_samples: usize, rep: u64) -> u64 {
    base.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((n_samples as u64).wrapping_mul(0x2545f4914f6cdd1d))
        .wrapping_add(rep)
}

/// Train one learner at one budget. For demonstration learners `n_samples`
/// counts length-T windows; zero samples yield the untrained model the
/// planner falls back to (a random reward direction, or a freshly
/// initialized predictor).
pub fn train_learner(
    kind: LearnerKind,
    human: HumanModel,
    scenario: &Scenario,
    n_samples: usize,
    seed: u64,
    robust_cfg: &RobustConfig,
) -> Result<TrainedModel> {
    match kind {
        LearnerKind::Tom => {
            if n_samples == 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta = RewardWeights([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
                return Ok(TrainedModel::Tom(theta));
            }
            let demos = generate_demos(
                &human,
                &scenario.theta_star,
                &scenario.params,
                &scenario.world,
                n_samples,
                seed,
            );
            let theta_hat =
                fit_theta(&demos, &scenario.params, &scenario.world, &IrlConfig::default())?;
            Ok(TrainedModel::Tom(theta_hat))
        }
        LearnerKind::VanillaMb => {
            if n_samples == 0 {
                return Ok(TrainedModel::Predictor(Predictor::untrained(
                    scenario.world.horizon,
                    seed,
                )));
            }
            // The same demonstrations the reward learner sees at this cell.
            let demos = generate_demos(
                &human,
                &scenario.theta_star,
                &scenario.params,
                &scenario.world,
                n_samples,
                seed,
            );
            let cfg = TrainConfig::scaled_for(n_samples, robust_cfg.final_steps, seed);
            let (predictor, _) = vanilla_pipeline(&demos, scenario.world.horizon, &cfg)?;
            Ok(TrainedModel::Predictor(predictor))
        }
        LearnerKind::RobustMb => {
            if n_samples == 0 {
                return Ok(TrainedModel::Predictor(Predictor::untrained(
                    scenario.world.horizon,
                    seed,
                )));
            }
            let out = robust_train(
                &human,
                &scenario.theta_star,
                &scenario.params,
                &scenario.world,
                n_samples,
                robust_cfg,
                seed,
            )?;
            Ok(TrainedModel::Predictor(out.predictor))
        }
        LearnerKind::ModelFree => Err(Error::Config(
            "the model-free learner trains on frames; use sweep or train_modelfree".into(),
        )),
    }
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub learner: String,
    pub human_model: String,
    pub n_samples: usize,
    pub seed: u64,
    pub mean_test_reward: f64,
    pub std_test_reward: f64,
    pub converged_fraction: f64,
    pub wall_time_s: f64,
}

pub const RESULTS_HEADER: &str =
    "learner,human_model,n_samples,seed,mean_test_reward,std_test_reward,converged_fraction,wall_time_s";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub learner: LearnerKind,
    pub human: HumanVariant,
    pub grid: Vec<usize>,
    /// Repetitions per grid point (the model-free learner always runs one).
    pub seeds: u64,
    pub eval_envs: usize,
    pub base_seed: u64,
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            learner: LearnerKind::Tom,
            human: HumanVariant::GroundTruth,
            grid: LearnerKind::Tom.default_grid(),
            seeds: 10,
            eval_envs: 25,
            base_seed: 1000,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn for_learner(kind: LearnerKind) -> Self {
        Self {
            learner: kind,
            grid: kind.default_grid(),
            seeds: if kind == LearnerKind::ModelFree { 1 } else { 10 },
            ..Self::default()
        }
    }

    /// Full-scale repetition count (30 per grid point).
    pub fn paper_scale(mut self) -> Self {
        if self.learner != LearnerKind::ModelFree {
            self.seeds = 30;
        }
        self
    }
}

/// Sweep one learner over its sample grid with repetitions, evaluating each
/// trained model on the shared test environments. Cells run in parallel;
/// records come back sorted by grid point then repetition. Failed training
/// runs are recorded with a NaN-free reward from the untrained fallback and
/// `converged_fraction` reflecting evaluation health.
pub fn sweep(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    robust_cfg: &RobustConfig,
    ppo_cfg: &PpoConfig,
) -> Vec<ResultRecord> {
    let human = HumanModel::new(cfg.human);
    if cfg.learner == LearnerKind::ModelFree {
        return sweep_model_free(cfg, scenario, ppo_cfg);
    }
    let cells: Vec<(usize, u64)> = cfg
        .grid
        .iter()
        .flat_map(|&n| (0..cfg.seeds).map(move |rep| (n, rep)))
        .collect();
    cells
        .par_iter()
        .map(|&(n_samples, rep)| {
            let t0 = std::time::Instant::now();
            let seed = cell_seed(cfg.base_seed, n_samples, rep);
            let model = train_learner(cfg.learner, human, scenario, n_samples, seed, robust_cfg)
                .unwrap_or_else(|_| match cfg.learner {
                    LearnerKind::Tom => TrainedModel::Tom(RewardWeights([-1.0; 5])),
                    _ => TrainedModel::Predictor(Predictor::untrained(scenario.world.horizon, seed)),
                });
            let eval = evaluate(&model, human, scenario, cfg.eval_envs, cfg.base_seed);
            ResultRecord {
                learner: cfg.learner.key().to_string(),
                human_model: cfg.human.key().to_string(),
                n_samples,
                seed: rep,
                mean_test_reward: eval.mean,
                std_test_reward: eval.std,
                converged_fraction: eval.converged_fraction,
                wall_time_s: if cfg.record_timing { t0.elapsed().as_secs_f64() } else { 0.0 },
            }
        })
        .collect()
}

/// The model-free sweep runs one training per repetition and snapshots the
/// policy at each frame checkpoint of the grid.
fn sweep_model_free(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    ppo_cfg: &PpoConfig,
) -> Vec<ResultRecord> {
    let human = HumanModel::new(cfg.human);
    let env = PpoEnv::interactive(
        scenario.world,
        scenario.robot_objective(),
        human,
        scenario.theta_star,
        scenario.params,
    );
    let mut grid = cfg.grid.clone();
    grid.sort_unstable();
    let mut records = Vec::new();
    for rep in 0..cfg.seeds.max(1) {
        let t0 = std::time::Instant::now();
        let run_seed = cell_seed(cfg.base_seed, 0, rep);
        let run_cfg = PpoConfig { seed: run_seed, ..*ppo_cfg };
        let mut policy = PolicyParams::new(run_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed.wrapping_add(1));
        let mut frames = 0usize;
        let mut update_idx = 0;
        for &checkpoint in &grid {
            while frames < checkpoint {
                let batch = collect_rollouts(&policy, &env, run_cfg.batch_frames, &mut rng);
                frames += batch.len();
                ppo_update(&mut policy, &batch, &run_cfg, update_idx);
                update_idx += 1;
            }
            let model = TrainedModel::Policy(policy.clone());
            let eval = evaluate(&model, human, scenario, cfg.eval_envs, cfg.base_seed);
            records.push(ResultRecord {
                learner: cfg.learner.key().to_string(),
                human_model: cfg.human.key().to_string(),
                n_samples: checkpoint,
                seed: rep,
                mean_test_reward: eval.mean,
                std_test_reward: eval.std,
                converged_fraction: eval.converged_fraction,
                wall_time_s: if cfg.record_timing { t0.elapsed().as_secs_f64() } else { 0.0 },
            });
        }
    }
    records.sort_by(|a, b| (a.n_samples, a.seed).cmp(&(b.n_samples, b.seed)));
    records
}

/// Evaluate frozen models (trained on the ground-truth human) against every
/// modification plus the ground truth itself, on the same seeded test
/// environments.
pub fn transfer_eval(
    models: &[(String, TrainedModel)],
    modifications: &[HumanVariant],
    scenario: &Scenario,
    eval_envs: usize,
    base_seed: u64,
) -> Vec<ResultRecord> {
    let mut variants = vec![HumanVariant::GroundTruth];
    variants.extend_from_slice(modifications);
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..variants.len()).map(move |v| (m, v)))
        .collect();
    jobs.par_iter()
        .map(|&(m, v)| {
            let (name, model) = &models[m];
            let human = HumanModel::new(variants[v]);
            let eval = evaluate(model, human, scenario, eval_envs, base_seed);
            ResultRecord {
                learner: name.clone(),
                human_model: variants[v].key().to_string(),
                n_samples: 0,
                seed: m as u64,
                mean_test_reward: eval.mean,
                std_test_reward: eval.std,
                converged_fraction: eval.converged_fraction,
                wall_time_s: 0.0,
            }
        })
        .collect()
}

/// A stay-in-lane constant-cruise reference planner.
pub fn stay_in_lane_baseline(scenario: &Scenario) -> ScriptedPlanner {
    ScriptedPlanner { control: Control::zero(), horizon: scenario.world.horizon }
}

pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{RESULTS_HEADER}")?;
    for r in records {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{}",
            r.learner,
            r.human_model,
            r.n_samples,
            r.seed,
            r.mean_test_reward,
            r.std_test_reward,
            r.converged_fraction,
            r.wall_time_s
        )?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Config("empty results file".into()))?;
    if header != RESULTS_HEADER {
        return Err(Error::Config(format!("unexpected results header: {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Config(format!("malformed results row: {line}")));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad float {s}: {e}")))
        };
        out.push(ResultRecord {
            learner: parts[0].to_string(),
            human_model: parts[1].to_string(),
            n_samples: parts[2]
                .parse()
                .map_err(|e| Error::Config(format!("bad n_samples: {e}")))?,
            seed: parts[3].parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            mean_test_reward: parse_f(parts[4])?,
            std_test_reward: parse_f(parts[5])?,
            converged_fraction: parse_f(parts[6])?,
            wall_time_s: parse_f(parts[7])?,
        });
    }
    Ok(out)
}

pub const PLOT_HEADER: &str = "learner,human_model,n_samples,mean_test_reward,std_test_reward,n_seeds";

/// Aggregate repetitions into one row per (learner, human_model, n_samples)
/// with the mean and standard deviation of the per-seed mean rewards.
pub fn emit_plot_data(records: &[ResultRecord], path: &Path) -> Result<()> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.learner.clone(), r.human_model.clone(), r.n_samples))
            .or_default()
            .push(r.mean_test_reward);
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{PLOT_HEADER}")?;
    for ((learner, human, n), vals) in groups {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        writeln!(file, "{learner},{human},{n},{m},{},{}", var.sqrt(), vals.len())?;
    }
    Ok(())
}

/// Serialize a demonstration dataset as CSV, one row per demo step with the
/// states both cars were in and the actions they executed.
pub const DEMO_HEADER: &str =
    "demo,step,h_x,h_y,h_v,h_heading,r_x,r_y,r_v,r_heading,r_accel,r_yaw_rate,h_accel,h_yaw_rate";

pub fn write_demos(dataset: &DemoDataset, world: &WorldConfig, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{DEMO_HEADER}")?;
    for (i, demo) in dataset.demos.iter().enumerate() {
        let (human_states, robot_states) = demo.trajectories(world);
        for t in 0..demo.human_controls.len() {
            let h = human_states[t];
            let r = robot_states[t];
            let ur = demo.robot_controls.0[t];
            let uh = demo.human_controls.0[t];
            writeln!(
                file,
                "{i},{t},{},{},{},{},{},{},{},{},{},{},{},{}",
                h.x, h.y, h.v, h.heading, r.x, r.y, r.v, r.heading, ur.accel, ur.yaw_rate,
                uh.accel, uh.yaw_rate
            )?;
        }
    }
    Ok(())
}

pub fn read_demos(path: &Path) -> Result<DemoDataset> {
    use crate::irl::Demonstration;
    use crate::world::{AgentState, ControlPlan};
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Config("empty demo file".into()))?;
    if header != DEMO_HEADER {
        return Err(Error::Config(format!("unexpected demo header: {header}")));
    }
    let mut demos: Vec<Demonstration> = Vec::new();
    let mut current: Option<(usize, Demonstration)> = None;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 14 {
            return Err(Error::Config(format!("malformed demo row: {line}")));
        }
        let f = |i: usize| -> Result<f64> {
            p[i].parse().map_err(|e| Error::Config(format!("bad float {}: {e}", p[i])))
        };
        let demo_idx: usize =
            p[0].parse().map_err(|e| Error::Config(format!("bad demo index: {e}")))?;
        let step: usize = p[1].parse().map_err(|e| Error::Config(format!("bad step: {e}")))?;
        if step == 0 {
            if let Some((_, d)) = current.take() {
                demos.push(d);
            }
            current = Some((
                demo_idx,
                Demonstration {
                    x_human: AgentState::new(f(2)?, f(3)?, f(4)?, f(5)?),
                    x_robot: AgentState::new(f(6)?, f(7)?, f(8)?, f(9)?),
                    robot_controls: ControlPlan(vec![]),
                    human_controls: ControlPlan(vec![]),
                },
            ));
        }
        let (_, demo) = current
            .as_mut()
            .ok_or_else(|| Error::Config("demo rows out of order".into()))?;
        demo.robot_controls.0.push(Control::new(f(10)?, f(11)?));
        demo.human_controls.0.push(Control::new(f(12)?, f(13)?));
    }
    if let Some((_, d)) = current.take() {
        demos.push(d);
    }
    Ok(DemoDataset { demos, human_key: String::new(), seed: 0 })
}

/// On-disk experiment configuration, mirroring the in-memory structures.
/// Every section is optional and falls back to the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub world: Option<WorldConfig>,
    pub features: Option<FeatureParams>,
    pub theta_star: Option<ThetaConfig>,
    pub experiment: Option<ExperimentSection>,
    pub robust: Option<RobustSection>,
    pub ppo: Option<PpoSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaConfig {
    pub car_proximity: f64,
    pub lane_edge: f64,
    pub forward_progress: f64,
    pub bounded_control: f64,
    pub offroad: f64,
}

impl ThetaConfig {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights([
            self.car_proximity,
            self.lane_edge,
            self.forward_progress,
            self.bounded_control,
            self.offroad,
        ])
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub learner: Option<String>,
    pub human: Option<String>,
    pub grid: Option<Vec<usize>>,
    pub seeds: Option<u64>,
    pub eval_envs: Option<usize>,
    pub base_seed: Option<u64>,
    pub record_timing: Option<bool>,
    pub paper_scale: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustSection {
    pub rounds: Option<usize>,
    pub refit_steps: Option<usize>,
    pub final_steps: Option<usize>,
    pub minibatch: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoSection {
    pub clip: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub batch_frames: Option<usize>,
    pub epochs: Option<usize>,
    pub minibatch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub total_frames: Option<usize>,
    pub eval_every: Option<usize>,
    pub seed: Option<u64>,
}

/// Everything a run needs, resolved from a config file plus overrides.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub scenario: Scenario,
    pub experiment: ExperimentConfig,
    pub robust: RobustConfig,
    pub ppo: PpoConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    let file: ConfigFile = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
        }
        None => ConfigFile::default(),
    };
    resolve_config(file)
}

pub fn resolve_config(file: ConfigFile) -> Result<ResolvedConfig> {
    let mut scenario = Scenario::default();
    if let Some(w) = file.world {
        scenario.world = w;
    }
    if let Some(f) = file.features {
        scenario.params = f;
    }
    if let Some(t) = &file.theta_star {
        scenario.theta_star = t.weights();
    }

    let section = file.experiment.unwrap_or_default();
    let learner = match &section.learner {
        Some(key) => LearnerKind::from_key(key)
            .ok_or_else(|| Error::Config(format!("unknown learner key: {key}")))?,
        None => LearnerKind::Tom,
    };
    let human = match &section.human {
        Some(key) => HumanVariant::from_key(key)
            .ok_or_else(|| Error::Config(format!("unknown human key: {key}")))?,
        None => HumanVariant::GroundTruth,
    };
    let mut experiment = ExperimentConfig::for_learner(learner);
    experiment.human = human;
    if let Some(g) = section.grid {
        if g.is_empty() {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        experiment.grid = g;
    }
    if let Some(s) = section.seeds {
        if s == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        experiment.seeds = s;
    }
    if let Some(e) = section.eval_envs {
        experiment.eval_envs = e;
    }
    if let Some(b) = section.base_seed {
        experiment.base_seed = b;
    }
    if let Some(r) = section.record_timing {
        experiment.record_timing = r;
    }
    if section.paper_scale.unwrap_or(false) {
        experiment = experiment.paper_scale();
    }

    let mut robust = RobustConfig::default();
    if let Some(r) = file.robust {
        if let Some(v) = r.rounds {
            robust.rounds = v;
        }
        if let Some(v) = r.refit_steps {
            robust.refit_steps = v;
        }
        if let Some(v) = r.final_steps {
            robust.final_steps = v;
        }
        if let Some(v) = r.minibatch {
            robust.minibatch = v;
        }
        if let Some(v) = r.learning_rate {
            robust.learning_rate = v;
        }
    }

    let mut ppo = PpoConfig::default();
    if let Some(p) = file.ppo {
        if let Some(v) = p.clip {
            ppo.clip = v;
        }
        if let Some(v) = p.gamma {
            ppo.gamma = v;
        }
        if let Some(v) = p.lambda {
            ppo.lambda = v;
        }
        if let Some(v) = p.batch_frames {
            ppo.batch_frames = v;
        }
        if let Some(v) = p.epochs {
            ppo.epochs = v;
        }
        if let Some(v) = p.minibatch {
            ppo.minibatch = v;
        }
        if let Some(v) = p.learning_rate {
            ppo.learning_rate = v;
        }
        if let Some(v) = p.total_frames {
            ppo.total_frames = v;
        }
        if let Some(v) = p.eval_every {
            ppo.eval_every = v;
        }
        if let Some(v) = p.seed {
            ppo.seed = v;
        }
    }
    ppo.validate()?;

    Ok(ResolvedConfig { scenario, experiment, robust, ppo })
}

/// Reload a serialized model. The JSON kind tag distinguishes reward
/// weights, predictors, and policies.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("model parse: {e}")))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some("tom") => {
            let theta: [f64; 5] = serde_json::from_value(value["theta"].clone())
                .map_err(|e| Error::Config(format!("bad theta: {e}")))?;
            Ok(TrainedModel::Tom(RewardWeights(theta)))
        }
        Some("policy") => {
            let mean_net: Mlp = serde_json::from_value(value["mean_net"].clone())
                .map_err(|e| Error::Config(format!("bad policy: {e}")))?;
            let value_net: Mlp = serde_json::from_value(value["value_net"].clone())
                .map_err(|e| Error::Config(format!("bad policy: {e}")))?;
            let log_std: [f64; 2] = serde_json::from_value(value["log_std"].clone())
                .map_err(|e| Error::Config(format!("bad policy: {e}")))?;
            Ok(TrainedModel::Policy(PolicyParams { mean_net, log_std, value_net }))
        }
        _ => Ok(TrainedModel::Predictor(Predictor::load(path)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::AgentState;

    fn quick_scenario() -> Scenario {
        Scenario::default()
    }

    #[test]
    fn evaluate_is_deterministic_and_paired() {
        let scenario = quick_scenario();
        let model = TrainedModel::Tom(scenario.theta_star);
        let human = HumanModel::new(HumanVariant::GroundTruth);
        let a = evaluate(&model, human, &scenario, 4, 500);
        let b = evaluate(&model, human, &scenario, 4, 500);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.rewards.len(), 4);
    }

    #[test]
    fn tom_with_true_weights_beats_stay_in_lane() {
        let scenario = quick_scenario();
        let human = HumanModel::new(HumanVariant::GroundTruth);
        let model = TrainedModel::Tom(scenario.theta_star);
        let tom = evaluate(&model, human, &scenario, 4, 900);
        // Baseline: zero-control cruise from the same initial states.
        let reward_obj = scenario.robot_objective();
        let mut total = 0.0;
        for i in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + i);
            let init = sample_initial_state(&mut rng, &scenario.world);
            let mut baseline = stay_in_lane_baseline(&scenario);
            let mut human_planner = scenario.human_planner(human);
            let rec = run_episode(
                &mut baseline,
                &mut human_planner,
                &reward_obj,
                &scenario.world,
                init,
            );
            total += rec.total_reward;
        }
        let baseline_mean = total / 4.0;
        assert!(
            tom.mean > baseline_mean,
            "tom {} vs baseline {baseline_mean}",
            tom.mean
        );
    }

    #[test]
    fn sweep_has_grid_times_seeds_records() {
        let scenario = quick_scenario();
        let cfg = ExperimentConfig {
            learner: LearnerKind::Tom,
            grid: vec![0, 5],
            seeds: 2,
            eval_envs: 2,
            base_seed: 42,
            ..ExperimentConfig::default()
        };
        let records = sweep(&cfg, &scenario, &RobustConfig::default(), &PpoConfig::quick());
        assert_eq!(records.len(), 4);
        // Paired evaluation: identical test seeds for every cell.
        for r in &records {
            assert!(r.mean_test_reward.is_finite());
            assert_eq!(r.learner, "tom");
        }
    }

    #[test]
    fn zero_data_planners_make_forward_progress() {
        let scenario = quick_scenario();
        let human = HumanModel::new(HumanVariant::GroundTruth);
        for kind in [LearnerKind::Tom, LearnerKind::RobustMb] {
            let model = train_learner(kind, human, &scenario, 0, 3, &RobustConfig::default())
                .unwrap();
            let reward_obj = scenario.robot_objective();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let init = sample_initial_state(&mut rng, &scenario.world);
            let mut planner = model.planner(&scenario);
            let mut human_planner = scenario.human_planner(human);
            let rec = run_episode(
                planner.as_mut(),
                &mut human_planner,
                &reward_obj,
                &scenario.world,
                init,
            );
            let progress = rec.robot_states.last().unwrap().y - rec.robot_states[0].y;
            assert!(progress > 0.0, "{kind:?} made no progress: {progress}");
        }
    }

    #[test]
    fn results_csv_round_trips_exactly() {
        let records = vec![
            ResultRecord {
                learner: "tom".into(),
                human_model: "ground_truth".into(),
                n_samples: 50,
                seed: 3,
                mean_test_reward: 123.456789012345,
                std_test_reward: 7.25,
                converged_fraction: 0.96,
                wall_time_s: 0.0,
            },
            ResultRecord {
                learner: "robust_mb".into(),
                human_model: "myopic".into(),
                n_samples: 1000,
                seed: 0,
                mean_test_reward: -3.0000000001,
                std_test_reward: 0.0,
                converged_fraction: 1.0,
                wall_time_s: 0.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(RESULTS_HEADER));
        let back = read_results(&path).unwrap();
        assert_eq!(records, back);

        // Empty record list: header-only file.
        let empty_path = dir.path().join("empty.csv");
        write_results(&[], &empty_path).unwrap();
        let text = std::fs::read_to_string(&empty_path).unwrap();
        assert_eq!(text, format!("{RESULTS_HEADER}\n"));

        // Unwritable path errors.
        assert!(write_results(&[], Path::new("/nonexistent/dir/results.csv")).is_err());
    }

    #[test]
    fn plot_data_aggregates_seeds() {
        let mut records = Vec::new();
        for seed in 0..30 {
            records.push(ResultRecord {
                learner: "tom".into(),
                human_model: "ground_truth".into(),
                n_samples: 50,
                seed,
                mean_test_reward: 10.0 + seed as f64,
                std_test_reward: 1.0,
                converged_fraction: 1.0,
                wall_time_s: 0.0,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        emit_plot_data(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], PLOT_HEADER);
        assert!(lines[1].starts_with("tom,ground_truth,50,"));
        assert!(lines[1].ends_with(",30"));
    }

    #[test]
    fn demo_csv_round_trips() {
        let scenario = quick_scenario();
        let dataset = generate_demos(
            &HumanModel::new(HumanVariant::GroundTruth),
            &scenario.theta_star,
            &scenario.params,
            &scenario.world,
            4,
            9,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.csv");
        write_demos(&dataset, &scenario.world, &path).unwrap();
        let back = read_demos(&path).unwrap();
        assert_eq!(back.demos.len(), dataset.demos.len());
        for (a, b) in dataset.demos.iter().zip(&back.demos) {
            assert_eq!(a.human_controls.len(), b.human_controls.len());
            for (ua, ub) in a.human_controls.0.iter().zip(&b.human_controls.0) {
                assert_eq!(ua, ub);
            }
            assert_eq!(a.x_human, b.x_human);
            assert_eq!(a.x_robot, b.x_robot);
        }
    }

    #[test]
    fn sweep_reruns_are_byte_identical() {
        let scenario = quick_scenario();
        let cfg = ExperimentConfig {
            learner: LearnerKind::Tom,
            grid: vec![0],
            seeds: 2,
            eval_envs: 2,
            base_seed: 11,
            ..ExperimentConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let r1 = sweep(&cfg, &scenario, &RobustConfig::default(), &PpoConfig::quick());
        write_results(&r1, &p1).unwrap();
        let r2 = sweep(&cfg, &scenario, &RobustConfig::default(), &PpoConfig::quick());
        write_results(&r2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_file_resolves_defaults_and_overrides() {
        let resolved = resolve_config(ConfigFile::default()).unwrap();
        assert_eq!(resolved.experiment.learner, LearnerKind::Tom);
        assert_eq!(resolved.experiment.seeds, 10);
        assert_eq!(resolved.experiment.eval_envs, 25);

        let text = r#"
            [experiment]
            learner = "robust_mb"
            human = "panicking"
            grid = [0, 100]
            seeds = 3
            paper_scale = true

            [robust]
            rounds = 4

            [theta_star]
            car_proximity = -60.0
            lane_edge = -12.0
            forward_progress = -2.0
            bounded_control = -10.0
            offroad = -5.0
        "#;
        let file: ConfigFile = toml::from_str(text).unwrap();
        let resolved = resolve_config(file).unwrap();
        assert_eq!(resolved.experiment.learner, LearnerKind::RobustMb);
        assert_eq!(resolved.experiment.human, HumanVariant::Panicking);
        assert_eq!(resolved.experiment.seeds, 30);
        assert_eq!(resolved.robust.rounds, 4);
        assert_eq!(resolved.scenario.theta_star, RewardWeights::ground_truth());

        let bad: ConfigFile = toml::from_str("[experiment]\nlearner = \"nope\"").unwrap();
        assert!(resolve_config(bad).is_err());
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = quick_scenario();

        let tom = TrainedModel::Tom(RewardWeights([-0.9, -0.2, -0.1, -0.2, -0.2]));
        let path = dir.path().join("tom.json");
        tom.save(&path).unwrap();
        match load_model(&path).unwrap() {
            TrainedModel::Tom(theta) => {
                assert_eq!(theta, RewardWeights([-0.9, -0.2, -0.1, -0.2, -0.2]))
            }
            _ => panic!("wrong kind"),
        }

        let predictor = TrainedModel::Predictor(Predictor::untrained(scenario.world.horizon, 5));
        let ppath = dir.path().join("predictor.json");
        predictor.save(&ppath).unwrap();
        assert!(matches!(load_model(&ppath).unwrap(), TrainedModel::Predictor(_)));

        let policy = TrainedModel::Policy(PolicyParams::new(7));
        let polpath = dir.path().join("policy.json");
        policy.save(&polpath).unwrap();
        match load_model(&polpath).unwrap() {
            TrainedModel::Policy(p) => {
                if let TrainedModel::Policy(orig) = &policy {
                    assert_eq!(p.mean_net.flat_params(), orig.mean_net.flat_params());
                }
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn transfer_rows_cover_all_variants() {
        let scenario = quick_scenario();
        let models = vec![
            ("tom".to_string(), TrainedModel::Tom(scenario.theta_star)),
        ];
        let mods = [HumanVariant::Myopic];
        let records = transfer_eval(&models, &mods, &scenario, 2, 33);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].human_model, "ground_truth");
        assert_eq!(records[1].human_model, "myopic");
        let _ = AgentState::new(0.0, 0.0, 0.0, 0.0);
    }
}
