//! The neural human-plan predictor, its supervised training, and the
//! covariate-shift-robust iterative training loop.
//!
//! The predictor maps (robot history, human history, current states, robot
//! plan) to the human's next T controls through three ReLU layers of width
//! 128. Histories hold the last `h` executed (state, action) pairs per
//! agent, zero-padded at episode start. Inputs are standardized with
//! statistics of the training set, stored alongside the weights.
//!
//! Training minimizes mean squared error with Adam over a deterministic
//! sequential minibatch schedule, so a fixed seed reproduces parameters
//! bit for bit and dataset duplication with an epoch-equivalent schedule
//! is exactly neutral.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::human::{HumanModel, HumanPlanner};
use crate::irl::{generate_demos, DemoDataset};
use crate::nn::{Activation, Adam, Mlp, Standardizer};
use crate::rewards::{FeatureParams, JointObjective, RewardWeights};
use crate::trajopt::{
    robot_plan_blackbox, run_episode, EpisodeRecord, OptimizerConfig, PlanOutcome, PlanPredictor,
    RobotPlanner, StepContext,
};
use crate::world::{AgentState, Control, ControlPlan, WorldConfig};
use crate::{Error, Result};

/// History window length h, in executed steps per agent.
pub const HISTORY_LEN: usize = 5;
/// Values per (state, action) pair in the input encoding.
const PAIR_DIM: usize = 6;

/// A trained human-plan predictor with its input statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    pub net: Mlp,
    pub standardizer: Standardizer,
    pub horizon: usize,
    pub history_len: usize,
}

/// One supervised example: encoded input and the human's next controls.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn input_dim(history_len: usize, horizon: usize) -> usize {
    2 * history_len * PAIR_DIM + 8 + 2 * horizon
}

/// Encode the predictor input: robot history, human history (oldest first,
/// zero-padded), both current states, then the flattened robot plan.
pub fn build_input(
    robot_history: &[(AgentState, Control)],
    human_history: &[(AgentState, Control)],
    x_robot: AgentState,
    x_human: AgentState,
    robot_plan: &ControlPlan,
    history_len: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(input_dim(history_len, robot_plan.len()));
    for hist in [robot_history, human_history] {
        let skip = hist.len().saturating_sub(history_len);
        let tail = &hist[skip..];
        for _ in 0..history_len - tail.len() {
            out.extend_from_slice(&[0.0; PAIR_DIM]);
        }
        for (s, u) in tail {
            out.extend_from_slice(&[s.x, s.y, s.v, s.heading, u.accel, u.yaw_rate]);
        }
    }
    for s in [x_robot, x_human] {
        out.extend_from_slice(&[s.x, s.y, s.v, s.heading]);
    }
    out.extend_from_slice(&robot_plan.to_flat());
    out
}

impl Predictor {
    /// Freshly initialized, untrained predictor (identity standardization).
    pub fn untrained(horizon: usize, seed: u64) -> Self {
        let dim = input_dim(HISTORY_LEN, horizon);
        Self {
            net: Mlp::new(&[dim, 128, 128, 128, 2 * horizon], Activation::Relu, seed),
            standardizer: Standardizer::identity(dim),
            horizon,
            history_len: HISTORY_LEN,
        }
    }

    /// Deterministic forward pass; the output is the human plan.
    pub fn predict(
        &self,
        robot_history: &[(AgentState, Control)],
        human_history: &[(AgentState, Control)],
        x_robot: AgentState,
        x_human: AgentState,
        robot_plan: &ControlPlan,
    ) -> Result<ControlPlan> {
        let input = build_input(
            robot_history,
            human_history,
            x_robot,
            x_human,
            robot_plan,
            self.history_len,
        );
        self.predict_encoded(&input)
    }

    pub fn predict_encoded(&self, input: &[f64]) -> Result<ControlPlan> {
        if input.len() != self.net.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.net.input_dim(), got: input.len() });
        }
        let z = self.standardizer.apply(input);
        Ok(ControlPlan::from_flat(&self.net.infer(&z)))
    }

    /// Mean squared error over encoded samples, averaged over samples and
    /// output dimensions.
    pub fn mse(&self, samples: &[TrainSample]) -> f64 {
        let d = 2 * self.horizon;
        let mut total = 0.0;
        for s in samples {
            let z = self.standardizer.apply(&s.input);
            let out = self.net.infer(&z);
            total += out
                .iter()
                .zip(&s.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / (samples.len() as f64 * d as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &VersionedPredictor {
            version: 1,
            predictor: self.clone(),
        })
        .map_err(|e| Error::Config(format!("predictor serialization: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let v: VersionedPredictor = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Config(format!("predictor deserialization: {e}")))?;
        if v.version != 1 {
            return Err(Error::Config(format!("unsupported predictor version {}", v.version)));
        }
        Ok(v.predictor)
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedPredictor {
    version: u32,
    predictor: Predictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, betas: (0.9, 0.999), epochs: 500, minibatch: 32, seed: 0 }
    }
}

impl TrainConfig {
    /// Scale the epoch count to the dataset size, targeting a fixed number
    /// of optimizer steps.
    pub fn scaled_for(n_samples: usize, target_steps: usize, seed: u64) -> Self {
        let base = Self { seed, ..Self::default() };
        let batches_per_epoch = n_samples.div_ceil(base.minibatch).max(1);
        let epochs = target_steps.div_ceil(batches_per_epoch).clamp(1, 4000);
        Self { epochs, ..base }
    }
}

/// Supervised training windows from off-policy demonstrations: one window
/// per demo, histories zero-padded (demos start cold).
pub fn demo_windows(dataset: &DemoDataset) -> Vec<TrainSample> {
    dataset
        .demos
        .iter()
        .map(|d| TrainSample {
            input: build_input(
                &[],
                &[],
                d.x_robot,
                d.x_human,
                &d.robot_controls,
                HISTORY_LEN,
            ),
            target: d.human_controls.to_flat(),
        })
        .collect()
}

/// Sliding windows over an executed episode: at each step, the histories so
/// far, the current states, the robot controls actually executed over the
/// next T steps, and the human controls they elicited.
pub fn episode_windows(rec: &EpisodeRecord, horizon: usize) -> Vec<TrainSample> {
    let steps = rec.robot_controls.len();
    let mut out = Vec::new();
    for t in 0..steps.saturating_sub(horizon - 1) {
        let hist_r: Vec<(AgentState, Control)> = (t.saturating_sub(HISTORY_LEN)..t)
            .map(|i| (rec.robot_states[i], rec.robot_controls[i]))
            .collect();
        let hist_h: Vec<(AgentState, Control)> = (t.saturating_sub(HISTORY_LEN)..t)
            .map(|i| (rec.human_states[i], rec.human_controls[i]))
            .collect();
        let robot_plan = ControlPlan(rec.robot_controls[t..t + horizon].to_vec());
        let target = ControlPlan(rec.human_controls[t..t + horizon].to_vec());
        out.push(TrainSample {
            input: build_input(
                &hist_r,
                &hist_h,
                rec.robot_states[t],
                rec.human_states[t],
                &robot_plan,
                HISTORY_LEN,
            ),
            target: target.to_flat(),
        });
    }
    out
}

/// Train a predictor on the given windows by minimizing mean squared error.
/// Returns the predictor and the per-epoch training loss curve.
pub fn train(
    samples: &[TrainSample],
    horizon: usize,
    cfg: &TrainConfig,
) -> Result<(Predictor, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("predictor training needs samples"));
    }
    let dim = input_dim(HISTORY_LEN, horizon);
    if samples[0].input.len() != dim {
        return Err(Error::ShapeMismatch { expected: dim, got: samples[0].input.len() });
    }
    let out_dim = 2 * horizon;
    let standardizer = Standardizer::fit(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>());
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| standardizer.apply(&s.input)).collect();

    let mut net = Mlp::new(&[dim, 128, 128, 128, out_dim], Activation::Relu, cfg.seed);
    let mut adam = Adam::new(&net, cfg.learning_rate, cfg.betas.0, cfg.betas.1);
    let n = samples.len();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_sse = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + cfg.minibatch).min(n);
            let b = end - start;
            let x = DMatrix::from_fn(dim, b, |i, j| inputs[start + j][i]);
            let y = DMatrix::from_fn(out_dim, b, |i, j| samples[start + j].target[i]);
            let trace = net.forward(&x);
            let diff = trace.output() - &y;
            epoch_sse += diff.iter().map(|v| v * v).sum::<f64>();
            let cot = diff * (2.0 / (b * out_dim) as f64);
            let (grads, _) = net.backward(&trace, &cot);
            adam.update(&mut net, &grads);
            start = end;
        }
        curve.push(epoch_sse / (n * out_dim) as f64);
    }
    Ok((
        Predictor { net, standardizer, horizon, history_len: HISTORY_LEN },
        curve,
    ))
}

/// The one-shot offline pipeline: fit once to the same off-policy
/// demonstrations the reward learner uses. Evaluation happens in the
/// experiment harness against the live simulator.
pub fn vanilla_pipeline(
    dataset: &DemoDataset,
    horizon: usize,
    cfg: &TrainConfig,
) -> Result<(Predictor, Vec<f64>)> {
    train(&demo_windows(dataset), horizon, cfg)
}

/// Adapter giving the trajectory optimizer a differentiable view of the
/// predictor at fixed histories.
pub struct WindowPredictor<'a> {
    pub predictor: &'a Predictor,
    pub robot_history: &'a [(AgentState, Control)],
    pub human_history: &'a [(AgentState, Control)],
}

impl PlanPredictor for WindowPredictor<'_> {
    fn predict_plan(
        &self,
        x_robot: AgentState,
        x_human: AgentState,
        robot_plan: &ControlPlan,
    ) -> ControlPlan {
        self.predictor
            .predict(self.robot_history, self.human_history, x_robot, x_human, robot_plan)
            .expect("window predictor input shapes are fixed")
    }

    fn vjp_robot_plan(
        &self,
        x_robot: AgentState,
        x_human: AgentState,
        robot_plan: &ControlPlan,
        cotangent: &[f64],
    ) -> Vec<f64> {
        let p = self.predictor;
        let input = build_input(
            self.robot_history,
            self.human_history,
            x_robot,
            x_human,
            robot_plan,
            p.history_len,
        );
        let z = p.standardizer.apply(&input);
        let x = DMatrix::from_column_slice(z.len(), 1, &z);
        let trace = p.net.forward(&x);
        let cot = DMatrix::from_column_slice(cotangent.len(), 1, cotangent);
        let (_, input_cot) = p.net.backward(&trace, &cot);
        // Chain through standardization and slice the robot-plan segment.
        let plan_offset = input.len() - 2 * p.horizon;
        (0..2 * p.horizon)
            .map(|j| {
                let idx = plan_offset + j;
                input_cot[(idx, 0)] / p.standardizer.std[idx]
            })
            .collect()
    }
}

/// Receding-horizon robot planner that optimizes against the predictor,
/// with the same warm start and restart policy as the nested planner.
pub struct BlackboxPlanner {
    pub predictor: Predictor,
    pub robot_obj: JointObjective,
    pub horizon: usize,
    pub outer_cfg: OptimizerConfig,
    warm: Option<ControlPlan>,
}

impl BlackboxPlanner {
    pub fn new(predictor: Predictor, robot_obj: JointObjective, horizon: usize, outer_cfg: OptimizerConfig) -> Self {
        Self { predictor, robot_obj, horizon, outer_cfg, warm: None }
    }

    fn templates(&self, include_straight: bool) -> Vec<ControlPlan> {
        let a = self.robot_obj.params.a_max;
        let mut out = Vec::new();
        if include_straight {
            out.push(ControlPlan(vec![Control::new(a, 0.0); self.horizon]));
        }
        let profile = [0.9, 0.22, -0.45, -0.45, -0.22];
        for dir in [-1.0, 1.0] {
            out.push(ControlPlan(
                (0..self.horizon)
                    .map(|i| Control::new(a, dir * profile.get(i).copied().unwrap_or(0.0)))
                    .collect(),
            ));
        }
        out
    }

    fn solve(&self, ctx: &StepContext, init: &ControlPlan, max_iters: usize) -> crate::trajopt::OptResult {
        let adapter = WindowPredictor {
            predictor: &self.predictor,
            robot_history: ctx.robot_history,
            human_history: ctx.human_history,
        };
        let cfg = OptimizerConfig { max_iters, ..self.outer_cfg };
        robot_plan_blackbox(&adapter, &self.robot_obj, ctx.x_robot, ctx.x_human, init, &cfg)
    }
}

impl RobotPlanner for BlackboxPlanner {
    fn plan(&mut self, ctx: &StepContext) -> PlanOutcome {
        let result = match &self.warm {
            Some(w) => {
                let mut best = self.solve(ctx, &w.shifted(), self.outer_cfg.max_iters);
                if ctx.x_robot.y - ctx.x_human.y < 1.0 {
                    for t in self.templates(false) {
                        let alt = self.solve(ctx, &t, 20);
                        if alt.objective > best.objective {
                            best = alt;
                        }
                    }
                }
                best
            }
            None => {
                let mut inits = vec![ControlPlan::zeros(self.horizon)];
                inits.extend(self.templates(true));
                inits
                    .iter()
                    .map(|i| self.solve(ctx, i, self.outer_cfg.max_iters))
                    .max_by(|a, b| a.objective.total_cmp(&b.objective))
                    .unwrap()
            }
        };
        self.warm = Some(result.plan.clone());
        PlanOutcome { plan: result.plan, ok: result.objective.is_finite() }
    }

    fn reset(&mut self) {
        self.warm = None;
    }
}

/// Settings of the iterative on-policy training loop.
#[derive(Debug, Clone, Copy)]
pub struct RobustConfig {
    pub rounds: usize,
    /// Optimizer step budget for intermediate refits and for the final one.
    pub refit_steps: usize,
    pub final_steps: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            refit_steps: 700,
            final_steps: 1600,
            minibatch: 32,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
        }
    }
}

/// Outcome of the robust loop: the final predictor, the aggregate windows,
/// and per-round on-policy validation MSE (each round's fresh windows
/// scored by the predictor from the previous round, before refitting).
pub struct RobustOutcome {
    pub predictor: Predictor,
    pub total_windows: usize,
    pub on_policy_mse: Vec<f64>,
}

/// Iterative covariate-shift-robust training: seed with scripted-robot
/// windows, then alternate between planning with the current predictor
/// against the real human simulator and refitting from scratch on all
/// windows collected so far. Window harvesting truncates mid-episode so the
/// aggregate hits `total_windows` exactly.
#[allow(clippy::too_many_arguments)]
pub fn robust_train(
    model: &HumanModel,
    theta_star: &RewardWeights,
    params: &FeatureParams,
    world: &WorldConfig,
    total_windows: usize,
    cfg: &RobustConfig,
    seed: u64,
) -> Result<RobustOutcome> {
    if total_windows == 0 {
        return Err(Error::EmptyDataset("robust training needs a nonzero window budget"));
    }
    let horizon = world.horizon;
    let windows_per_episode = world.episode_len.saturating_sub(horizon - 1).max(1);
    let rounds = cfg
        .rounds
        .min(total_windows.div_ceil(windows_per_episode))
        .max(1);
    // Integer split of the window budget across rounds, remainder first.
    let base = total_windows / rounds;
    let rem = total_windows % rounds;
    let quota = |r: usize| base + usize::from(r < rem);

    let robot_obj = JointObjective::with_caps(
        crate::rewards::robot_weights(theta_star),
        *params,
        world.road,
        world.dt,
        world.v_max,
        world.human_v_max,
    );

    // Round 0: scripted-robot seed windows.
    let seed_demos = generate_demos(model, theta_star, params, world, quota(0), seed ^ 0x5eed);
    let mut aggregate: Vec<TrainSample> = demo_windows(&seed_demos);
    let train_cfg = |steps: usize| TrainConfig {
        learning_rate: cfg.learning_rate,
        betas: cfg.betas,
        minibatch: cfg.minibatch,
        ..TrainConfig::scaled_for(1, steps, seed)
    };
    let fit = |agg: &[TrainSample], steps: usize| -> Result<Predictor> {
        let mut tc = train_cfg(steps);
        let batches = agg.len().div_ceil(cfg.minibatch).max(1);
        tc.epochs = steps.div_ceil(batches).clamp(1, 4000);
        Ok(train(agg, horizon, &tc)?.0)
    };

    let mut predictor = fit(&aggregate, if rounds == 1 { cfg.final_steps } else { cfg.refit_steps })?;
    let mut on_policy_mse = Vec::new();

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for round in 1..rounds {
        let mut fresh: Vec<TrainSample> = Vec::with_capacity(quota(round));
        while fresh.len() < quota(round) {
            let init = crate::world::sample_initial_state(&mut rng, world);
            let mut planner = BlackboxPlanner::new(
                predictor.clone(),
                robot_obj.clone(),
                horizon,
                OptimizerConfig::outer(),
            );
            let mut human =
                HumanPlanner::new(*model, *theta_star, *params, *world, OptimizerConfig::inner());
            let rec = run_episode(&mut planner, &mut human, &robot_obj, world, init);
            for w in episode_windows(&rec, horizon) {
                if fresh.len() >= quota(round) {
                    break;
                }
                fresh.push(w);
            }
        }
        on_policy_mse.push(predictor.mse(&fresh));
        aggregate.extend(fresh);
        let steps = if round + 1 == rounds { cfg.final_steps } else { cfg.refit_steps };
        predictor = fit(&aggregate, steps)?;
    }
    Ok(RobustOutcome { predictor, total_windows: aggregate.len(), on_policy_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::human::HumanVariant;
    use crate::trajopt::fd_gradient;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_samples(n: usize, horizon: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = input_dim(HISTORY_LEN, horizon);
        (0..n)
            .map(|_| TrainSample {
                input: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: (0..2 * horizon).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            })
            .collect()
    }

    #[test]
    fn zero_weights_predict_zero_plan() {
        let mut p = Predictor::untrained(5, 3);
        let zeros = vec![0.0; p.net.num_params()];
        p.net.set_flat_params(&zeros);
        let plan = p
            .predict(
                &[],
                &[],
                AgentState::new(0.0, 0.0, 1.0, 0.0),
                AgentState::new(0.1, 2.0, 1.0, 0.0),
                &ControlPlan::zeros(5),
            )
            .unwrap();
        assert_eq!(plan.len(), 5);
        for u in &plan.0 {
            assert_eq!((u.accel, u.yaw_rate), (0.0, 0.0));
        }
    }

    #[test]
    fn predict_is_deterministic_and_checks_shape() {
        let p = Predictor::untrained(5, 9);
        let x_r = AgentState::new(0.2, -1.0, 1.1, 0.0);
        let x_h = AgentState::new(0.0, 1.0, 0.9, 0.05);
        let plan = ControlPlan(vec![Control::new(0.3, -0.1); 5]);
        let a = p.predict(&[], &[], x_r, x_h, &plan).unwrap();
        let b = p.predict(&[], &[], x_r, x_h, &plan).unwrap();
        assert_eq!(a, b);
        assert!(p.predict_encoded(&[0.0; 3]).is_err());
    }

    #[test]
    fn memorizes_small_dataset() {
        let samples = tiny_samples(10, 5, 1);
        let cfg = TrainConfig { epochs: 2000, ..TrainConfig::default() };
        let (p, curve) = train(&samples, 5, &cfg).unwrap();
        let mse = p.mse(&samples);
        assert!(mse < 1e-3, "training MSE {mse}");
        assert!(curve.last().unwrap() < curve.first().unwrap());
    }

    #[test]
    fn duplicated_dataset_with_halved_epochs_is_identical() {
        let samples = tiny_samples(64, 5, 2);
        let mut doubled = samples.clone();
        doubled.extend(samples.clone());
        let cfg_a = TrainConfig { epochs: 40, seed: 5, ..TrainConfig::default() };
        let cfg_b = TrainConfig { epochs: 20, seed: 5, ..TrainConfig::default() };
        let (pa, _) = train(&samples, 5, &cfg_a).unwrap();
        let (pb, _) = train(&doubled, 5, &cfg_b).unwrap();
        assert_eq!(pa.net.flat_params(), pb.net.flat_params());
    }

    #[test]
    fn training_is_reproducible() {
        let samples = tiny_samples(30, 5, 3);
        let cfg = TrainConfig { epochs: 50, seed: 11, ..TrainConfig::default() };
        let (a, _) = train(&samples, 5, &cfg).unwrap();
        let (b, _) = train(&samples, 5, &cfg).unwrap();
        assert_eq!(a.net.flat_params(), b.net.flat_params());
        assert!(train(&[], 5, &cfg).is_err());
    }

    #[test]
    fn predictor_round_trips_through_file() {
        let samples = tiny_samples(16, 5, 4);
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let (p, _) = train(&samples, 5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictor.json");
        p.save(&path).unwrap();
        let loaded = Predictor::load(&path).unwrap();
        assert_eq!(p.net.flat_params(), loaded.net.flat_params());
        assert_eq!(p.standardizer, loaded.standardizer);
    }

    #[test]
    fn plan_jacobian_matches_finite_differences() {
        let samples = tiny_samples(40, 5, 6);
        let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
        let (p, _) = train(&samples, 5, &cfg).unwrap();
        let x_r = AgentState::new(0.1, 0.0, 1.2, 0.0);
        let x_h = AgentState::new(0.0, 1.5, 1.0, 0.0);
        let hist_r: Vec<(AgentState, Control)> =
            vec![(AgentState::new(0.1, -0.4, 1.1, 0.0), Control::new(0.2, 0.0))];
        let hist_h: Vec<(AgentState, Control)> =
            vec![(AgentState::new(0.0, 1.1, 1.0, 0.0), Control::zero())];
        let adapter = WindowPredictor {
            predictor: &p,
            robot_history: &hist_r,
            human_history: &hist_h,
        };
        let plan0 = vec![0.2, -0.05, 0.1, 0.0, 0.3, 0.02, 0.0, 0.0, -0.1, 0.01];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cot: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vjp = adapter.vjp_robot_plan(x_r, x_h, &ControlPlan::from_flat(&plan0), &cot);
        let fd = fd_gradient(
            |u| {
                let out = adapter.predict_plan(x_r, x_h, &ControlPlan::from_flat(u));
                out.to_flat().iter().zip(&cot).map(|(o, c)| o * c).sum()
            },
            &plan0,
            1e-6,
        );
        for (a, f) in vjp.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-4);
            assert!((a - f).abs() / denom < 1e-3, "vjp {a} fd {f}");
        }
    }

    #[test]
    fn blackbox_planning_gradient_matches_finite_differences() {
        let world = WorldConfig::default();
        let samples = tiny_samples(40, world.horizon, 10);
        let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
        let (p, _) = train(&samples, world.horizon, &cfg).unwrap();
        let robot_obj = JointObjective::with_caps(
            crate::rewards::robot_weights(&RewardWeights::ground_truth()),
            FeatureParams::default(),
            world.road,
            world.dt,
            world.v_max,
            world.human_v_max,
        );
        let x_r = AgentState::new(0.05, 0.0, 1.0, 0.0);
        let x_h = AgentState::new(0.0, 1.8, 1.0, 0.0);
        let adapter = WindowPredictor { predictor: &p, robot_history: &[], human_history: &[] };
        let objective = |u: &[f64]| -> f64 {
            let plan = ControlPlan::from_flat(u);
            let human = adapter.predict_plan(x_r, x_h, &plan);
            robot_obj.value(x_r, x_h, &plan, &human).unwrap()
        };
        let u0 = vec![0.25, -0.03, 0.2, 0.01, 0.15, 0.0, 0.1, 0.0, 0.05, 0.0];
        // Assemble the analytic gradient the planner uses.
        let human = adapter.predict_plan(x_r, x_h, &ControlPlan::from_flat(&u0));
        let (_, g_self, g_other) = robot_obj
            .value_and_grads(x_r, x_h, &ControlPlan::from_flat(&u0), &human)
            .unwrap();
        let chain = adapter.vjp_robot_plan(x_r, x_h, &ControlPlan::from_flat(&u0), &g_other);
        let analytic: Vec<f64> = g_self.iter().zip(&chain).map(|(a, b)| a + b).collect();
        let fd = fd_gradient(objective, &u0, 1e-6);
        for (a, f) in analytic.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-3);
            assert!((a - f).abs() / denom < 1e-3, "analytic {a} fd {f}");
        }
    }

    #[test]
    fn constant_predictor_keeps_planner_deterministic() {
        let world = WorldConfig::default();
        let mut p = Predictor::untrained(world.horizon, 12);
        let zeros = vec![0.0; p.net.num_params()];
        p.net.set_flat_params(&zeros);
        let robot_obj = JointObjective::with_caps(
            crate::rewards::robot_weights(&RewardWeights::ground_truth()),
            FeatureParams::default(),
            world.road,
            world.dt,
            world.v_max,
            world.human_v_max,
        );
        let mut planner =
            BlackboxPlanner::new(p, robot_obj, world.horizon, OptimizerConfig::outer());
        let ctx = StepContext {
            x_robot: AgentState::new(0.0, 0.0, 1.0, 0.0),
            x_human: AgentState::new(0.0, 2.0, 1.0, 0.0),
            robot_history: &[],
            human_history: &[],
            step_idx: 0,
        };
        let a = planner.plan(&ctx);
        planner.reset();
        let b = planner.plan(&ctx);
        assert_eq!(a.plan, b.plan);
        assert!(a.ok);
    }

    #[test]
    fn episode_windows_have_expected_count_and_shape() {
        let world = WorldConfig::default();
        let theta = RewardWeights::ground_truth();
        let robot_obj = JointObjective::with_caps(
            crate::rewards::robot_weights(&theta),
            FeatureParams::default(),
            world.road,
            world.dt,
            world.v_max,
            world.human_v_max,
        );
        let mut planner = crate::trajopt::ScriptedPlanner {
            control: Control::new(0.2, 0.0),
            horizon: world.horizon,
        };
        let mut human = HumanPlanner::new(
            HumanModel::new(HumanVariant::GroundTruth),
            theta,
            FeatureParams::default(),
            world,
            OptimizerConfig::inner(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = crate::world::sample_initial_state(&mut rng, &world);
        let rec = run_episode(&mut planner, &mut human, &robot_obj, &world, init);
        let windows = episode_windows(&rec, world.horizon);
        assert_eq!(windows.len(), world.episode_len - world.horizon + 1);
        for w in &windows {
            assert_eq!(w.input.len(), input_dim(HISTORY_LEN, world.horizon));
            assert_eq!(w.target.len(), 2 * world.horizon);
        }
    }

    #[test]
    fn robust_loop_aggregates_and_degenerates_to_vanilla() {
        let world = WorldConfig::default();
        let theta = RewardWeights::ground_truth();
        let model = HumanModel::new(HumanVariant::GroundTruth);
        let params = FeatureParams::default();

        // Two rounds, tiny budget: the aggregate grows each round.
        let cfg = RobustConfig { rounds: 2, refit_steps: 30, final_steps: 30, ..RobustConfig::default() };
        let out = robust_train(&model, &theta, &params, &world, 40, &cfg, 7).unwrap();
        assert_eq!(out.total_windows, 40);
        assert_eq!(out.on_policy_mse.len(), 1);

        // One round reduces to vanilla training on the seed windows.
        let cfg1 = RobustConfig { rounds: 1, refit_steps: 30, final_steps: 30, ..RobustConfig::default() };
        let out1 = robust_train(&model, &theta, &params, &world, 20, &cfg1, 7).unwrap();
        let seed_demos = generate_demos(&model, &theta, &params, &world, 20, 7 ^ 0x5eed);
        let windows = demo_windows(&seed_demos);
        let mut tc = TrainConfig {
            learning_rate: cfg1.learning_rate,
            betas: cfg1.betas,
            minibatch: cfg1.minibatch,
            ..TrainConfig::scaled_for(1, 30, 7)
        };
        tc.epochs = 30usize.div_ceil(windows.len().div_ceil(cfg1.minibatch).max(1)).clamp(1, 4000);
        let (reference, _) = train(&windows, world.horizon, &tc).unwrap();
        assert_eq!(out1.predictor.net.flat_params(), reference.net.flat_params());
        assert!(robust_train(&model, &theta, &params, &world, 0, &cfg1, 7).is_err());
    }
}
