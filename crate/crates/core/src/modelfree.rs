//! A clipped-surrogate policy-gradient robot learner at desk scale.
//!
//! The policy is a Gaussian over (accel, yaw rate): a tanh network outputs
//! the mean, a state-independent learnable log-std sets the spread, and a
//! separate network of the same shape estimates values. Training alternates
//! between collecting whole episodes and several epochs of clipped-surrogate
//! updates on the batch, with advantages from generalized advantage
//! estimation.
//!
//! The human simulator reacts to the robot's intended future, so during
//! collection it is shown the deterministic T-step rollout of the current
//! policy mean from the current state (the human's state held fixed while
//! imagining), which plays the role of the robot's plan.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::human::{HumanModel, HumanPlanner};
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::rewards::{FeatureParams, JointObjective, RewardWeights};
use crate::trajopt::{
    run_episode, HumanObservation, HumanSimulator, OptimizerConfig, PlanOutcome, RobotPlanner,
    StepContext,
};
use crate::world::{sample_initial_state, step, AgentState, Control, ControlPlan, WorldConfig};
use crate::{Error, Result};

pub const OBS_DIM: usize = 9;
pub const ACTION_DIM: usize = 2;

/// Observation: both cars' lateral position, speed, and heading, plus the
/// relative displacement and speed. Absolute longitude is excluded as
/// non-stationary. Solo environments zero the human-dependent entries.
pub fn observe(x_robot: AgentState, x_human: Option<AgentState>) -> [f64; OBS_DIM] {
    match x_human {
        Some(h) => [
            x_robot.x,
            x_robot.v,
            x_robot.heading,
            h.x,
            h.v,
            h.heading,
            h.x - x_robot.x,
            h.y - x_robot.y,
            h.v - x_robot.v,
        ],
        None => [x_robot.x, x_robot.v, x_robot.heading, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    }
}

/// Gaussian policy and value function.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub mean_net: Mlp,
    pub log_std: [f64; ACTION_DIM],
    pub value_net: Mlp,
}

impl PolicyParams {
    pub fn new(seed: u64) -> Self {
        Self {
            mean_net: Mlp::new(&[OBS_DIM, 128, 128, ACTION_DIM], Activation::Tanh, seed),
            log_std: [(0.4f64).ln(); ACTION_DIM],
            value_net: Mlp::new(&[OBS_DIM, 128, 128, 1], Activation::Tanh, seed ^ 0x9e3779b9),
        }
    }

    pub fn mean_action(&self, obs: &[f64]) -> Control {
        let out = self.mean_net.infer(obs);
        Control::new(out[0], out[1])
    }

    pub fn log_prob(&self, obs: &[f64], action: Control) -> f64 {
        let mean = self.mean_net.infer(obs);
        let a = [action.accel, action.yaw_rate];
        let mut lp = 0.0;
        for d in 0..ACTION_DIM {
            let sigma = self.log_std[d].exp();
            let z = (a[d] - mean[d]) / sigma;
            lp += -0.5 * z * z - self.log_std[d] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    /// Deterministic T-step rollout of the policy mean, handed to the human
    /// simulator as the robot's plan. The human's state is held fixed while
    /// imagining.
    pub fn mean_plan(
        &self,
        x_robot: AgentState,
        x_human: Option<AgentState>,
        horizon: usize,
        world: &WorldConfig,
    ) -> ControlPlan {
        let mut s = x_robot;
        let mut controls = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let u = self.mean_action(&observe(s, x_human));
            controls.push(u);
            s = step(s, u, world.dt, world.v_max);
        }
        ControlPlan(controls)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    /// Advantage-smoothing factor of generalized advantage estimation.
    pub lambda: f64,
    pub batch_frames: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub total_frames: usize,
    /// Updates between deterministic evaluations.
    pub eval_every: usize,
    pub eval_envs: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            batch_frames: 8192,
            epochs: 10,
            minibatch: 256,
            learning_rate: 3e-4,
            total_frames: 500_000,
            eval_every: 5,
            eval_envs: 25,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Reduced preset for quick runs.
    pub fn quick() -> Self {
        Self { batch_frames: 2048, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("clip ratio {} outside (0, 1)", self.clip)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// The environment the policy trains in: the standard two-car world, or a
/// solo road (no human, progress-only reward) used as a sanity check.
#[derive(Clone)]
pub struct PpoEnv {
    pub world: WorldConfig,
    pub reward_obj: JointObjective,
    pub human: Option<(HumanModel, RewardWeights, FeatureParams)>,
}

impl PpoEnv {
    pub fn interactive(
        world: WorldConfig,
        reward_obj: JointObjective,
        model: HumanModel,
        theta_star: RewardWeights,
        params: FeatureParams,
    ) -> Self {
        Self { world, reward_obj, human: Some((model, theta_star, params)) }
    }

    /// No other car; the reward keeps only the progress, control, lane, and
    /// road terms.
    pub fn solo(world: WorldConfig, mut reward_obj: JointObjective) -> Self {
        reward_obj.proximity = crate::rewards::ProximityMode::Ignore;
        Self { world, reward_obj, human: None }
    }

    fn dummy_human(&self) -> AgentState {
        AgentState::new(0.0, 1e6, 0.0, 0.0)
    }
}

/// One collected batch of whole episodes.
pub struct RolloutBatch {
    pub obs: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<Control>,
    /// The simulator's executed responses, kept for replay checks.
    pub human_actions: Vec<Control>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    pub episodes: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Collect whole episodes until at least `n_frames` frames, sampling actions
/// from the Gaussian policy.
pub fn collect_rollouts(
    policy: &PolicyParams,
    env: &PpoEnv,
    n_frames: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutBatch {
    let mut batch = RolloutBatch {
        obs: Vec::with_capacity(n_frames + env.world.episode_len),
        actions: Vec::new(),
        human_actions: Vec::new(),
        rewards: Vec::new(),
        values: Vec::new(),
        log_probs: Vec::new(),
        dones: Vec::new(),
        episodes: 0,
    };
    while batch.len() < n_frames {
        collect_episode(policy, env, rng, &mut batch);
        batch.episodes += 1;
    }
    batch
}

fn gaussian_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn collect_episode(policy: &PolicyParams, env: &PpoEnv, rng: &mut ChaCha8Rng, batch: &mut RolloutBatch) {
    let world = &env.world;
    let (mut x_robot, mut x_human) = match &env.human {
        Some(_) => sample_initial_state(rng, world),
        None => (sample_initial_state(rng, world).0, env.dummy_human()),
    };
    let mut human_planner = env.human.as_ref().map(|(model, theta, params)| {
        HumanPlanner::new(*model, *theta, *params, *world, OptimizerConfig::inner())
    });
    let mut last_robot_control = None;
    for t in 0..world.episode_len {
        let obs = observe(x_robot, env.human.as_ref().map(|_| x_human));
        let mean = policy.mean_net.infer(&obs);
        let mut action = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            action[d] = mean[d] + policy.log_std[d].exp() * gaussian_sample(rng);
        }
        let u_robot = Control::new(action[0], action[1]);
        let log_prob = policy.log_prob(&obs, u_robot);
        let value = policy.value_net.infer(&obs)[0];

        let u_human = match human_planner.as_mut() {
            Some(planner) => {
                let plan = policy.mean_plan(x_robot, Some(x_human), world.horizon, world);
                let obs_h = HumanObservation {
                    x_human,
                    x_robot,
                    robot_plan: planner.reads_plan().then_some(plan),
                    last_robot_control,
                };
                planner.plan(&obs_h).plan.0[0]
            }
            None => Control::zero(),
        };
        let reward = env
            .reward_obj
            .value(
                x_robot,
                x_human,
                &ControlPlan(vec![u_robot]),
                &ControlPlan(vec![u_human]),
            )
            .unwrap_or(f64::NAN);

        batch.obs.push(obs);
        batch.actions.push(u_robot);
        batch.human_actions.push(u_human);
        batch.rewards.push(reward);
        batch.values.push(value);
        batch.log_probs.push(log_prob);
        batch.dones.push(t + 1 == world.episode_len);

        x_robot = step(x_robot, u_robot, world.dt, world.v_max);
        if env.human.is_some() {
            x_human = step(x_human, u_human, world.dt, world.human_v_max);
        }
        last_robot_control = Some(u_robot);
    }
}

/// Generalized advantage estimation over the batch; terminal states have no
/// bootstrap (episodes are fixed-length).
pub fn gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next_value, next_adv) = if batch.dones[t] {
            (0.0, 0.0)
        } else {
            (batch.values[t + 1], acc)
        };
        let delta = batch.rewards[t] + gamma * next_value - batch.values[t];
        acc = delta + gamma * lambda * next_adv;
        advantages[t] = acc;
    }
    let returns: Vec<f64> = advantages.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub kl_estimate: f64,
    pub clip_fraction: f64,
    pub aborted: bool,
}

/// Clipped surrogate value of one sample.
fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// The mean clipped surrogate over a batch at the given parameters,
/// together with its gradients for the mean network and log-std. Exposed
/// separately so tests can finite-difference it.
pub fn surrogate_and_grads(
    policy: &PolicyParams,
    obs: &[[f64; OBS_DIM]],
    actions: &[Control],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> (f64, Gradients, [f64; ACTION_DIM], f64) {
    let b = obs.len();
    let x = DMatrix::from_fn(OBS_DIM, b, |i, j| obs[j][i]);
    let trace = policy.mean_net.forward(&x);
    let mean = trace.output();
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut cot = DMatrix::zeros(ACTION_DIM, b);
    let mut log_std_grad = [0.0; ACTION_DIM];
    for j in 0..b {
        let a = [actions[j].accel, actions[j].yaw_rate];
        let mut logp = 0.0;
        for d in 0..ACTION_DIM {
            let sigma = policy.log_std[d].exp();
            let z = (a[d] - mean[(d, j)]) / sigma;
            logp += -0.5 * z * z - policy.log_std[d] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        let ratio = (logp - old_log_probs[j]).exp();
        let adv = advantages[j];
        surrogate += clipped_surrogate(ratio, adv, clip) / b as f64;
        // Gradient flows through the unclipped branch only where it is the
        // active minimum.
        let unclipped_active = if adv >= 0.0 { ratio <= 1.0 + clip } else { ratio >= 1.0 - clip };
        if !unclipped_active {
            clipped += 1;
            continue;
        }
        let dsurr_dlogp = ratio * adv / b as f64;
        for d in 0..ACTION_DIM {
            let sigma = policy.log_std[d].exp();
            let z = (a[d] - mean[(d, j)]) / sigma;
            // dlogp/dmean = z / sigma, dlogp/dlogstd = z^2 - 1.
            cot[(d, j)] = dsurr_dlogp * z / sigma;
            log_std_grad[d] += dsurr_dlogp * (z * z - 1.0);
        }
    }
    let (grads, _) = policy.mean_net.backward(&trace, &cot);
    (surrogate, grads, log_std_grad, clipped as f64 / b as f64)
}

struct LogStdAdam {
    m: [f64; ACTION_DIM],
    v: [f64; ACTION_DIM],
    step: usize,
}

impl LogStdAdam {
    fn update(&mut self, log_std: &mut [f64; ACTION_DIM], grad: &[f64; ACTION_DIM], lr: f64) {
        self.step += 1;
        let (b1, b2): (f64, f64) = (0.9, 0.999);
        let b1c = 1.0 - b1.powi(self.step as i32);
        let b2c = 1.0 - b2.powi(self.step as i32);
        for d in 0..ACTION_DIM {
            self.m[d] = b1 * self.m[d] + (1.0 - b1) * grad[d];
            self.v[d] = b2 * self.v[d] + (1.0 - b2) * grad[d] * grad[d];
            log_std[d] -= lr * (self.m[d] / b1c) / ((self.v[d] / b2c).sqrt() + 1e-8);
            log_std[d] = log_std[d].clamp(-5.0, 1.0);
        }
    }
}

/// One PPO update over the batch: several epochs of minibatch ascent on the
/// clipped surrogate plus value regression to the returns. A non-finite
/// loss aborts the update, keeping the previous parameters.
pub fn ppo_update(
    policy: &mut PolicyParams,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    update_idx: usize,
) -> UpdateStats {
    assert!(!batch.is_empty(), "ppo_update needs a non-empty batch");
    let (mut advantages, returns) = gae(batch, cfg.gamma, cfg.lambda);
    let mean_adv = advantages.iter().sum::<f64>() / advantages.len() as f64;
    let var =
        advantages.iter().map(|a| (a - mean_adv) * (a - mean_adv)).sum::<f64>() / advantages.len() as f64;
    if var.sqrt() > 1e-8 {
        let std = var.sqrt();
        for a in &mut advantages {
            *a = (*a - mean_adv) / std;
        }
    }

    let backup = policy.clone();
    let mut mean_adam = Adam::new(&policy.mean_net, cfg.learning_rate, 0.9, 0.999);
    let mut value_adam = Adam::new(&policy.value_net, cfg.learning_rate, 0.9, 0.999);
    let mut std_adam = LogStdAdam { m: [0.0; ACTION_DIM], v: [0.0; ACTION_DIM], step: 0 };

    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37 + update_idx as u64));
    let mut stats = UpdateStats {
        surrogate_loss: 0.0,
        value_loss: 0.0,
        kl_estimate: 0.0,
        clip_fraction: 0.0,
        aborted: false,
    };
    let mut batches_seen = 0.0;
    for _ in 0..cfg.epochs {
        // Fisher-Yates with the seeded stream keeps updates reproducible.
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut start = 0;
        while start < n {
            let end = (start + cfg.minibatch).min(n);
            let idx = &order[start..end];
            let mb_obs: Vec<[f64; OBS_DIM]> = idx.iter().map(|&i| batch.obs[i]).collect();
            let mb_act: Vec<Control> = idx.iter().map(|&i| batch.actions[i]).collect();
            let mb_old: Vec<f64> = idx.iter().map(|&i| batch.log_probs[i]).collect();
            let mb_adv: Vec<f64> = idx.iter().map(|&i| advantages[i]).collect();
            let (surr, grads, std_grad, clip_frac) =
                surrogate_and_grads(policy, &mb_obs, &mb_act, &mb_old, &mb_adv, cfg.clip);
            if !surr.is_finite() {
                *policy = backup;
                stats.aborted = true;
                return stats;
            }
            // Ascend the surrogate.
            let neg = Gradients {
                weights: grads.weights.iter().map(|g| -g).collect(),
                bias: grads.bias.iter().map(|g| -g).collect(),
            };
            mean_adam.update(&mut policy.mean_net, &neg);
            let neg_std = [-std_grad[0], -std_grad[1]];
            std_adam.update(&mut policy.log_std, &neg_std, cfg.learning_rate);

            // Value regression.
            let b = idx.len();
            let x = DMatrix::from_fn(OBS_DIM, b, |i, j| mb_obs[j][i]);
            let y = DMatrix::from_fn(1, b, |_, j| returns[idx[j]]);
            let vtrace = policy.value_net.forward(&x);
            let diff = vtrace.output() - &y;
            let value_loss = diff.iter().map(|v| v * v).sum::<f64>() / b as f64;
            if !value_loss.is_finite() {
                *policy = backup;
                stats.aborted = true;
                return stats;
            }
            let cot = diff * (2.0 / b as f64);
            let (vgrads, _) = policy.value_net.backward(&vtrace, &cot);
            value_adam.update(&mut policy.value_net, &vgrads);

            stats.surrogate_loss += -surr;
            stats.value_loss += value_loss;
            stats.clip_fraction += clip_frac;
            batches_seen += 1.0;
            start = end;
        }
    }
    stats.surrogate_loss /= batches_seen;
    stats.value_loss /= batches_seen;
    stats.clip_fraction /= batches_seen;
    // One-pass KL estimate on the whole batch.
    let mut kl = 0.0;
    for i in 0..n {
        kl += batch.log_probs[i] - policy.log_prob(&batch.obs[i], batch.actions[i]);
    }
    stats.kl_estimate = kl / n as f64;
    stats
}

/// Receding-horizon planner wrapping the deterministic policy mean, used
/// for evaluation episodes.
pub struct PolicyPlanner {
    pub policy: PolicyParams,
    pub world: WorldConfig,
}

impl RobotPlanner for PolicyPlanner {
    fn plan(&mut self, ctx: &StepContext) -> PlanOutcome {
        let plan =
            self.policy
                .mean_plan(ctx.x_robot, Some(ctx.x_human), self.world.horizon, &self.world);
        let ok = plan.to_flat().iter().all(|v| v.is_finite());
        PlanOutcome { plan, ok }
    }
    fn reset(&mut self) {}
}

/// Point on the learning curve: cumulative environment frames and the mean
/// deterministic evaluation reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub frames: usize,
    pub mean_reward: f64,
}

/// Mean reward of the deterministic (mean) policy over seeded evaluation
/// episodes.
pub fn evaluate_policy(policy: &PolicyParams, env: &PpoEnv, n_envs: usize, base_seed: u64) -> f64 {
    let mut total = 0.0;
    for i in 0..n_envs {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
        let (x_robot, x_human) = match &env.human {
            Some(_) => sample_initial_state(&mut rng, &env.world),
            None => (sample_initial_state(&mut rng, &env.world).0, env.dummy_human()),
        };
        let mut planner = PolicyPlanner { policy: policy.clone(), world: env.world };
        match &env.human {
            Some((model, theta, params)) => {
                let mut human = HumanPlanner::new(
                    *model,
                    *theta,
                    *params,
                    env.world,
                    OptimizerConfig::inner(),
                );
                let rec = run_episode(
                    &mut planner,
                    &mut human,
                    &env.reward_obj,
                    &env.world,
                    (x_robot, x_human),
                );
                total += rec.total_reward;
            }
            None => {
                let mut human = SoloHuman;
                let rec = run_episode(
                    &mut planner,
                    &mut human,
                    &env.reward_obj,
                    &env.world,
                    (x_robot, x_human),
                );
                total += rec.total_reward;
            }
        }
    }
    total / n_envs as f64
}

/// Inert stand-in for the solo environment.
struct SoloHuman;

impl HumanSimulator for SoloHuman {
    fn plan(&mut self, obs: &HumanObservation) -> PlanOutcome {
        let _ = obs;
        PlanOutcome { plan: ControlPlan::zeros(1), ok: true }
    }
    fn reset(&mut self) {}
    fn reads_plan(&self) -> bool {
        false
    }
}

/// Train until the frame budget is exhausted, evaluating the deterministic
/// policy periodically. Returns the final parameters and the learning curve.
pub fn train_modelfree(env: &PpoEnv, cfg: &PpoConfig) -> Result<(PolicyParams, Vec<CurvePoint>)> {
    cfg.validate()?;
    if cfg.total_frames < cfg.batch_frames {
        return Err(Error::Config(format!(
            "frame budget {} is below one batch of {}",
            cfg.total_frames, cfg.batch_frames
        )));
    }
    let mut policy = PolicyParams::new(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let eval_seed = cfg.seed.wrapping_add(0xe7a1);
    let mut frames = 0usize;
    let mut curve = vec![CurvePoint {
        frames: 0,
        mean_reward: evaluate_policy(&policy, env, cfg.eval_envs, eval_seed),
    }];
    let mut update_idx = 0;
    while frames < cfg.total_frames {
        let batch = collect_rollouts(&policy, env, cfg.batch_frames, &mut rng);
        frames += batch.len();
        ppo_update(&mut policy, &batch, cfg, update_idx);
        update_idx += 1;
        if update_idx % cfg.eval_every == 0 || frames >= cfg.total_frames {
            curve.push(CurvePoint {
                frames,
                mean_reward: evaluate_policy(&policy, env, cfg.eval_envs, eval_seed),
            });
        }
    }
    Ok((policy, curve))
}
