//! The five-feature reward map, cumulative rewards over a horizon, and their
//! analytic gradients with respect to both agents' control sequences.
//!
//! All five features are costs; ground-truth weights are negative on every
//! component. Gaussians are unnormalized exponentials (normalization is
//! absorbed into the weights). The bounded-control feature uses a smoothed
//! absolute value so the objective stays differentiable at zero control,
//! where the soft penalty has its minimum.
//!
//! Gradients are hand-derived reverse-mode: a forward rollout of both agents
//! stores states, then adjoints run backward through the step Jacobians and
//! per-step feature partials. A finite-difference oracle in the tests checks
//! every path.

use serde::{Deserialize, Serialize};

use crate::world::{rollout, step_jacobians, AgentState, Control, ControlPlan, RoadGeometry};
use crate::{Error, Result};

pub const F_CAR: usize = 0;
pub const F_LANE: usize = 1;
pub const F_PROGRESS: usize = 2;
pub const F_BOUNDED: usize = 3;
pub const F_OFFROAD: usize = 4;
pub const NUM_FEATURES: usize = 5;

/// Reward weights over (car_proximity, lane_edge, forward_progress,
/// bounded_control, offroad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub [f64; NUM_FEATURES]);

impl RewardWeights {
    /// Weights of the ground-truth human, tuned so the simulated human keeps
    /// its lane, avoids the other car, and makes steady forward progress.
    pub fn ground_truth() -> Self {
        Self([-60.0, -12.0, -2.0, -10.0, -5.0])
    }

    pub fn zeros() -> Self {
        Self([0.0; NUM_FEATURES])
    }

    pub fn dot(&self, f: &FeatureVector) -> f64 {
        self.0.iter().zip(f.0.iter()).map(|(t, x)| t * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    /// Unit-norm copy with the sign fixed so the car-proximity weight is
    /// negative. Zero weights are returned unchanged.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return *self;
        }
        let sign = if self.0[F_CAR] > 0.0 { -1.0 } else { 1.0 };
        let mut out = self.0;
        for t in &mut out {
            *t *= sign / n;
        }
        Self(out)
    }

    pub fn cosine(&self, other: &RewardWeights) -> f64 {
        let d: f64 = self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum();
        let n = self.norm() * other.norm();
        if n == 0.0 {
            0.0
        } else {
            d / n
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.0;
        for t in &mut out {
            *t *= c;
        }
        Self(out)
    }
}

/// The robot's reward: same weights as the human with the forward-progress
/// component multiplied by 10.
pub fn robot_weights(human_weights: &RewardWeights) -> RewardWeights {
    let mut w = human_weights.0;
    w[F_PROGRESS] *= 10.0;
    RewardWeights(w)
}

/// Scale and shape parameters of the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub sigma_car: f64,
    pub sigma_lane: f64,
    pub a_max: f64,
    pub omega_max: f64,
    /// Sharpness scale of the offroad exponential walls.
    pub offroad_sharpness: f64,
    /// Smoothing half-width of the |.| in the bounded-control feature.
    pub abs_smoothing: f64,
    /// Lateral/longitudinal sigmas of the nonisotropic proximity variant.
    pub noniso_sigma_lat: f64,
    pub noniso_sigma_lon: f64,
    /// Blindspot cost points in the acting agent's body frame,
    /// (lateral, longitudinal) in car lengths.
    pub blindspot_offsets: [(f64, f64); 2],
    pub sigma_blind: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        let sigma_car = 0.5;
        Self {
            sigma_car,
            sigma_lane: 0.25,
            a_max: 1.5,
            omega_max: std::f64::consts::FRAC_PI_4,
            offroad_sharpness: 0.1,
            abs_smoothing: 5e-3,
            noniso_sigma_lat: sigma_car,
            noniso_sigma_lon: 2.0 * sigma_car,
            blindspot_offsets: [(-0.7, -1.0), (0.7, -1.0)],
            sigma_blind: 0.5,
        }
    }
}

/// Five feature values in the RewardWeights order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

fn soft_abs(z: f64, eps: f64) -> f64 {
    (z * z + eps * eps).sqrt() - eps
}

fn soft_abs_grad(z: f64, eps: f64) -> f64 {
    z / (z * z + eps * eps).sqrt()
}

/// Gaussian proximity cost between two positions: exp(-d^2 / (2 sigma^2)).
pub fn feat_car_proximity(p_self: (f64, f64), p_other: (f64, f64), sigma_car: f64) -> f64 {
    let dx = p_other.0 - p_self.0;
    let dy = p_other.1 - p_self.1;
    (-(dx * dx + dy * dy) / (2.0 * sigma_car * sigma_car)).exp()
}

/// Gaussian cost toward the edges of the lane containing `x` (nearest lane
/// if off-road).
pub fn feat_lane_edge(x: f64, road: &RoadGeometry, sigma_lane: f64) -> f64 {
    let (l, r) = road.lane_edges(road.lane_index(x));
    lane_edge_for_edges(x, l, r, sigma_lane)
}

fn lane_edge_for_edges(x: f64, l: f64, r: f64, sigma: f64) -> f64 {
    let s2 = 2.0 * sigma * sigma;
    (-(x - l) * (x - l) / s2).exp() + (-(x - r) * (x - r) / s2).exp()
}

/// Negated longitudinal advance over one step.
pub fn feat_progress(y_t: f64, y_next: f64) -> f64 {
    -(y_next - y_t)
}

/// Soft actuator-limit cost, symmetric in the sign of each control.
pub fn feat_bounded_control(u: Control, a_max: f64, omega_max: f64, abs_smoothing: f64) -> f64 {
    (soft_abs(u.accel, abs_smoothing) - a_max).exp()
        + (soft_abs(u.yaw_rate, abs_smoothing) - omega_max).exp()
}

/// Exponential walls at the road edges, growing when leaving the road.
pub fn feat_offroad(x: f64, road: &RoadGeometry, sharpness: f64) -> f64 {
    offroad_for_edges(x, road.left_edge, road.right_edge, sharpness)
}

fn offroad_for_edges(x: f64, e_left: f64, e_right: f64, w: f64) -> f64 {
    ((e_left - x) / w).exp() + ((x - e_right) / w).exp()
}

/// Stack the five features for the acting agent. Proximity is measured
/// against the other car, lane/offroad/progress on the acting agent's own
/// state, bounded control on its own action; progress uses the post-step y.
/// The other agent's control does not enter any feature.
pub fn feature_vector(
    x_self: AgentState,
    x_other: AgentState,
    u_self: Control,
    _u_other: Control,
    params: &FeatureParams,
    road: &RoadGeometry,
    dt: f64,
) -> FeatureVector {
    let y_next = x_self.y + x_self.v * x_self.heading.cos() * dt;
    FeatureVector([
        feat_car_proximity(x_self.position(), x_other.position(), params.sigma_car),
        feat_lane_edge(x_self.x, road, params.sigma_lane),
        feat_progress(x_self.y, y_next),
        feat_bounded_control(u_self, params.a_max, params.omega_max, params.abs_smoothing),
        feat_offroad(x_self.x, road, params.offroad_sharpness),
    ])
}

/// How the acting agent's proximity cost sees the other car.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProximityMode {
    Isotropic,
    /// Elongated cost contours, separate lateral/longitudinal sigmas.
    Nonisotropic,
    /// The other car is invisible: the proximity feature reads zero.
    Ignore,
}

/// Which edges the lane-edge and offroad features are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaneReference {
    /// Lane edges from the lane currently containing the agent; offroad from
    /// the road edges.
    OwnLane,
    /// Both features recentered on one fixed lane, walling the agent into it.
    FixedLane(usize),
}

/// A cumulative two-agent reward over a finite horizon, differentiable with
/// respect to both control sequences. The variant switches cover every
/// mutated human objective; the robot always uses the default settings.
#[derive(Debug, Clone)]
pub struct JointObjective {
    pub theta: RewardWeights,
    pub params: FeatureParams,
    pub road: RoadGeometry,
    pub dt: f64,
    /// Speed caps of the acting agent and the other agent's rollouts.
    pub v_max_self: f64,
    pub v_max_other: f64,
    pub proximity: ProximityMode,
    pub lane_ref: LaneReference,
    /// Adds two Gaussian cost points behind the acting agent's shoulders,
    /// each weighted by half the car-proximity weight.
    pub blindspot: bool,
}

impl JointObjective {
    pub fn new(
        theta: RewardWeights,
        params: FeatureParams,
        road: RoadGeometry,
        dt: f64,
        v_max: f64,
    ) -> Self {
        Self::with_caps(theta, params, road, dt, v_max, v_max)
    }

    pub fn with_caps(
        theta: RewardWeights,
        params: FeatureParams,
        road: RoadGeometry,
        dt: f64,
        v_max_self: f64,
        v_max_other: f64,
    ) -> Self {
        Self {
            theta,
            params,
            road,
            dt,
            v_max_self,
            v_max_other,
            proximity: ProximityMode::Isotropic,
            lane_ref: LaneReference::OwnLane,
            blindspot: false,
        }
    }

    fn reference_edges(&self, x: f64) -> (f64, f64, f64, f64) {
        match self.lane_ref {
            LaneReference::OwnLane => {
                let (l, r) = self.road.lane_edges(self.road.lane_index(x));
                (l, r, self.road.left_edge, self.road.right_edge)
            }
            LaneReference::FixedLane(i) => {
                let (l, r) = self.road.lane_edges(i);
                (l, r, l, r)
            }
        }
    }

    /// Reward of one step for the acting agent, before weighting by time.
    fn step_reward(&self, s: AgentState, o: AgentState, u: Control) -> f64 {
        let p = &self.params;
        let th = &self.theta.0;
        let prox = match self.proximity {
            ProximityMode::Isotropic => {
                feat_car_proximity(s.position(), o.position(), p.sigma_car)
            }
            ProximityMode::Nonisotropic => {
                let dx = o.x - s.x;
                let dy = o.y - s.y;
                (-(dx * dx / (2.0 * p.noniso_sigma_lat * p.noniso_sigma_lat)
                    + dy * dy / (2.0 * p.noniso_sigma_lon * p.noniso_sigma_lon)))
                    .exp()
            }
            ProximityMode::Ignore => 0.0,
        };
        let (lane_l, lane_r, off_l, off_r) = self.reference_edges(s.x);
        let lane = lane_edge_for_edges(s.x, lane_l, lane_r, p.sigma_lane);
        let progress = -s.v * s.heading.cos() * self.dt;
        let bounded = feat_bounded_control(u, p.a_max, p.omega_max, p.abs_smoothing);
        let offroad = offroad_for_edges(s.x, off_l, off_r, p.offroad_sharpness);
        let mut r = th[F_CAR] * prox
            + th[F_LANE] * lane
            + th[F_PROGRESS] * progress
            + th[F_BOUNDED] * bounded
            + th[F_OFFROAD] * offroad;
        if self.blindspot {
            r += 0.5 * th[F_CAR] * self.blindspot_cost(s, o).0;
        }
        r
    }

    /// Blindspot cost and its partials wrt (self x, y, heading) and
    /// (other x, y).
    fn blindspot_cost(&self, s: AgentState, o: AgentState) -> (f64, [f64; 3], [f64; 2]) {
        let p = &self.params;
        let s2 = p.sigma_blind * p.sigma_blind;
        let (sa, ca) = s.heading.sin_cos();
        let mut val = 0.0;
        let mut d_self = [0.0; 3];
        let mut d_other = [0.0; 2];
        for (lat, lon) in p.blindspot_offsets {
            let bx = s.x + lat * ca + lon * sa;
            let by = s.y - lat * sa + lon * ca;
            let dx = o.x - bx;
            let dy = o.y - by;
            let g = (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            val += g;
            d_self[0] += g * dx / s2;
            d_self[1] += g * dy / s2;
            let dbx_da = -lat * sa + lon * ca;
            let dby_da = -lat * ca - lon * sa;
            d_self[2] += g * (dx * dbx_da + dy * dby_da) / s2;
            d_other[0] += -g * dx / s2;
            d_other[1] += -g * dy / s2;
        }
        (val, d_self, d_other)
    }

    /// One step's reward and partials wrt the acting agent's state (x, y, v,
    /// heading), the other agent's state, and the acting agent's control.
    fn step_reward_partials(
        &self,
        s: AgentState,
        o: AgentState,
        u: Control,
    ) -> (f64, [f64; 4], [f64; 4], [f64; 2]) {
        let p = &self.params;
        let th = &self.theta.0;
        let mut ds = [0.0; 4];
        let mut do_ = [0.0; 4];
        let mut du = [0.0; 2];
        let mut r = 0.0;

        match self.proximity {
            ProximityMode::Isotropic | ProximityMode::Nonisotropic => {
                let (s2x, s2y) = match self.proximity {
                    ProximityMode::Isotropic => {
                        let s2 = p.sigma_car * p.sigma_car;
                        (s2, s2)
                    }
                    _ => (
                        p.noniso_sigma_lat * p.noniso_sigma_lat,
                        p.noniso_sigma_lon * p.noniso_sigma_lon,
                    ),
                };
                let dx = o.x - s.x;
                let dy = o.y - s.y;
                let f = (-(dx * dx / (2.0 * s2x) + dy * dy / (2.0 * s2y))).exp();
                r += th[F_CAR] * f;
                ds[0] += th[F_CAR] * f * dx / s2x;
                ds[1] += th[F_CAR] * f * dy / s2y;
                do_[0] += -th[F_CAR] * f * dx / s2x;
                do_[1] += -th[F_CAR] * f * dy / s2y;
            }
            ProximityMode::Ignore => {}
        }

        let (lane_l, lane_r, off_l, off_r) = self.reference_edges(s.x);
        let sl2 = 2.0 * p.sigma_lane * p.sigma_lane;
        let e1 = (-(s.x - lane_l) * (s.x - lane_l) / sl2).exp();
        let e2 = (-(s.x - lane_r) * (s.x - lane_r) / sl2).exp();
        r += th[F_LANE] * (e1 + e2);
        ds[0] += th[F_LANE]
            * (-e1 * 2.0 * (s.x - lane_l) / sl2 - e2 * 2.0 * (s.x - lane_r) / sl2);

        let (sa, ca) = s.heading.sin_cos();
        r += th[F_PROGRESS] * (-s.v * ca * self.dt);
        ds[2] += th[F_PROGRESS] * (-ca * self.dt);
        ds[3] += th[F_PROGRESS] * (s.v * sa * self.dt);

        let ga = (soft_abs(u.accel, p.abs_smoothing) - p.a_max).exp();
        let gw = (soft_abs(u.yaw_rate, p.abs_smoothing) - p.omega_max).exp();
        r += th[F_BOUNDED] * (ga + gw);
        du[0] += th[F_BOUNDED] * ga * soft_abs_grad(u.accel, p.abs_smoothing);
        du[1] += th[F_BOUNDED] * gw * soft_abs_grad(u.yaw_rate, p.abs_smoothing);

        let w = p.offroad_sharpness;
        let ol = ((off_l - s.x) / w).exp();
        let or = ((s.x - off_r) / w).exp();
        r += th[F_OFFROAD] * (ol + or);
        ds[0] += th[F_OFFROAD] * (-ol / w + or / w);

        if self.blindspot {
            let (val, d_self, d_other) = self.blindspot_cost(s, o);
            let w_b = 0.5 * th[F_CAR];
            r += w_b * val;
            ds[0] += w_b * d_self[0];
            ds[1] += w_b * d_self[1];
            ds[3] += w_b * d_self[2];
            do_[0] += w_b * d_other[0];
            do_[1] += w_b * d_other[1];
        }

        (r, ds, do_, du)
    }

    /// Cumulative reward of the acting agent over the joint rollout of both
    /// plans. Plans must have equal length.
    pub fn value(
        &self,
        x_self: AgentState,
        x_other: AgentState,
        plan_self: &ControlPlan,
        plan_other: &ControlPlan,
    ) -> Result<f64> {
        if plan_self.len() != plan_other.len() {
            return Err(Error::PlanLengthMismatch {
                self_len: plan_self.len(),
                other_len: plan_other.len(),
            });
        }
        let tr_s = rollout(x_self, plan_self, self.dt, self.v_max_self);
        let tr_o = rollout(x_other, plan_other, self.dt, self.v_max_other);
        let mut total = 0.0;
        for t in 0..plan_self.len() {
            total += self.step_reward(tr_s[t], tr_o[t], plan_self.0[t]);
        }
        Ok(total)
    }

    /// Cumulative reward plus gradients with respect to both flattened
    /// control sequences, via reverse-mode adjoints through the rollout.
    pub fn value_and_grads(
        &self,
        x_self: AgentState,
        x_other: AgentState,
        plan_self: &ControlPlan,
        plan_other: &ControlPlan,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if plan_self.len() != plan_other.len() {
            return Err(Error::PlanLengthMismatch {
                self_len: plan_self.len(),
                other_len: plan_other.len(),
            });
        }
        let horizon = plan_self.len();
        let tr_s = rollout(x_self, plan_self, self.dt, self.v_max_self);
        let tr_o = rollout(x_other, plan_other, self.dt, self.v_max_other);

        let mut total = 0.0;
        let mut grad_self = vec![0.0; 2 * horizon];
        let mut grad_other = vec![0.0; 2 * horizon];
        // lam_* hold the gradient of the remaining reward wrt state t+1.
        let mut lam_s = [0.0; 4];
        let mut lam_o = [0.0; 4];

        for t in (0..horizon).rev() {
            let u_s = plan_self.0[t];
            let u_o = plan_other.0[t];
            let (r, dr_ds, dr_do, dr_du) = self.step_reward_partials(tr_s[t], tr_o[t], u_s);
            total += r;

            let (a_s, b_s) = step_jacobians(tr_s[t], u_s, self.dt, self.v_max_self);
            let (a_o, b_o) = step_jacobians(tr_o[t], u_o, self.dt, self.v_max_other);

            for j in 0..2 {
                let mut g = 0.0;
                for i in 0..4 {
                    g += b_s[i][j] * lam_s[i];
                }
                grad_self[2 * t + j] = dr_du[j] + g;
                let mut go = 0.0;
                for i in 0..4 {
                    go += b_o[i][j] * lam_o[i];
                }
                grad_other[2 * t + j] = go;
            }

            let mut new_lam_s = [0.0; 4];
            let mut new_lam_o = [0.0; 4];
            for j in 0..4 {
                let mut acc = dr_ds[j];
                for i in 0..4 {
                    acc += a_s[i][j] * lam_s[i];
                }
                new_lam_s[j] = acc;
                let mut acc_o = dr_do[j];
                for i in 0..4 {
                    acc_o += a_o[i][j] * lam_o[i];
                }
                new_lam_o[j] = acc_o;
            }
            lam_s = new_lam_s;
            lam_o = new_lam_o;
        }
        Ok((total, grad_self, grad_other))
    }
}

/// Sum of per-step rewards `theta . phi` over the joint rollout of both
/// plans, from the acting ("self") agent's perspective.
pub fn cumulative_reward(
    theta: &RewardWeights,
    x_self: AgentState,
    x_other: AgentState,
    plan_self: &ControlPlan,
    plan_other: &ControlPlan,
    params: &FeatureParams,
    road: &RoadGeometry,
    dt: f64,
    v_max: f64,
) -> Result<f64> {
    JointObjective::new(*theta, *params, *road, dt, v_max).value(
        x_self, x_other, plan_self, plan_other,
    )
}
