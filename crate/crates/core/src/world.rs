//! Car kinematics, road geometry, episode rollout, and initial-state sampling.
//!
//! The dynamics are a forward-Euler unicycle: position advances with the
//! pre-update speed and heading, then speed and heading are updated from the
//! control. Speed is clamped to `[0, v_max]`. Heading 0 points along +y
//! (forward progress); positive heading turns toward +x (road right).

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Kinematic state of one car: lateral position, longitudinal position,
/// speed, heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub heading: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, heading: f64) -> Self {
        Self { x, y, v, heading }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.heading.is_finite()
    }
}

/// One control: linear acceleration and yaw rate. Bounds are soft costs,
/// not hard limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Control {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    pub fn zero() -> Self {
        Self { accel: 0.0, yaw_rate: 0.0 }
    }
}

/// A finite-horizon control sequence. Planners use length T (default 5);
/// the myopic human plans with length 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan(pub Vec<Control>);

impl ControlPlan {
    pub fn zeros(horizon: usize) -> Self {
        Self(vec![Control::zero(); horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Flatten to `[a0, w0, a1, w1, ...]` for the optimizer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.0.len());
        for u in &self.0 {
            out.push(u.accel);
            out.push(u.yaw_rate);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 2 == 0, "flat control vector must have even length");
        Self(
            flat
                .chunks_exact(2)
                .map(|c| Control::new(c[0], c[1]))
                .collect(),
        )
    }

    /// Receding-horizon warm start: drop the first control, repeat the last.
    pub fn shifted(&self) -> Self {
        if self.0.is_empty() {
            return self.clone();
        }
        let mut v: Vec<Control> = self.0[1..].to_vec();
        v.push(*self.0.last().unwrap());
        Self(v)
    }
}

/// Lane layout of a straight multi-lane road. Lateral coordinates grow
/// toward the road's right edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub num_lanes: usize,
    pub lane_width: f64,
    pub left_edge: f64,
    pub right_edge: f64,
}

impl RoadGeometry {
    /// A road centered on x = 0 with `num_lanes` lanes of `lane_width`.
    pub fn centered(num_lanes: usize, lane_width: f64) -> Self {
        let half = 0.5 * num_lanes as f64 * lane_width;
        Self { num_lanes, lane_width, left_edge: -half, right_edge: half }
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        self.left_edge + (lane as f64 + 0.5) * self.lane_width
    }

    /// Index of the lane containing `x`; off-road positions clamp to the
    /// nearest lane.
    pub fn lane_index(&self, x: f64) -> usize {
        let raw = (x - self.left_edge) / self.lane_width;
        (raw.floor() as i64).clamp(0, self.num_lanes as i64 - 1) as usize
    }

    /// Left and right edge of the given lane.
    pub fn lane_edges(&self, lane: usize) -> (f64, f64) {
        let l = self.left_edge + lane as f64 * self.lane_width;
        (l, l + self.lane_width)
    }
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self::centered(3, 1.0)
    }
}

/// World constants and the initial-state distribution. Units are
/// normalized: car_length = lane_width = 1, dt = 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dt: f64,
    pub episode_len: usize,
    /// Planning horizon T.
    pub horizon: usize,
    pub v_max: f64,
    /// Speed cap of the human car, below the robot's so an overtake is
    /// physically possible.
    pub human_v_max: f64,
    pub car_length: f64,
    pub road: RoadGeometry,
    /// Reference cruising speed for initial draws.
    pub v_ref: f64,
    /// Initial gap between robot and human, in car lengths.
    pub gap_range: (f64, f64),
    /// Initial speed factor range, times v_ref.
    pub speed_range: (f64, f64),
    /// Initial lateral offset range, times lane_width.
    pub lateral_jitter: (f64, f64),
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.4,
            episode_len: 20,
            horizon: 5,
            v_max: 3.0,
            human_v_max: 1.8,
            car_length: 1.0,
            road: RoadGeometry::default(),
            v_ref: 1.0,
            gap_range: (1.5, 3.0),
            speed_range: (0.8, 1.2),
            lateral_jitter: (-0.05, 0.05),
        }
    }
}

/// One forward-Euler step. Position advances with the pre-update speed and
/// heading; speed is clamped to `[0, v_max]`.
pub fn step(s: AgentState, u: Control, dt: f64, v_max: f64) -> AgentState {
    AgentState {
        x: s.x + s.v * s.heading.sin() * dt,
        y: s.y + s.v * s.heading.cos() * dt,
        v: (s.v + u.accel * dt).clamp(0.0, v_max),
        heading: s.heading + u.yaw_rate * dt,
    }
}

/// Jacobians of `step` with respect to state and control, row-major over
/// (x, y, v, heading). The speed clamp contributes sub-gradient 0 when
/// active.
pub fn step_jacobians(s: AgentState, u: Control, dt: f64, v_max: f64) -> ([[f64; 4]; 4], [[f64; 2]; 4]) {
    let (sa, ca) = s.heading.sin_cos();
    let v_next = s.v + u.accel * dt;
    let clamped = !(v_next > 0.0 && v_next < v_max);
    let dv = if clamped { 0.0 } else { 1.0 };
    let a_mat = [
        [1.0, 0.0, sa * dt, s.v * ca * dt],
        [0.0, 1.0, ca * dt, -s.v * sa * dt],
        [0.0, 0.0, dv, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let b_mat = [
        [0.0, 0.0],
        [0.0, 0.0],
        [dv * dt, 0.0],
        [0.0, dt],
    ];
    (a_mat, b_mat)
}

/// Roll a plan out from `s0`; the result has `plan.len() + 1` states and
/// starts with `s0`.
pub fn rollout(s0: AgentState, plan: &ControlPlan, dt: f64, v_max: f64) -> Vec<AgentState> {
    let mut states = Vec::with_capacity(plan.len() + 1);
    states.push(s0);
    let mut s = s0;
    for u in &plan.0 {
        s = step(s, *u, dt, v_max);
        states.push(s);
    }
    states
}

/// Draw a (robot, human) initial pair: human at a random lane center, robot
/// behind in the same lane, both near v_ref, headings 0.
pub fn sample_initial_state<R: Rng>(rng: &mut R, cfg: &WorldConfig) -> (AgentState, AgentState) {
    let lane = rng.gen_range(0..cfg.road.num_lanes);
    let center = cfg.road.lane_center(lane);
    let jitter = |rng: &mut R| {
        rng.gen_range(cfg.lateral_jitter.0..=cfg.lateral_jitter.1) * cfg.road.lane_width
    };
    let human_x = center + jitter(rng);
    let robot_x = center + jitter(rng);
    let gap = rng.gen_range(cfg.gap_range.0..=cfg.gap_range.1) * cfg.car_length;
    let human_v = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1) * cfg.v_ref;
    let robot_v = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1) * cfg.v_ref;
    let human = AgentState::new(human_x, gap, human_v, 0.0);
    let robot = AgentState::new(robot_x, 0.0, robot_v, 0.0);
    (robot, human)
}
