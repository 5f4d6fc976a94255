//! The ground-truth human simulator and its seven behavioral modifications,
//! behind one receding-horizon planning interface.
//!
//! The ground truth best-responds to the robot's plan over the full horizon.
//! Each modification changes exactly one ingredient: the field of view
//! (obstructed-view), plan access (lane-prediction), the horizon (myopic),
//! the proximity contours (nonisotropic), the control bounds
//! (bounded-controls), an extra pair of cost points (blindspot-protective),
//! or a braking heuristic on top of halved bounds (panicking).

use serde::{Deserialize, Serialize};

use crate::rewards::{FeatureParams, JointObjective, LaneReference, ProximityMode, RewardWeights};
use crate::trajopt::{best_response, HumanObservation, HumanSimulator, OptimizerConfig, PlanOutcome};
use crate::world::{AgentState, Control, ControlPlan, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HumanVariant {
    GroundTruth,
    ObstructedView,
    LanePrediction,
    Myopic,
    NonisotropicDistance,
    BoundedControls,
    BlindspotProtective,
    Panicking,
}

impl HumanVariant {
    pub const ALL: [HumanVariant; 8] = [
        HumanVariant::GroundTruth,
        HumanVariant::ObstructedView,
        HumanVariant::LanePrediction,
        HumanVariant::Myopic,
        HumanVariant::NonisotropicDistance,
        HumanVariant::BoundedControls,
        HumanVariant::BlindspotProtective,
        HumanVariant::Panicking,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            HumanVariant::GroundTruth => "ground_truth",
            HumanVariant::ObstructedView => "obstructed_view",
            HumanVariant::LanePrediction => "lane_prediction",
            HumanVariant::Myopic => "myopic",
            HumanVariant::NonisotropicDistance => "nonisotropic",
            HumanVariant::BoundedControls => "bounded_controls",
            HumanVariant::BlindspotProtective => "blindspot_protective",
            HumanVariant::Panicking => "panicking",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.key() == key)
    }
}

/// A human simulator selection plus its variant-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanModel {
    pub variant: HumanVariant,
    /// Half-angle of the visibility double-cone (vertex angle 45 degrees).
    pub cone_half_angle: f64,
    /// Minimum robot heading magnitude that reads as "angling toward my
    /// lane" (strict inequality).
    pub swerve_threshold: f64,
    /// Longitudinal trigger range of the swerve heuristic, in car lengths.
    pub swerve_range: f64,
    /// Panic trigger distance behind the human, in car lengths.
    pub panic_distance: f64,
}

impl HumanModel {
    pub fn new(variant: HumanVariant) -> Self {
        Self {
            variant,
            cone_half_angle: 22.5f64.to_radians(),
            swerve_threshold: 0.05,
            swerve_range: 5.0,
            panic_distance: 2.0,
        }
    }

    /// Whether this variant observes the robot's plan.
    pub fn reads_plan(&self) -> bool {
        self.variant != HumanVariant::LanePrediction
    }
}

/// True iff the robot falls inside the human's visibility double-cone, a
/// pair of cones along +/- heading with the given half-angle. Coincident
/// positions count as visible.
pub fn visible(x_h: AgentState, x_r: AgentState, cone_half_angle: f64) -> bool {
    let dx = x_r.x - x_h.x;
    let dy = x_r.y - x_h.y;
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 {
        return true;
    }
    let (sa, ca) = x_h.heading.sin_cos();
    let cos_angle = ((dx * sa + dy * ca) / norm).abs().clamp(0.0, 1.0);
    cos_angle.acos() <= cone_half_angle + 1e-12
}

/// True iff the robot is less than `panic_distance` car lengths behind the
/// human and laterally within one lane width (the same-lane qualifier).
pub fn panic_triggered(
    x_h: AgentState,
    x_r: AgentState,
    car_length: f64,
    lane_width: f64,
    panic_distance: f64,
) -> bool {
    x_r.y < x_h.y
        && (x_h.y - x_r.y) < panic_distance * car_length
        && (x_r.x - x_h.x).abs() < lane_width
}

/// Receding-horizon human planner: solves the variant's objective each step,
/// warm-started from the previous plan shifted by one.
pub struct HumanPlanner {
    pub model: HumanModel,
    pub theta_star: RewardWeights,
    pub params: FeatureParams,
    pub world: WorldConfig,
    pub cfg: OptimizerConfig,
    warm: Option<ControlPlan>,
}

impl HumanPlanner {
    pub fn new(
        model: HumanModel,
        theta_star: RewardWeights,
        params: FeatureParams,
        world: WorldConfig,
        cfg: OptimizerConfig,
    ) -> Self {
        Self { model, theta_star, params, world, cfg, warm: None }
    }

    fn objective(&self, params: FeatureParams) -> JointObjective {
        JointObjective::with_caps(
            self.theta_star,
            params,
            self.world.road,
            self.world.dt,
            self.world.human_v_max,
            self.world.v_max,
        )
    }

    fn halved_params(&self) -> FeatureParams {
        FeatureParams {
            a_max: self.params.a_max / 2.0,
            omega_max: self.params.omega_max / 2.0,
            ..self.params
        }
    }

    fn horizon(&self) -> usize {
        if self.model.variant == HumanVariant::Myopic {
            1
        } else {
            self.world.horizon
        }
    }

    fn robot_plan_from_obs(&self, obs: &HumanObservation) -> ControlPlan {
        let horizon = self.horizon();
        match (&obs.robot_plan, self.model.variant) {
            (_, HumanVariant::LanePrediction) => {
                // No plan access: extrapolate the last executed robot control.
                let u = obs.last_robot_control.unwrap_or(Control::zero());
                ControlPlan(vec![u; horizon])
            }
            (Some(p), _) => {
                if p.len() >= horizon {
                    ControlPlan(p.0[..horizon].to_vec())
                } else {
                    let mut v = p.0.clone();
                    let last = v.last().copied().unwrap_or(Control::zero());
                    v.resize(horizon, last);
                    ControlPlan(v)
                }
            }
            (None, _) => ControlPlan::zeros(horizon),
        }
    }

    fn warm_init(&self, horizon: usize) -> Option<ControlPlan> {
        self.warm
            .as_ref()
            .filter(|w| w.len() == horizon)
            .map(|w| w.shifted())
    }

    /// Lane the swerve heuristic retreats to, if the robot triggers it.
    fn swerve_target(&self, obs: &HumanObservation) -> Option<usize> {
        let road = &self.world.road;
        let human_lane = road.lane_index(obs.x_human.x);
        let robot_lane = road.lane_index(obs.x_robot.x);
        if robot_lane == human_lane {
            return None;
        }
        if (obs.x_robot.y - obs.x_human.y).abs() >= self.model.swerve_range * self.world.car_length {
            return None;
        }
        let toward = road.lane_center(human_lane) - obs.x_robot.x;
        if obs.x_robot.heading.abs() <= self.model.swerve_threshold
            || obs.x_robot.heading * toward <= 0.0
        {
            return None;
        }
        // Retreat one lane away from the robot's side, if that lane exists.
        let target = if obs.x_robot.x < obs.x_human.x {
            human_lane + 1
        } else if human_lane > 0 {
            human_lane - 1
        } else {
            return None;
        };
        (target < road.num_lanes).then_some(target)
    }

    /// Plan for the current observation; `solve` outcomes carry the best
    /// iterate even when the solver did not converge.
    pub fn plan_for(&mut self, obs: &HumanObservation) -> (ControlPlan, bool) {
        let horizon = self.horizon();
        let robot_plan = self.robot_plan_from_obs(obs);
        let init = self.warm_init(horizon);

        let (objective, scripted): (JointObjective, Option<ControlPlan>) = match self.model.variant {
            HumanVariant::GroundTruth | HumanVariant::Myopic => (self.objective(self.params), None),
            HumanVariant::ObstructedView => {
                let mut obj = self.objective(self.params);
                if !visible(obs.x_human, obs.x_robot, self.model.cone_half_angle) {
                    obj.proximity = ProximityMode::Ignore;
                }
                (obj, None)
            }
            HumanVariant::LanePrediction => {
                let mut obj = self.objective(self.params);
                if let Some(target) = self.swerve_target(obs) {
                    obj.lane_ref = LaneReference::FixedLane(target);
                }
                (obj, None)
            }
            HumanVariant::NonisotropicDistance => {
                let mut obj = self.objective(self.params);
                obj.proximity = ProximityMode::Nonisotropic;
                (obj, None)
            }
            HumanVariant::BoundedControls => (self.objective(self.halved_params()), None),
            HumanVariant::BlindspotProtective => {
                let mut obj = self.objective(self.params);
                obj.blindspot = true;
                (obj, None)
            }
            HumanVariant::Panicking => {
                let triggered = panic_triggered(
                    obs.x_human,
                    obs.x_robot,
                    self.world.car_length,
                    self.world.road.lane_width,
                    self.model.panic_distance,
                );
                if triggered {
                    // Brake to a stop under the halved bound, never reversing.
                    let a = -(self.params.a_max / 2.0).min(obs.x_human.v / self.world.dt);
                    (self.objective(self.halved_params()), Some(ControlPlan(vec![Control::new(a, 0.0); horizon])))
                } else {
                    (self.objective(self.halved_params()), None)
                }
            }
        };

        if let Some(plan) = scripted {
            self.warm = Some(plan.clone());
            return (plan, true);
        }

        let result = best_response(
            &objective,
            obs.x_human,
            obs.x_robot,
            &robot_plan,
            init.as_ref(),
            &self.cfg,
        );
        self.warm = Some(result.plan.clone());
        (result.plan, result.converged)
    }

    /// First action of the freshly solved plan.
    pub fn step_for(&mut self, obs: &HumanObservation) -> Control {
        self.plan_for(obs).0 .0[0]
    }
}

impl HumanSimulator for HumanPlanner {
    fn plan(&mut self, obs: &HumanObservation) -> PlanOutcome {
        let (plan, ok) = self.plan_for(obs);
        PlanOutcome { plan, ok }
    }

    fn reset(&mut self) {
        self.warm = None;
    }

    fn reads_plan(&self) -> bool {
        self.model.reads_plan()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::RoadGeometry;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    fn planner(variant: HumanVariant) -> HumanPlanner {
        HumanPlanner::new(
            HumanModel::new(variant),
            RewardWeights::ground_truth(),
            FeatureParams::default(),
            world(),
            OptimizerConfig::inner(),
        )
    }

    fn obs(x_h: AgentState, x_r: AgentState, robot_plan: Option<ControlPlan>) -> HumanObservation {
        HumanObservation { x_human: x_h, x_robot: x_r, robot_plan, last_robot_control: None }
    }

    #[test]
    fn ground_truth_cruises_when_robot_far() {
        let mut p = planner(HumanVariant::GroundTruth);
        let o = obs(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            AgentState::new(0.0, -20.0, 1.0, 0.0),
            Some(ControlPlan::zeros(5)),
        );
        let (plan, ok) = p.plan_for(&o);
        assert!(ok);
        for u in &plan.0 {
            assert!(u.accel.abs() < 1e-2 && u.yaw_rate.abs() < 1e-2);
        }
    }

    #[test]
    fn step_is_first_plan_action_and_deterministic() {
        let o = obs(
            AgentState::new(0.1, 0.0, 1.0, 0.0),
            AgentState::new(0.0, -1.5, 1.2, 0.0),
            Some(ControlPlan::zeros(5)),
        );
        let mut p1 = planner(HumanVariant::GroundTruth);
        let mut p2 = planner(HumanVariant::GroundTruth);
        let (plan, _) = p1.plan_for(&o);
        let step = p2.step_for(&o);
        assert_eq!(plan.0[0], step);
    }

    #[test]
    fn myopic_equals_ground_truth_at_horizon_one() {
        let x_h = AgentState::new(0.05, 0.0, 1.0, 0.0);
        let x_r = AgentState::new(0.0, -1.2, 1.3, 0.02);
        let robot_plan = ControlPlan(vec![Control::new(0.4, 0.05); 5]);

        let mut myopic = planner(HumanVariant::Myopic);
        let (plan_myopic, _) = myopic.plan_for(&obs(x_h, x_r, Some(robot_plan.clone())));
        assert_eq!(plan_myopic.len(), 1);

        let mut gt1 = planner(HumanVariant::GroundTruth);
        gt1.world.horizon = 1;
        let truncated = ControlPlan(vec![robot_plan.0[0]]);
        let (plan_gt1, _) = gt1.plan_for(&obs(x_h, x_r, Some(truncated)));
        assert_eq!(plan_myopic, plan_gt1);
    }

    #[test]
    fn plan_invariant_to_theta_scaling() {
        let o = obs(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            AgentState::new(0.2, -1.5, 1.2, 0.0),
            Some(ControlPlan(vec![Control::new(0.3, 0.0); 5])),
        );
        let mut base = planner(HumanVariant::GroundTruth);
        let mut scaled = planner(HumanVariant::GroundTruth);
        scaled.theta_star = scaled.theta_star.scaled(3.0);
        let (pb, _) = base.plan_for(&o);
        let (ps, _) = scaled.plan_for(&o);
        for (a, b) in pb.0.iter().zip(ps.0.iter()) {
            assert!((a.accel - b.accel).abs() < 1e-4);
            assert!((a.yaw_rate - b.yaw_rate).abs() < 1e-4);
        }
    }

    #[test]
    fn visibility_cone() {
        let h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let ahead = AgentState::new(0.0, 3.0, 1.0, 0.0);
        let behind = AgentState::new(0.0, -3.0, 1.0, 0.0);
        let abeam = AgentState::new(3.0, 0.0, 1.0, 0.0);
        let half = 22.5f64.to_radians();
        assert!(visible(h, ahead, half));
        assert!(visible(h, behind, half));
        assert!(!visible(h, abeam, half));
        // Exactly on the 22.5 degree boundary: visible.
        let boundary = AgentState::new(half.sin() * 2.0, half.cos() * 2.0, 1.0, 0.0);
        assert!(visible(h, boundary, half));
        // Coincident positions: degenerate, conservative.
        assert!(visible(h, h, half));
    }

    #[test]
    fn obstructed_view_matches_code_paths() {
        let x_h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let robot_plan = Some(ControlPlan::zeros(5));

        // Robot abeam: plan equals the no-robot plan.
        let abeam = AgentState::new(1.0, 0.0, 1.0, 0.0);
        let mut ov = planner(HumanVariant::ObstructedView);
        let (plan_ov, _) = ov.plan_for(&obs(x_h, abeam, robot_plan.clone()));
        let mut blind = planner(HumanVariant::GroundTruth);
        let far = AgentState::new(1.0, 1000.0, 1.0, 0.0);
        let (plan_far, _) = blind.plan_for(&obs(x_h, far, robot_plan.clone()));
        for (a, b) in plan_ov.0.iter().zip(plan_far.0.iter()) {
            assert!((a.accel - b.accel).abs() < 1e-5);
            assert!((a.yaw_rate - b.yaw_rate).abs() < 1e-5);
        }

        // Robot ahead in the cone: identical to ground truth.
        let ahead = AgentState::new(0.1, 1.5, 0.9, 0.0);
        let mut ov2 = planner(HumanVariant::ObstructedView);
        let mut gt = planner(HumanVariant::GroundTruth);
        let (plan_ov2, _) = ov2.plan_for(&obs(x_h, ahead, robot_plan.clone()));
        let (plan_gt, _) = gt.plan_for(&obs(x_h, ahead, robot_plan));
        assert_eq!(plan_ov2, plan_gt);
    }

    #[test]
    fn lane_prediction_straight_robot_matches_extrapolated_ground_truth() {
        let x_h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let x_r = AgentState::new(-1.0, -2.0, 1.2, 0.0);
        let last = Control::new(0.2, 0.0);
        let mut lp = planner(HumanVariant::LanePrediction);
        let o = HumanObservation {
            x_human: x_h,
            x_robot: x_r,
            robot_plan: None,
            last_robot_control: Some(last),
        };
        let (plan_lp, _) = lp.plan_for(&o);

        let mut gt = planner(HumanVariant::GroundTruth);
        let extrapolated = ControlPlan(vec![last; 5]);
        let (plan_gt, _) = gt.plan_for(&obs(x_h, x_r, Some(extrapolated)));
        assert_eq!(plan_lp, plan_gt);
    }

    #[test]
    fn lane_prediction_swerves_away_from_angled_robot() {
        // Robot one lane left of the human, two car lengths behind, angled
        // toward the human's lane.
        let x_h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let x_r = AgentState::new(-1.0, -2.0, 1.2, 0.1);
        let mut lp = planner(HumanVariant::LanePrediction);
        let o = HumanObservation {
            x_human: x_h,
            x_robot: x_r,
            robot_plan: None,
            last_robot_control: Some(Control::new(0.0, 0.0)),
        };
        let (plan, _) = lp.plan_for(&o);
        let states = crate::world::rollout(x_h, &plan, 0.1, 3.0);
        let mean_lat_vel: f64 = states[..states.len() - 1]
            .iter()
            .map(|s| s.v * s.heading.sin())
            .sum::<f64>()
            / plan.len() as f64;
        // The robot is on the left; the human should move right (+x).
        assert!(mean_lat_vel > 0.01, "mean lateral velocity {mean_lat_vel}");
    }

    #[test]
    fn lane_prediction_thresholds_are_strict() {
        let x_h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let mut lp = planner(HumanVariant::LanePrediction);
        // Exactly at the swerve threshold: no swerve.
        let x_r = AgentState::new(-1.0, -2.0, 1.2, lp.model.swerve_threshold);
        let o = HumanObservation {
            x_human: x_h,
            x_robot: x_r,
            robot_plan: None,
            last_robot_control: None,
        };
        assert_eq!(lp.swerve_target(&o), None);
        // Just above: swerve to the right lane.
        let x_r2 = AgentState::new(-1.0, -2.0, 1.2, lp.model.swerve_threshold + 1e-6);
        let o2 = HumanObservation { x_robot: x_r2, ..o.clone() };
        assert_eq!(lp.swerve_target(&o2), Some(2));
    }

    #[test]
    fn panic_trigger_geometry() {
        let h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let same_lane_close = AgentState::new(0.1, -1.9, 1.0, 0.0);
        let same_lane_exact = AgentState::new(0.1, -2.0, 1.0, 0.0);
        let far_lane = AgentState::new(2.0, -1.0, 1.0, 0.0);
        assert!(panic_triggered(h, same_lane_close, 1.0, 1.0, 2.0));
        assert!(!panic_triggered(h, same_lane_exact, 1.0, 1.0, 2.0));
        assert!(!panic_triggered(h, far_lane, 1.0, 1.0, 2.0));
        // Ahead never triggers.
        let ahead = AgentState::new(0.0, 1.0, 1.0, 0.0);
        assert!(!panic_triggered(h, ahead, 1.0, 1.0, 2.0));
    }

    #[test]
    fn panicking_brakes_hard_when_tailgated() {
        let mut p = planner(HumanVariant::Panicking);
        let o = obs(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            AgentState::new(0.0, -1.5, 1.5, 0.0),
            Some(ControlPlan::zeros(5)),
        );
        let (plan, ok) = p.plan_for(&o);
        assert!(ok);
        let expect = -p.params.a_max / 2.0;
        for u in &plan.0 {
            assert_eq!(u.accel, expect);
            assert_eq!(u.yaw_rate, 0.0);
        }
        // At rest the brake command is zero, never reversing.
        let mut p2 = planner(HumanVariant::Panicking);
        let o2 = obs(
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(0.0, -1.5, 1.5, 0.0),
            Some(ControlPlan::zeros(5)),
        );
        let (plan2, _) = p2.plan_for(&o2);
        assert_eq!(plan2.0[0].accel, 0.0);
    }

    #[test]
    fn panicking_untriggered_equals_bounded_controls() {
        let x_h = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let x_r = AgentState::new(0.1, -3.0, 1.2, 0.0);
        let robot_plan = Some(ControlPlan(vec![Control::new(0.5, 0.0); 5]));
        let mut panicking = planner(HumanVariant::Panicking);
        let mut bounded = planner(HumanVariant::BoundedControls);
        let (pp, _) = panicking.plan_for(&obs(x_h, x_r, robot_plan.clone()));
        let (pb, _) = bounded.plan_for(&obs(x_h, x_r, robot_plan));
        assert_eq!(pp, pb);
    }

    #[test]
    fn bounded_controls_equals_halved_ground_truth() {
        let x_h = AgentState::new(0.05, 0.0, 1.0, 0.0);
        let x_r = AgentState::new(0.0, -1.0, 1.4, 0.0);
        let robot_plan = Some(ControlPlan(vec![Control::new(0.6, -0.02); 5]));
        let mut bounded = planner(HumanVariant::BoundedControls);
        let mut gt = planner(HumanVariant::GroundTruth);
        gt.params.a_max /= 2.0;
        gt.params.omega_max /= 2.0;
        let (pb, _) = bounded.plan_for(&obs(x_h, x_r, robot_plan.clone()));
        let (pg, _) = gt.plan_for(&obs(x_h, x_r, robot_plan));
        assert_eq!(pb, pg);
    }

    #[test]
    fn panicking_speed_non_increasing_while_triggered() {
        let world = world();
        let mut p = planner(HumanVariant::Panicking);
        let mut x_h = AgentState::new(0.0, 1.5, 1.0, 0.0);
        let mut x_r = AgentState::new(0.0, 0.0, 1.2, 0.0);
        let mut prev_v = x_h.v;
        for _ in 0..15 {
            let triggered = panic_triggered(x_h, x_r, 1.0, 1.0, 2.0);
            let (plan, _) = p.plan_for(&obs(x_h, x_r, Some(ControlPlan::zeros(5))));
            x_h = crate::world::step(x_h, plan.0[0], world.dt, world.v_max);
            x_r = crate::world::step(x_r, Control::zero(), world.dt, world.v_max);
            if triggered {
                assert!(x_h.v <= prev_v + 1e-12);
            }
            prev_v = x_h.v;
        }
    }

    #[test]
    fn optimizer_variants_converge_under_own_objective() {
        for variant in [
            HumanVariant::GroundTruth,
            HumanVariant::NonisotropicDistance,
            HumanVariant::BoundedControls,
            HumanVariant::BlindspotProtective,
        ] {
            let mut p = planner(variant);
            p.cfg.max_iters = 600;
            let o = obs(
                AgentState::new(0.0, 0.0, 1.0, 0.0),
                AgentState::new(0.35, -2.2, 1.1, 0.0),
                Some(ControlPlan(vec![Control::new(0.3, 0.0); 5])),
            );
            let (_, converged) = p.plan_for(&o);
            assert!(converged, "variant {:?} did not converge", variant);
        }
    }

    #[test]
    fn variant_keys_round_trip() {
        for v in HumanVariant::ALL {
            assert_eq!(HumanVariant::from_key(v.key()), Some(v));
        }
        assert_eq!(HumanVariant::from_key("nope"), None);
        let road = RoadGeometry::default();
        assert_eq!(road.num_lanes, 3);
    }
}
