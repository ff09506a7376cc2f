//! Scripted demonstrator: proportional steering on the subgoal angle, stop
//! for red lights and for anything in the forward corridor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{command_for, select_subgoal, PathSpec, Pose, ProgressCursor, SubgoalAngle};
use crate::sim::sensor::{sense, ChannelMode, SensorConfig, SensorFrame};
use crate::sim::shapes::OrientedRect;
use crate::sim::{Action, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Steer per degree of subgoal angle.
    pub steer_gain: f64,
    /// Obstacle lookahead beyond the front bumper, meters.
    pub stop_range: f64,
    /// Distance from the vehicle center to a red stop line at which to stop.
    pub red_stop_range: f64,
    /// Extra half-width of the forward corridor beyond the vehicle's own.
    pub corridor_margin: f64,
    /// Lateral offset of the two recovery viewpoints, meters.
    pub recovery_offset: f64,
    /// Steer correction per meter of recovery offset.
    pub recovery_correction: f64,
    pub lookahead: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            steer_gain: 1.0 / 45.0,
            stop_range: 6.0,
            red_stop_range: 6.0,
            corridor_margin: 0.3,
            recovery_offset: 1.0,
            recovery_correction: 0.3,
            lookahead: crate::geometry::DEFAULT_LOOKAHEAD,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self, lane_width: f64) -> Result<()> {
        if !(self.steer_gain > 0.0) {
            return Err(Error::Config("expert.steer_gain must be positive".into()));
        }
        if !(self.stop_range > 0.0 && self.red_stop_range > 0.0 && self.lookahead > 0.0) {
            return Err(Error::Config("expert ranges must be positive".into()));
        }
        if !(self.recovery_offset >= 0.0 && self.recovery_offset < lane_width / 2.0) {
            return Err(Error::Config(
                "expert.recovery_offset must be below half the lane width".into(),
            ));
        }
        Ok(())
    }

    pub fn steer_for(&self, angle: SubgoalAngle) -> f64 {
        (self.steer_gain * angle.degrees()).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertDecision {
    pub action: Action,
    pub angle: SubgoalAngle,
    pub cursor: ProgressCursor,
}

pub fn expert_action(
    world: &WorldState,
    path: &PathSpec,
    cursor: ProgressCursor,
    cfg: &ExpertConfig,
) -> Result<ExpertDecision> {
    let (subgoal, cursor) = select_subgoal(path, cursor, &world.ego, cfg.lookahead)?;
    let angle = command_for(subgoal, &world.ego)?;
    let go = !world.red_light_ahead(cfg.red_stop_range) && !obstacle_ahead(world, cfg);
    Ok(ExpertDecision {
        action: Action::new(cfg.steer_for(angle), go),
        angle,
        cursor,
    })
}

/// Forward corridor: from the front bumper out to `stop_range`.
pub fn corridor(world: &WorldState, cfg: &ExpertConfig) -> OrientedRect {
    let v = &world.vehicle;
    let h = world.ego.heading;
    OrientedRect::new(
        world.ego.position + h * (v.half_length + cfg.stop_range / 2.0),
        h,
        cfg.stop_range / 2.0,
        v.half_width + cfg.corridor_margin,
    )
}

pub fn obstacle_ahead(world: &WorldState, cfg: &ExpertConfig) -> bool {
    let c = corridor(world, cfg);
    world
        .actors
        .iter()
        .any(|a| a.active && c.overlaps(&a.footprint()))
}

/// A laterally offset viewpoint with its corrected label.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySample {
    pub viewpoint: Pose,
    pub frame: SensorFrame,
    pub angle: SubgoalAngle,
    pub action: Action,
}

/// Offset viewpoints and labels without rendering: `[left, right]`.
pub fn recovery_labels(
    world: &WorldState,
    path: &PathSpec,
    center: &ExpertDecision,
    cfg: &ExpertConfig,
) -> Result<[(Pose, SubgoalAngle, Action); 2]> {
    let delta = cfg.recovery_correction * cfg.recovery_offset;
    let mut out = [(world.ego, center.angle, center.action); 2];
    for (slot, side) in out.iter_mut().zip([-1.0, 1.0]) {
        let pose = world.ego.offset_lateral(side * cfg.recovery_offset);
        let (subgoal, _) = select_subgoal(path, center.cursor, &pose, cfg.lookahead)?;
        let angle = command_for(subgoal, &pose)?;
        // left of the lane (side < 0) steers back right
        let steer = (center.action.steer - side * delta).clamp(-1.0, 1.0);
        *slot = (pose, angle, Action::new(steer, center.action.throttle));
    }
    Ok(out)
}

/// The two extra labelled views per tick, left first.
pub fn recovery_samples(
    world: &WorldState,
    path: &PathSpec,
    center: &ExpertDecision,
    cfg: &ExpertConfig,
    condition_seed: u64,
    mode: ChannelMode,
    sensor: &SensorConfig,
) -> Result<Vec<RecoverySample>> {
    Ok(recovery_labels(world, path, center, cfg)?
        .into_iter()
        .map(|(viewpoint, angle, action)| RecoverySample {
            frame: sense(world, &viewpoint, condition_seed, mode, sensor),
            viewpoint,
            angle,
            action,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::{discretize_path, Vec2};
    use crate::sim::actors::{ActorKind, ActorState, Script};
    use crate::sim::town::{generate_town, TownConfig, TownMap};
    use crate::sim::VehicleParams;

    fn lane_world() -> (WorldState, PathSpec) {
        let town = Arc::new(generate_town(1, &TownConfig::default()).unwrap());
        let lane = town.lane_segments[0].clone();
        let traj: Vec<Vec2> = (0..=60)
            .map(|i| lane.start + lane.dir * (i as f64 * 0.5))
            .collect();
        let path = discretize_path(&traj, 2.0).unwrap();
        let world = WorldState::new(town, lane.start_pose(0.0), vec![], VehicleParams::default());
        (world, path)
    }

    #[test]
    fn straight_empty_lane_drives_straight() {
        let (w, path) = lane_world();
        let d = expert_action(&w, &path, ProgressCursor::new(), &ExpertConfig::default()).unwrap();
        assert_eq!(d.angle.degrees(), 0.0);
        assert_eq!(d.action, Action::new(0.0, true));
    }

    #[test]
    fn saturating_gain() {
        let cfg = ExpertConfig::default();
        assert_eq!(cfg.steer_for(SubgoalAngle::new(90.0).unwrap()), 1.0);
        assert_eq!(cfg.steer_for(SubgoalAngle::new(-90.0).unwrap()), -1.0);
        assert!((cfg.steer_for(SubgoalAngle::new(9.0).unwrap()) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn red_light_four_meters_ahead_stops() {
        // find a signalled lane and a time at which its light is red
        let town: Arc<TownMap> = Arc::new(generate_town(1, &TownConfig::default()).unwrap());
        let sl = town.stop_lines[0];
        let lane = town.lane_segments[sl.lane].clone();
        let g = town.intersections[sl.intersection].light.unwrap();
        let red_t = (0..400)
            .map(|k| k as f64 * 0.1)
            .find(|&t| !g.phase_at(t, &town.config).is_green(sl.axis))
            .unwrap();
        let pose = Pose {
            position: lane.end - lane.dir * 4.0,
            heading: lane.dir,
            speed: 5.0,
        };
        let mut w = WorldState::new(town, pose, vec![], VehicleParams::default());
        w.time_s = red_t;
        w.lights = (0..w.town.intersections.len())
            .map(|i| w.town.light_phase(i, red_t))
            .collect();
        let traj: Vec<Vec2> = (0..40).map(|i| lane.end - lane.dir * (4.0 - i as f64 * 0.5)).collect();
        let path = discretize_path(&traj, 2.0).unwrap();
        let d = expert_action(&w, &path, ProgressCursor::new(), &ExpertConfig::default()).unwrap();
        assert!(!d.action.throttle);
    }

    #[test]
    fn pedestrian_in_corridor_stops() {
        let (mut w, path) = lane_world();
        let ahead = w.ego.position + w.ego.heading * 5.0;
        w.actors.push(ActorState {
            id: 0,
            kind: ActorKind::Pedestrian,
            pose: Pose::new(ahead, 0.0, 0.0),
            half_length: 0.3,
            half_width: 0.3,
            script: Script::new(vec![ahead, ahead], 0.0, true, vec![]),
            arc: 0.0,
            active: true,
        });
        let d = expert_action(&w, &path, ProgressCursor::new(), &ExpertConfig::default()).unwrap();
        assert!(!d.action.throttle);
    }

    #[test]
    fn recovery_labels_shift_back_toward_lane() {
        let (w, path) = lane_world();
        let cfg = ExpertConfig::default();
        let d = expert_action(&w, &path, ProgressCursor::new(), &cfg).unwrap();
        let [left, right] = recovery_labels(&w, &path, &d, &cfg).unwrap();
        assert!((left.2.steer - 0.3).abs() < 1e-12);
        assert!((right.2.steer + 0.3).abs() < 1e-12);
        assert!(left.1.degrees() > 0.0 && right.1.degrees() < 0.0);
        assert_eq!(left.2.throttle, d.action.throttle);
    }

    #[test]
    fn zero_offset_recovery_matches_center() {
        let (w, path) = lane_world();
        let cfg = ExpertConfig {
            recovery_offset: 0.0,
            ..ExpertConfig::default()
        };
        let d = expert_action(&w, &path, ProgressCursor::new(), &cfg).unwrap();
        for (pose, angle, action) in recovery_labels(&w, &path, &d, &cfg).unwrap() {
            assert_eq!(pose, w.ego);
            assert_eq!(angle, d.angle);
            assert_eq!(action, d.action);
        }
    }
}
