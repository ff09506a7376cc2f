//! Closed-loop evaluation of the expert or a trained network on held-out paths.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{plan_route, reconstruct_path};
use crate::error::{Error, Result};
use crate::expert::{expert_action, ExpertConfig};
use crate::geometry::{
    command_for, discretize_path, route_command, select_subgoal, Command, PathSpec, Pose, ProgressCursor,
    DEFAULT_SPACING, ROUTE_HORIZON, ROUTE_TURN_DEG,
};
use crate::model::{forward, ModelParameters};
use crate::sim::actors::{populate, TrafficConfig};
use crate::sim::sensor::{sense, ObservationStack, SensorConfig};
use crate::sim::town::TownMap;
use crate::sim::{Action, CollisionKind, Contact, VehicleParams, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_paths: usize,
    pub max_ticks: usize,
    pub goal_radius: f64,
    /// Ticks without subgoal progress before an episode is declared stuck.
    pub stuck_timeout: usize,
    pub condition_seeds: Vec<u64>,
    /// Minimum route length of generated eval paths, meters.
    pub path_length: f64,
    pub path_seed: u64,
    /// Enable scripted vehicles and pedestrians.
    pub actors: bool,
    pub traffic_seed: u64,
}

/// Condition seeds used for recording training data.
pub const TRAIN_CONDITION_SEEDS: [u64; 7] = [1, 3, 5, 7, 9, 12, 14];
/// Held-out condition seeds for evaluation.
pub const EVAL_CONDITION_SEEDS: [u64; 7] = [2, 4, 6, 8, 10, 11, 13];

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_paths: 50,
            max_ticks: 1500,
            goal_radius: 3.0,
            stuck_timeout: 120,
            condition_seeds: EVAL_CONDITION_SEEDS.to_vec(),
            path_length: 300.0,
            path_seed: 0,
            actors: true,
            traffic_seed: 0,
        }
    }
}

impl EvalConfig {
    /// Checks the config and that no eval condition seed was used for training.
    pub fn validate(&self, train_seeds: &[u64]) -> Result<()> {
        if self.condition_seeds.is_empty() {
            return Err(Error::Config("eval needs at least one condition seed".into()));
        }
        if let Some(s) = self.condition_seeds.iter().find(|s| train_seeds.contains(s)) {
            return Err(Error::Config(format!(
                "condition seed {s} is used for both training and evaluation"
            )));
        }
        if self.max_ticks == 0 || self.stuck_timeout == 0 || !(self.goal_radius > 0.0) {
            return Err(Error::Config(format!("invalid eval config {self:?}")));
        }
        Ok(())
    }
}

/// Static parts of the simulation shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutEnv {
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub traffic: TrafficConfig,
    pub sensor: SensorConfig,
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Expert(&'a ExpertConfig),
    Model(&'a ModelParameters),
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Expert(_) => "expert".into(),
            Policy::Model(m) => format!("{}-{}", m.arch.tag(), m.mode().tag()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Goal,
    Timeout,
    Stuck,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Goal => "goal",
            Termination::Timeout => "timeout",
            Termination::Stuck => "stuck",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollisionCounts {
    pub vehicle: u32,
    pub pedestrian: u32,
    pub other: u32,
}

impl CollisionCounts {
    fn add(&mut self, kind: CollisionKind) {
        match kind {
            CollisionKind::Vehicle => self.vehicle += 1,
            CollisionKind::Pedestrian => self.pedestrian += 1,
            CollisionKind::Other => self.other += 1,
        }
    }
}

/// Which output disagreed most with the expert near the end of a failed episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureCause {
    Steer,
    Throttle,
}

/// Ticks at the end of an episode used for failure attribution.
pub const ATTRIBUTION_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub path_index: usize,
    pub condition_seed: u64,
    pub success: bool,
    pub termination: Termination,
    pub ticks: usize,
    pub distance_total: f64,
    pub distance_non_normal: f64,
    pub collisions: CollisionCounts,
    /// Mean |steer - expert steer| over the attribution window.
    pub steer_deviation: f64,
    /// Fraction of attribution-window ticks whose throttle differs from the expert's.
    pub throttle_mismatch: f64,
    pub failure_cause: Option<FailureCause>,
}

/// One line of the per-episode replay trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceTick {
    pub tick: usize,
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
    pub speed: f64,
    pub command_deg: f64,
    pub steer: f64,
    pub throttle: bool,
    pub expert_steer: f64,
    pub expert_throttle: bool,
    pub collisions: u8,
    pub off_lane: bool,
}

/// A held-out path and the pose the ego starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPath {
    pub points: Vec<crate::geometry::Vec2>,
    pub start: Pose,
}

impl EvalPath {
    pub fn path(&self) -> Result<PathSpec> {
        PathSpec::new(self.points.clone(), DEFAULT_SPACING)
    }
}

/// Drives the expert actor-free along random routes of `town` and
/// reconstructs each held-out path from the chronological positions.
pub fn generate_eval_paths(
    town: &Arc<TownMap>,
    cfg: &EvalConfig,
    env: &RolloutEnv,
    expert: &ExpertConfig,
) -> Result<Vec<EvalPath>> {
    (0..cfg.n_paths)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.path_seed);
            rng.set_stream(i as u64);
            let (planned, start) = plan_route(
                town,
                &mut rng,
                cfg.path_length,
                DEFAULT_SPACING,
                env.vehicle.cruise_speed,
            )?;
            let mut world = WorldState::new(town.clone(), start, Vec::new(), env.vehicle);
            let mut cursor = ProgressCursor::new();
            let mut positions = vec![world.ego.position];
            let goal = planned.last();
            for _ in 0..cfg.max_ticks {
                if world.ego.position.distance(goal) <= cfg.goal_radius {
                    let log_path = discretize_path(&positions, DEFAULT_SPACING)?;
                    return Ok(EvalPath {
                        points: log_path.points().to_vec(),
                        start,
                    });
                }
                let d = expert_action(&world, &planned, cursor, expert)?;
                cursor = d.cursor;
                world.advance(d.action, env.dt)?;
                positions.push(world.ego.position);
            }
            Err(Error::Recording(format!(
                "expert did not finish eval path {i} within {} ticks",
                cfg.max_ticks
            )))
        })
        .collect()
}

/// Runs one closed-loop episode. `traffic_seed` drives actor placement when
/// actors are enabled. The trace is collected when `want_trace` is set.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: Policy<'_>,
    town: &Arc<TownMap>,
    path: &EvalPath,
    path_index: usize,
    cfg: &EvalConfig,
    env: &RolloutEnv,
    expert: &ExpertConfig,
    condition_seed: u64,
    traffic_seed: u64,
    want_trace: bool,
) -> Result<(EpisodeResult, Vec<TraceTick>)> {
    let spec = path.path()?;
    if let Policy::Model(m) = policy {
        if (m.input.grid_h, m.input.grid_w) != (env.sensor.grid_h, env.sensor.grid_w) {
            return Err(Error::Config(format!(
                "model expects a {}x{} grid, sensor renders {}x{}",
                m.input.grid_h, m.input.grid_w, env.sensor.grid_h, env.sensor.grid_w
            )));
        }
    }
    let actors = if cfg.actors {
        populate(town, &env.traffic, traffic_seed, path.start.position)
    } else {
        Vec::new()
    };
    let mut world = WorldState::new(town.clone(), path.start, actors, env.vehicle);
    let mut cursor = ProgressCursor::new();
    let mut stack: Option<ObservationStack> = None;
    let mut trace = Vec::new();
    let mut deviations: Vec<(f64, bool)> = Vec::new();
    let mut prev_contacts: BTreeSet<Contact> = BTreeSet::new();
    let mut collisions = CollisionCounts::default();
    let (mut dist, mut non_normal) = (0.0, 0.0);
    let mut idle = 0;
    let goal = spec.last();
    let mut termination = Termination::Timeout;
    let mut ticks = 0;
    for tick in 0..cfg.max_ticks {
        if world.ego.position.distance(goal) <= cfg.goal_radius {
            termination = Termination::Goal;
            break;
        }
        let (subgoal, next_cursor) = select_subgoal(&spec, cursor, &world.ego, expert.lookahead)?;
        let command = command_for(subgoal, &world.ego)?;
        let reference = expert_action(&world, &spec, cursor, expert)?;
        let action = match policy {
            Policy::Expert(_) => reference.action,
            Policy::Model(m) => {
                let frame = sense(&world, &world.ego, condition_seed, m.mode(), &env.sensor);
                match stack.as_mut() {
                    Some(s) => s.push(frame),
                    None => stack = Some(ObservationStack::new(frame, m.input.k)),
                }
                let route = route_command(&spec, next_cursor, ROUTE_HORIZON, ROUTE_TURN_DEG);
                let out = forward(
                    m,
                    stack.as_ref().unwrap(),
                    world.ego.speed,
                    Command::new(command, route),
                )?;
                out.action()
            }
        };
        deviations.push((
            (action.steer - reference.action.steer).abs(),
            action.throttle != reference.action.throttle,
        ));
        idle = if next_cursor.index() > cursor.index() {
            0
        } else {
            idle + 1
        };
        cursor = next_cursor;
        let before = world.ego.position;
        world.advance(action, env.dt)?;
        ticks = tick + 1;
        let moved = world.ego.position.distance(before);
        dist += moved;
        if world.collision_flags.any() || world.off_lane {
            non_normal += moved;
        }
        let now: BTreeSet<Contact> = world.contacts.iter().copied().collect();
        for c in now.difference(&prev_contacts) {
            collisions.add(c.kind);
        }
        prev_contacts = now;
        if want_trace {
            trace.push(trace_tick(tick, &world, command.degrees(), action, reference.action));
        }
        if idle >= cfg.stuck_timeout {
            termination = Termination::Stuck;
            break;
        }
    }
    if termination == Termination::Timeout && world.ego.position.distance(goal) <= cfg.goal_radius {
        termination = Termination::Goal;
    }
    let success = termination == Termination::Goal;
    let window = &deviations[deviations.len().saturating_sub(ATTRIBUTION_WINDOW)..];
    let n = window.len().max(1) as f64;
    let steer_deviation = window.iter().map(|d| d.0).sum::<f64>() / n;
    let throttle_mismatch = window.iter().filter(|d| d.1).count() as f64 / n;
    let failure_cause = (!success).then(|| {
        if steer_deviation > throttle_mismatch {
            FailureCause::Steer
        } else {
            FailureCause::Throttle
        }
    });
    Ok((
        EpisodeResult {
            path_index,
            condition_seed,
            success,
            termination,
            ticks,
            distance_total: dist,
            distance_non_normal: non_normal,
            collisions,
            steer_deviation,
            throttle_mismatch,
            failure_cause,
        },
        trace,
    ))
}

fn trace_tick(tick: usize, w: &WorldState, command: f64, a: Action, e: Action) -> TraceTick {
    TraceTick {
        tick,
        x: w.ego.position.x,
        y: w.ego.position.y,
        heading_deg: w.ego.theta().to_degrees(),
        speed: w.ego.speed,
        command_deg: command,
        steer: a.steer,
        throttle: a.throttle,
        expert_steer: e.steer,
        expert_throttle: e.throttle,
        collisions: w.collision_flags.bits(),
        off_lane: w.off_lane,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRates {
    pub vehicle: f64,
    pub pedestrian: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub n_episodes: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// `None` when no episode succeeded.
    pub normal_driving_rate: Option<f64>,
    /// Per km over successful episodes; `None` when no episode succeeded.
    pub collisions_per_km: Option<CollisionRates>,
    pub episodes: Vec<EpisodeResult>,
}

/// Sum in a canonical order so the result does not depend on input order.
fn canonical_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

pub fn aggregate(policy: &str, results: &[EpisodeResult]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Config("cannot aggregate zero episodes".into()));
    }
    let ok: Vec<&EpisodeResult> = results.iter().filter(|r| r.success).collect();
    let success_rate = 100.0 * ok.len() as f64 / results.len() as f64;
    let total = canonical_sum(ok.iter().map(|r| r.distance_total).collect());
    let non_normal = canonical_sum(ok.iter().map(|r| r.distance_non_normal).collect());
    let (normal_driving_rate, collisions_per_km) = if ok.is_empty() {
        (None, None)
    } else {
        let km = total / 1000.0;
        let sum = |f: fn(&CollisionCounts) -> u32| ok.iter().map(|r| f(&r.collisions) as f64).sum::<f64>();
        // 100 - share of non-normal distance: exactly 100 when nothing was non-normal
        let rate = if total > 0.0 { 100.0 - 100.0 * non_normal / total } else { 100.0 };
        let per_km = |c: f64| if km > 0.0 { c / km } else { 0.0 };
        (
            Some(rate.clamp(0.0, 100.0)),
            Some(CollisionRates {
                vehicle: per_km(sum(|c| c.vehicle)),
                pedestrian: per_km(sum(|c| c.pedestrian)),
                other: per_km(sum(|c| c.other)),
            }),
        )
    };
    Ok(EvalReport {
        policy: policy.to_string(),
        n_episodes: results.len(),
        n_success: ok.len(),
        success_rate,
        normal_driving_rate,
        collisions_per_km,
        episodes: results.to_vec(),
    })
}

/// Formats an optional metric, writing `undefined` for a missing value.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Per-episode table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "path,condition_seed,success,termination,ticks,distance_total,distance_non_normal,\
             collision_vehicle,collision_pedestrian,collision_other,steer_deviation,throttle_mismatch,failure_cause\n",
        );
        for e in &self.episodes {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.path_index,
                e.condition_seed,
                e.success,
                e.termination,
                e.ticks,
                e.distance_total,
                e.distance_non_normal,
                e.collisions.vehicle,
                e.collisions.pedestrian,
                e.collisions.other,
                e.steer_deviation,
                e.throttle_mismatch,
                match e.failure_cause {
                    Some(FailureCause::Steer) => "steer",
                    Some(FailureCause::Throttle) => "throttle",
                    None => "",
                }
            ));
        }
        s
    }
}

/// Rolls out `policy` on every path; path `i` uses condition seed
/// `condition_seeds[i % len]` and traffic seed `traffic_seed + i`. Episodes
/// are independent, so up to `jobs` of them run concurrently; results do not
/// depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: Policy<'_>,
    town: &Arc<TownMap>,
    paths: &[EvalPath],
    cfg: &EvalConfig,
    env: &RolloutEnv,
    expert: &ExpertConfig,
    want_traces: bool,
    jobs: usize,
) -> Result<(EvalReport, Vec<Vec<TraceTick>>)> {
    let run = |i: usize| {
        rollout(
            policy,
            town,
            &paths[i],
            i,
            cfg,
            env,
            expert,
            cfg.condition_seeds[i % cfg.condition_seeds.len()],
            cfg.traffic_seed.wrapping_add(i as u64),
            want_traces,
        )
    };
    let outcomes = parallel_map(paths.len(), jobs, run);
    let mut results = Vec::with_capacity(paths.len());
    let mut traces = Vec::new();
    for o in outcomes {
        let (r, t) = o?;
        results.push(r);
        if want_traces {
            traces.push(t);
        }
    }
    Ok((aggregate(&policy.name(), &results)?, traces))
}

/// `f(0..n)` on up to `jobs` scoped threads, results in index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|v| v.expect("every slot filled")).collect()
}

/// Reconstructs an eval path from a recorded episode's trajectory.
pub fn eval_path_from_log(log: &crate::dataset::EpisodeLog) -> Result<EvalPath> {
    let path = reconstruct_path(log, DEFAULT_SPACING)?;
    Ok(EvalPath {
        points: path.points().to_vec(),
        start: log.ticks[0].pose,
    })
}
