//! Scripted traffic. Actors follow fixed waypoint scripts and never react to
//! the ego vehicle; scripted vehicles do hold at red stop lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec2};
use crate::sim::shapes::OrientedRect;
use crate::sim::town::{Axis, TownMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
}

/// Point along a script where a vehicle must respect a light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptStop {
    pub arc: f64,
    pub intersection: usize,
    pub axis: Axis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub waypoints: Vec<Vec2>,
    pub speed: f64,
    /// Pedestrian scripts wrap around; vehicle scripts end.
    pub looping: bool,
    pub stops: Vec<ScriptStop>,
    cumulative: Vec<f64>,
}

impl Script {
    pub fn new(waypoints: Vec<Vec2>, speed: f64, looping: bool, stops: Vec<ScriptStop>) -> Self {
        let mut cumulative = Vec::with_capacity(waypoints.len());
        let mut acc = 0.0;
        for (i, p) in waypoints.iter().enumerate() {
            if i > 0 {
                acc += waypoints[i - 1].distance(*p);
            }
            cumulative.push(acc);
        }
        Self {
            waypoints,
            speed,
            looping,
            stops,
            cumulative,
        }
    }

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Position and unit direction at arc length `s`.
    pub fn sample(&self, s: f64) -> (Vec2, Vec2) {
        let n = self.waypoints.len();
        if n < 2 {
            return (self.waypoints[0], Vec2::new(1.0, 0.0));
        }
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.partition_point(|&c| c <= s) {
            0 => 0,
            k => (k - 1).min(n - 2),
        };
        let mut j = i;
        // skip zero-length segments for the direction
        while j + 1 < n && self.waypoints[j].distance(self.waypoints[j + 1]) == 0.0 {
            j += 1;
        }
        let j = j.min(n - 2);
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 {
            (s - self.cumulative[i]) / seg
        } else {
            0.0
        };
        let dir = (self.waypoints[j + 1] - self.waypoints[j])
            .normalized()
            .unwrap_or(Vec2::new(1.0, 0.0));
        (a + (b - a) * t, dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    pub id: usize,
    pub kind: ActorKind,
    pub pose: Pose,
    /// Half extents along and across the heading.
    pub half_length: f64,
    pub half_width: f64,
    pub script: Script,
    pub arc: f64,
    pub active: bool,
}

impl ActorState {
    pub fn footprint(&self) -> OrientedRect {
        OrientedRect::new(
            self.pose.position,
            self.pose.heading,
            self.half_length,
            self.half_width,
        )
    }

    pub(crate) fn place(&mut self) {
        let s = if self.script.looping {
            self.arc.rem_euclid(self.script.length().max(1e-9))
        } else {
            self.arc
        };
        let (p, dir) = self.script.sample(s);
        self.pose.position = p;
        self.pose.heading = dir;
    }

    /// Advances along the script by one tick. `red` tells whether a given
    /// (intersection, axis) light currently forbids entry.
    pub(crate) fn advance(&mut self, dt: f64, red: impl Fn(usize, Axis) -> bool) {
        if !self.active {
            return;
        }
        let ds = self.script.speed * dt;
        let front = self.arc + self.half_length;
        let blocked = self.kind == ActorKind::Vehicle
            && self.script.stops.iter().any(|st| {
                let gap = st.arc - front;
                gap >= 0.0 && gap <= ds + 0.5 && red(st.intersection, st.axis)
            });
        if blocked {
            self.pose.speed = 0.0;
            return;
        }
        self.arc += ds;
        self.pose.speed = self.script.speed;
        if !self.script.looping && self.arc >= self.script.length() {
            self.arc = self.script.length();
            self.active = false;
            self.pose.speed = 0.0;
        }
        self.place();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub vehicles: usize,
    pub pedestrians: usize,
    pub vehicle_speed: f64,
    pub pedestrian_speed: f64,
    pub vehicle_half_length: f64,
    pub vehicle_half_width: f64,
    pub pedestrian_radius: f64,
    /// Minimum distance between an actor's spawn point and the ego start.
    pub spawn_clearance: f64,
    pub script_length: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            vehicles: 6,
            pedestrians: 8,
            vehicle_speed: 3.5,
            pedestrian_speed: 1.2,
            vehicle_half_length: 2.2,
            vehicle_half_width: 0.9,
            pedestrian_radius: 0.3,
            spawn_clearance: 25.0,
            script_length: 1500.0,
        }
    }
}

impl TrafficConfig {
    pub fn none() -> Self {
        Self {
            vehicles: 0,
            pedestrians: 0,
            ..Self::default()
        }
    }
}

/// Scripted vehicles and pedestrians for one episode, deterministic in `seed`.
pub fn populate(town: &TownMap, cfg: &TrafficConfig, seed: u64, ego_start: Vec2) -> Vec<ActorState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut actors = Vec::new();
    let lanes = town.lane_segments.len();
    let mut attempts = 0;
    while actors.iter().filter(|a: &&ActorState| a.kind == ActorKind::Vehicle).count() < cfg.vehicles
        && attempts < 1000
    {
        attempts += 1;
        let start = rng.gen_range(0..lanes);
        let lane = &town.lane_segments[start];
        let offset = rng.gen_range(0.0..lane.length.max(1.0) * 0.8);
        let spawn = lane.start + lane.dir * offset;
        if spawn.distance(ego_start) < cfg.spawn_clearance {
            continue;
        }
        let route = town.random_route(&mut rng, start, cfg.script_length);
        let poly = town.route_polyline(&route, 0.5);
        let script = vehicle_script(town, &route, &poly, cfg.vehicle_speed);
        let mut actor = ActorState {
            id: actors.len(),
            kind: ActorKind::Vehicle,
            pose: Pose::new(spawn, lane.dir.angle(), cfg.vehicle_speed),
            half_length: cfg.vehicle_half_length,
            half_width: cfg.vehicle_half_width,
            script,
            arc: offset,
            active: true,
        };
        actor.place();
        actors.push(actor);
    }
    let roads = town.roads.len();
    attempts = 0;
    let mut peds = 0;
    while peds < cfg.pedestrians && attempts < 1000 {
        attempts += 1;
        let (a, b) = town.roads[rng.gen_range(0..roads)];
        let (pa, pb) = (town.nodes[a], town.nodes[b]);
        let along = (pb - pa).normalized().unwrap();
        let span = pa.distance(pb) - 2.0 * town.config.intersection_half;
        let t = town.config.intersection_half + span * rng.gen_range(0.3..0.7);
        let mid = pa + along * t;
        if mid.distance(ego_start) < cfg.spawn_clearance {
            continue;
        }
        let side = along.right_normal() * (town.config.lane_width + 1.0);
        let script = Script::new(vec![mid - side, mid + side, mid - side], cfg.pedestrian_speed, true, vec![]);
        let arc = rng.gen_range(0.0..script.length());
        let mut actor = ActorState {
            id: actors.len(),
            kind: ActorKind::Pedestrian,
            pose: Pose::new(mid, 0.0, cfg.pedestrian_speed),
            half_length: cfg.pedestrian_radius,
            half_width: cfg.pedestrian_radius,
            script,
            arc,
            active: true,
        };
        actor.place();
        actors.push(actor);
        peds += 1;
    }
    actors
}

fn vehicle_script(town: &TownMap, route: &[usize], poly: &[Vec2], speed: f64) -> Script {
    let mut script = Script::new(poly.to_vec(), speed, false, vec![]);
    let mut stops = Vec::new();
    let mut from = 0;
    for &li in route {
        let lane = &town.lane_segments[li];
        // scan forward only so that revisited lanes map to the right pass
        let window = ((lane.length + 4.0 * town.config.intersection_half) / 0.5) as usize + 8;
        let hi = (from + window).min(poly.len());
        let Some(k) = (from..hi).min_by(|&a, &b| {
            poly[a].distance(lane.end).total_cmp(&poly[b].distance(lane.end))
        }) else {
            break;
        };
        from = k;
        if let Some(sl) = town.stop_lines.iter().find(|s| s.lane == li) {
            stops.push(ScriptStop {
                arc: script.cumulative[k],
                intersection: sl.intersection,
                axis: sl.axis,
            });
        }
    }
    script.stops = stops;
    script
}
