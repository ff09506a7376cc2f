//! Deterministic 2D urban micro-simulator.

pub mod actors;
pub mod sensor;
pub mod shapes;
pub mod town;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec2};
use actors::{ActorKind, ActorState, TrafficConfig};
use sensor::SensorConfig;
use shapes::OrientedRect;
use town::{LightPhase, TownConfig, TownMap};

/// Steer in `[-1, 1]` (positive turns right) and binary throttle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: bool,
}

impl Action {
    pub fn new(steer: f64, throttle: bool) -> Self {
        Self { steer, throttle }
    }

    pub fn stop() -> Self {
        Self::new(0.0, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_steer_deg: f64,
    pub cruise_speed: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer_deg: 35.0,
            cruise_speed: 5.0,
            half_length: 2.2,
            half_width: 0.9,
        }
    }
}

impl VehicleParams {
    /// Turning radius at full steering lock.
    pub fn min_turn_radius(&self) -> f64 {
        self.wheelbase / self.max_steer_deg.to_radians().tan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub town: TownConfig,
    pub traffic: TrafficConfig,
    pub sensor: SensorConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            vehicle: VehicleParams::default(),
            town: TownConfig::default(),
            traffic: TrafficConfig::default(),
            sensor: SensorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CollisionKind {
    Vehicle,
    Pedestrian,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollisionFlags {
    pub vehicle: bool,
    pub pedestrian: bool,
    pub other: bool,
}

impl CollisionFlags {
    pub fn any(&self) -> bool {
        self.vehicle || self.pedestrian || self.other
    }

    pub fn bits(&self) -> u8 {
        self.vehicle as u8 | (self.pedestrian as u8) << 1 | (self.other as u8) << 2
    }

    pub fn from_bits(b: u8) -> Self {
        Self {
            vehicle: b & 1 != 0,
            pedestrian: b & 2 != 0,
            other: b & 4 != 0,
        }
    }
}

/// One ego contact; `actor` is `None` for static geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Contact {
    pub kind: CollisionKind,
    pub actor: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorldState {
    #[serde(skip)]
    pub town: Arc<TownMap>,
    pub tick: u64,
    pub time_s: f64,
    pub vehicle: VehicleParams,
    pub ego: Pose,
    pub actors: Vec<ActorState>,
    /// Phase per intersection; `None` where unsignalled.
    pub lights: Vec<Option<LightPhase>>,
    pub collision_flags: CollisionFlags,
    pub contacts: Vec<Contact>,
    pub off_lane: bool,
}

impl WorldState {
    pub fn new(town: Arc<TownMap>, ego: Pose, actors: Vec<ActorState>, vehicle: VehicleParams) -> Self {
        let mut w = Self {
            town,
            tick: 0,
            time_s: 0.0,
            vehicle,
            ego,
            actors,
            lights: Vec::new(),
            collision_flags: CollisionFlags::default(),
            contacts: Vec::new(),
            off_lane: false,
        };
        w.refresh();
        w
    }

    pub fn time(&self) -> f64 {
        self.time_s
    }

    pub fn ego_footprint(&self) -> OrientedRect {
        OrientedRect::new(
            self.ego.position,
            self.ego.heading,
            self.vehicle.half_length,
            self.vehicle.half_width,
        )
    }

    /// Is the ego's governing light red within `range` meters ahead?
    pub fn red_light_ahead(&self, range: f64) -> bool {
        match self.town.governing_stop_line(&self.ego) {
            Some((sl, dist)) if dist >= 0.0 && dist <= range => !self.lights[sl.intersection]
                .is_some_and(|p| p.is_green(sl.axis)),
            _ => false,
        }
    }

    /// Pure transition: returns the successor state.
    pub fn step(&self, action: Action, dt: f64) -> Result<WorldState> {
        let mut next = self.clone();
        next.advance(action, dt)?;
        Ok(next)
    }

    /// In-place version of [`WorldState::step`].
    pub fn advance(&mut self, action: Action, dt: f64) -> Result<()> {
        if !action.steer.is_finite() {
            return Err(Error::InvalidAction(format!("steer {}", action.steer)));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidAction(format!("dt {dt}")));
        }
        self.ego = bicycle_step(&self.ego, action, dt, &self.vehicle);
        let lights = &self.lights;
        for actor in &mut self.actors {
            actor.advance(dt, |x, axis| {
                !lights[x].is_some_and(|p| p.is_green(axis))
            });
        }
        self.tick += 1;
        self.time_s += dt;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        self.lights = (0..self.town.intersections.len())
            .map(|i| self.town.light_phase(i, self.time_s))
            .collect();
        let (contacts, off_lane) = detect(self);
        self.collision_flags = flags_of(&contacts);
        self.contacts = contacts;
        self.off_lane = off_lane;
    }
}

/// Kinematic bicycle model with exact arc integration over `dt`.
pub fn bicycle_step(pose: &Pose, action: Action, dt: f64, v: &VehicleParams) -> Pose {
    let speed = if action.throttle { v.cruise_speed } else { 0.0 };
    let steer = action.steer.clamp(-1.0, 1.0);
    let theta = pose.theta();
    // positive steer turns right, i.e. clockwise
    let omega = -(speed / v.wheelbase) * (v.max_steer_deg.to_radians() * steer).tan();
    let dist = speed * dt;
    let (position, theta1) = if omega.abs() < 1e-12 {
        (pose.position + Vec2::from_angle(theta) * dist, theta)
    } else {
        let t1 = theta + omega * dt;
        let r = speed / omega;
        (
            pose.position + Vec2::new(r * (t1.sin() - theta.sin()), r * (theta.cos() - t1.cos())),
            t1,
        )
    };
    Pose {
        position,
        heading: Vec2::from_angle(theta1),
        speed,
    }
}

fn flags_of(contacts: &[Contact]) -> CollisionFlags {
    let mut f = CollisionFlags::default();
    for c in contacts {
        match c.kind {
            CollisionKind::Vehicle => f.vehicle = true,
            CollisionKind::Pedestrian => f.pedestrian = true,
            CollisionKind::Other => f.other = true,
        }
    }
    f
}

fn detect(world: &WorldState) -> (Vec<Contact>, bool) {
    let ego = world.ego_footprint();
    let mut contacts = Vec::new();
    for a in world.actors.iter().filter(|a| a.active) {
        if ego.overlaps(&a.footprint()) {
            contacts.push(Contact {
                kind: match a.kind {
                    ActorKind::Vehicle => CollisionKind::Vehicle,
                    ActorKind::Pedestrian => CollisionKind::Pedestrian,
                },
                actor: Some(a.id),
            });
        }
    }
    if ego
        .outline_samples()
        .iter()
        .any(|&p| !world.town.is_drivable(p))
    {
        contacts.push(Contact {
            kind: CollisionKind::Other,
            actor: None,
        });
    }
    (contacts, off_lane(&world.town, &world.ego))
}

/// Lateral deviation test against the lane the ego is travelling in.
/// Intersection cells have no lanes and never count as off-lane.
pub fn off_lane(town: &TownMap, ego: &Pose) -> bool {
    if town.intersection_at(ego.position).is_some() {
        return false;
    }
    match town.lane_of(ego) {
        Some((_, _, lateral)) => lateral.abs() > town.config.lane_width / 2.0,
        None => true,
    }
}

/// Infraction summary of the current state.
pub fn infractions(world: &WorldState) -> (CollisionFlags, bool) {
    (world.collision_flags, world.off_lane)
}
