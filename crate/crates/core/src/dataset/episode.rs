//! Episode recording and the `SGDRV1` episode file.
//!
//! Layout (little-endian), see `docs/formats.md`:
//! a 64-byte header, `n_ticks` fixed 96-byte tick records, then the raster
//! frames as raw `u8` codes ordered tick, view, channel, row, column.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{expert_action, recovery_labels, ExpertConfig};
use crate::geometry::{
    route_command, Branch, PathSpec, Pose, ProgressCursor, SubgoalAngle, Vec2, ROUTE_HORIZON,
    ROUTE_TURN_DEG,
};
use crate::sim::actors::{populate, TrafficConfig};
use crate::sim::sensor::{sense, ChannelMode, SensorConfig, SensorFrame};
use crate::sim::town::TownMap;
use crate::sim::{Action, CollisionFlags, VehicleParams, WorldState};

pub const EPISODE_MAGIC: &[u8; 6] = b"SGDRV1";
pub const EPISODE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 64;
pub const TICK_BYTES: usize = 96;
/// Center, left-offset and right-offset viewpoints.
pub const VIEWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    Center = 0,
    Left = 1,
    Right = 2,
}

impl View {
    pub const ALL: [View; 3] = [View::Center, View::Left, View::Right];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub town_seed: u64,
    pub condition_seed: u64,
    pub dt: f64,
    pub episode_id: u32,
    pub n_ticks: u32,
    pub k: u16,
    pub grid_h: u16,
    pub grid_w: u16,
    pub mode: ChannelMode,
}

/// Command and steer label of one viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewLabel {
    pub angle: SubgoalAngle,
    pub steer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u32,
    pub pose: Pose,
    pub throttle: bool,
    pub collisions: CollisionFlags,
    pub off_lane: bool,
    pub red_light_visible: bool,
    /// Route-level maneuver, shared by all views.
    pub route: Branch,
    pub views: [ViewLabel; VIEWS],
}

impl TickRecord {
    pub fn action(&self, view: View) -> Action {
        Action::new(self.views[view as usize].steer, self.throttle)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub ticks: Vec<TickRecord>,
    /// `n_ticks * VIEWS` frames, tick-major.
    pub frames: Vec<SensorFrame>,
}

impl EpisodeLog {
    pub fn frame(&self, tick: usize, view: View) -> &SensorFrame {
        &self.frames[tick * VIEWS + view as usize]
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.ticks.iter().map(|t| t.pose.position).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(EPISODE_MAGIC)?;
        w.write_u16::<LE>(EPISODE_VERSION)?;
        w.write_u64::<LE>(h.town_seed)?;
        w.write_u64::<LE>(h.condition_seed)?;
        w.write_f64::<LE>(h.dt)?;
        w.write_u32::<LE>(h.episode_id)?;
        w.write_u32::<LE>(h.n_ticks)?;
        w.write_u16::<LE>(h.k)?;
        w.write_u16::<LE>(h.grid_h)?;
        w.write_u16::<LE>(h.grid_w)?;
        w.write_u16::<LE>(h.mode.channels() as u16)?;
        w.write_u16::<LE>(VIEWS as u16)?;
        w.write_u8(h.mode.code())?;
        w.write_all(&[0u8; 13])?;
        for t in &self.ticks {
            let flags = t.collisions.bits()
                | (t.off_lane as u8) << 3
                | (t.red_light_visible as u8) << 4;
            w.write_u32::<LE>(t.tick)?;
            w.write_u8(flags)?;
            w.write_u8(t.throttle as u8)?;
            w.write_u8(t.route.index() as u8)?;
            w.write_u8(0)?;
            for v in [
                t.pose.position.x,
                t.pose.position.y,
                t.pose.heading.x,
                t.pose.heading.y,
                t.pose.speed,
            ] {
                w.write_f64::<LE>(v)?;
            }
            for l in &t.views {
                w.write_f64::<LE>(l.angle.degrees())?;
                w.write_f64::<LE>(l.steer)?;
            }
        }
        for f in &self.frames {
            w.write_all(f.codes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("episode file: {m}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u16::<LE>()?;
        if version != EPISODE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let town_seed = r.read_u64::<LE>()?;
        let condition_seed = r.read_u64::<LE>()?;
        let dt = r.read_f64::<LE>()?;
        let episode_id = r.read_u32::<LE>()?;
        let n_ticks = r.read_u32::<LE>()?;
        let k = r.read_u16::<LE>()?;
        let grid_h = r.read_u16::<LE>()?;
        let grid_w = r.read_u16::<LE>()?;
        let channels = r.read_u16::<LE>()? as usize;
        let views = r.read_u16::<LE>()? as usize;
        let mode = ChannelMode::from_code(r.read_u8()?)?;
        let mut reserved = [0u8; 13];
        r.read_exact(&mut reserved)?;
        if channels != mode.channels() || views != VIEWS {
            return Err(bad("channel or view count mismatch"));
        }
        let header = EpisodeHeader {
            town_seed,
            condition_seed,
            dt,
            episode_id,
            n_ticks,
            k,
            grid_h,
            grid_w,
            mode,
        };
        let mut ticks = Vec::with_capacity(n_ticks as usize);
        for _ in 0..n_ticks {
            let tick = r.read_u32::<LE>()?;
            let flags = r.read_u8()?;
            let throttle = r.read_u8()? != 0;
            let route = Branch::from_index(r.read_u8()? as usize).ok_or_else(|| bad("bad route command"))?;
            let _pad = r.read_u8()?;
            let mut f = [0.0; 5];
            for v in &mut f {
                *v = r.read_f64::<LE>()?;
            }
            let mut views = [ViewLabel {
                angle: SubgoalAngle::wrapped(0.0),
                steer: 0.0,
            }; VIEWS];
            for v in &mut views {
                let angle = SubgoalAngle::new(r.read_f64::<LE>()?)?;
                *v = ViewLabel {
                    angle,
                    steer: r.read_f64::<LE>()?,
                };
            }
            ticks.push(TickRecord {
                tick,
                pose: Pose {
                    position: Vec2::new(f[0], f[1]),
                    heading: Vec2::new(f[2], f[3]),
                    speed: f[4],
                },
                throttle,
                collisions: CollisionFlags::from_bits(flags & 7),
                off_lane: flags & 8 != 0,
                red_light_visible: flags & 16 != 0,
                route,
                views,
            });
        }
        let frame_len = grid_h as usize * grid_w as usize * channels;
        let mut frames = Vec::with_capacity(n_ticks as usize * VIEWS);
        for _ in 0..n_ticks as usize * VIEWS {
            let mut codes = vec![0u8; frame_len];
            r.read_exact(&mut codes)?;
            frames.push(SensorFrame::from_codes(
                grid_h as usize,
                grid_w as usize,
                mode,
                codes,
            )?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            header,
            ticks,
            frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordSpec {
    pub episode_id: u32,
    pub condition_seed: u64,
    pub traffic_seed: u64,
    pub length: usize,
    pub k: usize,
    pub dt: f64,
    /// Ticks without subgoal progress before the recording is abandoned.
    pub stuck_timeout: usize,
}

/// Drives the expert along `path` for `spec.length` ticks, logging the center
/// view and both recovery views each tick. Frames are recorded in ASD mode;
/// AS inputs are derived by dropping the depth plane.
#[allow(clippy::too_many_arguments)]
pub fn record_episode(
    town: &Arc<TownMap>,
    path: &PathSpec,
    start: Pose,
    vehicle: &VehicleParams,
    traffic: &TrafficConfig,
    sensor: &SensorConfig,
    expert: &ExpertConfig,
    spec: &RecordSpec,
) -> Result<EpisodeLog> {
    expert.validate(town.config.lane_width)?;
    let actors = populate(town, traffic, spec.traffic_seed, start.position);
    let mut world = WorldState::new(town.clone(), start, actors, *vehicle);
    let mut cursor = ProgressCursor::new();
    let mut ticks = Vec::with_capacity(spec.length);
    let mut frames = Vec::with_capacity(spec.length * VIEWS);
    let mut idle = 0;
    let mode = ChannelMode::Asd;
    for t in 0..spec.length {
        let decision = expert_action(&world, path, cursor, expert)?;
        let side = recovery_labels(&world, path, &decision, expert)?;
        frames.push(sense(&world, &world.ego, spec.condition_seed, mode, sensor));
        for (pose, _, _) in &side {
            frames.push(sense(&world, pose, spec.condition_seed, mode, sensor));
        }
        ticks.push(TickRecord {
            tick: t as u32,
            pose: world.ego,
            throttle: decision.action.throttle,
            collisions: world.collision_flags,
            off_lane: world.off_lane,
            red_light_visible: world.red_light_ahead(sensor.forward_m),
            route: route_command(path, decision.cursor, ROUTE_HORIZON, ROUTE_TURN_DEG),
            views: [
                ViewLabel {
                    angle: decision.angle,
                    steer: decision.action.steer,
                },
                ViewLabel {
                    angle: side[0].1,
                    steer: side[0].2.steer,
                },
                ViewLabel {
                    angle: side[1].1,
                    steer: side[1].2.steer,
                },
            ],
        });
        idle = if decision.cursor.index() > cursor.index() {
            0
        } else {
            idle + 1
        };
        if idle > spec.stuck_timeout {
            return Err(Error::Recording(format!(
                "episode {}: expert made no progress for {} ticks at tick {t}",
                spec.episode_id, spec.stuck_timeout
            )));
        }
        cursor = decision.cursor;
        world.advance(decision.action, spec.dt)?;
    }
    Ok(EpisodeLog {
        header: EpisodeHeader {
            town_seed: town.seed,
            condition_seed: spec.condition_seed,
            dt: spec.dt,
            episode_id: spec.episode_id,
            n_ticks: ticks.len() as u32,
            k: spec.k as u16,
            grid_h: sensor.grid_h as u16,
            grid_w: sensor.grid_w as u16,
            mode,
        },
        ticks,
        frames,
    })
}
