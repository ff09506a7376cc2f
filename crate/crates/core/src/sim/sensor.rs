//! Egocentric raster sensing.
//!
//! The grid covers a window ahead of the viewpoint; the viewpoint sits at the
//! bottom-center of the grid facing up (row 0 is farthest). Values are stored
//! as `u8` codes so that frames persist exactly: semantic channels hold 0/1,
//! appearance and depth codes map linearly onto `[0, 12]`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec2};
use crate::sim::actors::ActorKind;
use crate::sim::WorldState;

/// Upper end of the appearance/depth value range.
pub const VALUE_MAX: f64 = 12.0;

pub const CH_APPEARANCE: usize = 0;
pub const CH_DRIVABLE: usize = 1;
pub const CH_VEHICLE: usize = 2;
pub const CH_PEDESTRIAN: usize = 3;
pub const CH_RED: usize = 4;
pub const CH_GREEN: usize = 5;
pub const CH_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelMode {
    /// Appearance + semantic.
    #[serde(rename = "as")]
    As,
    /// Appearance + semantic + depth.
    #[serde(rename = "asd")]
    Asd,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::As => 6,
            ChannelMode::Asd => 7,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ChannelMode::As => "as",
            ChannelMode::Asd => "asd",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ChannelMode::As => 0,
            ChannelMode::Asd => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ChannelMode::As),
            1 => Ok(ChannelMode::Asd),
            _ => Err(Error::Format(format!("unknown channel mode code {c}"))),
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "as" => Ok(ChannelMode::As),
            "asd" => Ok(ChannelMode::Asd),
            other => Err(Error::Config(format!("unknown channel mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Meters covered ahead of the viewpoint.
    pub forward_m: f64,
    /// Meters covered across (centered on the viewpoint).
    pub lateral_m: f64,
    /// Half-amplitude of the uniform appearance noise, in value units.
    pub appearance_noise: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            forward_m: 16.0,
            lateral_m: 16.0,
            appearance_noise: 1.0,
        }
    }
}

impl SensorConfig {
    pub fn cell_forward(&self) -> f64 {
        self.forward_m / self.grid_h as f64
    }

    pub fn cell_lateral(&self) -> f64 {
        self.lateral_m / self.grid_w as f64
    }

    /// Range normalizer: the farthest cell corner.
    pub fn max_range(&self) -> f64 {
        self.forward_m.hypot(self.lateral_m / 2.0)
    }

    /// Cell-center offset (forward, right) in the viewpoint frame.
    pub fn cell_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let f = (self.grid_h as f64 - row as f64 - 0.5) * self.cell_forward();
        let l = (col as f64 + 0.5 - self.grid_w as f64 / 2.0) * self.cell_lateral();
        (f, l)
    }
}

pub fn encode_value(v: f64) -> u8 {
    (v.clamp(0.0, VALUE_MAX) / VALUE_MAX * 255.0).round() as u8
}

pub fn decode_value(code: u8) -> f64 {
    code as f64 * VALUE_MAX / 255.0
}

/// One H×W×C raster, channel-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorFrame {
    pub height: usize,
    pub width: usize,
    pub mode: ChannelMode,
    codes: Vec<u8>,
}

impl SensorFrame {
    pub fn from_codes(height: usize, width: usize, mode: ChannelMode, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != height * width * mode.channels() {
            return Err(Error::Shape(format!(
                "frame needs {} codes, got {}",
                height * width * mode.channels(),
                codes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            mode,
            codes,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn plane(&self, channel: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.codes[channel * n..(channel + 1) * n]
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f64 {
        let code = self.plane(channel)[row * self.width + col];
        if channel == CH_APPEARANCE || channel == CH_DEPTH {
            decode_value(code)
        } else {
            code as f64
        }
    }

    /// Drops the depth channel of an ASD frame.
    pub fn to_mode(&self, mode: ChannelMode) -> Result<SensorFrame> {
        match (self.mode, mode) {
            (a, b) if a == b => Ok(self.clone()),
            (ChannelMode::Asd, ChannelMode::As) => {
                let n = self.height * self.width * 6;
                SensorFrame::from_codes(self.height, self.width, mode, self.codes[..n].to_vec())
            }
            _ => Err(Error::Config("cannot add a depth channel to an AS frame".into())),
        }
    }

    /// Appends the decoded values to `out`, channel-major.
    pub fn write_values(&self, out: &mut Vec<f64>) {
        let n = self.height * self.width;
        for c in 0..self.channels() {
            let plane = &self.codes[c * n..(c + 1) * n];
            if c == CH_APPEARANCE || c == CH_DEPTH {
                out.extend(plane.iter().map(|&v| decode_value(v)));
            } else {
                out.extend(plane.iter().map(|&v| v as f64));
            }
        }
    }
}

/// The `k` most recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack {
    frames: VecDeque<SensorFrame>,
    k: usize,
}

impl ObservationStack {
    /// Fills the stack with `k` copies of the first frame.
    pub fn new(first: SensorFrame, k: usize) -> Self {
        let k = k.max(1);
        Self {
            frames: std::iter::repeat(first).take(k).collect(),
            k,
        }
    }

    pub fn from_frames(frames: Vec<SensorFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("empty observation stack".into()));
        }
        let k = frames.len();
        Ok(Self {
            frames: frames.into(),
            k,
        })
    }

    pub fn push(&mut self, frame: SensorFrame) {
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> ChannelMode {
        self.frames[0].mode
    }

    pub fn frames(&self) -> impl Iterator<Item = &SensorFrame> {
        self.frames.iter()
    }

    /// Network input: frames concatenated on the channel axis, oldest first.
    pub fn to_input(&self) -> Vec<f64> {
        let f = &self.frames[0];
        let mut out = Vec::with_capacity(self.k * f.channels() * f.height * f.width);
        for fr in &self.frames {
            fr.write_values(&mut out);
        }
        out
    }
}

/// Appearance intensities per surface class. A condition acts like weather:
/// a global gain and offset over a shared base palette, plus a small
/// per-class tint.
#[derive(Debug, Clone, Copy)]
struct Palette {
    offroad: f64,
    road: f64,
    vehicle: f64,
    pedestrian: f64,
    red: f64,
    green: f64,
}

impl Palette {
    const BASE: [f64; 6] = [2.0, 5.0, 8.0, 11.0, 9.5, 6.5];

    fn for_condition(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
        let gain = rng.gen_range(0.7..1.1);
        let offset = rng.gen_range(-1.0..1.0);
        let v = Self::BASE.map(|b| (gain * b + offset + rng.gen_range(-0.5..0.5)).clamp(0.0, VALUE_MAX));
        Self {
            offroad: v[0],
            road: v[1],
            vehicle: v[2],
            pedestrian: v[3],
            red: v[4],
            green: v[5],
        }
    }
}

/// Renders the world from `viewpoint`. The ego vehicle's own body is never drawn.
pub fn sense(
    world: &WorldState,
    viewpoint: &Pose,
    condition_seed: u64,
    mode: ChannelMode,
    cfg: &SensorConfig,
) -> SensorFrame {
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let n = h * w;
    let mut codes = vec![0u8; n * mode.channels()];
    let fwd = viewpoint.heading;
    let right = fwd.right_normal();
    let origin = viewpoint.position;
    let half_cell = 0.5 * cfg.cell_forward().max(cfg.cell_lateral());
    let reach = cfg.max_range() + 6.0;

    let actors: Vec<_> = world
        .actors
        .iter()
        .filter(|a| a.active && a.pose.position.distance(origin) < reach)
        .map(|a| (a.kind, a.footprint()))
        .collect();
    let time = world.time();
    // A signal is only visible from the approach it faces.
    let lights: Vec<_> = world
        .town
        .stop_lines
        .iter()
        .filter(|s| {
            s.rect.center.distance(origin) < reach
                && world.town.lane_segments[s.lane].dir.dot(fwd) > 0.5
        })
        .map(|s| {
            let green = world
                .town
                .light_phase(s.intersection, time)
                .is_some_and(|p| p.is_green(s.axis));
            (green, s.rect)
        })
        .collect();
    let palette = Palette::for_condition(condition_seed);
    let mut noise = ChaCha8Rng::seed_from_u64(condition_seed ^ world.tick.wrapping_mul(0xD134_2543_DE82_EF95));
    let max_range = cfg.max_range();

    for row in 0..h {
        for col in 0..w {
            let (f, l) = cfg.cell_offset(row, col);
            let p: Vec2 = origin + fwd * f + right * l;
            let idx = row * w + col;
            let drivable = world.town.is_drivable(p);
            let mut vehicle = false;
            let mut pedestrian = false;
            for (kind, rect) in &actors {
                if rect.contains_with_margin(p, half_cell) {
                    match kind {
                        ActorKind::Vehicle => vehicle = true,
                        ActorKind::Pedestrian => pedestrian = true,
                    }
                }
            }
            let mut red = false;
            let mut green = false;
            for (is_green, rect) in &lights {
                if rect.contains_with_margin(p, half_cell) {
                    if *is_green {
                        green = true;
                    } else {
                        red = true;
                    }
                }
            }
            codes[CH_DRIVABLE * n + idx] = drivable as u8;
            codes[CH_VEHICLE * n + idx] = vehicle as u8;
            codes[CH_PEDESTRIAN * n + idx] = pedestrian as u8;
            codes[CH_RED * n + idx] = red as u8;
            codes[CH_GREEN * n + idx] = green as u8;

            let base = if red {
                palette.red
            } else if green {
                palette.green
            } else if pedestrian {
                palette.pedestrian
            } else if vehicle {
                palette.vehicle
            } else if drivable {
                palette.road
            } else {
                palette.offroad
            };
            let jitter = cfg.appearance_noise;
            let value = if jitter > 0.0 {
                base + noise.gen_range(-jitter..=jitter)
            } else {
                base
            };
            codes[CH_APPEARANCE * n + idx] = encode_value(value);

            if mode == ChannelMode::Asd {
                let occupied = vehicle || pedestrian || !drivable;
                let depth = if occupied {
                    VALUE_MAX * f.hypot(l) / max_range
                } else {
                    VALUE_MAX
                };
                codes[CH_DEPTH * n + idx] = encode_value(depth);
            }
        }
    }
    SensorFrame {
        height: h,
        width: w,
        mode,
        codes,
    }
}
