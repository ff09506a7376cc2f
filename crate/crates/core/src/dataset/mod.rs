//! Expert demonstrations: recording, persistence, path reconstruction and
//! balancing.
//!
//! Samples are addressed lazily by [`SampleRef`] (episode, tick, view); the
//! stacked network input is assembled from the stored frames on demand.

pub mod balance;
pub mod episode;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{discretize_path, Branch, PathSpec, Pose, SubgoalAngle};
use crate::sim::sensor::{ChannelMode, ObservationStack, SensorFrame};
use crate::sim::town::TownMap;
use crate::sim::Action;
pub use balance::{balance, steer_bin, steer_histogram, throttle_class_weights, BalanceSpec, Labeled};
pub use episode::{record_episode, EpisodeHeader, EpisodeLog, RecordSpec, TickRecord, View, ViewLabel};

pub const INDEX_VERSION: u32 = 1;

/// One training tuple with its observation stack materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub observation: ObservationStack,
    pub speed: f64,
    pub command: SubgoalAngle,
    /// Route-level maneuver, the discrete-command baseline's input.
    pub route: Branch,
    pub label: Action,
    pub weight: f64,
    pub red_light_visible: bool,
}

/// Address of one sample: the frame of `view` at `tick` of episode `episode`
/// (position in the dataset's episode list).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub episode: u32,
    pub tick: u32,
    pub view: View,
}

/// A sample reference together with the labels balancing needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledRef {
    pub at: SampleRef,
    pub steer: f64,
    pub throttle: bool,
    pub red_light_visible: bool,
}

impl Labeled for LabeledRef {
    fn steer(&self) -> f64 {
        self.steer
    }
    fn throttle(&self) -> bool {
        self.throttle
    }
    fn red_light_visible(&self) -> bool {
        self.red_light_visible
    }
}

impl Labeled for TrainingSample {
    fn steer(&self) -> f64 {
        self.label.steer
    }
    fn throttle(&self) -> bool {
        self.label.throttle
    }
    fn red_light_visible(&self) -> bool {
        self.red_light_visible
    }
}

/// Recorded episodes plus the frame-stack depth used to build inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<EpisodeLog>,
    pub k: usize,
}

impl Dataset {
    pub fn new(episodes: Vec<EpisodeLog>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("frame stack k must be >= 1".into()));
        }
        if let Some(first) = episodes.first() {
            let h = &first.header;
            if episodes.iter().any(|e| {
                (e.header.grid_h, e.header.grid_w, e.header.mode) != (h.grid_h, h.grid_w, h.mode)
            }) {
                return Err(Error::Format("episodes disagree on frame geometry".into()));
            }
        }
        Ok(Self { episodes, k })
    }

    /// Channel mode the frames were recorded in.
    pub fn recorded_mode(&self) -> Option<ChannelMode> {
        self.episodes.first().map(|e| e.header.mode)
    }

    /// Every (tick, view) of every episode, in storage order.
    pub fn all_refs(&self) -> Vec<LabeledRef> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, rec) in ep.ticks.iter().enumerate() {
                for view in View::ALL {
                    out.push(LabeledRef {
                        at: SampleRef {
                            episode: e as u32,
                            tick: t as u32,
                            view,
                        },
                        steer: rec.views[view as usize].steer,
                        throttle: rec.throttle,
                        red_light_visible: rec.red_light_visible,
                    });
                }
            }
        }
        out
    }

    fn check(&self, r: SampleRef) -> Result<&EpisodeLog> {
        let ep = self
            .episodes
            .get(r.episode as usize)
            .ok_or_else(|| Error::Format(format!("no episode {}", r.episode)))?;
        if r.tick as usize >= ep.ticks.len() {
            return Err(Error::Format(format!(
                "episode {} has no tick {}",
                r.episode, r.tick
            )));
        }
        Ok(ep)
    }

    pub fn record(&self, r: SampleRef) -> Result<&TickRecord> {
        Ok(&self.check(r)?.ticks[r.tick as usize])
    }

    /// The k frames ending at `r.tick`, oldest first; ticks before the start
    /// replicate the first frame.
    pub fn stack_frames(&self, r: SampleRef) -> Result<Vec<&SensorFrame>> {
        let ep = self.check(r)?;
        let t = r.tick as usize;
        Ok((0..self.k)
            .map(|j| ep.frame((t + j + 1).saturating_sub(self.k), r.view))
            .collect())
    }

    /// Appends the stacked network input for `r` in `mode` to `out`.
    pub fn write_input(&self, r: SampleRef, mode: ChannelMode, out: &mut Vec<f64>) -> Result<()> {
        let frames = self.stack_frames(r)?;
        for f in frames {
            if f.mode == mode {
                f.write_values(out);
            } else {
                f.to_mode(mode)?.write_values(out);
            }
        }
        Ok(())
    }

    pub fn sample(&self, r: SampleRef, mode: ChannelMode, weights: (f64, f64)) -> Result<TrainingSample> {
        let frames = self
            .stack_frames(r)?
            .into_iter()
            .map(|f| f.to_mode(mode))
            .collect::<Result<Vec<_>>>()?;
        let rec = self.record(r)?;
        let label = rec.action(r.view);
        Ok(TrainingSample {
            observation: ObservationStack::from_frames(frames)?,
            speed: rec.pose.speed,
            command: rec.views[r.view as usize].angle,
            route: rec.route,
            label,
            weight: if label.throttle { weights.1 } else { weights.0 },
            red_light_visible: rec.red_light_visible,
        })
    }
}

/// Rebuilds the driven path from the chronological ego positions of `log`.
pub fn reconstruct_path(log: &EpisodeLog, spacing_min: f64) -> Result<PathSpec> {
    if log.ticks.is_empty() {
        return Err(Error::DegeneratePath("empty episode log".into()));
    }
    discretize_path(&log.positions(), spacing_min)
}

/// A random lane-following route of at least `min_length` meters starting at
/// the beginning of a random lane, discretized with `spacing`. The returned
/// start pose carries `start_speed`; episodes begin already cruising.
pub fn plan_route(
    town: &TownMap,
    rng: &mut impl Rng,
    min_length: f64,
    spacing: f64,
    start_speed: f64,
) -> Result<(PathSpec, Pose)> {
    let lanes: Vec<usize> = (0..town.lane_segments.len()).collect();
    let &start = lanes
        .choose(rng)
        .ok_or_else(|| Error::DegeneratePath("town has no lanes".into()))?;
    let route = town.random_route(rng, start, min_length);
    let poly = town.route_polyline(&route, 0.25);
    let path = discretize_path(&poly, spacing)?;
    Ok((path, town.lane_segments[start].start_pose(start_speed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub episode_id: u32,
    pub town_seed: u64,
    pub condition_seed: u64,
    pub n_ticks: u32,
}

/// Human-readable sidecar listing the episode files of a collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub k: usize,
    pub mode: ChannelMode,
    pub episodes: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_str(&fs::read_to_string(path)?)?;
        if idx.version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset index version {}",
                idx.version
            )));
        }
        Ok(idx)
    }

    /// Loads every listed episode; files are resolved relative to `dir`.
    pub fn load_dataset(&self, dir: &Path) -> Result<Dataset> {
        let episodes = self
            .episodes
            .iter()
            .map(|e| EpisodeLog::load(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(episodes, self.k)
    }

    pub fn episode_path(dir: &Path, episode_id: u32) -> PathBuf {
        dir.join(format!("episode_{episode_id:05}.sgdrv"))
    }
}

/// Output of balancing: the kept sample references and throttle class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSet {
    pub version: u32,
    pub spec: BalanceSpec,
    /// (stop, go) weights; `None` when a class is missing.
    pub class_weights: Option<(f64, f64)>,
    pub samples: Vec<LabeledRef>,
}

impl BalancedSet {
    pub fn build(refs: &[LabeledRef], spec: &BalanceSpec) -> Result<Self> {
        let samples = balance(refs, spec)?;
        let class_weights = throttle_class_weights(&samples).ok();
        Ok(Self {
            version: INDEX_VERSION,
            spec: *spec,
            class_weights,
            samples,
        })
    }

    pub fn weight_of(&self, throttle: bool) -> f64 {
        match self.class_weights {
            Some((w0, w1)) => {
                if throttle {
                    w1
                } else {
                    w0
                }
            }
            None => 1.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes a `bin,lo,hi,count` histogram CSV.
pub fn histogram_csv(counts: &[usize]) -> String {
    let n = counts.len() as f64;
    let mut s = String::from("bin,lo,hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = -1.0 + 2.0 * i as f64 / n;
        let hi = -1.0 + 2.0 * (i + 1) as f64 / n;
        s.push_str(&format!("{i},{lo:.6},{hi:.6},{c}\n"));
    }
    s
}
