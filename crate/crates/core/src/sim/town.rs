//! Grid-road towns: nodes on a jittered rectilinear grid, two-way roads with
//! one lane per direction (right-hand traffic), square intersection cells and
//! two-phase traffic lights.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec2};
use crate::sim::shapes::OrientedRect;

pub const TOWN_MAGIC: &str = "SGDTOWN";
pub const TOWN_VERSION: u32 = 1;

const BITMAP_RES: f64 = 0.25;
const BITMAP_MARGIN: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownConfig {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_min: f64,
    pub block_max: f64,
    pub lane_width: f64,
    /// Half side of the square intersection cell.
    pub intersection_half: f64,
    /// Probability that a candidate road is removed during generation.
    pub road_removal: f64,
    pub green_s: f64,
    pub all_red_s: f64,
}

impl Default for TownConfig {
    fn default() -> Self {
        Self {
            blocks_x: 4,
            blocks_y: 4,
            block_min: 40.0,
            block_max: 60.0,
            lane_width: 4.0,
            intersection_half: 10.0,
            road_removal: 0.2,
            green_s: 8.0,
            all_red_s: 2.0,
        }
    }
}

impl TownConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_x < 3 || self.blocks_y < 3 {
            return Err(Error::Config(format!(
                "town must be at least 3x3 blocks, got {}x{}",
                self.blocks_x, self.blocks_y
            )));
        }
        if !(self.lane_width > 0.0 && self.intersection_half > self.lane_width) {
            return Err(Error::Config(
                "intersection_half must exceed lane_width > 0".into(),
            ));
        }
        if !(self.block_min >= 2.0 * self.intersection_half + 10.0
            && self.block_max >= self.block_min)
        {
            return Err(Error::Config(
                "blocks too short for the intersection size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.road_removal) {
            return Err(Error::Config("road_removal must be in [0, 1)".into()));
        }
        if !(self.green_s > 0.0 && self.all_red_s >= 0.0) {
            return Err(Error::Config("invalid light timing".into()));
        }
        Ok(())
    }

    pub fn light_cycle_s(&self) -> f64 {
        2.0 * (self.green_s + self.all_red_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    NorthSouth,
    EastWest,
}

impl Axis {
    pub fn of(dir: Vec2) -> Axis {
        if dir.y.abs() >= dir.x.abs() {
            Axis::NorthSouth
        } else {
            Axis::EastWest
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightPhase {
    NorthSouthGreen,
    AllRedAfterNorthSouth,
    EastWestGreen,
    AllRedAfterEastWest,
}

impl LightPhase {
    pub fn is_green(self, axis: Axis) -> bool {
        matches!(
            (self, axis),
            (LightPhase::NorthSouthGreen, Axis::NorthSouth)
                | (LightPhase::EastWestGreen, Axis::EastWest)
        )
    }
}

/// Traffic-light group of one intersection: both axes share a cycle and are
/// never green together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightGroup {
    pub offset_s: f64,
}

impl LightGroup {
    pub fn phase_at(&self, time_s: f64, cfg: &TownConfig) -> LightPhase {
        let t = (time_s + self.offset_s).rem_euclid(cfg.light_cycle_s());
        let g = cfg.green_s;
        let r = cfg.all_red_s;
        if t < g {
            LightPhase::NorthSouthGreen
        } else if t < g + r {
            LightPhase::AllRedAfterNorthSouth
        } else if t < 2.0 * g + r {
            LightPhase::EastWestGreen
        } else {
            LightPhase::AllRedAfterEastWest
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub node: usize,
    pub center: Vec2,
    pub half_size: f64,
    pub light: Option<LightGroup>,
}

impl Intersection {
    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.center.x).abs() <= self.half_size
            && (p.y - self.center.y).abs() <= self.half_size
    }
}

/// Directed lane centerline between two intersection cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub from: usize,
    pub to: usize,
    pub start: Vec2,
    pub end: Vec2,
    pub dir: Vec2,
    pub length: f64,
    pub width: f64,
}

impl LaneSegment {
    /// (distance along the lane from its start, signed lateral offset, right positive).
    pub fn frame(&self, p: Vec2) -> (f64, f64) {
        let d = p - self.start;
        (d.dot(self.dir), d.dot(self.dir.right_normal()))
    }

    pub fn start_pose(&self, speed: f64) -> Pose {
        Pose {
            position: self.start,
            heading: self.dir,
            speed,
        }
    }
}

/// Stop line painted where a lane enters a signalled intersection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopLine {
    pub lane: usize,
    pub intersection: usize,
    pub axis: Axis,
    pub rect: OrientedRect,
}

#[derive(Debug, Clone, PartialEq)]
struct DrivableBitmap {
    origin: Vec2,
    cols: usize,
    rows: usize,
    cells: Vec<bool>,
}

impl DrivableBitmap {
    fn get(&self, p: Vec2) -> bool {
        let cx = ((p.x - self.origin.x) / BITMAP_RES).floor();
        let cy = ((p.y - self.origin.y) / BITMAP_RES).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.cols as f64 || cy >= self.rows as f64 {
            return false;
        }
        self.cells[cy as usize * self.cols + cx as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TownMap {
    pub seed: u64,
    pub config: TownConfig,
    pub nodes: Vec<Vec2>,
    /// Undirected roads as `(a, b)` node pairs with `a < b`.
    pub roads: Vec<(usize, usize)>,
    pub lane_segments: Vec<LaneSegment>,
    pub intersections: Vec<Intersection>,
    pub stop_lines: Vec<StopLine>,
    pub spawn_points: Vec<Pose>,
    outgoing: Vec<Vec<usize>>,
    bitmap: DrivableBitmap,
}

/// Builds a deterministic town for `seed`.
pub fn generate_town(seed: u64, config: &TownConfig) -> Result<TownMap> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = config.blocks_x + 1;
    let ny = config.blocks_y + 1;
    let axis_coords = |n: usize, rng: &mut ChaCha8Rng| {
        let mut v = vec![0.0];
        for _ in 1..n {
            let step = rng.gen_range(config.block_min..=config.block_max);
            v.push(v.last().unwrap() + step.round());
        }
        v
    };
    let xs = axis_coords(nx, &mut rng);
    let ys = axis_coords(ny, &mut rng);
    let node_id = |i: usize, j: usize| j * nx + i;
    let mut nodes = Vec::with_capacity(nx * ny);
    for &y in &ys {
        for &x in &xs {
            nodes.push(Vec2::new(x, y));
        }
    }
    let mut roads = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                roads.push((node_id(i, j), node_id(i + 1, j)));
            }
            if j + 1 < ny {
                roads.push((node_id(i, j), node_id(i, j + 1)));
            }
        }
    }

    let mut order: Vec<usize> = (0..roads.len()).collect();
    order.shuffle(&mut rng);
    let mut removed = vec![false; roads.len()];
    for idx in order {
        if !rng.gen_bool(config.road_removal) {
            continue;
        }
        let (a, b) = roads[idx];
        let degree = |n: usize, removed: &[bool]| {
            roads
                .iter()
                .zip(removed)
                .filter(|(&(p, q), &r)| !r && (p == n || q == n))
                .count()
        };
        if degree(a, &removed) <= 2 || degree(b, &removed) <= 2 {
            continue;
        }
        removed[idx] = true;
        if !connected(nodes.len(), &roads, &removed) {
            removed[idx] = false;
        }
    }
    let roads: Vec<(usize, usize)> = roads
        .into_iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(e, _)| e)
        .collect();

    let cycle = config.light_cycle_s();
    let mut lights = Vec::with_capacity(nodes.len());
    for n in 0..nodes.len() {
        let deg = roads.iter().filter(|&&(a, b)| a == n || b == n).count();
        let offset = rng.gen_range(0.0..cycle);
        lights.push((deg >= 3).then_some(LightGroup { offset_s: offset }));
    }
    TownMap::assemble(seed, config.clone(), nodes, roads, lights)
}

fn connected(n: usize, roads: &[(usize, usize)], removed: &[bool]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for (&(a, b), &r) in roads.iter().zip(removed) {
        if !r {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.iter().all(|&s| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
    UTurn,
}

impl TownMap {
    fn assemble(
        seed: u64,
        config: TownConfig,
        nodes: Vec<Vec2>,
        roads: Vec<(usize, usize)>,
        lights: Vec<Option<LightGroup>>,
    ) -> Result<Self> {
        config.validate()?;
        if lights.len() != nodes.len() {
            return Err(Error::Format("light table does not match nodes".into()));
        }
        let h = config.intersection_half;
        let lw = config.lane_width;
        let mut lane_segments = Vec::with_capacity(roads.len() * 2);
        for &(a, b) in &roads {
            for (from, to) in [(a, b), (b, a)] {
                let pa = nodes[from];
                let pb = nodes[to];
                let dir = (pb - pa)
                    .normalized()
                    .ok_or_else(|| Error::Format("zero-length road".into()))?;
                let right = dir.right_normal() * (lw / 2.0);
                let start = pa + dir * h + right;
                let end = pb - dir * h + right;
                lane_segments.push(LaneSegment {
                    from,
                    to,
                    start,
                    end,
                    dir,
                    length: start.distance(end),
                    width: lw,
                });
            }
        }
        let intersections: Vec<Intersection> = nodes
            .iter()
            .enumerate()
            .map(|(i, &c)| Intersection {
                node: i,
                center: c,
                half_size: h,
                light: lights[i],
            })
            .collect();
        let stop_lines = lane_segments
            .iter()
            .enumerate()
            .filter(|(_, l)| intersections[l.to].light.is_some())
            .map(|(i, l)| StopLine {
                lane: i,
                intersection: l.to,
                axis: Axis::of(l.dir),
                rect: OrientedRect::new(l.end - l.dir * 0.5, l.dir, 0.5, lw / 2.0),
            })
            .collect();
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (i, l) in lane_segments.iter().enumerate() {
            outgoing[l.from].push(i);
        }
        let spawn_points = lane_segments.iter().map(|l| l.start_pose(0.0)).collect();
        let bitmap = rasterize_drivable(&nodes, &roads, &config);
        Ok(Self {
            seed,
            config,
            nodes,
            roads,
            lane_segments,
            intersections,
            stop_lines,
            spawn_points,
            outgoing,
            bitmap,
        })
    }

    pub fn outgoing_lanes(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    pub fn turn_between(&self, lane_in: usize, lane_out: usize) -> Turn {
        let a = self.lane_segments[lane_in].dir;
        let b = self.lane_segments[lane_out].dir;
        if a.dot(b) > 0.5 {
            Turn::Straight
        } else if a.dot(b) < -0.5 {
            Turn::UTurn
        } else if a.cross(b) < 0.0 {
            Turn::Right
        } else {
            Turn::Left
        }
    }

    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.bitmap.get(p)
    }

    pub fn intersection_at(&self, p: Vec2) -> Option<usize> {
        self.intersections.iter().position(|i| i.contains(p))
    }

    /// The lane a vehicle at `pose` is travelling in: heading-compatible,
    /// longitudinally within the segment, closest laterally.
    pub fn lane_of(&self, pose: &Pose) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, lane) in self.lane_segments.iter().enumerate() {
            if lane.dir.dot(pose.heading) <= 0.0 {
                continue;
            }
            let (along, lateral) = lane.frame(pose.position);
            if along < -0.5 || along > lane.length + 0.5 {
                continue;
            }
            if best.map_or(true, |(_, _, l)| lateral.abs() < l.abs()) {
                best = Some((i, along, lateral));
            }
        }
        best
    }

    pub fn light_phase(&self, intersection: usize, time_s: f64) -> Option<LightPhase> {
        self.intersections[intersection]
            .light
            .map(|g| g.phase_at(time_s, &self.config))
    }

    /// The stop line governing a vehicle at `pose`, with its distance ahead
    /// of the vehicle center, if the vehicle is within its lane.
    pub fn governing_stop_line(&self, pose: &Pose) -> Option<(&StopLine, f64)> {
        let (lane, along, lateral) = self.lane_of(pose)?;
        if lateral.abs() > self.config.lane_width / 2.0 {
            return None;
        }
        let sl = self.stop_lines.iter().find(|s| s.lane == lane)?;
        Some((sl, self.lane_segments[lane].length - along))
    }

    /// Polyline of the route through `lanes`, sampled every `step` meters,
    /// including the turn connectors inside intersections.
    pub fn route_polyline(&self, lanes: &[usize], step: f64) -> Vec<Vec2> {
        let mut pts = Vec::new();
        for (k, &li) in lanes.iter().enumerate() {
            let lane = &self.lane_segments[li];
            sample_segment(&mut pts, lane.start, lane.end, step);
            if let Some(&next) = lanes.get(k + 1) {
                self.sample_connector(&mut pts, li, next, step);
            }
        }
        pts
    }

    fn sample_connector(&self, pts: &mut Vec<Vec2>, lane_in: usize, lane_out: usize, step: f64) {
        let a = &self.lane_segments[lane_in];
        let b = &self.lane_segments[lane_out];
        let h = self.config.intersection_half;
        let off = self.config.lane_width / 2.0;
        match self.turn_between(lane_in, lane_out) {
            Turn::Straight | Turn::UTurn => sample_segment(pts, a.end, b.start, step),
            turn => {
                let right = a.dir.right_normal();
                let (center, radius, sweep) = if turn == Turn::Right {
                    (a.end + right * (h - off), h - off, -std::f64::consts::FRAC_PI_2)
                } else {
                    (a.end - right * (h + off), h + off, std::f64::consts::FRAC_PI_2)
                };
                let start_angle = (a.end - center).angle();
                let n = ((radius * sweep.abs()) / step).ceil().max(1.0) as usize;
                for i in 1..n {
                    let t = start_angle + sweep * i as f64 / n as f64;
                    pts.push(center + Vec2::from_angle(t) * radius);
                }
            }
        }
    }

    /// Random lane sequence starting at `start_lane` without U-turns, at least
    /// `min_length` meters long.
    pub fn random_route(&self, rng: &mut impl Rng, start_lane: usize, min_length: f64) -> Vec<usize> {
        let mut lanes = vec![start_lane];
        let mut length = self.lane_segments[start_lane].length;
        while length < min_length {
            let cur = *lanes.last().unwrap();
            let options: Vec<usize> = self
                .outgoing_lanes(self.lane_segments[cur].to)
                .iter()
                .copied()
                .filter(|&l| self.turn_between(cur, l) != Turn::UTurn)
                .collect();
            let next = *options
                .choose(rng)
                .expect("every node joins at least two roads");
            length += self.lane_segments[next].length + self.config.intersection_half * 2.0;
            lanes.push(next);
        }
        lanes
    }

    pub fn bounds(&self) -> (Vec2, Vec2) {
        let lo = self
            .nodes
            .iter()
            .fold(Vec2::new(f64::INFINITY, f64::INFINITY), |m, p| {
                Vec2::new(m.x.min(p.x), m.y.min(p.y))
            });
        let hi = self
            .nodes
            .iter()
            .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| {
                Vec2::new(m.x.max(p.x), m.y.max(p.y))
            });
        (lo, hi)
    }

    /// Line-delimited text serialization; see `docs/formats.md`.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{TOWN_MAGIC} {TOWN_VERSION}");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(
            s,
            "config {} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            c.blocks_x,
            c.blocks_y,
            c.block_min,
            c.block_max,
            c.lane_width,
            c.intersection_half,
            c.road_removal,
            c.green_s,
            c.all_red_s
        );
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "node {i} {:?} {:?}", n.x, n.y);
        }
        for &(a, b) in &self.roads {
            let _ = writeln!(s, "road {a} {b}");
        }
        for (i, x) in self.intersections.iter().enumerate() {
            if let Some(l) = x.light {
                let _ = writeln!(s, "light {i} {:?}", l.offset_s);
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("town file: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        if header != format!("{TOWN_MAGIC} {TOWN_VERSION}") {
            return Err(bad("bad magic or version"));
        }
        let mut seed = None;
        let mut config = None;
        let mut nodes = Vec::new();
        let mut roads = Vec::new();
        let mut light_rows = Vec::new();
        let mut ended = false;
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                tok.get(i)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(&format!("bad number in `{line}`")))
            };
            let int = |i: usize| -> Result<usize> {
                tok.get(i)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(&format!("bad integer in `{line}`")))
            };
            match tok.first().copied() {
                Some("seed") => {
                    seed = Some(
                        tok.get(1)
                            .and_then(|t| t.parse::<u64>().ok())
                            .ok_or_else(|| bad("bad seed"))?,
                    )
                }
                Some("config") => {
                    config = Some(TownConfig {
                        blocks_x: int(1)?,
                        blocks_y: int(2)?,
                        block_min: num(3)?,
                        block_max: num(4)?,
                        lane_width: num(5)?,
                        intersection_half: num(6)?,
                        road_removal: num(7)?,
                        green_s: num(8)?,
                        all_red_s: num(9)?,
                    })
                }
                Some("node") => {
                    if int(1)? != nodes.len() {
                        return Err(bad("nodes out of order"));
                    }
                    nodes.push(Vec2::new(num(2)?, num(3)?));
                }
                Some("road") => roads.push((int(1)?, int(2)?)),
                Some("light") => light_rows.push((int(1)?, num(2)?)),
                Some("end") => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(&format!("unknown record `{line}`"))),
            }
        }
        if !ended {
            return Err(bad("missing end record"));
        }
        let mut lights = vec![None; nodes.len()];
        for (i, off) in light_rows {
            *lights.get_mut(i).ok_or_else(|| bad("light index"))? =
                Some(LightGroup { offset_s: off });
        }
        if roads.iter().any(|&(a, b)| a >= nodes.len() || b >= nodes.len()) {
            return Err(bad("road references unknown node"));
        }
        Self::assemble(
            seed.ok_or_else(|| bad("missing seed"))?,
            config.ok_or_else(|| bad("missing config"))?,
            nodes,
            roads,
            lights,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn sample_segment(pts: &mut Vec<Vec2>, a: Vec2, b: Vec2, step: f64) {
    let len = a.distance(b);
    let n = (len / step).ceil().max(1.0) as usize;
    for i in 0..=n {
        pts.push(a + (b - a) * (i as f64 / n as f64));
    }
}

fn rasterize_drivable(nodes: &[Vec2], roads: &[(usize, usize)], cfg: &TownConfig) -> DrivableBitmap {
    let lo = nodes.iter().fold(Vec2::new(f64::INFINITY, f64::INFINITY), |m, p| {
        Vec2::new(m.x.min(p.x), m.y.min(p.y))
    });
    let hi = nodes
        .iter()
        .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| {
            Vec2::new(m.x.max(p.x), m.y.max(p.y))
        });
    let origin = lo - Vec2::new(BITMAP_MARGIN, BITMAP_MARGIN);
    let cols = ((hi.x - lo.x + 2.0 * BITMAP_MARGIN) / BITMAP_RES).ceil() as usize;
    let rows = ((hi.y - lo.y + 2.0 * BITMAP_MARGIN) / BITMAP_RES).ceil() as usize;
    let mut cells = vec![false; cols * rows];
    let mut fill = |min: Vec2, max: Vec2| {
        let c0 = ((min.x - origin.x) / BITMAP_RES).floor().max(0.0) as usize;
        let c1 = (((max.x - origin.x) / BITMAP_RES).ceil() as usize).min(cols);
        let r0 = ((min.y - origin.y) / BITMAP_RES).floor().max(0.0) as usize;
        let r1 = (((max.y - origin.y) / BITMAP_RES).ceil() as usize).min(rows);
        for r in r0..r1 {
            let y = origin.y + (r as f64 + 0.5) * BITMAP_RES;
            if y < min.y || y > max.y {
                continue;
            }
            for c in c0..c1 {
                let x = origin.x + (c as f64 + 0.5) * BITMAP_RES;
                if x >= min.x && x <= max.x {
                    cells[r * cols + c] = true;
                }
            }
        }
    };
    let h = cfg.intersection_half;
    let hw = cfg.lane_width;
    for &n in nodes {
        fill(n - Vec2::new(h, h), n + Vec2::new(h, h));
    }
    for &(a, b) in roads {
        let (pa, pb) = (nodes[a], nodes[b]);
        let min = Vec2::new(pa.x.min(pb.x) - hw, pa.y.min(pb.y) - hw);
        let max = Vec2::new(pa.x.max(pb.x) + hw, pa.y.max(pb.y) + hw);
        fill(min, max);
    }
    DrivableBitmap {
        origin,
        cols,
        rows,
        cells,
    }
}
