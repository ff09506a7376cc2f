//! Path discretization, subgoal tracking and the subgoal-angle command.
//!
//! World frame: `x` east, `y` north, angles counter-clockwise in radians.
//! Subgoal angles are reported in degrees with the opposite sign
//! convention: a subgoal to the right of the heading is positive.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum spacing between adjacent subgoal points, meters.
pub const DEFAULT_SPACING: f64 = 2.0;
/// Default lookahead distance used to pick the current subgoal, meters.
pub const DEFAULT_LOOKAHEAD: f64 = 3.0;
/// Half-width of the "straight" branch, degrees.
pub const STRAIGHT_HALF_WIDTH_DEG: f64 = 10.0;
/// How far ahead along the path the route-level maneuver looks, meters.
pub const ROUTE_HORIZON: f64 = 15.0;
/// Path heading change that turns the route command into a turn, degrees.
pub const ROUTE_TURN_DEG: f64 = 30.0;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `theta` radians counter-clockwise from +x.
    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Scalar 2D cross product `self × other`.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotate counter-clockwise by `theta` radians.
    pub fn rotated(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit normal pointing to the right of this direction.
    pub fn right_normal(self) -> Vec2 {
        Vec2::new(self.y, -self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Position, unit heading and speed of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: Vec2,
    pub speed: f64,
}

impl Pose {
    /// Builds a pose from a heading angle in radians (counter-clockwise from +x).
    pub fn new(position: Vec2, theta: f64, speed: f64) -> Self {
        Self {
            position,
            heading: Vec2::from_angle(theta),
            speed: speed.max(0.0),
        }
    }

    pub fn theta(&self) -> f64 {
        self.heading.angle()
    }

    /// The same pose shifted sideways; positive `offset` moves to the right.
    pub fn offset_lateral(&self, offset: f64) -> Pose {
        Pose {
            position: self.position + self.heading.right_normal() * offset,
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }
}

/// Ordered subgoal points with a minimum adjacent spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    points: Vec<Vec2>,
    spacing_min: f64,
}

impl PathSpec {
    /// Wraps already-spaced points, checking the spacing invariant.
    pub fn new(points: Vec<Vec2>, spacing_min: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegeneratePath(format!(
                "{} subgoal point(s), need at least 2",
                points.len()
            )));
        }
        if let Some(w) = points
            .windows(2)
            .position(|w| w[0].distance(w[1]) < spacing_min)
        {
            return Err(Error::DegeneratePath(format!(
                "points {w} and {} closer than {spacing_min} m",
                w + 1
            )));
        }
        Ok(Self {
            points,
            spacing_min,
        })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn spacing_min(&self) -> f64 {
        self.spacing_min
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("path has at least two points")
    }

    /// Polyline length through all subgoal points.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }
}

/// Signed subgoal angle in degrees, in `(-180, 180]`, right of heading positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SubgoalAngle(f64);

impl SubgoalAngle {
    pub fn new(degrees: f64) -> Result<Self> {
        if degrees.is_finite() && degrees > -180.0 && degrees <= 180.0 {
            Ok(Self(degrees))
        } else {
            Err(Error::Config(format!(
                "subgoal angle {degrees} outside (-180, 180]"
            )))
        }
    }

    /// Wraps any finite angle into `(-180, 180]`.
    pub fn wrapped(degrees: f64) -> Self {
        let mut d = degrees % 360.0;
        if d <= -180.0 {
            d += 360.0;
        } else if d > 180.0 {
            d -= 360.0;
        }
        Self(d)
    }

    pub fn degrees(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Left,
    Straight,
    Right,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Left, Branch::Straight, Branch::Right];

    pub fn index(self) -> usize {
        match self {
            Branch::Left => 0,
            Branch::Straight => 1,
            Branch::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Branch> {
        Branch::ALL.get(i).copied()
    }
}

/// Index of the last subgoal point the vehicle has passed. Never moves backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProgressCursor {
    last_passed_index: usize,
}

impl ProgressCursor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(index: usize) -> Self {
        Self {
            last_passed_index: index,
        }
    }

    pub fn index(self) -> usize {
        self.last_passed_index
    }
}

/// Greedy chronological thinning: keep the first point, then every point at
/// least `spacing_min` from the last kept one.
pub fn discretize_path(trajectory: &[Vec2], spacing_min: f64) -> Result<PathSpec> {
    if !(spacing_min > 0.0) {
        return Err(Error::Config(format!(
            "spacing_min must be positive, got {spacing_min}"
        )));
    }
    let mut kept: Vec<Vec2> = Vec::new();
    for &p in trajectory {
        match kept.last() {
            None => kept.push(p),
            Some(&last) if p.distance(last) >= spacing_min => kept.push(p),
            Some(_) => {}
        }
    }
    PathSpec::new(kept, spacing_min)
}

/// Picks the current subgoal: the first point at or after the cursor farther
/// than `lookahead_min` from the vehicle, after advancing the cursor over the
/// consecutive points that are within the lookahead disk.
pub fn select_subgoal(
    path: &PathSpec,
    cursor: ProgressCursor,
    pose: &Pose,
    lookahead_min: f64,
) -> Result<(Vec2, ProgressCursor)> {
    let points = path.points();
    if points.is_empty() {
        return Err(Error::DegeneratePath("empty path".into()));
    }
    if !(lookahead_min > 0.0) {
        return Err(Error::Config(format!(
            "lookahead must be positive, got {lookahead_min}"
        )));
    }
    let here = pose.position;
    let mut idx = cursor.index().min(points.len() - 1);
    while idx + 1 < points.len() && points[idx + 1].distance(here) <= lookahead_min {
        idx += 1;
    }
    let subgoal = points[idx..]
        .iter()
        .copied()
        .find(|p| p.distance(here) > lookahead_min)
        .unwrap_or_else(|| path.last());
    Ok((subgoal, ProgressCursor::at(idx)))
}

/// Unit vector from the vehicle to its subgoal.
pub fn subgoal_direction(subgoal: Vec2, pose: &Pose) -> Result<Vec2> {
    (subgoal - pose.position)
        .normalized()
        .ok_or(Error::CoincidentPoint)
}

/// Signed angle from `heading` to `direction`, degrees, right positive.
pub fn subgoal_angle(direction: Vec2, heading: Vec2) -> Result<SubgoalAngle> {
    for v in [direction, heading] {
        let n = v.norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::InvalidVector(n));
        }
    }
    let ccw = heading.cross(direction).atan2(heading.dot(direction));
    let mut degrees = -ccw.to_degrees();
    if degrees <= -180.0 {
        degrees = 180.0;
    }
    Ok(SubgoalAngle(degrees))
}

/// Subgoal direction and angle for a pose in one call.
pub fn command_for(subgoal: Vec2, pose: &Pose) -> Result<SubgoalAngle> {
    subgoal_angle(subgoal_direction(subgoal, pose)?, pose.heading)
}

/// Route-level maneuver ahead of `cursor`: the signed heading change of the
/// path between the cursor and `horizon` meters further along it. This is a
/// coarse planner intent (follow / turn left / turn right); it depends on
/// the path alone, not on where the vehicle sits relative to it.
pub fn route_command(path: &PathSpec, cursor: ProgressCursor, horizon: f64, turn_deg: f64) -> Branch {
    let pts = path.points();
    if pts.len() < 2 {
        return Branch::Straight;
    }
    let tangent = |j: usize| {
        let j = j.min(pts.len() - 2);
        pts[j + 1] - pts[j]
    };
    let start = cursor.index().min(pts.len() - 2);
    let mut end = start;
    let mut along = 0.0;
    while end + 2 < pts.len() && along < horizon {
        along += pts[end].distance(pts[end + 1]);
        end += 1;
    }
    let (a, b) = (tangent(start), tangent(end));
    let change = -a.cross(b).atan2(a.dot(b)).to_degrees();
    if change > turn_deg {
        Branch::Right
    } else if change < -turn_deg {
        Branch::Left
    } else {
        Branch::Straight
    }
}

/// Navigation input of a policy: the subgoal angle plus the route-level
/// maneuver used by the discrete-command baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub angle: SubgoalAngle,
    pub route: Branch,
}

impl Command {
    pub fn new(angle: SubgoalAngle, route: Branch) -> Self {
        Self { angle, route }
    }
}

/// Uses the angle's own branch as the route maneuver.
impl From<SubgoalAngle> for Command {
    fn from(angle: SubgoalAngle) -> Self {
        Self {
            angle,
            route: discretize_branch(angle),
        }
    }
}

pub fn discretize_branch(angle: SubgoalAngle) -> Branch {
    let d = angle.degrees();
    if d < -STRAIGHT_HALF_WIDTH_DEG {
        Branch::Left
    } else if d <= STRAIGHT_HALF_WIDTH_DEG {
        Branch::Straight
    } else {
        Branch::Right
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_path(n: usize, spacing: f64) -> PathSpec {
        let pts = (0..n).map(|i| Vec2::new(0.0, i as f64 * spacing)).collect();
        PathSpec::new(pts, spacing).unwrap()
    }

    fn north(at: Vec2) -> Pose {
        Pose::new(at, std::f64::consts::FRAC_PI_2, 0.0)
    }

    #[test]
    fn discretize_collinear_half_meter_samples() {
        let traj: Vec<_> = (0..=20).map(|i| Vec2::new(i as f64 * 0.5, 0.0)).collect();
        let path = discretize_path(&traj, 2.0).unwrap();
        let xs: Vec<f64> = path.points().iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn discretize_two_far_points() {
        let traj = [Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0)];
        assert_eq!(discretize_path(&traj, 2.0).unwrap().len(), 2);
    }

    #[test]
    fn discretize_degenerate() {
        let traj = [Vec2::new(1.0, 1.0); 10];
        assert!(matches!(
            discretize_path(&traj, 2.0),
            Err(Error::DegeneratePath(_))
        ));
        assert!(discretize_path(&[Vec2::ZERO], 2.0).is_err());
    }

    #[test]
    fn subgoal_from_path_start() {
        let path = straight_path(10, 2.0);
        let (g, cur) =
            select_subgoal(&path, ProgressCursor::new(), &north(Vec2::ZERO), 3.0).unwrap();
        assert_eq!(g, Vec2::new(0.0, 4.0));
        assert_eq!(cur.index(), 1);
    }

    #[test]
    fn subgoal_advances_one_index_per_spacing() {
        let path = straight_path(10, 2.0);
        let mut cursor = ProgressCursor::new();
        let mut last = None;
        for step in 0..4 {
            let pose = north(Vec2::new(0.0, step as f64 * 2.0));
            let (g, c) = select_subgoal(&path, cursor, &pose, 3.0).unwrap();
            if let Some(prev) = last {
                assert_eq!(g.y - prev, 2.0);
            }
            last = Some(g.y);
            cursor = c;
        }
    }

    #[test]
    fn subgoal_terminal_clamp() {
        let path = straight_path(5, 2.0); // last point at y=8
        let pose = north(Vec2::new(0.0, 7.0));
        let (g, cur) = select_subgoal(&path, ProgressCursor::at(3), &pose, 3.0).unwrap();
        assert_eq!(g, Vec2::new(0.0, 8.0));
        assert_eq!(cur.index(), 4);
    }

    #[test]
    fn subgoal_never_looks_behind_cursor() {
        let path = straight_path(10, 2.0);
        // Vehicle standing near the start but cursor already at 6.
        let (g, cur) =
            select_subgoal(&path, ProgressCursor::at(6), &north(Vec2::ZERO), 3.0).unwrap();
        assert_eq!(cur.index(), 6);
        assert_eq!(g, Vec2::new(0.0, 12.0));
    }

    #[test]
    fn direction_examples() {
        let origin = north(Vec2::ZERO);
        let d = subgoal_direction(Vec2::new(3.0, 4.0), &origin).unwrap();
        assert!((d.x - 0.6).abs() < 1e-15 && (d.y - 0.8).abs() < 1e-15);
        assert_eq!(
            subgoal_direction(Vec2::new(0.0, 5.0), &origin).unwrap(),
            Vec2::new(0.0, 1.0)
        );
        assert!(matches!(
            subgoal_direction(Vec2::ZERO, &origin),
            Err(Error::CoincidentPoint)
        ));
    }

    #[test]
    fn angle_examples() {
        let h = Vec2::new(0.0, 1.0);
        assert_eq!(subgoal_angle(Vec2::new(1.0, 0.0), h).unwrap().degrees(), 90.0);
        assert_eq!(subgoal_angle(Vec2::new(-1.0, 0.0), h).unwrap().degrees(), -90.0);
        assert_eq!(subgoal_angle(h, h).unwrap().degrees(), 0.0);
        assert_eq!(subgoal_angle(-h, h).unwrap().degrees(), 180.0);
        assert_eq!(
            subgoal_angle(Vec2::new(-0.0, -1.0), Vec2::new(0.0, 1.0))
                .unwrap()
                .degrees(),
            180.0
        );
        assert!(matches!(
            subgoal_angle(Vec2::new(2.0, 0.0), h),
            Err(Error::InvalidVector(_))
        ));
    }

    #[test]
    fn branch_bounds() {
        let b = |d: f64| discretize_branch(SubgoalAngle::new(d).unwrap());
        assert_eq!(b(-45.0), Branch::Left);
        assert_eq!(b(-10.000001), Branch::Left);
        assert_eq!(b(-10.0), Branch::Straight);
        assert_eq!(b(10.0), Branch::Straight);
        assert_eq!(b(10.000001), Branch::Right);
        assert_eq!(b(180.0), Branch::Right);
        assert_eq!(b(-179.999), Branch::Left);
    }

    #[test]
    fn angle_range_is_half_open() {
        assert!(SubgoalAngle::new(-180.0).is_err());
        assert!(SubgoalAngle::new(180.0).is_ok());
        assert_eq!(SubgoalAngle::wrapped(-180.0).degrees(), 180.0);
        assert_eq!(SubgoalAngle::wrapped(270.0).degrees(), -90.0);
    }

    #[test]
    fn route_command_sees_corners_within_the_horizon() {
        // north for 40 m, then east: a right turn at (0, 40)
        let mut pts: Vec<Vec2> = (0..=20).map(|i| Vec2::new(0.0, 2.0 * i as f64)).collect();
        pts.extend((1..=20).map(|i| Vec2::new(2.0 * i as f64, 40.0)));
        let path = PathSpec::new(pts.clone(), 2.0).unwrap();
        let at = |i| route_command(&path, ProgressCursor::at(i), ROUTE_HORIZON, ROUTE_TURN_DEG);
        assert_eq!(at(0), Branch::Straight);
        assert_eq!(at(14), Branch::Right);
        assert_eq!(at(25), Branch::Straight);
        let mirrored: Vec<Vec2> = pts.iter().map(|p| Vec2::new(-p.x, p.y)).collect();
        let path = PathSpec::new(mirrored, 2.0).unwrap();
        assert_eq!(
            route_command(&path, ProgressCursor::at(14), ROUTE_HORIZON, ROUTE_TURN_DEG),
            Branch::Left
        );
        let straight = straight_path(30, 2.0);
        for i in 0..30 {
            assert_eq!(
                route_command(&straight, ProgressCursor::at(i), ROUTE_HORIZON, ROUTE_TURN_DEG),
                Branch::Straight
            );
        }
    }
}
