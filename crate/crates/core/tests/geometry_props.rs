//! Property tests of path discretization, subgoal selection and angles.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use sgdrive::geometry::{
    command_for, discretize_branch, discretize_path, select_subgoal, subgoal_angle, Branch, PathSpec,
    Pose, ProgressCursor, SubgoalAngle, Vec2,
};
use sgdrive::Error;

fn point() -> impl Strategy<Value = Vec2> {
    (-50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y)| Vec2::new(x, y))
}

fn random_walk() -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec((0.0..1.5f64, -0.6..0.6f64), 2..200).prop_map(|steps| {
        let mut p = Vec2::ZERO;
        let mut theta: f64 = 0.0;
        steps
            .into_iter()
            .map(|(len, turn)| {
                theta += turn;
                p = p + Vec2::from_angle(theta) * len;
                p
            })
            .collect()
    })
}

/// Discretizes `traj`; a walk that never leaves the spacing disk around its
/// start yields a single point, which must be reported as degenerate.
fn discretized(traj: &[Vec2], spacing: f64) -> Result<Option<PathSpec>, TestCaseError> {
    match discretize_path(traj, spacing) {
        Ok(path) => Ok(Some(path)),
        Err(Error::DegeneratePath(_)) => {
            prop_assert!(traj.iter().all(|p| p.distance(traj[0]) < spacing));
            Ok(None)
        }
        Err(e) => Err(TestCaseError::fail(e.to_string())),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn discretized_points_respect_spacing(traj in random_walk(), spacing in 0.5..4.0f64) {
        let Some(path) = discretized(&traj, spacing)? else { return Ok(()) };
        prop_assert_eq!(path.points()[0], traj[0]);
        for w in path.points().windows(2) {
            prop_assert!(w[0].distance(w[1]) >= spacing);
        }
        // every kept point comes from the trajectory, in chronological order
        let mut from = 0;
        for p in path.points() {
            let at = traj[from..].iter().position(|q| q == p).unwrap();
            from += at + 1;
        }
    }

    #[test]
    fn discretization_is_idempotent(traj in random_walk(), spacing in 0.5..4.0f64) {
        let Some(once) = discretized(&traj, spacing)? else { return Ok(()) };
        let twice = discretize_path(once.points(), spacing).unwrap();
        prop_assert_eq!(once.points(), twice.points());
    }

    #[test]
    fn angle_is_in_half_open_range_and_flips_under_mirroring(
        d in 0.0..std::f64::consts::TAU,
        h in 0.0..std::f64::consts::TAU,
    ) {
        let (dir, head) = (Vec2::from_angle(d), Vec2::from_angle(h));
        let a = subgoal_angle(dir, head).unwrap().degrees();
        prop_assert!(a > -180.0 && a <= 180.0);
        let mirror = |v: Vec2| Vec2::new(v.x, -v.y);
        let m = subgoal_angle(mirror(dir), mirror(head)).unwrap().degrees();
        if a.abs() < 179.999 {
            prop_assert!((a + m).abs() < 1e-9, "{a} vs {m}");
        }
    }

    #[test]
    fn angle_is_invariant_under_rigid_motion(
        sub in point(), pos in point(), heading in -3.2..3.2f64,
        rot in -3.2..3.2f64, shift in point(),
    ) {
        prop_assume!(sub.distance(pos) > 1e-3);
        let pose = Pose::new(pos, heading, 0.0);
        let moved = Pose::new(pos.rotated(rot) + shift, heading + rot, 0.0);
        let a = command_for(sub, &pose).unwrap().degrees();
        let b = command_for(sub.rotated(rot) + shift, &moved).unwrap().degrees();
        let diff = SubgoalAngle::wrapped(a - b).degrees();
        prop_assert!(diff.abs() < 1e-7, "{a} vs {b}");
    }

    #[test]
    fn branches_partition_the_circle(deg in -179.999..180.0f64) {
        let b = discretize_branch(SubgoalAngle::new(deg).unwrap());
        let expected = if deg < -10.0 {
            Branch::Left
        } else if deg <= 10.0 {
            Branch::Straight
        } else {
            Branch::Right
        };
        prop_assert_eq!(b, expected);
    }

    #[test]
    fn cursor_is_monotone_and_subgoal_lies_ahead(traj in random_walk(), lookahead in 1.0..5.0f64) {
        let Some(path) = discretized(&traj, 2.0)? else { return Ok(()) };
        let mut cursor = ProgressCursor::new();
        for (i, &p) in traj.iter().enumerate() {
            let heading = traj.get(i + 1).map_or(0.0, |n| (*n - p).angle());
            let pose = Pose::new(p, heading, 0.0);
            let (sub, next) = select_subgoal(&path, cursor, &pose, lookahead).unwrap();
            prop_assert!(next.index() >= cursor.index());
            let pos = path.points().iter().position(|q| *q == sub).unwrap();
            prop_assert!(pos >= next.index());
            prop_assert!(sub.distance(p) > lookahead || sub == path.last());
            cursor = next;
        }
    }
}
