//! Closed-loop rollouts and metric aggregation.

use std::sync::Arc;

use proptest::prelude::*;
use sgdrive::evaluation::{
    aggregate, evaluate, generate_eval_paths, rollout, CollisionCounts, EpisodeResult, EvalConfig,
    EvalReport, Policy, RolloutEnv, Termination,
};
use sgdrive::expert::ExpertConfig;
use sgdrive::model::{build_model, Architecture, InputShape, ModelDims, ModelParameters};
use sgdrive::sim::actors::TrafficConfig;
use sgdrive::sim::sensor::{ChannelMode, SensorConfig};
use sgdrive::sim::town::{generate_town, TownConfig, TownMap};
use sgdrive::sim::VehicleParams;

fn env() -> RolloutEnv {
    RolloutEnv {
        dt: 0.2,
        vehicle: VehicleParams::default(),
        traffic: TrafficConfig::default(),
        sensor: SensorConfig {
            grid_h: 16,
            grid_w: 16,
            ..SensorConfig::default()
        },
    }
}

fn town() -> Arc<TownMap> {
    Arc::new(generate_town(2, &TownConfig::default()).unwrap())
}

fn cfg(n: usize, actors: bool) -> EvalConfig {
    EvalConfig {
        n_paths: n,
        path_length: 150.0,
        actors,
        ..EvalConfig::default()
    }
}

/// A network whose output ignores its input: steer `tanh(steer_raw)`,
/// throttle `go`.
fn constant_policy(steer_raw: f64, go: bool) -> ModelParameters {
    let input = InputShape {
        k: 1,
        mode: ChannelMode::As,
        grid_h: 16,
        grid_w: 16,
    };
    let dims = ModelDims {
        conv_channels: vec![2],
        feature: 2,
        meas_hidden: 2,
        fusion: 2,
        head_hidden: 2,
        speed_scale: 5.0,
    };
    let mut m = build_model(Architecture::AngleInput, input, &dims, 0).unwrap();
    m.values.iter_mut().for_each(|v| *v = 0.0);
    let b = m.block("head0_out.b").unwrap().offset;
    m.values[b] = steer_raw;
    m.values[b + if go { 2 } else { 1 }] = 5.0;
    m
}

#[test]
fn rollouts_are_deterministic() {
    let (town, env, expert) = (town(), env(), ExpertConfig::default());
    let c = cfg(3, true);
    let paths = generate_eval_paths(&town, &c, &env, &expert).unwrap();
    let m = build_model(
        Architecture::AngleBranched,
        InputShape { k: 2, mode: ChannelMode::Asd, grid_h: 16, grid_w: 16 },
        &ModelDims::default(),
        4,
    )
    .unwrap();
    for policy in [Policy::Expert(&expert), Policy::Model(&m)] {
        let a = evaluate(policy, &town, &paths, &c, &env, &expert, true, 1).unwrap();
        let b = evaluate(policy, &town, &paths, &c, &env, &expert, true, 3).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn always_stop_policy_gets_stuck() {
    let (town, env, expert) = (town(), env(), ExpertConfig::default());
    let c = EvalConfig {
        stuck_timeout: 30,
        ..cfg(2, false)
    };
    let paths = generate_eval_paths(&town, &c, &env, &expert).unwrap();
    let m = constant_policy(0.0, false);
    let (r, _) = evaluate(Policy::Model(&m), &town, &paths, &c, &env, &expert, false, 1).unwrap();
    for e in &r.episodes {
        assert_eq!(e.termination, Termination::Stuck);
        assert!(!e.success);
        // the first tick may still register progress from the start point
        assert!((30..=31).contains(&e.ticks), "{}", e.ticks);
    }
    assert_eq!(r.success_rate, 0.0);
    assert_eq!(r.normal_driving_rate, None);
}

#[test]
fn collisions_count_contact_onsets_not_ticks() {
    let (town, env, expert) = (town(), env(), ExpertConfig::default());
    let paths = generate_eval_paths(&town, &cfg(1, false), &env, &expert).unwrap();
    let c = EvalConfig {
        max_ticks: 200,
        stuck_timeout: 200,
        ..cfg(1, false)
    };
    // full right lock: circles into the curb and scrapes along it
    let m = constant_policy(3.0, true);
    let (r, trace) = rollout(Policy::Model(&m), &town, &paths[0], 0, &c, &env, &expert, 2, 0, true).unwrap();
    let flags: Vec<bool> = trace.iter().map(|t| t.collisions & 4 != 0).collect();
    let contact_ticks = flags.iter().filter(|f| **f).count();
    let onsets = flags
        .iter()
        .enumerate()
        .filter(|(i, f)| **f && (*i == 0 || !flags[i - 1]))
        .count();
    assert!(contact_ticks > onsets, "contacts never lasted more than one tick");
    assert_eq!(r.collisions.other as usize, onsets);
}

fn result(i: usize, success: bool, dist: f64, bad: f64, veh: u32) -> EpisodeResult {
    EpisodeResult {
        path_index: i,
        condition_seed: 2,
        success,
        termination: if success { Termination::Goal } else { Termination::Stuck },
        ticks: 100,
        distance_total: dist,
        distance_non_normal: bad,
        collisions: CollisionCounts { vehicle: veh, pedestrian: 0, other: 0 },
        steer_deviation: 0.0,
        throttle_mismatch: 0.0,
        failure_cause: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregation_ignores_episode_order(
        raw in prop::collection::vec((any::<bool>(), 1.0..500.0f64, 0.0..1.0f64, 0u32..4), 1..30),
        seed in any::<u64>(),
    ) {
        let rs: Vec<EpisodeResult> = raw
            .iter()
            .enumerate()
            .map(|(i, &(s, d, f, v))| result(i, s, d, d * f, v))
            .collect();
        let mut shuffled = rs.clone();
        use rand::{seq::SliceRandom, SeedableRng};
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate("p", &rs).unwrap();
        let b = aggregate("p", &shuffled).unwrap();
        prop_assert_eq!(a.success_rate, b.success_rate);
        prop_assert_eq!(a.normal_driving_rate, b.normal_driving_rate);
        prop_assert_eq!(a.collisions_per_km, b.collisions_per_km);
        let ok = rs.iter().filter(|r| r.success).count();
        prop_assert!((a.success_rate - 100.0 * ok as f64 / rs.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn report_json_round_trip() {
    let r = aggregate("x", &[result(0, true, 120.0, 3.0, 1), result(1, false, 40.0, 0.0, 0)]).unwrap();
    assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
}
