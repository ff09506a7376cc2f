//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdrive::geometry::{Branch, SubgoalAngle};
use sgdrive::model::{backward, batch_loss, build_model, Architecture, BatchItem, InputShape, ModelDims, ModelParameters};
use sgdrive::sim::sensor::ChannelMode;
use sgdrive::sim::Action;

const H: f64 = 1e-4;
/// Denominator guard for coordinates whose gradient is essentially zero.
const FLOOR: f64 = 1e-6;

fn small_dims(rng: &mut impl Rng) -> ModelDims {
    ModelDims {
        conv_channels: vec![rng.gen_range(2..5), rng.gen_range(2..5)],
        feature: rng.gen_range(4..8),
        meas_hidden: rng.gen_range(2..5),
        fusion: rng.gen_range(3..7),
        head_hidden: rng.gen_range(3..6),
        speed_scale: 5.0,
    }
}

fn random_batch(rng: &mut impl Rng, input: InputShape, n: usize, angles: &[f64]) -> Vec<BatchItem> {
    (0..n)
        .map(|i| BatchItem {
            input: (0..input.len()).map(|_| rng.gen_range(0.0..12.0)).collect(),
            speed: rng.gen_range(0.0..5.0),
            command: SubgoalAngle::wrapped(angles[i % angles.len()]).into(),
            label: Action::new(rng.gen_range(-1.0..1.0), rng.gen_bool(0.5)),
            weight: rng.gen_range(0.5..2.0),
        })
        .collect()
}

fn random_model(rng: &mut impl Rng, arch: Architecture, mode: ChannelMode) -> (ModelParameters, InputShape) {
    let input = InputShape {
        k: rng.gen_range(1..3),
        mode,
        grid_h: 6,
        grid_w: 6,
    };
    let mut m = build_model(arch, input, &small_dims(rng), rng.gen()).unwrap();
    // non-zero biases so every code path carries gradient
    for v in &mut m.values {
        *v += rng.gen_range(-0.05..0.05);
    }
    (m, input)
}

struct Check {
    max_rel: f64,
    checked: usize,
    skipped: usize,
}

/// Does a ReLU switch inside `[-h, h]`? For a smooth loss the second
/// difference gives the same curvature at steps h, h/2 and h/4; a kink adds
/// a term that scales like 1/step, and no kink position makes all three agree.
fn crosses_kink(at: &mut impl FnMut(f64) -> f64, f0: f64, fp: f64, fm: f64) -> bool {
    let curv = |p: f64, m: f64, s: f64| (p - 2.0 * f0 + m) / (s * s);
    let c1 = curv(fp, fm, H);
    let c2 = curv(at(H / 2.0), at(-H / 2.0), H / 2.0);
    let c4 = curv(at(H / 4.0), at(-H / 4.0), H / 4.0);
    let scale = c1.abs().max(c2.abs()).max(c4.abs());
    let spread = (c1 - c2).abs().max((c2 - c4).abs()).max((c1 - c4).abs());
    spread > 0.05 * scale + 1e-4
}

fn check_model(m: &ModelParameters, batch: &[BatchItem], lambda: f64) -> Check {
    let analytic = backward(m, batch, lambda).unwrap().grad;
    let f0 = batch_loss(m, batch, lambda).unwrap().total;
    let mut work = m.clone();
    let mut out = Check {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..m.values.len() {
        let orig = work.values[i];
        let mut at = |d: f64| {
            work.values[i] = orig + d;
            let f = batch_loss(&work, batch, lambda).unwrap().total;
            work.values[i] = orig;
            f
        };
        let (fp, fm) = (at(H), at(-H));
        if crosses_kink(&mut at, f0, fp, fm) {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        out.max_rel = out.max_rel.max(rel);
        out.checked += 1;
    }
    out
}

#[test]
fn gradients_match_finite_differences_for_all_architectures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for arch in Architecture::ALL {
        for mode in [ChannelMode::As, ChannelMode::Asd] {
            let mut worst: f64 = 0.0;
            let (mut checked, mut skipped) = (0, 0);
            for _ in 0..5 {
                let (m, input) = random_model(&mut rng, arch, mode);
                let batch = random_batch(&mut rng, input, 3, &[-60.0, 0.0, 35.0]);
                let c = check_model(&m, &batch, rng.gen_range(0.2..0.8));
                worst = worst.max(c.max_rel);
                checked += c.checked;
                skipped += c.skipped;
            }
            assert!(
                skipped * 20 < checked,
                "{arch} {}: skipped {skipped} of {}",
                mode.tag(),
                checked + skipped
            );
            assert!(worst < 1e-4, "{arch} {}: max relative error {worst:e}", mode.tag());
        }
    }
}

#[test]
fn inactive_heads_receive_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for arch in [Architecture::AngleBranched, Architecture::DiscreteBranched] {
        for (branch, angles) in [
            (Branch::Left, [-150.0, -30.0, -10.5]),
            (Branch::Straight, [-10.0, 0.0, 10.0]),
            (Branch::Right, [10.5, 90.0, 180.0]),
        ] {
            let (m, input) = random_model(&mut rng, arch, ChannelMode::As);
            let batch = random_batch(&mut rng, input, 3, &angles);
            let g = backward(&m, &batch, 0.5).unwrap().grad;
            for h in 0..3 {
                let mut prefixes = vec![format!("head{h}_")];
                if arch == Architecture::DiscreteBranched {
                    prefixes.push(format!("fusion{h}."));
                }
                let norm: f64 = m
                    .blocks
                    .iter()
                    .filter(|b| prefixes.iter().any(|p| b.name.starts_with(p.as_str())))
                    .flat_map(|b| g[b.range()].iter())
                    .map(|v| v.abs())
                    .sum();
                if h == branch.index() {
                    assert!(norm > 0.0, "{arch}: active head {h} got no gradient");
                } else {
                    assert_eq!(norm, 0.0, "{arch}: inactive head {h} got gradient");
                }
            }
        }
    }
}

#[test]
fn lambda_zero_leaves_throttle_logits_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, input) = random_model(&mut rng, Architecture::AngleInput, ChannelMode::Asd);
    let batch = random_batch(&mut rng, input, 4, &[5.0]);
    let g = backward(&m, &batch, 0.0).unwrap().grad;
    let out_w = m.block("head0_out.w").unwrap();
    let out_b = m.block("head0_out.b").unwrap();
    let hidden = out_w.shape[1];
    // rows 1 and 2 of the output layer produce the throttle logits
    for v in &g[out_w.offset + hidden..out_w.offset + 3 * hidden] {
        assert_eq!(*v, 0.0);
    }
    assert_eq!(g[out_b.offset + 1], 0.0);
    assert_eq!(g[out_b.offset + 2], 0.0);
}
