//! Steering-histogram balancing and throttle class weights.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything carrying the labels balancing looks at.
pub trait Labeled {
    fn steer(&self) -> f64;
    fn throttle(&self) -> bool;
    fn red_light_visible(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub n_bins: usize,
    pub cap_per_bin: usize,
    pub rng_seed: u64,
    /// Red-light samples to re-inject; `None` means 10% of the capped set.
    pub light_injection_count: Option<usize>,
}

impl Default for BalanceSpec {
    fn default() -> Self {
        Self {
            n_bins: 199,
            cap_per_bin: 200,
            rng_seed: 0,
            light_injection_count: None,
        }
    }
}

impl BalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 3 || self.n_bins % 2 == 0 {
            return Err(Error::Config(format!(
                "n_bins must be odd and >= 3, got {}",
                self.n_bins
            )));
        }
        if self.cap_per_bin == 0 {
            return Err(Error::Config("cap_per_bin must be >= 1".into()));
        }
        Ok(())
    }
}

/// Equal-width bins over `[-1, 1]`; a steer of exactly 1 goes to the last bin.
pub fn steer_bin(steer: f64, n_bins: usize) -> usize {
    let b = ((steer.clamp(-1.0, 1.0) + 1.0) / 2.0 * n_bins as f64).floor() as usize;
    b.min(n_bins - 1)
}

pub fn steer_histogram<T: Labeled>(samples: &[T], n_bins: usize) -> Vec<usize> {
    let mut h = vec![0; n_bins];
    for s in samples {
        h[steer_bin(s.steer(), n_bins)] += 1;
    }
    h
}

/// Caps every steer bin at `cap_per_bin` by seeded uniform subsampling, then
/// re-injects samples with a visible red light drawn from the original list.
/// An injected sample landing in a full bin displaces a random non-light
/// member of that bin, so no bin ever exceeds the cap.
pub fn balance<T: Labeled + Clone>(samples: &[T], spec: &BalanceSpec) -> Result<Vec<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); spec.n_bins];
    for (i, s) in samples.iter().enumerate() {
        bins[steer_bin(s.steer(), spec.n_bins)].push(i);
    }
    for bin in &mut bins {
        if bin.len() > spec.cap_per_bin {
            let mut keep: Vec<usize> = index::sample(&mut rng, bin.len(), spec.cap_per_bin)
                .into_iter()
                .map(|j| bin[j])
                .collect();
            keep.sort_unstable();
            *bin = keep;
        }
    }
    let capped: usize = bins.iter().map(Vec::len).sum();
    let want = spec
        .light_injection_count
        .unwrap_or((capped as f64 * 0.1).round() as usize);
    let pool: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].red_light_visible())
        .collect();
    if want > 0 && !pool.is_empty() {
        let drawn: Vec<usize> = if want <= pool.len() {
            index::sample(&mut rng, pool.len(), want)
                .into_iter()
                .map(|j| pool[j])
                .collect()
        } else {
            (0..want).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        for i in drawn {
            let bin = &mut bins[steer_bin(samples[i].steer(), spec.n_bins)];
            if bin.len() < spec.cap_per_bin {
                bin.push(i);
                continue;
            }
            let victims: Vec<usize> = (0..bin.len())
                .filter(|&j| !samples[bin[j]].red_light_visible())
                .collect();
            if let Some(&j) = victims.choose(&mut rng) {
                bin[j] = i;
            }
        }
    }
    let mut out: Vec<T> = bins
        .into_iter()
        .flatten()
        .map(|i| samples[i].clone())
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// Inverse-frequency weights `N / (2 N_c)` for (stop, go).
pub fn throttle_class_weights<T: Labeled>(samples: &[T]) -> Result<(f64, f64)> {
    let n = samples.len();
    let go = samples.iter().filter(|s| s.throttle()).count();
    let stop = n - go;
    if go == 0 || stop == 0 {
        return Err(Error::SingleClass(format!("{stop} stop / {go} go samples")));
    }
    Ok((
        n as f64 / (2.0 * stop as f64),
        n as f64 / (2.0 * go as f64),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    struct S {
        steer: f64,
        go: bool,
        red: bool,
        id: usize,
    }

    impl Labeled for S {
        fn steer(&self) -> f64 {
            self.steer
        }
        fn throttle(&self) -> bool {
            self.go
        }
        fn red_light_visible(&self) -> bool {
            self.red
        }
    }

    fn s(id: usize, steer: f64, go: bool, red: bool) -> S {
        S { steer, go, red, id }
    }

    #[test]
    fn bin_edges() {
        assert_eq!(steer_bin(-1.0, 199), 0);
        assert_eq!(steer_bin(1.0, 199), 198);
        assert_eq!(steer_bin(0.0, 199), 99);
        assert_eq!(steer_bin(0.004, 199), 99);
        assert_eq!(steer_bin(-0.006, 199), 98);
    }

    #[test]
    fn under_cap_is_permutation() {
        let xs: Vec<S> = (0..50).map(|i| s(i, i as f64 / 50.0 - 0.5, true, false)).collect();
        let spec = BalanceSpec {
            light_injection_count: Some(0),
            ..BalanceSpec::default()
        };
        let mut out = balance(&xs, &spec).unwrap();
        out.sort_by_key(|x| x.id);
        assert_eq!(out, xs);
    }

    #[test]
    fn crowded_bin_capped_exactly() {
        let xs: Vec<S> = (0..5000).map(|i| s(i, 0.0, true, false)).collect();
        let spec = BalanceSpec {
            cap_per_bin: 2000,
            light_injection_count: Some(0),
            ..BalanceSpec::default()
        };
        let out = balance(&xs, &spec).unwrap();
        assert_eq!(out.len(), 2000);
        let mut ids: Vec<_> = out.iter().map(|x| x.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 2000);
    }

    #[test]
    fn injection_respects_cap_and_adds_light_samples() {
        let mut xs: Vec<S> = (0..1000).map(|i| s(i, 0.0, true, false)).collect();
        xs.extend((1000..1050).map(|i| s(i, 0.0, false, true)));
        xs.extend((1050..1060).map(|i| s(i, 0.5, false, true)));
        let spec = BalanceSpec {
            cap_per_bin: 100,
            light_injection_count: Some(40),
            ..BalanceSpec::default()
        };
        let out = balance(&xs, &spec).unwrap();
        assert!(steer_histogram(&out, 199).iter().all(|&c| c <= 100));
        let lights = out.iter().filter(|x| x.red).count();
        assert!(lights > 100 * 50 / 1050 + 10, "only {lights} light samples");
    }

    #[test]
    fn empty_in_empty_out() {
        let xs: Vec<S> = vec![];
        assert!(balance(&xs, &BalanceSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn rejects_even_bins() {
        let spec = BalanceSpec {
            n_bins: 200,
            ..BalanceSpec::default()
        };
        assert!(balance::<S>(&[], &spec).is_err());
    }

    #[test]
    fn class_weight_examples() {
        let half: Vec<S> = (0..10).map(|i| s(i, 0.0, i % 2 == 0, false)).collect();
        assert_eq!(throttle_class_weights(&half).unwrap(), (1.0, 1.0));
        let skew: Vec<S> = (0..100).map(|i| s(i, 0.0, i >= 10, false)).collect();
        let (w0, w1) = throttle_class_weights(&skew).unwrap();
        assert!((w0 - 5.0).abs() < 1e-12);
        assert!((w1 - 0.5556).abs() < 1e-4);
        let single: Vec<S> = (0..5).map(|i| s(i, 0.0, true, false)).collect();
        assert!(matches!(
            throttle_class_weights(&single),
            Err(Error::SingleClass(_))
        ));
    }
}
