use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};

const CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// One-sided p-value for "system 1 beats system 2".
    pub p_value: f64,
    pub mean_difference: f64,
    pub n_pairs: usize,
    pub resamples: usize,
    /// All `n^n` resamples were enumerated instead of drawn.
    pub exact: bool,
    /// Every pair was identical; `p = 1` by convention.
    pub degenerate: bool,
}

/// Paired bootstrap over seed indices: the fraction of resamples (with
/// replacement) whose mean difference `system1 − system2` is `<= 0`.
///
/// When `n^n <= resamples` every resample is enumerated. Random resamples are
/// drawn in fixed chunks with per-chunk seeds, so the result does not depend
/// on the execution mode.
pub fn paired_bootstrap(pairs: &[(f64, f64)], resamples: usize, seed: u64, exec: Exec) -> Result<BootstrapResult> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::invalid("paired bootstrap needs at least 2 pairs"));
    }
    if resamples == 0 {
        return Err(Error::invalid("paired bootstrap needs at least 1 resample"));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("paired bootstrap needs finite metrics"));
    }
    let mean_difference = diffs.iter().sum::<f64>() / n as f64;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(BootstrapResult { p_value: 1.0, mean_difference, n_pairs: n, resamples: 0, exact: false, degenerate: true });
    }
    let total = (n as f64).powi(n as i32);
    if total <= resamples as f64 {
        let total = n.pow(n as u32);
        let mut hits = 0usize;
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            // Sum in index order so every resample's mean is computed the same way.
            let s: f64 = idx.iter().map(|&i| diffs[i]).sum();
            if s <= 0.0 {
                hits += 1;
            }
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < n {
                    break;
                }
                *slot = 0;
            }
        }
        return Ok(BootstrapResult {
            p_value: hits as f64 / total as f64,
            mean_difference,
            n_pairs: n,
            resamples: total,
            exact: true,
            degenerate: false,
        });
    }
    let chunks = resamples.div_ceil(CHUNK);
    let counts = exec.map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, c as u64]));
        let len = CHUNK.min(resamples - c * CHUNK);
        (0..len)
            .filter(|_| {
                let s: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
                s <= 0.0
            })
            .count()
    });
    let hits: usize = counts.iter().sum();
    Ok(BootstrapResult {
        p_value: hits as f64 / resamples as f64,
        mean_difference,
        n_pairs: n,
        resamples,
        exact: false,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent enumeration of all 27 resamples of three differences.
    #[test]
    fn three_pairs_enumerated() {
        let diffs = [1.0, 1.0, -1.0];
        let mut hits = 0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    if diffs[a] + diffs[b] + diffs[c] <= 0.0 {
                        hits += 1;
                    }
                }
            }
        }
        assert_eq!(hits, 7);
        let r = paired_bootstrap(&[(1.0, 0.0), (1.0, 0.0), (-1.0, 0.0)], 10_000, 0, Exec::Sequential).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 7.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn constant_advantage_gives_tiny_p() {
        let pairs: Vec<(f64, f64)> = (0..30).map(|i| (0.8 + i as f64 * 0.001, 0.7 + i as f64 * 0.001)).collect();
        let r = paired_bootstrap(&pairs, 10_000, 1, Exec::Sequential).unwrap();
        assert!(r.p_value <= 1.0 / 10_000.0);
    }

    #[test]
    fn symmetric_differences_near_half() {
        let mut pairs = Vec::new();
        for i in 1..=15 {
            pairs.push((i as f64, 0.0));
            pairs.push((0.0, i as f64));
        }
        let r = paired_bootstrap(&pairs, 10_000, 3, Exec::Sequential).unwrap();
        assert!((r.p_value - 0.5).abs() < 0.05, "{}", r.p_value);
    }

    #[test]
    fn degenerate_and_invalid() {
        let r = paired_bootstrap(&[(1.0, 1.0), (2.0, 2.0)], 100, 0, Exec::Sequential).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(paired_bootstrap(&[(1.0, 0.0)], 100, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        let pairs: Vec<(f64, f64)> = (0..12).map(|i| ((i as f64).sin(), 0.1)).collect();
        let a = paired_bootstrap(&pairs, 5_500, 9, Exec::Sequential).unwrap();
        let b = paired_bootstrap(&pairs, 5_500, 9, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
