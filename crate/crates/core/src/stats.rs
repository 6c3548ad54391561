//! Small order-statistics helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Median (mean of the two middle values for even lengths). Reorders `values`.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let n = values.len();
    let (_, hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_in_place(&mut values.to_vec())
}

/// Standard error of the median by bootstrap resampling.
pub fn bootstrap_median_se(values: &[f64], resamples: usize, seed: u64) -> f64 {
    assert!(!values.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut buf = vec![0.0; n];
    let meds: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.gen_range(0..n)];
            }
            median_in_place(&mut buf)
        })
        .collect();
    let mean = meds.iter().sum::<f64>() / resamples as f64;
    let var = meds.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (resamples.max(2) - 1) as f64;
    var.sqrt()
}
