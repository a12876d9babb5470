//! Sample-set evaluation: sliced Wasserstein-2, energy distance, ring8
//! mode coverage, and mean pairwise-distance diversity.

use crate::data::{DatasetSpec, RING8_SIGMA};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty sample set")]
    EmptySet,
    #[error("diversity needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// One evaluation row for a (checkpoint, nfe) pair.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub sliced_w2: f64,
    pub energy_dist: f64,
    /// Ring8 only; 0 when not applicable.
    pub modes_recovered: usize,
    pub diversity: f64,
    pub nfe: usize,
}

pub const DEFAULT_N_PROJ: usize = 256;
pub const DEFAULT_MAX_PAIRS: usize = 20_000;

fn unit_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn project(points: &[f64], dim: usize, dir: &[f64]) -> Vec<f64> {
    points
        .chunks(dim)
        .map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Quantile of a sorted slice at position q ∈ [0, 1], linear interpolation.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Exact 1-D squared W2 by sorted pairing (equal sizes) or quantile
/// interpolation (unequal).
fn w2_squared_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if a.len() == b.len() {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64
    } else {
        let m = a.len().max(b.len());
        (0..m)
            .map(|i| {
                let q = (i as f64 + 0.5) / m as f64;
                let d = quantile(&a, q) - quantile(&b, q);
                d * d
            })
            .sum::<f64>()
            / m as f64
    }
}

/// Mean over random unit directions of the exact 1-D squared W2 between
/// the projections of the two sets.
pub fn sliced_w2<R: Rng>(
    a: &[f64],
    b: &[f64],
    dim: usize,
    n_proj: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(MetricsError::DimensionMismatch(a.len() % dim, b.len() % dim));
    }
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let dir = unit_direction(rng, dim);
        acc += w2_squared_1d(project(a, dim, &dir), project(b, dim, &dir));
    }
    Ok(acc / n_proj as f64)
}

/// Energy distance 2·E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖ estimated from up to
/// `max_pairs` random pairs per term.
pub fn energy_distance<R: Rng>(
    a: &[f64],
    b: &[f64],
    dim: usize,
    max_pairs: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let na = a.len() / dim;
    let nb = b.len() / dim;
    let dist = |p: &[f64], q: &[f64]| -> f64 {
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut cross = 0.0;
    for _ in 0..max_pairs {
        let i = rng.gen_range(0..na);
        let j = rng.gen_range(0..nb);
        cross += dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
    }
    let within = |set: &[f64], n: usize, rng: &mut R| -> f64 {
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for _ in 0..max_pairs {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            acc += dist(&set[i * dim..(i + 1) * dim], &set[j * dim..(j + 1) * dim]);
        }
        acc / max_pairs as f64
    };
    let aa = within(a, na, rng);
    let bb = within(b, nb, rng);
    Ok((2.0 * cross / max_pairs as f64 - aa - bb).max(0.0))
}

/// Assign samples to the nearest ring8 mode; a mode counts as recovered
/// when it holds at least 1% of the samples within `radius_tol`.
pub fn mode_coverage(samples: &[f64], radius_tol: f64) -> (usize, [usize; 8]) {
    let centers = DatasetSpec::ring8_mode_centers();
    let n = samples.len() / 2;
    let mut counts = [0usize; 8];
    for row in samples.chunks(2) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in centers.iter().enumerate() {
            let d = (row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best_d.sqrt() <= radius_tol {
            counts[best] += 1;
        }
    }
    let threshold = ((n as f64) * 0.01).max(1.0);
    let recovered = counts.iter().filter(|&&c| c as f64 >= threshold).count();
    (recovered, counts)
}

pub fn ring8_default_radius_tol() -> f64 {
    3.0 * RING8_SIGMA
}

/// Mean Euclidean distance over unordered pairs: exhaustive when the pair
/// count fits in `max_pairs`, otherwise over random distinct pairs.
pub fn diversity<R: Rng>(
    samples: &[f64],
    dim: usize,
    max_pairs: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    let n = samples.len() / dim;
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let dist = |i: usize, j: usize| -> f64 {
        samples[i * dim..(i + 1) * dim]
            .iter()
            .zip(&samples[j * dim..(j + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let total_pairs = n * (n - 1) / 2;
    if total_pairs <= max_pairs {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += dist(i, j);
            }
        }
        Ok(acc / total_pairs as f64)
    } else {
        let mut acc = 0.0;
        for _ in 0..max_pairs {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            acc += dist(i, j);
        }
        Ok(acc / max_pairs as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sliced_w2_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v = sliced_w2(&a, &a, 2, 64, &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sliced_w2_shift_matches_analytic_expectation() {
        // A = B + v: sliced W2 → ‖v‖²/d as n_proj → ∞ (d = 2 here)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shift = [1.2, -0.7];
        let norm2 = shift[0] * shift[0] + shift[1] * shift[1];
        let a: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = a
            .chunks(2)
            .flat_map(|r| vec![r[0] + shift[0], r[1] + shift[1]])
            .collect();
        let v = sliced_w2(&a, &b, 2, 512, &mut rng).unwrap();
        let want = norm2 / 2.0;
        assert!((v - want).abs() / want < 0.05, "{v} vs {want}");
    }

    #[test]
    fn sliced_w2_self_distance_small_for_split_halves() {
        let spec = crate::data::DatasetSpec::GaussUnit { dim: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, _) = spec.sample(10_000, &mut rng);
        let half = data.len() / 2;
        let v = sliced_w2(&data[..half], &data[half..], 2, 256, &mut rng).unwrap();
        assert!(v < 0.01, "self-distance {v}");
    }

    #[test]
    fn sliced_w2_symmetric_with_shared_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let ab = sliced_w2(&a, &b, 2, 128, &mut r1).unwrap();
        let ba = sliced_w2(&b, &a, 2, 128, &mut r2).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn sliced_w2_unequal_sizes_via_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..400).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..700).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v = sliced_w2(&a, &b, 2, 128, &mut rng).unwrap();
        assert!(v < 0.1, "same-distribution distance {v}");
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // rotate rows of a
        let mut a_perm = a[6..].to_vec();
        a_perm.extend_from_slice(&a[..6]);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let v1 = sliced_w2(&a, &b, 2, 64, &mut r1).unwrap();
        let v2 = sliced_w2(&a_perm, &b, 2, 64, &mut r2).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn mode_coverage_exact_draws_recover_all() {
        let spec = crate::data::DatasetSpec::Ring8 { conditional: false };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (data, _) = spec.sample(10_000, &mut rng);
        let (recovered, _) = mode_coverage(&data, ring8_default_radius_tol());
        assert_eq!(recovered, 8);
    }

    #[test]
    fn mode_coverage_collapse_detects_one() {
        let samples: Vec<f64> = (0..1000).flat_map(|_| vec![4.0, 0.0]).collect();
        let (recovered, counts) = mode_coverage(&samples, ring8_default_radius_tol());
        assert_eq!(recovered, 1);
        assert_eq!(counts[0], 1000);
    }

    #[test]
    fn mode_coverage_zero_tolerance() {
        let spec = crate::data::DatasetSpec::Ring8 { conditional: false };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (data, _) = spec.sample(1000, &mut rng);
        let (recovered, _) = mode_coverage(&data, 0.0);
        assert_eq!(recovered, 0);
    }

    #[test]
    fn diversity_collapsed_set_is_zero() {
        let samples: Vec<f64> = (0..100).flat_map(|_| vec![1.0, -1.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(diversity(&samples, 2, 1000, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn diversity_two_points_exact() {
        let samples = vec![0.0, 0.0, 3.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(diversity(&samples, 2, 1000, &mut rng).unwrap(), 5.0);
    }

    #[test]
    fn diversity_gauss_unit_matches_closed_form() {
        // E‖X−Y‖ = √π for 2-D i.i.d. standard normals
        let spec = crate::data::DatasetSpec::GaussUnit { dim: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (data, _) = spec.sample(10_000, &mut rng);
        let v = diversity(&data, 2, 200_000, &mut rng).unwrap();
        let want = std::f64::consts::PI.sqrt();
        assert!((v - want).abs() / want < 0.02, "{v} vs {want}");
    }

    #[test]
    fn energy_distance_separates_shifted_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = a.chunks(2).flat_map(|r| vec![r[0] + 3.0, r[1]]).collect();
        let same = energy_distance(&a, &a, 2, 20_000, &mut rng).unwrap();
        let diff = energy_distance(&a, &b, 2, 20_000, &mut rng).unwrap();
        assert!(same < 0.05, "self distance {same}");
        assert!(diff > 1.0, "shifted distance {diff}");
    }
}
