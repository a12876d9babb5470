//! Synthetic target distributions with exact samplers, plus closed-form
//! conditional velocities for the specs that admit them (used as oracles
//! by the loss and score tests).

use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset id '{0}' (expected ring8, checkerboard, two_moons, gauss_unit, point_mass)")]
    UnknownId(String),
    #[error("no closed-form velocity for dataset '{0}'")]
    NoClosedForm(String),
}

pub const RING8_RADIUS: f64 = 4.0;
pub const RING8_SIGMA: f64 = 0.15;

/// A synthetic target distribution. All samplers are exact and
/// deterministic under a fixed RNG.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Eight Gaussians on a ring: modes at radius 4, angles 2πk/8, σ = 0.15.
    Ring8 { conditional: bool },
    /// Uniform over the black cells of a 4x4 checkerboard on [-2, 2]².
    Checkerboard,
    /// Two interleaved half-moons with Gaussian noise.
    TwoMoons { noise: f64 },
    /// Standard normal N(0, I_d).
    GaussUnit { dim: usize },
    /// Degenerate point mass at a fixed center.
    PointMass { center: Vec<f64> },
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Ring8 { .. } | DatasetSpec::Checkerboard | DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::GaussUnit { dim } => *dim,
            DatasetSpec::PointMass { center } => center.len(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DatasetSpec::Ring8 { conditional: true } => 8,
            _ => 0,
        }
    }

    pub fn ring8_mode_centers() -> Vec<[f64; 2]> {
        (0..8)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                [RING8_RADIUS * angle.cos(), RING8_RADIUS * angle.sin()]
            })
            .collect()
    }

    /// Draw `n` samples; returns a flat row-major [n, dim] buffer and one
    /// label per sample (mode index for ring8, 0 elsewhere).
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        match self {
            DatasetSpec::Ring8 { .. } => {
                let centers = Self::ring8_mode_centers();
                for _ in 0..n {
                    let k = rng.gen_range(0..8usize);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.push(centers[k][0] + RING8_SIGMA * nx);
                    data.push(centers[k][1] + RING8_SIGMA * ny);
                    labels.push(k);
                }
            }
            DatasetSpec::Checkerboard => {
                // black cells of a 4x4 grid over [-2,2]², uniform within a cell
                let black: Vec<(usize, usize)> = (0..4)
                    .flat_map(|i| (0..4).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                for _ in 0..n {
                    let (i, j) = black[rng.gen_range(0..black.len())];
                    data.push(-2.0 + i as f64 + rng.gen_range(0.0..1.0));
                    data.push(-2.0 + j as f64 + rng.gen_range(0.0..1.0));
                    labels.push(0);
                }
            }
            DatasetSpec::TwoMoons { noise } => {
                for _ in 0..n {
                    let outer = rng.gen_bool(0.5);
                    let phi = rng.gen_range(0.0..std::f64::consts::PI);
                    let (mut px, mut py) = if outer {
                        (phi.cos(), phi.sin())
                    } else {
                        (1.0 - phi.cos(), 0.5 - phi.sin())
                    };
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    px += noise * nx;
                    py += noise * ny;
                    data.push(px);
                    data.push(py);
                    labels.push(0);
                }
            }
            DatasetSpec::GaussUnit { dim } => {
                for _ in 0..n {
                    for _ in 0..*dim {
                        data.push(rng.sample(StandardNormal));
                    }
                    labels.push(0);
                }
            }
            DatasetSpec::PointMass { center } => {
                for _ in 0..n {
                    data.extend_from_slice(center);
                    labels.push(0);
                }
            }
        }
        (data, labels)
    }

    /// Analytic conditional velocity E[z - x | x_t] for the distributions
    /// with closed forms (gauss_unit and point_mass).
    pub fn oracle_velocity(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>, DataError> {
        debug_assert!(t > 0.0 && t <= 1.0);
        match self {
            DatasetSpec::GaussUnit { .. } => {
                // x_t ~ N(0, (t² + (1-t)²) I); linear-Gaussian posterior gives
                // E[z - x | x_t] = (2t - 1) / (t² + (1-t)²) · x_t
                let var = t * t + (1.0 - t) * (1.0 - t);
                Ok(x_t.iter().map(|&v| (2.0 * t - 1.0) / var * v).collect())
            }
            DatasetSpec::PointMass { center } => {
                // z = (x_t - (1-t)c)/t exactly, so u = z - c = (x_t - c)/t
                let d = center.len();
                Ok(x_t
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v - center[i % d]) / t)
                    .collect())
            }
            other => Err(DataError::NoClosedForm(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Ring8 { .. } => write!(f, "ring8"),
            DatasetSpec::Checkerboard => write!(f, "checkerboard"),
            DatasetSpec::TwoMoons { .. } => write!(f, "two_moons"),
            DatasetSpec::GaussUnit { .. } => write!(f, "gauss_unit"),
            DatasetSpec::PointMass { .. } => write!(f, "point_mass"),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring8" => Ok(DatasetSpec::Ring8 { conditional: false }),
            "checkerboard" => Ok(DatasetSpec::Checkerboard),
            "two_moons" => Ok(DatasetSpec::TwoMoons { noise: 0.1 }),
            "gauss_unit" => Ok(DatasetSpec::GaussUnit { dim: 2 }),
            "point_mass" => Ok(DatasetSpec::PointMass { center: vec![1.0, 2.0] }),
            other => Err(DataError::UnknownId(other.to_string())),
        }
    }
}
