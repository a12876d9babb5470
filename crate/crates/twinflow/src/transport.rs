//! Linear transport between data and noise, time sampling over the
//! extended interval [-1, 1], and the score/velocity correspondence.
//!
//! The path is x_t = t·z + (1-t)·x, so the instantaneous velocity is the
//! constant u = z - x. Negative times never change the interpolation; they
//! only condition the network on the mirrored branch.

use rand::Rng;
use thiserror::Error;

/// Floor applied to sampled times during training; keeps the score
/// transform and the base-loss normalization away from the t→0 singularity.
pub const EPS_T: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("interpolation time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("score transform is singular at t = {0} (requires t > 0)")]
    ScoreSingularity(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// A time in [-1, 1]; the sign selects the real (t > 0) or fake (t < 0)
/// trajectory branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self, TransportError> {
        if !(-1.0..=1.0).contains(&t) || t.is_nan() {
            return Err(TransportError::TimeOutOfRange(t));
        }
        Ok(TimePoint(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_fake_branch(self) -> bool {
        self.0 < 0.0
    }
}

/// A point on the straight path together with its endpoints.
#[derive(Debug, Clone)]
pub struct TransportPoint {
    pub x_t: Vec<f64>,
    pub t: TimePoint,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// x_t = t·z + (1-t)·x. Endpoints are exact: t=0 returns x, t=1 returns z.
pub fn interpolate(x: &[f64], z: &[f64], t: f64) -> Result<TransportPoint, TransportError> {
    if x.len() != z.len() {
        return Err(TransportError::DimensionMismatch(x.len(), z.len()));
    }
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(TransportError::TimeOutOfRange(t));
    }
    let x_t = if t == 0.0 {
        x.to_vec()
    } else if t == 1.0 {
        z.to_vec()
    } else {
        x.iter()
            .zip(z)
            .map(|(&xi, &zi)| t * zi + (1.0 - t) * xi)
            .collect()
    };
    Ok(TransportPoint {
        x_t,
        t: TimePoint(t),
        x: x.to_vec(),
        z: z.to_vec(),
    })
}

/// In-place interpolation into a preallocated buffer (training hot path).
pub fn interpolate_into(x: &[f64], z: &[f64], t: f64, out: &mut [f64]) {
    debug_assert_eq!(x.len(), z.len());
    debug_assert!((0.0..=1.0).contains(&t));
    for i in 0..x.len() {
        out[i] = t * z[i] + (1.0 - t) * x[i];
    }
}

/// Instantaneous velocity of the straight path: u = z - x, constant in t.
pub fn true_velocity(x: &[f64], z: &[f64]) -> Result<Vec<f64>, TransportError> {
    if x.len() != z.len() {
        return Err(TransportError::DimensionMismatch(x.len(), z.len()));
    }
    Ok(x.iter().zip(z).map(|(&xi, &zi)| zi - xi).collect())
}

/// Score from average velocity under linear transport:
/// s(x_t) = -(x_t + (1-t)·F) / t, valid for t > 0 only.
pub fn velocity_to_score(x_t: &[f64], t: f64, f: &[f64]) -> Result<Vec<f64>, TransportError> {
    if x_t.len() != f.len() {
        return Err(TransportError::DimensionMismatch(x_t.len(), f.len()));
    }
    if t <= 0.0 || t.is_nan() {
        return Err(TransportError::ScoreSingularity(t));
    }
    Ok(x_t
        .iter()
        .zip(f)
        .map(|(&xi, &fi)| -(xi + (1.0 - t) * fi) / t)
        .collect())
}

/// Strictly decreasing time chain below `t` for the N=2 base objective:
/// t1 ~ U(0, t), t2 ~ U(0, t1), t3 ~ U(0, t2).
pub fn base_chain_n2<R: Rng>(rng: &mut R, t: f64) -> (f64, f64, f64) {
    debug_assert!(t > 0.0 && t <= 1.0);
    let t1 = rng.gen_range(0.0..t);
    let t2 = if t1 > 0.0 { rng.gen_range(0.0..t1) } else { 0.0 };
    let t3 = if t2 > 0.0 { rng.gen_range(0.0..t2) } else { 0.0 };
    (t1, t2, t3)
}

/// t ~ U(0, 1).
pub fn uniform01<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.0..1.0)
}

/// Training-time draw clamped to [EPS_T, 1].
pub fn sample_time_clamped<R: Rng>(rng: &mut R) -> f64 {
    uniform01(rng).max(EPS_T)
}
