//! Few-step Euler generation on a uniform descending time grid, with the
//! fake-branch variant that flips the sign of both time conditions, and
//! optional trajectory recording.

use crate::model::{forward_snapshot, ModelError, NetConfig, ParamSnapshot};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Real,
    Fake,
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Branch::Real),
            "fake" => Ok(Branch::Fake),
            other => Err(format!("unknown branch '{other}' (expected real|fake)")),
        }
    }
}

/// One generation run: final samples plus the grid that produced them.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub nfe: usize,
    /// Descending grid 1 = s_0 > … > s_K = 0.
    pub times: Vec<f64>,
    /// Row-major [n, dim] finals.
    pub samples: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    /// Per-step states including the initial noise, length K+1 when recorded.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

fn uniform_grid(nfe: usize) -> Vec<f64> {
    (0..=nfe).map(|k| (nfe - k) as f64 / nfe as f64).collect()
}

/// Integrate from given noise; exposed so paired comparisons can reuse the
/// same initial draw across NFE settings.
pub fn sample_from_noise(
    config: &NetConfig,
    weights: &ParamSnapshot,
    noise: &[f64],
    nfe: usize,
    labels: Option<&[usize]>,
    branch: Branch,
    record: bool,
) -> Result<SampleRun, ModelError> {
    assert!(nfe >= 1, "nfe must be at least 1");
    let dim = config.data_dim;
    let n = noise.len() / dim;
    let sigma = match branch {
        Branch::Real => 1.0,
        Branch::Fake => -1.0,
    };
    let times = uniform_grid(nfe);
    let mut x = noise.to_vec();
    let mut trajectory = record.then(|| vec![x.clone()]);
    for k in 0..nfe {
        let (s0, s1) = (times[k], times[k + 1]);
        let t_cond = vec![sigma * s0; n];
        let r_cond = vec![sigma * s1; n];
        let v = forward_snapshot(config, weights, &x, n, &t_cond, &r_cond, labels)?;
        let dt = s1 - s0;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(x.clone());
        }
    }
    Ok(SampleRun {
        nfe,
        times,
        samples: x,
        labels: labels.map(|l| l.to_vec()),
        trajectory,
    })
}

/// Draw fresh noise and integrate with `nfe` Euler steps.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng>(
    config: &NetConfig,
    weights: &ParamSnapshot,
    n: usize,
    nfe: usize,
    labels: Option<&[usize]>,
    branch: Branch,
    rng: &mut R,
    record: bool,
) -> Result<SampleRun, ModelError> {
    let noise: Vec<f64> = (0..n * config.data_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    sample_from_noise(config, weights, &noise, nfe, labels, branch, record)
}

/// Run every NFE setting from the same initial noise (paired comparison).
pub fn nfe_sweep<R: Rng>(
    config: &NetConfig,
    weights: &ParamSnapshot,
    n: usize,
    nfe_list: &[usize],
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Vec<SampleRun>, ModelError> {
    assert!(!nfe_list.is_empty(), "nfe_list must be nonempty");
    let noise: Vec<f64> = (0..n * config.data_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    nfe_list
        .iter()
        .map(|&k| sample_from_noise(config, weights, &noise, k, labels, Branch::Real, false))
        .collect()
}
