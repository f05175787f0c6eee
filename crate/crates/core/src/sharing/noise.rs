//! Noisy sleep dynamics around the fixed point: each neuron sees its own
//! noisy copy `x_m + ε_i` of an input drawn uniformly from a fixed set.
//! With `η_k = a/(b+k)` the squared distance to the noise-free fixed point
//! decays like `1/k` until it settles on a floor set by the noise.

use crate::error::{Error, Result};
use crate::math::{gaussian, gaussian_matrix, DenseMatrix, RngStream};

use super::closed_form::fixed_point_cov;
use super::dynamics::{sleep_step, NeuronInputs, Velocity};
use super::{Inhibition, WeightBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFloorConfig {
    pub neurons: usize,
    pub dim: usize,
    /// Size of the fixed input set.
    pub inputs: usize,
    pub gamma: f64,
    /// `η_k = a / (b + k)`
    pub a: f64,
    pub b: f64,
    pub iterations: usize,
    pub input_mean: f64,
    pub input_std: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for NoiseFloorConfig {
    fn default() -> Self {
        Self {
            neurons: 20,
            dim: 4,
            inputs: 16,
            gamma: 0.04,
            a: 20.0,
            b: 200.0,
            iterations: 20_000,
            input_mean: 0.0,
            input_std: 1.0,
            init_mean: 1.0,
            init_std: 1.0,
        }
    }
}

impl NoiseFloorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neurons < 2 || self.dim == 0 || self.inputs == 0 {
            return Err(Error::invalid("noise floor needs >= 2 neurons, >= 1 input dim and >= 1 input"));
        }
        if !(self.gamma > 0.0) || !(self.a > 0.0) || !(self.b > 0.0) {
            return Err(Error::invalid("noise floor needs gamma, a, b > 0"));
        }
        Ok(())
    }

    pub fn rate(&self, k: usize) -> f64 {
        self.a / (self.b + k as f64)
    }
}

/// `‖W_k − W*‖²_F` for `k = 0..=iterations`.
///
/// The input set, initial weights and input order depend only on `rng`, so
/// runs with the same stream and different `sigma` share everything except
/// the noise.
pub fn noisy_sgd_error(cfg: &NoiseFloorConfig, sigma: f64, rng: &RngStream) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise std must be >= 0, got {sigma}")));
    }
    let (n, d) = (cfg.neurons, cfg.dim);
    let mut setup = rng.substream(0);
    let xs: Vec<Vec<f64>> = (0..cfg.inputs)
        .map(|_| gaussian(&mut setup, cfg.input_mean, cfg.input_std, d))
        .collect::<Result<_>>()?;
    let init = gaussian_matrix(&mut setup, n, d, cfg.init_mean, cfg.init_std)?;
    let cov = DenseMatrix::second_moment(&xs)?;
    let target = fixed_point_cov(&init, &cov, cfg.gamma)?;

    let mut order = rng.substream(1);
    let mut noise = rng.substream(2);
    let mut bundle = WeightBundle::new(init)?;
    let mut vel = Velocity::new(0.0);
    let mut per = DenseMatrix::zeros(n, d);
    let mut out = Vec::with_capacity(cfg.iterations + 1);
    out.push(bundle.weights().sub(&target)?.frobenius_sq());
    for k in 0..cfg.iterations {
        let x = &xs[order.below(cfg.inputs)];
        for i in 0..n {
            let row = per.row_mut(i);
            row.copy_from_slice(x);
            if sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += sigma * noise.standard_normal();
                }
            }
        }
        sleep_step(
            &mut bundle,
            NeuronInputs::PerNeuron(&per),
            cfg.gamma,
            cfg.rate(k),
            Inhibition::Infinite,
            &mut vel,
        )?;
        out.push(bundle.weights().sub(&target)?.frobenius_sq());
    }
    Ok(out)
}

/// Mean over the last 20% of a trajectory.
pub fn plateau(traj: &[f64]) -> f64 {
    if traj.is_empty() {
        return f64::NAN;
    }
    let start = traj.len() - (traj.len() / 5).max(1);
    let tail = &traj[start..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Least-squares slope of `ln traj[k]` against `ln k` over `lo..=hi`.
pub fn loglog_slope(traj: &[f64], lo: usize, hi: usize) -> Result<f64> {
    if lo == 0 || hi <= lo || hi >= traj.len() {
        return Err(Error::invalid(format!(
            "slope window {lo}..={hi} invalid for {} points",
            traj.len()
        )));
    }
    let pts: Vec<(f64, f64)> = (lo..=hi)
        .filter(|&k| traj[k] > 0.0)
        .map(|k| ((k as f64).ln(), traj[k].ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::invalid("slope window has fewer than two positive points"));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Largest `E‖x_m + ε‖⁴` over the input set for `ε ~ N(0, σ²I)`.
pub fn estimate_input_moment_bound(inputs: &[Vec<f64>], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    inputs
        .iter()
        .map(|x| {
            let d = x.len() as f64;
            let q: f64 = x.iter().map(|v| v * v).sum();
            (q + d * s2).powi(2) + 4.0 * s2 * q + 2.0 * d * s2 * s2
        })
        .fold(0.0, f64::max)
}

/// Largest step for which the noise term dominates the second-order term:
/// `σ² / (8(2c + γ²)‖W*‖² + 4γ²‖W_init‖²)`.
pub fn step_size_cap(moment_bound: f64, gamma: f64, target_sq: f64, init_sq: f64, sigma: f64) -> f64 {
    let denom = 8.0 * (2.0 * moment_bound + gamma * gamma) * target_sq + 4.0 * gamma * gamma * init_sq;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        sigma * sigma / denom
    }
}
