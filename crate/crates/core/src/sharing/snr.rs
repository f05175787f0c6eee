//! Signal-to-noise ratio of a weight population.
//!
//! For each input coordinate `j` the signal is the squared mean of `(w_i)_j`
//! over neurons and the noise is its population variance (divide by `N`).
//! The SNR is the average of signal/noise over coordinates. Coordinates whose
//! spread is at rounding level are treated as converged and left out.

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::topology::{GridPartition, LocalLayer};

use super::exact_mean;

/// Value written in place of `-ln SNR` when every coordinate has zero variance.
pub const CONVERGED_SENTINEL: f64 = -1.0e4;

/// Relative spread below which a column counts as converged. Values that
/// differ only by accumulated rounding (a few ulps) would otherwise give
/// ratios near `1e32` and swamp the average.
pub const ROUNDING_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Snr {
    Finite(f64),
    /// All neurons hold identical weights.
    Converged,
}

impl Snr {
    pub fn neg_log(self) -> f64 {
        match self {
            Snr::Finite(v) => -v.ln(),
            Snr::Converged => CONVERGED_SENTINEL,
        }
    }

    pub fn is_converged(self) -> bool {
        matches!(self, Snr::Converged)
    }
}

#[derive(Default)]
struct ColumnPool {
    ratio_sum: f64,
    counted: usize,
}

impl ColumnPool {
    fn push(&mut self, values: impl Iterator<Item = f64> + Clone) {
        let first = match values.clone().next() {
            Some(v) => v,
            None => return,
        };
        if values.clone().all(|v| v == first) {
            // zero variance: contributes an infinite ratio, skipped below
            return;
        }
        let n = values.clone().count() as f64;
        let mean = exact_mean(values.clone());
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= (ROUNDING_TOLERANCE * mean) * (ROUNDING_TOLERANCE * mean) {
            return;
        }
        self.ratio_sum += mean * mean / var;
        self.counted += 1;
    }

    /// Columns with zero variance are left out of the average; if every
    /// column has zero variance the population has converged exactly.
    fn finish(self) -> Snr {
        if self.counted == 0 {
            return Snr::Converged;
        }
        let v = self.ratio_sum / self.counted as f64;
        if v.is_infinite() {
            Snr::Converged
        } else {
            Snr::Finite(v)
        }
    }
}

/// SNR of the rows of `weights` (one row per neuron).
pub fn snr(weights: &DenseMatrix) -> Result<Snr> {
    if weights.rows() < 2 {
        return Err(Error::invalid("SNR needs at least two neurons"));
    }
    let mut pool = ColumnPool::default();
    for c in 0..weights.cols() {
        pool.push((0..weights.rows()).map(|r| weights.get(r, c)));
    }
    Ok(pool.finish())
}

pub fn neg_log_snr(weights: &DenseMatrix) -> Result<f64> {
    snr(weights).map(Snr::neg_log)
}

/// Best reachable `-ln SNR` for N(1,1) weights and inputs: `2 ln(γ/(1+γ))`.
pub fn snr_floor(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("snr floor needs gamma > 0, got {gamma}")));
    }
    Ok(2.0 * (gamma / (1.0 + gamma)).ln())
}

/// SNR of a locally connected layer, pooling every `(out_ch, grid, field
/// entry)` column: neurons of one output channel inside one grid form a
/// population.
pub fn layer_snr(layer: &LocalLayer, partition: &GridPartition) -> Result<Snr> {
    let s = &layer.shape;
    if partition.height != s.height || partition.width != s.width {
        return Err(Error::mismatch(
            "layer_snr",
            format!("partition of {}x{}", s.height, s.width),
            format!("{}x{}", partition.height, partition.width),
        ));
    }
    let kk = s.kernel * s.kernel;
    let mut pool = ColumnPool::default();
    for o in 0..s.out_channels {
        for grid in partition.grids() {
            if grid.len() < 2 {
                continue;
            }
            for i in 0..s.in_channels {
                for e in 0..kk {
                    pool.push(grid.iter().map(|&(y, x)| layer.weights[layer.offset(o, i, y, x) + e]));
                }
            }
        }
    }
    Ok(pool.finish())
}

pub fn layer_neg_log_snr(layer: &LocalLayer, partition: &GridPartition) -> Result<f64> {
    layer_snr(layer, partition).map(Snr::neg_log)
}
