//! Sleep-phase weight sharing.
//!
//! A [`WeightBundle`] holds the incoming weights of `N` neurons that should
//! end up sharing one kernel, together with the snapshot taken when the sleep
//! phase started. The dynamics pull every row towards the bundle mean while
//! a decay term anchors it to its snapshot:
//!
//! ```text
//! Δw_i = -η [ (z_i - c·mean_j z_j) x_i + γ (w_i - w_i^init) ],   z_i = w_i·x_i
//! ```
//!
//! with `c = 1` for ideal lateral inhibition and `c = α/(1+α)` for a finite
//! inhibitory gain α.

mod closed_form;
mod dynamics;
mod noise;
mod projection;
mod snr;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::DenseMatrix;

pub use closed_form::{
    biased_fixed_point, biased_fixed_point_cov, descend, fixed_point, fixed_point_cov, objective, DescentOptions,
    DescentReport,
};
pub use dynamics::{
    hebbian_step, layer_sleep_run, sleep_run, sleep_step, LayerSleepRecord, NeuronInputs, SleepTrajectory, Velocity,
};
pub(crate) use dynamics::draw_inputs;
pub use noise::{
    estimate_input_moment_bound, loglog_slope, noisy_sgd_error, plateau, step_size_cap, NoiseFloorConfig,
};
pub use projection::{basis_inputs, exact_mean, instant_share, patch_share};
pub use snr::{layer_neg_log_snr, layer_snr, neg_log_snr, snr, snr_floor, Snr, CONVERGED_SENTINEL};

/// Per-neuron weights plus the snapshot taken at sleep start.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    weights: DenseMatrix,
    init: DenseMatrix,
    init_mean: Vec<f64>,
}

impl WeightBundle {
    /// Starts a sleep phase: the current weights become the anchor.
    pub fn new(weights: DenseMatrix) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::invalid("weight bundle needs at least one neuron and one input"));
        }
        let init = weights.clone();
        let init_mean = row_mean_exact(&init);
        Ok(Self {
            weights,
            init,
            init_mean,
        })
    }

    pub fn neurons(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights
    }

    pub fn init(&self) -> &DenseMatrix {
        &self.init
    }

    /// `(1/N) Σ_i w_i^init`.
    pub fn init_mean(&self) -> &[f64] {
        &self.init_mean
    }

    /// Ends the current phase and anchors a new one at the current weights.
    pub fn restart(&mut self) {
        self.init = self.weights.clone();
        self.init_mean = row_mean_exact(&self.init);
    }

    pub fn into_weights(self) -> DenseMatrix {
        self.weights
    }
}

/// Row mean where a column of identical values returns that value exactly.
pub(crate) fn row_mean_exact(m: &DenseMatrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| exact_mean((0..m.rows()).map(|r| m.get(r, c))))
        .collect()
}

/// Strength of the lateral inhibition that computes the population mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Inhibition {
    /// Ideal subtraction of the mean response.
    Infinite,
    /// Finite gain α > 0 of a single inhibitory unit.
    Finite(f64),
}

impl Inhibition {
    /// Multiplier `c` on the mean response: 1 or α/(1+α).
    pub fn coupling(self) -> f64 {
        match self {
            Inhibition::Infinite => 1.0,
            Inhibition::Finite(a) => a / (1.0 + a),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Inhibition::Finite(a) if !(a > 0.0) || !a.is_finite() => {
                Err(Error::invalid(format!("inhibition strength must be positive, got {a}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Inhibition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inhibition::Infinite => write!(f, "inf"),
            Inhibition::Finite(a) => write!(f, "{a}"),
        }
    }
}

impl FromStr for Inhibition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Inhibition::Infinite);
        }
        let a: f64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("bad inhibition strength '{s}'")))?;
        if a.is_infinite() && a > 0.0 {
            return Ok(Inhibition::Infinite);
        }
        let inh = Inhibition::Finite(a);
        inh.validate()?;
        Ok(inh)
    }
}

/// Learning-rate schedule indexed by iteration `k` (starting at 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `a / (b + k)`
    InverseTime { a: f64, b: f64 },
    /// `a / sqrt(1 + k/b)` for `k >= warmup`, zero before.
    InverseSqrt { a: f64, b: f64, warmup: usize },
    Constant(f64),
}

impl Schedule {
    pub fn rate(&self, k: usize) -> f64 {
        let kf = k as f64;
        match *self {
            Schedule::InverseTime { a, b } => a / (b + kf),
            Schedule::InverseSqrt { a, b, warmup } => {
                if k < warmup {
                    0.0
                } else {
                    a / (1.0 + kf / b).sqrt()
                }
            }
            Schedule::Constant(a) => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::InverseTime { a, b } => a > 0.0 && b > 0.0,
            Schedule::InverseSqrt { a, b, .. } => a > 0.0 && b > 0.0,
            Schedule::Constant(a) => a > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("learning-rate schedule must be positive: {self}")))
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::InverseTime { a, b } => write!(f, "inverse_time:{a}:{b}"),
            Schedule::InverseSqrt { a, b, warmup } => write!(f, "inverse_sqrt:{a}:{b}:{warmup}"),
            Schedule::Constant(a) => write!(f, "constant:{a}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `inverse_time:A:B`, `inverse_sqrt:A:B:WARMUP` or `constant:A`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::invalid(format!("schedule '{s}' is missing a field")))?
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number in schedule '{s}'")))
        };
        let sched = match (parts[0], parts.len()) {
            ("inverse_time", 3) => Schedule::InverseTime { a: num(1)?, b: num(2)? },
            ("inverse_sqrt", 4) => Schedule::InverseSqrt {
                a: num(1)?,
                b: num(2)?,
                warmup: parts[3]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad warmup in schedule '{s}'")))?,
            },
            ("constant", 2) => Schedule::Constant(num(1)?),
            _ => return Err(Error::invalid(format!("unknown schedule '{s}'"))),
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// Everything that defines one sleep-phase run.
#[derive(Clone, Debug, PartialEq)]
pub struct SleepConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub input_mean: f64,
    pub input_std: f64,
    /// Std of the independent per-neuron input noise.
    pub noise_std: f64,
    pub inhibition: Inhibition,
    /// Plasticity steps applied per presented input.
    pub updates_per_input: usize,
}

impl SleepConfig {
    /// Idealised-dynamics protocol: N(1,1) inputs, `0.5/(1000+k)`, momentum
    /// 0.95, 2000 iterations.
    pub fn ideal_protocol(gamma: f64) -> Self {
        Self {
            gamma,
            iterations: 2000,
            schedule: Schedule::InverseTime { a: 0.5, b: 1000.0 },
            momentum: 0.95,
            input_mean: 1.0,
            input_std: 1.0,
            noise_std: 0.0,
            inhibition: Inhibition::Infinite,
            updates_per_input: 1,
        }
    }

    /// Rate-circuit protocol: plasticity runs on every 1 ms Euler step with
    /// `0.0003/sqrt(1+k/2)` after 50 presentations, no momentum, zero-mean
    /// unit-variance inputs, 10⁴ presentations.
    pub fn rate_protocol(gamma: f64) -> Self {
        Self {
            gamma,
            iterations: 10_000,
            schedule: Schedule::InverseSqrt {
                a: 3e-4,
                b: 2.0,
                warmup: 50,
            },
            momentum: 0.0,
            input_mean: 0.0,
            input_std: 1.0,
            noise_std: 0.0,
            inhibition: Inhibition::Finite(10.0),
            updates_per_input: 150,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.input_std >= 0.0) || !self.input_std.is_finite() {
            return Err(Error::invalid(format!("input std must be >= 0, got {}", self.input_std)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.updates_per_input == 0 {
            return Err(Error::invalid("updates_per_input must be >= 1"));
        }
        self.schedule.validate()?;
        self.inhibition.validate()
    }
}
