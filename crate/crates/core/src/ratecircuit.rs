//! Rate-based implementation of the sleep phase.
//!
//! Excitatory neurons `r_i` and one inhibitory neuron `r_inh` follow
//!
//! ```text
//! τ dr_i/dt   = −r_i + w_i·x − α r_inh + b
//! τ dr_inh/dt = −r_inh + mean_j r_j − b
//! ```
//!
//! whose only fixed point is `r_i* = b + d_i − mean d + mean d/(1+α)` for
//! drives `d_i = w_i·x`. Plasticity is the anti-Hebbian `−(r_i − b) x` plus
//! decay towards the snapshot.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::sharing::{hebbian_step, neg_log_snr, Inhibition, NeuronInputs, SleepConfig, SleepTrajectory, Velocity, WeightBundle};

/// When the plasticity rule reads the rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Plasticity {
    /// After every Euler step, with the per-presentation rate.
    #[default]
    Continuous,
    /// Once per presentation, at its end.
    Terminal,
}

impl fmt::Display for Plasticity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plasticity::Continuous => "continuous",
            Plasticity::Terminal => "terminal",
        })
    }
}

impl FromStr for Plasticity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "continuous" => Ok(Plasticity::Continuous),
            "terminal" => Ok(Plasticity::Terminal),
            other => Err(Error::invalid(format!("unknown plasticity mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateCircuit {
    pub tau_ms: f64,
    pub alpha: Inhibition,
    pub bias: f64,
    pub dt_ms: f64,
    pub present_ms: f64,
    /// Start every presentation from `r = b`, `r_inh = 0` instead of
    /// carrying the previous state over.
    pub reset_rates: bool,
    pub plasticity: Plasticity,
    rates: Vec<f64>,
    inhibitory: f64,
    elapsed_ms: f64,
}

impl RateCircuit {
    /// Circuit of `n` neurons at rest (`r = b`, `r_inh = 0`).
    pub fn new(n: usize, tau_ms: f64, alpha: Inhibition, bias: f64, dt_ms: f64, present_ms: f64) -> Result<Self> {
        let c = Self {
            tau_ms,
            alpha,
            bias,
            dt_ms,
            present_ms,
            reset_rates: false,
            plasticity: Plasticity::Continuous,
            rates: vec![bias; n],
            inhibitory: 0.0,
            elapsed_ms: 0.0,
        };
        c.validate()?;
        Ok(c)
    }

    /// 30 ms time constant, 1 ms steps, 150 ms per input, `b = 1`.
    pub fn standard(n: usize, alpha: Inhibition) -> Result<Self> {
        Self::new(n, 30.0, alpha, 1.0, 1.0, 150.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_ms > 0.0) || !(self.dt_ms > 0.0) || !self.tau_ms.is_finite() {
            return Err(Error::invalid("tau and dt must be positive"));
        }
        if self.dt_ms > self.tau_ms / 10.0 {
            return Err(Error::invalid(format!(
                "unstable integration: dt = {} ms exceeds tau/10 = {} ms",
                self.dt_ms,
                self.tau_ms / 10.0
            )));
        }
        self.alpha.validate()?;
        if !self.bias.is_finite() {
            return Err(Error::invalid("bias must be finite"));
        }
        let steps = self.present_ms / self.dt_ms;
        if !(self.present_ms > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "presentation of {} ms is not a whole number of {} ms steps",
                self.present_ms, self.dt_ms
            )));
        }
        if let Inhibition::Finite(_) = self.alpha {
            let rho = self.spectral_radius();
            if rho >= 1.0 {
                return Err(Error::invalid(format!(
                    "unstable integration: Euler spectral radius {rho:.4} >= 1 for alpha = {}",
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    pub fn neurons(&self) -> usize {
        self.rates.len()
    }

    pub fn steps_per_presentation(&self) -> usize {
        (self.present_ms / self.dt_ms).round() as usize
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn inhibitory(&self) -> f64 {
        self.inhibitory
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.elapsed_ms
    }

    pub fn set_state(&mut self, rates: &[f64], inhibitory: f64) -> Result<()> {
        if rates.len() != self.rates.len() {
            return Err(Error::mismatch("set_state", self.rates.len(), rates.len()));
        }
        self.rates.copy_from_slice(rates);
        self.inhibitory = inhibitory;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.rates.iter_mut().for_each(|r| *r = self.bias);
        self.inhibitory = 0.0;
    }

    /// Spectral radius of the linear Euler map, `h = dt/τ`:
    /// `max(|1−h|, sqrt((1−h)² + h²α))`.
    pub fn spectral_radius(&self) -> f64 {
        let h = self.dt_ms / self.tau_ms;
        match self.alpha {
            Inhibition::Finite(a) => (1.0 - h).abs().max(((1.0 - h).powi(2) + h * h * a).sqrt()),
            Inhibition::Infinite => f64::INFINITY,
        }
    }

    fn alpha_value(&self) -> Result<f64> {
        match self.alpha {
            Inhibition::Finite(a) => Ok(a),
            Inhibition::Infinite => Err(Error::invalid("the rate ODE needs a finite inhibition strength")),
        }
    }

    /// One forward-Euler step with drives `d_i = w_i·x`.
    pub fn rate_step(&mut self, drive: &[f64]) -> Result<()> {
        if drive.len() != self.rates.len() {
            return Err(Error::mismatch("rate_step", self.rates.len(), drive.len()));
        }
        let alpha = self.alpha_value()?;
        let h = self.dt_ms / self.tau_ms;
        let n = self.rates.len() as f64;
        let mean_r = self.rates.iter().sum::<f64>() / n;
        let inh = self.inhibitory;
        let mut max_abs = 0.0_f64;
        let mut finite = true;
        for (r, d) in self.rates.iter_mut().zip(drive) {
            *r += h * (-*r + d - alpha * inh + self.bias);
            finite &= r.is_finite();
            max_abs = max_abs.max(r.abs());
        }
        self.inhibitory += h * (-inh + mean_r - self.bias);
        finite &= self.inhibitory.is_finite();
        self.elapsed_ms += self.dt_ms;
        if !finite {
            return Err(Error::Divergence {
                context: format!("rate dynamics at t = {} ms", self.elapsed_ms),
                max_abs,
            });
        }
        Ok(())
    }

    /// Closed-form fixed point `(r*, r_inh*)` for the given drives.
    pub fn rate_fixed_point(&self, drive: &[f64]) -> (Vec<f64>, f64) {
        rate_fixed_point(self.bias, self.alpha, drive)
    }

    /// `key=value` lines describing the circuit.
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("alpha".into(), self.alpha.to_string()),
            ("tau_ms".into(), self.tau_ms.to_string()),
            ("dt_ms".into(), self.dt_ms.to_string()),
            ("present_ms".into(), self.present_ms.to_string()),
            ("bias".into(), self.bias.to_string()),
            ("plasticity".into(), self.plasticity.to_string()),
            ("reset_rates".into(), self.reset_rates.to_string()),
        ]
    }
}

/// `r_i* = b + d_i − mean d + mean d/(1+α)`, `r_inh* = mean d/(1+α)`.
pub fn rate_fixed_point(bias: f64, alpha: Inhibition, drive: &[f64]) -> (Vec<f64>, f64) {
    let mean = drive.iter().sum::<f64>() / drive.len().max(1) as f64;
    let leak = match alpha {
        Inhibition::Finite(a) => mean / (1.0 + a),
        Inhibition::Infinite => 0.0,
    };
    (drive.iter().map(|d| bias + d - mean + leak).collect(), leak)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRunReport {
    pub trajectory: SleepTrajectory,
    /// Share of terminal rates (over neurons and presentations) that are ≥ 0.
    pub nonnegative_fraction: f64,
}

fn responses(bundle: &WeightBundle, inputs: NeuronInputs<'_>) -> Vec<f64> {
    inputs.responses(bundle.weights())
}

/// Presents `cfg.iterations` inputs to the circuit and adapts the weights.
///
/// `cfg.inhibition` is ignored in favour of `circuit.alpha`. With an
/// infinite gain the ODE is bypassed and the settled response `z − mean z`
/// drives plasticity directly, once per Euler step in continuous mode.
pub fn rate_sleep_run(
    bundle: &mut WeightBundle,
    circuit: &mut RateCircuit,
    cfg: &SleepConfig,
    rng: &RngStream,
) -> Result<RateRunReport> {
    cfg.validate()?;
    circuit.validate()?;
    if circuit.neurons() != bundle.neurons() {
        return Err(Error::mismatch("rate_sleep_run", bundle.neurons(), circuit.neurons()));
    }
    let mut input_rng = rng.substream(0);
    let mut noise_rng = rng.substream(1);
    let (n, d) = (bundle.neurons(), bundle.dim());
    let steps = circuit.steps_per_presentation();
    let mut vel = Velocity::new(cfg.momentum);
    let mut traj = Vec::with_capacity(cfg.iterations + 1);
    traj.push(neg_log_snr(bundle.weights())?);
    let (mut nonneg, mut total) = (0usize, 0usize);
    let mut post = vec![0.0; n];

    for k in 0..cfg.iterations {
        let (x, per) = crate::sharing::draw_inputs(cfg, n, d, &mut input_rng, &mut noise_rng)?;
        let inputs = match &per {
            Some(m) => NeuronInputs::PerNeuron(m),
            None => NeuronInputs::Shared(&x),
        };
        let eta = cfg.schedule.rate(k);
        if circuit.reset_rates {
            circuit.reset();
        }
        match circuit.alpha {
            Inhibition::Infinite => {
                let updates = match circuit.plasticity {
                    Plasticity::Continuous => steps,
                    Plasticity::Terminal => 1,
                };
                for _ in 0..updates {
                    let z = responses(bundle, inputs);
                    let mean = crate::sharing::exact_mean(z.iter().copied());
                    for (p, zi) in post.iter_mut().zip(&z) {
                        *p = zi - mean;
                    }
                    hebbian_step(bundle, inputs, &post, cfg.gamma, eta, &mut vel)?;
                }
                let z = responses(bundle, inputs);
                let (r, _) = rate_fixed_point(circuit.bias, Inhibition::Infinite, &z);
                nonneg += r.iter().filter(|v| **v >= 0.0).count();
            }
            Inhibition::Finite(_) => {
                let mut drive = responses(bundle, inputs);
                for _ in 0..steps {
                    circuit.rate_step(&drive)?;
                    if circuit.plasticity == Plasticity::Continuous {
                        for (p, r) in post.iter_mut().zip(circuit.rates()) {
                            *p = r - circuit.bias;
                        }
                        hebbian_step(bundle, inputs, &post, cfg.gamma, eta, &mut vel)?;
                        drive = responses(bundle, inputs);
                    }
                }
                if circuit.plasticity == Plasticity::Terminal {
                    for (p, r) in post.iter_mut().zip(circuit.rates()) {
                        *p = r - circuit.bias;
                    }
                    hebbian_step(bundle, inputs, &post, cfg.gamma, eta, &mut vel)?;
                }
                nonneg += circuit.rates().iter().filter(|v| **v >= 0.0).count();
            }
        }
        total += n;
        traj.push(neg_log_snr(bundle.weights())?);
    }
    Ok(RateRunReport {
        trajectory: SleepTrajectory { neg_log_snr: traj },
        nonnegative_fraction: if total == 0 { 1.0 } else { nonneg as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian, gaussian_matrix, DenseMatrix};
    use crate::sharing::{sleep_step, Schedule};

    #[test]
    fn fixed_point_is_stationary() {
        let mut rng = RngStream::new(1);
        let drive = gaussian(&mut rng, 0.3, 2.0, 7).unwrap();
        let mut c = RateCircuit::standard(7, Inhibition::Finite(10.0)).unwrap();
        let (r, inh) = c.rate_fixed_point(&drive);
        c.set_state(&r, inh).unwrap();
        c.rate_step(&drive).unwrap();
        for (a, b) in c.rates().iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((c.inhibitory() - inh).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_formula() {
        let (r, _) = rate_fixed_point(1.0, Inhibition::Finite(10.0), &[0.0; 4]);
        assert_eq!(r, vec![1.0; 4]);
        let (r, _) = rate_fixed_point(1.0, Inhibition::Finite(10.0), &[2.2; 3]);
        for v in r {
            assert!((v - (1.0 + 2.2 / 11.0)).abs() < 1e-15);
        }
        let (r, _) = rate_fixed_point(0.5, Inhibition::Infinite, &[1.0, 3.0]);
        assert_eq!(r, vec![-0.5, 1.5]);
        let (r, _) = rate_fixed_point(1.0, Inhibition::Finite(1e12), &[4.0; 3]);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn integration_converges() {
        let mut rng = RngStream::new(2);
        let drive = gaussian(&mut rng, 0.0, 1.0, 3).unwrap();
        let mut c = RateCircuit::standard(3, Inhibition::Finite(10.0)).unwrap();
        for _ in 0..(20.0 * c.tau_ms / c.dt_ms) as usize * 2 {
            c.rate_step(&drive).unwrap();
        }
        let (r, _) = c.rate_fixed_point(&drive);
        for (a, b) in c.rates().iter().zip(&r) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn contraction_from_random_states() {
        let mut rng = RngStream::new(3);
        let drive = gaussian(&mut rng, 0.0, 1.0, 5).unwrap();
        let mut c = RateCircuit::standard(5, Inhibition::Finite(10.0)).unwrap();
        let rho = c.spectral_radius();
        assert!(rho < 1.0);
        let (r, inh) = c.rate_fixed_point(&drive);
        let start = gaussian(&mut rng, 0.0, 5.0, 5).unwrap();
        c.set_state(&start, 3.0).unwrap();
        let dist = |c: &RateCircuit| {
            (c.rates().iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + (c.inhibitory() - inh).powi(2)).sqrt()
        };
        let d0 = dist(&c);
        for _ in 0..300 {
            c.rate_step(&drive).unwrap();
        }
        let d1 = dist(&c);
        // non-normal map: allow a constant factor over the asymptotic rate
        assert!(d1 < 10.0 * d0 * rho.powi(300), "{d0} {d1} {rho}");
        assert!(d1 < 1e-3 * d0);
    }

    #[test]
    fn validation() {
        assert!(RateCircuit::new(3, 30.0, Inhibition::Finite(10.0), 1.0, 5.0, 150.0).is_err());
        assert!(RateCircuit::new(3, 30.0, Inhibition::Finite(10.0), 1.0, 1.0, 150.5).is_err());
        // within dt <= tau/10 but oscillatory mode unstable
        let err = RateCircuit::new(3, 30.0, Inhibition::Finite(1000.0), 1.0, 3.0, 150.0).unwrap_err();
        assert!(err.to_string().contains("spectral radius"));
        let mut c = RateCircuit::standard(3, Inhibition::Finite(10.0)).unwrap();
        assert!(c.rate_step(&[1.0]).is_err());
        assert!("terminal".parse::<Plasticity>().is_ok());
        assert!("sometimes".parse::<Plasticity>().is_err());
    }

    #[test]
    fn zero_presentations() {
        let mut rng = RngStream::new(4);
        let w = gaussian_matrix(&mut rng, 10, 4, 1.0, 1.0).unwrap();
        let mut b = WeightBundle::new(w.clone()).unwrap();
        let mut c = RateCircuit::standard(10, Inhibition::Finite(10.0)).unwrap();
        let mut cfg = SleepConfig::rate_protocol(1e-2);
        cfg.iterations = 0;
        let rep = rate_sleep_run(&mut b, &mut c, &cfg, &RngStream::new(1)).unwrap();
        assert_eq!(rep.trajectory.neg_log_snr.len(), 1);
        assert_eq!(b.weights(), &w);
    }

    #[test]
    fn settled_update_matches_biased_step() {
        let mut rng = RngStream::new(5);
        let w = gaussian_matrix(&mut rng, 10, 4, 1.0, 1.0).unwrap();
        let x = gaussian(&mut rng, 1.0, 1.0, 4).unwrap();
        let (gamma, eta, alpha) = (1e-2, 1e-3, 10.0);

        let mut c = RateCircuit::new(10, 30.0, Inhibition::Finite(alpha), 1.0, 1.0, 600.0).unwrap();
        c.plasticity = Plasticity::Terminal;
        let mut a = WeightBundle::new(w.clone()).unwrap();
        let drive = NeuronInputs::Shared(&x).responses(a.weights());
        for _ in 0..c.steps_per_presentation() {
            c.rate_step(&drive).unwrap();
        }
        let post: Vec<f64> = c.rates().iter().map(|r| r - c.bias).collect();
        hebbian_step(&mut a, NeuronInputs::Shared(&x), &post, gamma, eta, &mut Velocity::new(0.0)).unwrap();

        let mut b = WeightBundle::new(w).unwrap();
        sleep_step(&mut b, NeuronInputs::Shared(&x), gamma, eta, Inhibition::Finite(alpha), &mut Velocity::new(0.0)).unwrap();
        assert!(a.weights().sub(b.weights()).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn finite_gain_is_worse_than_ideal() {
        let mut rng = RngStream::new(6);
        let w: DenseMatrix = gaussian_matrix(&mut rng, 30, 4, 1.0, 1.0).unwrap();
        let cfg = SleepConfig {
            iterations: 300,
            schedule: Schedule::Constant(2e-4),
            ..SleepConfig::rate_protocol(1e-2)
        };
        let run = |alpha| {
            let mut b = WeightBundle::new(w.clone()).unwrap();
            let mut c = RateCircuit::standard(30, alpha).unwrap();
            rate_sleep_run(&mut b, &mut c, &cfg, &RngStream::new(7)).unwrap()
        };
        let finite = run(Inhibition::Finite(10.0));
        let ideal = run(Inhibition::Infinite);
        assert!(finite.trajectory.terminal() < finite.trajectory.initial());
        assert!(ideal.trajectory.terminal() < finite.trajectory.terminal());
        assert!(finite.nonnegative_fraction > 0.0 && finite.nonnegative_fraction <= 1.0);
    }
}
