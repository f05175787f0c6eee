use crate::error::{Error, Result};
use crate::math::{dot, gaussian, DenseMatrix, RngStream};
use crate::topology::{generate_pattern, receptive_field, GridPartition, LocalLayer, PatternBase};

use super::snr::{neg_log_snr, snr};
use super::{exact_mean, Inhibition, SleepConfig, WeightBundle};

/// Heavy-ball state: `v ← m·v + g`, `w ← w − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    pub momentum: f64,
    buf: Option<DenseMatrix>,
    steps: usize,
}

impl Velocity {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            buf: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Inputs seen by the neurons of a bundle.
#[derive(Clone, Copy, Debug)]
pub enum NeuronInputs<'a> {
    /// Every neuron sees the same vector.
    Shared(&'a [f64]),
    /// Row `i` is the input of neuron `i`.
    PerNeuron(&'a DenseMatrix),
}

impl NeuronInputs<'_> {
    #[inline]
    fn get(&self, i: usize) -> &[f64] {
        match self {
            NeuronInputs::Shared(x) => x,
            NeuronInputs::PerNeuron(m) => m.row(i),
        }
    }

    fn check(&self, bundle: &WeightBundle) -> Result<()> {
        let d = bundle.dim();
        match self {
            NeuronInputs::Shared(x) if x.len() != d => Err(Error::mismatch("sleep_step", format!("input length {d}"), x.len())),
            NeuronInputs::PerNeuron(m) if m.shape() != (bundle.neurons(), d) => Err(Error::mismatch(
                "sleep_step",
                format!("{}x{d} per-neuron inputs", bundle.neurons()),
                format!("{}x{}", m.rows(), m.cols()),
            )),
            _ => Ok(()),
        }
    }

    /// Responses `z_i = w_i · x_i`.
    pub fn responses(&self, weights: &DenseMatrix) -> Vec<f64> {
        (0..weights.rows()).map(|i| dot(weights.row(i), self.get(i))).collect()
    }
}

/// Anti-Hebbian step with post-synaptic factors `post`:
/// `g_i = post_i · x_i + γ (w_i − w_i^init)`, then a heavy-ball update.
pub fn hebbian_step(
    bundle: &mut WeightBundle,
    inputs: NeuronInputs<'_>,
    post: &[f64],
    gamma: f64,
    eta: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    inputs.check(bundle)?;
    if post.len() != bundle.neurons() {
        return Err(Error::mismatch("hebbian_step", bundle.neurons(), post.len()));
    }
    let (n, d) = (bundle.neurons(), bundle.dim());
    let m = velocity.momentum;
    let buf = velocity.buf.get_or_insert_with(|| DenseMatrix::zeros(n, d));
    if buf.shape() != (n, d) {
        *buf = DenseMatrix::zeros(n, d);
    }
    let mut max_abs = 0.0_f64;
    let mut finite = true;
    let init = bundle.init.data();
    let weights = bundle.weights.data_mut();
    let vel = buf.data_mut();
    for i in 0..n {
        let x = inputs.get(i);
        let p = post[i];
        let span = i * d..(i + 1) * d;
        for (((w, v), w0), xj) in weights[span.clone()].iter_mut().zip(&mut vel[span.clone()]).zip(&init[span]).zip(x) {
            *v = m * *v + p * xj + gamma * (*w - w0);
            *w -= eta * *v;
            finite &= w.is_finite();
            max_abs = max_abs.max(w.abs());
        }
    }
    velocity.steps += 1;
    if !finite {
        return Err(Error::Divergence {
            context: format!("sleep step {}", velocity.steps),
            max_abs,
        });
    }
    Ok(())
}

/// One step of the sleep dynamics with mean coupling set by `inhibition`.
pub fn sleep_step(
    bundle: &mut WeightBundle,
    inputs: NeuronInputs<'_>,
    gamma: f64,
    eta: f64,
    inhibition: Inhibition,
    velocity: &mut Velocity,
) -> Result<()> {
    inputs.check(bundle)?;
    let z = inputs.responses(&bundle.weights);
    let c = inhibition.coupling();
    let mean = exact_mean(z.iter().copied());
    let post: Vec<f64> = z.iter().map(|zi| zi - c * mean).collect();
    hebbian_step(bundle, inputs, &post, gamma, eta, velocity)
}

/// `-ln SNR` after each iteration; entry 0 is the starting value.
#[derive(Clone, Debug, PartialEq)]
pub struct SleepTrajectory {
    pub neg_log_snr: Vec<f64>,
}

impl SleepTrajectory {
    pub fn initial(&self) -> f64 {
        self.neg_log_snr[0]
    }

    pub fn terminal(&self) -> f64 {
        *self.neg_log_snr.last().expect("trajectory has its initial point")
    }

    /// `(iteration, value)` of the smallest entry.
    pub fn minimum(&self) -> (usize, f64) {
        self.neg_log_snr
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
    }
}

/// Draws the per-neuron inputs of one iteration: a shared x, plus
/// independent N(0, σ²) noise per neuron when `noise_std > 0`.
pub(crate) fn draw_inputs(
    cfg: &SleepConfig,
    n: usize,
    d: usize,
    input_rng: &mut RngStream,
    noise_rng: &mut RngStream,
) -> Result<(Vec<f64>, Option<DenseMatrix>)> {
    let x = gaussian(input_rng, cfg.input_mean, cfg.input_std, d)?;
    if cfg.noise_std == 0.0 {
        return Ok((x, None));
    }
    let mut per = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let eps = gaussian(noise_rng, 0.0, cfg.noise_std, d)?;
        for (dst, (a, e)) in per.row_mut(i).iter_mut().zip(x.iter().zip(&eps)) {
            *dst = a + e;
        }
    }
    Ok((x, Some(per)))
}

/// Runs `cfg.iterations` sleep iterations with a fresh input per iteration.
pub fn sleep_run(bundle: &mut WeightBundle, cfg: &SleepConfig, rng: &RngStream) -> Result<SleepTrajectory> {
    cfg.validate()?;
    if bundle.neurons() < 2 {
        return Err(Error::invalid("sleep run needs at least two neurons"));
    }
    let mut input_rng = rng.substream(0);
    let mut noise_rng = rng.substream(1);
    let mut velocity = Velocity::new(cfg.momentum);
    let (n, d) = (bundle.neurons(), bundle.dim());
    let mut traj = Vec::with_capacity(cfg.iterations + 1);
    traj.push(neg_log_snr(bundle.weights())?);
    for k in 0..cfg.iterations {
        let (x, per) = draw_inputs(cfg, n, d, &mut input_rng, &mut noise_rng)?;
        let inputs = match &per {
            Some(m) => NeuronInputs::PerNeuron(m),
            None => NeuronInputs::Shared(&x),
        };
        let eta = cfg.schedule.rate(k);
        for _ in 0..cfg.updates_per_input {
            sleep_step(bundle, inputs, cfg.gamma, eta, cfg.inhibition, &mut velocity).map_err(|e| match e {
                Error::Divergence { max_abs, .. } => Error::Divergence {
                    context: format!("sleep iteration {}", k + 1),
                    max_abs,
                },
                other => other,
            })?;
        }
        traj.push(neg_log_snr(bundle.weights())?);
    }
    Ok(SleepTrajectory { neg_log_snr: traj })
}

/// One row of a layer-level sleep trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSleepRecord {
    pub iteration: usize,
    pub grid: usize,
    pub neg_log_snr: f64,
}

/// Sleep dynamics on a whole locally connected layer.
///
/// Each `(out_channel, grid)` population is its own bundle. Iteration `t`
/// tiles a fresh Gaussian block anchored at input grid `t mod k²` (round
/// robin) and every bundle takes one step on the receptive fields it sees.
/// Records per-grid `-ln SNR` (pooled over output channels) after every
/// iteration, with iteration 0 the starting point.
pub fn layer_sleep_run(
    layer: &mut LocalLayer,
    partition: &GridPartition,
    cfg: &SleepConfig,
    rng: &RngStream,
) -> Result<Vec<LayerSleepRecord>> {
    cfg.validate()?;
    let s = layer.shape;
    if partition.k != s.kernel || partition.height != s.height || partition.width != s.width {
        return Err(Error::mismatch(
            "layer_sleep_run",
            format!("partition k={} over {}x{}", s.kernel, s.height, s.width),
            format!("k={} over {}x{}", partition.k, partition.height, partition.width),
        ));
    }
    let mut pattern_rng = rng.substream(0);
    let mut noise_rng = rng.substream(1);

    // bundles indexed [grid][out_channel]
    let mut bundles: Vec<Vec<(WeightBundle, Velocity)>> = Vec::with_capacity(partition.len());
    for grid in partition.grids() {
        let mut per_channel = Vec::with_capacity(s.out_channels);
        for o in 0..s.out_channels {
            let rows: Vec<Vec<f64>> = grid.iter().map(|&(y, x)| layer.neuron_weights(o, y, x)).collect();
            per_channel.push((WeightBundle::new(DenseMatrix::from_rows(&rows)?)?, Velocity::new(cfg.momentum)));
        }
        bundles.push(per_channel);
    }

    let grid_snr = |bs: &[(WeightBundle, Velocity)]| -> Result<f64> {
        if bs[0].0.neurons() < 2 {
            return Ok(f64::NAN);
        }
        // stack channels side by side so columns stay within one channel
        let n = bs[0].0.neurons();
        let d = bs[0].0.dim();
        let mut wide = DenseMatrix::zeros(n, d * bs.len());
        for (c, (b, _)) in bs.iter().enumerate() {
            for r in 0..n {
                wide.row_mut(r)[c * d..(c + 1) * d].copy_from_slice(b.weights().row(r));
            }
        }
        snr(&wide).map(|v| v.neg_log())
    };

    let mut records = Vec::new();
    for (g, bs) in bundles.iter().enumerate() {
        records.push(LayerSleepRecord {
            iteration: 0,
            grid: g,
            neg_log_snr: grid_snr(bs)?,
        });
    }
    for t in 0..cfg.iterations {
        let pattern = generate_pattern(
            partition,
            s.in_channels,
            t % partition.len(),
            PatternBase::Gaussian(&mut pattern_rng),
        )?;
        let eta = cfg.schedule.rate(t);
        for (g, grid) in partition.grids().iter().enumerate() {
            let mut fields = DenseMatrix::zeros(grid.len(), s.field_len());
            for (r, &(y, x)) in grid.iter().enumerate() {
                let f = receptive_field(&pattern.input, y, x, s.kernel, s.padding);
                fields.row_mut(r).copy_from_slice(&f);
            }
            if cfg.noise_std > 0.0 {
                let noise = gaussian(&mut noise_rng, 0.0, cfg.noise_std, fields.data().len())?;
                for (v, e) in fields.data_mut().iter_mut().zip(noise) {
                    *v += e;
                }
            }
            for (bundle, vel) in bundles[g].iter_mut() {
                for _ in 0..cfg.updates_per_input {
                    sleep_step(bundle, NeuronInputs::PerNeuron(&fields), cfg.gamma, eta, cfg.inhibition, vel)?;
                }
            }
        }
        for (g, bs) in bundles.iter().enumerate() {
            records.push(LayerSleepRecord {
                iteration: t + 1,
                grid: g,
                neg_log_snr: grid_snr(bs)?,
            });
        }
    }

    for (g, grid) in partition.grids().iter().enumerate() {
        for (o, (bundle, _)) in bundles[g].iter().enumerate() {
            for (r, &(y, x)) in grid.iter().enumerate() {
                layer.set_neuron_weights(o, y, x, bundle.weights().row(r));
            }
        }
    }
    Ok(records)
}
