use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dynshare::io::{format_f64, write_table, write_trajectory, flat_rows};
use dynshare::math::{gaussian, gaussian_matrix, DenseMatrix, RngStream};
use dynshare::par;
use dynshare::ratecircuit::{rate_sleep_run, Plasticity, RateCircuit};
use dynshare::sharing::{
    biased_fixed_point_cov, descend, fixed_point_cov, loglog_slope, noisy_sgd_error, plateau, sleep_run, snr_floor,
    DescentOptions, Inhibition, NoiseFloorConfig, Schedule, SleepConfig, SleepTrajectory, WeightBundle,
};
use dynshare::trainer::{
    load_idx, train_seeded, translated_shapes, Arch, OptimizerConfig, ShapesConfig, SharingMode, Splits, StackSpec,
    TrainConfig, TrainHistory,
};

use crate::manifest::RunManifest;
use crate::params::{params, List, OutDir, Params};
use crate::CliError;

fn resolve<P: Params>(pairs: &[(String, String)], overlay: impl FnOnce(&mut P)) -> Result<P, CliError> {
    let mut p = P::default();
    p.apply_pairs(pairs)?;
    overlay(&mut p);
    Ok(p)
}

/// Runs a subcommand from resolved key/value pairs (used by replay).
pub fn run_named(sub: &str, pairs: &[(String, String)]) -> Result<(), CliError> {
    match sub {
        "sleep-ideal" => run_sleep_ideal(pairs, &SleepIdealFlags::default()),
        "sleep-rate" => run_sleep_rate(pairs, &SleepRateFlags::default()),
        "fixed-point" => run_fixed_point(pairs, &FixedPointFlags::default()),
        "noise-floor" => run_noise_floor(pairs, &NoiseFloorFlags::default()),
        "train" => run_train(pairs, &TrainFlags::default()),
        "compare" => run_compare(pairs, &CompareFlags::default()),
        other => Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
    }
}

fn g_label(g: f64) -> String {
    format!("{g:e}")
}

fn check_nonempty<T>(list: &List<T>, name: &str) -> Result<(), CliError> {
    if list.0.is_empty() {
        return Err(CliError::Usage(format!("--{name} needs at least one value")));
    }
    Ok(())
}

// ---------------------------------------------------------------- sleep

params! {
    SleepIdealParams / SleepIdealFlags {
        n: usize = "100"; "neurons sharing one kernel"
        k: List<usize> = "3,6,9"; "kernel sizes (D = k²)"
        gamma: List<f64> = "0.01,0.001"; "weight-decay strengths"
        iters: usize = "2000"; "inputs presented"
        seeds: usize = "10"; "seeds per cell"
        seed: u64 = "0"; "first seed"
        lr_schedule: Schedule = "inverse_time:0.5:1000"; "inverse_time:A:B | inverse_sqrt:A:B:WARMUP | constant:A"
        momentum: f64 = "0.95"; "heavy-ball momentum"
        input_mean: f64 = "1"; "input mean"
        input_std: f64 = "1"; "input std"
        init_mean: f64 = "1"; "initial weight mean"
        init_std: f64 = "1"; "initial weight std"
        noise_std: f64 = "0"; "per-neuron input noise std"
        out: OutDir = "out/sleep-ideal"; "output directory"
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateMode {
    Ode,
    Discrete,
}

impl FromStr for RateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ode" => Ok(RateMode::Ode),
            "discrete" => Ok(RateMode::Discrete),
            _ => Err(format!("expected ode or discrete, got '{s}'")),
        }
    }
}

impl fmt::Display for RateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateMode::Ode => "ode",
            RateMode::Discrete => "discrete",
        })
    }
}

params! {
    SleepRateParams / SleepRateFlags {
        n: usize = "100"; "neurons sharing one kernel"
        k: List<usize> = "3,6,9"; "kernel sizes (D = k²)"
        gamma: List<f64> = "0.01"; "weight-decay strengths"
        iters: usize = "10000"; "inputs presented"
        seeds: usize = "2"; "seeds per cell"
        seed: u64 = "0"; "first seed"
        lr_schedule: Schedule = "inverse_sqrt:0.0003:2:50"; "plasticity schedule per presentation"
        momentum: f64 = "0"; "heavy-ball momentum"
        input_mean: f64 = "0"; "input mean"
        input_std: f64 = "1"; "input std"
        init_mean: f64 = "1"; "initial weight mean"
        init_std: f64 = "1"; "initial weight std"
        noise_std: f64 = "0"; "per-neuron input noise std"
        alpha: Inhibition = "10"; "inhibitory gain (inf for ideal)"
        tau_ms: f64 = "30"; "rate time constant"
        dt_ms: f64 = "1"; "Euler step"
        present_ms: f64 = "150"; "presentation time per input"
        bias: f64 = "1"; "baseline rate b"
        plasticity: Plasticity = "continuous"; "continuous | terminal"
        reset_rates: bool = "false"; "reset rates to b before each input"
        mode: RateMode = "ode"; "ode | discrete (settled biased update)"
        out: OutDir = "out/sleep-rate"; "output directory"
    }
}

struct SleepCell {
    k: usize,
    gamma: f64,
    seed: u64,
}

fn cells(ks: &List<usize>, gammas: &List<f64>, seed: u64, seeds: usize) -> Vec<SleepCell> {
    let mut out = Vec::new();
    for &k in &ks.0 {
        for &gamma in &gammas.0 {
            for s in 0..seeds as u64 {
                out.push(SleepCell { k, gamma, seed: seed + s });
            }
        }
    }
    out
}

fn initial_bundle(n: usize, k: usize, mean: f64, std: f64, seed: u64) -> Result<WeightBundle, CliError> {
    let w = gaussian_matrix(&mut RngStream::new(seed).substream(0), n, k * k, mean, std)?;
    Ok(WeightBundle::new(w)?)
}

fn write_sleep_outputs(
    man: &mut RunManifest,
    cells: &[SleepCell],
    results: Vec<Result<(SleepTrajectory, Option<f64>), CliError>>,
    iters: usize,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        let (traj, nonneg) = res?;
        if iters > 0 {
            let name = format!("traj_k{}_g{}_s{}.csv", cell.k, g_label(cell.gamma), cell.seed);
            write_trajectory(&man.artifact(&name), &flat_rows(&traj.neg_log_snr))?;
        }
        let (min_at, min) = traj.minimum();
        let mut row = vec![
            cell.k.to_string(),
            format_f64(cell.gamma),
            cell.seed.to_string(),
            format_f64(traj.initial()),
            format_f64(traj.terminal()),
            min_at.to_string(),
            format_f64(min),
            format_f64(snr_floor(cell.gamma)?),
        ];
        if let Some(f) = nonneg {
            row.push(format_f64(f));
        }
        rows.push(row);
    }
    let mut header = vec!["k", "gamma", "seed", "initial", "terminal", "min_iteration", "minimum", "snr_floor"];
    if rows.first().is_some_and(|r| r.len() > header.len()) {
        header.push("nonnegative_fraction");
    }
    write_table(&man.artifact("summary.csv"), &header, &rows)?;
    Ok(())
}

pub fn run_sleep_ideal(pairs: &[(String, String)], flags: &SleepIdealFlags) -> Result<(), CliError> {
    let p: SleepIdealParams = resolve(pairs, |p: &mut SleepIdealParams| p.overlay(flags))?;
    check_nonempty(&p.k, "k")?;
    check_nonempty(&p.gamma, "gamma")?;
    let mut man = RunManifest::start("sleep-ideal", &p, &p.out.0)?;
    let cells = cells(&p.k, &p.gamma, p.seed, p.seeds);
    let results = par::map_collect(&cells, |c| {
        let cfg = SleepConfig {
            gamma: c.gamma,
            iterations: p.iters,
            schedule: p.lr_schedule,
            momentum: p.momentum,
            input_mean: p.input_mean,
            input_std: p.input_std,
            noise_std: p.noise_std,
            inhibition: Inhibition::Infinite,
            updates_per_input: 1,
        };
        let mut b = initial_bundle(p.n, c.k, p.init_mean, p.init_std, c.seed)?;
        let t = sleep_run(&mut b, &cfg, &RngStream::new(c.seed).substream(1))?;
        Ok((t, None))
    });
    write_sleep_outputs(&mut man, &cells, results, p.iters)?;
    println!("sleep-ideal: {} cells written to {}", cells.len(), p.out);
    man.finish()
}

pub fn run_sleep_rate(pairs: &[(String, String)], flags: &SleepRateFlags) -> Result<(), CliError> {
    let p: SleepRateParams = resolve(pairs, |p: &mut SleepRateParams| p.overlay(flags))?;
    check_nonempty(&p.k, "k")?;
    check_nonempty(&p.gamma, "gamma")?;
    // Validate the circuit once up front so a bad dt is a usage error.
    let mut proto = RateCircuit::new(p.n, p.tau_ms, p.alpha, p.bias, p.dt_ms, p.present_ms)?;
    proto.plasticity = p.plasticity;
    proto.reset_rates = p.reset_rates;

    let mut man = RunManifest::start("sleep-rate", &p, &p.out.0)?;
    let cells = cells(&p.k, &p.gamma, p.seed, p.seeds);
    let results = par::map_collect(&cells, |c| {
        let mut cfg = SleepConfig {
            gamma: c.gamma,
            iterations: p.iters,
            schedule: p.lr_schedule,
            momentum: p.momentum,
            input_mean: p.input_mean,
            input_std: p.input_std,
            noise_std: p.noise_std,
            inhibition: p.alpha,
            updates_per_input: match p.plasticity {
                Plasticity::Continuous => proto.steps_per_presentation(),
                Plasticity::Terminal => 1,
            },
        };
        let mut b = initial_bundle(p.n, c.k, p.init_mean, p.init_std, c.seed)?;
        let rng = RngStream::new(c.seed).substream(1);
        match p.mode {
            RateMode::Discrete => Ok((sleep_run(&mut b, &cfg, &rng)?, None)),
            RateMode::Ode => {
                cfg.updates_per_input = 1;
                let mut circuit = proto.clone();
                let r = rate_sleep_run(&mut b, &mut circuit, &cfg, &rng)?;
                Ok((r.trajectory, Some(r.nonnegative_fraction)))
            }
        }
    });
    write_sleep_outputs(&mut man, &cells, results, p.iters)?;
    let mut meta = proto.metadata();
    meta.push(("mode".into(), p.mode.to_string()));
    dynshare::io::write_key_values(&man.artifact("circuit.txt"), &meta)?;
    println!("sleep-rate ({}): {} cells written to {}", p.mode, cells.len(), p.out);
    man.finish()
}

// ---------------------------------------------------------- fixed point

params! {
    FixedPointParams / FixedPointFlags {
        instances: usize = "50"; "seeded instances per gamma"
        max_neurons: usize = "20"; "neurons drawn from 2..=this"
        max_dim: usize = "16"; "input dim drawn from 1..=this"
        inputs: usize = "0"; "inputs per instance (0 = 2·dim)"
        gamma: List<f64> = "0.1,0.001"; "weight-decay strengths"
        alpha: Inhibition = "inf"; "inhibitory gain for the biased form"
        tol: f64 = "1e-4"; "max allowed relative error"
        seed: u64 = "0"; "base seed"
        out: OutDir = "out/fixed-point"; "output directory"
    }
}

pub fn run_fixed_point(pairs: &[(String, String)], flags: &FixedPointFlags) -> Result<(), CliError> {
    let p: FixedPointParams = resolve(pairs, |p: &mut FixedPointParams| p.overlay(flags))?;
    check_nonempty(&p.gamma, "gamma")?;
    if p.max_neurons < 2 || p.max_dim == 0 {
        return Err(CliError::Usage("need max-neurons >= 2 and max-dim >= 1".into()));
    }
    let mut man = RunManifest::start("fixed-point", &p, &p.out.0)?;
    let jobs: Vec<(f64, u64)> = p
        .gamma
        .0
        .iter()
        .flat_map(|&g| (0..p.instances as u64).map(move |i| (g, i)))
        .collect();
    let results = par::map_collect(&jobs, |&(gamma, i)| -> Result<Vec<String>, CliError> {
        let mut rng = RngStream::new(p.seed).substream(i);
        let n = 2 + rng.below(p.max_neurons - 1);
        let d = 1 + rng.below(p.max_dim);
        let m = if p.inputs == 0 { 2 * d } else { p.inputs };
        let init = gaussian_matrix(&mut rng, n, d, 1.0, 1.0)?;
        let xs: Vec<Vec<f64>> = (0..m).map(|_| gaussian(&mut rng, 0.5, 1.0, d)).collect::<Result<_, _>>()?;
        let cov = DenseMatrix::second_moment(&xs)?;
        let closed = match p.alpha {
            Inhibition::Infinite => fixed_point_cov(&init, &cov, gamma)?,
            Inhibition::Finite(a) => biased_fixed_point_cov(&init, &cov, gamma, a)?,
        };
        let rep = descend(&init, &cov, gamma, p.alpha, &DescentOptions::default())?;
        let rel = rep.weights.sub(&closed)?.frobenius() / closed.frobenius().max(f64::MIN_POSITIVE);
        Ok(vec![
            i.to_string(),
            n.to_string(),
            d.to_string(),
            m.to_string(),
            format_f64(gamma),
            p.alpha.to_string(),
            format_f64(rel),
            rep.iterations.to_string(),
            rep.converged.to_string(),
        ])
    });
    let rows: Vec<Vec<String>> = results.into_iter().collect::<Result<_, _>>()?;
    write_table(
        &man.artifact("fixed_point.csv"),
        &["instance", "neurons", "dim", "inputs", "gamma", "alpha", "rel_error", "iterations", "converged"],
        &rows,
    )?;
    let worst = rows
        .iter()
        .max_by(|a, b| a[6].parse::<f64>().unwrap_or(f64::NAN).total_cmp(&b[6].parse::<f64>().unwrap_or(f64::NAN)));
    man.finish()?;
    if let Some(w) = worst {
        let err: f64 = w[6].parse().unwrap_or(f64::INFINITY);
        println!("fixed-point: max relative error {err:e} (instance {}, gamma {}, alpha {})", w[0], w[4], w[5]);
        if err.is_nan() || err > p.tol {
            return Err(CliError::Tolerance(format!(
                "relative error {err:e} > {} at instance {} (n={}, d={}, m={}, gamma={})",
                p.tol, w[0], w[1], w[2], w[3], w[4]
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------- noise floor

params! {
    NoiseFloorParams / NoiseFloorFlags {
        sigma: List<f64> = "0,0.1,0.2,0.4"; "input noise levels"
        seeds: usize = "10"; "seeds averaged per sigma"
        seed: u64 = "0"; "first seed"
        iters: usize = "20000"; "SGD iterations"
        gamma: f64 = "0.04"; "weight decay"
        a: f64 = "20"; "step size a/(b+k)"
        b: f64 = "200"; "step size a/(b+k)"
        neurons: usize = "20"; "neurons"
        dim: usize = "4"; "input dimension"
        inputs: usize = "16"; "size of the fixed input set"
        out: OutDir = "out/noise-floor"; "output directory"
    }
}

pub fn run_noise_floor(pairs: &[(String, String)], flags: &NoiseFloorFlags) -> Result<(), CliError> {
    let p: NoiseFloorParams = resolve(pairs, |p: &mut NoiseFloorParams| p.overlay(flags))?;
    check_nonempty(&p.sigma, "sigma")?;
    if p.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let cfg = NoiseFloorConfig {
        neurons: p.neurons,
        dim: p.dim,
        inputs: p.inputs,
        gamma: p.gamma,
        a: p.a,
        b: p.b,
        iterations: p.iters,
        ..NoiseFloorConfig::default()
    };
    cfg.validate()?;
    let mut man = RunManifest::start("noise-floor", &p, &p.out.0)?;
    let jobs: Vec<(f64, u64)> = p
        .sigma
        .0
        .iter()
        .flat_map(|&s| (0..p.seeds as u64).map(move |i| (s, p.seed + i)))
        .collect();
    let runs = par::map_collect(&jobs, |&(s, seed)| noisy_sgd_error(&cfg, s, &RngStream::new(seed)));
    let runs: Vec<Vec<f64>> = runs.into_iter().collect::<Result<_, _>>()?;

    let mut plateau_rows = Vec::new();
    let mut means = Vec::new();
    for (si, &sigma) in p.sigma.0.iter().enumerate() {
        let group = &runs[si * p.seeds..(si + 1) * p.seeds];
        let mean: Vec<f64> = (0..=p.iters)
            .map(|k| group.iter().map(|t| t[k]).sum::<f64>() / p.seeds as f64)
            .collect();
        let rows: Vec<Vec<String>> = mean.iter().enumerate().map(|(k, v)| vec![k.to_string(), format_f64(*v)]).collect();
        write_table(&man.artifact(&format!("error_sigma{}.csv", g_label(sigma))), &["iteration", "mean_sq_error"], &rows)?;
        for (j, t) in group.iter().enumerate() {
            plateau_rows.push(vec![format_f64(sigma), (p.seed + j as u64).to_string(), format_f64(plateau(t))]);
        }
        means.push((sigma, plateau(&mean), mean));
    }
    write_table(&man.artifact("plateaus.csv"), &["sigma", "seed", "plateau"], &plateau_rows)?;

    let mut report = Vec::new();
    for w in means.windows(2) {
        let ratio = w[1].1 / w[0].1;
        report.push(vec![format_f64(w[0].0), format_f64(w[1].0), format_f64(ratio)]);
        println!("noise-floor: plateau({}) / plateau({}) = {ratio:.3}", w[1].0, w[0].0);
    }
    write_table(&man.artifact("ratios.csv"), &["sigma_lo", "sigma_hi", "plateau_ratio"], &report)?;
    if let Some((_, _, clean)) = means.iter().find(|m| m.0 == 0.0) {
        let (lo, hi) = (p.iters / 20, p.iters / 2);
        if hi > lo + 1 {
            println!("noise-floor: sigma = 0 log-log slope {:.3}", loglog_slope(clean, lo.max(1), hi)?);
        }
    }
    man.finish()
}

// -------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptKind {
    AdamW,
    Sgd,
}

impl FromStr for OptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptKind::AdamW),
            "sgd" => Ok(OptKind::Sgd),
            _ => Err(format!("expected adamw or sgd, got '{s}'")),
        }
    }
}

impl fmt::Display for OptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptKind::AdamW => "adamw",
            OptKind::Sgd => "sgd",
        })
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Shapes,
    /// IDX image and label files, `images:labels`.
    Idx(String, String),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "shapes" {
            return Ok(DataSource::Shapes);
        }
        match s.strip_prefix("idx:").and_then(|r| r.split_once(':')) {
            Some((i, l)) => Ok(DataSource::Idx(i.into(), l.into())),
            None => Err(format!("expected shapes or idx:IMAGES:LABELS, got '{s}'")),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Shapes => f.write_str("shapes"),
            DataSource::Idx(i, l) => write!(f, "idx:{i}:{l}"),
        }
    }
}

/// One arm of the comparison matrix: `conv`, `lc`, `lc+repsN` or `lc+wsN`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmSpec {
    pub arch: Arch,
    pub reps: usize,
    pub ws_every: Option<usize>,
}

impl FromStr for ArmSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        let num = |t: &str| t.parse::<usize>().map_err(|_| format!("bad arm '{s}'"));
        let arm = match s.as_str() {
            "conv" => ArmSpec { arch: Arch::Conv, reps: 1, ws_every: None },
            "lc" => ArmSpec { arch: Arch::Local, reps: 1, ws_every: None },
            _ => {
                let rest = s.strip_prefix("lc+").ok_or_else(|| format!("bad arm '{s}'"))?;
                if let Some(n) = rest.strip_prefix("reps") {
                    ArmSpec { arch: Arch::Local, reps: num(n)?, ws_every: None }
                } else if let Some(n) = rest.strip_prefix("ws") {
                    ArmSpec { arch: Arch::Local, reps: 1, ws_every: Some(num(n)?) }
                } else {
                    return Err(format!("bad arm '{s}'"));
                }
            }
        };
        if arm.reps == 0 || arm.ws_every == Some(0) {
            return Err(format!("bad arm '{s}': counts must be >= 1"));
        }
        Ok(arm)
    }
}

impl fmt::Display for ArmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.arch, self.reps, self.ws_every) {
            (Arch::Conv, _, _) => f.write_str("conv"),
            (_, r, None) if r > 1 => write!(f, "lc+reps{r}"),
            (_, _, Some(n)) => write!(f, "lc+ws{n}"),
            _ => f.write_str("lc"),
        }
    }
}

params! {
    TrainParams / TrainFlags {
        arm: ArmSpec = "lc"; "conv | lc | lc+repsN | lc+wsN"
        depth: usize = "2"; "3x3 layers"
        channels: usize = "8"; "channels per layer"
        optimizer: OptKind = "adamw"; "adamw | sgd"
        lr: f64 = "0.03"; "base learning rate"
        momentum: f64 = "0.9"; "sgd momentum"
        weight_decay: f64 = "1e-4"; "adamw decoupled weight decay"
        batch_size: usize = "32"; "images per batch"
        epochs: usize = "40"; "passes over the distinct training images"
        milestones: List<usize> = "20,30"; "epochs where lr is divided by 4"
        pad: usize = "2"; "random translation range"
        sharing: String = "instant"; "instant | dynamics"
        data: DataSource = "shapes"; "shapes | idx:IMAGES:LABELS"
        count: usize = "800"; "synthetic images"
        size: usize = "16"; "synthetic image side"
        classes: usize = "8"; "synthetic classes"
        noise: f64 = "0"; "synthetic pixel noise"
        center: bool = "false"; "subtract the train mean when normalizing"
        share_moments: bool = "false"; "also average optimizer moments when sharing"
        val: usize = "160"; "validation images"
        test: usize = "160"; "test images"
        seeds: usize = "3"; "seeds"
        seed: u64 = "0"; "first seed"
        out: OutDir = "out/train"; "output directory"
    }
}

params! {
    CompareParams / CompareFlags {
        arms: List<ArmSpec> = "conv,lc,lc+reps4,lc+reps8,lc+reps16,lc+ws1,lc+ws10,lc+ws100"; "arms to run"
        depth: usize = "2"; "3x3 layers"
        channels: usize = "8"; "channels per layer"
        optimizer: OptKind = "adamw"; "adamw | sgd"
        lr: f64 = "0.03"; "base learning rate"
        momentum: f64 = "0.9"; "sgd momentum"
        weight_decay: f64 = "1e-4"; "adamw decoupled weight decay"
        batch_size: usize = "32"; "images per batch"
        epochs: usize = "40"; "passes over the distinct training images"
        milestones: List<usize> = "20,30"; "epochs where lr is divided by 4"
        pad: usize = "2"; "random translation range"
        data: DataSource = "shapes"; "shapes | idx:IMAGES:LABELS"
        count: usize = "800"; "synthetic images"
        size: usize = "16"; "synthetic image side"
        classes: usize = "8"; "synthetic classes"
        noise: f64 = "0"; "synthetic pixel noise"
        center: bool = "false"; "subtract the train mean when normalizing"
        share_moments: bool = "false"; "also average optimizer moments when sharing"
        val: usize = "160"; "validation images"
        test: usize = "160"; "test images"
        seeds: usize = "3"; "seeds"
        seed: u64 = "0"; "first seed"
        out: OutDir = "out/compare"; "output directory"
    }
}

/// Parameters shared by `train` and `compare`.
struct Recipe<'a> {
    depth: usize,
    channels: usize,
    optimizer: OptKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    milestones: &'a [usize],
    pad: usize,
    sharing: SharingMode,
    share_moments: bool,
    data: &'a DataSource,
    shapes: ShapesConfig,
    center: bool,
    val: usize,
    test: usize,
}

impl Recipe<'_> {
    fn splits(&self, seed: u64) -> Result<Splits, CliError> {
        let data = match self.data {
            DataSource::Shapes => translated_shapes(&self.shapes, &mut RngStream::new(seed).substream(100))?,
            DataSource::Idx(i, l) => load_idx(Path::new(i), Path::new(l))?,
        };
        Ok(data.split_with(self.val, self.test, self.center, &mut RngStream::new(seed).substream(101))?)
    }

    fn config(&self, arm: ArmSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            stack: StackSpec {
                arch: arm.arch,
                depth: self.depth,
                channels: self.channels,
                ..StackSpec::default()
            },
            optimizer: match self.optimizer {
                OptKind::AdamW => OptimizerConfig::AdamW {
                    lr: self.lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: self.weight_decay,
                },
                OptKind::Sgd => OptimizerConfig::Sgd {
                    lr: self.lr,
                    momentum: self.momentum,
                },
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            ws_every: arm.ws_every,
            sharing: self.sharing.clone(),
            reps: arm.reps,
            pad: self.pad,
            milestones: self.milestones.to_vec(),
            share_moments: self.share_moments,
            seed,
        }
    }

    fn run(&self, arm: ArmSpec, seed: u64) -> Result<TrainHistory, CliError> {
        let splits = self.splits(seed)?;
        let cfg = self.config(arm, seed);
        Ok(train_seeded(&splits, &cfg)?.1)
    }
}

fn write_history(man: &mut RunManifest, tag: &str, h: &TrainHistory) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = h
        .metrics
        .iter()
        .map(|m| vec![m.epoch.to_string(), m.split.to_string(), format_f64(m.accuracy), format_f64(m.loss)])
        .collect();
    write_table(&man.artifact(&format!("metrics_{tag}.csv")), &["epoch", "split", "accuracy_top1", "loss"], &rows)?;
    if !h.events.is_empty() {
        let rows: Vec<Vec<String>> = h
            .events
            .iter()
            .map(|e| {
                vec![
                    e.event.to_string(),
                    e.layer.to_string(),
                    format_f64(e.neg_log_snr_pre),
                    format_f64(e.neg_log_snr_post),
                ]
            })
            .collect();
        write_table(
            &man.artifact(&format!("events_{tag}.csv")),
            &["event", "layer", "neg_log_snr_pre", "neg_log_snr_post"],
            &rows,
        )?;
    }
    Ok(())
}

fn parse_sharing(s: &str) -> Result<SharingMode, CliError> {
    match s.trim() {
        "instant" => Ok(SharingMode::Instant),
        "dynamics" => {
            let mut cfg = SleepConfig::ideal_protocol(1e-3);
            cfg.iterations = 500;
            cfg.input_mean = 0.0;
            Ok(SharingMode::Dynamics(cfg))
        }
        other => Err(CliError::Usage(format!("sharing must be instant or dynamics, got '{other}'"))),
    }
}

pub fn run_train(pairs: &[(String, String)], flags: &TrainFlags) -> Result<(), CliError> {
    let p: TrainParams = resolve(pairs, |p: &mut TrainParams| p.overlay(flags))?;
    let recipe = Recipe {
        depth: p.depth,
        channels: p.channels,
        optimizer: p.optimizer,
        lr: p.lr,
        momentum: p.momentum,
        weight_decay: p.weight_decay,
        batch_size: p.batch_size,
        epochs: p.epochs,
        milestones: &p.milestones.0,
        pad: p.pad,
        sharing: parse_sharing(&p.sharing)?,
        share_moments: p.share_moments,
        data: &p.data,
        shapes: ShapesConfig {
            count: p.count,
            size: p.size,
            classes: p.classes,
            noise: p.noise,
        },
        center: p.center,
        val: p.val,
        test: p.test,
    };
    recipe.config(p.arm, p.seed).validate()?;
    let mut man = RunManifest::start("train", &p, &p.out.0)?;
    let seeds: Vec<u64> = (0..p.seeds as u64).map(|i| p.seed + i).collect();
    let runs = par::map_collect(&seeds, |&s| recipe.run(p.arm, s));
    for (s, h) in seeds.iter().zip(runs) {
        let h = h?;
        println!("train {}: seed {s} test accuracy {:.4}", p.arm, h.test_accuracy);
        write_history(&mut man, &format!("s{s}"), &h)?;
    }
    man.finish()
}

pub fn run_compare(pairs: &[(String, String)], flags: &CompareFlags) -> Result<(), CliError> {
    let p: CompareParams = resolve(pairs, |p: &mut CompareParams| p.overlay(flags))?;
    check_nonempty(&p.arms, "arms")?;
    let recipe = Recipe {
        depth: p.depth,
        channels: p.channels,
        optimizer: p.optimizer,
        lr: p.lr,
        momentum: p.momentum,
        weight_decay: p.weight_decay,
        batch_size: p.batch_size,
        epochs: p.epochs,
        milestones: &p.milestones.0,
        pad: p.pad,
        sharing: SharingMode::Instant,
        share_moments: p.share_moments,
        data: &p.data,
        shapes: ShapesConfig {
            count: p.count,
            size: p.size,
            classes: p.classes,
            noise: p.noise,
        },
        center: p.center,
        val: p.val,
        test: p.test,
    };
    for &arm in &p.arms.0 {
        recipe.config(arm, p.seed).validate()?;
    }
    let mut man = RunManifest::start("compare", &p, &p.out.0)?;
    let jobs: Vec<(ArmSpec, u64)> = p
        .arms
        .0
        .iter()
        .flat_map(|&a| (0..p.seeds as u64).map(move |i| (a, p.seed + i)))
        .collect();
    let runs = par::map_collect(&jobs, |&(arm, s)| recipe.run(arm, s));

    let mut acc: Vec<(ArmSpec, Vec<f64>)> = p.arms.0.iter().map(|&a| (a, Vec::new())).collect();
    for ((arm, s), h) in jobs.iter().zip(runs) {
        let h = h?;
        write_history(&mut man, &format!("{arm}_s{s}"), &h)?;
        if let Some(slot) = acc.iter_mut().find(|(a, _)| a == arm) {
            slot.1.push(h.test_accuracy);
        }
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (arm, v) in &acc {
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("compare {arm:>12}: mean test accuracy {mean:.4} over {} seeds", v.len());
        rows.push(vec![arm.to_string(), v.len().to_string(), format_f64(mean), format_f64(min), format_f64(max)]);
        means.push((arm.to_string(), mean));
    }
    write_table(
        &man.artifact("summary.csv"),
        &["arm", "seeds", "mean_test_accuracy", "min_test_accuracy", "max_test_accuracy"],
        &rows,
    )?;
    let get = |name: &str| means.iter().find(|(a, _)| a == name).map(|m| m.1);
    if let (Some(conv), Some(lc)) = (get("conv"), get("lc")) {
        println!("compare: conv > lc: {}", conv > lc);
        if let Some(ws) = get("lc+ws1") {
            println!("compare: lc+ws1 closes {:.1}% of the conv-lc gap", 100.0 * (ws - lc) / (conv - lc));
        }
        if let Some(r) = get("lc+reps16") {
            println!("compare: lc+reps16 > lc: {}", r > lc);
        }
    }
    man.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_round_trip() {
        for s in ["conv", "lc", "lc+reps16", "lc+ws10"] {
            assert_eq!(s.parse::<ArmSpec>().unwrap().to_string(), s);
        }
        assert!("lc+ws0".parse::<ArmSpec>().is_err());
        assert!("mlp".parse::<ArmSpec>().is_err());
    }

    #[test]
    fn data_source_round_trip() {
        let d: DataSource = "idx:a.idx:b.idx".parse().unwrap();
        assert_eq!(d, DataSource::Idx("a.idx".into(), "b.idx".into()));
        assert_eq!(d.to_string(), "idx:a.idx:b.idx");
        assert!("csv:x".parse::<DataSource>().is_err());
    }

    #[test]
    fn defaults_resolve() {
        let p = SleepIdealParams::default();
        assert_eq!(p.k, List(vec![3, 6, 9]));
        let q = SleepRateParams::default();
        assert_eq!(q.alpha, Inhibition::Finite(10.0));
        assert_eq!(TrainParams::default().arm, "lc".parse().unwrap());
        assert_eq!(CompareParams::default().arms.0.len(), 8);
    }
}
