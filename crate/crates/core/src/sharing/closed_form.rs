//! Closed-form fixed points of the sleep dynamics and a deterministic
//! full-batch solver used to cross-check them.

use crate::error::{Error, Result};
use crate::math::{dot, solve_spd, solve_spd_rows, DenseMatrix};

use super::{row_mean_exact, Inhibition, WeightBundle};

fn check_cov(init: &DenseMatrix, cov: &DenseMatrix, op: &'static str) -> Result<()> {
    let d = init.cols();
    if cov.shape() != (d, d) {
        return Err(Error::mismatch(op, format!("{d}x{d} second moment"), format!("{}x{}", cov.rows(), cov.cols())));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

/// `w_i* = (C + γI)⁻¹ (C μ_init + γ w_i^init)` for a given second moment `C`.
pub fn fixed_point_cov(init: &DenseMatrix, cov: &DenseMatrix, gamma: f64) -> Result<DenseMatrix> {
    check_cov(init, cov, "fixed_point")?;
    check_gamma(gamma)?;
    let mu = row_mean_exact(init);
    let c_mu = cov.matvec(&mu)?;
    let mut rhs = init.scale(gamma);
    for r in 0..rhs.rows() {
        for (v, cm) in rhs.row_mut(r).iter_mut().zip(&c_mu) {
            *v += cm;
        }
    }
    solve_spd_rows(&cov.add_diagonal(gamma)?, &rhs)
}

/// Fixed point of the unbiased dynamics for the inputs `x_1..x_M`.
pub fn fixed_point(bundle: &WeightBundle, inputs: &[Vec<f64>], gamma: f64) -> Result<DenseMatrix> {
    let cov = DenseMatrix::second_moment(inputs)?;
    fixed_point_cov(bundle.init(), &cov, gamma)
}

/// Fixed point under a finite inhibitory gain α:
/// `(C+γI)⁻¹ ( γα/(1+α) · C ((1/(1+α))C + γI)⁻¹ μ_init + γ w_i^init )`.
///
/// `alpha = ∞` gives [`fixed_point_cov`].
pub fn biased_fixed_point_cov(init: &DenseMatrix, cov: &DenseMatrix, gamma: f64, alpha: f64) -> Result<DenseMatrix> {
    check_cov(init, cov, "biased_fixed_point")?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("biased fixed point needs gamma > 0, got {gamma}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("biased fixed point needs alpha > 0, got {alpha}")));
    }
    if alpha.is_infinite() {
        return fixed_point_cov(init, cov, gamma);
    }
    let mu = row_mean_exact(init);
    let inner = cov.scale(1.0 / (1.0 + alpha)).add_diagonal(gamma)?;
    let v = solve_spd(&inner, &mu)?;
    let u: Vec<f64> = cov.matvec(&v)?.into_iter().map(|x| x * gamma * alpha / (1.0 + alpha)).collect();
    let mut rhs = init.scale(gamma);
    for r in 0..rhs.rows() {
        for (a, b) in rhs.row_mut(r).iter_mut().zip(&u) {
            *a += b;
        }
    }
    solve_spd_rows(&cov.add_diagonal(gamma)?, &rhs)
}

pub fn biased_fixed_point(bundle: &WeightBundle, inputs: &[Vec<f64>], gamma: f64, alpha: f64) -> Result<DenseMatrix> {
    let cov = DenseMatrix::second_moment(inputs)?;
    biased_fixed_point_cov(bundle.init(), &cov, gamma, alpha)
}

/// Pairwise disagreement plus anchor decay:
/// `1/(4MN) Σ_m Σ_ij (z_i − z_j)² + γ/2 Σ_i ‖w_i − w_i^init‖²`.
pub fn objective(weights: &DenseMatrix, init: &DenseMatrix, inputs: &[Vec<f64>], gamma: f64) -> Result<f64> {
    if weights.shape() != init.shape() {
        return Err(Error::mismatch(
            "objective",
            format!("{}x{}", init.rows(), init.cols()),
            format!("{}x{}", weights.rows(), weights.cols()),
        ));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("objective needs at least one input"));
    }
    let (n, m) = (weights.rows(), inputs.len());
    let mut pair = 0.0;
    for x in inputs {
        if x.len() != weights.cols() {
            return Err(Error::mismatch("objective", weights.cols(), x.len()));
        }
        let z: Vec<f64> = (0..n).map(|i| dot(weights.row(i), x)).collect();
        for zi in &z {
            for zj in &z {
                pair += (zi - zj) * (zi - zj);
            }
        }
    }
    let decay = weights.sub(init)?.frobenius_sq();
    Ok(pair / (4.0 * (m * n) as f64) + 0.5 * gamma * decay)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentOptions {
    pub max_iterations: usize,
    /// Stop once `‖G‖_F ≤ tolerance · max(1, ‖γ W_init‖_F)`.
    pub tolerance: f64,
    /// Nesterov acceleration; plain gradient descent otherwise.
    pub accelerated: bool,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            tolerance: 1e-13,
            accelerated: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub weights: DenseMatrix,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, capped
/// by the Gershgorin bound.
fn top_eigenvalue(c: &DenseMatrix) -> f64 {
    let d = c.rows();
    let gersh = (0..d).map(|r| c.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = c.matvec(&v).expect("square");
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / nw).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // power iteration approaches from below; pad it so the step stays safe
    (lambda * 1.01).min(gersh).max(lambda)
}

/// `G = (W − c·1μ_Wᵀ) C + γ (W − W_init)`, the expected update direction.
fn gradient(w: &DenseMatrix, init: &DenseMatrix, cov: &DenseMatrix, gamma: f64, coupling: f64) -> DenseMatrix {
    let mu = w.row_mean();
    let mut centred = w.clone();
    for r in 0..centred.rows() {
        for (v, m) in centred.row_mut(r).iter_mut().zip(&mu) {
            *v -= coupling * m;
        }
    }
    let mut g = centred.matmul(cov).expect("checked shapes");
    for ((gv, wv), iv) in g.data_mut().iter_mut().zip(w.data()).zip(init.data()) {
        *gv += gamma * (wv - iv);
    }
    g
}

/// Full-batch descent of the averaged dynamics from `W_init` until the
/// update direction vanishes. Deterministic; used as an oracle for the
/// closed forms.
pub fn descend(
    init: &DenseMatrix,
    cov: &DenseMatrix,
    gamma: f64,
    inhibition: Inhibition,
    opts: &DescentOptions,
) -> Result<DescentReport> {
    check_cov(init, cov, "descend")?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("descent needs gamma > 0, got {gamma}")));
    }
    inhibition.validate()?;
    let coupling = inhibition.coupling();
    let lmax = top_eigenvalue(cov) + gamma;
    let step = 1.0 / lmax;
    let q = gamma / lmax;
    let beta = if opts.accelerated {
        (1.0 - q.sqrt()) / (1.0 + q.sqrt())
    } else {
        0.0
    };
    let target = opts.tolerance * init.scale(gamma).frobenius().max(1.0);

    let mut w = init.clone();
    let mut prev = init.clone();
    let mut gnorm = f64::INFINITY;
    for it in 0..opts.max_iterations {
        // look-ahead point
        let mut y = w.clone();
        if beta > 0.0 {
            for ((yv, wv), pv) in y.data_mut().iter_mut().zip(w.data()).zip(prev.data()) {
                *yv = wv + beta * (wv - pv);
            }
        }
        let g = gradient(&y, init, cov, gamma, coupling);
        let gy = g.frobenius();
        let mut next = y;
        for (nv, gv) in next.data_mut().iter_mut().zip(g.data()) {
            *nv -= step * gv;
        }
        if !next.is_finite() {
            return Err(Error::Divergence {
                context: format!("descent iteration {}", it + 1),
                max_abs: next.max_abs(),
            });
        }
        prev = std::mem::replace(&mut w, next);
        gnorm = gradient(&w, init, cov, gamma, coupling).frobenius();
        if gnorm <= target || gy == 0.0 {
            return Ok(DescentReport {
                weights: w,
                iterations: it + 1,
                gradient_norm: gnorm,
                converged: true,
            });
        }
    }
    Ok(DescentReport {
        weights: w,
        iterations: opts.max_iterations,
        gradient_norm: gnorm,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_matrix, RngStream};

    fn rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius().max(1e-300)
    }

    #[test]
    fn identity_cov_closed_form() {
        let mut rng = RngStream::new(1);
        let init = gaussian_matrix(&mut rng, 6, 3, 1.0, 1.0).unwrap();
        let gamma = 0.3;
        let w = fixed_point_cov(&init, &DenseMatrix::identity(3), gamma).unwrap();
        let mu = init.row_mean();
        for r in 0..6 {
            for c in 0..3 {
                let expect = mu[c] / (1.0 + gamma) + gamma * init.get(r, c) / (1.0 + gamma);
                assert!((w.get(r, c) - expect).abs() < 1e-14);
            }
        }
        // mean is conserved
        let m = w.row_mean();
        for c in 0..3 {
            assert!((m[c] - mu[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn large_gamma_keeps_init() {
        let mut rng = RngStream::new(2);
        let init = gaussian_matrix(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        let w = fixed_point_cov(&init, &DenseMatrix::identity(3), 1e9).unwrap();
        assert!(rel(&w, &init) < 1e-8);
    }

    #[test]
    fn singular_without_decay() {
        let init = DenseMatrix::zeros(3, 2);
        let b = WeightBundle::new(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap()).unwrap();
        let err = fixed_point(&b, &[vec![1.0, 0.0], vec![2.0, 0.0]], 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err}");
        assert!(fixed_point_cov(&init, &DenseMatrix::identity(3), 0.1).is_err());
    }

    #[test]
    fn biased_identity_cov() {
        let mut rng = RngStream::new(3);
        let init = gaussian_matrix(&mut rng, 5, 2, 1.0, 1.0).unwrap();
        let (gamma, alpha) = (0.05, 10.0);
        let w = biased_fixed_point_cov(&init, &DenseMatrix::identity(2), gamma, alpha).unwrap();
        let mu = init.row_mean();
        for r in 0..5 {
            for c in 0..2 {
                let expect = gamma / (1.0 + gamma) * (alpha / (1.0 + gamma * (1.0 + alpha)) * mu[c] + init.get(r, c));
                assert!((w.get(r, c) - expect).abs() < 1e-13);
            }
        }
        let huge = biased_fixed_point_cov(&init, &DenseMatrix::identity(2), gamma, 1e12).unwrap();
        let unbiased = fixed_point_cov(&init, &DenseMatrix::identity(2), gamma).unwrap();
        assert!(rel(&huge, &unbiased) < 1e-9);
        assert!(biased_fixed_point_cov(&init, &DenseMatrix::identity(2), 0.0, alpha).is_err());
        assert!(biased_fixed_point_cov(&init, &DenseMatrix::identity(2), gamma, 0.0).is_err());
    }

    #[test]
    fn descent_matches_closed_forms() {
        let mut rng = RngStream::new(4);
        let init = gaussian_matrix(&mut rng, 10, 4, 1.0, 1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..12).map(|_| crate::math::gaussian(&mut rng, 0.5, 1.0, 4).unwrap()).collect();
        let cov = DenseMatrix::second_moment(&xs).unwrap();
        for gamma in [1e-1, 1e-3] {
            let rep = descend(&init, &cov, gamma, Inhibition::Infinite, &DescentOptions::default()).unwrap();
            assert!(rep.converged);
            let exact = fixed_point_cov(&init, &cov, gamma).unwrap();
            assert!(rel(&rep.weights, &exact) < 1e-6, "{}", rel(&rep.weights, &exact));
            let rep = descend(&init, &cov, gamma, Inhibition::Finite(10.0), &DescentOptions::default()).unwrap();
            let exact = biased_fixed_point_cov(&init, &cov, gamma, 10.0).unwrap();
            assert!(rel(&rep.weights, &exact) < 1e-6);
        }
    }

    #[test]
    fn objective_is_minimal_at_fixed_point() {
        let mut rng = RngStream::new(5);
        let init = gaussian_matrix(&mut rng, 6, 3, 1.0, 1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| crate::math::gaussian(&mut rng, 1.0, 1.0, 3).unwrap()).collect();
        let b = WeightBundle::new(init.clone()).unwrap();
        let w = fixed_point(&b, &xs, 0.1).unwrap();
        let best = objective(&w, &init, &xs, 0.1).unwrap();
        for _ in 0..20 {
            let noise = gaussian_matrix(&mut rng, 6, 3, 0.0, 1e-3).unwrap();
            let mut p = w.clone();
            for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
            assert!(objective(&p, &init, &xs, 0.1).unwrap() > best);
        }
        assert_eq!(objective(&init, &init, &[vec![0.0; 3]], 0.1).unwrap(), 0.0);
    }
}
