//! Direct weight sharing: projecting onto grid means, and the column-wise
//! sharing used for patch-embedding matrices.

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::topology::{GridPartition, LocalLayer};

use super::closed_form::{descend, DescentOptions};
use super::Inhibition;

/// Arithmetic mean that returns the common value exactly when all values
/// are equal, so projections stay idempotent under rounding.
pub fn exact_mean<I>(values: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let mut it = values.clone();
    let first = match it.next() {
        Some(v) => v,
        None => return f64::NAN,
    };
    if it.all(|v| v == first) {
        return first;
    }
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Replaces every kernel by the mean kernel of its grid, per output channel.
pub fn instant_share(layer: &LocalLayer, partition: &GridPartition) -> Result<LocalLayer> {
    let s = &layer.shape;
    if partition.k != s.kernel {
        return Err(Error::mismatch("instant_share", format!("partition k = {}", s.kernel), partition.k));
    }
    if partition.height != s.height || partition.width != s.width {
        return Err(Error::mismatch(
            "instant_share",
            format!("partition of {}x{}", s.height, s.width),
            format!("{}x{}", partition.height, partition.width),
        ));
    }
    let kk = s.kernel * s.kernel;
    let mut out = layer.clone();
    for o in 0..s.out_channels {
        for grid in partition.grids() {
            for i in 0..s.in_channels {
                for e in 0..kk {
                    let vals = grid.iter().map(|&(y, x)| layer.weights[layer.offset(o, i, y, x) + e]);
                    let m = exact_mean(vals);
                    for &(y, x) in grid {
                        let at = out.offset(o, i, y, x) + e;
                        out.weights[at] = m;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `d` scaled basis vectors whose second moment is the identity.
pub fn basis_inputs(d: usize) -> Vec<Vec<f64>> {
    let s = (d as f64).sqrt();
    (0..d)
        .map(|j| {
            let mut v = vec![0.0; d];
            v[j] = s;
            v
        })
        .collect()
}

/// Shares a patch-embedding matrix `U` (D × D') across patches.
///
/// Column `j` of every `U_i` forms one population of neurons that see the
/// same D-dimensional input; each population is driven to the fixed point
/// of the sleep dynamics with second moment `cov`. Returns the updated
/// per-patch matrices.
pub fn patch_share(
    patches: &[DenseMatrix],
    cov: &DenseMatrix,
    gamma: f64,
    opts: &DescentOptions,
) -> Result<Vec<DenseMatrix>> {
    let first = patches.first().ok_or_else(|| Error::invalid("patch_share needs at least one patch"))?;
    let (d, cols) = first.shape();
    for p in patches {
        if p.shape() != (d, cols) {
            return Err(Error::mismatch(
                "patch_share",
                format!("{d}x{cols}"),
                format!("{}x{}", p.rows(), p.cols()),
            ));
        }
    }
    let mut out: Vec<DenseMatrix> = patches.to_vec();
    if patches.len() < 2 {
        return Ok(out);
    }
    for j in 0..cols {
        let rows: Vec<Vec<f64>> = patches.iter().map(|p| p.column(j)).collect();
        let init = DenseMatrix::from_rows(&rows)?;
        let rep = descend(&init, cov, gamma, Inhibition::Infinite, opts)?;
        if !rep.converged {
            return Err(Error::invalid(format!(
                "patch sharing did not converge in column {j} (gradient norm {:e})",
                rep.gradient_norm
            )));
        }
        for (i, p) in out.iter_mut().enumerate() {
            for r in 0..d {
                p.set(r, j, rep.weights.get(i, r));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_matrix, RngStream};
    use crate::sharing::fixed_point_cov;
    use crate::topology::{make_partition, LayerShape};

    #[test]
    fn exact_mean_is_exact() {
        assert_eq!(exact_mean([0.1, 0.1, 0.1].into_iter()), 0.1);
        assert_eq!(exact_mean([1.0, 2.0, 6.0].into_iter()), 3.0);
        assert!(exact_mean(std::iter::empty()).is_nan());
    }

    #[test]
    fn sharing_is_a_projection() {
        let mut rng = RngStream::new(11);
        let shape = LayerShape::new(2, 3, 7, 5, 3).unwrap();
        let layer = LocalLayer::kaiming(shape, &mut rng);
        let p = make_partition(3, 7, 5).unwrap();
        let once = instant_share(&layer, &p).unwrap();
        let twice = instant_share(&once, &p).unwrap();
        assert_eq!(once, twice);
        // grid sums are preserved
        for grid in p.grids() {
            for e in 0..9 {
                let a: f64 = grid.iter().map(|&(y, x)| layer.weights[layer.offset(1, 0, y, x) + e]).sum();
                let b: f64 = grid.iter().map(|&(y, x)| once.weights[once.offset(1, 0, y, x) + e]).sum();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_kernels_average() {
        let shape = LayerShape::new(1, 1, 1, 4, 3).unwrap();
        let mut layer = LocalLayer::zeros(shape);
        layer.set_neuron_weights(0, 0, 0, &[1.0; 9]);
        layer.set_neuron_weights(0, 0, 3, &[3.0; 9]);
        let p = make_partition(3, 1, 4).unwrap();
        let shared = instant_share(&layer, &p).unwrap();
        assert_eq!(shared.neuron_weights(0, 0, 0), vec![2.0; 9]);
        assert_eq!(shared.neuron_weights(0, 0, 3), vec![2.0; 9]);
        assert_eq!(shared.neuron_weights(0, 0, 1), vec![0.0; 9]);
    }

    #[test]
    fn kernel_mismatch() {
        let layer = LocalLayer::zeros(LayerShape::new(1, 1, 6, 6, 3).unwrap());
        assert!(instant_share(&layer, &make_partition(5, 6, 6).unwrap()).is_err());
        assert!(instant_share(&layer, &make_partition(3, 6, 5).unwrap()).is_err());
    }

    #[test]
    fn basis_second_moment() {
        let c = DenseMatrix::second_moment(&basis_inputs(5)).unwrap();
        let id = DenseMatrix::identity(5);
        assert!(c.sub(&id).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn patch_share_examples() {
        let cov = DenseMatrix::identity(2);
        let opts = DescentOptions::default();
        let same = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let out = patch_share(&[same.clone(), same.clone()], &cov, 1e-3, &opts).unwrap();
        assert!(out.iter().all(|m| m.sub(&same).unwrap().max_abs() < 1e-12));

        let m = same;
        let zero = DenseMatrix::zeros(2, 3);
        let out = patch_share(&[zero, m.scale(2.0)], &cov, 1e-9, &opts).unwrap();
        for o in &out {
            assert!(o.sub(&m).unwrap().max_abs() < 1e-6);
        }
        assert!(patch_share(&[DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 2)], &cov, 1e-3, &opts).is_err());
    }

    #[test]
    fn patch_share_matches_fixed_point() {
        let mut rng = RngStream::new(12);
        let patches: Vec<DenseMatrix> = (0..4).map(|_| gaussian_matrix(&mut rng, 4, 12, 0.0, 1.0).unwrap()).collect();
        let cov = DenseMatrix::second_moment(&basis_inputs(4)).unwrap();
        let out = patch_share(&patches, &cov, 1e-3, &DescentOptions::default()).unwrap();
        for j in 0..12 {
            let rows: Vec<Vec<f64>> = patches.iter().map(|p| p.column(j)).collect();
            let exact = fixed_point_cov(&DenseMatrix::from_rows(&rows).unwrap(), &cov, 1e-3).unwrap();
            for (i, o) in out.iter().enumerate() {
                for r in 0..4 {
                    assert!((o.get(r, j) - exact.get(i, r)).abs() < 1e-6);
                }
            }
        }
    }
}
