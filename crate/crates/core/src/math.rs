//! Dense linear algebra, seeded sampling and SPD solves.
//!
//! Everything is `f64` and row-major. The matrices here are small (at most a
//! few hundred rows), so the routines favour a fixed summation order over
//! blocking tricks: the same inputs always give bit-identical outputs.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(
                "DenseMatrix::new",
                format!("{} entries ({rows}x{cols})", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::mismatch(
                    "DenseMatrix::from_rows",
                    format!("row length {cols}"),
                    format!("row {i} of length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::mismatch(
                "matvec",
                format!("vector of length {} for {}x{} matrix", self.cols, self.rows, self.cols),
                format!("length {}", v.len()),
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::mismatch(
                "matmul",
                format!("{}x{} times {}x_", self.rows, self.cols, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self + s * I`; requires a square matrix.
    pub fn add_diagonal(&self, s: f64) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::mismatch("add_diagonal", "square matrix", format!("{}x{}", self.rows, self.cols)));
        }
        let mut m = self.clone();
        for i in 0..self.rows {
            m.data[i * self.cols + i] += s;
        }
        Ok(m)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                "sub",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over rows, i.e. the average row vector.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Second-moment matrix `(1/M) Σ x_m x_mᵀ` of the rows.
    pub fn second_moment(inputs: &[Vec<f64>]) -> Result<Self> {
        let m = inputs.len();
        if m == 0 {
            return Err(Error::invalid("second moment of an empty input set"));
        }
        let d = inputs[0].len();
        let mut c = Self::zeros(d, d);
        for x in inputs {
            if x.len() != d {
                return Err(Error::mismatch("second_moment", format!("inputs of length {d}"), x.len()));
            }
            for a in 0..d {
                let xa = x[a];
                let row = &mut c.data[a * d..(a + 1) * d];
                for (dst, xb) in row.iter_mut().zip(x) {
                    *dst += xa * xb;
                }
            }
        }
        let inv = 1.0 / m as f64;
        c.data.iter_mut().for_each(|v| *v *= inv);
        Ok(c)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower-triangular Cholesky factor of an SPD matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::mismatch("cholesky", "square matrix", format!("{}x{}", a.rows(), a.cols())));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Singular { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Square-root-free `L D Lᵀ` factorisation (unit lower `L`, stored below
/// the diagonal, `D` on it). Pivots are the squared Cholesky diagonals, so
/// failures name the same index.
fn ldl(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::mismatch("solve_spd", "square matrix", format!("{}x{}", a.rows(), a.cols())));
    }
    let mut f = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= f.get(j, k) * f.get(j, k) * f.get(k, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular { pivot: j, value: d });
        }
        f.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= f.get(i, k) * f.get(j, k) * f.get(k, k);
            }
            f.set(i, j, s / d);
        }
    }
    Ok(f)
}

fn ldl_substitute(f: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = f.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= f.get(i, k) * y[k];
        }
        y[i] = s;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i] / f.get(i, i);
        for k in (i + 1)..n {
            s -= f.get(k, i) * x[k];
        }
        x[i] = s;
    }
    x
}

/// Solve `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::mismatch(
            "solve_spd",
            format!("right-hand side of length {}", a.rows()),
            format!("length {}", b.len()),
        ));
    }
    let f = ldl(a)?;
    Ok(ldl_substitute(&f, b))
}

/// Solve `a X = B` column by column, with `B` given as rows of the result's
/// transpose: each row of `rhs` is one right-hand side.
pub fn solve_spd_rows(a: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    if rhs.cols() != a.rows() {
        return Err(Error::mismatch(
            "solve_spd_rows",
            format!("right-hand sides of length {}", a.rows()),
            format!("length {}", rhs.cols()),
        ));
    }
    let f = ldl(a)?;
    let mut out = DenseMatrix::zeros(rhs.rows(), rhs.cols());
    for r in 0..rhs.rows() {
        let x = ldl_substitute(&f, rhs.row(r));
        out.row_mut(r).copy_from_slice(&x);
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, splittable random stream.
///
/// Backed by ChaCha8 in counter mode: the key comes from the seed and each
/// substream gets its own 64-bit stream id, so substreams are independent of
/// the order (or thread) in which they are consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `id`. Does not advance `self`.
    pub fn substream(&self, id: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(id.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits in [0, 1)
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. samples from N(mean, std²).
pub fn gaussian(rng: &mut RngStream, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("gaussian std must be finite and >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(vec![mean; n]);
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(&mut rng.inner)).collect())
}

pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, mean: f64, std: f64) -> Result<DenseMatrix> {
    let data = gaussian(rng, mean, std, rows * cols)?;
    DenseMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_examples() {
        let id = DenseMatrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(DenseMatrix::zeros(2, 2).matvec(&[5.0, 7.0]).unwrap(), vec![0.0, 0.0]);
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_mismatch_reports_shapes() {
        let m = DenseMatrix::zeros(2, 3);
        let err = m.matvec(&[1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn new_rejects_bad_data() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn solve_identity_and_scaled() {
        let b = vec![4.0, 6.0];
        assert_eq!(solve_spd(&DenseMatrix::identity(2), &b).unwrap(), b);
        assert_eq!(solve_spd(&DenseMatrix::scaled_identity(2, 2.0), &b).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = RngStream::new(11);
        let g = gaussian_matrix(&mut rng, 5, 5, 0.0, 1.0).unwrap();
        let a = g.transpose().matmul(&g).unwrap().add_diagonal(0.1).unwrap();
        let b = gaussian(&mut rng, 0.0, 1.0, 5).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        let ax = a.matvec(&x).unwrap();
        let res: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm(&res) / norm(&b) < 1e-10);
    }

    #[test]
    fn solve_non_spd_names_pivot() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        match solve_spd(&a, &[1.0, 1.0]) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_degenerate_and_errors() {
        let mut rng = RngStream::new(1);
        assert_eq!(gaussian(&mut rng, 2.5, 0.0, 4).unwrap(), vec![2.5; 4]);
        assert!(gaussian(&mut rng, 0.0, -1.0, 4).is_err());
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = gaussian(&mut RngStream::new(42), 0.0, 1.0, 64).unwrap();
        let b = gaussian(&mut RngStream::new(42), 0.0, 1.0, 64).unwrap();
        assert_eq!(a, b);
        let c = gaussian(&mut RngStream::new(43), 0.0, 1.0, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_law_of_large_numbers() {
        let v = gaussian(&mut RngStream::new(5), 1.0, 1.0, 1_000_000).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn substreams_are_order_independent() {
        let root = RngStream::new(9);
        let mut a1 = root.substream(1);
        let mut a2 = root.substream(2);
        let x1 = a1.standard_normal();
        let x2 = a2.standard_normal();
        // consume in the opposite order
        let mut b2 = root.substream(2);
        let mut b1 = root.substream(1);
        assert_eq!(b2.standard_normal(), x2);
        assert_eq!(b1.standard_normal(), x1);
        assert_ne!(x1, x2);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = RngStream::new(3);
        let mut hist = [0usize; 7];
        for _ in 0..7000 {
            hist[rng.below(7)] += 1;
        }
        assert!(hist.iter().all(|&h| h > 800), "{hist:?}");
    }
}
