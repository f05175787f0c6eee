//! Locally connected and convolutional layers, grid partitions and repeating
//! input patterns.
//!
//! Both layer kinds use cross-correlation (no kernel flip), stride 1 and
//! "same" output size with `pad = k / 2`. They share one summation routine,
//! so a locally connected layer whose kernels are all tied to a convolution
//! kernel produces bit-identical output.

use crate::error::{Error, Result};
use crate::math::{gaussian, RngStream};

/// Dense `(channels, height, width)` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::mismatch(
                "Tensor3::from_vec",
                format!("{} values for ({channels}, {height}, {width})", channels * height * width),
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// How receptive fields that leave the input plane are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-range pixels read as zero.
    #[default]
    Zero,
    /// The plane wraps around (torus).
    Circular,
}

/// Input padded by `pad` on every side, filled according to `padding`.
fn pad_input(input: &Tensor3, pad: usize, padding: Padding) -> Tensor3 {
    let (c, h, w) = input.shape();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor3::zeros(c, ph, pw);
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let y = py as isize - pad as isize;
                let x = px as isize - pad as isize;
                let v = match padding {
                    Padding::Zero => {
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            0.0
                        } else {
                            input.get(ch, y as usize, x as usize)
                        }
                    }
                    Padding::Circular => {
                        input.get(ch, y.rem_euclid(h as isize) as usize, x.rem_euclid(w as isize) as usize)
                    }
                };
                out.set(ch, py, px, v);
            }
        }
    }
    out
}

/// Geometry shared by both layer kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl LayerShape {
    pub fn new(in_channels: usize, out_channels: usize, height: usize, width: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        if in_channels == 0 || out_channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            height,
            width,
            kernel,
            padding: Padding::Zero,
        })
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    #[inline]
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Entries in one receptive field: `in_channels * k * k`.
    #[inline]
    pub fn field_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    fn check_input(&self, input: &Tensor3, op: &'static str) -> Result<()> {
        let want = (self.in_channels, self.height, self.width);
        if input.shape() != want {
            return Err(Error::mismatch(op, format!("{want:?}"), format!("{:?}", input.shape())));
        }
        Ok(())
    }
}

/// Cross-correlation where the `k×k` kernel block for `(o, i, y, x)` starts
/// at `weights[offset(o, i, y, x)]`. Summation order is `i, ky, kx`.
fn correlate(
    shape: &LayerShape,
    input: &Tensor3,
    weights: &[f64],
    offset: impl Fn(usize, usize, usize, usize) -> usize,
) -> Tensor3 {
    let k = shape.kernel;
    let padded = pad_input(input, shape.pad(), shape.padding);
    let mut out = Tensor3::zeros(shape.out_channels, shape.height, shape.width);
    for o in 0..shape.out_channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let mut acc = 0.0;
                for i in 0..shape.in_channels {
                    let base = offset(o, i, y, x);
                    let kern = &weights[base..base + k * k];
                    for ky in 0..k {
                        let row = padded.idx(i, y + ky, x);
                        let pix = &padded.data[row..row + k];
                        let kr = &kern[ky * k..(ky + 1) * k];
                        for kx in 0..k {
                            acc += kr[kx] * pix[kx];
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

/// Backward pass of [`correlate`]: accumulates into `grad_w` (same layout as
/// the weights) and returns the input gradient.
fn correlate_backward(
    shape: &LayerShape,
    input: &Tensor3,
    weights: &[f64],
    grad_out: &Tensor3,
    grad_w: &mut [f64],
    offset: impl Fn(usize, usize, usize, usize) -> usize,
    want_input_grad: bool,
) -> Option<Tensor3> {
    let k = shape.kernel;
    let pad = shape.pad();
    let padded = pad_input(input, pad, shape.padding);
    let mut grad_pad = Tensor3::zeros(shape.in_channels, padded.height, padded.width);
    for o in 0..shape.out_channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let g = grad_out.get(o, y, x);
                if g == 0.0 {
                    continue;
                }
                for i in 0..shape.in_channels {
                    let base = offset(o, i, y, x);
                    for ky in 0..k {
                        let row = padded.idx(i, y + ky, x);
                        for kx in 0..k {
                            grad_w[base + ky * k + kx] += g * padded.data[row + kx];
                            if want_input_grad {
                                grad_pad.data[row + kx] += g * weights[base + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    if !want_input_grad {
        return None;
    }
    let (h, w) = (shape.height, shape.width);
    let mut grad_in = Tensor3::zeros(shape.in_channels, h, w);
    for i in 0..shape.in_channels {
        for py in 0..padded.height {
            for px in 0..padded.width {
                let g = grad_pad.get(i, py, px);
                if g == 0.0 {
                    continue;
                }
                let y = py as isize - pad as isize;
                let x = px as isize - pad as isize;
                match shape.padding {
                    Padding::Zero => {
                        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                            let j = grad_in.idx(i, y as usize, x as usize);
                            grad_in.data[j] += g;
                        }
                    }
                    Padding::Circular => {
                        let j = grad_in.idx(i, y.rem_euclid(h as isize) as usize, x.rem_euclid(w as isize) as usize);
                        grad_in.data[j] += g;
                    }
                }
            }
        }
    }
    Some(grad_in)
}

/// Locally connected layer: every output position owns its own kernel.
///
/// Weights are stored in `(out_ch, in_ch, y, x, ky, kx)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLayer {
    pub shape: LayerShape,
    pub weights: Vec<f64>,
}

/// Convolutional layer: one `k×k` kernel per `(out_ch, in_ch)` pair,
/// stored in `(out_ch, in_ch, ky, kx)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub shape: LayerShape,
    pub weights: Vec<f64>,
}

impl LocalLayer {
    pub fn weight_len(shape: &LayerShape) -> usize {
        shape.out_channels * shape.in_channels * shape.positions() * shape.kernel * shape.kernel
    }

    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            weights: vec![0.0; Self::weight_len(&shape)],
            shape,
        }
    }

    pub fn new(shape: LayerShape, weights: Vec<f64>) -> Result<Self> {
        let want = Self::weight_len(&shape);
        if weights.len() != want {
            return Err(Error::mismatch("LocalLayer::new", want, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite locally connected weight"));
        }
        Ok(Self { shape, weights })
    }

    /// Kaiming-normal init: N(0, 2 / (out_channels · k²)).
    pub fn kaiming(shape: LayerShape, rng: &mut RngStream) -> Self {
        let std = (2.0 / (shape.out_channels * shape.kernel * shape.kernel) as f64).sqrt();
        let weights = gaussian(rng, 0.0, std, Self::weight_len(&shape)).expect("std is positive");
        Self { shape, weights }
    }

    /// Offset of the `k×k` block for `(o, i, y, x)`.
    #[inline]
    pub fn offset(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((o * s.in_channels + i) * s.height + y) * s.width + x) * s.kernel * s.kernel
    }

    /// Copies the full receptive-field kernel `(i, ky, kx)` of output
    /// neuron `(o, y, x)`.
    pub fn neuron_weights(&self, o: usize, y: usize, x: usize) -> Vec<f64> {
        let kk = self.shape.kernel * self.shape.kernel;
        let mut v = Vec::with_capacity(self.shape.field_len());
        for i in 0..self.shape.in_channels {
            let b = self.offset(o, i, y, x);
            v.extend_from_slice(&self.weights[b..b + kk]);
        }
        v
    }

    pub fn set_neuron_weights(&mut self, o: usize, y: usize, x: usize, w: &[f64]) {
        let kk = self.shape.kernel * self.shape.kernel;
        for i in 0..self.shape.in_channels {
            let b = self.offset(o, i, y, x);
            self.weights[b..b + kk].copy_from_slice(&w[i * kk..(i + 1) * kk]);
        }
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        self.shape.check_input(input, "lc_forward")?;
        Ok(correlate(&self.shape, input, &self.weights, |o, i, y, x| self.offset(o, i, y, x)))
    }

    /// Accumulates weight gradients into `grad_w`; returns the input gradient
    /// when `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        grad_w: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        correlate_backward(
            &self.shape,
            input,
            &self.weights,
            grad_out,
            grad_w,
            |o, i, y, x| self.offset(o, i, y, x),
            want_input_grad,
        )
    }

    /// Copy of this layer with every position's kernel set to `kernel`
    /// (shape `(out_ch, in_ch, k, k)`).
    pub fn tie_to_kernel(&self, kernel: &[f64]) -> Result<LocalLayer> {
        let s = &self.shape;
        let kk = s.kernel * s.kernel;
        let want = s.out_channels * s.in_channels * kk;
        if kernel.len() != want {
            return Err(Error::mismatch(
                "tie_lc_to_conv",
                format!("kernel of {want} values ({}, {}, {}, {})", s.out_channels, s.in_channels, s.kernel, s.kernel),
                kernel.len(),
            ));
        }
        let mut out = self.clone();
        for o in 0..s.out_channels {
            for i in 0..s.in_channels {
                let src = &kernel[(o * s.in_channels + i) * kk..(o * s.in_channels + i + 1) * kk];
                for y in 0..s.height {
                    for x in 0..s.width {
                        let b = out.offset(o, i, y, x);
                        out.weights[b..b + kk].copy_from_slice(src);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_conv(conv: &ConvLayer) -> LocalLayer {
        LocalLayer::zeros(conv.shape)
            .tie_to_kernel(&conv.weights)
            .expect("conv kernel matches its own shape")
    }
}

impl ConvLayer {
    pub fn weight_len(shape: &LayerShape) -> usize {
        shape.out_channels * shape.in_channels * shape.kernel * shape.kernel
    }

    pub fn new(shape: LayerShape, weights: Vec<f64>) -> Result<Self> {
        let want = Self::weight_len(&shape);
        if weights.len() != want {
            return Err(Error::mismatch("ConvLayer::new", want, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite convolution weight"));
        }
        Ok(Self { shape, weights })
    }

    pub fn kaiming(shape: LayerShape, rng: &mut RngStream) -> Self {
        let std = (2.0 / (shape.out_channels * shape.kernel * shape.kernel) as f64).sqrt();
        let weights = gaussian(rng, 0.0, std, Self::weight_len(&shape)).expect("std is positive");
        Self { shape, weights }
    }

    #[inline]
    pub fn offset(&self, o: usize, i: usize) -> usize {
        (o * self.shape.in_channels + i) * self.shape.kernel * self.shape.kernel
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        self.shape.check_input(input, "conv_forward")?;
        Ok(correlate(&self.shape, input, &self.weights, |o, i, _, _| self.offset(o, i)))
    }

    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        grad_w: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        correlate_backward(
            &self.shape,
            input,
            &self.weights,
            grad_out,
            grad_w,
            |o, i, _, _| self.offset(o, i),
            want_input_grad,
        )
    }
}

/// Receptive field of output position `(y, x)`, ordered `(i, ky, kx)`.
pub fn receptive_field(input: &Tensor3, y: usize, x: usize, kernel: usize, padding: Padding) -> Vec<f64> {
    let pad = (kernel / 2) as isize;
    let (c, h, w) = input.shape();
    let mut v = Vec::with_capacity(c * kernel * kernel);
    for i in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let yy = y as isize + ky as isize - pad;
                let xx = x as isize + kx as isize - pad;
                let val = match padding {
                    Padding::Zero if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize => 0.0,
                    Padding::Zero => input.get(i, yy as usize, xx as usize),
                    Padding::Circular => {
                        input.get(i, yy.rem_euclid(h as isize) as usize, xx.rem_euclid(w as isize) as usize)
                    }
                };
                v.push(val);
            }
        }
    }
    v
}

/// The residue-class modules of output positions that share weights: `k²`
/// grids in 2-D, `k` grids when `height == 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPartition {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    grids: Vec<Vec<(usize, usize)>>,
}

impl GridPartition {
    pub fn new(k: usize, height: usize, width: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("grid period k must be >= 1"));
        }
        let one_d = height == 1;
        let count = if one_d { k } else { k * k };
        let mut grids = vec![Vec::new(); count];
        for y in 0..height {
            for x in 0..width {
                let g = if one_d { x % k } else { (y % k) * k + x % k };
                grids[g].push((y, x));
            }
        }
        Ok(Self { k, height, width, grids })
    }

    pub fn is_one_d(&self) -> bool {
        self.height == 1
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn grids(&self) -> &[Vec<(usize, usize)>] {
        &self.grids
    }

    pub fn grid(&self, g: usize) -> &[(usize, usize)] {
        &self.grids[g]
    }

    pub fn grid_of(&self, y: usize, x: usize) -> usize {
        if self.is_one_d() {
            x % self.k
        } else {
            (y % self.k) * self.k + x % self.k
        }
    }

    /// Row and column residues of grid `g`.
    pub fn residues(&self, g: usize) -> (usize, usize) {
        if self.is_one_d() {
            (0, g)
        } else {
            (g / self.k, g % self.k)
        }
    }
}

pub fn make_partition(k: usize, height: usize, width: usize) -> Result<GridPartition> {
    GridPartition::new(k, height, width)
}

/// Source of the `k×k` block a repeating pattern is tiled from.
pub enum PatternBase<'a> {
    /// Explicit block, `channels * k * k` values (`channels * k` in 1-D).
    Given(&'a [f64]),
    /// Fresh N(0, 1) block.
    Gaussian(&'a mut RngStream),
    /// Only the active grid fires, with unit amplitude.
    Indicator,
}

/// An input plane tiled with period `k`, anchored so that block entry
/// `(0, 0)` sits on the active grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatingPattern {
    pub k: usize,
    pub active_grid: usize,
    /// `channels * k * k` (or `channels * k` in 1-D) block values.
    pub base: Vec<f64>,
    pub input: Tensor3,
}

pub fn generate_pattern(
    partition: &GridPartition,
    channels: usize,
    grid_index: usize,
    base: PatternBase<'_>,
) -> Result<RepeatingPattern> {
    if grid_index >= partition.len() {
        return Err(Error::invalid(format!(
            "grid index {grid_index} out of range for {} grids",
            partition.len()
        )));
    }
    let k = partition.k;
    let block = if partition.is_one_d() { k } else { k * k };
    let base = match base {
        PatternBase::Given(b) => {
            if b.len() != channels * block {
                return Err(Error::mismatch("generate_pattern", channels * block, b.len()));
            }
            b.to_vec()
        }
        PatternBase::Gaussian(rng) => gaussian(rng, 0.0, 1.0, channels * block)?,
        PatternBase::Indicator => {
            let mut b = vec![0.0; channels * block];
            for c in 0..channels {
                b[c * block] = 1.0;
            }
            b
        }
    };
    let (g1, g2) = partition.residues(grid_index);
    let (h, w) = (partition.height, partition.width);
    let mut input = Tensor3::zeros(channels, h, w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let by = (y + k - g1 % k) % k;
                let bx = (x + k - g2 % k) % k;
                let v = if partition.is_one_d() {
                    base[c * block + bx]
                } else {
                    base[c * block + by * k + bx]
                };
                input.set(c, y, x, v);
            }
        }
    }
    Ok(RepeatingPattern {
        k,
        active_grid: grid_index,
        base,
        input,
    })
}

/// Cyclic shift of the spatial axes: output `(y + dy, x + dx)` takes input
/// `(y, x)`, indices taken modulo the extents.
pub fn shift_input(input: &Tensor3, dy: isize, dx: isize) -> Tensor3 {
    let (c, h, w) = input.shape();
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let ny = (y as isize + dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let nx = (x as isize + dx).rem_euclid(w as isize) as usize;
                out.set(ch, ny, nx, input.get(ch, y, x));
            }
        }
    }
    out
}
