//! `[conv-or-LC 3×3 → ReLU] × L → average pool → linear` classifier with
//! hand-written backpropagation.

use crate::error::{Error, Result};
use crate::math::{gaussian, RngStream};
use crate::par;
use crate::topology::{ConvLayer, LayerShape, LocalLayer, Padding, Tensor3};

/// Layer family of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Conv,
    Local,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Conv => "conv",
            Arch::Local => "lc",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv" => Ok(Arch::Conv),
            "lc" | "local" => Ok(Arch::Local),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Local(LocalLayer),
}

impl Layer {
    pub fn shape(&self) -> &LayerShape {
        match self {
            Layer::Conv(l) => &l.shape,
            Layer::Local(l) => &l.shape,
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Layer::Conv(l) => &l.weights,
            Layer::Local(l) => &l.weights,
        }
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        match self {
            Layer::Conv(l) => &mut l.weights,
            Layer::Local(l) => &mut l.weights,
        }
    }

    fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Local(l) => l.forward(x),
        }
    }

    fn backward(&self, x: &Tensor3, g: &Tensor3, gw: &mut [f64], want_input: bool) -> Option<Tensor3> {
        match self {
            Layer::Conv(l) => l.backward(x, g, gw, want_input),
            Layer::Local(l) => l.backward(x, g, gw, want_input),
        }
    }
}

/// Geometry and width of a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackSpec {
    pub arch: Arch,
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Default for StackSpec {
    fn default() -> Self {
        Self {
            arch: Arch::Local,
            depth: 2,
            channels: 8,
            kernel: 3,
            padding: Padding::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    /// `classes × channels`, row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub classes: usize,
}

/// Gradients with the same layout as the stack's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Gradients {
    fn zeros_like(stack: &LayerStack) -> Self {
        Self {
            layers: stack.layers.iter().map(|l| vec![0.0; l.weights().len()]).collect(),
            head_w: vec![0.0; stack.head_w.len()],
            head_b: vec![0.0; stack.head_b.len()],
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.slots_mut().into_iter().zip(other.slots()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for slot in self.slots_mut() {
            slot.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slots(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().map(|l| l.as_slice()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.layers.iter_mut().map(|l| l.as_mut_slice()).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

/// Loss, gradient and hit count summed (not averaged) over some images.
struct Partial {
    loss: f64,
    correct: usize,
    grads: Gradients,
}

/// Batch loss and mean gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

/// Images processed per parallel task. Fixed so the reduction order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 4;

impl LayerStack {
    /// Kaiming-initialized stack for `(channels, height, width)` inputs.
    pub fn new(spec: &StackSpec, input: (usize, usize, usize), classes: usize, rng: &mut RngStream) -> Result<Self> {
        if spec.depth == 0 || spec.channels == 0 || classes == 0 {
            return Err(Error::invalid("stack needs depth, channels and classes >= 1"));
        }
        let (c, h, w) = input;
        let mut layers = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let cin = if l == 0 { c } else { spec.channels };
            let shape = LayerShape::new(cin, spec.channels, h, w, spec.kernel)?.with_padding(spec.padding);
            layers.push(match spec.arch {
                Arch::Conv => Layer::Conv(ConvLayer::kaiming(shape, rng)),
                Arch::Local => Layer::Local(LocalLayer::kaiming(shape, rng)),
            });
        }
        let std = (1.0 / spec.channels as f64).sqrt();
        let head_w = gaussian(rng, 0.0, std, classes * spec.channels)?;
        Ok(Self {
            layers,
            head_w,
            head_b: vec![0.0; classes],
            classes,
        })
    }

    /// Locally connected copy of a convolutional stack (every position
    /// starts from the shared kernel).
    pub fn tie_to_conv(conv: &LayerStack) -> LayerStack {
        let mut out = conv.clone();
        for l in &mut out.layers {
            if let Layer::Conv(c) = l {
                *l = Layer::Local(LocalLayer::from_conv(c));
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.shape().out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights().len()).sum::<usize>() + self.head_w.len() + self.head_b.len()
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.layers.iter_mut().map(|l| l.weights_mut()).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn slots(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().map(|l| l.weights()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    /// Pre-activations of every layer and the pooled features.
    fn trace(&self, x: &Tensor3) -> Result<(Vec<Tensor3>, Vec<Tensor3>, Vec<f64>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let z = layer.forward(&a)?;
            let mut next = z.clone();
            next.data.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let (c, h, w) = a.shape();
        let hw = (h * w) as f64;
        let pooled = (0..c).map(|ch| a.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw).collect();
        Ok((inputs, pre, pooled))
    }

    fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let c = pooled.len();
        (0..self.classes)
            .map(|k| self.head_b[k] + self.head_w[k * c..(k + 1) * c].iter().zip(pooled).map(|(w, f)| w * f).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &Tensor3) -> Result<Vec<f64>> {
        let (_, _, pooled) = self.trace(x)?;
        Ok(self.logits(&pooled))
    }

    fn single(&self, x: &Tensor3, label: usize, grads: &mut Gradients) -> Result<(f64, bool)> {
        let (inputs, pre, pooled) = self.trace(x)?;
        let logits = self.logits(&pooled);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + max - logits[label];
        let argmax = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;

        let c = pooled.len();
        let mut d_pooled = vec![0.0; c];
        for k in 0..self.classes {
            let d = exps[k] / z - if k == label { 1.0 } else { 0.0 };
            grads.head_b[k] += d;
            let row = &self.head_w[k * c..(k + 1) * c];
            for j in 0..c {
                grads.head_w[k * c + j] += d * pooled[j];
                d_pooled[j] += d * row[j];
            }
        }
        let last = pre.last().expect("depth >= 1");
        let (_, h, w) = last.shape();
        let hw = (h * w) as f64;
        let mut g = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            for i in ch * h * w..(ch + 1) * h * w {
                g.data[i] = d_pooled[ch] / hw;
            }
        }
        for l in (0..self.layers.len()).rev() {
            for (gv, zv) in g.data.iter_mut().zip(&pre[l].data) {
                if *zv <= 0.0 {
                    *gv = 0.0;
                }
            }
            let back = self.layers[l].backward(&inputs[l], &g, &mut grads.layers[l], l > 0);
            if let Some(next) = back {
                g = next;
            }
        }
        Ok((loss, argmax == label))
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn forward_backward(&self, images: &[Tensor3], labels: &[usize]) -> Result<BatchResult> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::mismatch("forward_backward", images.len(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        let chunks: Vec<usize> = (0..images.len().div_ceil(CHUNK)).collect();
        let partials = par::map_collect(&chunks, |&ci| -> Result<Partial> {
            let mut p = Partial {
                loss: 0.0,
                correct: 0,
                grads: Gradients::zeros_like(self),
            };
            let end = ((ci + 1) * CHUNK).min(images.len());
            for i in ci * CHUNK..end {
                let (loss, hit) = self.single(&images[i], labels[i], &mut p.grads)?;
                p.loss += loss;
                p.correct += hit as usize;
            }
            Ok(p)
        });
        let mut total = Partial {
            loss: 0.0,
            correct: 0,
            grads: Gradients::zeros_like(self),
        };
        for p in partials {
            let p = p?;
            total.loss += p.loss;
            total.correct += p.correct;
            total.grads.add(&p.grads);
        }
        let n = images.len() as f64;
        total.grads.scale(1.0 / n);
        let loss = total.loss / n;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: "non-finite training loss".into(),
                max_abs: loss.abs(),
            });
        }
        Ok(BatchResult {
            loss,
            correct: total.correct,
            grads: total.grads,
        })
    }

    /// `(mean loss, accuracy)` without gradients.
    pub fn evaluate(&self, images: &[Tensor3], labels: &[usize]) -> Result<(f64, f64)> {
        if images.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let idx: Vec<usize> = (0..images.len()).collect();
        let per = par::map_collect(&idx, |&i| -> Result<(f64, bool)> {
            let logits = self.predict(&images[i])?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let best = logits.iter().position(|&v| v == max).unwrap_or(0);
            Ok((z.ln() + max - logits[labels[i]], best == labels[i]))
        });
        let (mut loss, mut hits) = (0.0, 0usize);
        for r in per {
            let (l, h) = r?;
            loss += l;
            hits += h as usize;
        }
        let n = images.len() as f64;
        Ok((loss / n, hits as f64 / n))
    }

    /// Mean loss only, used by finite-difference checks.
    pub fn loss(&self, images: &[Tensor3], labels: &[usize]) -> Result<f64> {
        self.evaluate(images, labels).map(|(l, _)| l)
    }

    /// ReLU on/off pattern of every hidden unit, for detecting kinks.
    pub fn activation_pattern(&self, images: &[Tensor3]) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for x in images {
            let (_, pre, _) = self.trace(x)?;
            for z in pre {
                out.extend(z.data.iter().map(|v| *v > 0.0));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rng: &mut RngStream, n: usize) -> (Vec<Tensor3>, Vec<usize>) {
        let ims = (0..n)
            .map(|_| Tensor3::from_vec(1, 6, 6, gaussian(rng, 0.0, 1.0, 36).unwrap()).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        (ims, labels)
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut rng = RngStream::new(1);
        let mut s = LayerStack::new(&StackSpec::default(), (1, 6, 6), 4, &mut rng).unwrap();
        for slot in s.slots_mut() {
            slot.iter_mut().for_each(|v| *v = 0.0);
        }
        let (ims, _) = batch(&mut rng, 3);
        let r = s.forward_backward(&ims, &[0, 1, 3]).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicate_image_doubles_contribution() {
        let mut rng = RngStream::new(2);
        let s = LayerStack::new(&StackSpec::default(), (1, 6, 6), 3, &mut rng).unwrap();
        let (ims, labels) = batch(&mut rng, 2);
        let single = s.forward_backward(&ims[..1], &labels[..1]).unwrap();
        let other = s.forward_backward(&ims[1..], &labels[1..]).unwrap();
        let dup = s
            .forward_backward(&[ims[0].clone(), ims[0].clone(), ims[1].clone()], &[labels[0], labels[0], labels[1]])
            .unwrap();
        for ((a, b), c) in dup.grads.head_w.iter().zip(&single.grads.head_w).zip(&other.grads.head_w) {
            assert!((a - (2.0 * b + c) / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn tied_lc_matches_conv() {
        let mut rng = RngStream::new(3);
        let spec = StackSpec {
            arch: Arch::Conv,
            ..StackSpec::default()
        };
        let conv = LayerStack::new(&spec, (1, 6, 6), 3, &mut rng).unwrap();
        let lc = LayerStack::tie_to_conv(&conv);
        let (ims, labels) = batch(&mut rng, 5);
        let a = conv.forward_backward(&ims, &labels).unwrap();
        let b = lc.forward_backward(&ims, &labels).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads.head_w, b.grads.head_w);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in [Arch::Local, Arch::Conv] {
            let mut rng = RngStream::new(4);
            let spec = StackSpec {
                arch,
                channels: 3,
                ..StackSpec::default()
            };
            let mut s = LayerStack::new(&spec, (1, 6, 6), 3, &mut rng).unwrap();
            let (ims, labels) = batch(&mut rng, 3);
            let r = s.forward_backward(&ims, &labels).unwrap();
            let sizes: Vec<usize> = s.slots().iter().map(|x| x.len()).collect();
            for _ in 0..20 {
                let slot = rng.below(sizes.len());
                let j = rng.below(sizes[slot]);
                let w0 = s.slots()[slot][j];
                let eps = 1e-5 * w0.abs().max(1.0);
                s.slots_mut()[slot][j] = w0 + eps;
                let up = s.loss(&ims, &labels).unwrap();
                s.slots_mut()[slot][j] = w0 - eps;
                let down = s.loss(&ims, &labels).unwrap();
                s.slots_mut()[slot][j] = w0;
                let num = (up - down) / (2.0 * eps);
                let ana = r.grads.slots()[slot][j];
                assert!((num - ana).abs() <= 1e-5 * ana.abs().max(num.abs()).max(1e-3), "{arch} slot {slot}: {num} vs {ana}");
            }
        }
    }
}
