//! Image datasets: a synthetic translated-shapes generator, IDX files,
//! translation augmentation and batch assembly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::topology::Tensor3;

/// Labelled single- or multi-channel images of one common shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Per-channel `(mean, std)` used to normalize every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Vec<Tensor3>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::mismatch("Dataset::new", images.len(), labels.len()));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
                return Err(Error::mismatch("Dataset::new", format!("{shape:?}"), format!("{:?}", bad.shape())));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(channels, height, width)` of every image.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Tensor3::shape)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Per-channel mean and std. Without `center` the mean is reported as
    /// zero and the scale is the RMS, so zero pixels stay zero.
    pub fn normalization_with(&self, center: bool) -> Result<Normalization> {
        let mut n = self.normalization()?;
        if !center {
            for (m, s) in n.mean.iter_mut().zip(n.std.iter_mut()) {
                let rms = (*s * *s + *m * *m).sqrt();
                *s = if rms > 0.0 { rms } else { 1.0 };
                *m = 0.0;
            }
        }
        Ok(n)
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let (c, h, w) = self.image_shape().ok_or_else(|| Error::invalid("cannot normalize an empty dataset"))?;
        let count = (self.len() * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for im in &self.images {
            for ch in 0..c {
                for v in &im.data[ch * h * w..(ch + 1) * h * w] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        for im in &mut self.images {
            let (c, h, w) = im.shape();
            for ch in 0..c {
                for v in &mut im.data[ch * h * w..(ch + 1) * h * w] {
                    *v = (*v - norm.mean[ch]) / norm.std[ch];
                }
            }
        }
    }

    /// Shuffles once and splits into disjoint train/val/test parts, then
    /// normalizes all three with training-set statistics.
    pub fn split(&self, val: usize, test: usize, rng: &mut RngStream) -> Result<Splits> {
        self.split_with(val, test, true, rng)
    }

    /// [`Dataset::split`] with scale-only normalization when `center` is
    /// false. Sparse images (zero background) should not be centered: a
    /// shifted background feeds every locally connected position a constant
    /// input, and the resulting tiny gradients become full-size noisy steps
    /// under Adam.
    pub fn split_with(&self, val: usize, test: usize, center: bool, rng: &mut RngStream) -> Result<Splits> {
        if val + test >= self.len() {
            return Err(Error::invalid(format!(
                "cannot take {val} validation and {test} test images from {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let (test_idx, rest) = idx.split_at(test);
        let (val_idx, train_idx) = rest.split_at(val);
        let mut train = self.subset(train_idx);
        let mut valset = self.subset(val_idx);
        let mut testset = self.subset(test_idx);
        let normalization = train.normalization_with(center)?;
        train.normalize(&normalization);
        valset.normalize(&normalization);
        testset.normalize(&normalization);
        Ok(Splits {
            train,
            val: valset,
            test: testset,
            normalization,
        })
    }
}

const GLYPHS: [[&str; 5]; 10] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    ["#####", "....#", "...#.", "..#..", ".#..."],
    ["#...#", "#...#", "#####", "#...#", "#...#"],
    ["..#..", ".###.", "#####", ".....", "....."],
    ["#.#.#", ".....", "#.#.#", ".....", "#.#.#"],
];

pub const MAX_SHAPE_CLASSES: usize = GLYPHS.len();

/// Options for [`translated_shapes`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapesConfig {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    /// Std of additive pixel noise.
    pub noise: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            count: 800,
            size: 16,
            classes: 8,
            noise: 0.0,
        }
    }
}

/// One 5×5 glyph per class placed at a uniformly random position on a
/// blank `size × size` canvas, plus Gaussian pixel noise. Labels cycle
/// through the classes so every class is equally frequent.
pub fn translated_shapes(cfg: &ShapesConfig, rng: &mut RngStream) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.classes > MAX_SHAPE_CLASSES {
        return Err(Error::invalid(format!("shape classes must be in 1..={MAX_SHAPE_CLASSES}")));
    }
    if cfg.size < 5 {
        return Err(Error::invalid("images must be at least 5x5"));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::invalid("noise must be >= 0"));
    }
    let places = cfg.size - 5 + 1;
    let mut images = Vec::with_capacity(cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    for n in 0..cfg.count {
        let label = n % cfg.classes;
        let (oy, ox) = (rng.below(places), rng.below(places));
        let mut im = Tensor3::zeros(1, cfg.size, cfg.size);
        for (gy, row) in GLYPHS[label].iter().enumerate() {
            for (gx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    im.set(0, oy + gy, ox + gx, 1.0);
                }
            }
        }
        if cfg.noise > 0.0 {
            for v in &mut im.data {
                *v += cfg.noise * rng.standard_normal();
            }
        }
        images.push(im);
        labels.push(label);
    }
    Dataset::new(images, labels, cfg.classes)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Reads an unsigned-byte IDX image file (magic `0x00000803`).
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor3>> {
    let bytes = fs::read(path)?;
    if be_u32(&bytes, 0)? != 0x0803 {
        return Err(Error::Format(format!("{}: not an IDX3 ubyte file", path.display())));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let h = be_u32(&bytes, 8)? as usize;
    let w = be_u32(&bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * h * w,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(h * w)
        .map(|px| Tensor3 {
            channels: 1,
            height: h,
            width: w,
            data: px.iter().map(|&b| b as f64 / 255.0).collect(),
        })
        .collect())
}

/// Reads an unsigned-byte IDX label file (magic `0x00000801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if be_u32(&bytes, 0)? != 0x0801 {
        return Err(Error::Format(format!("{}: not an IDX1 ubyte file", path.display())));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("{}: expected {n} labels, found {}", path.display(), body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Writes single-channel images with pixels clamped to `[0, 1]`.
pub fn write_idx_images(path: &Path, images: &[Tensor3]) -> Result<()> {
    let (h, w) = images.first().map(|im| (im.height, im.width)).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    for v in [0x0803u32, images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if im.channels != 1 || im.height != h || im.width != w {
            return Err(Error::invalid("IDX images must be single-channel and equally sized"));
        }
        out.extend(im.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads an IDX image/label pair as a dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ims = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    let classes = labs.iter().max().map_or(0, |m| m + 1);
    Dataset::new(ims, labs, classes)
}

/// Zero-pads by `pad` on every side and crops back at a uniformly random
/// offset. Zero is the mean value once the data are normalized.
pub fn augment_translate(image: &Tensor3, pad: usize, rng: &mut RngStream) -> Tensor3 {
    if pad == 0 {
        return image.clone();
    }
    let dy = rng.below(2 * pad + 1) as isize - pad as isize;
    let dx = rng.below(2 * pad + 1) as isize - pad as isize;
    translate(image, dy, dx)
}

/// Output `(y, x)` reads input `(y + dy, x + dx)`, zero outside.
pub fn translate(image: &Tensor3, dy: isize, dx: isize) -> Tensor3 {
    let (c, h, w) = image.shape();
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out.set(ch, y, x, image.get(ch, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// A training batch together with the dataset indices it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

/// `batch_size / reps` dataset images, each repeated `reps` times with
/// independent translations. `order` supplies the distinct images.
pub fn build_batch(
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    reps: usize,
    pad: usize,
    rng: &mut RngStream,
) -> Result<Batch> {
    if reps == 0 || batch_size == 0 || !batch_size.is_multiple_of(reps) {
        return Err(Error::invalid(format!("reps ({reps}) must divide the batch size ({batch_size})")));
    }
    let distinct = batch_size / reps;
    if order.len() < distinct {
        return Err(Error::invalid(format!(
            "batch needs {distinct} distinct images, only {} available",
            order.len()
        )));
    }
    let mut batch = Batch {
        images: Vec::with_capacity(batch_size),
        labels: Vec::with_capacity(batch_size),
        sources: Vec::with_capacity(batch_size),
    };
    for &i in &order[..distinct] {
        if i >= data.len() {
            return Err(Error::invalid(format!("image index {i} out of range")));
        }
        for _ in 0..reps {
            batch.images.push(augment_translate(&data.images[i], pad, rng));
            batch.labels.push(data.labels[i]);
            batch.sources.push(i);
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn tiny() -> Dataset {
        translated_shapes(
            &ShapesConfig {
                count: 40,
                size: 8,
                classes: 4,
                noise: 0.0,
            },
            &mut RngStream::new(1),
        )
        .unwrap()
    }

    #[test]
    fn shapes_are_balanced_and_binary() {
        let d = tiny();
        assert_eq!(d.len(), 40);
        for c in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(d.images.iter().all(|im| im.data.iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn translate_identity_and_constants() {
        let d = tiny();
        let mut rng = RngStream::new(2);
        assert_eq!(augment_translate(&d.images[0], 0, &mut rng), d.images[0]);
        let mut flat = Tensor3::zeros(1, 6, 6);
        flat.data.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..10 {
            assert_eq!(augment_translate(&flat, 3, &mut rng), flat);
        }
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // a single lit pixel in the centre reveals the offset
        let mut im = Tensor3::zeros(1, 9, 9);
        im.set(0, 4, 4, 1.0);
        let mut rng = RngStream::new(3);
        let mut hist: HashMap<(usize, usize), usize> = HashMap::new();
        let draws = 81 * 400;
        for _ in 0..draws {
            let out = augment_translate(&im, 4, &mut rng);
            let at = out.data.iter().position(|&v| v == 1.0).unwrap();
            *hist.entry((at / 9, at % 9)).or_default() += 1;
        }
        assert_eq!(hist.len(), 81);
        for &c in hist.values() {
            assert!((c as f64 - 400.0).abs() < 100.0, "{c}");
        }
    }

    #[test]
    fn batch_repetitions() {
        let d = tiny();
        let order: Vec<usize> = (0..40).collect();
        let mut rng = RngStream::new(4);
        let b = build_batch(&d, &order, 16, 4, 1, &mut rng).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &s in &b.sources {
            *counts.entry(s).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
        let mut labels = b.labels.clone();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 4);

        let b = build_batch(&d, &order, 8, 1, 0, &mut rng).unwrap();
        assert_eq!(b.sources, (0..8).collect::<Vec<_>>());
        let b = build_batch(&d, &order, 8, 8, 2, &mut rng).unwrap();
        assert!(b.sources.iter().all(|&s| s == 0));
        assert!(build_batch(&d, &order, 10, 4, 0, &mut rng).is_err());
        assert!(build_batch(&d, &order[..2], 12, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_normalized() {
        let d = translated_shapes(&ShapesConfig::default(), &mut RngStream::new(5)).unwrap();
        let s = d.split(100, 200, &mut RngStream::new(6)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 100, 200));
        let n = s.train.normalization().unwrap();
        assert!(n.mean[0].abs() < 1e-12 && (n.std[0] - 1.0).abs() < 1e-12);
        assert!(d.split(500, 300, &mut RngStream::new(6)).is_err());
    }

    #[test]
    fn scale_only_keeps_background_zero() {
        let d = translated_shapes(&ShapesConfig::default(), &mut RngStream::new(5)).unwrap();
        let s = d.split_with(100, 200, false, &mut RngStream::new(6)).unwrap();
        assert_eq!(s.normalization.mean, vec![0.0]);
        let zeros = |ds: &Dataset| ds.images.iter().flat_map(|im| &im.data).filter(|v| **v == 0.0).count();
        let second: f64 = s.train.images.iter().flat_map(|im| &im.data).map(|v| v * v).sum::<f64>()
            / (s.train.len() * 256) as f64;
        assert!((second - 1.0).abs() < 1e-9, "{second}");
        // Most of each canvas is background.
        assert!(zeros(&s.train) > s.train.len() * 200);
    }

    #[test]
    fn idx_round_trip() {
        let d = tiny();
        let dir = std::env::temp_dir().join(format!("dynshare-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = (dir.join("im.idx3"), dir.join("lab.idx1"));
        write_idx_images(&ip, &d.images).unwrap();
        write_idx_labels(&lp, &d.labels).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back, d);
        fs::write(&lp, [0u8, 0, 8, 3]).unwrap();
        assert!(read_idx_labels(&lp).is_err());
        fs::remove_dir_all(dir).unwrap();
    }
}
