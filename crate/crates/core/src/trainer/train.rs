use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::sharing::{instant_share, layer_neg_log_snr, layer_sleep_run, SleepConfig};
use crate::topology::{make_partition, GridPartition, LocalLayer};

use super::data::{build_batch, Dataset, Splits};
use super::network::{Arch, Layer, LayerStack, StackSpec};
use super::optim::{Optimizer, OptimizerConfig};

/// How a sharing event equalizes locally connected kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum SharingMode {
    /// Set every kernel to its grid mean.
    Instant,
    /// Run the sleep dynamics on each layer.
    Dynamics(SleepConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stack: StackSpec,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share weights after every n-th batch.
    pub ws_every: Option<usize>,
    pub sharing: SharingMode,
    /// Translated copies of each image per batch; batch size stays fixed.
    pub reps: usize,
    /// Translation range used for augmentation.
    pub pad: usize,
    /// Epochs after which the learning rate is divided by 4.
    pub milestones: Vec<usize>,
    /// Also replace the optimizer moments of shared kernels by their grid
    /// means at instant sharing events.
    pub share_moments: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stack: StackSpec::default(),
            optimizer: OptimizerConfig::adamw(3e-2),
            batch_size: 32,
            epochs: 40,
            ws_every: None,
            sharing: SharingMode::Instant,
            reps: 1,
            pad: 2,
            milestones: vec![20, 30],
            share_moments: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.reps == 0 || !self.batch_size.is_multiple_of(self.reps) {
            return Err(Error::invalid(format!(
                "reps ({}) must divide the batch size ({})",
                self.reps, self.batch_size
            )));
        }
        if self.ws_every == Some(0) {
            return Err(Error::invalid("ws_every must be >= 1"));
        }
        if let SharingMode::Dynamics(cfg) = &self.sharing {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub accuracy: f64,
    pub loss: f64,
}

/// `-ln SNR` of one layer right before and after a sharing event.
#[derive(Clone, Debug, PartialEq)]
pub struct SharingEvent {
    pub event: usize,
    /// Global batch index (1-based) after which sharing ran.
    pub batch: usize,
    pub layer: usize,
    pub neg_log_snr_pre: f64,
    pub neg_log_snr_post: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub metrics: Vec<EpochMetrics>,
    pub events: Vec<SharingEvent>,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

impl TrainHistory {
    /// Pre-sharing `-ln SNR` per event for one layer.
    pub fn pre_sharing(&self, layer: usize) -> Vec<f64> {
        self.events.iter().filter(|e| e.layer == layer).map(|e| e.neg_log_snr_pre).collect()
    }
}

fn lr_scale(milestones: &[usize], epoch: usize) -> f64 {
    0.25f64.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
}

struct ShareContext<'a> {
    partitions: &'a [Option<GridPartition>],
    mode: &'a SharingMode,
    share_moments: bool,
    rng: RngStream,
}

fn share_layers(
    stack: &mut LayerStack,
    opt: &mut Optimizer,
    ctx: &ShareContext<'_>,
    event: usize,
    batch: usize,
    log: &mut Vec<SharingEvent>,
) -> Result<()> {
    for (l, (layer, part)) in stack.layers.iter_mut().zip(ctx.partitions).enumerate() {
        let (Layer::Local(lc), Some(part)) = (layer, part) else {
            continue;
        };
        let pre = layer_neg_log_snr(lc, part)?;
        match ctx.mode {
            SharingMode::Instant => {
                *lc = instant_share(lc, part)?;
                if ctx.share_moments {
                    // Slots start with the layers, in order.
                    for buf in opt.state_mut(l) {
                        let tmp = LocalLayer {
                            shape: lc.shape,
                            weights: std::mem::take(buf),
                        };
                        *buf = instant_share(&tmp, part)?.weights;
                    }
                }
            }
            SharingMode::Dynamics(cfg) => {
                layer_sleep_run(lc, part, cfg, &ctx.rng.substream(((event as u64) << 8) | l as u64))?;
            }
        }
        let post = layer_neg_log_snr(lc, part)?;
        log.push(SharingEvent {
            event,
            batch,
            layer: l,
            neg_log_snr_pre: pre,
            neg_log_snr_post: post,
        });
    }
    Ok(())
}

/// Trains `stack` on `splits.train`, evaluating on validation every epoch
/// and on test at the end.
///
/// One epoch shows every training image once, `batch_size / reps` distinct
/// images per batch, so `reps` copies cost `reps` times the compute.
/// Distinct images are consumed from a reshuffled stream.
pub fn train(stack: &mut LayerStack, splits: &Splits, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let data: &Dataset = &splits.train;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let root = RngStream::new(cfg.seed);
    let mut order_rng = root.substream(10);
    let mut aug_rng = root.substream(11);

    let partitions: Vec<Option<GridPartition>> = stack
        .layers
        .iter()
        .map(|l| match l {
            Layer::Local(lc) => make_partition(lc.shape.kernel, lc.shape.height, lc.shape.width).map(Some),
            Layer::Conv(_) => Ok(None),
        })
        .collect::<Result<_>>()?;

    let ctx = ShareContext {
        partitions: &partitions,
        mode: &cfg.sharing,
        share_moments: cfg.share_moments,
        rng: root.substream(12),
    };
    let sizes: Vec<usize> = stack.slots().iter().map(|s| s.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &sizes)?;
    let distinct = cfg.batch_size / cfg.reps;
    let batches_per_epoch = data.len().div_ceil(distinct);

    let mut stream: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = TrainHistory {
        metrics: Vec::new(),
        events: Vec::new(),
        test_accuracy: f64::NAN,
        test_loss: f64::NAN,
    };
    let mut global_batch = 0;
    let mut event = 0;

    for epoch in 0..cfg.epochs {
        let scale = lr_scale(&cfg.milestones, epoch);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..batches_per_epoch {
            if cursor + distinct > stream.len() {
                let mut fresh: Vec<usize> = (0..data.len()).collect();
                order_rng.shuffle(&mut fresh);
                stream.drain(..cursor);
                stream.extend(fresh);
                cursor = 0;
            }
            let batch = build_batch(data, &stream[cursor..], cfg.batch_size, cfg.reps, cfg.pad, &mut aug_rng)?;
            cursor += distinct;

            let res = stack.forward_backward(&batch.images, &batch.labels).map_err(|e| match e {
                Error::Divergence { max_abs, .. } => Error::Divergence {
                    context: format!("epoch {epoch}, batch {global_batch}"),
                    max_abs,
                },
                other => other,
            })?;
            loss_sum += res.loss * batch.images.len() as f64;
            hits += res.correct;
            seen += batch.images.len();
            {
                let grads = res.grads.slots();
                let mut params = stack.slots_mut();
                opt.step(&mut params, &grads, scale)?;
            }
            global_batch += 1;

            if let Some(n) = cfg.ws_every {
                if global_batch % n == 0 && cfg.stack.arch == Arch::Local {
                    share_layers(stack, &mut opt, &ctx, event, global_batch, &mut history.events)?;
                    event += 1;
                }
            }
        }
        history.metrics.push(EpochMetrics {
            epoch,
            split: "train",
            accuracy: hits as f64 / seen as f64,
            loss: loss_sum / seen as f64,
        });
        let (vl, va) = stack.evaluate(&splits.val.images, &splits.val.labels)?;
        history.metrics.push(EpochMetrics {
            epoch,
            split: "val",
            accuracy: va,
            loss: vl,
        });
    }
    let (tl, ta) = stack.evaluate(&splits.test.images, &splits.test.labels)?;
    history.metrics.push(EpochMetrics {
        epoch: cfg.epochs.saturating_sub(1),
        split: "test",
        accuracy: ta,
        loss: tl,
    });
    history.test_accuracy = ta;
    history.test_loss = tl;
    Ok(history)
}

/// Builds a fresh stack from `cfg.seed` and trains it.
pub fn train_seeded(splits: &Splits, cfg: &TrainConfig) -> Result<(LayerStack, TrainHistory)> {
    let shape = splits
        .train
        .image_shape()
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let mut init_rng = RngStream::new(cfg.seed).substream(1);
    let mut stack = LayerStack::new(&cfg.stack, shape, splits.train.classes, &mut init_rng)?;
    let history = train(&mut stack, splits, cfg)?;
    Ok((stack, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::CONVERGED_SENTINEL;
    use crate::trainer::data::{translated_shapes, ShapesConfig};

    fn small_splits() -> Splits {
        let d = translated_shapes(
            &ShapesConfig {
                count: 160,
                size: 8,
                classes: 4,
                noise: 0.2,
            },
            &mut RngStream::new(1),
        )
        .unwrap();
        d.split(40, 40, &mut RngStream::new(2)).unwrap()
    }

    fn quick(arch: Arch) -> TrainConfig {
        TrainConfig {
            stack: StackSpec {
                arch,
                channels: 4,
                ..StackSpec::default()
            },
            batch_size: 16,
            epochs: 2,
            milestones: vec![1],
            ..TrainConfig::default()
        }
    }

    fn fresh(cfg: &TrainConfig, splits: &Splits) -> LayerStack {
        let shape = splits.train.image_shape().unwrap();
        LayerStack::new(&cfg.stack, shape, splits.train.classes, &mut RngStream::new(cfg.seed).substream(1)).unwrap()
    }

    #[test]
    fn seeded_runs_repeat() {
        let s = small_splits();
        let cfg = quick(Arch::Local);
        let a = train(&mut fresh(&cfg, &s), &s, &cfg).unwrap();
        let (_, b) = train_seeded(&s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), 2 * 2 + 1);
    }

    #[test]
    fn conv_ignores_sharing_flags() {
        let s = small_splits();
        let cfg = quick(Arch::Conv);
        let with = TrainConfig {
            ws_every: Some(1),
            ..cfg.clone()
        };
        let a = train(&mut fresh(&cfg, &s), &s, &cfg).unwrap();
        let b = train(&mut fresh(&with, &s), &s, &with).unwrap();
        assert_eq!(a, b);
        assert!(b.events.is_empty());
    }

    #[test]
    fn every_batch_sharing_converges_exactly() {
        let s = small_splits();
        let cfg = TrainConfig {
            ws_every: Some(1),
            ..quick(Arch::Local)
        };
        let h = train(&mut fresh(&cfg, &s), &s, &cfg).unwrap();
        // 80 train images, batch 16: 5 batches per epoch, 2 layers each
        assert_eq!(h.events.len(), 2 * 5 * 2);
        assert!(h.events.iter().all(|e| e.neg_log_snr_post == CONVERGED_SENTINEL));
        assert!(h.events.iter().skip(2).all(|e| e.neg_log_snr_pre > CONVERGED_SENTINEL));
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_scale(&[2, 4], 0), 1.0);
        assert_eq!(lr_scale(&[2, 4], 2), 0.25);
        assert_eq!(lr_scale(&[2, 4], 5), 0.0625);
    }

    #[test]
    fn invalid_reps() {
        let s = small_splits();
        let cfg = TrainConfig {
            reps: 3,
            ..quick(Arch::Local)
        };
        assert!(train(&mut fresh(&cfg, &s), &s, &cfg).is_err());
    }
}
