//! The training loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::data::{augment, collate, Batch, Dataset};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::head::{Detector, DOWNSAMPLE};
use crate::losses::{dice_loss, focal_heatmap_loss, masked_l1_loss, total_loss, LossParts, LossWeights};
use crate::numerics::{seeded, stream, Bound, Graph, Tensor, Var};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::pipeline::optim::Adam;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.ndjson";

const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_474d;

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub heatmap: f64,
    pub reconstruction: f64,
    pub size: f64,
    pub offset: f64,
    pub total: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub lambda_r: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricRecord>,
}

/// Builds the four loss terms and their weighted total on `g`.
pub fn forward_losses(
    det: &Detector,
    g: &mut Graph,
    bound: &Bound,
    batch: &Batch,
    weights: &LossWeights,
    progress: f64,
) -> Result<(Var, LossParts)> {
    let images = g.constant(batch.images.clone());
    let out = det.forward(g, bound, images)?;
    let heatmap = focal_heatmap_loss(g, out.heatmap, &batch.heatmaps, weights.alpha, weights.beta, batch.centers)?;
    let reconstruction = match &batch.object_masks {
        Some(target) => {
            let pred = det.reconstruct_at(g, bound, out.v_obj, &batch.object_cells)?;
            dice_loss(g, pred, target)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let size = masked_l1_loss(g, out.sizes, &batch.sizes, &batch.regression_mask)?;
    let offset = masked_l1_loss(g, out.offsets, &batch.offsets, &batch.regression_mask)?;
    let parts = LossParts {
        heatmap,
        reconstruction,
        size,
        offset,
    };
    Ok((total_loss(g, &parts, weights, progress)?, parts))
}

/// Loss values without a parameter update.
pub fn evaluate_losses(det: &Detector, batch: &Batch, weights: &LossWeights, progress: f64) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bound = det.params().bind_frozen(&mut g);
    let (total, parts) = forward_losses(det, &mut g, &bound, batch, weights, progress)?;
    Ok(read_losses(&g, total, &parts))
}

fn read_losses(g: &Graph, total: Var, parts: &LossParts) -> StepLosses {
    let v = |x: Var| g.value(x).data()[0];
    StepLosses {
        heatmap: v(parts.heatmap),
        reconstruction: v(parts.reconstruction),
        size: v(parts.size),
        offset: v(parts.offset),
        total: v(total),
    }
}

/// Forward, backward and one Adam update. A non-finite total loss leaves
/// the parameters untouched and returns `NonFinite`.
pub fn train_step(
    det: &mut Detector,
    adam: &mut Adam,
    batch: &Batch,
    weights: &LossWeights,
    progress: f64,
    lr: f64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bound = det.params().bind(&mut g);
    let (total, parts) = forward_losses(det, &mut g, &bound, batch, weights, progress)?;
    let losses = read_losses(&g, total, &parts);
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let grads = g.backward(total);
    det.params_mut().zero_grad();
    det.params_mut().accumulate(&bound, &grads);
    adam.update(det.params_mut(), lr)?;
    Ok(losses)
}

pub fn grid_for(cfg: &RunConfig) -> GridSpec {
    GridSpec {
        classes: cfg.dataset.classes,
        height: cfg.dataset.height,
        width: cfg.dataset.width,
        downsample: DOWNSAMPLE,
    }
}

/// Sample indices of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed ^ SHUFFLE_SALT, epoch as u64));
    order
}

/// The augmented, collated batch of `indices` in `epoch`.
pub fn make_batch(cfg: &RunConfig, dataset: &Dataset, epoch: usize, indices: &[usize]) -> Result<Batch> {
    let aug = &cfg.dataset.augmentation;
    let epoch_seed: u64 = stream(cfg.seed ^ AUGMENT_SALT, epoch as u64).gen();
    let samples = indices
        .iter()
        .map(|&i| {
            let s = dataset.sample(i)?;
            Ok(augment(&s, aug, &mut stream(epoch_seed, i as u64)))
        })
        .collect::<Result<Vec<_>>>()?;
    collate(&samples, &grid_for(cfg), cfg.head.recon_side)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dataset = Dataset::open(&cfg.dataset)?;
    train_on(cfg, &dataset)
}

/// Trains on `dataset` with the schedule in `cfg`. With an output
/// directory, the metric log is written as it goes and a checkpoint is
/// saved at every epoch end.
pub fn train_on(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_observed(cfg, dataset, &mut |_, _| Ok(()))
}

/// As [`train_on`], calling `observer(completed_epochs, detector)` after
/// every epoch.
pub fn train_observed(
    cfg: &RunConfig,
    dataset: &Dataset,
    observer: &mut dyn FnMut(usize, &Detector) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut det = Detector::new(cfg.effective_head(), &mut seeded(cfg.seed))?;
    let mut adam = Adam::new(&cfg.optimizer, det.params());

    let (ckpt_path, mut log): (Option<PathBuf>, Option<BufWriter<fs::File>>) = match &cfg.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log_path = dir.join(METRICS_FILE);
            let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            (Some(dir.join(CHECKPOINT_FILE)), Some(BufWriter::new(f)))
        }
        None => (None, None),
    };

    let n = dataset.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * per_epoch) as f64;
    let mut step = 0u64;
    let mut records = Vec::new();
    let mut checkpoint = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(cfg.seed, epoch, n);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(cfg, dataset, epoch, chunk)?;
            let progress = step as f64 / total_steps;
            let losses = train_step(&mut det, &mut adam, &batch, &cfg.loss, progress, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step: step as usize,
                    batch: bi,
                },
                other => other,
            })?;
            step += 1;
            if step % cfg.log_interval as u64 == 0 || bi + 1 == per_epoch {
                let rec = MetricRecord {
                    step,
                    epoch,
                    lr,
                    lambda_r: cfg.loss.lambda_r(progress),
                    losses,
                };
                if let Some(w) = log.as_mut() {
                    let line = serde_json::to_string(&rec).expect("metric records serialize");
                    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(METRICS_FILE, e))?;
                }
                records.push(rec);
            }
        }
        let ckpt = Checkpoint {
            config: cfg.clone(),
            step,
            epoch: epoch as u64 + 1,
            params: det.params().clone(),
            optimizer: Some(adam.clone()),
        };
        if let Some(path) = &ckpt_path {
            ckpt.save(path)?;
        }
        if let Some(last) = records.last() {
            info!(
                "epoch {} done: step {} total {:.4} (heatmap {:.4}, recon {:.4}, size {:.4}, offset {:.4})",
                epoch + 1,
                step,
                last.losses.total,
                last.losses.heatmap,
                last.losses.reconstruction,
                last.losses.size,
                last.losses.offset
            );
        }
        checkpoint = Some(ckpt);
        observer(epoch + 1, &det)?;
    }
    Ok(TrainOutcome {
        detector: det,
        checkpoint: checkpoint.expect("at least one epoch"),
        records,
    })
}
