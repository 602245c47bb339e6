//! Inference, COCO-style average precision and single-image detection.

use std::path::Path;

use serde::Serialize;

use crate::data::{load_coco_annotations, load_image, Dataset, DatasetKind, SHAPE_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{decode_detections, iou, BBox, Detection};
use crate::head::{Detector, DOWNSAMPLE};
use crate::numerics::{Graph, Tensor};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

const RECALL_POINTS: usize = 101;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over classes with ground truth and over the ten IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP averaged over thresholds; `None` for classes without
    /// ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    /// Counts at IoU 0.5.
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub images: usize,
}

/// Outcome of matching one class at one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    /// Whether each detection, in score order, is a true positive.
    pub hits: Vec<bool>,
    pub ground_truths: usize,
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `threshold`. Score ties are broken by box coordinates so the
/// result does not depend on image order.
pub fn match_class(detections: &[Vec<Detection>], truths: &[Vec<BBox>], class_id: usize, threshold: f64) -> ClassMatch {
    let mut cand: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    cand.sort_by(|(_, a), (_, b)| {
        b.score
            .total_cmp(&a.score)
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
            .then(a.x2.total_cmp(&b.x2))
            .then(a.y2.total_cmp(&b.y2))
    });
    let gts: Vec<Vec<&BBox>> = truths
        .iter()
        .map(|t| t.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(cand.len());
    for (img, det) in cand {
        let db = det.bbox();
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[img].iter().enumerate() {
            if taken[img][j] {
                continue;
            }
            let v = iou(&db, gt);
            if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[img][j] = true;
        }
        hits.push(best.is_some());
    }
    ClassMatch {
        hits,
        ground_truths: gts.iter().map(Vec::len).sum(),
    }
}

/// 101-point interpolated average precision. `None` without ground truth.
pub fn interpolated_ap(m: &ClassMatch) -> Option<f64> {
    if m.ground_truths == 0 {
        return None;
    }
    let n = m.ground_truths as f64;
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(m.hits.len());
    let mut precision = Vec::with_capacity(m.hits.len());
    for (i, &hit) in m.hits.iter().enumerate() {
        tp += hit as u8 as f64;
        recall.push(tp / n);
        precision.push(tp / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Scores per-image detections against per-image ground truth.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    truths: &[Vec<BBox>],
    class_names: &[String],
) -> Result<EvalReport> {
    if detections.len() != truths.len() {
        return Err(Error::config(format!(
            "{} detection lists for {} images",
            detections.len(),
            truths.len()
        )));
    }
    let classes = class_names.len();
    let thresholds = iou_thresholds();
    // ap[c][t]
    let mut ap = vec![[None; 10]; classes];
    let (mut tp, mut fp, mut gt_total) = (0, 0, 0);
    for (c, row) in ap.iter_mut().enumerate() {
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_class(detections, truths, c, thr);
            if t == 0 {
                let hits = m.hits.iter().filter(|&&h| h).count();
                tp += hits;
                fp += m.hits.len() - hits;
                gt_total += m.ground_truths;
            }
            row[t] = interpolated_ap(&m);
        }
    }
    let at = |t: usize| mean_defined(ap.iter().map(|row| row[t])).unwrap_or(0.0);
    let per_class_ap: Vec<Option<f64>> = ap.iter().map(|row| mean_defined(row.iter().copied())).collect();
    Ok(EvalReport {
        ap: (0..thresholds.len()).map(at).sum::<f64>() / thresholds.len() as f64,
        ap50: at(0),
        ap75: at(5),
        per_class_ap,
        class_names: class_names.to_vec(),
        true_positives: tp,
        false_positives: fp,
        false_negatives: gt_total - tp,
        images: truths.len(),
    })
}

/// Decoded detections for each image of `[B, 3, H, W]`, optionally with
/// reconstructed masks.
pub fn predict(det: &Detector, images: &Tensor, threshold: f64, top_n: usize, masks: bool) -> Result<Vec<Vec<Detection>>> {
    let mut g = Graph::new();
    let bound = det.params().bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let out = det.forward(&mut g, &bound, x)?;
    let (heat, offsets, sizes) = (g.value(out.heatmap), g.value(out.offsets), g.value(out.sizes));
    let hs = heat.shape().to_vec();
    let (k, rows, cols) = (hs[1], hs[2], hs[3]);
    let slice = |t: &Tensor, b: usize, ch: usize| {
        let n = ch * rows * cols;
        Tensor::new(&[ch, rows, cols], t.data()[b * n..(b + 1) * n].to_vec())
    };
    let mut all = Vec::with_capacity(hs[0]);
    for b in 0..hs[0] {
        let dets = decode_detections(
            &slice(heat, b, k)?,
            &slice(offsets, b, 2)?,
            &slice(sizes, b, 2)?,
            DOWNSAMPLE,
            threshold,
            top_n,
        )?;
        all.push(dets);
    }
    if masks {
        let cells: Vec<(usize, usize, usize)> = all
            .iter()
            .enumerate()
            .flat_map(|(b, d)| d.iter().map(move |d| (b, d.cell.0, d.cell.1)))
            .collect();
        if !cells.is_empty() {
            let m = det.reconstruct_at(&mut g, &bound, out.v_obj, &cells)?;
            let side = g.shape(m)[1];
            let mut rows_iter = g.value(m).data().chunks(side);
            for d in all.iter_mut().flatten() {
                d.mask = rows_iter.next().map(<[f64]>::to_vec);
            }
        }
    }
    Ok(all)
}

/// AP of `det` over every image of `dataset` (un-augmented).
pub fn evaluate(det: &Detector, dataset: &Dataset, threshold: f64, top_n: usize) -> Result<EvalReport> {
    let cfg = det.config();
    let spec = dataset.spec();
    if spec.height != cfg.image_height || spec.width != cfg.image_width || spec.classes != cfg.classes {
        return Err(Error::config(format!(
            "model expects {}x{} images with {} classes, dataset has {}x{} with {}",
            cfg.image_height, cfg.image_width, cfg.classes, spec.height, spec.width, spec.classes
        )));
    }
    let mut detections = Vec::with_capacity(dataset.len());
    let mut truths = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|&i| dataset.sample(i)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(samples.len() * 3 * spec.height * spec.width);
        for s in &samples {
            data.extend_from_slice(s.image.data());
        }
        let images = Tensor::new(&[samples.len(), 3, spec.height, spec.width], data)?;
        detections.extend(predict(det, &images, threshold, top_n, false)?);
        truths.extend(samples.into_iter().map(|s| s.boxes));
    }
    evaluate_detections(&detections, &truths, &dataset.class_names())
}

/// Class names for a run: shape names for synthetic data, category names
/// from the annotation file otherwise (numbered if it cannot be read).
pub fn class_names(cfg: &RunConfig) -> Vec<String> {
    let k = cfg.dataset.classes;
    match &cfg.dataset.kind {
        DatasetKind::Synthetic => SHAPE_NAMES[..k.min(SHAPE_NAMES.len())]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        DatasetKind::CocoJson(path) => match load_coco_annotations(path) {
            Ok(idx) if idx.class_names.len() == k => idx.class_names,
            _ => (0..k).map(|i| format!("class_{i}")).collect(),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub class: String,
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Row-major reconstructed mask in (0, 1), when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<f64>>,
}

/// Runs a checkpoint on one image file. Records are sorted by score.
pub fn detect(ckpt: &Checkpoint, image: &Path, threshold: f64, masks: bool) -> Result<Vec<DetectionRecord>> {
    let det = ckpt.detector()?;
    let cfg = det.config();
    let img = load_image(image, cfg.image_width, cfg.image_height)?;
    let batch = img.reshape(&[1, 3, cfg.image_height, cfg.image_width])?;
    let names = class_names(&ckpt.config);
    let dets = predict(&det, &batch, threshold, ckpt.config.eval_top_n, masks)?;
    Ok(dets
        .into_iter()
        .flatten()
        .map(|d| DetectionRecord {
            class: names.get(d.class_id).cloned().unwrap_or_else(|| format!("class_{}", d.class_id)),
            class_id: d.class_id,
            score: d.score,
            x1: d.x1,
            y1: d.y1,
            x2: d.x2,
            y2: d.y2,
            mask: d.mask,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id,
            score,
            center: ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0),
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
            cell: (0, 0),
            mask: None,
        }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| i.to_string()).collect()
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = vec![
            vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap()],
            vec![BBox::new(5.0, 5.0, 20.0, 30.0, 1).unwrap()],
        ];
        let dets: Vec<Vec<Detection>> = gt
            .iter()
            .map(|g| g.iter().map(|b| det(b.class_id, 1.0, [b.x1, b.y1, b.x2, b.y2])).collect())
            .collect();
        let r = evaluate_detections(&dets, &gt, &names(2)).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (2, 0, 0));
    }

    #[test]
    fn no_detections() {
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap(), BBox::new(20.0, 0.0, 30.0, 10.0, 0).unwrap()]];
        let r = evaluate_detections(&[vec![]], &gt, &names(1)).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.false_negatives, 2);
    }

    #[test]
    fn half_recall() {
        // One of two objects found with a single perfect detection: precision
        // 1 up to recall 0.5, so 51 of 101 recall points.
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap(), BBox::new(20.0, 0.0, 30.0, 10.0, 0).unwrap()]];
        let r = evaluate_detections(&[vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0])]], &gt, &names(1)).unwrap();
        assert!((r.ap50 - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn order_independent() {
        let gt = vec![
            vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap()],
            vec![BBox::new(0.0, 0.0, 12.0, 12.0, 0).unwrap()],
        ];
        let dets = vec![
            vec![det(0, 0.7, [1.0, 1.0, 10.0, 10.0]), det(0, 0.8, [30.0, 30.0, 40.0, 40.0])],
            vec![det(0, 0.75, [0.0, 0.0, 11.0, 12.0])],
        ];
        let a = evaluate_detections(&dets, &gt, &names(1)).unwrap();
        let rev_dets: Vec<_> = dets.iter().rev().cloned().collect();
        let rev_gt: Vec<_> = gt.iter().rev().cloned().collect();
        let b = evaluate_detections(&rev_dets, &rev_gt, &names(1)).unwrap();
        assert_eq!(a, b);
    }
}
