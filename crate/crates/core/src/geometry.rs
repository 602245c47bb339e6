//! Center-point targets and peak decoding.
//!
//! Each object is represented by the grid cell `floor(center / d)` on a
//! `[K, H/d, W/d]` heatmap, a fractional offset inside that cell and its
//! width/height in pixels.

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2, class_id };
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox {
                index: 0,
                reason: format!("degenerate box {b:?}"),
            });
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Grid layout of the detection maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub downsample: usize,
}

impl GridSpec {
    pub fn rows(&self) -> usize {
        self.height / self.downsample
    }

    pub fn cols(&self) -> usize {
        self.width / self.downsample
    }

    fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.height % self.downsample != 0 || self.width % self.downsample != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by downsample {}",
                self.height, self.width, self.downsample
            )));
        }
        if self.classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        Ok(())
    }

    /// Center cell of a box, or an error naming the box.
    pub fn cell_of(&self, index: usize, b: &BBox) -> Result<(usize, usize)> {
        if b.class_id >= self.classes {
            return Err(Error::InvalidBox {
                index,
                reason: format!("class {} >= {}", b.class_id, self.classes),
            });
        }
        let (cx, cy) = b.center();
        let d = self.downsample as f64;
        let (col, row) = ((cx / d).floor(), (cy / d).floor());
        if col < 0.0 || row < 0.0 || col >= self.cols() as f64 || row >= self.rows() as f64 {
            return Err(Error::InvalidBox {
                index,
                reason: format!("center ({cx}, {cy}) maps outside the {}x{} grid", self.rows(), self.cols()),
            });
        }
        Ok((row as usize, col as usize))
    }
}

/// Radius (same unit as the inputs) within which both corners of a box may
/// move while keeping IoU with the original at least `min_iou`: the smallest
/// root among the three corner-displacement cases.
pub fn gaussian_radius(width: f64, height: f64, min_iou: f64) -> f64 {
    let (w, h, o) = (width, height, min_iou);
    let smaller_root = |a: f64, b: f64, c: f64| {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        (-b - disc) / (2.0 * a)
    };
    let larger_root = |a: f64, b: f64, c: f64| {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        (-b + disc) / (2.0 * a)
    };
    // Shifted box: (w-r)(h-r) / (2wh - (w-r)(h-r)) = o.
    let shifted = smaller_root(1.0, -(w + h), w * h * (1.0 - o) / (1.0 + o));
    // Shrunk box: (w-2r)(h-2r) / wh = o.
    let shrunk = smaller_root(4.0, -2.0 * (w + h), (1.0 - o) * w * h);
    // Grown box: wh / ((w+2r)(h+2r)) = o.
    let grown = larger_root(4.0 * o, 2.0 * o * (w + h), (o - 1.0) * w * h);
    shifted.min(shrunk).min(grown).max(1e-6)
}

/// Default minimum IoU for the heatmap radius.
pub const MIN_IOU: f64 = 0.7;

/// Per-class Gaussian splats at each object's center cell, combined by
/// element-wise max. Returns `[K, H/d, W/d]`.
pub fn encode_heatmap(boxes: &[BBox], grid: &GridSpec) -> Result<Tensor> {
    grid.validate()?;
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut heat = Tensor::zeros(&[grid.classes, rows, cols]);
    let d = grid.downsample as f64;
    for (index, b) in boxes.iter().enumerate() {
        let (row, col) = grid.cell_of(index, b)?;
        let sigma = gaussian_radius(b.width() / d, b.height() / d, MIN_IOU) / 3.0;
        let denom = 2.0 * sigma * sigma;
        let plane = &mut heat.data_mut()[b.class_id * rows * cols..(b.class_id + 1) * rows * cols];
        for y in 0..rows {
            for x in 0..cols {
                let (dx, dy) = (x as f64 - col as f64, y as f64 - row as f64);
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cell = &mut plane[y * cols + x];
                *cell = cell.max(v);
            }
        }
    }
    Ok(heat)
}

/// Offset and size supervision at object centers.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTargets {
    /// `[2, H/d, W/d]`: `center/d - cell`, (x, y).
    pub offsets: Tensor,
    /// `[2, H/d, W/d]`: (width, height) in pixels.
    pub sizes: Tensor,
    /// `[H/d, W/d]`, 1 at center cells.
    pub mask: Tensor,
    pub count: usize,
}

pub fn encode_regression(boxes: &[BBox], grid: &GridSpec) -> Result<RegressionTargets> {
    grid.validate()?;
    let (rows, cols) = (grid.rows(), grid.cols());
    let plane = rows * cols;
    let mut offsets = Tensor::zeros(&[2, rows, cols]);
    let mut sizes = Tensor::zeros(&[2, rows, cols]);
    let mut mask = Tensor::zeros(&[rows, cols]);
    let d = grid.downsample as f64;
    for (index, b) in boxes.iter().enumerate() {
        let (row, col) = grid.cell_of(index, b)?;
        let cell = row * cols + col;
        if mask.data()[cell] == 1.0 {
            warn!("box {index} shares center cell ({row}, {col}) with an earlier box; overwriting");
        }
        let (cx, cy) = b.center();
        offsets.data_mut()[cell] = cx / d - col as f64;
        offsets.data_mut()[plane + cell] = cy / d - row as f64;
        sizes.data_mut()[cell] = b.width();
        sizes.data_mut()[plane + cell] = b.height();
        mask.data_mut()[cell] = 1.0;
    }
    let count = mask.data().iter().filter(|&&m| m == 1.0).count();
    Ok(RegressionTargets {
        offsets,
        sizes,
        mask,
        count,
    })
}

/// One decoded object.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// Center in pixels.
    pub center: (f64, f64),
    /// Box corners in pixels (may be degenerate for untrained heads).
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub cell: (usize, usize),
    pub mask: Option<Vec<f64>>,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            class_id: self.class_id,
        }
    }
}

/// Decoding defaults.
pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TOP_N: usize = 100;

/// Cells that reach `threshold` and equal their 3x3 neighbourhood max
/// (zero outside the map), as `(class, row, col)`.
pub fn find_peaks(heatmap: &Tensor, threshold: f64) -> Vec<(usize, usize, usize)> {
    let (k, rows, cols) = (heatmap.shape()[0], heatmap.shape()[1], heatmap.shape()[2]);
    let hd = heatmap.data();
    let mut peaks = Vec::new();
    for c in 0..k {
        let plane = &hd[c * rows * cols..(c + 1) * rows * cols];
        for y in 0..rows {
            for x in 0..cols {
                let v = plane[y * cols + x];
                if v < threshold {
                    continue;
                }
                let mut neighbourhood = 0.0f64;
                for ny in y.saturating_sub(1)..=(y + 1).min(rows - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(cols - 1) {
                        neighbourhood = neighbourhood.max(plane[ny * cols + nx]);
                    }
                }
                if v >= neighbourhood {
                    peaks.push((c, y, x));
                }
            }
        }
    }
    peaks
}

/// Peaks to boxes: `center = (cell + offset) * d`, size from the size map.
/// Sorted by descending score, ties by (row, col, class).
pub fn decode_detections(
    heatmap: &Tensor,
    offsets: &Tensor,
    sizes: &Tensor,
    downsample: usize,
    threshold: f64,
    top_n: usize,
) -> Result<Vec<Detection>> {
    let hs = heatmap.shape();
    if hs.len() != 3 || offsets.shape() != [2, hs[1], hs[2]] || sizes.shape() != [2, hs[1], hs[2]] {
        return Err(Error::ShapeMismatch {
            op: "decode_detections",
            lhs: hs.to_vec(),
            rhs: offsets.shape().to_vec(),
        });
    }
    let (rows, cols) = (hs[1], hs[2]);
    let plane = rows * cols;
    let d = downsample as f64;
    let mut dets: Vec<Detection> = find_peaks(heatmap, threshold)
        .into_iter()
        .map(|(c, y, x)| {
            let cell = y * cols + x;
            let cx = (x as f64 + offsets.data()[cell]) * d;
            let cy = (y as f64 + offsets.data()[plane + cell]) * d;
            let (w, h) = (sizes.data()[cell], sizes.data()[plane + cell]);
            Detection {
                class_id: c,
                score: heatmap.data()[c * plane + cell],
                center: (cx, cy),
                x1: cx - w / 2.0,
                y1: cy - h / 2.0,
                x2: cx + w / 2.0,
                y2: cy + h / 2.0,
                cell: (y, x),
                mask: None,
            }
        })
        .collect();
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.cell.cmp(&b.cell))
            .then(a.class_id.cmp(&b.class_id))
    });
    dets.truncate(top_n);
    Ok(dets)
}
