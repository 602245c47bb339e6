//! Samples for training and evaluation: the synthetic shapes generator, a
//! COCO-style annotation reader, augmentation and batch collation.
//!
//! Masks are always stored box-normalised at `MASK_SIDE x MASK_SIDE` and
//! resampled by nearest neighbour, so they stay binary.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng as _;
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{encode_heatmap, encode_regression, BBox, GridSpec};
use crate::numerics::{stream, Rng, Tensor};

pub const MASK_SIDE: usize = 28;

/// Synthetic class names, in class-id order.
pub const SHAPE_NAMES: [&str; 3] = ["disk", "square", "triangle"];

/// Boxes narrower or shorter than this after augmentation are dropped.
pub const MIN_BOX_SIDE: f64 = 2.0;

const MIN_SHAPE_SIDE: usize = 10;
const MAX_SHAPE_SIDE: usize = 28;
const SHAPE_GAP: f64 = 2.0;
const MIN_CONTRAST: f64 = 0.35;

/// An image `[3, H, W]` in `[0, 1]` with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    /// One `[MASK_SIDE, MASK_SIDE]` binary mask per box, spanning the box.
    pub masks: Vec<Tensor>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidShape {
                op: "sample",
                shape: s.to_vec(),
                reason: "image must be [3, H, W]".into(),
            });
        }
        if self.masks.len() != self.boxes.len() {
            return Err(Error::config(format!(
                "{} masks for {} boxes",
                self.masks.len(),
                self.boxes.len()
            )));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for (index, b) in self.boxes.iter().enumerate() {
            if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h && b.x2 > b.x1 && b.y2 > b.y1) {
                return Err(Error::InvalidBox {
                    index,
                    reason: format!("{b:?} outside {w}x{h} image"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_prob: f64,
    /// Scale factors are drawn uniformly from `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-channel gain drawn from `[1 - color_jitter, 1 + color_jitter]`.
    pub color_jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            flip_prob: 0.5,
            scale_min: 0.6,
            scale_max: 1.3,
            color_jitter: 0.2,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            color_jitter: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && self.scale_min == 1.0 && self.scale_max == 1.0 && self.color_jitter == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::config(format!(
                "invalid scale range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::config(format!("color jitter {} outside [0, 1)", self.color_jitter)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    Synthetic,
    CocoJson(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Number of samples; for COCO files a cap, 0 meaning all images.
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub augmentation: Augmentation,
}

impl DatasetSpec {
    /// 64x64 synthetic shapes, three classes.
    pub fn synthetic(seed: u64, size: usize) -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            seed,
            size,
            height: 64,
            width: 64,
            classes: 3,
            augmentation: Augmentation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        if self.classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if let DatasetKind::Synthetic = self.kind {
            if self.classes > SHAPE_NAMES.len() {
                return Err(Error::config(format!(
                    "synthetic data has at most {} classes, got {}",
                    SHAPE_NAMES.len(),
                    self.classes
                )));
            }
            if self.height < 2 * MIN_SHAPE_SIDE || self.width < 2 * MIN_SHAPE_SIDE {
                return Err(Error::config(format!(
                    "synthetic images must be at least {0}x{0}",
                    2 * MIN_SHAPE_SIDE
                )));
            }
            if self.size == 0 {
                return Err(Error::config("synthetic dataset size must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn from_class(class_id: usize) -> Option<Self> {
        match class_id {
            0 => Some(ShapeKind::Disk),
            1 => Some(ShapeKind::Square),
            2 => Some(ShapeKind::Triangle),
            _ => None,
        }
    }
}

/// A shape occupying the square `[x1, x1 + side] x [y1, y1 + side]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x1: f64,
    pub y1: f64,
    pub side: f64,
}

impl Shape {
    /// Membership of a continuous point.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (x2, y2) = (self.x1 + self.side, self.y1 + self.side);
        if px < self.x1 || px > x2 || py < self.y1 || py > y2 {
            return false;
        }
        let half = self.side / 2.0;
        let (cx, cy) = (self.x1 + half, self.y1 + half);
        match self.kind {
            ShapeKind::Disk => (px - cx).powi(2) + (py - cy).powi(2) <= half * half,
            ShapeKind::Square => true,
            // Apex at the top middle, base along the bottom edge.
            ShapeKind::Triangle => (px - cx).abs() <= (py - self.y1) / 2.0,
        }
    }

    /// Membership of pixel `(x, y)`, sampled at its center.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        self.contains(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn bbox(&self, class_id: usize) -> BBox {
        BBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x1 + self.side,
            y2: self.y1 + self.side,
            class_id,
        }
    }
}

/// Box-normalised mask: cell `(v, u)` takes the value of the image pixel
/// nearest to its center inside `b`.
pub fn normalize_mask(b: &BBox, width: usize, height: usize, inside: impl Fn(usize, usize) -> bool) -> Tensor {
    let (sx, sy) = (b.width() / MASK_SIDE as f64, b.height() / MASK_SIDE as f64);
    Tensor::from_fn(&[MASK_SIDE, MASK_SIDE], |idx| {
        let x = b.x1 + (idx[1] as f64 + 0.5) * sx;
        let y = b.y1 + (idx[0] as f64 + 0.5) * sy;
        let px = (x.floor().max(0.0) as usize).min(width - 1);
        let py = (y.floor().max(0.0) as usize).min(height - 1);
        if inside(px, py) {
            1.0
        } else {
            0.0
        }
    })
}

fn separated(a: &BBox, b: &BBox) -> bool {
    a.x2 + SHAPE_GAP <= b.x1 || b.x2 + SHAPE_GAP <= a.x1 || a.y2 + SHAPE_GAP <= b.y1 || b.y2 + SHAPE_GAP <= a.y1
}

/// Shapes and classes of sample `index`, without rendering.
pub fn synthetic_layout(spec: &DatasetSpec, index: usize) -> Vec<(Shape, usize)> {
    let mut rng = stream(spec.seed, index as u64);
    layout(spec, &mut rng)
}

fn layout(spec: &DatasetSpec, rng: &mut Rng) -> Vec<(Shape, usize)> {
    let max_side = MAX_SHAPE_SIDE.min(spec.width.min(spec.height) / 2).max(MIN_SHAPE_SIDE);
    let count = rng.gen_range(1..=4);
    let mut placed: Vec<(Shape, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..64 {
            let side = rng.gen_range(MIN_SHAPE_SIDE..=max_side);
            let x1 = rng.gen_range(0..=spec.width - side) as f64;
            let y1 = rng.gen_range(0..=spec.height - side) as f64;
            let class_id = rng.gen_range(0..spec.classes);
            let kind = ShapeKind::from_class(class_id).expect("validated class count");
            let shape = Shape {
                kind,
                x1,
                y1,
                side: side as f64,
            };
            let b = shape.bbox(class_id);
            if placed.iter().all(|(s, c)| separated(&s.bbox(*c), &b)) {
                placed.push((shape, class_id));
                break;
            }
        }
    }
    placed
}

/// Sample `index` of a synthetic dataset; a pure function of
/// `(spec.seed, index)` and the image geometry.
pub fn synthetic_sample(spec: &DatasetSpec, index: usize) -> Sample {
    let mut rng = stream(spec.seed, index as u64);
    let shapes = layout(spec, &mut rng);
    let (h, w) = (spec.height, spec.width);

    let base: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.2..0.8);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
    let mut image = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let wave = 0.08 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for (c, &b) in base.iter().enumerate() {
                let noise = rng.gen_range(-0.04..0.04);
                image.data_mut()[c * plane + y * w + x] = (b + wave + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mut boxes = Vec::with_capacity(shapes.len());
    let mut masks = Vec::with_capacity(shapes.len());
    for (shape, class_id) in &shapes {
        let mut color = [0.0; 3];
        for _ in 0..100 {
            color = [rng.gen(), rng.gen(), rng.gen()];
            let contrast = color.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if contrast >= MIN_CONTRAST {
                break;
            }
        }
        let b = shape.bbox(*class_id);
        for y in b.y1 as usize..(b.y2 as usize).min(h) {
            for x in b.x1 as usize..(b.x2 as usize).min(w) {
                if shape.covers_pixel(x, y) {
                    for (c, &v) in color.iter().enumerate() {
                        let noise = rng.gen_range(-0.03..0.03);
                        image.data_mut()[c * plane + y * w + x] = (v + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        masks.push(normalize_mask(&b, w, h, |x, y| shape.covers_pixel(x, y)));
        boxes.push(b);
    }
    Sample { image, boxes, masks }
}

/// All samples of a synthetic dataset, in index order.
pub fn generate_synthetic(spec: &DatasetSpec) -> impl Iterator<Item = Sample> + '_ {
    (0..spec.size).map(move |i| synthetic_sample(spec, i))
}

// ---------------------------------------------------------------------------
// COCO-style annotations

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub images: usize,
    pub categories: usize,
    pub annotations: usize,
    pub rle: usize,
    pub crowd: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.images + self.categories + self.annotations + self.rle + self.crowd
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoObject {
    /// Box in original image pixels, contiguous class id.
    pub bbox: BBox,
    /// Polygons as `(x, y)` vertex lists; empty means the box itself.
    pub polygons: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<CocoObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoIndex {
    /// Directory image file names are resolved against.
    pub root: PathBuf,
    pub images: Vec<CocoImage>,
    pub class_names: Vec<String>,
    /// Original category id of each contiguous class.
    pub category_ids: Vec<u64>,
    pub skipped: SkipCounts,
}

#[derive(Deserialize)]
struct RawFile {
    images: Vec<Value>,
    annotations: Vec<Value>,
    categories: Vec<Value>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
    #[serde(default)]
    segmentation: Option<Value>,
    #[serde(default)]
    iscrowd: u8,
}

enum Segmentation {
    Polygons(Vec<Vec<(f64, f64)>>),
    Rle,
    Malformed(String),
}

fn parse_segmentation(v: Option<&Value>) -> Segmentation {
    let Some(v) = v else {
        return Segmentation::Polygons(Vec::new());
    };
    match v {
        Value::Null => Segmentation::Polygons(Vec::new()),
        Value::Object(_) => Segmentation::Rle,
        Value::Array(polys) => {
            let mut out = Vec::with_capacity(polys.len());
            for (pi, poly) in polys.iter().enumerate() {
                let Some(coords) = poly.as_array() else {
                    return Segmentation::Malformed(format!("segmentation[{pi}] is not an array"));
                };
                let nums: Option<Vec<f64>> = coords.iter().map(Value::as_f64).collect();
                let Some(nums) = nums else {
                    return Segmentation::Malformed(format!("segmentation[{pi}] has non-numeric entries"));
                };
                if nums.len() < 6 || nums.len() % 2 != 0 {
                    return Segmentation::Malformed(format!(
                        "segmentation[{pi}] has {} coordinates, need an even count >= 6",
                        nums.len()
                    ));
                }
                out.push(nums.chunks(2).map(|p| (p[0], p[1])).collect());
            }
            Segmentation::Polygons(out)
        }
        _ => Segmentation::Malformed("segmentation is neither polygons nor RLE".into()),
    }
}

/// Reads a COCO-style annotation file. Entries that fail to parse are
/// skipped and counted; RLE and crowd annotations are skipped as well.
pub fn load_coco_annotations(path: &Path) -> Result<CocoIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let mut skipped = SkipCounts::default();

    let mut categories = BTreeMap::new();
    for (i, v) in raw.categories.into_iter().enumerate() {
        match serde_json::from_value::<RawCategory>(v) {
            Ok(c) => {
                categories.insert(c.id, c.name);
            }
            Err(e) => {
                warn!("categories[{i}] skipped: {e}");
                skipped.categories += 1;
            }
        }
    }
    let category_ids: Vec<u64> = categories.keys().copied().collect();
    let class_names: Vec<String> = categories.into_values().collect();
    let class_of: HashMap<u64, usize> = category_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut images = Vec::new();
    let mut image_of = HashMap::new();
    for (i, v) in raw.images.into_iter().enumerate() {
        match serde_json::from_value::<RawImage>(v) {
            Ok(im) if im.width > 0 && im.height > 0 && !image_of.contains_key(&im.id) => {
                image_of.insert(im.id, images.len());
                images.push(CocoImage {
                    id: im.id,
                    file_name: im.file_name,
                    width: im.width,
                    height: im.height,
                    objects: Vec::new(),
                });
            }
            Ok(im) => {
                warn!("images[{i}] skipped: empty or duplicate image id {}", im.id);
                skipped.images += 1;
            }
            Err(e) => {
                warn!("images[{i}] skipped: {e}");
                skipped.images += 1;
            }
        }
    }

    for (i, v) in raw.annotations.into_iter().enumerate() {
        let ann = match serde_json::from_value::<RawAnnotation>(v) {
            Ok(a) => a,
            Err(e) => {
                warn!("annotations[{i}] skipped: {e}");
                skipped.annotations += 1;
                continue;
            }
        };
        if ann.iscrowd != 0 {
            skipped.crowd += 1;
            continue;
        }
        let (Some(&image), Some(&class_id)) = (image_of.get(&ann.image_id), class_of.get(&ann.category_id)) else {
            warn!(
                "annotations[{i}] skipped: unknown image {} or category {}",
                ann.image_id, ann.category_id
            );
            skipped.annotations += 1;
            continue;
        };
        let polygons = match parse_segmentation(ann.segmentation.as_ref()) {
            Segmentation::Polygons(p) => p,
            Segmentation::Rle => {
                skipped.rle += 1;
                continue;
            }
            Segmentation::Malformed(reason) => {
                warn!("annotations[{i}].segmentation skipped: {reason}");
                skipped.annotations += 1;
                continue;
            }
        };
        let im = &mut images[image];
        let bbox = match ann.bbox.as_slice() {
            &[x, y, w, h] if [x, y, w, h].iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0 => BBox {
                x1: x.max(0.0),
                y1: y.max(0.0),
                x2: (x + w).min(im.width as f64),
                y2: (y + h).min(im.height as f64),
                class_id,
            },
            other => {
                warn!("annotations[{i}].bbox skipped: {other:?} is not [x, y, w, h] with positive size");
                skipped.annotations += 1;
                continue;
            }
        };
        if bbox.x2 <= bbox.x1 || bbox.y2 <= bbox.y1 {
            warn!("annotations[{i}].bbox skipped: outside its image");
            skipped.annotations += 1;
            continue;
        }
        im.objects.push(CocoObject { bbox, polygons });
    }

    if skipped.total() > 0 {
        info!("{}: skipped entries {:?}", path.display(), skipped);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(CocoIndex {
        root,
        images,
        class_names,
        category_ids,
        skipped,
    })
}

/// Even-odd scanline fill of polygons at pixel centers.
pub fn rasterize_polygons(polygons: &[Vec<(f64, f64)>], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for poly in polygons {
            for (i, &(x0, y0)) in poly.iter().enumerate() {
                let (x1, y1) = poly[(i + 1) % poly.len()];
                if (y0 <= yc) != (y1 <= yc) {
                    xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Pixels whose centers fall in [pair[0], pair[1]).
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in start..end {
                out[y * width + x] = true;
            }
        }
    }
    out
}

impl CocoIndex {
    /// Box-normalised mask of one object.
    pub fn object_mask(&self, image: usize, object: usize) -> Tensor {
        let im = &self.images[image];
        let obj = &im.objects[object];
        if obj.polygons.is_empty() {
            return Tensor::full(&[MASK_SIDE, MASK_SIDE], 1.0);
        }
        let filled = rasterize_polygons(&obj.polygons, im.width, im.height);
        normalize_mask(&obj.bbox, im.width, im.height, |x, y| filled[y * im.width + x])
    }

    /// Loads image `index` resized to `width x height`, with boxes scaled to
    /// match.
    pub fn sample(&self, index: usize, width: usize, height: usize) -> Result<Sample> {
        let im = &self.images[index];
        let path = self.root.join(&im.file_name);
        let image = load_image(&path, width, height)?;
        let (sx, sy) = (width as f64 / im.width as f64, height as f64 / im.height as f64);
        let boxes = im
            .objects
            .iter()
            .map(|o| BBox {
                x1: o.bbox.x1 * sx,
                y1: o.bbox.y1 * sy,
                x2: o.bbox.x2 * sx,
                y2: o.bbox.y2 * sy,
                class_id: o.bbox.class_id,
            })
            .collect();
        let masks = (0..im.objects.len()).map(|o| self.object_mask(index, o)).collect();
        Ok(Sample { image, boxes, masks })
    }
}

/// Decodes a PPM/PGM/PNG file into `[3, height, width]` in `[0, 1]`,
/// resizing bilinearly when the stored size differs.
pub fn load_image(path: &Path, width: usize, height: usize) -> Result<Tensor> {
    let decoded = image::open(path).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut rgb = decoded.to_rgb8();
    if rgb.width() as usize != width || rgb.height() as usize != height {
        rgb = image::imageops::resize(&rgb, width as u32, height as u32, image::imageops::FilterType::Triangle);
    }
    let plane = width * height;
    let mut t = Tensor::zeros(&[3, height, width]);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[c * plane + y as usize * width + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Writes `[3, H, W]` in `[0, 1]` as a binary PPM.
pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image.data()[c * plane + y as usize * w + x as usize];
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Debug)]
pub enum Dataset {
    Synthetic(DatasetSpec),
    Coco { spec: DatasetSpec, index: CocoIndex },
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        match &spec.kind {
            DatasetKind::Synthetic => Ok(Dataset::Synthetic(spec.clone())),
            DatasetKind::CocoJson(path) => {
                let index = load_coco_annotations(path)?;
                if index.class_names.len() != spec.classes {
                    return Err(Error::config(format!(
                        "{} has {} categories, config expects {}",
                        path.display(),
                        index.class_names.len(),
                        spec.classes
                    )));
                }
                Ok(Dataset::Coco {
                    spec: spec.clone(),
                    index,
                })
            }
        }
    }

    pub fn spec(&self) -> &DatasetSpec {
        match self {
            Dataset::Synthetic(s) | Dataset::Coco { spec: s, .. } => s,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic(s) => s.size,
            Dataset::Coco { spec, index } if spec.size > 0 => spec.size.min(index.images.len()),
            Dataset::Coco { index, .. } => index.images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            Dataset::Synthetic(s) => SHAPE_NAMES[..s.classes].iter().map(|s| s.to_string()).collect(),
            Dataset::Coco { index, .. } => index.class_names.clone(),
        }
    }

    /// Un-augmented sample `index`.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        match self {
            Dataset::Synthetic(s) => Ok(synthetic_sample(s, index)),
            Dataset::Coco { spec, index: coco } => coco.sample(index, spec.width, spec.height),
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation

/// Horizontal mirror of image, boxes and masks.
pub fn flip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    for c in 0..3 {
        for y in 0..h {
            let row = &mut image.data_mut()[(c * h + y) * w..(c * h + y + 1) * w];
            row.reverse();
        }
    }
    let wf = w as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| BBox {
            x1: wf - b.x2,
            x2: wf - b.x1,
            ..*b
        })
        .collect();
    let masks = sample
        .masks
        .iter()
        .map(|m| {
            let mut m = m.clone();
            let side = m.shape()[1];
            m.data_mut().chunks_mut(side).for_each(<[f64]>::reverse);
            m
        })
        .collect();
    Sample { image, boxes, masks }
}

/// Samples `image[c]` at continuous pixel-center coordinates, clamping to
/// the border.
fn sample_clamped(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Zooms about the image center by `factor`; boxes are scaled and clipped
/// and masks resampled over the visible part of each box.
fn scale_about_center(sample: &Sample, factor: f64) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let plane = h * w;
    let src = sample.image.data();
    let mut image = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let sp = &src[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let sx = cx + (x as f64 + 0.5 - cx) / factor;
                let sy = cy + (y as f64 + 0.5 - cy) / factor;
                image.data_mut()[c * plane + y * w + x] = sample_clamped(sp, w, h, sx, sy);
            }
        }
    }
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    for (b, m) in sample.boxes.iter().zip(&sample.masks) {
        let nb = BBox {
            x1: (cx + (b.x1 - cx) * factor).clamp(0.0, w as f64),
            y1: (cy + (b.y1 - cy) * factor).clamp(0.0, h as f64),
            x2: (cx + (b.x2 - cx) * factor).clamp(0.0, w as f64),
            y2: (cy + (b.y2 - cy) * factor).clamp(0.0, h as f64),
            class_id: b.class_id,
        };
        if nb.width() < MIN_BOX_SIDE || nb.height() < MIN_BOX_SIDE {
            continue;
        }
        let side = m.shape()[0];
        let nm = Tensor::from_fn(&[side, side], |idx| {
            let px = nb.x1 + (idx[1] as f64 + 0.5) * nb.width() / side as f64;
            let py = nb.y1 + (idx[0] as f64 + 0.5) * nb.height() / side as f64;
            let ox = cx + (px - cx) / factor;
            let oy = cy + (py - cy) / factor;
            let u = (((ox - b.x1) / b.width() * side as f64).floor().max(0.0) as usize).min(side - 1);
            let v = (((oy - b.y1) / b.height() * side as f64).floor().max(0.0) as usize).min(side - 1);
            m.data()[v * side + u]
        });
        boxes.push(nb);
        masks.push(nm);
    }
    Sample { image, boxes, masks }
}

/// Random flip, scale jitter and color jitter, in that order. Disabled
/// steps draw no random numbers.
pub fn augment(sample: &Sample, aug: &Augmentation, rng: &mut Rng) -> Sample {
    let mut out = sample.clone();
    if aug.flip_prob > 0.0 && rng.gen::<f64>() < aug.flip_prob {
        out = flip(&out);
    }
    if aug.scale_max > aug.scale_min || aug.scale_min != 1.0 {
        let factor = if aug.scale_max > aug.scale_min {
            rng.gen_range(aug.scale_min..=aug.scale_max)
        } else {
            aug.scale_min
        };
        out = scale_about_center(&out, factor);
    }
    if aug.color_jitter > 0.0 {
        let plane = out.height() * out.width();
        for c in 0..3 {
            let gain = rng.gen_range(1.0 - aug.color_jitter..=1.0 + aug.color_jitter);
            for v in &mut out.image.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Batches

/// Stacked images and encoded targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    /// `[B, K, H/d, W/d]`
    pub heatmaps: Tensor,
    /// `[B, 2, H/d, W/d]`
    pub offsets: Tensor,
    /// `[B, 2, H/d, W/d]`
    pub sizes: Tensor,
    /// `[B, H/d, W/d]`
    pub regression_mask: Tensor,
    /// Number of heatmap cells equal to 1.
    pub centers: usize,
    /// `(batch, row, col)` center cell of each object.
    pub object_cells: Vec<(usize, usize, usize)>,
    /// `[M, side * side]` mask targets, absent when there are no objects.
    pub object_masks: Option<Tensor>,
    pub boxes: Vec<Vec<BBox>>,
}

/// Nearest-neighbour resize of a square mask.
pub fn resize_mask(mask: &Tensor, side: usize) -> Tensor {
    let from = mask.shape()[0];
    if from == side {
        return mask.clone();
    }
    Tensor::from_fn(&[side, side], |idx| {
        let v = ((idx[0] as f64 + 0.5) * from as f64 / side as f64) as usize;
        let u = ((idx[1] as f64 + 0.5) * from as f64 / side as f64) as usize;
        mask.data()[v.min(from - 1) * from + u.min(from - 1)]
    })
}

pub fn collate(samples: &[Sample], grid: &GridSpec, mask_side: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::config("cannot collate an empty batch"));
    }
    let (h, w) = (grid.height, grid.width);
    let (rows, cols) = (grid.rows(), grid.cols());
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut heat = Vec::with_capacity(b * grid.classes * rows * cols);
    let mut offsets = Vec::with_capacity(b * 2 * rows * cols);
    let mut sizes = Vec::with_capacity(b * 2 * rows * cols);
    let mut mask = Vec::with_capacity(b * rows * cols);
    let mut cells = Vec::new();
    let mut masks = Vec::new();
    let mut boxes = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        if s.height() != h || s.width() != w {
            return Err(Error::ShapeMismatch {
                op: "collate",
                lhs: s.image.shape().to_vec(),
                rhs: vec![3, h, w],
            });
        }
        if let Some(bad) = s.boxes.iter().find(|bx| bx.class_id >= grid.classes) {
            return Err(Error::InvalidBox {
                index: bad.class_id,
                reason: format!("class {} outside [0, {})", bad.class_id, grid.classes),
            });
        }
        images.extend_from_slice(s.image.data());
        heat.extend_from_slice(encode_heatmap(&s.boxes, grid)?.data());
        let reg = encode_regression(&s.boxes, grid)?;
        offsets.extend_from_slice(reg.offsets.data());
        sizes.extend_from_slice(reg.sizes.data());
        mask.extend_from_slice(reg.mask.data());
        for (j, (bx, m)) in s.boxes.iter().zip(&s.masks).enumerate() {
            let (row, col) = grid.cell_of(j, bx)?;
            cells.push((i, row, col));
            masks.extend_from_slice(resize_mask(m, mask_side).data());
        }
        boxes.push(s.boxes.clone());
    }
    let centers = heat.iter().filter(|&&v| v == 1.0).count();
    let object_masks = if cells.is_empty() {
        None
    } else {
        Some(Tensor::new(&[cells.len(), mask_side * mask_side], masks)?)
    };
    Ok(Batch {
        images: Tensor::new(&[b, 3, h, w], images)?,
        heatmaps: Tensor::new(&[b, grid.classes, rows, cols], heat)?,
        offsets: Tensor::new(&[b, 2, rows, cols], offsets)?,
        sizes: Tensor::new(&[b, 2, rows, cols], sizes)?,
        regression_mask: Tensor::new(&[b, rows, cols], mask)?,
        centers,
        object_cells: cells,
        object_masks,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded;

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let spec = DatasetSpec::synthetic(7, 20);
        for i in 0..20 {
            let a = synthetic_sample(&spec, i);
            assert_eq!(a, synthetic_sample(&spec, i));
            a.validate().unwrap();
            assert!((1..=4).contains(&a.boxes.len()));
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(synthetic_sample(&spec, 0), synthetic_sample(&spec, 1));
    }

    #[test]
    fn flip_box_coordinates() {
        let s = Sample {
            image: Tensor::zeros(&[3, 64, 64]),
            boxes: vec![BBox::new(10.0, 5.0, 20.0, 15.0, 0).unwrap()],
            masks: vec![Tensor::zeros(&[MASK_SIDE, MASK_SIDE])],
        };
        let f = flip(&s);
        assert_eq!((f.boxes[0].x1, f.boxes[0].x2), (44.0, 54.0));
        assert_eq!((f.boxes[0].y1, f.boxes[0].y2), (5.0, 15.0));
    }

    #[test]
    fn flip_is_involution() {
        let s = synthetic_sample(&DatasetSpec::synthetic(3, 1), 0);
        assert_eq!(flip(&flip(&s)), s);
    }

    #[test]
    fn identity_augmentation() {
        let s = synthetic_sample(&DatasetSpec::synthetic(3, 1), 0);
        let mut rng = seeded(1);
        assert_eq!(augment(&s, &Augmentation::none(), &mut rng), s);
    }

    #[test]
    fn bbox_convention_and_rle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        std::fs::write(
            &path,
            r#"{"images": [{"id": 3, "file_name": "a.ppm", "width": 100, "height": 100}],
                "categories": [{"id": 18, "name": "dog"}, {"id": 5, "name": "cat"}],
                "annotations": [
                  {"image_id": 3, "category_id": 18, "bbox": [10, 20, 30, 40], "segmentation": [[10, 20, 40, 20, 40, 60, 10, 60]]},
                  {"image_id": 3, "category_id": 5, "bbox": [1, 1, 5, 5], "segmentation": {"counts": "abc", "size": [100, 100]}},
                  {"image_id": 3, "category_id": 5, "bbox": [1, 1, 5]}
                ]}"#,
        )
        .unwrap();
        let idx = load_coco_annotations(&path).unwrap();
        assert_eq!(idx.images.len(), 1);
        assert_eq!(idx.class_names, vec!["cat", "dog"]);
        let obj = &idx.images[0].objects;
        assert_eq!(obj.len(), 1);
        assert_eq!(
            obj[0].bbox,
            BBox {
                x1: 10.0,
                y1: 20.0,
                x2: 40.0,
                y2: 60.0,
                class_id: 1
            }
        );
        assert_eq!(idx.skipped.rle, 1);
        assert_eq!(idx.skipped.annotations, 1);
    }

    #[test]
    fn malformed_file_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n\"images\": [}").unwrap();
        let err = load_coco_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn resize_mask_nearest() {
        let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_mask(&m, 4);
        assert_eq!(r.at(&[0, 1]), 1.0);
        assert_eq!(r.at(&[1, 2]), 0.0);
        assert_eq!(r.at(&[3, 3]), 1.0);
    }

    #[test]
    fn collate_shapes() {
        let spec = DatasetSpec::synthetic(5, 4);
        let samples: Vec<_> = generate_synthetic(&spec).collect();
        let grid = GridSpec {
            classes: 3,
            height: 64,
            width: 64,
            downsample: 4,
        };
        let b = collate(&samples, &grid, 28).unwrap();
        let objects: usize = samples.iter().map(|s| s.boxes.len()).sum();
        assert_eq!(b.images.shape(), &[4, 3, 64, 64]);
        assert_eq!(b.heatmaps.shape(), &[4, 3, 16, 16]);
        assert_eq!(b.object_cells.len(), objects);
        assert_eq!(b.object_masks.unwrap().shape(), &[objects, 784]);
        assert_eq!(b.centers, objects);
    }
}
