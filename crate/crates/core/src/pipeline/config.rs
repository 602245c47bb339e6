//! Run configuration as flat `section.key = value` text.
//!
//! Every key can be overridden from the command line with `--section.key value`.
//! Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, ProjectionMode};
use crate::losses::LossWeights;
use crate::routing::{RoutingMode, VarianceMode};

/// Which of the three model variants is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Deform,
    /// Plain capsule convolution instead of the deformable projection.
    NonDeform,
    /// Uniform routing coefficients instead of the squeeze-excite step.
    NoRouting,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Deform, Ablation::NonDeform, Ablation::NoRouting];

    pub fn projection(self) -> ProjectionMode {
        match self {
            Ablation::NonDeform => ProjectionMode::Conv,
            _ => ProjectionMode::Deform,
        }
    }

    pub fn routing(self) -> RoutingMode {
        match self {
            Ablation::NoRouting => RoutingMode::Uniform,
            _ => RoutingMode::SqueezeExcite,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deform" => Ok(Ablation::Deform),
            "non_deform" | "non-deform" => Ok(Ablation::NonDeform),
            "no_routing" | "no-routing" => Ok(Ablation::NoRouting),
            _ => Err(Error::config(format!(
                "unknown ablation {s:?}; expected deform, non_deform or no_routing"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Deform => "deform",
            Ablation::NonDeform => "non_deform",
            Ablation::NoRouting => "no_routing",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Where checkpoints and the metric log go; `None` keeps everything in
    /// memory.
    pub output_dir: Option<PathBuf>,
    /// Metric records are written every this many steps.
    pub log_interval: usize,
    pub eval_threshold: f64,
    pub eval_top_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Synthetic shapes, 64x64, batch 8, 20 epochs with drops at 8 and 14.
    pub fn desk() -> Self {
        RunConfig {
            dataset: DatasetSpec::synthetic(0, 2000),
            head: HeadConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 8,
            lr_drops: vec![8, 14],
            lr_drop_factor: 0.2,
            seed: 0,
            ablation: Ablation::Deform,
            output_dir: None,
            log_interval: 10,
            eval_threshold: 0.05,
            eval_top_n: 100,
        }
    }

    /// Full-size schedule: batch 12, 40 epochs with drops at 5, 15 and 25,
    /// K = 80 and 5x5 capsule kernels.
    pub fn coco(annotations: PathBuf) -> Self {
        let mut c = RunConfig::desk();
        c.dataset.kind = DatasetKind::CocoJson(annotations);
        c.dataset.size = 0;
        c.dataset.classes = 80;
        c.head.kernel = 5;
        c.batch_size = 12;
        c.epochs = 40;
        c.lr_drops = vec![5, 15, 25];
        c
    }

    /// Head configuration with the ablation's substitutions applied.
    pub fn effective_head(&self) -> HeadConfig {
        HeadConfig {
            image_height: self.dataset.height,
            image_width: self.dataset.width,
            classes: self.dataset.classes,
            projection: self.ablation.projection(),
            routing: self.ablation.routing(),
            ..self.head.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.effective_head().validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optim.beta1 and optim.beta2 must lie in [0, 1)"));
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::config("optim.epsilon must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::config("train.epochs, train.batch_size and train.log_interval must be positive"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config("train.lr_drop_factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) || self.eval_top_n == 0 {
            return Err(Error::config("eval.threshold must lie in [0, 1] and eval.top_n be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&e| e <= epoch).count();
        self.optimizer.lr * self.lr_drop_factor.powi(drops as i32)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        let a = &mut d.augmentation;
        let h = &mut self.head;
        let l = &mut self.loss;
        let o = &mut self.optimizer;
        match key {
            "dataset.kind" => match v {
                "synthetic" => d.kind = DatasetKind::Synthetic,
                "coco_json" => {
                    if d.kind == DatasetKind::Synthetic {
                        d.kind = DatasetKind::CocoJson(PathBuf::new());
                    }
                }
                _ => return Err(Error::config(format!("dataset.kind: unknown kind {v:?}"))),
            },
            "dataset.path" => d.kind = DatasetKind::CocoJson(PathBuf::from(v)),
            "dataset.seed" => d.seed = parse(key, v)?,
            "dataset.size" => d.size = parse(key, v)?,
            "dataset.height" => d.height = parse(key, v)?,
            "dataset.width" => d.width = parse(key, v)?,
            "dataset.classes" => d.classes = parse(key, v)?,
            "augment.flip_prob" => a.flip_prob = parse(key, v)?,
            "augment.scale_min" => a.scale_min = parse(key, v)?,
            "augment.scale_max" => a.scale_max = parse(key, v)?,
            "augment.color_jitter" => a.color_jitter = parse(key, v)?,
            "head.backbone_width1" => h.backbone_widths[0] = parse(key, v)?,
            "head.backbone_width2" => h.backbone_widths[1] = parse(key, v)?,
            "head.child_types" => h.child_types = parse(key, v)?,
            "head.child_atoms" => h.child_atoms = parse(key, v)?,
            "head.kernel" => h.kernel = parse(key, v)?,
            "head.obj_atoms" => h.obj_atoms = parse(key, v)?,
            "head.reduction" => h.reduction = parse(key, v)?,
            "head.recon_side" => h.recon_side = parse(key, v)?,
            "head.recon_hidden" => h.recon_hidden = parse(key, v)?,
            "head.box_hidden" => h.box_hidden = parse(key, v)?,
            "head.size_bias_init" => h.size_bias_init = parse(key, v)?,
            "head.variance" => {
                h.variance = match v {
                    "mean_centered" => VarianceMode::MeanCentered,
                    "literal" => VarianceMode::Literal,
                    _ => return Err(Error::config(format!("head.variance: unknown mode {v:?}"))),
                }
            }
            "loss.lambda_r_initial" => l.lambda_r_initial = parse(key, v)?,
            "loss.lambda_r_final" => l.lambda_r_final = parse(key, v)?,
            "loss.lambda_r_switch" => l.lambda_r_switch = parse(key, v)?,
            "loss.lambda_s" => l.lambda_s = parse(key, v)?,
            "loss.lambda_o" => l.lambda_o = parse(key, v)?,
            "loss.alpha" => l.alpha = parse(key, v)?,
            "loss.beta" => l.beta = parse(key, v)?,
            "optim.lr" => o.lr = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.epsilon" => o.epsilon = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr_drops" => self.lr_drops = parse_list(key, v)?,
            "train.lr_drop_factor" => self.lr_drop_factor = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.ablation" => self.ablation = v.parse()?,
            "train.output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.log_interval" => self.log_interval = parse(key, v)?,
            "eval.threshold" => self.eval_threshold = parse(key, v)?,
            "eval.top_n" => self.eval_top_n = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// All keys and their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let a = &d.augmentation;
        let h = &self.head;
        let l = &self.loss;
        let o = &self.optimizer;
        let mut out = vec![];
        match &d.kind {
            DatasetKind::Synthetic => out.push(("dataset.kind", "synthetic".to_string())),
            DatasetKind::CocoJson(p) => {
                out.push(("dataset.kind", "coco_json".to_string()));
                out.push(("dataset.path", p.display().to_string()));
            }
        }
        out.extend([
            ("dataset.seed", d.seed.to_string()),
            ("dataset.size", d.size.to_string()),
            ("dataset.height", d.height.to_string()),
            ("dataset.width", d.width.to_string()),
            ("dataset.classes", d.classes.to_string()),
            ("augment.flip_prob", a.flip_prob.to_string()),
            ("augment.scale_min", a.scale_min.to_string()),
            ("augment.scale_max", a.scale_max.to_string()),
            ("augment.color_jitter", a.color_jitter.to_string()),
            ("head.backbone_width1", h.backbone_widths[0].to_string()),
            ("head.backbone_width2", h.backbone_widths[1].to_string()),
            ("head.child_types", h.child_types.to_string()),
            ("head.child_atoms", h.child_atoms.to_string()),
            ("head.kernel", h.kernel.to_string()),
            ("head.obj_atoms", h.obj_atoms.to_string()),
            ("head.reduction", h.reduction.to_string()),
            ("head.recon_side", h.recon_side.to_string()),
            ("head.recon_hidden", h.recon_hidden.to_string()),
            ("head.box_hidden", h.box_hidden.to_string()),
            ("head.size_bias_init", h.size_bias_init.to_string()),
            (
                "head.variance",
                match h.variance {
                    VarianceMode::MeanCentered => "mean_centered",
                    VarianceMode::Literal => "literal",
                }
                .to_string(),
            ),
            ("loss.lambda_r_initial", l.lambda_r_initial.to_string()),
            ("loss.lambda_r_final", l.lambda_r_final.to_string()),
            ("loss.lambda_r_switch", l.lambda_r_switch.to_string()),
            ("loss.lambda_s", l.lambda_s.to_string()),
            ("loss.lambda_o", l.lambda_o.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.epsilon", o.epsilon.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            (
                "train.lr_drops",
                self.lr_drops.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            ),
            ("train.lr_drop_factor", self.lr_drop_factor.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.ablation", self.ablation.to_string()),
            (
                "train.output_dir",
                self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("train.log_interval", self.log_interval.to_string()),
            ("eval.threshold", self.eval_threshold.to_string()),
            ("eval.top_n", self.eval_top_n.to_string()),
        ]);
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Applies assignments from config text on top of `self`. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: format!("{origin} line {}", n + 1),
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                context: format!("{origin} line {}", n + 1),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Desk defaults overlaid with the file's assignments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::desk();
        c.apply_text(text, "<config>")?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::desk();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies `--section.key value` (or `--section.key=value`) pairs.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::config(format!("expected --section.key, got {flag:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::config(format!("flag --{key} needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }
}
