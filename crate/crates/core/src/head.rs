//! The detector: a small convolutional backbone, child capsules formed by
//! grouping feature channels, deformable projections to the two SplitCaps
//! parents (64-atom instantiation capsule and K-atom class-presence
//! capsule), routing, box regression heads on the backbone features, and
//! the mask reconstruction subnet.

use rand::Rng;

use crate::capsule::{conv_capsule_project, deform_capsule_project, LayerConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::routing::{se_route, RoutedParents, RoutingMode, VarianceMode};

/// Backbone output stride.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    #[default]
    Deform,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Widths of the two backbone stages.
    pub backbone_widths: [usize; 2],
    pub child_types: usize,
    pub child_atoms: usize,
    pub kernel: usize,
    pub obj_atoms: usize,
    pub classes: usize,
    /// Excitation bottleneck reduction ratio.
    pub reduction: usize,
    pub recon_side: usize,
    pub recon_hidden: usize,
    pub box_hidden: usize,
    /// Initial bias of the size head, in pixels.
    pub size_bias_init: f64,
    pub projection: ProjectionMode,
    pub routing: RoutingMode,
    pub variance: VarianceMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            image_height: 64,
            image_width: 64,
            backbone_widths: [16, 32],
            child_types: 8,
            child_atoms: 8,
            kernel: 3,
            obj_atoms: 64,
            classes: 3,
            reduction: 4,
            recon_side: 28,
            recon_hidden: 256,
            box_hidden: 64,
            size_bias_init: 16.0,
            projection: ProjectionMode::Deform,
            routing: RoutingMode::SqueezeExcite,
            variance: VarianceMode::MeanCentered,
        }
    }
}

impl HeadConfig {
    pub fn feature_channels(&self) -> usize {
        self.child_types * self.child_atoms
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / DOWNSAMPLE
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / DOWNSAMPLE
    }

    pub fn excitation_hidden(&self) -> usize {
        3 * self.child_types / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_height,
            self.image_width,
            self.backbone_widths[0],
            self.backbone_widths[1],
            self.child_types,
            self.child_atoms,
            self.kernel,
            self.obj_atoms,
            self.classes,
            self.reduction,
            self.recon_side,
            self.recon_hidden,
            self.box_hidden,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::config(format!("head dimensions must be positive: {self:?}")));
        }
        if self.image_height % DOWNSAMPLE != 0 || self.image_width % DOWNSAMPLE != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by {DOWNSAMPLE}",
                self.image_height, self.image_width
            )));
        }
        if (3 * self.child_types) % self.reduction != 0 {
            return Err(Error::config(format!(
                "reduction ratio {} must divide 3 * child_types = {}",
                self.reduction,
                3 * self.child_types
            )));
        }
        if self.classes < 2 && self.routing == RoutingMode::SqueezeExcite {
            return Err(Error::config("routing descriptors need at least two classes"));
        }
        self.projection_config(self.obj_atoms).validate()
    }

    fn projection_config(&self, parent_atoms: usize) -> LayerConfig {
        LayerConfig {
            child_types: self.child_types,
            child_atoms: self.child_atoms,
            parent_types: 1,
            parent_atoms,
            kernel: self.kernel,
            height: self.grid_height(),
            width: self.grid_width(),
            stride: 1,
        }
    }
}

/// `(weight, bias)` of one layer.
#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    kernel: ParamId,
    offsets: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    backbone: [Layer; 4],
    obj: Projection,
    cls: Projection,
    w1: ParamId,
    w2: ParamId,
    offset_head: [Layer; 2],
    size_head: [Layer; 2],
    recon: Vec<Layer>,
}

/// Forward results of one batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, K, h, w]`, post-sigmoid class presence.
    pub heatmap: Var,
    /// `[B, a_obj, h, w]`, raw instantiation capsules.
    pub v_obj: Var,
    /// `[B, 2, h, w]`
    pub offsets: Var,
    /// `[B, 2, h, w]`
    pub sizes: Var,
    pub routed: RoutedParents,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: HeadConfig,
    params: ParamStore,
    ids: Ids,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, rng: &mut R| {
            Ok::<_, Error>(Layer {
                weight: p.add(format!("{name}.weight"), he_uniform(&[out, inp, k, k], inp * k * k, rng))?,
                bias: p.add(format!("{name}.bias"), Tensor::zeros(&[out]))?,
            })
        };
        let [w0, w1] = cfg.backbone_widths;
        let c = cfg.feature_channels();
        let backbone = [
            conv(&mut p, "backbone.stage1.conv1", w0, 3, 3, rng)?,
            conv(&mut p, "backbone.stage1.conv2", w0, w0, 3, rng)?,
            conv(&mut p, "backbone.stage2.conv1", w1, w0, 3, rng)?,
            conv(&mut p, "backbone.stage2.conv2", c, w1, 3, rng)?,
        ];

        let projection = |p: &mut ParamStore, name: &str, atoms: usize, rng: &mut R| {
            let lc = cfg.projection_config(atoms);
            let fan_in = cfg.child_atoms * cfg.kernel * cfg.kernel;
            let bound = (3.0 / fan_in as f64).sqrt();
            Ok::<_, Error>(Projection {
                kernel: p.add(
                    format!("caps.{name}.kernel"),
                    Tensor::uniform(&lc.kernel_shape(), -bound, bound, rng),
                )?,
                offsets: p.add(format!("caps.{name}.offsets"), Tensor::zeros(&lc.offset_shape()))?,
            })
        };
        let obj = projection(&mut p, "obj", cfg.obj_atoms, rng)?;
        let cls = projection(&mut p, "cls", cfg.classes, rng)?;

        let (n3, hidden) = (3 * cfg.child_types, cfg.excitation_hidden());
        let w1_id = p.add("routing.w1", fan_in_uniform(&[hidden, n3], n3, rng))?;
        let w2_id = p.add("routing.w2", fan_in_uniform(&[cfg.child_types, hidden], hidden, rng))?;

        let offset_head = [
            conv(&mut p, "heads.offset.conv3x3", cfg.box_hidden, c, 3, rng)?,
            conv(&mut p, "heads.offset.conv1x1", 2, cfg.box_hidden, 1, rng)?,
        ];
        let size_head = [
            conv(&mut p, "heads.size.conv3x3", cfg.box_hidden, c, 3, rng)?,
            conv(&mut p, "heads.size.conv1x1", 2, cfg.box_hidden, 1, rng)?,
        ];
        p.get_mut(size_head[1].bias).value = Tensor::full(&[2], cfg.size_bias_init);

        let mut recon = Vec::new();
        let widths = [
            cfg.obj_atoms,
            cfg.recon_hidden,
            cfg.recon_hidden,
            cfg.recon_hidden,
            cfg.recon_side * cfg.recon_side,
        ];
        for (i, pair) in widths.windows(2).enumerate() {
            recon.push(Layer {
                weight: p.add(format!("recon.fc{}.weight", i + 1), he_uniform(&[pair[0], pair[1]], pair[0], rng))?,
                bias: p.add(format!("recon.fc{}.bias", i + 1), Tensor::zeros(&[pair[1]]))?,
            });
        }

        Ok(Detector {
            cfg,
            params: p,
            ids: Ids {
                backbone,
                obj,
                cls,
                w1: w1_id,
                w2: w2_id,
                offset_head,
                size_head,
                recon,
            },
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter value from `other`, which must have the same
    /// names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        for p in self.params.iter_mut() {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {:?}", p.name)))?;
            let src = &other.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(src.shape(), src.data().to_vec())?;
        }
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph, b: &Bound, x: Var, layer: Layer, spec: Conv2dSpec) -> Result<Var> {
        g.conv2d(x, b.get(layer.weight), Some(b.get(layer.bias)), spec)
    }

    /// `[B, 3, H, W]` images to `[B, c_i * a_i, H/4, W/4]` features.
    pub fn reference_backbone(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.image_height || s[3] != self.cfg.image_width {
            return Err(Error::InvalidShape {
                op: "reference_backbone",
                shape: s,
                reason: format!(
                    "expected [B, 3, {}, {}]",
                    self.cfg.image_height, self.cfg.image_width
                ),
            });
        }
        let strides = [2, 1, 2, 1];
        let mut x = images;
        for (layer, stride) in self.ids.backbone.iter().zip(strides) {
            x = self.conv(g, b, x, *layer, Conv2dSpec::strided(3, stride))?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Contiguous channel groups: child type `i` owns channels
    /// `[i * a_i, (i + 1) * a_i)`. Result `[B, c_i, a_i, h, w]`.
    pub fn form_child_capsules(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[1] != self.cfg.feature_channels() {
            return Err(Error::InvalidShape {
                op: "form_child_capsules",
                shape: s,
                reason: format!("expected {} channels", self.cfg.feature_channels()),
            });
        }
        g.reshape(features, &[s[0], self.cfg.child_types, self.cfg.child_atoms, s[2], s[3]])
    }

    fn project(&self, g: &mut Graph, b: &Bound, children: Var, proj: Projection, atoms: usize) -> Result<Var> {
        let lc = self.cfg.projection_config(atoms);
        let out = match self.cfg.projection {
            ProjectionMode::Deform => deform_capsule_project(g, children, b.get(proj.kernel), b.get(proj.offsets), &lc)?,
            ProjectionMode::Conv => conv_capsule_project(g, children, b.get(proj.kernel), &lc)?,
        };
        let s = g.shape(out).to_vec();
        g.reshape(out, &[s[0], s[1], s[3], s[4], s[5]])
    }

    /// Both parent projections, routed with shared coefficients.
    pub fn splitcaps(&self, g: &mut Graph, b: &Bound, children: Var) -> Result<RoutedParents> {
        let u_obj = self.project(g, b, children, self.ids.obj, self.cfg.obj_atoms)?;
        let u_cls = self.project(g, b, children, self.ids.cls, self.cfg.classes)?;
        se_route(
            g,
            u_obj,
            u_cls,
            (b.get(self.ids.w1), b.get(self.ids.w2)),
            self.cfg.routing,
            self.cfg.variance,
        )
    }

    /// Offset and size maps, each `[B, 2, h, w]`.
    pub fn box_regression_heads(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<(Var, Var)> {
        let mut run = |head: &[Layer; 2]| {
            let h = self.conv(g, b, features, head[0], Conv2dSpec::same(3))?;
            let h = g.relu(h);
            self.conv(g, b, h, head[1], Conv2dSpec::same(1))
        };
        let offsets = run(&self.ids.offset_head)?;
        let sizes = run(&self.ids.size_head)?;
        Ok((offsets, sizes))
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<HeadOutput> {
        let features = self.reference_backbone(g, b, images)?;
        let children = self.form_child_capsules(g, features)?;
        let routed = self.splitcaps(g, b, children)?;
        let heatmap = g.sigmoid(routed.v_cls);
        let (offsets, sizes) = self.box_regression_heads(g, b, features)?;
        Ok(HeadOutput {
            heatmap,
            v_obj: routed.v_obj,
            offsets,
            sizes,
            routed,
            features,
        })
    }

    /// Masks from instantiation capsules `[M, a_obj]`, giving `[M, n*n]` in (0, 1).
    pub fn reconstruct_mask(&self, g: &mut Graph, b: &Bound, capsules: Var) -> Result<Var> {
        let s = g.shape(capsules).to_vec();
        if s.len() != 2 || s[1] != self.cfg.obj_atoms {
            return Err(Error::InvalidShape {
                op: "reconstruct_mask",
                shape: s,
                reason: format!("expected [M, {}]", self.cfg.obj_atoms),
            });
        }
        let mut x = capsules;
        let last = self.ids.recon.len() - 1;
        for (i, layer) in self.ids.recon.iter().enumerate() {
            x = g.matmul(x, b.get(layer.weight))?;
            x = g.add(x, b.get(layer.bias))?;
            x = if i == last { g.sigmoid(x) } else { g.relu(x) };
        }
        Ok(x)
    }

    /// Reconstructions at `(batch, row, col)` grid cells of `v_obj`.
    pub fn reconstruct_at(
        &self,
        g: &mut Graph,
        b: &Bound,
        v_obj: Var,
        cells: &[(usize, usize, usize)],
    ) -> Result<Var> {
        let picked = g.gather_pixels(v_obj, cells)?;
        self.reconstruct_mask(g, b, picked)
    }
}
