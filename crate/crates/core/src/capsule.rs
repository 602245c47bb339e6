//! Child-to-parent capsule projection.
//!
//! Children form a grid `[N, c_i, a_i, H, W]`. Every parent type `j` has a
//! kernel slice `[a_j, c_i, a_i, k, k]`; each child type `i` is contracted
//! with its own part of that slice over a `k x k` window, and the
//! per-child results are kept apart (`[N, c_i, c_j, a_j, H', W']`) so that
//! routing can weigh them afterwards.
//!
//! The deformable variant reads the window taps at fractional positions
//! shifted by a learned `(dx, dy)` per parent type and tap, with bilinear
//! interpolation and zero padding outside the grid.

use crate::error::{Error, Result};
use crate::numerics::{gemm, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub child_types: usize,
    pub child_atoms: usize,
    pub parent_types: usize,
    pub parent_atoms: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.child_types,
            self.child_atoms,
            self.parent_types,
            self.parent_atoms,
            self.kernel,
            self.height,
            self.width,
            self.stride,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("capsule layer dims must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("capsule kernel must be odd, got {}", self.kernel)));
        }
        if self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by stride {}",
                self.height, self.width, self.stride
            )));
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> [usize; 6] {
        let k = self.kernel;
        [self.parent_types, self.parent_atoms, self.child_types, self.child_atoms, k, k]
    }

    pub fn offset_shape(&self) -> [usize; 4] {
        [self.parent_types, self.kernel, self.kernel, 2]
    }

    pub fn out_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn out_width(&self) -> usize {
        self.width / self.stride
    }
}

/// One image's capsules, `[types, atoms, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleGrid(Tensor);

impl CapsuleGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "capsule grid",
                shape: t.shape().to_vec(),
                reason: "expected [types, atoms, H, W]".into(),
            });
        }
        Ok(CapsuleGrid(t))
    }

    pub fn types(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn atoms(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn get(&self, ty: usize, atom: usize, row: isize, col: isize) -> f64 {
        if row < 0 || col < 0 || row as usize >= self.height() || col as usize >= self.width() {
            return 0.0;
        }
        self.0.at(&[ty, atom, row as usize, col as usize])
    }
}

/// Bilinear read of one atom at fractional `(x = column, y = row)`; zero
/// outside the grid.
pub fn bilinear_sample(grid: &CapsuleGrid, x: f64, y: f64, ty: usize, atom: usize) -> f64 {
    bilinear_sample_grad(grid, x, y, ty, atom).value
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearSample {
    pub value: f64,
    pub d_x: f64,
    pub d_y: f64,
}

/// Value and partial derivatives with respect to the sample position. At
/// integer coordinates the derivative is the right-sided one.
pub fn bilinear_sample_grad(grid: &CapsuleGrid, x: f64, y: f64, ty: usize, atom: usize) -> BilinearSample {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (c0, r0) = (x0 as isize, y0 as isize);
    let v00 = grid.get(ty, atom, r0, c0);
    let v01 = grid.get(ty, atom, r0, c0 + 1);
    let v10 = grid.get(ty, atom, r0 + 1, c0);
    let v11 = grid.get(ty, atom, r0 + 1, c0 + 1);
    BilinearSample {
        value: (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11),
        d_x: (1.0 - fy) * (v01 - v00) + fy * (v11 - v10),
        d_y: (1.0 - fx) * (v10 - v00) + fx * (v11 - v01),
    }
}

/// Where one kernel tap of one parent type reads: integer base shift plus
/// the fractional part shared by every location.
#[derive(Clone, Copy, Debug)]
struct Tap {
    dx: isize,
    dy: isize,
    fx: f64,
    fy: f64,
}

struct Dims {
    n: usize,
    ci: usize,
    ai: usize,
    cj: usize,
    aj: usize,
    k: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Dims {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Rows of the sampled matrix owned by one child type.
    fn child_rows(&self) -> usize {
        self.ai * self.taps()
    }

    fn loc(&self) -> usize {
        self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.n * self.loc()
    }
}

fn dims_of(children: &[usize], kernel: &[usize], cfg: &LayerConfig) -> Result<Dims> {
    cfg.validate()?;
    let expect_children = [cfg.child_types, cfg.child_atoms, cfg.height, cfg.width];
    if children.len() != 5 || children[1..] != expect_children {
        return Err(Error::ShapeMismatch {
            op: "capsule projection (children)",
            lhs: children.to_vec(),
            rhs: expect_children.to_vec(),
        });
    }
    if kernel != cfg.kernel_shape() {
        return Err(Error::ShapeMismatch {
            op: "capsule projection (kernel)",
            lhs: kernel.to_vec(),
            rhs: cfg.kernel_shape().to_vec(),
        });
    }
    Ok(Dims {
        n: children[0],
        ci: cfg.child_types,
        ai: cfg.child_atoms,
        cj: cfg.parent_types,
        aj: cfg.parent_atoms,
        k: cfg.kernel,
        h: cfg.height,
        w: cfg.width,
        ho: cfg.out_height(),
        wo: cfg.out_width(),
        stride: cfg.stride,
    })
}

fn taps_for(d: &Dims, offsets: Option<&[f64]>, parent: usize) -> Vec<Tap> {
    let pad = (d.k / 2) as isize;
    let mut taps = Vec::with_capacity(d.taps());
    for tv in 0..d.k {
        for tu in 0..d.k {
            let (ox, oy) = match offsets {
                Some(o) => {
                    let base = ((parent * d.k + tv) * d.k + tu) * 2;
                    (o[base], o[base + 1])
                }
                None => (0.0, 0.0),
            };
            let (flx, fly) = (ox.floor(), oy.floor());
            // Beyond this reach every corner is outside the grid anyway.
            let reach = (d.h + d.w + d.k + 2) as f64;
            taps.push(Tap {
                dx: tu as isize - pad + flx.clamp(-reach, reach) as isize,
                dy: tv as isize - pad + fly.clamp(-reach, reach) as isize,
                fx: ox - flx,
                fy: oy - fly,
            });
        }
    }
    taps
}

/// Visits every (sampled-matrix index, child plane, location) with the four
/// bilinear corners that feed it. `f(s_index, [(x_index, weight); 4], (v, fx, fy))`.
fn for_each_sample(d: &Dims, taps: &[Tap], mut f: impl FnMut(usize, &[(Option<usize>, f64); 4], (f64, f64))) {
    let (cols, loc) = (d.cols(), d.loc());
    for i in 0..d.ci {
        for m in 0..d.ai {
            for (t, tap) in taps.iter().enumerate() {
                let row = (i * d.ai + m) * d.taps() + t;
                let w = [
                    (1.0 - tap.fy) * (1.0 - tap.fx),
                    (1.0 - tap.fy) * tap.fx,
                    tap.fy * (1.0 - tap.fx),
                    tap.fy * tap.fx,
                ];
                for b in 0..d.n {
                    let plane = ((b * d.ci + i) * d.ai + m) * d.h * d.w;
                    for oy in 0..d.ho {
                        let r0 = (oy * d.stride) as isize + tap.dy;
                        for ox in 0..d.wo {
                            let c0 = (ox * d.stride) as isize + tap.dx;
                            let at = |r: isize, c: isize| {
                                (r >= 0 && c >= 0 && (r as usize) < d.h && (c as usize) < d.w)
                                    .then(|| plane + r as usize * d.w + c as usize)
                            };
                            let corners = [
                                (at(r0, c0), w[0]),
                                (at(r0, c0 + 1), w[1]),
                                (at(r0 + 1, c0), w[2]),
                                (at(r0 + 1, c0 + 1), w[3]),
                            ];
                            f(row * cols + b * loc + oy * d.wo + ox, &corners, (tap.fx, tap.fy));
                        }
                    }
                }
            }
        }
    }
}

fn sample_matrix(d: &Dims, taps: &[Tap], x: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; d.ci * d.child_rows() * d.cols()];
    let read = |c: &(Option<usize>, f64)| c.0.map_or(0.0, |i| x[i]);
    for_each_sample(d, taps, |si, corners, _| {
        // Exact integer taps skip interpolation so that zero offsets
        // reproduce the fixed-grid projection bit for bit.
        s[si] = if corners[0].1 == 1.0 {
            read(&corners[0])
        } else {
            corners.iter().map(|c| c.1 * read(c)).sum()
        };
    });
    s
}

/// `out[n, i, j] (=) W[j, :, i] . S[i, n]` for one parent type.
fn contract(d: &Dims, j: usize, kernel: &[f64], s: &[f64], out: &mut [f64]) {
    let (rows, cols, loc) = (d.child_rows(), d.cols(), d.loc());
    for i in 0..d.ci {
        let a_off = j * d.aj * d.ci * rows + i * rows;
        for b in 0..d.n {
            let c_off = ((b * d.ci + i) * d.cj + j) * d.aj * loc;
            gemm(
                d.aj,
                rows,
                loc,
                &kernel[a_off..],
                (d.ci * rows, 1),
                &s[i * rows * cols + b * loc..],
                (cols, 1),
                &mut out[c_off..],
                (loc, 1),
                false,
            );
        }
    }
}

/// Projection with kernel taps on the fixed integer grid.
pub fn conv_capsule_project(g: &mut Graph, children: Var, kernel: Var, cfg: &LayerConfig) -> Result<Var> {
    project(g, children, kernel, None, cfg)
}

/// Projection with kernel taps displaced by learned offsets `[c_j, k, k, 2]`
/// (`(dx, dy)` per parent type and tap, in grid cells).
pub fn deform_capsule_project(
    g: &mut Graph,
    children: Var,
    kernel: Var,
    offsets: Var,
    cfg: &LayerConfig,
) -> Result<Var> {
    if g.shape(offsets) != cfg.offset_shape() {
        return Err(Error::ShapeMismatch {
            op: "capsule projection (offsets)",
            lhs: g.shape(offsets).to_vec(),
            rhs: cfg.offset_shape().to_vec(),
        });
    }
    project(g, children, kernel, Some(offsets), cfg)
}

fn project(g: &mut Graph, children: Var, kernel: Var, offsets: Option<Var>, cfg: &LayerConfig) -> Result<Var> {
    let d = dims_of(g.shape(children), g.shape(kernel), cfg)?;
    let x = g.value(children).data();
    let wk = g.value(kernel).data();
    let off = offsets.map(|o| g.value(o).data().to_vec());

    let mut out = vec![0.0; d.n * d.ci * d.cj * d.aj * d.loc()];
    let mut samples = Vec::with_capacity(d.cj);
    match &off {
        None => {
            let taps = taps_for(&d, None, 0);
            let s = sample_matrix(&d, &taps, x);
            for j in 0..d.cj {
                contract(&d, j, wk, &s, &mut out);
            }
            samples.push((taps, s));
        }
        Some(o) => {
            for j in 0..d.cj {
                let taps = taps_for(&d, Some(o), j);
                let s = sample_matrix(&d, &taps, x);
                contract(&d, j, wk, &s, &mut out);
                samples.push((taps, s));
            }
        }
    }
    let out = Tensor::new(&[d.n, d.ci, d.cj, d.aj, d.ho, d.wo], out)?;

    let mut inputs = vec![children, kernel];
    inputs.extend(offsets);
    Ok(g.push(
        out,
        inputs,
        Box::new(move |ctx| {
            let grad = ctx.grad;
            let x = ctx.inputs[0].data();
            let wk = ctx.inputs[1].data();
            let (rows, cols, loc) = (d.child_rows(), d.cols(), d.loc());
            let need_x = ctx.needs[0];
            let need_off = ctx.needs.get(2).copied().unwrap_or(false);

            let mut gw = ctx.needs[1].then(|| vec![0.0; wk.len()]);
            let mut gx = need_x.then(|| vec![0.0; x.len()]);
            let mut goff = need_off.then(|| vec![0.0; d.cj * d.taps() * 2]);

            let mut ds = (need_x || need_off).then(|| vec![0.0; d.ci * rows * cols]);
            for j in 0..d.cj {
                let (taps, s) = if samples.len() == 1 { &samples[0] } else { &samples[j] };
                if let Some(ds) = ds.as_mut() {
                    if samples.len() > 1 || j == 0 {
                        ds.fill(0.0);
                    }
                }
                for i in 0..d.ci {
                    let w_off = j * d.aj * d.ci * rows + i * rows;
                    for b in 0..d.n {
                        let g_off = ((b * d.ci + i) * d.cj + j) * d.aj * loc;
                        if let Some(gw) = gw.as_mut() {
                            gemm(
                                d.aj,
                                loc,
                                rows,
                                &grad[g_off..],
                                (loc, 1),
                                &s[i * rows * cols + b * loc..],
                                (1, cols),
                                &mut gw[w_off..],
                                (d.ci * rows, 1),
                                true,
                            );
                        }
                        if let Some(ds) = ds.as_mut() {
                            gemm(
                                rows,
                                d.aj,
                                loc,
                                &wk[w_off..],
                                (1, d.ci * rows),
                                &grad[g_off..],
                                (loc, 1),
                                &mut ds[i * rows * cols + b * loc..],
                                (cols, 1),
                                true,
                            );
                        }
                    }
                }
                // With a shared sample matrix, scatter once after all parents.
                let last_shared = samples.len() == 1 && j + 1 == d.cj;
                if let (Some(ds), true) = (ds.as_ref(), samples.len() > 1 || last_shared) {
                    scatter_samples(&d, taps, x, ds, gx.as_mut(), goff.as_mut().map(|g| &mut g[j * d.taps() * 2..(j + 1) * d.taps() * 2]));
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(goff);
            }
            grads
        }),
    ))
}

/// Pushes sampled-matrix gradients back to children and to this parent's
/// tap offsets (`goff` is `[k*k, 2]`).
fn scatter_samples(
    d: &Dims,
    taps: &[Tap],
    x: &[f64],
    ds: &[f64],
    mut gx: Option<&mut Vec<f64>>,
    mut goff: Option<&mut [f64]>,
) {
    let (cols, ntaps) = (d.cols(), d.taps());
    let read = |c: &(Option<usize>, f64)| c.0.map_or(0.0, |i| x[i]);
    for_each_sample(d, taps, |si, corners, (fx, fy)| {
        let g = ds[si];
        if g == 0.0 {
            return;
        }
        if let Some(gx) = gx.as_deref_mut() {
            for c in corners {
                if let Some(xi) = c.0 {
                    gx[xi] += g * c.1;
                }
            }
        }
        if let Some(goff) = goff.as_deref_mut() {
            let t = (si / cols) % ntaps;
            let [v00, v01, v10, v11] = [read(&corners[0]), read(&corners[1]), read(&corners[2]), read(&corners[3])];
            goff[t * 2] += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            goff[t * 2 + 1] += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
    });
}

/// Layer variants whose size is evaluated by [`param_count`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    FullyConnected,
    ConvCaps,
    DeformCaps,
    SplitCapsDetect,
    SplitCapsImagenet,
}

impl std::str::FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fully_connected" | "fully-connected" => CountMode::FullyConnected,
            "conv_caps" | "conv-caps" => CountMode::ConvCaps,
            "deform_caps" | "deform-caps" => CountMode::DeformCaps,
            "splitcaps_detect" | "splitcaps-detect" => CountMode::SplitCapsDetect,
            "splitcaps_imagenet" | "splitcaps-imagenet" => CountMode::SplitCapsImagenet,
            other => return Err(Error::config(format!("unknown count mode {other:?}"))),
        })
    }
}

/// Inputs to the size arithmetic; unset fields are reported when a mode needs them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CountConfig {
    pub child_types: Option<u64>,
    pub child_atoms: Option<u64>,
    pub parent_types: Option<u64>,
    pub parent_atoms: Option<u64>,
    pub kernel: Option<u64>,
    pub height: Option<u64>,
    pub width: Option<u64>,
    pub batch: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub parameters: u64,
    /// 4-byte storage for the per-child parent projections awaiting routing.
    pub intermediate_bytes: u64,
}

fn need(v: Option<u64>, field: &str, mode: CountMode) -> Result<u64> {
    v.ok_or_else(|| Error::config(format!("{mode:?} needs field `{field}`")))
}

/// Parameter and intermediate-memory arithmetic for one capsule layer.
pub fn param_count(mode: CountMode, cfg: &CountConfig) -> Result<ParamCount> {
    let ai = need(cfg.child_atoms, "child_atoms", mode)?;
    let cj = need(cfg.parent_types, "parent_types", mode)?;
    let aj = need(cfg.parent_atoms, "parent_atoms", mode)?;
    let ci = need(cfg.child_types, "child_types", mode)?;
    let batch = need(cfg.batch, "batch", mode)?;
    let kernel = || need(cfg.kernel, "kernel", mode);
    let grid = || Ok::<_, Error>(need(cfg.height, "height", mode)? * need(cfg.width, "width", mode)?);
    let parameters = match mode {
        CountMode::FullyConnected => grid()? * ci * ai * cj * aj,
        CountMode::ConvCaps => kernel()?.pow(2) * ai * cj * aj,
        CountMode::DeformCaps | CountMode::SplitCapsDetect | CountMode::SplitCapsImagenet => {
            2 * kernel()?.pow(2) * ai * cj * aj
        }
    };
    let locations = if mode == CountMode::SplitCapsDetect { grid()? } else { 1 };
    Ok(ParamCount {
        parameters,
        intermediate_bytes: batch * locations * ci * cj * aj * 4,
    })
}

/// A worked sizing example with the published figures it should reproduce.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub label: &'static str,
    pub mode: CountMode,
    pub config: CountConfig,
    pub published_parameters: u64,
    pub published_bytes: Option<f64>,
}

/// The five sizing examples: 128x128 grid, 32 child types of 8 atoms,
/// batch 32, 5x5 kernels.
pub fn reference_scenarios() -> Vec<Scenario> {
    let base = CountConfig {
        child_types: Some(32),
        child_atoms: Some(8),
        parent_types: Some(10),
        parent_atoms: Some(16),
        kernel: Some(5),
        height: Some(128),
        width: Some(128),
        batch: Some(32),
    };
    let classes = |c| CountConfig {
        parent_types: Some(c),
        ..base
    };
    vec![
        Scenario {
            label: "fully-connected capsules, 10 classes",
            mode: CountMode::FullyConnected,
            config: base,
            published_parameters: 671_088_640,
            published_bytes: None,
        },
        Scenario {
            label: "deformable capsules, 10 classes",
            mode: CountMode::DeformCaps,
            config: base,
            published_parameters: 64_000,
            published_bytes: Some(655e3),
        },
        Scenario {
            label: "convolutional capsules, 10 classes",
            mode: CountMode::ConvCaps,
            config: base,
            published_parameters: 32_000,
            published_bytes: None,
        },
        Scenario {
            label: "deformable capsules, detection, 80 classes",
            mode: CountMode::SplitCapsDetect,
            config: classes(80),
            published_parameters: 512_000,
            published_bytes: Some(86e9),
        },
        Scenario {
            label: "deformable capsules, classification, 1000 classes",
            mode: CountMode::SplitCapsImagenet,
            config: classes(1000),
            published_parameters: 6_400_000,
            published_bytes: Some(66e9),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded};

    fn cfg(ci: usize, ai: usize, cj: usize, aj: usize, k: usize, h: usize, w: usize) -> LayerConfig {
        LayerConfig {
            child_types: ci,
            child_atoms: ai,
            parent_types: cj,
            parent_atoms: aj,
            kernel: k,
            height: h,
            width: w,
            stride: 1,
        }
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let grid = CapsuleGrid::new(Tensor::from_fn(&[1, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64 + 0.5)).unwrap();
        assert_eq!(bilinear_sample(&grid, 2.0, 1.0, 0, 0), 5.5);
        let mid = bilinear_sample(&grid, 0.5, 0.5, 0, 0);
        assert!((mid - (0.5 + 1.5 + 3.5 + 4.5) / 4.0).abs() < 1e-15);
        // Zero padding outside.
        assert_eq!(bilinear_sample(&grid, -1.0, 0.0, 0, 0), 0.0);
        assert_eq!(bilinear_sample(&grid, 2.5, 0.0, 0, 0), 0.5 * 2.5);
    }

    #[test]
    fn bilinear_position_gradient_matches_differences() {
        let mut rng = seeded(11);
        let grid = CapsuleGrid::new(Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng)).unwrap();
        let (x, y, h) = (2.37, 1.61, 1e-6);
        let s = bilinear_sample_grad(&grid, x, y, 1, 2);
        let dx = (bilinear_sample(&grid, x + h, y, 1, 2) - bilinear_sample(&grid, x - h, y, 1, 2)) / (2.0 * h);
        let dy = (bilinear_sample(&grid, x, y + h, 1, 2) - bilinear_sample(&grid, x, y - h, 1, 2)) / (2.0 * h);
        assert!((s.d_x - dx).abs() < 1e-5);
        assert!((s.d_y - dy).abs() < 1e-5);
    }

    #[test]
    fn zero_kernel_gives_zero_projection() {
        let c = cfg(2, 3, 2, 4, 3, 4, 4);
        let mut rng = seeded(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[1, 2, 3, 4, 4], -1.0, 1.0, &mut rng));
        let w = g.constant(Tensor::zeros(&c.kernel_shape()));
        let y = conv_capsule_project(&mut g, x, w, &c).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 4, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_identity_copies_children() {
        let c = cfg(3, 4, 1, 4, 1, 3, 5);
        let mut rng = seeded(2);
        let xs = Tensor::uniform(&[1, 3, 4, 3, 5], -1.0, 1.0, &mut rng);
        let kernel = Tensor::from_fn(&c.kernel_shape(), |i| (i[1] == i[3]) as u8 as f64);
        let mut g = Graph::new();
        let (x, w) = (g.constant(xs.clone()), g.constant(kernel));
        let y = conv_capsule_project(&mut g, x, w, &c).unwrap();
        let out = g.value(y);
        for i in 0..3 {
            for m in 0..4 {
                for r in 0..3 {
                    for col in 0..5 {
                        assert_eq!(out.at(&[0, i, 0, m, r, col]), xs.at(&[0, i, m, r, col]));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let c = cfg(2, 3, 1, 2, 3, 4, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 4, 5]));
        let w = g.constant(Tensor::zeros(&c.kernel_shape()));
        assert!(conv_capsule_project(&mut g, x, w, &c).is_err());
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let off = g.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(deform_capsule_project(&mut g, x, w, off, &c).is_err());
        assert!(LayerConfig { kernel: 2, ..c }.validate().is_err());
    }

    #[test]
    fn offset_gradient_passes_check() {
        let c = LayerConfig { stride: 2, ..cfg(2, 2, 2, 3, 3, 6, 6) };
        let mut rng = seeded(5);
        let xs = Tensor::uniform(&[2, 2, 2, 6, 6], -2.0, 2.0, &mut rng);
        let ws = Tensor::uniform(&c.kernel_shape(), -2.0, 2.0, &mut rng);
        let probe = Tensor::uniform(&[2, 2, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let off = Tensor::uniform(&c.offset_shape(), -1.4, 1.4, &mut rng);
        let r = grad_check(
            |g, o| {
                let x = g.constant(xs.clone());
                let w = g.constant(ws.clone());
                let p = g.constant(probe.clone());
                let y = deform_capsule_project(g, x, w, o, &c)?;
                let y = g.mul(y, p)?;
                Ok(g.sum_all(y))
            },
            &off,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn count_needs_fields() {
        let err = param_count(CountMode::ConvCaps, &CountConfig::default()).unwrap_err();
        assert!(err.to_string().contains("child_atoms"));
    }
}
