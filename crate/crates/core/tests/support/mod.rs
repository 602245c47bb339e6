//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use deformcaps::capsule::{conv_capsule_project, deform_capsule_project, LayerConfig};
use deformcaps::data::{DatasetSpec, Sample};
use deformcaps::geometry::GridSpec;
use deformcaps::head::{Detector, HeadConfig};
use deformcaps::losses::{dice_loss, focal_heatmap_loss, masked_l1_loss, PROB_EPS};
use deformcaps::numerics::{grad_check_at, seeded, Graph, Rng, Tensor, Var};
use deformcaps::pipeline::RunConfig;
use deformcaps::routing::{excite, route, squeeze_cosine, squeeze_kl, squeeze_variance, VarianceMode};
use deformcaps::Result;
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Coordinates checked per tensor; everything when the tensor is smaller.
pub const COORDS_PER_CASE: usize = 24;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// `sum(y * probe)` for a fixed random probe, so every output entry gets an
/// O(1) weight.
pub fn probe_sum(g: &mut Graph, y: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum_all(m))
}

fn coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all.truncate(COORDS_PER_CASE);
    all.sort_unstable();
    all
}

/// Runs `f` through a gradient check at `x` on a random subset of coordinates.
pub fn check<F>(f: F, x: &Tensor, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let c = coords(x.len(), rng);
    Ok(grad_check_at(f, x, GRAD_STEP, &c)?.max_rel_error)
}

fn small_layer(rng: &mut Rng) -> LayerConfig {
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..=2);
    let side = stride * rng.gen_range(2..=4);
    LayerConfig {
        child_types: rng.gen_range(1..=3),
        child_atoms: rng.gen_range(1..=3),
        parent_types: rng.gen_range(1..=2),
        parent_atoms: rng.gen_range(1..=3),
        kernel: k,
        height: side,
        width: side,
        stride,
    }
}

pub fn small_head() -> HeadConfig {
    HeadConfig {
        image_height: 16,
        image_width: 16,
        backbone_widths: [3, 4],
        child_types: 4,
        child_atoms: 2,
        kernel: 3,
        obj_atoms: 4,
        classes: 3,
        reduction: 3,
        recon_side: 3,
        recon_hidden: 5,
        box_hidden: 3,
        size_bias_init: 0.0,
        ..HeadConfig::default()
    }
}

/// Gradient checks over every differentiable component for one seed.
/// Returns `(case, max relative error)`.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();

    // Capsule projections.
    let c = small_layer(&mut rng);
    let (ho, wo) = (c.out_height(), c.out_width());
    let xs = rand_tensor(&[2, c.child_types, c.child_atoms, c.height, c.width], -1.0, 1.0, &mut rng);
    let ws = rand_tensor(&c.kernel_shape(), -1.0, 1.0, &mut rng);
    let off = rand_tensor(&c.offset_shape(), -1.3, 1.3, &mut rng);
    let probe = rand_tensor(&[2, c.child_types, c.parent_types, c.parent_atoms, ho, wo], -1.0, 1.0, &mut rng);
    out.push((
        "projection kernel".into(),
        check(
            |g, w| {
                let x = g.constant(xs.clone());
                let o = g.constant(off.clone());
                let y = deform_capsule_project(g, x, w, o, &c)?;
                probe_sum(g, y, &probe)
            },
            &ws,
            &mut rng,
        )?,
    ));
    out.push((
        "projection children".into(),
        check(
            |g, x| {
                let w = g.constant(ws.clone());
                let o = g.constant(off.clone());
                let y = deform_capsule_project(g, x, w, o, &c)?;
                probe_sum(g, y, &probe)
            },
            &xs,
            &mut rng,
        )?,
    ));
    out.push((
        "projection offsets (bilinear)".into(),
        check(
            |g, o| {
                let x = g.constant(xs.clone());
                let w = g.constant(ws.clone());
                let y = deform_capsule_project(g, x, w, o, &c)?;
                probe_sum(g, y, &probe)
            },
            &off,
            &mut rng,
        )?,
    ));
    out.push((
        "conv capsule kernel".into(),
        check(
            |g, w| {
                let x = g.constant(xs.clone());
                let y = conv_capsule_project(g, x, w, &c)?;
                probe_sum(g, y, &probe)
            },
            &ws,
            &mut rng,
        )?,
    ));

    // Squeeze descriptors, excitation and routing.
    let (b, n, a, k, h, w) = (2, 3, 4, 3, 2, 2);
    let u_obj = rand_tensor(&[b, n, a, h, w], -1.0, 1.0, &mut rng);
    let u_cls = rand_tensor(&[b, n, k, h, w], -2.0, 2.0, &mut rng);
    let desc_probe = rand_tensor(&[b, n, h, w], -1.0, 1.0, &mut rng);
    out.push((
        "squeeze cosine".into(),
        check(
            |g, u| {
                let y = squeeze_cosine(g, u)?;
                probe_sum(g, y, &desc_probe)
            },
            &u_obj,
            &mut rng,
        )?,
    ));
    out.push((
        "squeeze kl".into(),
        check(
            |g, z| {
                let y = squeeze_kl(g, z)?;
                probe_sum(g, y, &desc_probe)
            },
            &u_cls,
            &mut rng,
        )?,
    ));
    for mode in [VarianceMode::MeanCentered, VarianceMode::Literal] {
        out.push((
            format!("squeeze variance {mode:?}"),
            check(
                |g, z| {
                    let y = squeeze_variance(g, z, mode)?;
                    probe_sum(g, y, &desc_probe)
                },
                &u_cls,
                &mut rng,
            )?,
        ));
    }
    let hidden = 2;
    let s = rand_tensor(&[b, 3 * n, h, w], -1.0, 1.0, &mut rng);
    let w1 = rand_tensor(&[hidden, 3 * n], -1.0, 1.0, &mut rng);
    let w2 = rand_tensor(&[n, hidden], -1.0, 1.0, &mut rng);
    out.push((
        "excitation w1".into(),
        check(
            |g, w1v| {
                let sv = g.constant(s.clone());
                let w2v = g.constant(w2.clone());
                let r = excite(g, sv, w1v, w2v)?;
                probe_sum(g, r, &desc_probe)
            },
            &w1,
            &mut rng,
        )?,
    ));
    out.push((
        "excitation w2".into(),
        check(
            |g, w2v| {
                let sv = g.constant(s.clone());
                let w1v = g.constant(w1.clone());
                let r = excite(g, sv, w1v, w2v)?;
                probe_sum(g, r, &desc_probe)
            },
            &w2,
            &mut rng,
        )?,
    ));
    let r = rand_tensor(&[b, n, h, w], 0.05, 0.95, &mut rng);
    let v_probe = rand_tensor(&[b, a, h, w], -1.0, 1.0, &mut rng);
    out.push((
        "route coefficients".into(),
        check(
            |g, rv| {
                let (uo, uc) = (g.constant(u_obj.clone()), g.constant(u_cls.clone()));
                let (v_obj, _) = route(g, uo, uc, rv)?;
                probe_sum(g, v_obj, &v_probe)
            },
            &r,
            &mut rng,
        )?,
    ));

    // Losses with respect to predictions, away from the clamp.
    let heat_t = {
        let mut t = rand_tensor(&[2, 3, 4, 4], 0.0, 0.8, &mut rng);
        t.set(&[0, 1, 2, 2], 1.0);
        t.set(&[1, 0, 0, 3], 1.0);
        t
    };
    let heat_p = rand_tensor(&[2, 3, 4, 4], 0.05, 0.95, &mut rng);
    out.push((
        "focal loss".into(),
        check(|g, p| focal_heatmap_loss(g, p, &heat_t, 2.0, 4.0, 2), &heat_p, &mut rng)?,
    ));
    assert!(heat_p.data().iter().all(|&v| v > PROB_EPS));
    let mask_t = Tensor::from_fn(&[3, 16], |i| ((i[0] + i[1]) % 3 == 0) as u8 as f64);
    let mask_p = rand_tensor(&[3, 16], 0.05, 0.95, &mut rng);
    out.push(("dice loss".into(), check(|g, p| dice_loss(g, p, &mask_t), &mask_p, &mut rng)?));
    let reg_mask = Tensor::from_fn(&[2, 4, 4], |i| ((i[1] * 4 + i[2] + i[0]) % 5 == 0) as u8 as f64);
    let off_t = rand_tensor(&[2, 2, 4, 4], 0.0, 1.0, &mut rng);
    let off_p = rand_tensor(&[2, 2, 4, 4], 0.0, 1.0, &mut rng);
    out.push((
        "offset loss".into(),
        check(|g, p| masked_l1_loss(g, p, &off_t, &reg_mask), &off_p, &mut rng)?,
    ));
    let size_t = rand_tensor(&[2, 2, 4, 4], 4.0, 30.0, &mut rng);
    let size_p = rand_tensor(&[2, 2, 4, 4], 4.0, 30.0, &mut rng);
    out.push((
        "size loss".into(),
        check(|g, p| masked_l1_loss(g, p, &size_t, &reg_mask), &size_p, &mut rng)?,
    ));

    // Every detector parameter through the full forward pass.
    out.extend(head_suite(&mut rng)?);
    Ok(out)
}

/// Gradient of a probe over all head outputs with respect to each named
/// parameter.
fn head_suite(rng: &mut Rng) -> Result<Vec<(String, f64)>> {
    let cfg = small_head();
    let mut det = Detector::new(cfg.clone(), rng)?;
    // Non-zero offsets so bilinear sampling is exercised.
    for name in ["caps.obj.offsets", "caps.cls.offsets"] {
        let id = det.params().id(name).expect("offsets registered");
        let shape = det.params().get(id).value.shape().to_vec();
        det.params_mut().get_mut(id).value = rand_tensor(&shape, -0.8, 0.8, rng);
    }
    // Zero biases behind a dead channel would put pre-activations exactly on
    // the ReLU kink.
    let biases: Vec<String> = det.params().iter().filter(|p| p.name.ends_with("bias")).map(|p| p.name.clone()).collect();
    for name in biases {
        let id = det.params().id(&name).expect("bias registered");
        let shape = det.params().get(id).value.shape().to_vec();
        det.params_mut().get_mut(id).value = rand_tensor(&shape, -0.3, 0.3, rng);
    }
    let images = rand_tensor(&[2, 3, 16, 16], 0.0, 1.0, rng);
    let (hh, ww) = (cfg.grid_height(), cfg.grid_width());
    let probes = [
        rand_tensor(&[2, cfg.classes, hh, ww], -1.0, 1.0, rng),
        rand_tensor(&[2, cfg.obj_atoms, hh, ww], -1.0, 1.0, rng),
        rand_tensor(&[2, 2, hh, ww], -1.0, 1.0, rng),
        rand_tensor(&[2, 2, hh, ww], -1.0, 1.0, rng),
        rand_tensor(&[3, cfg.recon_side * cfg.recon_side], -1.0, 1.0, rng),
    ];
    let cells = [(0, 1, 2), (1, 3, 0), (1, 2, 2)];
    let mut out = Vec::new();
    for p in det.params().iter() {
        let id = det.params().id(&p.name).expect("own name");
        let err = check(
            |g, x| {
                let mut bound = det.params().bind_frozen(g);
                bound.replace(id, x);
                let img = g.constant(images.clone());
                let o = det.forward(g, &bound, img)?;
                let recon = det.reconstruct_at(g, &bound, o.v_obj, &cells)?;
                let mut total = probe_sum(g, o.heatmap, &probes[0])?;
                for (v, pr) in [(o.v_obj, &probes[1]), (o.offsets, &probes[2]), (o.sizes, &probes[3]), (recon, &probes[4])] {
                    let t = probe_sum(g, v, pr)?;
                    total = g.add(total, t)?;
                }
                Ok(total)
            },
            &p.value,
            rng,
        )?;
        out.push((format!("head {}", p.name), err));
    }
    Ok(out)
}

/// Brute-force 3x3 peak oracle with zero padding.
pub fn brute_force_peaks(heat: &Tensor, threshold: f64) -> Vec<(usize, usize, usize)> {
    let s = heat.shape();
    let (k, rows, cols) = (s[0], s[1] as isize, s[2] as isize);
    let mut out = Vec::new();
    for c in 0..k {
        for y in 0..rows {
            for x in 0..cols {
                let v = heat.at(&[c, y as usize, x as usize]);
                if v < threshold {
                    continue;
                }
                let mut is_max = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        let n = if ny < 0 || nx < 0 || ny >= rows || nx >= cols {
                            0.0
                        } else {
                            heat.at(&[c, ny as usize, nx as usize])
                        };
                        if n > v {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    out.push((c, y as usize, x as usize));
                }
            }
        }
    }
    out
}

pub fn desk_grid() -> GridSpec {
    GridSpec {
        classes: 3,
        height: 64,
        width: 64,
        downsample: 4,
    }
}

/// Synthetic samples whose object centers are at least `min_cells` grid
/// cells apart in Chebyshev distance.
pub fn well_separated(seed: u64, count: usize, min_cells: f64) -> Vec<Sample> {
    let spec = DatasetSpec::synthetic(seed, usize::MAX);
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < count {
        let s = deformcaps::data::synthetic_sample(&spec, i);
        i += 1;
        let ok = s.boxes.iter().enumerate().all(|(a, ba)| {
            s.boxes.iter().skip(a + 1).all(|bb| {
                let (ca, cb) = (ba.center(), bb.center());
                let d = ((ca.0 - cb.0).abs()).max((ca.1 - cb.1).abs()) / 4.0;
                d >= min_cells
            })
        });
        if ok {
            out.push(s);
        }
    }
    out
}

/// Desk configuration shrunk to 24 images and a narrow head.
pub fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.dataset.size = 24;
    cfg.epochs = 2;
    cfg.lr_drops = vec![1];
    cfg.log_interval = 1;
    cfg.head.backbone_widths = [8, 16];
    cfg.head.child_types = 4;
    cfg.head.child_atoms = 4;
    cfg.head.obj_atoms = 16;
    cfg.head.recon_hidden = 32;
    cfg.head.box_hidden = 8;
    cfg.head.reduction = 3;
    cfg
}
