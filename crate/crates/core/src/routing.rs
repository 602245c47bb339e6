//! Single-pass squeeze/excitation routing.
//!
//! At every location, the `N` child projections to the instantiation parent
//! (`u_obj`, `[B, N, A, H, W]`) and to the class-presence parent (`z`,
//! `[B, N, K, H, W]`) are summarised by three per-child descriptors:
//!
//! - `a`: cosine between each child's projection and the mean projection,
//! - `b`: KL divergence from the pooled class distribution to the child's,
//! - `c`: spread of the child's class distribution around `1/K`.
//!
//! `s = a ++ b ++ c` goes through a bias-free bottleneck
//! `r = sigmoid(W2 relu(W1 s))`, and one set of coefficients `r` weights the
//! children for both parents. There is no iteration.

use crate::error::{Error, Result};
use crate::numerics::{Conv2dSpec, Graph, Tensor, Var};

/// Norms below this give a neutral cosine agreement of zero.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// `sum_k (p_k - 1/K)^2`.
    #[default]
    MeanCentered,
    /// `sum_k (p_k - sum_k p_k)^2`, i.e. centred on 1.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RoutingMode {
    #[default]
    SqueezeExcite,
    /// Every child weighted `1/N`; descriptors and excitation are skipped.
    Uniform,
}

/// Descriptor graph nodes, each `[B, N, H, W]`; `s` is `[B, 3N, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SqueezeDescriptors {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub s: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RoutedParents {
    /// `[B, A, H, W]`
    pub v_obj: Var,
    /// `[B, K, H, W]`
    pub v_cls: Var,
    /// `[B, N, H, W]`
    pub r: Var,
}

fn expect_rank5(g: &Graph, v: Var, op: &'static str) -> Result<[usize; 5]> {
    let s = g.shape(v);
    if s.len() != 5 {
        return Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected [B, N, atoms, H, W]".into(),
        });
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Cosine agreement of every child projection with the mean projection.
pub fn squeeze_cosine(g: &mut Graph, u: Var) -> Result<Var> {
    let [bn, n, a, h, w] = expect_rank5(g, u, "squeeze_cosine")?;
    let l = h * w;
    let ud = g.value(u).data();
    let at = move |b: usize, i: usize, p: usize| ((b * n + i) * a + p) * l;

    let mut mean = vec![0.0; bn * a * l];
    for b in 0..bn {
        for i in 0..n {
            for p in 0..a {
                let (src, dst) = (at(b, i, p), (b * a + p) * l);
                for x in 0..l {
                    mean[dst + x] += ud[src + x];
                }
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut mean_norm = vec![0.0; bn * l];
    for b in 0..bn {
        for p in 0..a {
            for x in 0..l {
                let m = mean[(b * a + p) * l + x];
                mean_norm[b * l + x] += m * m;
            }
        }
    }
    mean_norm.iter_mut().for_each(|v| *v = v.sqrt());

    let mut dots = vec![0.0; bn * n * l];
    let mut norms = vec![0.0; bn * n * l];
    for b in 0..bn {
        for i in 0..n {
            for p in 0..a {
                let src = at(b, i, p);
                let mrow = (b * a + p) * l;
                let dst = (b * n + i) * l;
                for x in 0..l {
                    let v = ud[src + x];
                    dots[dst + x] += v * mean[mrow + x];
                    norms[dst + x] += v * v;
                }
            }
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());

    let mut out = vec![0.0; bn * n * l];
    for b in 0..bn {
        for i in 0..n {
            for x in 0..l {
                let (k, mn) = ((b * n + i) * l + x, mean_norm[b * l + x]);
                if mn >= COSINE_EPS && norms[k] >= COSINE_EPS {
                    out[k] = (dots[k] / (mn * norms[k])).clamp(-1.0, 1.0);
                }
            }
        }
    }
    let out = Tensor::new(&[bn, n, h, w], out)?;
    Ok(g.push(
        out,
        vec![u],
        Box::new(move |ctx| {
            let ud = ctx.inputs[0].data();
            let cosines = ctx.output.data();
            let gout = ctx.grad;
            let mut gu = vec![0.0; ud.len()];
            // Gradient reaching the mean vector, [B, A, L].
            let mut gmean = vec![0.0; bn * a * l];
            for b in 0..bn {
                for i in 0..n {
                    for p in 0..a {
                        let src = at(b, i, p);
                        let mrow = (b * a + p) * l;
                        for x in 0..l {
                            let k = (b * n + i) * l + x;
                            let (mn, ni) = (mean_norm[b * l + x], norms[k]);
                            if mn < COSINE_EPS || ni < COSINE_EPS || gout[k] == 0.0 {
                                continue;
                            }
                            let (gk, cos) = (gout[k], cosines[k]);
                            let (v, m) = (ud[src + x], mean[mrow + x]);
                            gu[src + x] += gk * (m / (mn * ni) - cos * v / (ni * ni));
                            gmean[mrow + x] += gk * (v / (mn * ni) - cos * m / (mn * mn));
                        }
                    }
                }
            }
            let inv_n = 1.0 / n as f64;
            for b in 0..bn {
                for i in 0..n {
                    for p in 0..a {
                        let src = at(b, i, p);
                        let mrow = (b * a + p) * l;
                        for x in 0..l {
                            gu[src + x] += gmean[mrow + x] * inv_n;
                        }
                    }
                }
            }
            vec![Some(gu)]
        }),
    ))
}

/// `b_i = sum_k p_k log(p_k / softmax(z_i)_k)` with `p` the mean of the
/// children's softmax distributions.
pub fn squeeze_kl(g: &mut Graph, z: Var) -> Result<Var> {
    let [_, _, k, _, _] = expect_rank5(g, z, "squeeze_kl")?;
    if k < 2 {
        return Err(Error::config("class projections need at least two classes"));
    }
    let probs = g.softmax(z, 2)?;
    let log_probs = g.log_softmax(z, 2)?;
    let pooled = g.mean_axis(probs, 1, true)?;
    let log_pooled = g.log(pooled);
    let diff = g.sub(log_pooled, log_probs)?;
    let terms = g.mul(pooled, diff)?;
    g.sum_axis(terms, 2, false)
}

/// Squared deviation of each child's class distribution from its centre.
pub fn squeeze_variance(g: &mut Graph, z: Var, mode: VarianceMode) -> Result<Var> {
    let [_, _, k, _, _] = expect_rank5(g, z, "squeeze_variance")?;
    if k < 2 {
        return Err(Error::config("class projections need at least two classes"));
    }
    let probs = g.softmax(z, 2)?;
    let centred = match mode {
        VarianceMode::MeanCentered => g.add_scalar(probs, -1.0 / k as f64),
        VarianceMode::Literal => {
            let total = g.sum_axis(probs, 2, true)?;
            g.sub(probs, total)?
        }
    };
    let sq = g.square(centred);
    g.sum_axis(sq, 2, false)
}

/// All three descriptors and their concatenation along the child axis.
pub fn squeeze(g: &mut Graph, u_obj: Var, z: Var, mode: VarianceMode) -> Result<SqueezeDescriptors> {
    let so = expect_rank5(g, u_obj, "squeeze")?;
    let sz = expect_rank5(g, z, "squeeze")?;
    if so[0] != sz[0] || so[1] != sz[1] || so[3..] != sz[3..] {
        return Err(Error::ShapeMismatch {
            op: "squeeze",
            lhs: so.to_vec(),
            rhs: sz.to_vec(),
        });
    }
    let a = squeeze_cosine(g, u_obj)?;
    let b = squeeze_kl(g, z)?;
    let c = squeeze_variance(g, z, mode)?;
    let s = g.concat(&[a, b, c], 1)?;
    Ok(SqueezeDescriptors { a, b, c, s })
}

/// `r = sigmoid(W2 relu(W1 s))` at every location; `s: [B, 3N, H, W]`,
/// `w1: [3N/t, 3N]`, `w2: [N, 3N/t]`.
pub fn excite(g: &mut Graph, s: Var, w1: Var, w2: Var) -> Result<Var> {
    let (ss, s1, s2) = (g.shape(s).to_vec(), g.shape(w1).to_vec(), g.shape(w2).to_vec());
    if ss.len() != 4 || s1.len() != 2 || s2.len() != 2 || s1[1] != ss[1] || s2[1] != s1[0] {
        return Err(Error::ShapeMismatch {
            op: "excite",
            lhs: ss,
            rhs: [s1, s2].concat(),
        });
    }
    let w1 = g.reshape(w1, &[s1[0], s1[1], 1, 1])?;
    let w2 = g.reshape(w2, &[s2[0], s2[1], 1, 1])?;
    let hidden = g.conv2d(s, w1, None, Conv2dSpec::same(1))?;
    let hidden = g.relu(hidden);
    let logits = g.conv2d(hidden, w2, None, Conv2dSpec::same(1))?;
    Ok(g.sigmoid(logits))
}

/// Coefficient-weighted sums over children for both parents.
pub fn route(g: &mut Graph, u_obj: Var, u_cls: Var, r: Var) -> Result<(Var, Var)> {
    let so = expect_rank5(g, u_obj, "route")?;
    let sc = expect_rank5(g, u_cls, "route")?;
    let sr = g.shape(r).to_vec();
    let expect_r = [so[0], so[1], so[3], so[4]];
    if sr != expect_r || sc[..2] != so[..2] || sc[3..] != so[3..] {
        return Err(Error::ShapeMismatch {
            op: "route",
            lhs: sr,
            rhs: expect_r.to_vec(),
        });
    }
    let r5 = g.reshape(r, &[so[0], so[1], 1, so[3], so[4]])?;
    let weighted_obj = g.mul(u_obj, r5)?;
    let weighted_cls = g.mul(u_cls, r5)?;
    let v_obj = g.sum_axis(weighted_obj, 1, false)?;
    let v_cls = g.sum_axis(weighted_cls, 1, false)?;
    Ok((v_obj, v_cls))
}

/// Full routing step. `excitation` holds `(W1, W2)` and is ignored in
/// uniform mode.
pub fn se_route(
    g: &mut Graph,
    u_obj: Var,
    u_cls: Var,
    excitation: (Var, Var),
    mode: RoutingMode,
    variance: VarianceMode,
) -> Result<RoutedParents> {
    let r = match mode {
        RoutingMode::SqueezeExcite => {
            let d = squeeze(g, u_obj, u_cls, variance)?;
            excite(g, d.s, excitation.0, excitation.1)?
        }
        RoutingMode::Uniform => {
            let [b, n, _, h, w] = expect_rank5(g, u_obj, "se_route")?;
            g.constant(Tensor::full(&[b, n, h, w], 1.0 / n as f64))
        }
    };
    let (v_obj, v_cls) = route(g, u_obj, u_cls, r)?;
    Ok(RoutedParents { v_obj, v_cls, r })
}
