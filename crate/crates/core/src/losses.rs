//! Training objectives: penalty-reduced focal loss on the heatmap, Dice
//! loss on reconstructed masks, masked L1 on offsets and sizes, and their
//! weighted sum with a step schedule on the reconstruction weight.

use log::debug;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probability clamp keeping the logs finite.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_r_initial: f64,
    pub lambda_r_final: f64,
    /// Fraction of training after which the final reconstruction weight applies.
    pub lambda_r_switch: f64,
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r_initial: 0.1,
            lambda_r_final: 2.0,
            lambda_r_switch: 0.5,
            lambda_s: 0.1,
            lambda_o: 1.0,
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

impl LossWeights {
    pub fn lambda_r(&self, progress: f64) -> f64 {
        if progress < self.lambda_r_switch {
            self.lambda_r_initial
        } else {
            self.lambda_r_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_r_initial,
            self.lambda_r_final,
            self.lambda_r_switch,
            self.lambda_s,
            self.lambda_o,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    if g.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Penalty-reduced focal loss over all cells, normalised by `max(P, 1)`.
/// Cells with target exactly 1 are positives.
pub fn focal_heatmap_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    alpha: f64,
    beta: f64,
    centers: usize,
) -> Result<Var> {
    same_shape(g, pred, target, "focal_heatmap_loss")?;
    let norm = 1.0 / centers.max(1) as f64;
    let p = g.value(pred).data();
    let t = target.data().to_vec();
    let mut clamped = 0usize;
    let mut total = 0.0;
    for (&raw, &h) in p.iter().zip(&t) {
        let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        clamped += (q != raw) as usize;
        total += if h == 1.0 {
            (1.0 - q).powf(alpha) * q.ln()
        } else {
            (1.0 - h).powf(beta) * q.powf(alpha) * (1.0 - q).ln()
        };
    }
    if clamped > 0 {
        debug!("focal loss clamped {clamped} probabilities to [{PROB_EPS}, 1 - {PROB_EPS}]");
    }
    Ok(g.push(
        Tensor::scalar(-total * norm),
        vec![pred],
        Box::new(move |ctx| {
            let scale = -ctx.grad[0] * norm;
            let grad = ctx.inputs[0]
                .data()
                .iter()
                .zip(&t)
                .map(|(&raw, &h)| {
                    if raw <= PROB_EPS || raw >= 1.0 - PROB_EPS {
                        return 0.0;
                    }
                    let q = raw;
                    let d = if h == 1.0 {
                        -alpha * (1.0 - q).powf(alpha - 1.0) * q.ln() + (1.0 - q).powf(alpha) / q
                    } else {
                        (1.0 - h).powf(beta)
                            * (alpha * q.powf(alpha - 1.0) * (1.0 - q).ln() - q.powf(alpha) / (1.0 - q))
                    };
                    scale * d
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// `2 sum(r m) / (sum r^2 + sum m^2)`, defined as 1 when both are all zero.
pub fn dice_coefficient(r: &[f64], m: &[f64]) -> f64 {
    let num: f64 = 2.0 * r.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
    let den: f64 = r.iter().map(|a| a * a).sum::<f64>() + m.iter().map(|b| b * b).sum::<f64>();
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Mean over objects of `1 - dice`, for `pred`/`target` laid out `[M, n*n]`.
pub fn dice_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    same_shape(g, pred, target, "dice_loss")?;
    let shape = target.shape().to_vec();
    let (objects, pixels) = (shape[0], shape[1..].iter().product::<usize>());
    let r = g.value(pred).data();
    let m = target.data().to_vec();
    let mut loss = 0.0;
    for o in 0..objects {
        let span = o * pixels..(o + 1) * pixels;
        loss += 1.0 - dice_coefficient(&r[span.clone()], &m[span]);
    }
    loss /= objects as f64;
    Ok(g.push(
        Tensor::scalar(loss),
        vec![pred],
        Box::new(move |ctx| {
            let r = ctx.inputs[0].data();
            let mut grad = vec![0.0; r.len()];
            let scale = ctx.grad[0] / objects as f64;
            for o in 0..objects {
                let span = o * pixels..(o + 1) * pixels;
                let (rs, ms) = (&r[span.clone()], &m[span.clone()]);
                let den: f64 = rs.iter().map(|a| a * a).sum::<f64>() + ms.iter().map(|b| b * b).sum::<f64>();
                if den == 0.0 {
                    continue;
                }
                let dice = dice_coefficient(rs, ms);
                for (gi, (a, b)) in grad[span].iter_mut().zip(rs.iter().zip(ms)) {
                    *gi = -scale * (2.0 * b - 2.0 * dice * a) / den;
                }
            }
            vec![Some(grad)]
        }),
    ))
}

/// `sum over masked cells of |pred - target|` (both channels), divided by
/// the number of masked cells; zero when nothing is masked.
///
/// `pred`/`target` are `[B, 2, H, W]`, `mask` is `[B, H, W]`.
pub fn masked_l1_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    same_shape(g, pred, target, "masked_l1_loss")?;
    let s = target.shape().to_vec();
    if s.len() != 4 || mask.shape() != [s[0], s[2], s[3]] {
        return Err(Error::ShapeMismatch {
            op: "masked_l1_loss",
            lhs: s,
            rhs: mask.shape().to_vec(),
        });
    }
    let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    let norm = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let p = g.value(pred).data();
    let t = target.data().to_vec();
    let weights: Vec<f64> = (0..batch * channels * plane)
        .map(|i| {
            let (b, cell) = (i / (channels * plane), i % plane);
            (mask.data()[b * plane + cell] != 0.0) as u8 as f64
        })
        .collect();
    let total: f64 = p
        .iter()
        .zip(&t)
        .zip(&weights)
        .map(|((a, b), w)| w * (a - b).abs())
        .sum();
    Ok(g.push(
        Tensor::scalar(total * norm),
        vec![pred],
        Box::new(move |ctx| {
            let grad = ctx.inputs[0]
                .data()
                .iter()
                .zip(&t)
                .zip(&weights)
                .map(|((a, b), w)| {
                    let diff = a - b;
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ctx.grad[0] * norm * w * sign
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// The four loss terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub heatmap: Var,
    pub reconstruction: Var,
    pub size: Var,
    pub offset: Var,
}

/// `L_h + lambda_r(progress) L_r + lambda_s L_s + lambda_o L_o`.
pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights, progress: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::config(format!("training progress {progress} outside [0, 1]")));
    }
    let r = g.scale(parts.reconstruction, weights.lambda_r(progress));
    let s = g.scale(parts.size, weights.lambda_s);
    let o = g.scale(parts.offset, weights.lambda_o);
    let acc = g.add(parts.heatmap, r)?;
    let acc = g.add(acc, s)?;
    g.add(acc, o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn focal_is_zero_at_perfect_prediction() {
        let mut t = Tensor::zeros(&[1, 4, 4]);
        t.set(&[0, 1, 2], 1.0);
        let mut g = Graph::new();
        let p = g.constant(t.clone());
        let l = focal_heatmap_loss(&mut g, p, &t, 2.0, 4.0, 1).unwrap();
        assert!(scalar(&g, l).abs() < 1e-12);
        assert!(scalar(&g, l) >= 0.0);
    }

    #[test]
    fn focal_single_positive_at_half() {
        let mut t = Tensor::zeros(&[1, 3, 3]);
        t.set(&[0, 1, 1], 1.0);
        let mut p = Tensor::full(&[1, 3, 3], PROB_EPS);
        p.set(&[0, 1, 1], 0.5);
        let mut g = Graph::new();
        let pv = g.constant(p);
        let l = focal_heatmap_loss(&mut g, pv, &t, 2.0, 4.0, 1).unwrap();
        let negatives = 8.0 * PROB_EPS * PROB_EPS * -(1.0 - PROB_EPS).ln();
        assert!((scalar(&g, l) - (0.25 * 2f64.ln() + negatives)).abs() < 1e-10);
    }

    #[test]
    fn dice_examples() {
        let m: Vec<f64> = (0..784).map(|i| (i < 392) as u8 as f64).collect();
        assert_eq!(dice_coefficient(&m, &m), 1.0);
        let disjoint: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        assert_eq!(dice_coefficient(&disjoint, &m), 0.0);
        assert_eq!(dice_coefficient(&[0.0; 4], &[0.0; 4]), 1.0);

        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[1, 784], 0.5));
        let target = Tensor::new(&[1, 784], m).unwrap();
        let l = dice_loss(&mut g, r, &target).unwrap();
        assert!((scalar(&g, l) - (1.0 - 392.0 / 588.0)).abs() < 1e-12);
    }

    #[test]
    fn l1_examples_and_mask_invariance() {
        let mut mask = Tensor::zeros(&[1, 2, 2]);
        mask.set(&[0, 1, 0], 1.0);
        let mut target = Tensor::zeros(&[1, 2, 2, 2]);
        target.set(&[0, 0, 1, 0], 0.5);
        target.set(&[0, 1, 1, 0], 0.5);
        let mut pred = Tensor::full(&[1, 2, 2, 2], 9.0);
        pred.set(&[0, 0, 1, 0], 0.2);
        pred.set(&[0, 1, 1, 0], 0.7);
        let mut g = Graph::new();
        let pv = g.constant(pred);
        let l = masked_l1_loss(&mut g, pv, &target, &mask).unwrap();
        assert!((scalar(&g, l) - 0.5).abs() < 1e-12);

        let empty = Tensor::zeros(&[1, 2, 2]);
        let l = masked_l1_loss(&mut g, pv, &target, &empty).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn total_schedule() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            heatmap: one,
            reconstruction: one,
            size: one,
            offset: one,
        };
        let early = total_loss(&mut g, &parts, &w, 0.25).unwrap();
        let late = total_loss(&mut g, &parts, &w, 0.75).unwrap();
        assert!((scalar(&g, early) - 2.2).abs() < 1e-10);
        assert!((scalar(&g, late) - 4.1).abs() < 1e-10);
        assert_eq!(w.lambda_r(0.5), 2.0);
        assert!(total_loss(&mut g, &parts, &w, 1.5).is_err());
    }
}
