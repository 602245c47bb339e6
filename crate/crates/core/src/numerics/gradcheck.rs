//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).data().iter().sum())
}

/// Checks the analytic gradient of the scalar `f` at `x` against central
/// differences with step `h`, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            shape: g.shape(y).to_vec(),
            reason: "function must return a single value".into(),
        });
    }
    if !g.value(y).all_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let grads = g.backward(y);
    let full = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = full[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 4.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.sum_all(x)), &x, 1e-5).unwrap();
        assert!(r.analytic.iter().all(|&a| a == 1.0));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0]);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::zeros(&[4]);
        let r = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.analytic.iter().all(|&a| a == 0.25));
    }

    #[test]
    fn non_finite_is_reported_with_index() {
        let x = Tensor::new(&[2], vec![1.0, 1e-6]).unwrap();
        let err = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum_all(l))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }), "{err}");
    }
}
