//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Result, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
    /// checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation flips a ReLU pre-activation sign.
    pub excluded: Vec<usize>,
}

const REL_FLOOR: f64 = 1e-6;

fn eval<F>(f: &F, point: &Tensor<f64>, track: bool) -> Result<(Graph<f64>, TensorId, TensorId)>
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let mut p = point.clone();
    p.requires_grad = track;
    let x = g.leaf(p);
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(y).to_vec()));
    }
    if !g.item(y).is_finite() {
        return Err(TensorError::NonFinite("finite_diff_check"));
    }
    Ok((g, x, y))
}

/// Compares `backward()` gradients of the scalar function `f` at `point`
/// against central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let (mut g, x, y) = eval(&f, point, true)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (gp, _, yp) = eval(&f, &plus, false)?;
        let (gm, _, ym) = eval(&f, &minus, false)?;
        if gp.relu_pattern() != gm.relu_pattern() {
            report.excluded.push(i);
            continue;
        }
        let numeric = (gp.item(yp) - gm.item(ym)) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.scale(sq, 1.5)?;
                g.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn relu_kink_coordinate_is_excluded() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error <= 1e-9);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let s = g.scale(x, f64::INFINITY)?;
                g.sum(s)
            },
            &x,
            1e-4,
        );
        assert_eq!(r.unwrap_err(), TensorError::NonFinite("finite_diff_check"));
    }

    #[test]
    fn eps_must_be_positive() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
    }
}
