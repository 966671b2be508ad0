//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numcore::params::{Bound, ParamSet};
use crate::numcore::tape::{Tape, VarId};

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_offset: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences on up to
/// `max_coords` coordinates (evenly strided over the flattened parameters).
///
/// Error per coordinate is |analytic - fd| / (|fd| + 1e-8) with
/// fd = (f(x+eps) - f(x-eps)) / (2 eps).
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    epsilon: f64,
    max_coords: usize,
    mut loss_fn: F,
) -> Result<FiniteDiffReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<VarId>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Domain(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let n = params.n_scalars();
    if n == 0 {
        return Err(Error::Domain("empty parameter set".into()));
    }

    params.zero_grad();
    params.eval_with_gradients(&mut loss_fn)?;
    let analytic: Vec<f64> = (0..n).map(|k| params.flat_grad(k)).collect();

    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_offset: 0,
        coords_checked: 0,
    };
    for k in (0..n).step_by(stride) {
        let orig = params.flat_get(k);
        params.flat_set(k, orig + epsilon);
        let plus = params.eval_value(&mut loss_fn)?;
        params.flat_set(k, orig - epsilon);
        let minus = params.eval_value(&mut loss_fn)?;
        params.flat_set(k, orig);

        let fd = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[k] - fd).abs() / (fd.abs() + 1e-8);
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            let (name, off) = params.flat_name(k);
            report.max_rel_err = rel;
            report.worst_param = name.to_string();
            report.worst_offset = off;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;
    use crate::seed::{stream_rng, NormalSource};

    #[test]
    fn linear_function_is_near_exact() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::from_vec(1, 4, vec![0.2, -0.7, 1.1, 0.0]));
        let rep = finite_diff_check(&mut p, 1e-4, 100, |t, b| {
            let x = b.id("x");
            let c = t.constant(Tensor::from_vec(1, 4, vec![3.0, -1.0, 0.5, 2.0]));
            let prod = t.mul(x, c);
            Ok(t.sum_all(prod))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
        assert_eq!(rep.coords_checked, 4);
    }

    #[test]
    fn three_layer_composite_passes() {
        let mut rng = NormalSource::new(stream_rng(11, "findiff", 0));
        let mut p = ParamSet::new();
        let mut mat = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| 0.4 * rng.next()).collect())
        };
        p.add("w1", mat(6, 5));
        p.add("w2", mat(5, 4));
        p.add("w3", mat(4, 3));
        let x0 = mat(2, 6);
        let rep = finite_diff_check(&mut p, 1e-4, 1000, move |t, b| {
            let x = t.constant(x0.clone());
            let h1 = t.matmul(x, b.id("w1"));
            let a1 = t.tanh(h1);
            let h2 = t.matmul(a1, b.id("w2"));
            let a2 = t.sigmoid(h2);
            let h3 = t.matmul(a2, b.id("w3"));
            let sm = t.log_softmax_rows(h3);
            Ok(t.mean_all(sm))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(1.0));
        let err = finite_diff_check(&mut p, 1e-2, 10, |t, b| Ok(t.sum_all(b.id("x"))))
            .unwrap_err();
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs at x=0 has subgradient 0 analytically but fd sees the kink.
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(1e-5));
        let rep = finite_diff_check(&mut p, 1e-4, 10, |t, b| {
            let a = t.abs(b.id("x"));
            Ok(t.sum_all(a))
        })
        .unwrap();
        assert!(rep.max_rel_err > 0.5, "kink should disagree, got {}", rep.max_rel_err);
    }
}
