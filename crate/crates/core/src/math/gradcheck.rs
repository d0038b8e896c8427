use super::matrix::DenseMatrix;
use super::tape::{Parameter, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients against central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter (in order) and
/// must return a 1×1 node. Only parameters with `requires_grad` are probed.
/// The result is the largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over all probed entries.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Parameter], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let evaluate = |tensors: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .zip(params)
            .map(|(t, p)| tape.leaf(t.clone(), p.requires_grad))
            .collect();
        let out = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = loss_fn(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;

    let mut tensors: Vec<DenseMatrix> = params.iter().map(|p| p.tensor.clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let analytic = grads.get(vars[pi]);
        for e in 0..p.tensor.values().len() {
            let base = p.tensor.values()[e];
            tensors[pi].values_mut()[e] = base + h;
            let plus = evaluate(&tensors)?;
            tensors[pi].values_mut()[e] = base - h;
            let minus = evaluate(&tensors)?;
            tensors[pi].values_mut()[e] = base;
            for value in [plus, minus] {
                if !value.is_finite() {
                    return Err(Error::NonFiniteProbe {
                        param: pi,
                        entry: e,
                        value,
                    });
                }
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.values()[e]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Step size `1e-5 · max(1, ‖θ‖∞)` over every parameter.
pub fn default_step(params: &[Parameter]) -> f64 {
    let inf = params.iter().fold(0.0f64, |m, p| m.max(p.tensor.max_abs()));
    1e-5 * inf.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let p = Parameter::new(DenseMatrix::row_vector(&[1.0, -2.0, 3.0]), true);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum_all(sq);
                Ok(t.scale(s, 0.5))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn detached_input_agrees_at_zero() {
        let p = Parameter::new(DenseMatrix::row_vector(&[0.5, 1.5]), true);
        let err = finite_difference_check(
            |t, v| {
                let d = t.detach(v[0]);
                let sq = t.mul(d, d)?;
                Ok(t.sum_all(sq))
            },
            &[p],
            1e-5,
        );
        // the numeric side sees the dependence that detach hides
        assert!(err.unwrap() > 0.5);
    }

    #[test]
    fn constant_graph_agrees() {
        let p = Parameter::new(DenseMatrix::row_vector(&[0.5, 1.5]), true);
        let c = DenseMatrix::row_vector(&[2.0, 2.0]);
        let err = finite_difference_check(
            move |t, _| {
                let k = t.constant(c.clone());
                Ok(t.sum_all(k))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let p = Parameter::new(DenseMatrix::row_vector(&[1e200]), true);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[p],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { param: 0, entry: 0, .. }), "{err}");
    }
}
