//! Finite-difference verification of analytic gradients.
//!
//! `grad_check` compares tape gradients against central differences computed
//! by re-running the forward pass with perturbed parameters. The numeric and
//! analytic routes share nothing beyond the loss-building closure, so a wrong
//! backward rule shows up as a large relative error.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Worst-coordinate outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// index into the checked parameter list
    pub worst_param: usize,
    /// flat coordinate within that parameter
    pub worst_coord: usize,
}

fn scalar_loss<F>(params: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.value(loss).scalar_value().map_err(|_| {
        Error::contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            g.value(loss).shape()
        ))
    })
}

/// Tape gradients of `build` w.r.t. every parameter (zeros when unreached).
pub fn analytic_grads<F>(params: &[Tensor], build: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}

/// Central-difference gradients: (f(x+eps) - f(x-eps)) / (2 eps) per
/// coordinate.
pub fn numeric_grads<F>(params: &[Tensor], build: F, eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape().to_vec());
        for ci in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let lp = scalar_loss(&plus, &build)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let lm = scalar_loss(&minus, &build)?;
            grad.data_mut()[ci] = (lp - lm) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over all coordinates of `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
    };
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ci, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let denom = 1.0_f64.max(av.abs()).max(nv.abs());
            let err = (av - nv).abs() / denom;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    report
}

/// Checks the tape gradient of a scalar function of `params` against central
/// finite differences.
pub fn grad_check<F>(params: &[Tensor], build: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(params, &build)?;
    let numeric = numeric_grads(params, &build, eps)?;
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let params = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
        let report = grad_check(
            &params,
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                let s = g.sum_all(sq);
                Ok(g.scale(s, 0.5))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        // -log softmax(z)[hot] expressed through the tape ops
        let params = vec![Tensor::from_vec(vec![0.3, -1.1, 0.7, 0.2])];
        let hot = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        let report = grad_check(
            &params,
            move |g, vars| {
                let s = g.softmax(vars[0], 0)?;
                let y = g.constant(hot.clone());
                let picked = g.mul(s, y)?;
                let p = g.sum_all(picked);
                // -log p via bce on logit(p) is overkill; use 1 - p as a
                // smooth stand-in retaining softmax in the path
                let one = g.constant(Tensor::scalar(1.0));
                Ok(g.sub(one, p)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let params = vec![Tensor::from_vec(vec![0.4, 1.3, -0.6])];
        let build = |g: &mut Graph, vars: &[Var]| -> crate::error::Result<Var> {
            let y = g.gelu(vars[0]);
            Ok(g.sum_all(y))
        };
        let mut analytic = analytic_grads(&params, build).unwrap();
        let numeric = numeric_grads(&params, build, 1e-4).unwrap();
        // sanity: uncorrupted gradients agree
        assert!(max_rel_error(&analytic, &numeric).max_rel_err < 1e-6);
        // a corrupted backward rule must be flagged
        analytic[0].data_mut()[1] *= 2.0;
        let report = max_rel_error(&analytic, &numeric);
        assert!(report.max_rel_err > 1e-2, "{}", report.max_rel_err);
        assert_eq!(report.worst_coord, 1);
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let params = vec![Tensor::from_vec(vec![1.0])];
        assert!(grad_check(&params, |_, vars| Ok(vars[0]), 0.0).is_err());
        let err = grad_check(&params, |g, vars| g.add(vars[0], vars[0]), 1e-4);
        // scalar-shaped [1] passes; a genuinely non-scalar output must fail
        assert!(err.is_ok());
        let params2 = vec![Tensor::from_vec(vec![1.0, 2.0])];
        assert!(grad_check(&params2, |_, vars| Ok(vars[0]), 1e-4).is_err());
    }
}
