//! Central finite-difference checks for analytic gradients.

use crate::error::{Error, Result};
use crate::math::{Graph, ParamId, ParamStore, Tensor, Var};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn finite_scalar(g: &Graph, out: Var) -> Result<f64> {
    if g.value(out).numel() != 1 {
        return Err(Error::shape("finite_difference_check", "function must be scalar"));
    }
    let v = g.scalar_f64(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("finite_difference_check".into()));
    }
    Ok(v)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of `point`.
///
/// The perturbed evaluations run on an f64 shadow of the graph, so the
/// central difference is exact up to truncation error. Discrete choices made
/// from f32 values (code assignments, argmax) stay those of the unperturbed
/// point.
pub fn central_differences<F>(f: F, point: &Tensor, eps: f32) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::usage("eps must be positive"));
    }
    let eps = eps as f64;
    let base: Vec<f64> = point.data().iter().map(|&v| v as f64).collect();
    let eval = |i: usize, d: f64| -> Result<f64> {
        let mut exact = base.clone();
        exact[i] += d;
        let mut g = Graph::with_f64_shadow();
        let x = g.leaf_with_shadow(point.clone(), exact, false)?;
        let out = f(&mut g, x)?;
        finite_scalar(&g, out)
    };
    (0..point.numel())
        .map(|i| Ok((eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps)))
        .collect()
}

/// Analytic gradient of the scalar function `f` at `point`.
pub fn analytic_gradient<F>(f: F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true)?;
    let out = f(&mut g, x)?;
    finite_scalar(&g, out)?;
    let grads = g.backward(out)?;
    Ok(grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape())))
}

/// Largest [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &[f64]) -> f32 {
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a as f64, n))
        .fold(0.0, f64::max) as f32
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-6)`
/// for the scalar function `f` at `point`; see [`central_differences`].
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::usage("eps must be positive"));
    }
    let analytic = analytic_gradient(&f, point)?;
    let numeric = central_differences(&f, point, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Same check against parameters in `store`: `f` builds the scalar loss from
/// a graph and the store. At most `max_coords` entries per parameter are
/// probed, spread evenly across the tensor.
pub fn param_difference_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    f: F,
    eps: f32,
    max_coords: usize,
) -> Result<f32>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::usage("eps must be positive"));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let eps = eps as f64;
    let eval = |id: ParamId, i: usize, d: f64| -> Result<f64> {
        let mut g = Graph::with_f64_shadow();
        g.nudge_param(id, i, d);
        let out = f(&mut g, store)?;
        finite_scalar(&g, out)
    };

    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).numel();
        let stride = (n / max_coords.max(1)).max(1);
        let zeros = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zeros);
        for i in (0..n).step_by(stride).take(max_coords) {
            let numeric = (eval(id, i, eps)? - eval(id, i, -eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i] as f64, numeric));
        }
    }
    Ok(worst as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let p = Tensor::scalar(3.0);
        let err = finite_difference_check(
            |g, x| {
                // x^2 as a one-element mean squared error against zero
                let zero = g.input(Tensor::scalar(0.0))?;
                g.mse(x, zero)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deep_tanh_chain_checks_tightly() {
        // small gradient entries behind several tanh layers
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let w: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[16, 16], 0.5, &mut rng)).collect();
        let p = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let err = finite_difference_check(
            |g, x| {
                let mut h = x;
                for wi in &w {
                    let wv = g.input(wi.clone())?;
                    let m = g.matmul(h, wv)?;
                    h = g.tanh(m)?;
                }
                g.mean(h)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_difference_check(
            |g, _x| g.input(Tensor::scalar(7.0)),
            &p,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_must_be_positive() {
        let p = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }
}
