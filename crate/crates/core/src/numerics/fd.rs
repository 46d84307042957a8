use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference estimate of `∂f/∂θ` for every scalar in `params`:
/// `(f(θ+h) − f(θ−h)) / 2h`.
pub fn finite_diff_grad<F>(f: F, params: &ParamStore, h: f64) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    stencil_grad(f, params, h, &[(1.0, 0.5), (-1.0, -0.5)])
}

/// Fourth-order central difference,
/// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`. Truncation error is
/// `O(h⁴)`, so a larger `h` keeps rounding noise small for tiny gradients.
pub fn finite_diff_grad_fourth_order<F>(f: F, params: &ParamStore, h: f64) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let c = 1.0 / 12.0;
    stencil_grad(f, params, h, &[(2.0, -c), (1.0, 8.0 * c), (-1.0, -8.0 * c), (-2.0, c)])
}

/// `Σ weight · f(θ + offset·h) / h` per scalar, for `(offset, weight)` pairs.
fn stencil_grad<F>(mut f: F, params: &ParamStore, h: f64, stencil: &[(f64, f64)]) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = ParamStore::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let original = params.expect(&name)?.clone();
        let mut grad = vec![0.0; original.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let base = original.data()[i];
            let mut acc = 0.0;
            for &(offset, weight) in stencil {
                probe.get_mut(&name).expect("cloned store").data_mut()[i] = base + offset * h;
                let v = f(&probe)?;
                if !v.is_finite() {
                    return Err(Error::Oracle(format!("non-finite objective probing {name}[{i}]")));
                }
                acc += weight * v;
            }
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = base;
            *g = acc / h;
        }
        out.insert(name, Tensor::new(original.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] over two stores with equal names.
pub fn max_relative_error(analytic: &ParamStore, numeric: &ParamStore) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic.iter() {
        let n = numeric
            .get(name)
            .unwrap_or_else(|| panic!("numeric gradient missing `{name}`"));
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn polynomial_and_constant() {
        let g = finite_diff_grad(|p| Ok(p.expect("theta")?.data()[0].powi(2)), &single(3.0), DEFAULT_FD_STEP)
            .unwrap();
        assert!((g.get("theta").unwrap().data()[0] - 6.0).abs() < 1e-9);

        let g = finite_diff_grad(|_| Ok(4.2), &single(3.0), DEFAULT_FD_STEP).unwrap();
        assert!(g.get("theta").unwrap().data()[0].abs() < 1e-9);
    }

    #[test]
    fn fourth_order_is_exact_on_quartics() {
        let f = |p: &ParamStore| Ok(p.expect("theta")?.data()[0].powi(4));
        let g = finite_diff_grad_fourth_order(f, &single(1.5), 0.1).unwrap();
        assert!((g.get("theta").unwrap().data()[0] - 4.0 * 1.5f64.powi(3)).abs() < 1e-12);
        let g = finite_diff_grad(f, &single(1.5), 0.1).unwrap();
        assert!((g.get("theta").unwrap().data()[0] - 4.0 * 1.5f64.powi(3)).abs() > 1e-3);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let err = finite_diff_grad(|_| Ok(f64::NAN), &single(1.0), DEFAULT_FD_STEP).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
