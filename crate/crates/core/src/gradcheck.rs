//! Central-difference gradient oracle.
//!
//! The error metric is `|analytic - numeric| / max(1, |numeric|)`, maximised
//! over coordinates.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::fault("function value is not finite"));
    }
    Ok(x)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `f` at `point`; `f` receives the graph and the input variable.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.variable(point.clone())?;
    let root = f(&mut g, x)?;
    scalar_of(&g, root)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(p)?;
        let root = f(&mut g, x)?;
        scalar_of(&g, root)
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks every named parameter of a store-driven scalar function. Returns
/// `(name, max relative error)` per parameter, in store order.
pub fn grad_check_params<F>(f: F, store: &ParameterStore, step: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        scalar_of(&g, root)?;
        let grads = g.backward(root)?;
        g.accumulate_param_grads(&grads, &mut analytic)?;
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, s)?;
        scalar_of(&g, root)
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = store.value(&name).map_or(0, Tensor::len);
        let mut worst = 0.0f64;
        for i in 0..n {
            let base = store.value(&name).expect("listed").data()[i];
            probe.value_mut(&name).expect("listed").data_mut()[i] = base + step;
            let up = eval(&probe)?;
            probe.value_mut(&name).expect("listed").data_mut()[i] = base - step;
            let down = eval(&probe)?;
            probe.value_mut(&name).expect("listed").data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&name).expect("listed").grad.data()[i];
            worst = worst.max(rel_err(a, numeric));
        }
        out.push((name, worst));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    #[test]
    fn sum_of_squares_is_near_exact() {
        let p = Tensor::from_vec(vec![1.0, -2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softplus_sum_at_random_point() {
        let mut s = RandomStream::new(11);
        let p = Tensor::from_fn(&[7], |_| 6.0 * s.uniform() - 3.0);
        let err = grad_check(
            |g, x| {
                let y = g.softplus(x)?;
                g.sum_all(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_vjp_is_caught() {
        let p = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        // forward x², but the VJP claims d/dx = x
        let err = grad_check(
            |g, x| {
                let y = g.custom_unary(
                    x,
                    |v| v * v,
                    Box::new(|x: &Tensor, up: &Tensor| {
                        Tensor::new(
                            x.shape().to_vec(),
                            x.data().iter().zip(up.data()).map(|(a, b)| a * b).collect(),
                        )
                        .unwrap()
                    }),
                )?;
                g.sum_all(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let p = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(|g, x| g.sum_all(x), &p, 0.0).is_err());
        assert!(grad_check(|g, x| g.exp(x), &Tensor::from_vec(vec![1.0, 2.0]), 1e-5).is_err());
    }

    #[test]
    fn param_check_covers_each_entry() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::from_vec(vec![0.5, -0.25])).unwrap();
        store.insert("b", Tensor::from_vec(vec![0.1])).unwrap();
        let errs = grad_check_params(
            |g, s| {
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let y = g.add(w, b)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(errs.len(), 2);
        assert!(errs.iter().all(|(_, e)| *e < 1e-8), "{errs:?}");
    }
}
