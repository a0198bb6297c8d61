use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// `1e-4 * (1 + max |theta|)` over the learnable entries.
pub fn default_hvp_eps<T: Real>(params: &ParameterStore<T>) -> T {
    let max = params.trainable().fold(T::zero(), |m, (_, t)| m.max(t.max_abs()));
    T::of(1e-4) * (T::one() + max)
}

/// Hessian-vector product by central differences of first-order gradients:
/// `(grad(theta + eps v) - grad(theta - eps v)) / (2 eps)`.
///
/// `params` is perturbed in place and restored to its original bits before
/// returning, on success and on error. The result covers the entries of `v`.
pub fn hvp_estimate<T, F>(
    params: &mut ParameterStore<T>,
    mut grad_fn: F,
    v: &ParameterStore<T>,
    eps: T,
) -> Result<ParameterStore<T>>
where
    T: Real,
    F: FnMut(&ParameterStore<T>) -> Result<ParameterStore<T>>,
{
    if !(eps > T::zero()) {
        return Err(Error::argument("hvp eps must be positive"));
    }
    for (name, dir) in v.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::argument(format!("direction names unknown parameter `{name}`")))?;
        p.expect_same_shape(dir)?;
    }
    let original = params.clone();
    let mut eval = |sign: T, params: &mut ParameterStore<T>| -> Result<ParameterStore<T>> {
        params.add_scaled(v, sign * eps)?;
        let g = grad_fn(params);
        *params = original.clone();
        let g = g?;
        for (name, t) in g.iter() {
            if !t.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        Ok(g)
    };
    let plus = eval(T::one(), params)?;
    let minus = eval(-T::one(), params)?;
    let denom = T::of(2.0) * eps;
    let mut out = ParameterStore::new();
    for (name, _) in v.iter() {
        let (gp, gm) = match (plus.get(name), minus.get(name)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::argument(format!("gradient missing for `{name}`"))),
        };
        let data = gp
            .data()
            .iter()
            .zip(gm.data())
            .map(|(a, b)| (*a - *b) / denom)
            .collect();
        out.insert(name, Tensor::new(gp.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Binding;

    /// Gradient of 0.5 theta^T A theta for A = [[2,1],[1,3]].
    fn quad_grad(p: &ParameterStore<f64>) -> Result<ParameterStore<f64>> {
        let mut b = Binding::new(p, true);
        let theta = b.param("theta")?;
        let row = b.tape.reshape(theta, &[1, 2])?;
        let a = b.tape.constant(Tensor::from_f64(&[2, 2], &[2.0, 1.0, 1.0, 3.0])?);
        let at = b.tape.linear(row, a, None)?;
        let at = b.tape.reshape(at, &[2])?;
        let prod = b.tape.mul(theta, at)?;
        let s = b.tape.sum(prod);
        let loss = b.tape.scale(s, 0.5);
        b.gradients(loss)
    }

    fn store(values: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("theta", Tensor::from_f64(&[2], values).unwrap());
        s
    }

    #[test]
    fn quadratic_hvp_is_matrix_product() {
        let mut p = store(&[0.3, -1.7]);
        let before = p.clone();
        let eps = default_hvp_eps(&p);
        let hv = hvp_estimate(&mut p, quad_grad, &store(&[1.0, 0.0]), eps).unwrap();
        let hv = hv.get("theta").unwrap().data().to_vec();
        assert!((hv[0] - 2.0).abs() < 1e-6 && (hv[1] - 1.0).abs() < 1e-6, "{hv:?}");
        assert_eq!(p, before);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let mut p = store(&[0.3, -1.7]);
        let hv = hvp_estimate(&mut p, quad_grad, &store(&[0.0, 0.0]), 1e-4).unwrap();
        assert_eq!(hv.get("theta").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[0.3, -1.7]);
        let before = p.clone();
        let err = hvp_estimate(
            &mut p,
            |s: &ParameterStore<f64>| {
                let mut g = s.zeros_like();
                g.get_mut("theta").unwrap().data_mut()[0] = f64::NAN;
                Ok(g)
            },
            &store(&[1.0, 0.0]),
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("theta")));
        assert_eq!(p, before);
    }
}
