//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Real, Tensor, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-3`, so coordinates whose
/// true gradient is essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `analytic` gradients against `(L(theta + h e_i) - L(theta - h e_i)) / 2h`.
///
/// With `max_per_tensor` set, a seeded sample of at most that many
/// coordinates is checked in each tensor.
pub fn check_gradients<T, F>(
    params: &ParameterStore<T>,
    analytic: &ParameterStore<T>,
    mut loss: F,
    h: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&ParameterStore<T>) -> Result<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = analytic.names().map(str::to_string).collect();
    for name in names {
        let grad = analytic.get(&name).expect("name from analytic").clone();
        let n = grad.numel();
        let indices: Vec<usize> = match max_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let original = work.get(&name).expect("parameter exists").data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = T::of(original.as_f64() + h);
            let plus = loss(&work)?.as_f64();
            work.get_mut(&name).unwrap().data_mut()[i] = T::of(original.as_f64() - h);
            let minus = loss(&work)?.as_f64();
            work.get_mut(&name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[i].as_f64(), numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_parameter.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

type Forward = fn(&mut Binding<'_, f64>) -> Result<Var>;
type Case = (&'static str, Vec<(&'static str, &'static [usize])>, Forward);

fn store_with(shapes: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.insert(*name, Tensor::new(shape.to_vec(), v).expect("sized"));
    }
    store
}

/// One primitive on random inputs, reduced to a scalar by a fixed random
/// weighting of its output.
fn check_case(shapes: &[(&str, &[usize])], forward: Forward, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = store_with(shapes, &mut rng);
    let weight_seed = rng.gen::<u64>();
    let eval = |p: &ParameterStore<f64>, grads: bool| -> Result<(f64, Option<ParameterStore<f64>>)> {
        let mut b = Binding::new(p, grads);
        let out = forward(&mut b)?;
        let shape = b.tape.shape(out).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect();
        let w = b.tape.constant(Tensor::new(shape, w)?);
        let prod = b.tape.mul(out, w)?;
        let loss = b.tape.sum(prod);
        let value = b.tape.value(loss).item();
        Ok((value, if grads { Some(b.gradients(loss)?) } else { None }))
    };
    let analytic = eval(&store, true)?.1.expect("gradients requested");
    check_gradients(&store, &analytic, |p| Ok(eval(p, false)?.0), 1e-5, None, seed)
}

/// Finite-difference checks of every differentiable tape primitive in 64-bit
/// precision, keyed by primitive name.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cases: Vec<Case> = vec![
        ("add", vec![("a", &[3, 4]), ("b", &[3, 4])], |b| {
            let (x, y) = (b.param("a")?, b.param("b")?);
            b.tape.add(x, y)
        }),
        ("mul", vec![("a", &[3, 4]), ("b", &[3, 4])], |b| {
            let (x, y) = (b.param("a")?, b.param("b")?);
            b.tape.mul(x, y)
        }),
        ("scale", vec![("a", &[5])], |b| {
            let x = b.param("a")?;
            Ok(b.tape.scale(x, -1.7))
        }),
        ("reshape", vec![("a", &[2, 6])], |b| {
            let x = b.param("a")?;
            b.tape.reshape(x, &[3, 4])
        }),
        ("permute", vec![("a", &[2, 3, 4])], |b| {
            let x = b.param("a")?;
            b.tape.permute(x, &[2, 0, 1])
        }),
        ("linear", vec![("x", &[2, 3, 4]), ("w", &[5, 4]), ("b", &[5])], |b| {
            let (x, w, bias) = (b.param("x")?, b.param("w")?, b.param("b")?);
            b.tape.linear(x, w, Some(bias))
        }),
        ("linear_no_bias", vec![("x", &[3, 4]), ("w", &[2, 4])], |b| {
            let (x, w) = (b.param("x")?, b.param("w")?);
            b.tape.linear(x, w, None)
        }),
        (
            "conv2d_1x1",
            vec![("x", &[2, 3, 4, 4]), ("w", &[5, 3, 1, 1]), ("b", &[5])],
            |b| {
                let (x, w, bias) = (b.param("x")?, b.param("w")?, b.param("b")?);
                b.tape.conv2d(x, w, bias, 0)
            },
        ),
        (
            "conv2d_3x3",
            vec![("x", &[2, 2, 4, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
            |b| {
                let (x, w, bias) = (b.param("x")?, b.param("w")?, b.param("b")?);
                b.tape.conv2d(x, w, bias, 1)
            },
        ),
        ("layer_norm", vec![("x", &[3, 6]), ("g", &[6]), ("b", &[6])], |b| {
            let (x, g, beta) = (b.param("x")?, b.param("g")?, b.param("b")?);
            b.tape.layer_norm(x, g, beta, 1e-5)
        }),
        (
            "batch_norm_train",
            vec![("x", &[3, 2, 3, 3]), ("g", &[2]), ("b", &[2])],
            |b| {
                let (x, g, beta) = (b.param("x")?, b.param("g")?, b.param("b")?);
                Ok(b.tape.batch_norm_train(x, g, beta, 1e-5)?.0)
            },
        ),
        (
            "batch_norm_eval",
            vec![("x", &[2, 2, 3, 3]), ("g", &[2]), ("b", &[2])],
            |b| {
                let (x, g, beta) = (b.param("x")?, b.param("g")?, b.param("b")?);
                b.tape.batch_norm_eval(x, g, beta, &[0.1, -0.2], &[0.8, 1.3], 1e-5)
            },
        ),
        ("softmax_last", vec![("a", &[3, 5])], |b| {
            let x = b.param("a")?;
            b.tape.softmax(x, 1)
        }),
        ("softmax_first", vec![("a", &[4, 3])], |b| {
            let x = b.param("a")?;
            b.tape.softmax(x, 0)
        }),
        ("silu", vec![("a", &[7])], |b| {
            let x = b.param("a")?;
            Ok(b.tape.silu(x))
        }),
        ("gelu", vec![("a", &[7])], |b| {
            let x = b.param("a")?;
            Ok(b.tape.gelu(x))
        }),
        ("bmm", vec![("a", &[2, 3, 4]), ("b", &[2, 4, 5])], |b| {
            let (x, y) = (b.param("a")?, b.param("b")?);
            b.tape.bmm(x, y)
        }),
        ("mean_axis", vec![("a", &[2, 3, 4])], |b| {
            let x = b.param("a")?;
            b.tape.mean_axis(x, 1)
        }),
        ("sum", vec![("a", &[2, 3])], |b| {
            let x = b.param("a")?;
            Ok(b.tape.sum(x))
        }),
        ("sum_squares", vec![("a", &[2, 3])], |b| {
            let x = b.param("a")?;
            Ok(b.tape.sum_squares(x))
        }),
        ("soft_cross_entropy", vec![("z", &[3, 4])], |b| {
            let z = b.param("z")?;
            let t = Tensor::new(
                vec![3, 4],
                vec![0.7, 0.1, 0.1, 0.1, 0.1, 0.7, 0.1, 0.1, 0.0, 0.0, 0.5, 0.5],
            )?;
            b.tape.soft_cross_entropy(z, t)
        }),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| Ok((name, check_case(&shapes, f, seed.wrapping_add(i as u64))?)))
        .collect()
}
