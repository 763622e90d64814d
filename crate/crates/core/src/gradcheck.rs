//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates the forward function, so it is independent of
//! every backward rule on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// Norm-wise relative error `|a - n| / max(|a|, |n|, 1e-12)`.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }
}

/// Default finite-difference step for the element type: `1e-3` for `f32`,
/// `1e-5` for `f64`.
pub fn default_step<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-5
    }
}

/// Default pass threshold: `1e-3` for `f32`, `1e-6` for `f64`.
pub fn default_tolerance<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// Checks `d f / d inputs[k]` for every input.
///
/// `f` builds a scalar on the given tape from leaf variables bound to the
/// inputs (in order).
pub fn check<T, F>(inputs: &[Tensor<T>], step: f64, f: F) -> Result<Vec<GradCheck>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut results = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = T::lit(orig.as_f64() + step);
            let plus = eval(&work)?;
            work[k].data_mut()[i] = T::lit(orig.as_f64() - step);
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        results.push(GradCheck { analytic, numeric });
    }
    Ok(results)
}

/// Norm-wise relative error over the concatenation of all checks, i.e.
/// treating every input (or parameter) as one gradient vector.
pub fn global_relative_error(checks: &[GradCheck]) -> f64 {
    let joined = GradCheck {
        analytic: checks.iter().flat_map(|c| c.analytic.iter().copied()).collect(),
        numeric: checks.iter().flat_map(|c| c.numeric.iter().copied()).collect(),
    };
    joined.relative_error()
}

/// Largest relative error over all inputs.
pub fn max_relative_error<T, F>(inputs: &[Tensor<T>], step: f64, f: F) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    Ok(check(inputs, step, f)?
        .iter()
        .map(GradCheck::relative_error)
        .fold(0.0, f64::max))
}

/// Like [`check`], but differentiates with respect to parameters held in a
/// store. `f` reads the store through `tape.param`, so every use of a shared
/// weight counts. Results come back in the order of `ids`.
pub fn check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], step: f64, f: F) -> Result<Vec<GradCheck>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let mut grads = ParamStore::new();
    for (name, t) in store.iter() {
        grads.add(name, t.detached())?;
    }
    grads.accumulate_grads(&tape);

    let mut work = store.clone();
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut results = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic: Vec<f64> = match &grads.get(id).grad {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; store.get(id).len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = T::lit(orig.as_f64() + step);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = T::lit(orig.as_f64() - step);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        results.push(GradCheck { analytic, numeric });
    }
    Ok(results)
}

/// A derivative along one direction `v` (unit norm) of parameter space.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalCheck {
    /// `g . v` from the tape.
    pub analytic: f64,
    /// Central difference along `v`.
    pub numeric: f64,
    /// `|g|`, the norm the error is measured against.
    pub scale: f64,
}

impl DirectionalCheck {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.scale.max(1e-12)
    }
}

/// Directional derivative checks over the parameters `ids`: first along the
/// analytic gradient itself, then along `random` Gaussian unit directions.
///
/// One scalar difference per direction keeps float32 rounding noise far
/// below what a per-element check over hundreds of weights accumulates.
pub fn check_param_directions<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    random: usize,
    step: f64,
    seed: u64,
    f: F,
) -> Result<Vec<DirectionalCheck>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grads();
    grads.accumulate_grads(&tape);
    let g: Vec<f64> = ids
        .iter()
        .flat_map(|&id| grads.get(id).grad.clone().unwrap_or_default())
        .map(|x| x.as_f64())
        .collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut directions = vec![g.iter().map(|x| x / norm.max(1e-300)).collect::<Vec<f64>>()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        let v: Vec<f64> = (0..g.len()).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        directions.push(v.into_iter().map(|x| x / n).collect());
    }

    let shifted = |dir: &[f64], a: f64| -> Result<f64> {
        let mut work = store.clone();
        let mut k = 0;
        for &id in ids {
            for x in work.get_mut(id).data_mut() {
                *x = T::lit(x.as_f64() + a * dir[k]);
                k += 1;
            }
        }
        let mut tape = Tape::new();
        let out = f(&mut tape, &work)?;
        Ok(tape.value(out).item().as_f64())
    };
    directions
        .iter()
        .map(|dir| {
            let analytic = g.iter().zip(dir).map(|(a, b)| a * b).sum();
            let numeric = (shifted(dir, step)? - shifted(dir, -step)?) / (2.0 * step);
            Ok(DirectionalCheck {
                analytic,
                numeric,
                scale: norm,
            })
        })
        .collect()
}

/// Finite-difference result for one tape operation.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub error: f64,
}

type OpCase<T> = (&'static str, Vec<Tensor<T>>, Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>);

/// Every differentiable tape operation, each checked in isolation at the
/// element type's default step. Inputs stay clear of kinks (relu at 0,
/// clamp bounds) and singularities (ln, div).
pub fn op_suite<T: Real>() -> Result<Vec<OpReport>> {
    let r = |shape: &[usize], lo: f64, hi: f64, seed: u64| random_tensor::<T>(shape, lo, hi, seed);
    let away = |t: Tensor<T>, gap: f64| t.map(|v| if v.as_f64().abs() < gap { T::lit(0.4) } else { v });
    let unary = |a: Tensor<T>| vec![a];
    let cases: Vec<OpCase<T>> = vec![
        ("add", vec![r(&[3, 4], -1.0, 1.0, 1), r(&[4], -1.0, 1.0, 2)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })),
        ("sub", vec![r(&[3, 4], -1.0, 1.0, 3), r(&[3, 1], -1.0, 1.0, 4)], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 2)
        })),
        ("mul", vec![r(&[2, 3, 4], -1.0, 1.0, 5), r(&[3, 1], -1.0, 1.0, 6)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 3)
        })),
        ("div", vec![r(&[3, 4], -1.0, 1.0, 7), r(&[4], 0.5, 2.0, 8)], Box::new(|t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })),
        ("scale", unary(r(&[5], -1.0, 1.0, 9)), Box::new(|t, v| {
            let y = t.scale(v[0], T::lit(-1.5))?;
            weighted_sum(t, y, 5)
        })),
        ("add_scalar", unary(r(&[5], -1.0, 1.0, 10)), Box::new(|t, v| {
            let y = t.add_scalar(v[0], T::lit(0.25))?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 6)
        })),
        ("relu", unary(away(r(&[4, 5], -1.0, 1.0, 11), 0.05)), Box::new(|t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 7)
        })),
        ("sigmoid", unary(r(&[4, 5], -3.0, 3.0, 12)), Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 8)
        })),
        ("ln", unary(r(&[4, 5], 0.5, 2.0, 13)), Box::new(|t, v| {
            let y = t.ln(v[0])?;
            weighted_sum(t, y, 9)
        })),
        ("clamp", unary(r(&[4, 5], -1.0, 1.0, 14).map(|v| {
            let x = v.as_f64();
            if (x.abs() - 0.5).abs() < 0.05 { T::lit(0.1) } else { v }
        })), Box::new(|t, v| {
            let y = t.clamp(v[0], T::lit(-0.5), T::lit(0.5))?;
            weighted_sum(t, y, 10)
        })),
        ("matmul", vec![r(&[3, 4], -1.0, 1.0, 15), r(&[4, 5], -1.0, 1.0, 16)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 11)
        })),
        ("softmax", unary(r(&[3, 5], -2.0, 2.0, 17)), Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, 12)
        })),
        ("layer_norm", unary(r(&[3, 2, 4], -1.0, 1.0, 18)), Box::new(|t, v| {
            let y = t.layer_norm(v[0], 0, T::lit(1e-5))?;
            weighted_sum(t, y, 13)
        })),
        ("reshape", unary(r(&[2, 6], -1.0, 1.0, 19)), Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 14)
        })),
        ("permute", unary(r(&[2, 3, 4], -1.0, 1.0, 20)), Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_sum(t, y, 15)
        })),
        ("transpose", unary(r(&[3, 5], -1.0, 1.0, 21)), Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 16)
        })),
        ("concat", vec![r(&[2, 3], -1.0, 1.0, 22), r(&[4, 3], -1.0, 1.0, 23)], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 0)?;
            weighted_sum(t, y, 17)
        })),
        ("narrow", unary(r(&[3, 6], -1.0, 1.0, 24)), Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 2, 3)?;
            weighted_sum(t, y, 18)
        })),
        ("sum", unary(r(&[3, 4], -1.0, 1.0, 25)), Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })),
        ("mean", unary(r(&[3, 4], -1.0, 1.0, 26)), Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        })),
        ("conv2d", vec![r(&[2, 7, 6], -1.0, 1.0, 27), r(&[3, 2, 3, 3], -1.0, 1.0, 28)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            weighted_sum(t, y, 19)
        })),
        ("conv3d", vec![r(&[2, 3, 4, 4], -1.0, 1.0, 29), r(&[3, 2, 2, 1, 1], -1.0, 1.0, 30)], Box::new(|t, v| {
            let y = t.conv3d(v[0], v[1], [1, 1, 1])?;
            weighted_sum(t, y, 20)
        })),
        ("conv_transpose3d", vec![r(&[2, 1, 3, 3], -1.0, 1.0, 31), r(&[2, 3, 1, 2, 2], -1.0, 1.0, 32)], Box::new(|t, v| {
            let y = t.conv_transpose3d(v[0], v[1], [1, 2, 2])?;
            weighted_sum(t, y, 21)
        })),
    ];
    cases
        .into_iter()
        .map(|(op, inputs, f)| {
            let error = max_relative_error(&inputs, default_step::<T>(), |t, v| f(t, v))?;
            Ok(OpReport { op, error })
        })
        .collect()
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(lo..hi)))
}

/// Builds `sum(weights * out)` with fixed pseudo-random weights, turning any
/// tensor-valued output into a scalar whose gradient exercises every
/// element.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&shape, -1.0, 1.0, seed ^ 0x9e37_79b9));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_in_both_precisions() {
        for r in op_suite::<f64>().unwrap() {
            assert!(r.error < default_tolerance::<f64>(), "{} f64 {:e}", r.op, r.error);
        }
        for r in op_suite::<f32>().unwrap() {
            assert!(r.error < default_tolerance::<f32>(), "{} f32 {:e}", r.op, r.error);
        }
    }

    #[test]
    fn checker_catches_a_wrong_gradient() {
        let bad = GradCheck {
            analytic: vec![1.0, 0.0],
            numeric: vec![1.0, 1.0],
        };
        assert!(bad.relative_error() > 0.5);
        assert!(global_relative_error(&[bad.clone(), bad]) > 0.5);
    }
}
