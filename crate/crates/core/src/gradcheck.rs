//! Central finite-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Result, SspError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of comparing analytic against numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Elements left unchecked because every tried step crossed a ReLU kink.
    pub skipped: usize,
    /// `(analytic, numeric)` at the worst element.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { max_relative_error: 0.0, checked: 0, skipped: 0, worst: (0.0, 0.0) }
    }

    fn record(&mut self, analytic: f64, numeric: Option<f64>) -> Result<()> {
        let Some(numeric) = numeric else {
            self.skipped += 1;
            return Ok(());
        };
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(SspError::NonFinite(format!("gradient check saw analytic={analytic}, numeric={numeric}")));
        }
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || self.checked == 0 {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = (analytic, numeric);
        }
        self.checked += 1;
        Ok(())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Step shrink factor and attempts when a perturbation crosses a ReLU kink.
const KINK_SHRINK: f64 = 8.0;
const KINK_ATTEMPTS: usize = 4;

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<(f64, u64)> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(SspError::contract("grad_check", format!("closure must return a scalar, got {:?}", t.shape())));
    }
    let s = t.data()[0].to_f64_lossy();
    if !s.is_finite() {
        return Err(SspError::NonFinite(format!("closure produced {s}")));
    }
    Ok((s, tape.kink_signature()))
}

/// Central difference of one element. `eval(v)` sets the element to `v`
/// (rounded to the working precision, which it returns) and evaluates.
/// The step shrinks while either side lands on a different ReLU pattern
/// than the unperturbed pass; `None` if it never settles.
fn central<F>(orig: f64, eps: f64, base: u64, mut eval: F) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<(f64, (f64, u64))>,
{
    let mut h = eps;
    for _ in 0..KINK_ATTEMPTS {
        let (hi, (plus, sp)) = eval(orig + h)?;
        let (lo, (minus, sm)) = eval(orig - h)?;
        if sp == base && sm == base {
            return Ok(Some((plus - minus) / (hi - lo)));
        }
        h /= KINK_SHRINK;
    }
    Ok(None)
}

fn pick(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// A scalar-valued computation that can be recorded at any precision.
pub trait GradOp {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Checks the 32-bit analytic gradient of `op` against central differences of
/// the same computation evaluated in 64-bit.
///
/// Finite differences taken in 32-bit drown elements with small gradients in
/// rounding noise; this compares the 32-bit backward pass against a numeric
/// reference that does not suffer from it.
pub fn grad_check_f32<O: GradOp>(op: &O, inputs: &[Tensor<f32>], eps: f64) -> Result<GradCheckReport> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op.apply(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op.apply(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let base = eval(&work)?.1;
    let mut report = GradCheckReport::new();
    for (k, var) in vars.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[i] as f64);
            let orig = work[k].data()[i];
            let numeric = central(orig, eps, base, |v| {
                work[k].data_mut()[i] = v;
                Ok((v, eval(&work)?))
            })?;
            work[k].data_mut()[i] = orig;
            report.record(analytic, numeric)?;
        }
    }
    Ok(report)
}

/// Checks every element of every input of a scalar-valued closure.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, None, 0)
}

/// Like [`grad_check`] but checks at most `per_input` random elements of each input.
pub fn grad_check_sampled<T, F>(f: F, inputs: &[Tensor<T>], eps: T, per_input: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, out)?.1;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        for i in pick(inputs[k].len(), per_input, &mut rng) {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[i].to_f64_lossy());
            let orig = work[k].data()[i];
            let numeric = central(orig.to_f64_lossy(), eps.to_f64_lossy(), base, |v| {
                let v = T::from_f64_lossy(v);
                work[k].data_mut()[i] = v;
                Ok((v.to_f64_lossy(), eval(&work)?))
            })?;
            work[k].data_mut()[i] = orig;
            report.record(analytic, numeric)?;
        }
    }
    Ok(report)
}

/// Checks gradients of the trainable parameters in `store`.
///
/// The closure must record parameters with [`Tape::param`]. At most
/// `per_param` elements of each trainable parameter are sampled.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, f: F, eps: T, per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let eval = |s: &ParamStore<T>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        scalar_of(&t, v)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = scalar_of(&tape, out)?.1;
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&mut analytic)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        for i in pick(store.value(id).len(), Some(per_param), &mut rng) {
            let orig = work.get(id).value.data()[i];
            let numeric = central(orig.to_f64_lossy(), eps.to_f64_lossy(), base, |v| {
                let v = T::from_f64_lossy(v);
                work.get_mut(id).value.data_mut()[i] = v;
                Ok((v.to_f64_lossy(), eval(&work)?))
            })?;
            work.get_mut(id).value.data_mut()[i] = orig;
            report.record(analytic.get(id).grad.data()[i].to_f64_lossy(), numeric)?;
        }
    }
    Ok(report)
}

/// A scalar-valued function of a parameter store, recordable at any precision.
pub trait ParamOp {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var>;
}

/// Parameter analogue of [`grad_check_f32`]: the 32-bit backward pass is
/// compared against 64-bit central differences on the widened store.
pub fn grad_check_params_f32<O: ParamOp>(
    op: &O,
    store: &ParamStore<f32>,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_params_mixed(op, store, eps, per_param, seed).map(|(_, r32)| r32)
}

/// Checks the 64-bit and the 32-bit backward pass of `op` against one shared
/// set of 64-bit central differences. Returns `(f64 report, f32 report)`.
pub fn grad_check_params_mixed<O: ParamOp>(
    op: &O,
    store: &ParamStore<f32>,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<(GradCheckReport, GradCheckReport)> {
    fn analytic<T: Scalar, O: ParamOp>(op: &O, store: &ParamStore<T>) -> Result<(ParamStore<T>, u64)> {
        let mut tape = Tape::new();
        let out = op.apply(&mut tape, store)?;
        let sig = scalar_of(&tape, out)?.1;
        let grads = tape.backward(out)?;
        let mut acc = store.clone();
        acc.zero_grad();
        grads.accumulate_into(&mut acc)?;
        Ok((acc, sig))
    }
    let (g32, _) = analytic(op, store)?;
    let mut work: ParamStore<f64> = store.cast();
    let (g64, base) = analytic(op, &work)?;

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = op.apply(&mut t, s)?;
        scalar_of(&t, v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r64, mut r32) = (GradCheckReport::new(), GradCheckReport::new());
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        for i in pick(store.value(id).len(), Some(per_param), &mut rng) {
            let orig = work.get(id).value.data()[i];
            let numeric = central(orig, eps, base, |v| {
                work.get_mut(id).value.data_mut()[i] = v;
                Ok((v, eval(&work)?))
            })?;
            work.get_mut(id).value.data_mut()[i] = orig;
            r64.record(g64.get(id).grad.data()[i], numeric)?;
            r32.record(g32.get(id).grad.data()[i] as f64, numeric)?;
        }
    }
    Ok((r64, r32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::<f64>::from_fn(&[5], |i| i as f64 - 2.0).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.scale(v[0], 3.0);
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn non_finite_is_a_diagnostic_error() {
        let x = Tensor::<f64>::full(&[2], f64::NAN).unwrap();
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-4);
        assert!(matches!(r, Err(SspError::NonFinite(_))));
    }
}
