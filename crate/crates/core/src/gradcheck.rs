//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input or parameter index, flat index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f`, a scalar program of one tensor input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    GradCheck::new()
        .step(h)
        .tol(tol)
        .run(std::slice::from_ref(x), |tape, xs| f(tape, xs[0]))
}

/// Configurable checker over several inputs, optionally sampling entries.
#[derive(Debug, Clone)]
pub struct GradCheck {
    step: f64,
    tol: f64,
    max_entries: Option<(usize, u64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new()
    }
}

impl GradCheck {
    pub fn new() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            max_entries: None,
        }
    }

    pub fn step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Checks at most `n` randomly chosen entries per input.
    pub fn sample(mut self, n: usize, seed: u64) -> Self {
        self.max_entries = Some((n, seed));
        self
    }

    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport, TensorError>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
    {
        let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
            let out = f(&tape, &vars)?;
            scalar_of(out)
        };

        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)?;
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

        let mut report = self.empty_report();
        let mut values = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            for i in self.entries(which, input.len()) {
                let orig = input.data()[i];
                values[which].data_mut()[i] = orig + self.step;
                let plus = eval(&values)?;
                values[which].data_mut()[i] = orig - self.step;
                let minus = eval(&values)?;
                values[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                report.record((which, i), analytic[which].data()[i], numeric);
            }
        }
        Ok(report)
    }

    /// Checks the gradient of a scalar program with respect to every tensor
    /// of a parameter store. `f` builds the program from a binder.
    pub fn run_params<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport, TensorError>
    where
        F: for<'t> Fn(&Binder<'t>) -> Result<Var<'t>, TensorError>,
    {
        let analytic = {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, store);
            let out = f(&binder)?;
            scalar_of(out)?;
            let mut grads = tape.backward(out)?;
            binder.collect(&mut grads)
        };
        let eval = |s: &ParamStore| -> Result<f64, TensorError> {
            let tape = Tape::new();
            let binder = Binder::frozen(&tape, s);
            scalar_of(f(&binder)?)
        };
        let mut report = self.empty_report();
        let mut work = store.clone();
        for (id, _, value) in store.iter() {
            for i in self.entries(id.index(), value.len()) {
                let orig = value.data()[i];
                work.get_mut(id).data_mut()[i] = orig + self.step;
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig - self.step;
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                report.record((id.index(), i), analytic.get(id).data()[i], numeric);
            }
        }
        Ok(report)
    }

    fn empty_report(&self) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            tol: self.tol,
        }
    }

    fn entries(&self, which: usize, len: usize) -> Vec<usize> {
        match self.max_entries {
            Some((n, seed)) if n < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut picked = sample(&mut rng, len, n).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        }
    }
}

impl GradCheckReport {
    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn scalar_of(out: Var<'_>) -> Result<f64, TensorError> {
    let v = out.value();
    if v.len() != 1 {
        return Err(TensorError::shape("grad_check", format!("program output has shape {:?}", v.shape())));
    }
    if !v.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = v.mul(v).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(v).data(), &[2.0, 4.0]);
        let r = grad_check(|_, v| v.mul(v)?.sum(), &x, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!((r.analytic - r.numeric).abs() <= 1e-8, "{r:?}");
        assert!(r.passed());
    }

    #[test]
    fn softmax_dot_passes_tight_tolerance() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 0.8, 0.05]).unwrap();
        let w = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let w = tape.constant(w.clone());
                v.softmax(0)?.mul(w)?.sum()
            },
            &x,
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn non_finite_program_is_an_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let one = tape.constant(Tensor::ones(&[1]));
                one.div(v)?.sum()
            },
            &x,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // gather duplicates an entry; a checker that ignored accumulation would miss it
        let x = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        let r = grad_check(|_, v| v.gather(&[3], vec![0, 0, 1].into())?.mul(v.gather(&[3], vec![0, 1, 1].into())?)?.sum(), &x, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(r.passed());
        assert!(relative_error(1.0, 1.1) > DEFAULT_TOL);
    }
}
