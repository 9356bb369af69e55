use std::panic::AssertUnwindSafe;

use super::{Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    /// Set when evaluation itself failed (non-finite values, panics).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err.iter().all(|&e| e <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

const FD_STEP: f64 = 1e-5;

/// Check `f`'s analytic gradients against central finite differences
/// (step 1e-5, 64-bit). `f` must map the leaf vars to a scalar output.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    tol: f64,
) -> GradCheckReport {
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Tensor<f64>>>), String> {
        std::panic::catch_unwind(AssertUnwindSafe(|| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = f(&mut tape, &vars);
            assert_eq!(tape.value(out).numel(), 1, "grad_check target must be scalar");
            tape.backward(out);
            let loss = tape.value(out).data()[0];
            let grads = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
            (loss, grads)
        }))
        .map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "evaluation panicked".into())
        })
    };

    let analytic = match eval(inputs) {
        Ok((_, grads)) => grads,
        Err(e) => {
            return GradCheckReport { max_rel_err: vec![f64::INFINITY; inputs.len()], tol, failure: Some(e) }
        }
    };

    let mut max_rel_err = vec![0.0f64; inputs.len()];
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic_grad = match &analytic[ti] {
            Some(g) => g.clone(),
            None => Tensor::zeros(input.shape()),
        };
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = match eval(&work) {
                Ok((l, _)) => l,
                Err(e) => {
                    return GradCheckReport { max_rel_err, tol, failure: Some(e) };
                }
            };
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = match eval(&work) {
                Ok((l, _)) => l,
                Err(e) => {
                    return GradCheckReport { max_rel_err, tol, failure: Some(e) };
                }
            };
            work[ti].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic_grad.data()[ei];
            if !fd.is_finite() || !a.is_finite() {
                return GradCheckReport {
                    max_rel_err,
                    tol,
                    failure: Some(format!("non-finite gradient for input {ti} element {ei}")),
                };
            }
            let rel = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
            if rel > max_rel_err[ti] {
                max_rel_err[ti] = rel;
            }
        }
    }
    GradCheckReport { max_rel_err, tol, failure: None }
}
