//! Finite-difference gradient oracle and tape-vs-oracle comparison.
//!
//! The oracle is intentionally independent of the tape: it only ever calls a
//! user-supplied scalar function, so it can falsify a broken backward rule.

use crate::error::DiffError;
use crate::store::ParamStore;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function, coordinate by coordinate:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, DiffError>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        if !hi.is_finite() {
            return Err(DiffError::NonFiniteEval { coordinate: i, value: hi });
        }
        if !lo.is_finite() {
            return Err(DiffError::NonFiniteEval { coordinate: i, value: lo });
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(Tensor::new(x.shape().to_vec(), grad))
}

/// Outcome of comparing a tape gradient against the finite-difference oracle.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    /// Label of the tensor holding the worst coordinate ("x" for single-input
    /// checks, the parameter name for store checks).
    pub worst_tensor: String,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares the tape gradient of `f` at `x` against the central-difference
/// oracle. `f` builds the scalar loss on the tape from the leafed input.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, ValueId) -> ValueId,
{
    let mut tape = Tape::new();
    let xid = tape.input(x);
    let loss = f(&mut tape, xid);
    tape.backward(loss);
    let tape_grad = tape.grad(xid).ok_or(DiffError::NoGradient)?.to_vec();

    let fd = finite_difference_gradient(
        |probe| {
            let mut t = Tape::new();
            let id = t.leaf(probe);
            let l = f(&mut t, id);
            t.item(l)
        },
        x,
        eps,
    )?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        worst_tensor: "x".to_string(),
        tol,
    };
    for (i, (&a, &b)) in tape_grad.iter().zip(fd.data()).enumerate() {
        let e = rel_err(a, b);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

/// Finite-difference check of every parameter in a store against gradients
/// already absorbed into it. `loss` must evaluate the same scalar (same data,
/// same injected noise) the gradients came from.
pub fn check_store_gradients<F>(
    store: &ParamStore,
    mut loss: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        worst_tensor: String::new(),
        tol,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let tape_grad = store
            .get(&name)
            .grad()
            .ok_or_else(|| DiffError::MissingGradient { param: name.clone() })?
            .to_vec();
        let mut probe = store.clone();
        for i in 0..tape_grad.len() {
            let orig = probe.get(&name).data()[i];
            probe.get_mut(&name).data_mut()[i] = orig + eps;
            let hi = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = orig - eps;
            let lo = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(DiffError::NonFiniteEval { coordinate: i, value: if hi.is_finite() { lo } else { hi } });
            }
            let fd = (hi - lo) / (2.0 * eps);
            let e = rel_err(tape_grad[i], fd);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_coordinate = i;
                report.worst_tensor = name.clone();
            }
        }
    }
    Ok(report)
}
