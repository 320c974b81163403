//! Central finite-difference gradient checking.
//!
//! The checker only ever runs forward passes, so it stays independent of the
//! backward rules it is used to verify.

use crate::model::{Binding, JrmModel};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Relative error with a floor tied to the gradient's overall scale, so that
/// entries that are zero analytically do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `f` at `inputs` against central differences
/// with step `eps`. Every input is treated as a parameter.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t)).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.item(l))
    };

    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let x0 = work[p].data()[i];
            work[p].data_mut()[i] = x0 + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = x0 - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = x0;
            *gi = (up - down) / (2.0 * eps);
        }
        numeric.push(g);
    }

    let scale = numeric
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n) {
            max_rel_err = max_rel_err.max(rel_err(x, y, scale));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        checked,
    })
}

/// Same comparison over every parameter of `model`, where `f` builds a scalar
/// loss from a binding. The model is perturbed in place and restored.
pub fn check_model<F, E>(model: &mut JrmModel, eps: f64, f: F) -> std::result::Result<GradCheck, E>
where
    F: Fn(&JrmModel, &mut Tape, &mut Binding) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let mut bind = model.bind(true);
        let loss = f(model, &mut tape, &mut bind)?;
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = (0..model.params().len())
            .map(|id| vec![0.0; model.params().tensor(id).numel()])
            .collect();
        for (id, v) in bind.bound() {
            if let Some(g) = tape.grad(v) {
                grads[id] = g.data().to_vec();
            }
        }
        grads
    };
    let eval = |m: &JrmModel| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let mut bind = m.bind(false);
        let l = f(m, &mut tape, &mut bind)?;
        Ok(tape.item(l))
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for (id, a) in analytic.iter().enumerate() {
        let mut g = vec![0.0; a.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let x0 = model.params().tensor(id).data()[i];
            model.params_mut().tensor_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(model);
            model.params_mut().tensor_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(model);
            model.params_mut().tensor_mut(id).data_mut()[i] = x0;
            *gi = (up? - down?) / (2.0 * eps);
        }
        numeric.push(g);
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            max_rel_err = max_rel_err.max(rel_err(x, y, scale));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err, checked })
}
