//! Finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::model::SplitModel;
use crate::tensor::Tensor;

/// Anything exposing an ordered list of parameter tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Parameterized for SplitModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }
}

/// A bare list of tensors; lets any small graph be gradient-checked,
/// including w.r.t. its inputs.
#[derive(Clone, Debug)]
pub struct ParamSet(pub Vec<Tensor>);

impl Parameterized for ParamSet {
    fn parameters(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().collect()
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Central-difference checker. The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
    /// Use the fourth-order five-point stencil instead of the two-point one.
    pub five_point: bool,
    /// Added to every analytic gradient element; used to prove the checker
    /// detects a wrong gradient.
    pub fault: Option<f64>,
}

impl GradCheck {
    pub fn new(tolerance: f64) -> Self {
        GradCheck { tolerance, step: 1e-5, floor: 1e-6, five_point: false, fault: None }
    }

    pub fn inject_fault(mut self, delta: f64) -> Self {
        self.fault = Some(delta);
        self
    }

    /// `loss_fn` records a scalar loss on a fresh tape and returns it with
    /// the tape handles of the model parameters, aligned with
    /// [`Parameterized::parameters`] (`None` for unused parameters). It must
    /// be a pure function of the parameters.
    pub fn run<M, F>(&self, model: &mut M, mut loss_fn: F) -> Result<GradCheckReport>
    where
        M: Parameterized,
        F: FnMut(&M, &mut Tape) -> Result<(Var, Vec<Option<Var>>)>,
    {
        self.run_owned(model, |m| {
            let mut tape = Tape::new();
            let (loss, vars) = loss_fn(m, &mut tape)?;
            Ok((tape, loss, vars))
        })
    }

    /// Like [`GradCheck::run`] for loss functions that build their own tape.
    pub fn run_owned<M, F>(&self, model: &mut M, mut loss_fn: F) -> Result<GradCheckReport>
    where
        M: Parameterized,
        F: FnMut(&M) -> Result<(Tape, Var, Vec<Option<Var>>)>,
    {
        let (tape, loss, vars) = loss_fn(model)?;
        let grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|p| p.shape().to_vec()).collect();
        let analytic: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                let mut g = vars.get(i).copied().flatten().map_or(vec![0.0; n], |v| grads.get_or_zeros(v, n));
                if let Some(d) = self.fault {
                    g.iter_mut().for_each(|x| *x += d);
                }
                g
            })
            .collect();
        drop(tape);

        let mut eval = |m: &M| -> Result<f64> {
            let (t, l, _) = loss_fn(m)?;
            Ok(t.value(l).data()[0])
        };
        let mut report = Vec::with_capacity(shapes.len());
        for (pi, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut worst: f64 = 0.0;
            for e in 0..n {
                let orig = model.parameters()[pi].data()[e];
                let mut at = |offset: f64| -> Result<f64> {
                    model.parameters_mut()[pi].data_mut()[e] = orig + offset;
                    eval(model)
                };
                let h = self.step;
                let numeric = if self.five_point {
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                } else {
                    (at(h)? - at(-h)?) / (2.0 * h)
                };
                model.parameters_mut()[pi].data_mut()[e] = orig;
                let a = analytic[pi][e];
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
            report.push(ParamError { index: pi, shape: shape.clone(), max_rel_error: worst });
        }
        let passed = report.iter().all(|p| p.max_rel_error < self.tolerance);
        Ok(GradCheckReport { params: report, tolerance: self.tolerance, passed })
    }
}

/// Runs a [`GradCheck`] with default step and floor.
pub fn grad_check<M, F>(model: &mut M, loss_fn: F, tolerance: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M, &mut Tape) -> Result<(Var, Vec<Option<Var>>)>,
{
    GradCheck::new(tolerance).run(model, loss_fn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(set: &ParamSet, tape: &mut Tape) -> Result<(Var, Vec<Option<Var>>)> {
        let x = tape.param(&set.0[0]);
        let sq = tape.mul(x, x)?;
        let cube = tape.mul(sq, x)?;
        Ok((tape.sum(cube), vec![Some(x)]))
    }

    #[test]
    fn exact_gradient_passes_and_fault_fails() {
        let mut set = ParamSet(vec![Tensor::parameter(vec![3], vec![0.5, -1.5, 2.0]).unwrap()]);
        let ok = grad_check(&mut set, cubic, 1e-4).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = GradCheck::new(1e-4).inject_fault(0.1).run(&mut set, cubic).unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rel_error() > 1e-3);
        // Parameters are restored after probing.
        assert_eq!(set.0[0].data(), &[0.5, -1.5, 2.0]);
    }
}
