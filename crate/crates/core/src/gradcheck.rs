//! Central finite-difference oracle for tape adjoints.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        // 64-bit storage leaves plenty of headroom below the 1e-3 tolerance.
        Self { eps: 1e-6, tol: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    /// `max |analytic - numeric|` divided by the leaf's largest gradient
    /// magnitude (floored at 1e-8).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub grad_scale: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let loss = f(&tape, &vars)?.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    Ok(loss)
}

/// Compares tape adjoints of the scalar function `f` against central finite
/// differences for every element of every leaf.
///
/// `f` is re-run from scratch for each perturbation, so it must be
/// deterministic (reseed any random draws inside it).
pub fn check_gradients<F>(f: F, leaves: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let loss_var = f(&tape, &vars)?;
    let loss = loss_var.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut numeric = vec![0.0; leaf.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = leaf.data()[i];
            work[li].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[li].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[li].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * opts.eps);
        }
        let a = analytic[li].data();
        let scale = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max(x.abs()).max(y.abs()));
        let (mut worst, mut worst_index) = (0.0f64, 0);
        for (i, (x, y)) in a.iter().zip(&numeric).enumerate() {
            let d = (x - y).abs();
            if d > worst {
                worst = d;
                worst_index = i;
            }
        }
        reports.push(LeafReport {
            max_rel_error: worst / scale.max(1e-8),
            max_abs_error: worst,
            worst_index,
            grad_scale: scale,
        });
    }
    Ok(GradCheckReport {
        loss,
        leaves: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = check_gradients(
            |_, v| Ok(v[0].square().sum()),
            std::slice::from_ref(&x),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let tape = Tape::new();
        let v = tape.leaf(x);
        let g = tape.backward(v.square().sum()).unwrap().wrt(v);
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let res = check_gradients(|_, v| Ok(v[0].ln().sum()), &[x], GradCheckOptions::default());
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn kink_uses_zero_subgradient() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let report = check_gradients(
            |_, v| Ok(v[0].abs().sum()),
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
