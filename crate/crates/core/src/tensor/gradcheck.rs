//! Central finite-difference gradient checking.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub max_coords: usize,
    /// Floor on the relative-error denominator so coordinates whose true
    /// gradient vanishes are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            max_coords: 64,
            abs_floor: 1e-4,
            seed: 0,
        }
    }
}

/// Worst coordinate of one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates whose `±eps` evaluations crossed a ReLU or nearest-
    /// neighbour switch, where central differences are not a valid oracle.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_err >= self.tol)
    }

    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.coords_checked).sum()
    }

    /// Total coordinates evaluated across a branch switch.
    pub fn kinks(&self) -> usize {
        self.tensors.iter().map(|t| t.kinks).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck: {} tensors, {} coordinates ({} across kinks), max rel err {:.3e} (tol {:.1e}) -> {}",
            self.tensors.len(),
            self.coords_checked(),
            self.kinks(),
            self.max_rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        for t in self.failing() {
            writeln!(
                f,
                "  {}: rel err {:.3e} at [{}] analytic {:.6e} numeric {:.6e}",
                t.name, t.max_rel_err, t.worst_index, t.analytic, t.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare tape gradients of the scalar built by `forward` against central
/// differences `(f(p+eps) - f(p-eps)) / (2 eps)`, per sampled coordinate.
pub fn grad_check<F>(forward: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = forward(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.gradients(&tape, &grads);
    let base_branch = tape.branch_signature();
    drop(tape);

    let eval = |p: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = forward(&mut tape, &bound)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("forward value {v} during gradcheck")));
        }
        Ok((v, tape.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let n = value.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: name.to_string(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            kinks: 0,
        };
        for &i in &coords {
            let orig = value.data()[i];
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig + opts.eps;
            let (up, up_branch) = eval(&work)?;
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig - opts.eps;
            let (down, down_branch) = eval(&work)?;
            if up_branch != base_branch || down_branch != base_branch {
                check.kinks += 1;
            }
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[name].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel > check.max_rel_err || (check.max_rel_err == 0.0 && i == coords[0]) {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tol,
        max_rel_err,
        tol: opts.tol,
        tensors,
    })
}
