//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the recorded graph twice per perturbed element
//! (central differences), so the builder closure must construct the same
//! computation every call. Element subsampling keeps large inputs cheap;
//! the subsample is drawn from a caller-provided RNG so runs reproduce.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;

/// The element with the largest relative error seen during a check.
#[derive(Debug, Clone, Copy)]
pub struct WorstEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of one finite-difference run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} entries, max rel err {:.3e} (tol {:.0e}) ... {}",
            self.name,
            self.entries_checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                "\n  worst: input {} element {}: analytic {:.9e} vs numeric {:.9e}",
                w.input, w.element, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Settings for a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum accepted relative error, with the relative error of a pair
    /// (a, n) defined as |a - n| / max(|a|, |n|, 1e-8).
    pub tolerance: f64,
    /// Cap on perturbed elements per input; `None` checks every element.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-6,
            tolerance: 1e-5,
            max_entries_per_input: None,
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

impl GradCheck {
    /// Compare analytic gradients of `build` against central differences.
    ///
    /// `build` records the computation from the given leaves to a scalar
    /// loss. Inputs the loss does not depend on are expected to have zero
    /// gradient, and get checked like everything else.
    pub fn check<F>(
        &self,
        name: &str,
        inputs: &[Tensor],
        rng: &mut impl Rng,
        build: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    {
        let eval = |tensors: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };

        // One full pass for the analytic gradients.
        let mut tape = Tape::new();
        let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss, 1.0)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();

        let mut report = GradCheckReport {
            name: name.to_string(),
            entries_checked: 0,
            max_rel_err: 0.0,
            tolerance: self.tolerance,
            worst: None,
        };

        let mut work = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            let mut elements: Vec<usize> = (0..input.len()).collect();
            if let Some(cap) = self.max_entries_per_input {
                if elements.len() > cap {
                    elements.shuffle(rng);
                    elements.truncate(cap);
                    elements.sort_unstable();
                }
            }
            for ei in elements {
                let orig = work[ti].data()[ei];
                work[ti].data_mut()[ei] = orig + self.epsilon;
                let up = eval(&work)?;
                work[ti].data_mut()[ei] = orig - self.epsilon;
                let down = eval(&work)?;
                work[ti].data_mut()[ei] = orig;

                let numeric = (up - down) / (2.0 * self.epsilon);
                let a = analytic[ti][ei];
                let re = rel_err(a, numeric);
                report.entries_checked += 1;
                if re > report.max_rel_err {
                    report.max_rel_err = re;
                    report.worst = Some(WorstEntry {
                        input: ti,
                        element: ei,
                        analytic: a,
                        numeric,
                        rel_err: re,
                    });
                }
            }
        }
        Ok(report)
    }
}
