//! Central finite-difference checks of tape gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Result;
use crate::params::Checkpoint;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size `h` of the central difference.
    pub step: f64,
    /// Pass threshold on the relative discrepancy.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged by absolute error at this scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamDiscrepancy {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub per_param: BTreeMap<String, ParamDiscrepancy>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.values().all(|d| d.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .values()
            .map(|d| d.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, d)| d.max_rel_error > self.tol)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, d) in &self.per_param {
            let mark = if d.max_rel_error <= self.tol {
                "ok  "
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{mark} {name:<32} max_rel={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
                d.max_rel_error, d.worst_index, d.analytic, d.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of `f` against central differences.
///
/// `f` must build a scalar loss on the given tape and register every tensor
/// of `theta` as a parameter under its own name.
pub fn grad_check<F>(f: F, theta: &Checkpoint, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Checkpoint) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, theta)?;
        tape.backward(loss)?.into_params()
    };
    let eval = |ck: &Checkpoint| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, ck)?;
        Ok(tape.value(loss).item())
    };

    let mut per_param = BTreeMap::new();
    let mut probe = theta.clone();
    for (name, t) in &theta.tensors {
        let mut worst = ParamDiscrepancy {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric, cfg.floor);
            if rel > worst.max_rel_error || i == 0 {
                worst = ParamDiscrepancy {
                    max_rel_error: rel,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        per_param,
    })
}
