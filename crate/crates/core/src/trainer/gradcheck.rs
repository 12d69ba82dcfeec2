//! Central finite-difference gradient oracle.
//!
//! The comparison skips coordinates where the loss has a kink inside the
//! probe interval: there the half-step and full-step difference quotients
//! disagree, and the numeric value says nothing about the analytic one.
//! Skipped coordinates are counted, never silently dropped.

use serde::{Deserialize, Serialize};

/// Entries with `|analytic| + |numeric|` at or below this are not compared.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinate of the worst relative error.
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub below_floor: usize,
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
            below_floor: 0,
            skipped_kinks: 0,
        }
    }

    /// Combines two reports; indices of `other` are offset by `offset`.
    pub fn merge(mut self, other: &GradcheckReport, offset: usize) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index.map(|i| i + offset);
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self.checked += other.checked;
        self.below_floor += other.below_floor;
        self.skipped_kinks += other.skipped_kinks;
        self
    }
}

/// `|a − n| / max(|a|, |n|)`, or `None` below [`MAGNITUDE_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    if analytic.abs() + numeric.abs() <= MAGNITUDE_FLOOR {
        return None;
    }
    Some((analytic - numeric).abs() / analytic.abs().max(numeric.abs()))
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// `f` receives a perturbed copy of `x` and must be a pure function of it.
pub fn check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> GradcheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut report = GradcheckReport::empty();
    let mut probe = x.to_vec();
    let f0 = f(&probe);
    let mut eval = |probe: &mut Vec<f64>, i: usize, h: f64| {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(probe);
        probe[i] = orig - h;
        let fm = f(probe);
        probe[i] = orig;
        (fp, fm)
    };
    let quotient = |(fp, fm): (f64, f64), h: f64| (fp - fm) / (2.0 * h);
    // second difference over h; h·f'' when smooth, O(jump) across a kink
    let curvature = |(fp, fm): (f64, f64), h: f64| (fp + fm - 2.0 * f0) / h;
    for i in 0..x.len() {
        let full = eval(&mut probe, i, step);
        let numeric = quotient(full, step);
        let Some(rel) = relative_error(analytic[i], numeric) else {
            report.below_floor += 1;
            continue;
        };
        if rel > 1e-6 {
            // A smooth function has D(h) and D(h/2) agreeing to O(h²) and the
            // curvature term halving with h. A kink in [x−h, x+h] breaks one
            // of the two: off-centre it shifts D, centred it pins the
            // curvature term at the jump size.
            let half = eval(&mut probe, i, step / 2.0);
            let scale = numeric.abs().max(MAGNITUDE_FLOOR);
            let spread = (numeric - quotient(half, step / 2.0)).abs() / scale;
            let bend = (curvature(full, step) - 2.0 * curvature(half, step / 2.0)).abs() / scale;
            if spread > 1e-3 || bend > 1e-3 {
                report.skipped_kinks += 1;
                continue;
            }
        }
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
