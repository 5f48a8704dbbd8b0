use super::{Scalar, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate of the worst disagreement.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares a reverse-mode gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at a point. When
/// `coords` is `Some`, only those flat coordinates are perturbed.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<(f64, Tensor<S>)>,
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, analytic) = f(x)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: 0, analytic: 0.0, numeric: 0.0, coords_checked: coords.len() };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = S::from_f64(orig.to_f64() + eps);
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = S::from_f64(orig.to_f64() - eps);
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report = GradCheckReport { max_rel_error: rel, worst: i, analytic: a, numeric, ..report };
        }
    }
    Ok(report)
}
