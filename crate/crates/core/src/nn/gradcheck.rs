use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_coord: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares `analytic` against central differences of `f` at `x` on the
/// listed coordinates. Relative error is
/// `max(|a - n| - r, 0) / max(|a|, |n|)` where
/// `r = eps * (|f(x+h)| + |f(x-h)|) / 2h` is the rounding resolution of the
/// difference quotient; disagreement below it is not measurable.
pub fn grad_check<T, F>(
    mut f: F,
    x: &[T],
    analytic: &[T],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
    };
    let step = T::lit(h);
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus).as_f64() / (2.0 * h);
        let a = analytic[i].as_f64();
        let resolution = f64::EPSILON * (plus.as_f64().abs() + minus.as_f64().abs()) / (2.0 * h);
        let excess = ((a - numeric).abs() - resolution).max(0.0);
        let rel = if excess == 0.0 { 0.0 } else { excess / a.abs().max(numeric.abs()) };
        report.checked += 1;
        if rel > report.max_rel_err || report.worst_coord.is_none() {
            report.max_rel_err = rel;
            report.worst_coord = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report
}

/// Up to `count` distinct coordinates out of `n`, sorted; all of them when
/// `count >= n`.
pub fn sample_coordinates(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, n, count).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = grad_check(|w: &[f64]| w[0] * w[0], &[3.0], &[6.0], &[0], 1e-6, 1e-5);
        assert!(r.passed());
        assert!((r.numeric_at_worst - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|_: &[f64]| 4.0, &[1.0, 2.0], &[0.0, 0.0], &[0, 1], 1e-6, 1e-5);
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.numeric_at_worst, 0.0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = grad_check(|w: &[f64]| w[0] * w[0], &[3.0], &[5.0], &[0], 1e-6, 1e-5);
        assert!(!r.passed());
        assert_eq!(r.worst_coord, Some(0));
    }

    #[test]
    fn rounding_below_resolution_is_ignored() {
        // f(x +- h) near 1e8 leaves the quotient about 1e-2 of resolution.
        let f = |w: &[f64]| 1e8 + w[0];
        let r = grad_check(f, &[0.3], &[1.0], &[0], 1e-6, 1e-5);
        assert!(r.passed(), "{r:?}");
        assert!(!grad_check(f, &[0.3], &[1.1], &[0], 1e-6, 1e-5).passed());
    }

    #[test]
    fn coordinate_sampling() {
        assert_eq!(sample_coordinates(4, 10, 0), vec![0, 1, 2, 3]);
        let s = sample_coordinates(1000, 50, 7);
        assert_eq!(s.len(), 50);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_coordinates(1000, 50, 7));
    }
}
