//! Scalar root finding for monotone functions.

use crate::error::{Error, Result};

/// Bracket expansion stops once the interval is wider than this.
pub const MAX_BRACKET_WIDTH: f64 = 1e6;

/// Grow `[lo, hi]` outward (doubling the step each time) until
/// `f(lo) <= target <= f(hi)` for non-decreasing `f`.
pub fn expand_bracket(
    f: &mut impl FnMut(f64) -> Result<f64>,
    target: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<(f64, f64)> {
    let mut step = hi - lo;
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    while flo > target || fhi < target {
        if hi - lo > MAX_BRACKET_WIDTH {
            return Err(Error::BracketFailure { target });
        }
        if flo > target {
            lo -= step;
            flo = f(lo)?;
        }
        if fhi < target {
            hi += step;
            fhi = f(hi)?;
        }
        step *= 2.0;
    }
    Ok((lo, hi))
}

/// Bisection for non-decreasing `f`: stops when `|f(x) - target| <= ftol`
/// or the bracket collapses to floating resolution.
pub fn bisect(
    mut f: impl FnMut(f64) -> Result<f64>,
    target: f64,
    lo: f64,
    hi: f64,
    ftol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = expand_bracket(&mut f, target, lo, hi)?;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let fm = f(mid)?;
        if (fm - target).abs() <= ftol {
            return Ok(mid);
        }
        if fm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Newton steps safeguarded by bisection; `f` returns value and slope.
pub fn newton_bisect(
    mut f: impl FnMut(f64) -> Result<(f64, f64)>,
    target: f64,
    lo: f64,
    hi: f64,
    xtol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = expand_bracket(&mut |x| f(x).map(|v| v.0), target, lo, hi)?;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (fx, dfx) = f(x)?;
        let r = fx - target;
        if r == 0.0 {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if dfx > 0.0 { x - r / dfx } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= xtol * (1.0 + x.abs()) || hi - lo <= xtol * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_cube_root() {
        let r = bisect(|x| Ok(x * x * x), 27.0, -1.0, 2.0, 1e-12).unwrap();
        assert!((r - 3.0).abs() < 1e-9);
    }

    #[test]
    fn newton_matches_bisection() {
        let f = |x: f64| Ok((x.tanh(), 1.0 - x.tanh().powi(2)));
        let r = newton_bisect(f, 0.9, -1.0, 2.0, 1e-14).unwrap();
        assert!((r - 0.9f64.atanh()).abs() < 1e-12);
    }

    #[test]
    fn bracket_failure_on_unreachable_target() {
        let e = bisect(|x| Ok(x.tanh()), 2.0, -1.0, 2.0, 1e-9).unwrap_err();
        assert!(matches!(e, Error::BracketFailure { .. }));
    }
}
