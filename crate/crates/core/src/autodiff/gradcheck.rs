//! Central finite-difference verification of adjoint rules.
//!
//! The checker is deliberately slow and honest: for every coordinate it
//! rebuilds the graph at the (possibly nudged) point, recomputes the
//! analytic gradient there, and compares against `(f(x+h) - f(x-h)) / 2h`.
//! Coordinates that straddle a kink of `relu`/`abs`/max-style ops are
//! detected by disagreeing one-sided slopes and nudged away before the
//! comparison.

use super::{Graph, Real, Tensor};

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub nudged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordReport> {
        let tol = self.tol;
        self.coords.iter().filter(move |c| c.rel_err > tol)
    }
}

fn eval<R: Real>(
    f: &impl Fn(&mut Graph<R>, Tensor) -> Tensor,
    shape: &[usize],
    x: &[f64],
) -> f64 {
    let mut g: Graph<R> = Graph::new();
    let t = g.leaf_f64(shape, x, false).expect("grad_check leaf");
    let y = f(&mut g, t);
    assert_eq!(g.numel(y), 1, "grad_check functions must be scalar-valued");
    g.values(y)[0].f64()
}

fn analytic_at<R: Real>(
    f: &impl Fn(&mut Graph<R>, Tensor) -> Tensor,
    shape: &[usize],
    x: &[f64],
    index: usize,
) -> f64 {
    let mut g: Graph<R> = Graph::new();
    let t = g.leaf_f64(shape, x, true).expect("grad_check leaf");
    let y = f(&mut g, t);
    g.backward(y).expect("grad_check backward");
    g.grad(t).map(|gr| gr[index].f64()).unwrap_or(0.0)
}

/// Checks `d f / d x` coordinate by coordinate at `x0`.
///
/// The relative error is `|a - n| / max(1, |a|, |n|)`, i.e. absolute below
/// unit gradient magnitude and relative above it.
pub fn grad_check<R: Real>(
    f: impl Fn(&mut Graph<R>, Tensor) -> Tensor,
    shape: &[usize],
    x0: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let mut coords = Vec::with_capacity(x0.len());
    let mut max_rel_err = 0.0f64;

    for index in 0..x0.len() {
        let mut x = x0.to_vec();
        let mut nudged = false;

        // move off kinks: one-sided slopes must agree before we trust the
        // central difference
        for _attempt in 0..4 {
            let y0 = eval(&f, shape, &x);
            let mut xp = x.clone();
            xp[index] += h;
            let mut xm = x.clone();
            xm[index] -= h;
            let (yp, ym) = (eval(&f, shape, &xp), eval(&f, shape, &xm));
            let s_fwd = (yp - y0) / h;
            let s_bwd = (y0 - ym) / h;
            let scale = s_fwd.abs().max(s_bwd.abs()).max(1.0);
            if (s_fwd - s_bwd).abs() <= 20.0 * tol * scale {
                break;
            }
            x[index] += 2.7 * h;
            nudged = true;
        }

        let analytic = analytic_at(&f, shape, &x, index);
        let mut xp = x.clone();
        xp[index] += h;
        let mut xm = x.clone();
        xm[index] -= h;
        let numeric = (eval(&f, shape, &xp) - eval(&f, shape, &xm)) / (2.0 * h);

        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_rel_err = max_rel_err.max(rel_err);
        coords.push(CoordReport { index, analytic, numeric, rel_err, nudged });
    }

    GradCheckReport { coords, max_rel_err, tol, pass: max_rel_err <= tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_passes_at_any_tol() {
        let report = grad_check::<f64>(
            |g, x| g.sum(x),
            &[2, 2],
            &[0.3, -0.7, 1.1, 0.0],
            1e-3,
            1e-10,
        );
        assert!(report.pass, "max err {}", report.max_rel_err);
    }

    #[test]
    fn deliberately_wrong_adjoint_fails() {
        // an adjoint claiming d(sum)/dx = 2 instead of 1: realize it by
        // differentiating 2*sum(x) while the numeric side sees sum(x)
        let shape = [3usize];
        let x0 = [0.5, 1.5, -0.25];
        let h = 1e-3;
        let f_value = |g: &mut Graph<f64>, x: Tensor| g.sum(x);
        let f_wrong = |g: &mut Graph<f64>, x: Tensor| {
            let s = g.sum(x);
            g.scale(s, 2.0)
        };
        for index in 0..3 {
            let analytic = analytic_at(&f_wrong, &shape, &x0, index);
            let mut xp = x0;
            xp[index] += h;
            let mut xm = x0;
            xm[index] -= h;
            let numeric =
                (eval(&f_value, &shape, &xp) - eval(&f_value, &shape, &xm)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            assert!(rel > 1e-3, "wrong adjoint must be flagged, rel={rel}");
        }
    }

    #[test]
    fn relu_kink_is_nudged() {
        // x0 exactly at the kink: the checker must nudge, not fail
        let report = grad_check::<f64>(
            |g, x| {
                let r = g.relu(x);
                g.sum(r)
            },
            &[3],
            &[0.0, -0.5, 0.5],
            1e-3,
            1e-3,
        );
        assert!(report.pass, "max err {}", report.max_rel_err);
        assert!(report.coords[0].nudged);
    }
}
