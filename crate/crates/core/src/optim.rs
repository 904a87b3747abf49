//! Projected BFGS for smooth minimization with optional lower bounds.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

const APPROX_WOLFE_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Stop when the projected gradient max-norm falls below this.
    pub gradient_tolerance: f64,
    pub max_evaluations: usize,
    pub armijo: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-6,
            max_evaluations: 200,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, lower: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| if at_bound(x[i], lower[i]) && g[i] > 0.0 { 0.0 } else { g[i] }),
    )
}

fn at_bound(x: f64, lower: f64) -> bool {
    lower.is_finite() && x <= lower + 1e-12 * lower.abs().max(1.0)
}

/// Minimizes `objective` (value and gradient) from `x0` subject to
/// `x_i >= lower[i]`. `inverse_hessian` seeds the quasi-Newton matrix.
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    inverse_hessian: DMatrix<f64>,
    options: &BfgsOptions,
) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    let project = |v: DVector<f64>| {
        DVector::from_iterator(n, v.iter().zip(lower).map(|(&a, &lb)| a.max(lb)))
    };
    let mut x = project(DVector::from_column_slice(x0));
    let (mut f, g0) = objective(x.as_slice())?;
    let mut g = DVector::from_vec(g0);
    let mut evaluations = 1;
    let mut h = inverse_hessian;
    let identity_scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);

    loop {
        let pg = projected_gradient(&x, &g, lower);
        if pg.amax() <= options.gradient_tolerance {
            return Ok(BfgsOutcome {
                x: x.as_slice().to_vec(),
                value: f,
                gradient: g.as_slice().to_vec(),
                evaluations,
                converged: true,
            });
        }
        if evaluations >= options.max_evaluations {
            break;
        }

        // Free coordinates only: bound-active ones are held fixed this step.
        let free: Vec<bool> = (0..n)
            .map(|i| !(at_bound(x[i], lower[i]) && g[i] > 0.0))
            .collect();
        let mut h_free = h.clone();
        for i in 0..n {
            if !free[i] {
                h_free.row_mut(i).fill(0.0);
                h_free.column_mut(i).fill(0.0);
            }
        }
        let mut d = -(&h_free * &g);
        if g.dot(&d) >= 0.0 {
            h = DMatrix::identity(n, n) * identity_scale;
            d = -pg.clone() * identity_scale;
        }

        let mut t = 1.0;
        let mut accepted = None;
        while evaluations < options.max_evaluations {
            let candidate = project(&x + &d * t);
            let step = &candidate - &x;
            let (fc, gc) = objective(candidate.as_slice())?;
            evaluations += 1;
            let gc = DVector::from_vec(gc);
            let slope = g.dot(&step);
            let armijo = fc <= f + options.armijo * slope;
            // Near the optimum the decrease drops below the rounding noise of
            // `f`; there the approximate Wolfe test of Hager and Zhang uses
            // the directional derivative instead.
            let approx_wolfe = fc <= f + APPROX_WOLFE_EPS * f.abs().max(1.0)
                && gc.dot(&step) >= 0.9 * slope
                && gc.dot(&step) <= -0.8 * slope;
            if fc.is_finite() && slope < 0.0 && (armijo || approx_wolfe) {
                accepted = Some((candidate, fc, gc));
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No descent possible along the quasi-Newton direction: stalled
            // at numerical precision.
            let stalled = pg.amax() <= 1e3 * options.gradient_tolerance;
            return Ok(BfgsOutcome {
                x: x.as_slice().to_vec(),
                value: f,
                gradient: g.as_slice().to_vec(),
                evaluations,
                converged: stalled,
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    Ok(BfgsOutcome {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        evaluations,
        converged: false,
    })
}
