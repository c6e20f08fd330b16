//! Compact dense BFGS with backtracking line search.
//!
//! The corrected objective is smooth and close to convex for moderate
//! bandwidths, so a plain quasi-Newton iteration with an Armijo line search
//! is adequate. The parameter dimension is small (covariate count), hence
//! the dense inverse-Hessian representation.

/// Stopping rules. `grad_tol` is relative to `1 + |f|`; `step_tol` bounds
/// the accepted step length.
#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iters: 500, grad_tol: 1e-8, step_tol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` from `x0`. `f` returns the value and the analytic gradient.
pub fn minimize<F>(f: F, x0: &[f64], opts: &OptimOptions) -> OptimResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let p = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = f(&x);
    let mut h_inv = vec![0.0; p * p]; // row-major inverse Hessian approximation
    for i in 0..p {
        h_inv[i * p + i] = 1.0;
    }
    let mut first_update = true;

    let mut iterations = 0;
    loop {
        let gnorm = norm2(&gx);
        if gnorm <= opts.grad_tol * (1.0 + fx.abs()) {
            return OptimResult { x, value: fx, grad_norm: gnorm, iterations, converged: true };
        }
        if iterations >= opts.max_iters {
            return OptimResult { x, value: fx, grad_norm: gnorm, iterations, converged: false };
        }
        iterations += 1;

        // direction d = -H g
        let mut d = vec![0.0; p];
        for i in 0..p {
            d[i] = -dot(&h_inv[i * p..(i + 1) * p], &gx);
        }
        let mut slope = dot(&d, &gx);
        if slope >= 0.0 {
            // Not a descent direction (stale curvature); reset to steepest descent.
            for i in 0..p {
                h_inv[i * p + i] = 1.0;
                for j in 0..p {
                    if j != i {
                        h_inv[i * p + j] = 0.0;
                    }
                }
                d[i] = -gx[i];
            }
            first_update = true;
            slope = -dot(&gx, &gx);
        }

        // Armijo backtracking from a unit step.
        let c1 = 1e-4;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (ft, gt) = f(&xt);
            if ft <= fx + c1 * alpha * slope && ft.is_finite() {
                accepted = Some((xt, ft, gt, alpha));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xt, ft, gt, alpha)) = accepted else {
            // Line search exhausted: stationary to working precision.
            let converged = gnorm <= 1e-5 * (1.0 + fx.abs());
            return OptimResult { x, value: fx, grad_norm: gnorm, iterations, converged };
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let step_len = alpha * norm2(&d);
        x = xt;
        fx = ft;
        gx = gt;

        if step_len <= opts.step_tol * (1.0 + norm2(&x)) {
            let gnorm = norm2(&gx);
            return OptimResult { x, value: fx, grad_norm: gnorm, iterations, converged: true };
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if first_update {
                // Scale the initial matrix to the problem's curvature.
                let yy = dot(&y, &y);
                if yy > 0.0 {
                    let scale = sy / yy;
                    for i in 0..p {
                        for j in 0..p {
                            h_inv[i * p + j] = if i == j { scale } else { 0.0 };
                        }
                    }
                }
                first_update = false;
            }
            // H <- (I - rho s y')H(I - rho y s') + rho s s'
            let rho = 1.0 / sy;
            let mut hy = vec![0.0; p];
            for i in 0..p {
                hy[i] = dot(&h_inv[i * p..(i + 1) * p], &y);
            }
            let yhy = dot(&y, &hy);
            for i in 0..p {
                for j in 0..p {
                    h_inv[i * p + j] += rho * rho * yhy * s[i] * s[j]
                        - rho * (s[i] * hy[j] + hy[i] * s[j])
                        + rho * s[i] * s[j];
                }
            }
        }
    }
}
