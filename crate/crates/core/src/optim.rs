//! Quasi-Newton minimization with central finite-difference gradients, and
//! a bracketed one-dimensional minimizer.

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when every gradient component is below this.
    pub gradient_tolerance: f64,
    /// Stop when an iteration changes the objective by less than this
    /// (relative) and the gradient is already small.
    pub relative_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 300,
            gradient_tolerance: 1e-4,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration (non-increasing).
    pub trace: Vec<f64>,
}

fn step_size(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient plus the diagonal of the Hessian, which comes
/// for free from the same evaluations.
fn fd_gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], fx: f64) -> (Vec<f64>, Vec<f64>) {
    let mut g = vec![0.0; x.len()];
    let mut d2 = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step_size(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
        d2[i] = (fp - 2.0 * fx + fm) / (h * h);
    }
    (g, d2)
}

pub fn minimize_bfgs(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let (mut g, d2) = fd_gradient(&mut f, &x, fx);
    // inverse Hessian approximation, row-major
    let mut hinv = vec![0.0; k * k];
    for i in 0..k {
        hinv[i * k + i] = if d2[i].is_finite() && d2[i] > 1e-8 {
            1.0 / d2[i]
        } else {
            1.0
        };
    }
    let mut trace = vec![fx];
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut converged = max_abs(&g) < opts.gradient_tolerance;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let mut dir: Vec<f64> = (0..k)
            .map(|i| -(0..k).map(|j| hinv[i * k + j] * g[j]).sum::<f64>())
            .collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope < 0.0) {
            // lost positive definiteness; restart along steepest descent
            for (i, v) in hinv.iter_mut().enumerate() {
                *v = if i % (k + 1) == 0 { 1.0 } else { 0.0 };
            }
            dir = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        // Armijo backtracking
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no further descent; accept if the gradient is already small
            converged = max_abs(&g) < 1e2 * opts.gradient_tolerance;
            break;
        };
        let (gn, _) = fd_gradient(&mut f, &xn, fnew);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..k).map(|i| (0..k).map(|j| hinv[i * k + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..k {
                for j in 0..k {
                    hinv[i * k + j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let rel = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        let gmax = max_abs(&g);
        if gmax < opts.gradient_tolerance || (rel < opts.relative_tolerance && gmax < 1e2 * opts.gradient_tolerance) {
            converged = true;
        }
    }
    BfgsResult {
        x,
        value: fx,
        iterations,
        converged,
        trace,
    }
}

/// Brent's method on `[lo, hi]`; returns `(argmin, min)`.
pub fn minimize_brent(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut qq = (x - v) * (fx - fw);
            let mut p = (x - v) * qq - (x - w) * r;
            qq = 2.0 * (qq - r);
            if qq > 0.0 {
                p = -p;
            }
            qq = qq.abs();
            if p.abs() < (0.5 * qq * e).abs() && p > qq * (a - x) && p < qq * (b - x) {
                e = d;
                d = p / qq;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_on_rosenbrock() {
        // [TRIVIAL] known minimum
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize_bfgs(
            f,
            &[-1.2, 1.0],
            &BfgsOptions {
                gradient_tolerance: 1e-6,
                ..Default::default()
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn brent_on_parabola() {
        // [TRIVIAL] known minimum
        let (x, fx) = minimize_brent(|x| (x - 0.7).powi(2) + 3.0, -5.0, 5.0, 1e-10);
        assert!((x - 0.7).abs() < 1e-8);
        assert!((fx - 3.0).abs() < 1e-14);
    }
}
