//! Dense quasi-Newton minimization with a backtracking Armijo line search.

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// stop when `max |∇f| ≤ gtol`
    pub gtol: f64,
    /// stop when the decrease in `f` is below `ftol·(1 + |f|)`
    pub ftol: f64,
    pub max_backtracks: usize,
    /// largest step length accepted in the infinity norm
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 50, gtol: 1e-9, ftol: 1e-14, max_backtracks: 40, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// a line search ran out of backtracks
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f`, where `fg(x)` returns `(f(x), ∇f(x))`. Non-finite values are
/// treated as rejected steps. The returned point never has a larger value
/// than `x0`.
pub fn bfgs_minimize<F>(x0: &[f64], mut fg: F, opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x)?;
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
    };
    reset(&mut h);
    let mut fresh = true;
    let mut out = BfgsResult { x: x.clone(), f, grad: g.clone(), iterations: 0, converged: false, line_search_failed: false };
    if n == 0 {
        out.converged = true;
        return Ok(out);
    }
    for iter in 0..opts.max_iter {
        out.iterations = iter;
        if g.iter().all(|v| v.abs() <= opts.gtol) {
            out.converged = true;
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>()).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            reset(&mut h);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut t = if dmax > opts.max_step { opts.max_step / dmax } else { 1.0 };
        if fresh {
            // first step along -∇f: scale to something modest
            let gn = dmax.max(1e-300);
            t = t.min(1.0 / gn).max(1e-12);
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            match fg(&xn) {
                Ok((fnew, gnew)) if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) => {
                    if fnew <= f + 1e-4 * t * slope {
                        accepted = Some((xn, fnew, gnew));
                        break;
                    }
                }
                _ => {}
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if !fresh {
                reset(&mut h);
                fresh = true;
                continue;
            }
            out.line_search_failed = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let decrease = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                // Shanno-Phua scaling of the initial inverse Hessian
                let scale = sy / dot(&y, &y);
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        out.iterations = iter + 1;
        if decrease.abs() <= opts.ftol * (1.0 + f.abs()) {
            out.converged = true;
            break;
        }
    }
    if g.iter().all(|v| v.abs() <= opts.gtol) {
        out.converged = true;
    }
    out.x = x;
    out.f = f;
    out.grad = g;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((f, g))
        };
        let opts = BfgsOptions { max_iter: 500, gtol: 1e-10, ftol: 0.0, ..Default::default() };
        let r = bfgs_minimize(&[-1.2, 1.0], fg, &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_never_increases() {
        let c = [3.0, -1.0, 0.5];
        let fg = |x: &[f64]| {
            let f: f64 = x.iter().zip(&c).enumerate().map(|(i, (v, ci))| (i + 1) as f64 * (v - ci).powi(2)).sum();
            let g = x.iter().zip(&c).enumerate().map(|(i, (v, ci))| 2.0 * (i + 1) as f64 * (v - ci)).collect();
            Ok((f, g))
        };
        let r = bfgs_minimize(&[0.0; 3], fg, &BfgsOptions::default()).unwrap();
        for (x, ci) in r.x.iter().zip(&c) {
            assert!((x - ci).abs() < 1e-8);
        }
    }
}
