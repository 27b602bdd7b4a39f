//! Gauss-Jacobi quadrature by the Golub-Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::beta::ln_beta;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights of an `n`-point rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Rule for `∫_{-1}^{1} f(t) (1-t)^α (1+t)^β dt`, nodes ascending. Weights
/// sum to `2^{α+β+1} B(α+1, β+1)`.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> GaussRule {
    assert!(n >= 1 && alpha > -1.0 && beta > -1.0);
    let ab = alpha + beta;
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let diag = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            let s = 2.0 * kf + ab;
            (beta * beta - alpha * alpha) / (s * (s + 2.0))
        };
        jac[(k, k)] = diag;
        if k + 1 < n {
            let j = kf + 1.0;
            // b₁ written in its cancelled form so α + β = -1 is safe
            let b = if k == 0 {
                4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + ab).powi(2) * (3.0 + ab))
            } else {
                let s = 2.0 * j + ab;
                4.0 * j * (j + alpha) * (j + beta) * (j + ab) / (s * s * (s + 1.0) * (s - 1.0))
            };
            jac[(k, k + 1)] = b.sqrt();
            jac[(k + 1, k)] = b.sqrt();
        }
    }
    let mu0 = ((ab + 1.0) * std::f64::consts::LN_2 + ln_beta(alpha + 1.0, beta + 1.0)).exp();
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    GaussRule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Rule on `[0, 1]` for the `Beta(a, b)` probability measure: nodes `δ` and
/// weights summing to one.
pub fn beta_rule(n: usize, a: f64, b: f64) -> GaussRule {
    // δ = (1+t)/2: δ^{a-1}(1-δ)^{b-1} ↔ (1-t)^{b-1}(1+t)^{a-1}
    let r = gauss_jacobi(n, b - 1.0, a - 1.0);
    let total: f64 = r.weights.iter().sum();
    GaussRule {
        nodes: r.nodes.iter().map(|t| (0.5 * (1.0 + t)).clamp(0.0, 1.0)).collect(),
        weights: r.weights.iter().map(|w| w / total).collect(),
    }
}

/// Cached rule for the single-zero posterior weight
/// `δ^{(p-3)/2} (1-δ)^{-1/2}`, i.e. `Beta((p-1)/2, 1/2)`.
pub fn single_zero_rule(n: usize, p: usize) -> Arc<GaussRule> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<GaussRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry((n, p))
        .or_insert_with(|| Arc::new(beta_rule(n, (p as f64 - 1.0) / 2.0, 0.5)))
        .clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta_moment(a: f64, b: f64, k: u32) -> f64 {
        (0..k).map(|j| (a + j as f64) / (a + b + j as f64)).product()
    }

    #[test]
    fn legendre_two_point() {
        let r = gauss_jacobi(2, 0.0, 0.0);
        let s = 1.0 / 3f64.sqrt();
        assert!((r.nodes[0] + s).abs() < 1e-14 && (r.nodes[1] - s).abs() < 1e-14);
        assert!((r.weights[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn chebyshev_first_kind() {
        // α = β = -1/2: nodes cos((2k-1)π/2n), equal weights π/n
        let n = 7;
        let r = gauss_jacobi(n, -0.5, -0.5);
        for (k, (x, w)) in r.nodes.iter().zip(&r.weights).enumerate() {
            let want = -((2 * k + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos();
            assert!((x - want).abs() < 1e-13);
            assert!((w - std::f64::consts::PI / n as f64).abs() < 1e-13);
        }
    }

    #[test]
    fn exact_for_beta_polynomial_moments() {
        for p in 2..=10 {
            let a = (p as f64 - 1.0) / 2.0;
            let r = beta_rule(10, a, 0.5);
            for k in 0..19 {
                let q: f64 = r.nodes.iter().zip(&r.weights).map(|(d, w)| w * d.powi(k as i32)).sum();
                let want = beta_moment(a, 0.5, k);
                assert!((q - want).abs() < 1e-12, "p={p} k={k}: {q} vs {want}");
            }
        }
    }

    #[test]
    fn sqrt_moment_converges() {
        // E√δ under Beta(1, 1/2) = B(3/2, 1/2)/B(1, 1/2) = π/4
        let r = single_zero_rule(50, 3);
        let q: f64 = r.nodes.iter().zip(&r.weights).map(|(d, w)| w * d.sqrt()).sum();
        assert!((q - std::f64::consts::FRAC_PI_4).abs() < 1e-6);
    }
}
