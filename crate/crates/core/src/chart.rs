//! Local coordinates `η = (γ, u₂..u_p, α)` around a base rotation `Q₀`:
//! `γ` in the original basis, `λ = λ(u)` through softplus gaps, and
//! `Q = Q₀·exp(S(α))`.
//!
//! The gradient of `-log C(λ, Qᵀγ) - tr(QΛQᵀS₁) + γᵀS₂` splits into a data
//! part, linear in `(S₁, S₂)`, and a normalizing-constant part shared by all
//! observations:
//!
//! ```text
//! ∂/∂γ = S₂ - Q·∂log C/∂γ̃
//! ∂/∂λⱼ = -(QᵀS₁Q)ⱼⱼ - ∂log C/∂λⱼ
//! ∂/∂Q = -2S₁QΛ - γ·(∂log C/∂γ̃)ᵀ,    ∂/∂αₖ = ⟨∂/∂Q, Q₀·Dexp_{S(α)}[Eₖ]⟩
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fb::{self, FbParams, LogNormConstGrad};
use crate::linalg;
use crate::sphere::{EigenvalueReparam, OrthogonalMatrix, SkewCoordinates};

/// Gap floor used when mapping `λ` to `u`.
pub const GAP_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Chart {
    base: OrthogonalMatrix,
    p: usize,
    basis: Vec<DMatrix<f64>>,
}

/// A point of the chart with everything its gradients need.
#[derive(Debug, Clone)]
pub struct ChartPoint {
    pub params: FbParams,
    pub gamma: DVector<f64>,
    pub reparam: EigenvalueReparam,
    pub log_c: LogNormConstGrad,
    /// `Q₀·Dexp_{S(α)}[Eₖ]` for every skew direction
    pub tangents: Vec<DMatrix<f64>>,
}

impl Chart {
    pub fn new(base: OrthogonalMatrix) -> Self {
        let p = base.dim();
        let basis = (0..linalg::skew_dim(p)).map(|k| linalg::skew_basis(p, k)).collect();
        Self { base, p, basis }
    }

    pub fn base(&self) -> &OrthogonalMatrix {
        &self.base
    }

    pub fn dim(&self) -> usize {
        2 * self.p - 1 + self.basis.len()
    }

    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        self.p..2 * self.p - 1
    }

    pub fn alpha_range(&self) -> std::ops::Range<usize> {
        2 * self.p - 1..self.dim()
    }

    /// Coordinates of `params`, whose rotation must equal the base.
    pub fn coordinates(&self, params: &FbParams) -> Vec<f64> {
        let mut x: Vec<f64> = params.gamma().iter().copied().collect();
        x.extend_from_slice(EigenvalueReparam::from_lambda(&params.lambda, GAP_FLOOR).free());
        x.extend(std::iter::repeat_n(0.0, self.basis.len()));
        x
    }

    pub fn params(&self, x: &[f64]) -> Result<FbParams> {
        let p = self.p;
        let gamma = DVector::from_column_slice(&x[self.gamma_range()]);
        let lambda = EigenvalueReparam::from_free(&x[self.u_range()]).lambda();
        let alpha = SkewCoordinates(x[self.alpha_range()].to_vec());
        let q = self.base.exp_skew(&alpha);
        let gt: Vec<f64> = (q.matrix().transpose() * &gamma).iter().copied().collect();
        debug_assert_eq!(gt.len(), p);
        FbParams::new(q, lambda, gt)
    }

    pub fn point(&self, x: &[f64]) -> Result<ChartPoint> {
        let params = self.params(x)?;
        let alpha = &x[self.alpha_range()];
        let tangents = if alpha.iter().all(|v| *v == 0.0) {
            self.basis.iter().map(|e| self.base.matrix() * e).collect()
        } else {
            let s = SkewCoordinates(alpha.to_vec()).to_matrix(self.p);
            self.basis.iter().map(|e| self.base.matrix() * linalg::expm_frechet(&s, e)).collect()
        };
        let log_c = fb::log_norm_const_grad(&params.lambda, &params.gamma_tilde)?;
        Ok(ChartPoint {
            gamma: params.gamma(),
            reparam: EigenvalueReparam::from_free(&x[self.u_range()]),
            params,
            log_c,
            tangents,
        })
    }

    fn assemble(&self, pt: &ChartPoint, dg: DVector<f64>, dl: Vec<f64>, dq: DMatrix<f64>) -> Vec<f64> {
        let mut out: Vec<f64> = dg.iter().copied().collect();
        out.extend(pt.reparam.pullback(&dl));
        out.extend(pt.tangents.iter().map(|t| dq.dot(t)));
        out
    }

    /// Gradient of `-tr(QΛQᵀS₁) + γᵀS₂`.
    pub fn data_gradient(&self, pt: &ChartPoint, s1: &DMatrix<f64>, s2: &DVector<f64>) -> Vec<f64> {
        let q = pt.params.q.matrix();
        let lam = &pt.params.lambda;
        let s1q = s1 * q;
        let dl: Vec<f64> = (0..self.p).map(|j| -q.column(j).dot(&s1q.column(j))).collect();
        let mut dq = s1q * -2.0;
        for (j, l) in lam.iter().enumerate() {
            let mut c = dq.column_mut(j);
            c *= *l;
        }
        self.assemble(pt, s2.clone(), dl, dq)
    }

    /// Gradient of `-log C(λ, Qᵀγ)`.
    pub fn log_c_gradient(&self, pt: &ChartPoint) -> Vec<f64> {
        let q = pt.params.q.matrix();
        let dgt = DVector::from_column_slice(&pt.log_c.d_gamma);
        let dg = -(q * &dgt);
        let dl: Vec<f64> = pt.log_c.d_lambda.iter().map(|v| -v).collect();
        let dq = -(&pt.gamma * dgt.transpose());
        self.assemble(pt, dg, dl, dq)
    }

    /// Value of `-log C - tr(AS₁) + γᵀS₂`.
    pub fn value(&self, pt: &ChartPoint, s1: &DMatrix<f64>, s2: &DVector<f64>) -> f64 {
        let q = pt.params.q.matrix();
        let s1q = s1 * q;
        let quad: f64 = pt.params.lambda.iter().enumerate().map(|(j, l)| l * q.column(j).dot(&s1q.column(j))).sum();
        -pt.log_c.value.log_value - quad + pt.gamma.dot(s2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> FbParams {
        let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3)], 0.35, 3).unwrap();
        FbParams::new(q, vec![0.0, 2.0, 6.0], vec![1.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn coordinates_round_trip() {
        let p = params();
        let chart = Chart::new(p.q.clone());
        let back = chart.params(&chart.coordinates(&p)).unwrap();
        assert!((back.a() - p.a()).amax() < 1e-12);
        assert!((back.gamma() - p.gamma()).amax() < 1e-12);
        assert_eq!(chart.dim(), 3 + 2 + 3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = params();
        let chart = Chart::new(p.q.clone());
        let z = DVector::from_vec(vec![0.48, 0.6, 0.64]);
        let s1 = &z * z.transpose();
        let s2 = z.clone();
        let mut x = chart.coordinates(&p);
        // move off the origin so the Fréchet path is exercised
        for (k, v) in x[chart.alpha_range()].iter_mut().enumerate() {
            *v = 0.1 * (k as f64 + 1.0);
        }
        let pt = chart.point(&x).unwrap();
        let g: Vec<f64> = chart.data_gradient(&pt, &s1, &s2).iter().zip(chart.log_c_gradient(&pt)).map(|(a, b)| a + b).collect();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let fa = chart.value(&chart.point(&a).unwrap(), &s1, &s2);
            let fb_ = chart.value(&chart.point(&b).unwrap(), &s1, &s2);
            let fd = (fa - fb_) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coordinate {i}: {fd} vs {}", g[i]);
        }
    }
}
