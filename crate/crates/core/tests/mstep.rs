use rrfb_core::fb::grad_log_norm_const;
use rrfb_core::mcem::{m_step, FitConfig, SufficientStats};
use rrfb_core::nalgebra::{DMatrix, DVector};
use rrfb_core::sim::ScenarioConfig;

/// Exact `E[xxᵀ]` and `E[x]` under FB: first moments from the gradient of
/// log C, cross moments from differencing it in γ̃.
fn population_stats(p: usize, case: u8) -> (rrfb_core::FbParams, SufficientStats) {
    let truth = ScenarioConfig::builtin(p, case).unwrap().params().unwrap();
    let (dl, dg) = grad_log_norm_const(&truth.lambda, &truth.gamma_tilde).unwrap();
    let mut m = DMatrix::zeros(p, p);
    let h = 1e-5;
    for j in 0..p {
        let (mut gp, mut gm) = (truth.gamma_tilde.clone(), truth.gamma_tilde.clone());
        gp[j] += h;
        gm[j] -= h;
        let up = grad_log_norm_const(&truth.lambda, &gp).unwrap().1;
        let dn = grad_log_norm_const(&truth.lambda, &gm).unwrap().1;
        for i in 0..p {
            m[(i, j)] = (up[i] - dn[i]) / (2.0 * h) + dg[i] * dg[j];
        }
    }
    m = (&m + m.transpose()) * 0.5;
    for i in 0..p {
        m[(i, i)] = -dl[i];
    }
    let q = truth.q.matrix();
    let stats = SufficientStats { s1_bar: q * m * q.transpose(), s2_bar: q * DVector::from_column_slice(&dg) };
    (truth, stats)
}

#[test]
fn m_step_is_stationary_at_population_moments() {
    for (p, case) in [(3, 1), (5, 2)] {
        let (truth, stats) = population_stats(p, case);
        let (next, report) = m_step(&stats, &truth, &FitConfig::default()).unwrap();
        assert!(report.is_monotone(1e-10));
        let dl = next.lambda.iter().zip(&truth.lambda).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dg = (next.gamma() - truth.gamma()).amax();
        let da = (next.a() - truth.a()).amax();
        assert!(dl < 1e-2 && dg < 1e-2 && da < 1e-2, "p={p}: λ {dl}, γ {dg}, A {da}");
    }
}
