use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rrfb_core::fb::{grad_log_norm_const, log_norm_const, FbSampler};
use rrfb_core::mcem::{self, FitConfig};
use rrfb_core::rng::stream;
use rrfb_core::rrfb::{LikelihoodContext, ParamCache, SchemeSizes};
use rrfb_core::sim::{self, ScenarioConfig};

fn norm_const(c: &mut Criterion) {
    for (p, case) in [(3, 1), (10, 3)] {
        let params = ScenarioConfig::builtin(p, case).unwrap().params().unwrap();
        c.bench_function(&format!("log_norm_const p{p} case{case}"), |b| b.iter(|| log_norm_const(black_box(&params.lambda), black_box(&params.gamma_tilde))));
        c.bench_function(&format!("grad_log_norm_const p{p} case{case}"), |b| b.iter(|| grad_log_norm_const(black_box(&params.lambda), black_box(&params.gamma_tilde))));
    }
}

fn sampler(c: &mut Criterion) {
    let params = ScenarioConfig::builtin(5, 2).unwrap().params().unwrap();
    let s = FbSampler::new(&params);
    let mut rng = stream(1, "bench", 0);
    c.bench_function("fb_sample p5 case2", |b| b.iter(|| s.sample(&mut rng).unwrap()));
}

fn estep(c: &mut Criterion) {
    let params = ScenarioConfig::builtin(3, 1).unwrap().params().unwrap();
    let data = sim::simulate(&params, 500, 2, "bench").unwrap();
    let ctx = LikelihoodContext::new(data, 3, 0, SchemeSizes::ESTEP);
    let pc = ParamCache::new(&params).unwrap();
    ctx.evaluate(&pc).unwrap();
    c.bench_function("e-step p3 case1 n500 (frozen draws cached)", |b| b.iter(|| ctx.evaluate(&pc).unwrap()));
}

fn fit(c: &mut Criterion) {
    let params = ScenarioConfig::builtin(3, 1).unwrap().params().unwrap();
    let data = sim::simulate(&params, 200, 4, "bench").unwrap();
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    g.bench_function("mcem p3 case1 n200", |b| b.iter(|| mcem::fit(&data, &FitConfig::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, norm_const, sampler, estep, fit);
criterion_main!(benches);
