use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msziarmn::data::CovariateSeries;
use msziarmn::ffbs;
use msziarmn::mcmc::{run_gibbs, PriorSpec, Retain, RunConfig};
use msziarmn::model::{Model, ModelVariant, ParameterState};
use msziarmn::par::Execution;
use msziarmn::posterior;
use msziarmn::rng;
use msziarmn::simulate::{self, SimulationDesign};
use rand_distr::{Distribution, StandardNormal};

fn setup(n: usize, nt: usize) -> (Model, ParameterState) {
    let mut design = SimulationDesign::new(3, n, nt);
    let mut r = rng::stream(3, 0);
    let vals: Vec<f64> = (0..n * (nt - 1)).map(|_| StandardNormal.sample(&mut r)).collect();
    let x = CovariateSeries::new("temp", n, nt, vals).unwrap();
    design.x = vec![vec![x.clone()], vec![x]];
    let skeleton = design.skeleton(ModelVariant::MsZiarmn).unwrap();
    let mut p = ParameterState::neutral(skeleton.dims());
    p.eta0 = vec![-0.5, -1.0];
    p.rho_ar = vec![2.0, 2.0];
    p.sigma = vec![0.4, 0.4];
    p.cov *= 0.2;
    simulate::draw_area_intercepts(&mut p, &mut r);
    let sim = simulate::simulate_panel(&design, &p, ModelVariant::MsZiarmn, &mut r).unwrap();
    let cov = msziarmn::data::CovariateBundle::new(&sim.panel, design.x.clone(), design.z.clone(), &[], &[]).unwrap();
    (Model::new(sim.panel, cov, ModelVariant::MsZiarmn).unwrap(), sim.params)
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn forward_filter(c: &mut Criterion) {
    let (model, p) = setup(160, 52);
    let mut g = c.benchmark_group("forward_filter_160x52");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| ffbs::forward_filter(&model, &p, mode).unwrap()));
    }
    g.finish();
}

fn gibbs(c: &mut Criterion) {
    let (model, _) = setup(40, 52);
    let mut g = c.benchmark_group("gibbs_3x50_iterations_40x52");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = RunConfig {
            chains: 3,
            iterations: 50,
            burn_in: 25,
            thin: 5,
            execution: mode,
            retain: Retain { phi: true, states: false, cell_loglik: false },
            ..RunConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_gibbs(&model, &PriorSpec::default(), &cfg).unwrap()));
    }
    g.finish();
}

fn waic(c: &mut Criterion) {
    let (model, _) = setup(40, 52);
    let cfg = RunConfig { chains: 2, iterations: 60, burn_in: 20, thin: 2, ..RunConfig::default() };
    let draws = run_gibbs(&model, &PriorSpec::default(), &cfg).unwrap();
    let mut g = c.benchmark_group("waic_recomputed_40_draws");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| posterior::waic_recomputed(&model, &draws, mode).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward_filter, gibbs, waic);
criterion_main!(benches);
