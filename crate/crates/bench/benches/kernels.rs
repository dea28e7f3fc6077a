use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use teamred::lqg::{exact_cost, solve_static_gains, transport_gains_g_to_k, LqgForm};
use teamred::optimality::{best_response, evaluate_cost, BestResponseClass};
use teamred::reduction_independent::{cost_gap, weight_mean};
use teamred::rng::substream;
use teamred::scenarios::{probe_policy, random_toy_policy};
use teamred::MonteCarloPlan;
use teamred_bench::{example1_pair, example2_dynamic, lqg_team, mc_plan, toy_pair};

fn integrate(c: &mut Criterion) {
    let (dynamic, reduced) = example1_pair();
    let policy = probe_policy();
    let plan = mc_plan();
    c.bench_function("evaluate_cost/example1/10k", |b| b.iter(|| evaluate_cost(black_box(&dynamic), &policy, &plan).unwrap()));
    c.bench_function("cost_gap/example1/10k", |b| b.iter(|| cost_gap(black_box(&reduced), &policy, &plan).unwrap()));
    c.bench_function("weight_mean/example1/10k", |b| b.iter(|| weight_mean(black_box(&reduced), &policy, &plan).unwrap()));
}

fn exact(c: &mut Criterion) {
    let (dynamic, reduced) = toy_pair();
    let policy = random_toy_policy(&mut substream(1, 0, 0));
    let plan = MonteCarloPlan::exact();
    c.bench_function("evaluate_cost/finite_toy/exact", |b| b.iter(|| evaluate_cost(black_box(&dynamic), &policy, &plan).unwrap()));
    c.bench_function("evaluate_cost/finite_toy_reduced/exact", |b| b.iter(|| evaluate_cost(black_box(&reduced), &policy, &plan).unwrap()));
}

fn best_responses(c: &mut Criterion) {
    let problem = example2_dynamic();
    let policy = probe_policy();
    let plan = MonteCarloPlan::quadrature(8);
    c.bench_function("best_response/example2/affine/q8", |b| {
        b.iter(|| best_response(black_box(&problem), &policy, 1, &BestResponseClass::Affine, &plan).unwrap())
    });
}

fn lqg(c: &mut Criterion) {
    let team = lqg_team();
    c.bench_function("lqg/solve_transport_cost", |b| {
        b.iter(|| {
            let g = transport_gains_g_to_k(black_box(&team), &solve_static_gains(&team).unwrap()).unwrap();
            exact_cost(&team, &g, LqgForm::D).unwrap()
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = integrate, exact, best_responses, lqg
}
criterion_main!(kernels);
