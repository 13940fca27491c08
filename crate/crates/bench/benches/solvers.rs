use criterion::{criterion_group, criterion_main, Criterion};
use intersect_core::agent::{Agent, AgentConfig, Mode, TimePair};
use intersect_core::convex;
use intersect_core::protocol::Direct;
use intersect_core::scenario::ScenarioConfig;
use intersect_core::sqp::coordinate;
use std::hint::black_box;

fn agents(k: usize) -> (ScenarioConfig, Vec<Agent>) {
    let config = ScenarioConfig::builtin(k).unwrap();
    let agents = config
        .vehicles_in_order()
        .into_iter()
        .map(|p| Agent::new(p, AgentConfig::default()).unwrap())
        .collect();
    (config, agents)
}

fn local_problem(c: &mut Criterion) {
    let (_, agents) = agents(1);
    let agent = &agents[0];
    let (ff, _) = agent.free_flow().unwrap();
    let times = TimePair::new(ff.t_in + 0.2, ff.t_out + 0.3);
    let program = agent.build_local_qp(times, Mode::Exact).unwrap();
    let tol = agent.config().tolerances;
    c.bench_function("qp_solve_n80", |b| b.iter(|| convex::solve(black_box(&program), &tol)));
    c.bench_function("agent_evaluate", |b| {
        b.iter(|| agent.evaluate(black_box(times), Mode::Exact).unwrap())
    });
    c.bench_function("agent_time_bounds", |b| {
        b.iter(|| agent.time_bounds(black_box(ff.t_in + 0.2)).unwrap())
    });
}

fn coordination(c: &mut Criterion) {
    let (config, agents) = agents(5);
    let ends: Vec<f64> = agents.iter().map(|a| a.params().horizon_end()).collect();
    let mut group = c.benchmark_group("coordinate");
    group.sample_size(10);
    group.bench_function("scenario5_projection", |b| {
        b.iter(|| coordinate(&mut Direct::new(&agents), &ends, &config.sqp).unwrap())
    });
    group.finish();
}

criterion_group!(benches, local_problem, coordination);
criterion_main!(benches);
