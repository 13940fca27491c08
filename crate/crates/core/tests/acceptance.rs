//! Acceptance checks. Each criterion prints one PASS/FAIL line; the test fails if any
//! criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::{
    exact_penalty_check, gradient_error, grid_search_two, interior_pair, lp_by_vertices, qp_by_active_sets,
    random_program, table_agents, tight, toy_agents,
};
use intersect_core::agent::Mode;
use intersect_core::convex::solve;
use intersect_core::protocol::{Direct, FeasibilityMode};
use intersect_core::runtime::ChannelConfig;
use intersect_core::scenario::ScenarioConfig;
use intersect_core::sim::{coordinate_scenario, run_scenario, write_summary, ScenarioCoordination, SummaryRow};
use intersect_core::sqp::{coordinate, SqpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCENARIOS: usize = 7;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn record(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let line = format!("[{verdict}] {n:>2} {name}: {detail}");
        // Written directly to stderr so it shows even when output is captured.
        let _ = writeln!(std::io::stderr(), "{line}");
        if !pass {
            self.failures.push(line);
        }
    }
}

struct TableRuns {
    projection: Vec<ScenarioCoordination>,
    relaxation: Vec<ScenarioCoordination>,
    elapsed: Duration,
}

fn table_runs() -> TableRuns {
    let start = Instant::now();
    let run = |mode| {
        (1..=SCENARIOS)
            .map(|k| {
                let mut config = ScenarioConfig::builtin(k).unwrap();
                config.sqp.mode = mode;
                coordinate_scenario(&config).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let projection = run(FeasibilityMode::Projection);
    let relaxation = run(FeasibilityMode::Relaxation);
    TableRuns {
        projection,
        relaxation,
        elapsed: start.elapsed(),
    }
}

fn iteration_counts(runs: &[ScenarioCoordination]) -> String {
    runs.iter()
        .map(|c| format!("{}/{}", c.result.n_sqp, c.result.n_ls))
        .collect::<Vec<_>>()
        .join(" ")
}

fn backtracking(runs: &[ScenarioCoordination]) -> usize {
    runs.iter().map(|c| c.result.n_ls - c.result.n_sqp).sum()
}

fn iteration_limits(report: &mut Report, t: &TableRuns) {
    let defaults = SqpConfig::default();
    assert_eq!((defaults.gamma, defaults.beta, defaults.epsilon), (0.01, 0.5, 1e-2));
    let within = |runs: &[ScenarioCoordination], cap| runs.iter().all(|c| c.result.converged() && c.result.n_sqp <= cap);
    let pass = within(&t.projection, 20) && within(&t.relaxation, 32) && t.elapsed < Duration::from_secs(60);
    report.record(
        1,
        "iteration counts",
        pass,
        format!(
            "projection n_sqp/n_ls [{}], relaxation [{}], {:.1} s",
            iteration_counts(&t.projection),
            iteration_counts(&t.relaxation),
            t.elapsed.as_secs_f64()
        ),
    );
}

fn full_steps(report: &mut Report, t: &TableRuns) {
    let records: Vec<_> = t.projection.iter().flat_map(|c| &c.result.log).collect();
    let full = records.iter().filter(|r| r.alpha == 1.0).count();
    let share = full as f64 / records.len() as f64;
    report.record(
        2,
        "projection full steps",
        share >= 0.9,
        format!("alpha = 1 in {full} of {} iterations ({:.1}%)", records.len(), 100.0 * share),
    );
}

fn backtracking_burden(report: &mut Report, t: &TableRuns) {
    let proj = backtracking(&t.projection);
    let relax = backtracking(&t.relaxation);
    report.record(
        3,
        "relaxation backtracks more",
        relax > proj,
        format!("sum n_ls - n_sqp: relaxation {relax}, projection {proj}"),
    );
}

fn gradient_oracle(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    let mut count = 0;
    for agent in table_agents() {
        for _ in 0..20 {
            let t = interior_pair(&agent, &mut rng).expect("no interior pair");
            worst = worst.max(gradient_error(&agent, t, 1e-4));
            count += 1;
        }
    }
    report.record(
        4,
        "gradient vs central differences",
        worst <= 1e-3,
        format!("{count} pairs, worst relative error {worst:.2e}"),
    );
}

fn exact_penalty(report: &mut Report) {
    let agents = table_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_slack = 0.0f64;
    let mut worst_value = 0.0f64;
    for i in 0..50 {
        let agent = &agents[i % agents.len()];
        let rho = agent.estimate_rho().unwrap();
        let pair = interior_pair(agent, &mut rng).expect("no interior pair");
        let check = exact_penalty_check(agent, rho, &[pair]);
        worst_slack = worst_slack.max(check.max_slack);
        worst_value = worst_value.max(check.max_value_error);
    }
    report.record(
        5,
        "exact penalty",
        worst_slack <= 1e-6 && worst_value <= 1e-6,
        format!("50 pairs, max slack {worst_slack:.2e}, max relative value error {worst_value:.2e}"),
    );
}

fn projection_feasibility(report: &mut Report, t: &TableRuns) {
    let cap = SqpConfig::default().max_ls_iters;
    let mut iterates = 0;
    let mut infeasible = 0;
    let mut rejected = 0;
    let mut max_trials = 0;
    for c in &t.projection {
        for rec in &c.result.log {
            iterates += 1;
            rejected += rec.infeasible_trials;
            max_trials = max_trials.max(rec.ls_trials);
            let all_feasible = c
                .agents
                .iter()
                .zip(&rec.times.0)
                .all(|(agent, &times)| agent.evaluate(times, Mode::Exact).unwrap().feasible);
            if !all_feasible {
                infeasible += 1;
            }
        }
    }
    report.record(
        6,
        "projected iterates feasible",
        infeasible == 0 && rejected == 0 && max_trials <= cap,
        format!(
            "{iterates} iterates, {infeasible} infeasible, {rejected} rejected trials, at most {max_trials} linesearch trials"
        ),
    );
}

fn grid_oracle(report: &mut Report) {
    let agents = toy_agents();
    let ends: Vec<f64> = agents.iter().map(|a| a.params().horizon_end()).collect();
    let sqp = coordinate(&mut Direct::new(&agents), &ends, &SqpConfig::default()).unwrap();
    let grid = grid_search_two(&agents, 1e-2);
    let rel = (sqp.objective - grid).abs() / grid.abs();
    report.record(
        7,
        "grid search oracle",
        sqp.converged() && rel <= 1e-2,
        format!("SQP {:.6}, grid {grid:.6}, relative difference {rel:.2e}", sqp.objective),
    );
}

fn convex_oracle(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut unsolved = 0;
    for case in 0..200 {
        let lp = case % 2 == 1;
        let p = random_program(&mut rng, lp);
        let oracle = if lp { lp_by_vertices(&p) } else { qp_by_active_sets(&p) }.expect("oracle found no optimum");
        let r = solve(&p, &tight());
        if r.is_optimal() {
            worst = worst.max((r.objective - oracle).abs());
        } else {
            unsolved += 1;
        }
    }
    report.record(
        8,
        "convex solver vs enumeration",
        unsolved == 0 && worst <= 1e-6,
        format!("200 programs (100 QP, 100 LP), {unsolved} unsolved, worst objective error {worst:.2e}"),
    );
}

fn occupancy(report: &mut Report) {
    let mut detail = Vec::new();
    let mut pass = true;
    for k in 1..=SCENARIOS {
        let mut config = ScenarioConfig::builtin(k).unwrap();
        config.noise.position_std = 0.0;
        config.noise.velocity_std = 0.0;
        let res = run_scenario(&config).unwrap();
        let bad = res.occupancy.violations.len();
        pass &= bad == 0;
        detail.push(format!("{}:{bad}", k));
    }
    report.record(
        9,
        "occupancy exclusivity",
        pass,
        format!("samples with two vehicles inside, per scenario [{}]", detail.join(" ")),
    );
}

fn lossy_config(k: usize) -> ScenarioConfig {
    let mut config = ScenarioConfig::builtin(k).unwrap();
    config.channel = ChannelConfig {
        drop_probability: 0.2,
        seed: 42,
        ..config.channel
    };
    config
}

fn loss_transparency(report: &mut Report) -> Vec<SummaryRow> {
    let mut worst = 0.0f64;
    let mut dropped = 0;
    let mut rows = Vec::new();
    for k in 1..=SCENARIOS {
        let mut lossless = ScenarioConfig::builtin(k).unwrap();
        lossless.channel = ChannelConfig::lossless();
        let reference = coordinate_scenario(&lossless).unwrap();
        let config = lossy_config(k);
        let lossy = coordinate_scenario(&config).unwrap();
        dropped += lossy.retransmissions();
        let diff = (lossy.result.times.to_dvector() - reference.result.times.to_dvector()).amax();
        worst = worst.max(diff);
        rows.push(SummaryRow::new(&config.name, &lossy.result, config.sqp.mode));
    }
    report.record(
        10,
        "loss transparency",
        worst <= 1e-6 && dropped > 0,
        format!("drop probability 0.2, {dropped} retransmissions, worst time difference {worst:.2e} s"),
    );
    rows
}

fn summary_bytes(rows: &[SummaryRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_summary(rows, &mut out).unwrap();
    out
}

fn determinism(report: &mut Report, first: &[SummaryRow]) {
    let second: Vec<SummaryRow> = (1..=SCENARIOS)
        .map(|k| {
            let config = lossy_config(k);
            let c = coordinate_scenario(&config).unwrap();
            SummaryRow::new(&config.name, &c.result, config.sqp.mode)
        })
        .collect();
    let (a, b) = (summary_bytes(first), summary_bytes(&second));
    report.record(
        11,
        "deterministic summary",
        a == b,
        format!("two lossy runs of {SCENARIOS} scenarios, {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    );
}

#[test]
fn acceptance() {
    let mut report = Report { failures: Vec::new() };
    let table = table_runs();
    iteration_limits(&mut report, &table);
    full_steps(&mut report, &table);
    backtracking_burden(&mut report, &table);
    gradient_oracle(&mut report);
    exact_penalty(&mut report);
    projection_feasibility(&mut report, &table);
    grid_oracle(&mut report);
    convex_oracle(&mut report);
    occupancy(&mut report);
    let lossy_rows = loss_transparency(&mut report);
    determinism(&mut report, &lossy_rows);
    assert!(report.failures.is_empty(), "failed criteria:\n{}", report.failures.join("\n"));
}

