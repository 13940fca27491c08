mod common;

use common::toy_agents;
use intersect_core::protocol::Direct;
use intersect_core::runtime::{ChannelConfig, Fabric};
use intersect_core::sqp::{coordinate, SqpConfig};
use intersect_core::Agent;
use proptest::prelude::*;
use std::sync::OnceLock;

fn agents() -> &'static [Agent] {
    static AGENTS: OnceLock<Vec<Agent>> = OnceLock::new();
    AGENTS.get_or_init(toy_agents)
}

fn ends() -> Vec<f64> {
    agents().iter().map(|a| a.params().horizon_end()).collect()
}

fn lossy(drop_probability: f64, seed: u64) -> ChannelConfig {
    ChannelConfig {
        drop_probability,
        seed,
        jitter: 2,
        max_retransmissions: 200,
        ..ChannelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_only_delays(p in 0.0f64..0.5, seed in any::<u64>()) {
        let reference = coordinate(&mut Direct::new(agents()), &ends(), &SqpConfig::default()).unwrap();
        let mut fabric = Fabric::new(agents(), lossy(p, seed)).unwrap();
        let r = coordinate(&mut fabric, &ends(), &SqpConfig::default()).unwrap();
        let diff = (r.times.to_dvector() - reference.times.to_dvector()).amax();
        prop_assert!(diff <= 1e-6, "times differ by {}", diff);
        prop_assert_eq!(r.n_sqp, reference.n_sqp);
    }
}

#[test]
fn same_seed_same_run() {
    let run = || {
        let mut fabric = Fabric::new(agents(), lossy(0.3, 11)).unwrap();
        let r = coordinate(&mut fabric, &ends(), &SqpConfig::default()).unwrap();
        fabric.assign(&r.times).unwrap();
        (r.times, fabric.trace_lines())
    };
    let (t1, trace1) = run();
    let (t2, trace2) = run();
    assert_eq!(t1, t2);
    assert_eq!(trace1, trace2);
    assert!(trace1.contains("dropped"));
}

#[test]
fn different_seeds_change_only_the_trace() {
    let run = |seed| {
        let mut fabric = Fabric::new(agents(), lossy(0.3, seed)).unwrap();
        let r = coordinate(&mut fabric, &ends(), &SqpConfig::default()).unwrap();
        (r.times, fabric.trace_lines())
    };
    let (t1, trace1) = run(1);
    let (t2, trace2) = run(2);
    assert_eq!(t1, t2);
    assert_ne!(trace1, trace2);
}
