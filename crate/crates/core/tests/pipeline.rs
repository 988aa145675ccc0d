use fedkace::config::{AggregationWeighting, ExperimentConfig, StartMode};
use fedkace::federation::{run_experiment, Aggregation, Federation, MethodVariant};
use fedkace::metrics::{summarize, RoundMetrics};
use fedkace::runner::{run_paired, RunOptions};
use fedkace::suite::small_run_config;

fn aa(rounds: &[RoundMetrics]) -> f64 {
    rounds.iter().map(RoundMetrics::mean_acc).sum::<f64>() / rounds.len() as f64
}

#[test]
fn summary_aa_is_the_mean_of_round_accuracies() {
    let cfg = small_run_config(MethodVariant::FedKace, 2);
    let done = run_paired(&cfg, RunOptions::default()).unwrap();
    let s = &done.summary;
    assert!((s.aa.unwrap() - aa(&done.record.rounds)).abs() < 1e-12);
    let ar: f64 = s.round_regret.as_ref().unwrap().iter().sum::<f64>() / cfg.rounds as f64;
    assert!((s.ar.unwrap() - ar).abs() < 1e-12);
    assert_eq!(done.record.rounds.len(), cfg.rounds);
    assert!(done.record.rounds.iter().all(|r| r.clients.len() == cfg.clients));
}

#[test]
fn regret_is_centralized_minus_method_per_client() {
    let cfg = small_run_config(MethodVariant::As3, 3);
    let done = run_paired(&cfg, RunOptions::default()).unwrap();
    let reference = run_experiment(&ExperimentConfig {
        method: MethodVariant::Centralized,
        ..cfg.clone()
    })
    .unwrap();
    for (r, c) in done.record.rounds.iter().zip(&reference.rounds) {
        for (row, base) in r.clients.iter().zip(&c.clients) {
            assert_eq!(row.regret, Some(base.acc - row.acc));
        }
    }
}

#[test]
fn equal_volumes_make_weighted_and_uniform_aggregation_agree() {
    let base = small_run_config(MethodVariant::FedKace, 5);
    let uniform = run_experiment(&ExperimentConfig {
        aggregation: AggregationWeighting::Uniform,
        ..base.clone()
    })
    .unwrap();
    let weighted = run_experiment(&ExperimentConfig {
        aggregation: AggregationWeighting::SampleCount,
        ..base.clone()
    })
    .unwrap();
    for (u, w) in uniform.rounds.iter().zip(&weighted.rounds) {
        for (a, b) in u.clients.iter().zip(&w.clients) {
            assert!((a.acc - b.acc).abs() < 1e-9);
        }
    }
    assert_eq!(Federation::resolved_spec(&base).aggregation, Aggregation::Mean);
    let fedavg = ExperimentConfig {
        method: MethodVariant::FedAvg,
        ..base.clone()
    };
    assert_eq!(
        Federation::resolved_spec(&fedavg).aggregation,
        Aggregation::SampleWeighted
    );
    let s = summarize(
        &weighted,
        &ExperimentConfig {
            aggregation: AggregationWeighting::SampleCount,
            ..base
        },
    );
    assert_eq!(s.decisions["aggregation"], "SampleWeighted");
}

#[test]
fn warm_and_cold_centralized_differ_only_after_round_one() {
    let cold = small_run_config(MethodVariant::Centralized, 6);
    let warm = ExperimentConfig {
        centralized_start: StartMode::Warm,
        ..cold.clone()
    };
    let a = run_experiment(&cold).unwrap();
    let b = run_experiment(&warm).unwrap();
    assert_eq!(a.rounds[0], b.rounds[0]);
    assert_ne!(a.rounds, b.rounds);
}

#[test]
fn switch_events_are_one_way_in_a_full_run() {
    let cfg = ExperimentConfig {
        rounds: 12,
        ..small_run_config(MethodVariant::As1, 7)
    };
    let rec = run_experiment(&cfg).unwrap();
    for k in 0..cfg.clients {
        let flags: Vec<bool> = rec.rounds.iter().map(|r| r.clients[k].switched).collect();
        let first = flags.iter().position(|&f| f);
        assert_eq!(first.map(|i| i + 1), rec.t_switch[k]);
        if let Some(i) = first {
            assert!(flags[i..].iter().all(|&f| f));
            assert!(i + 1 >= 2);
        }
    }
}

#[test]
fn coverage_reaches_every_category() {
    let cfg = ExperimentConfig {
        rounds: 12,
        ..small_run_config(MethodVariant::FedAvg, 8)
    };
    // 8 categories, stride 2: all seen by round 4
    let rec = run_experiment(&cfg).unwrap();
    assert!(rec.coverage.iter().all(|&c| c == cfg.c_max));
}
