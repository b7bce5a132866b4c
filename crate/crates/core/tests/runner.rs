use sparse_kg::config::ExperimentConfig;
use sparse_kg::policy::PolicyKind;
use sparse_kg::sim::{opportunity_cost, replication_problem, replication_seeds, run_policy, run_replications, separation, ExperimentSpec};

fn explore_spec(budget: usize) -> ExperimentSpec {
    let mut spec = ExperimentConfig::fig1(0.05).to_spec();
    spec.policies = vec![PolicyKind::Explore, PolicyKind::KgLin];
    spec.policy.budget = budget;
    spec
}

#[test]
fn single_replication_aggregates_equal_the_run() {
    let spec = explore_spec(15);
    let seeds = replication_seeds(3, 1);
    let report = run_replications(&spec, &seeds).unwrap();
    assert!(report.failures.is_empty());
    for policy in [PolicyKind::Explore, PolicyKind::KgLin] {
        let run = report.runs.iter().find(|r| r.policy == policy).unwrap();
        let s = report.summary(policy).unwrap();
        assert_eq!(s.n_ok, 1);
        assert_eq!(s.final_oc.mean, run.final_oc);
        assert_eq!(s.final_oc.median, run.final_oc);
        assert_eq!(s.final_misclassified.mean, *run.misclassified.last().unwrap() as f64);
        for (t, r) in s.per_round.iter().enumerate() {
            assert_eq!(r.mean, run.oc_series[t]);
        }
        let direct = run_policy(&spec, policy, 0, seeds[0]).unwrap();
        assert_eq!(&direct, run);
    }
}

#[test]
fn runs_respect_metric_invariants() {
    let spec = explore_spec(20);
    let seeds = replication_seeds(4, 3);
    let report = run_replications(&spec, &seeds).unwrap();
    for run in &report.runs {
        let problem = replication_problem(&spec.truth, run.seed).unwrap();
        let p = problem.groups.n_groups();
        assert_eq!(run.oc_series.len(), 20);
        assert!(run.oc_series.iter().all(|&oc| oc >= 0.0));
        assert!(run.misclassified.iter().all(|&m| m <= p));
        assert!(run.support_size.iter().all(|&s| s <= p));
        let best = problem.truth_values.max();
        assert!(run.final_oc <= best - problem.truth_values.min());
    }
}

#[test]
fn choosing_the_best_costs_nothing() {
    let spec = explore_spec(5);
    for seed in replication_seeds(8, 5) {
        let problem = replication_problem(&spec.truth, seed).unwrap();
        let mu: Vec<f64> = problem.truth_values.iter().copied().collect();
        let best = problem.truth_values.argmax().0;
        assert_eq!(opportunity_cost(&mu, best).unwrap(), 0.0);
        assert!((0..mu.len()).all(|x| opportunity_cost(&mu, x).unwrap() >= 0.0));
    }
}

#[test]
fn truth_is_reproducible_per_seed() {
    let spec = explore_spec(5);
    let a = replication_problem(&spec.truth, 17).unwrap();
    let b = replication_problem(&spec.truth, 17).unwrap();
    let c = replication_problem(&spec.truth, 18).unwrap();
    assert_eq!(a.truth_values, b.truth_values);
    assert_eq!(a.alternatives, b.alternatives);
    assert_ne!(a.truth_values, c.truth_values);
}

#[test]
fn disjoint_seed_batches_agree() {
    let spec = explore_spec(40);
    let first = run_replications(&spec, &replication_seeds(100, 20)).unwrap();
    let second = run_replications(&spec, &replication_seeds(200, 20)).unwrap();
    for policy in [PolicyKind::Explore, PolicyKind::KgLin] {
        let a = first.summary(policy).unwrap().final_oc;
        let b = second.summary(policy).unwrap().final_oc;
        let z = separation(&a, &b);
        assert!(z.abs() <= 3.0, "{policy}: batches differ by {z:.2} standard errors ({} vs {})", a.mean, b.mean);
    }
}

#[test]
fn shorter_budget_is_a_prefix() {
    let long = explore_spec(30);
    let short = explore_spec(12);
    let seed = replication_seeds(6, 1)[0];
    for policy in [PolicyKind::Explore, PolicyKind::KgLin] {
        let a = run_policy(&long, policy, 0, seed).unwrap();
        let b = run_policy(&short, policy, 0, seed).unwrap();
        assert_eq!(&a.oc_series[..12], &b.oc_series[..]);
        assert_eq!(&a.misclassified[..12], &b.misclassified[..]);
    }
}
