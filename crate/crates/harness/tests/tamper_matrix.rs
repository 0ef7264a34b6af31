use aibomgen_harness::{render_matrix, Harness, Scenario};

#[test]
fn every_scenario_behaves_as_expected() {
    let mut harness = Harness::start(42).unwrap();
    let results: Vec<_> = Scenario::ALL
        .into_iter()
        .map(|s| harness.run_scenario(s, 4).unwrap())
        .collect();
    let matrix = render_matrix(&results);
    println!("{matrix}");
    for r in &results {
        assert!(r.passed(), "{}\n{matrix}", r.scenario);
    }
    let mutate = results.iter().find(|r| r.scenario == Scenario::ArtifactMutate).unwrap();
    assert_eq!(mutate.trials.len(), 16);
}
