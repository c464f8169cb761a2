// Central-difference checks of every differentiable op and of a whole
// generator forward pass.

mod common;

#[test]
fn every_op_matches_finite_differences() {
    let suite = common::all_ops();
    let bad: Vec<String> = suite
        .reports
        .iter()
        .filter(|r| !r.ok())
        .map(|r| format!("{}: seed {} rel err {:e}", r.name, r.worst_seed, r.worst))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
    assert!(suite.reports.len() > 40);
}

#[test]
fn generator_latent_gradient() {
    let err = common::pipeline_check(12, 3);
    assert!(err <= 1e-3, "rel err {err:e}");
}
