mod common;

use common::Case;

fn assert_all_pass(cases: Vec<Case>) {
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| {
            format!(
                "{} worst {:e} (tol {:e})",
                c.name,
                c.report.worst(),
                c.report.tolerance
            )
        })
        .collect();
    assert!(failed.is_empty(), "gradcheck failures: {failed:#?}");
}

#[test]
fn primitives_match_finite_differences() {
    assert_all_pass(common::primitive_cases());
}

#[test]
fn small_networks_match_finite_differences() {
    assert_all_pass(common::network_cases());
}

#[test]
fn every_block_kind_matches_finite_differences() {
    assert_all_pass(common::block_cases());
}
