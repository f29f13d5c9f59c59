//! Randomized invariants of the metric model and acquisition modules.
//! The acceptance target reruns the same checks with 10⁴ cases each.

mod common;

const CASES: u32 = 512;

fn run(name: &str) {
    let (_, check) = common::PROPERTIES.iter().find(|p| p.0 == name).expect("known property");
    if let Err(e) = check(CASES) {
        panic!("{name}: {e}");
    }
}

#[test]
fn every_property_is_exercised() {
    assert_eq!(common::PROPERTIES.len(), 14);
}

#[test]
fn probability_complement() {
    run("probability in [0,1] and complementary");
}

#[test]
fn snapshot_probability_bounds() {
    run("snapshot probability and entropy bounds");
}

#[test]
fn entropy_shape() {
    run("entropy bounded, maximal at 1/2, monotone");
}

#[test]
fn loss_decreasing_in_margin() {
    run("loss strictly decreasing in margin");
}

#[test]
fn loss_gradient_finite_differences() {
    run("loss gradient matches finite differences");
}

#[test]
fn mu_monotonicity() {
    run("larger mu moves probability toward 1/2");
}

#[test]
fn distance_pseudometric() {
    run("embedding distance is a pseudometric");
}

#[test]
fn gamma_nonnegative_reflexive() {
    run("gamma non-negative and zero on itself");
}

#[test]
fn gamma_symmetric() {
    run("gamma symmetric");
}

#[test]
fn centroid_permutation_invariance() {
    run("centroid gamma permutation invariant");
}

#[test]
fn oriented_swap_invariance() {
    run("oriented gamma invariant under j/k swap");
}

#[test]
fn fps_reference() {
    run("fps matches brute-force reference");
}

#[test]
fn decorrelated_within_topk() {
    run("decorrelated batch lies within top-k");
}

#[test]
fn fps_weight_scaling() {
    run("fps invariant to scaling informativeness");
}
