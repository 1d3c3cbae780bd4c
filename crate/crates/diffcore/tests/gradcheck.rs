use mimicforge_diffcore::gradcheck;

#[test]
fn every_block_matches_finite_differences() {
    for (name, err) in gradcheck::blocks().unwrap() {
        assert!(err < 1e-4, "{name}: rel err {err:e}");
    }
}

#[test]
fn end_to_end_matches_finite_differences() {
    let err = gradcheck::end_to_end().unwrap();
    assert!(err < 1e-3, "end-to-end rel err {err:e}");
}
