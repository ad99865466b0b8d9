use seedet::gradcheck::suite;

#[test]
fn every_operator_matches_finite_differences() {
    let checks = suite(7).unwrap();
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
