use lancer_core::selftest;

#[test]
fn gradient_check_covers_both_stages() {
    let r = selftest::gradient_check(0).unwrap();
    eprintln!("{r:?}");
    assert!(r.passed(), "{r:?}");
}
