use vlamd_core::selfcheck;

#[test]
fn selfcheck_passes() {
    for r in selfcheck::run_all() {
        println!("{}", r.line());
        assert!(r.passed, "{}", r.line());
    }
}
