use xdesc_core::gradcheck::gradient_suite;

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    let cases = gradient_suite(24, 2024);
    assert_eq!(cases.len(), 24 * 7);
    for c in &cases {
        assert!(
            c.report.max_rel_error < 1e-4,
            "config {} {}: {:?}",
            c.config,
            c.name,
            c.report
        );
        assert!(c.report.checked > 0, "config {} {}", c.config, c.name);
    }
    let checked: usize = cases.iter().map(|c| c.report.checked).sum();
    let skipped: usize = cases.iter().map(|c| c.report.skipped_nonsmooth).sum();
    assert!(skipped * 50 < checked, "{skipped} of {checked} skipped");
}
