mod common;

use common::TOL;

#[test]
fn reconstruction_loss_gradients() {
    let c = common::check_mse(1);
    assert!(c.report.passes(TOL), "{:?}", c.report);
    assert!(c.report.checked > 1000 && c.unreachable > 0);
}

#[test]
fn reid_loss_gradients() {
    for seed in [1, 2] {
        let r = common::check_reid(seed);
        assert!(r.passes(TOL), "{r:?}");
        let (_, store) = common::jittered_model(3, seed);
        assert_eq!(r.checked, store.scalar_count());
        println!("seed {seed}: {} scalars, {} refined, max error {:.2e}", r.checked, r.refined, r.max_rel_error);
    }
}
