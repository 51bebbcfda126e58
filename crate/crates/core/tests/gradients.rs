//! Tape gradients against central differences of an f64 reference model.

mod common;

use common::{check_gradients, mlp_4_8_3, small_convnet};
use freeadv::models::LossKind;

fn assert_clean(name: &str, loss: LossKind, spec: freeadv::models::ModelSpec) {
    for seed in 0..5 {
        let r = check_gradients(&spec, seed, loss, 1e-3, 1e-4, 1e-4);
        assert!(r.coordinates > 0);
        assert!(r.failures.is_empty(), "{name} seed {seed}: {:?}", r.failures);
    }
}

#[test]
fn mlp_cross_entropy() {
    assert_clean("mlp", LossKind::CrossEntropy, mlp_4_8_3());
}

#[test]
fn convnet_cross_entropy() {
    assert_clean("convnet", LossKind::CrossEntropy, small_convnet());
}

#[test]
fn mlp_cw_margin() {
    assert_clean("mlp", LossKind::CarliniWagner, mlp_4_8_3());
}

#[test]
fn convnet_cw_margin() {
    assert_clean("convnet", LossKind::CarliniWagner, small_convnet());
}

#[test]
fn reference_forward_agrees_with_engine() {
    use common::{params_to_f64, random_problem, reference_loss, to_f64};
    use freeadv::models::Model;
    use freeadv::CostLedger;
    for spec in [mlp_4_8_3(), small_convnet()] {
        let model = Model::new(spec.clone()).unwrap();
        for seed in 0..5 {
            let (params, x, y) = random_problem(&spec, seed, 4);
            for loss in [LossKind::CrossEntropy, LossKind::CarliniWagner] {
                let ours = model.record(&params, &x, &y, loss, &CostLedger::new()).unwrap().loss_value() as f64;
                let oracle = reference_loss(&spec, &params_to_f64(&params), &to_f64(&x), &y, loss);
                assert!((ours - oracle).abs() <= 1e-5 * (1.0 + oracle.abs()), "{ours} vs {oracle}");
            }
        }
    }
}
