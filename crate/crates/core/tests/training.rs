//! Training regimes: cost accounting, Free-m structure and sanity on blobs.

use freeadv::attacks::{attack_with_restarts, AttackConfig};
use freeadv::data::{synth_blobs, Dataset};
use freeadv::harness::ledger_assert;
use freeadv::ledger::EventKind;
use freeadv::models::{Architecture, Model, ModelSpec, ParamSet};
use freeadv::training::{
    train, train_free_observed, InnerStep, PerturbationState, Regime, TrainConfig, TrainObserver,
};
use freeadv::{CostLedger, Error};

fn blobs(per_class: usize, seed: u64) -> Dataset {
    synth_blobs(2, per_class, 8, 10.0, seed).unwrap()
}

fn mlp() -> Model {
    Model::new(ModelSpec {
        arch: Architecture::Mlp { hidden: vec![16] },
        input_shape: vec![8],
        classes: 2,
        input_scale: 1.0,
    })
    .unwrap()
}

fn config(regime: Regime, epochs: usize) -> TrainConfig {
    TrainConfig {
        regime,
        epochs,
        batch_size: 20,
        lr: 0.05,
        epsilon: 0.1,
        step_size: 0.05,
        ..TrainConfig::default()
    }
}

fn accuracy(model: &Model, params: &ParamSet, data: &Dataset) -> f64 {
    let pred = model.predict(params, &data.images, &CostLedger::new()).unwrap();
    pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

fn robust_accuracy(model: &Model, params: &ParamSet, data: &Dataset, eps: f32) -> f64 {
    let cfg = AttackConfig {
        seed: 4,
        ..AttackConfig::pgd(eps, eps / 4.0, 20, data.value_range)
    };
    let out = attack_with_restarts(model, params, &data.images, &data.labels, &cfg, &CostLedger::new()).unwrap();
    out.robust_count() as f64 / data.len() as f64
}

#[test]
fn free_costs_exactly_what_natural_costs() {
    let data = blobs(100, 0);
    let model = mlp();
    let natural = train(&config(Regime::Natural, 8), &data, &model).unwrap();
    assert_eq!(natural.updates, 80);
    let n = natural.ledger.counts();
    ledger_assert(&n, Regime::Natural, 80, 1).unwrap();
    for m in [2, 4, 8] {
        let cfg = TrainConfig {
            replay: m,
            ..config(Regime::Free, 8)
        };
        let free = train(&cfg, &data, &model).unwrap();
        let f = free.ledger.counts();
        assert_eq!(free.updates, 80, "m={m}");
        assert_eq!((f.backward, f.sgd_update), (n.backward, n.sgd_update), "m={m}");
        ledger_assert(&f, Regime::Free, 80, m).unwrap();
        assert_eq!(free.ledger.count_kind(EventKind::PerturbationUpdate), 80);
    }
}

#[test]
fn kpgd_costs_k_plus_one_backward_passes() {
    let data = blobs(100, 0);
    let model = mlp();
    let natural = train(&config(Regime::Natural, 2), &data, &model).unwrap();
    for k in [2, 7] {
        let cfg = TrainConfig {
            pgd_steps: k,
            ..config(Regime::Kpgd, 2)
        };
        let out = train(&cfg, &data, &model).unwrap();
        let c = out.ledger.counts();
        assert_eq!(out.updates, natural.updates);
        assert_eq!(c.backward, (k as u64 + 1) * natural.ledger.backward_count());
        assert_eq!(c.sgd_update, natural.ledger.sgd_update_count());
        ledger_assert(&c, Regime::Kpgd, out.updates as u64, k).unwrap();
        assert!(ledger_assert(&c, Regime::Natural, out.updates as u64, k).is_err());
    }
}

#[test]
fn free_with_one_replay_and_zero_budget_is_natural_training() {
    let data = blobs(50, 1);
    let model = mlp();
    let natural = train(&config(Regime::Natural, 3), &data, &model).unwrap();
    let cfg = TrainConfig {
        replay: 1,
        epsilon: 0.0,
        ..config(Regime::Free, 3)
    };
    let free = train(&cfg, &data, &model).unwrap();
    assert_eq!(free.params, natural.params);
    assert_eq!(free.epochs, natural.epochs);
}

#[test]
fn epochs_divide_by_replay() {
    let data = blobs(100, 0);
    let cfg = TrainConfig {
        replay: 4,
        ..config(Regime::Free, 10)
    };
    let out = train(&cfg, &data, &mlp()).unwrap();
    assert_eq!((out.outer_epochs, out.dropped_epochs), (2, 2));
    assert_eq!(out.updates, 2 * 10 * 4);
    assert_eq!(out.epochs.len(), 2);
}

#[test]
fn sgd_update_precedes_perturbation_update() {
    let data = blobs(30, 2);
    let cfg = TrainConfig {
        replay: 3,
        ..config(Regime::Free, 3)
    };
    let out = train(&cfg, &data, &mlp()).unwrap();
    let kinds: Vec<EventKind> = out.ledger.events().iter().map(|e| e.kind).collect();
    let expected = [
        EventKind::Forward,
        EventKind::Backward,
        EventKind::SgdUpdate,
        EventKind::PerturbationUpdate,
    ];
    assert_eq!(kinds.len(), out.updates * 4);
    for chunk in kinds.chunks(4) {
        assert_eq!(chunk, expected);
    }
    let seqs: Vec<u64> = out.ledger.events().iter().map(|e| e.seq).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert!(out.ledger.is_consistent());
}

#[derive(Default)]
struct Audit {
    last_end: Option<Vec<f32>>,
    starts: usize,
    carried_nonzero: usize,
    steps: Vec<(usize, usize)>,
    violations: usize,
    checked: usize,
}

impl TrainObserver for Audit {
    fn on_batch_start(&mut self, _batch: usize, state: &PerturbationState) {
        self.starts += 1;
        if let Some(prev) = &self.last_end {
            assert_eq!(prev.as_slice(), state.delta.data(), "perturbation changed between batches");
            if prev.iter().any(|&d| d != 0.0) {
                self.carried_nonzero += 1;
            }
        } else {
            assert!(state.delta.data().iter().all(|&d| d == 0.0), "initial perturbation must be zero");
        }
    }

    fn on_batch_end(&mut self, _batch: usize, state: &PerturbationState) {
        self.last_end = Some(state.delta.data().to_vec());
    }

    fn on_inner_step(&mut self, s: &InnerStep<'_>) {
        self.steps.push((s.batch, s.repetition));
        for ((&x, &d), &a) in s.x.iter().zip(s.delta).zip(s.x_adv) {
            self.checked += 1;
            let ok = d.abs() <= s.epsilon
                && s.value_range.contains(a)
                && (a as f64 - x as f64).abs() <= s.epsilon as f64;
            if !ok {
                self.violations += 1;
            }
        }
    }
}

#[test]
fn perturbation_is_warm_started_and_contained() {
    let data = blobs(35, 3);
    let cfg = TrainConfig {
        replay: 4,
        epsilon: 0.3,
        ..config(Regime::Free, 8)
    };
    let mut audit = Audit::default();
    let out = train_free_observed(&cfg, &data, &mlp(), &mut audit).unwrap();
    // 70 examples in batches of 20: 4 batches per epoch, 2 outer epochs
    assert_eq!(audit.starts, 8);
    assert_eq!(audit.carried_nonzero, 7);
    assert_eq!(audit.steps.len(), out.updates);
    for (i, &(batch, rep)) in audit.steps.iter().enumerate() {
        assert_eq!((batch, rep), (i / 4, i % 4));
    }
    assert!(audit.checked > 0);
    assert_eq!(audit.violations, 0);
}

#[test]
fn training_is_deterministic() {
    let data = blobs(40, 4);
    for regime in [Regime::Natural, Regime::Kpgd, Regime::Free] {
        let cfg = TrainConfig {
            replay: 2,
            pgd_steps: 2,
            seed: 17,
            ..config(regime, 4)
        };
        let a = train(&cfg, &data, &mlp()).unwrap();
        let b = train(&cfg, &data, &mlp()).unwrap();
        assert_eq!(a.params, b.params, "{regime:?}");
        let c = train(&TrainConfig { seed: 18, ..cfg }, &data, &mlp()).unwrap();
        assert_ne!(a.params, c.params, "{regime:?}");
    }
}

#[test]
fn blobs_are_learnable_and_adversarial_training_helps() {
    let train_set = blobs(200, 5);
    let val = blobs(100, 6);
    let model = mlp();
    let natural = train(&config(Regime::Natural, 10), &train_set, &model).unwrap();
    assert!(accuracy(&model, &natural.params, &val) >= 0.99);

    let kpgd = TrainConfig {
        pgd_steps: 2,
        ..config(Regime::Kpgd, 10)
    };
    let kpgd = train(&kpgd, &train_set, &model).unwrap();
    let eps = 0.1;
    let nat_rob = robust_accuracy(&model, &natural.params, &val, eps);
    let adv_rob = robust_accuracy(&model, &kpgd.params, &val, eps);
    assert!(adv_rob > nat_rob, "kpgd {adv_rob} vs natural {nat_rob}");
}

#[test]
fn diverging_training_reports_the_iteration() {
    let data = blobs(50, 7);
    let cfg = TrainConfig {
        lr: 1e30,
        momentum: 0.0,
        weight_decay: 0.0,
        ..config(Regime::Natural, 5)
    };
    match train(&cfg, &data, &mlp()) {
        Err(Error::NonFiniteLoss { iteration }) => assert!(iteration > 0),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
