//! Untargeted l-inf attacks: FGSM, BIM/PGD-K and PGD with random restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::models::{argmax_rows, LossKind, Model, ParamSet};
use crate::ops::{apply_primitive, Primitive};
use crate::perturb::{project, signed_step, ValueRange};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-inf budget, in the dataset's pixel units.
    pub epsilon: f32,
    /// Per-iteration step size.
    pub step_size: f32,
    /// Number of signed-gradient iterations.
    pub steps: usize,
    /// Start from uniform noise in `[-epsilon, epsilon]` (PGD) instead of zero (BIM).
    pub random_init: bool,
    pub restarts: usize,
    pub loss: LossKind,
    pub value_range: ValueRange,
    pub seed: u64,
}

impl AttackConfig {
    /// PGD-K with random init, cross-entropy loss and one restart.
    pub fn pgd(epsilon: f32, step_size: f32, steps: usize, value_range: ValueRange) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            random_init: true,
            restarts: 1,
            loss: LossKind::CrossEntropy,
            value_range,
            seed: 0,
        }
    }

    /// Evaluation step size when none is configured: 2 pixel levels of a
    /// 0..255 image, rescaled to `range`, for CIFAR-style data; `epsilon / 4`
    /// otherwise.
    pub fn default_step_size(epsilon: f32, range: ValueRange, cifar_style: bool) -> f32 {
        if cifar_style {
            2.0 * range.width() / 255.0
        } else {
            epsilon / 4.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps >= 1 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be > 0, got {}", self.step_size));
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1".into());
        }
        if self.restarts > 1 && !self.random_init {
            return bad("restarts > 1 require random_init".into());
        }
        ValueRange::new(self.value_range.lo, self.value_range.hi)?;
        Ok(())
    }
}

/// Batch mean of the logit margin `max_{i != y} z_i - z_y`.
pub fn cw_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let margins = apply_primitive(&Primitive::CwMargin { labels: labels.to_vec() }, &[logits])?;
    apply_primitive(&Primitive::MeanBatch, &[&margins])
}

/// Gradient of the mean loss with respect to the input batch. One forward
/// and one backward pass.
pub fn input_gradient(
    model: &Model,
    params: &ParamSet,
    x_adv: &Tensor,
    labels: &[usize],
    loss: LossKind,
    ledger: &CostLedger,
) -> Result<Tensor> {
    let rec = model.record(params, x_adv, labels, loss, ledger)?;
    Ok(rec.backward(ledger)?.input)
}

/// `clamp(x + epsilon * sign(grad_x loss))`. One forward and one backward pass.
pub fn fgsm(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    value_range: ValueRange,
    loss: LossKind,
    ledger: &CostLedger,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let grad = input_gradient(model, params, x, labels, loss, ledger)?;
    let mut delta = vec![0.0f32; x.numel()];
    let mut adv = x.clone();
    signed_step(x.data(), grad.data(), &mut delta, adv.data_mut(), epsilon, epsilon, value_range);
    Ok(adv)
}

/// Deterministic generator for restart `restart` of an attack seeded with `seed`.
pub fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// PGD-K (BIM when `random_init` is off). Exactly `steps` forward and
/// backward passes.
pub fn pgd_attack(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
    ledger: &CostLedger,
) -> Result<Tensor> {
    pgd_attack_observed(model, params, x, labels, cfg, rng, ledger, |_, _| {})
}

/// [`pgd_attack`], calling `observe(delta, x_adv)` after initialization and
/// after every step.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_observed(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
    ledger: &CostLedger,
    mut observe: impl FnMut(&[f32], &[f32]),
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut delta: Vec<f32> = if cfg.random_init && eps > 0.0 {
        (0..x.numel()).map(|_| rng.random_range(-eps..=eps)).collect()
    } else {
        vec![0.0; x.numel()]
    };
    let mut adv = x.clone();
    project(x.data(), &mut delta, adv.data_mut(), eps, cfg.value_range);
    observe(&delta, adv.data());
    for _ in 0..cfg.steps {
        let grad = input_gradient(model, params, &adv, labels, cfg.loss, ledger)?;
        signed_step(
            x.data(),
            grad.data(),
            &mut delta,
            adv.data_mut(),
            cfg.step_size,
            eps,
            cfg.value_range,
        );
        observe(&delta, adv.data());
    }
    Ok(adv)
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    /// Per example: misclassified after at least one restart.
    pub success: Vec<bool>,
    /// First misclassifying perturbation per example, else the last restart's.
    pub adversarial: Tensor,
}

impl RestartOutcome {
    pub fn robust_count(&self) -> usize {
        self.success.iter().filter(|&&s| !s).count()
    }
}

/// Runs `cfg.restarts` PGD attacks with fresh random starts; an example is
/// broken if any restart misclassifies it. Restart `r` draws from
/// `restart_rng(cfg.seed, r)`, so runs with more restarts extend runs with
/// fewer.
pub fn attack_with_restarts(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    ledger: &CostLedger,
) -> Result<RestartOutcome> {
    cfg.validate()?;
    let n = x.batch();
    let row = x.row_len();
    let mut success = vec![false; n];
    let mut adversarial = x.clone();
    for r in 0..cfg.restarts {
        let mut rng = restart_rng(cfg.seed, r);
        let adv = pgd_attack(model, params, x, labels, cfg, &mut rng, ledger)?;
        let pred = argmax_rows(&model.logits(params, &adv, ledger)?);
        for i in 0..n {
            if success[i] {
                continue;
            }
            adversarial.data_mut()[i * row..(i + 1) * row].copy_from_slice(&adv.data()[i * row..(i + 1) * row]);
            if pred[i] != labels[i] {
                success[i] = true;
            }
        }
    }
    Ok(RestartOutcome { success, adversarial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use crate::models::{init_params, Architecture, ModelSpec};

    fn logistic(w: &[f32]) -> (Model, ParamSet) {
        let spec = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![] },
            input_shape: vec![w.len()],
            classes: 2,
            input_scale: 1.0,
        };
        let model = Model::new(spec.clone()).unwrap();
        let mut params = init_params(&spec, 0).unwrap();
        let head = params.get_mut("head.weight").unwrap();
        for (i, &wi) in w.iter().enumerate() {
            head.data_mut()[i * 2] = 0.0;
            head.data_mut()[i * 2 + 1] = wi;
        }
        (model, params)
    }

    #[test]
    fn cw_loss_examples() {
        let logits = Tensor::new(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        assert_eq!(cw_loss(&logits, &[0]).unwrap().item(), -10.0);
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(cw_loss(&logits, &[0]).unwrap().item(), 0.0);
        assert!(cw_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn cw_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 4], vec![0.3, -1.1, 0.9, 0.2, 1.4, 0.1, -0.5, 0.8]).unwrap();
        let labels = [2, 0];
        let mut tape = crate::tape::Tape::new();
        let z = tape.input(logits.clone());
        let m = tape.apply(Primitive::CwMargin { labels: labels.to_vec() }, &[z]).unwrap();
        let l = tape.apply(Primitive::MeanBatch, &[m]).unwrap();
        tape.set_loss(l).unwrap();
        let g = tape.backward_dual(&CostLedger::new()).unwrap().g_adv[&z].clone();
        let fd = finite_diff_grad(
            |t| {
                let c = 4;
                let mut acc = 0.0f64;
                for (row, &y) in t.data().chunks(c).zip(&labels) {
                    let best = (0..c).filter(|&i| i != y).map(|i| row[i] as f64).fold(f64::MIN, f64::max);
                    acc += best - row[y] as f64;
                }
                Ok(acc / 2.0)
            },
            &logits,
            1e-3,
        )
        .unwrap();
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-1), "{a} vs {b}");
        }
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let (model, params) = logistic(&[2.0, -1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
        let adv = fgsm(&model, &params, &x, &[1], 0.0, ValueRange::UNIT, LossKind::CrossEntropy, &CostLedger::new())
            .unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_moves_against_weights_for_positive_label() {
        let (model, params) = logistic(&[2.0, -1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
        let ledger = CostLedger::new();
        let adv =
            fgsm(&model, &params, &x, &[1], 0.1, ValueRange::UNIT, LossKind::CrossEntropy, &ledger).unwrap();
        let delta: Vec<f32> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        assert!((delta[0] + 0.1).abs() < 1e-6 && (delta[1] - 0.1).abs() < 1e-6, "{delta:?}");
        assert_eq!((ledger.forward_count(), ledger.backward_count()), (1, 1));
    }

    #[test]
    fn zero_model_gradient_keeps_input() {
        let (model, params) = logistic(&[0.0, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        let adv = fgsm(&model, &params, &x, &[0], 0.3, ValueRange::UNIT, LossKind::CrossEntropy, &CostLedger::new())
            .unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn pgd_with_no_steps_and_no_init_is_identity() {
        let (model, params) = logistic(&[1.0, 1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.7]).unwrap();
        let mut cfg = AttackConfig::pgd(0.3, 0.1, 0, ValueRange::UNIT);
        cfg.random_init = false;
        let ledger = CostLedger::new();
        let adv = pgd_attack(&model, &params, &x, &[0], &cfg, &mut restart_rng(0, 0), &ledger).unwrap();
        assert_eq!(adv, x);
        assert_eq!(ledger.backward_count(), 0);
    }

    #[test]
    fn pgd_counts_one_backward_per_step() {
        let (model, params) = logistic(&[1.0, -2.0, 0.5]);
        let x = Tensor::new(vec![2, 3], vec![0.2, 0.7, 0.1, 0.9, 0.4, 0.5]).unwrap();
        let cfg = AttackConfig::pgd(0.1, 0.03, 7, ValueRange::UNIT);
        let ledger = CostLedger::new();
        pgd_attack(&model, &params, &x, &[0, 1], &cfg, &mut restart_rng(1, 0), &ledger).unwrap();
        assert_eq!((ledger.forward_count(), ledger.backward_count()), (7, 7));
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::pgd(0.1, 0.03, 7, ValueRange::UNIT);
        assert!(cfg.validate().is_ok());
        cfg.restarts = 0;
        assert!(cfg.validate().is_err());
        cfg.restarts = 3;
        cfg.random_init = false;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::pgd(-0.1, 0.03, 7, ValueRange::UNIT);
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.1;
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
        cfg.steps = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_step_sizes() {
        assert_eq!(AttackConfig::default_step_size(8.0, ValueRange::PIXELS_255, true), 2.0);
        assert!((AttackConfig::default_step_size(8.0 / 255.0, ValueRange::UNIT, true) - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(AttackConfig::default_step_size(0.3, ValueRange::UNIT, false), 0.075);
    }
}
