//! Natural, K-PGD adversarial and free (minibatch-replay) training.
//!
//! All three regimes share one loop shape: shuffle per epoch, run minibatch
//! SGD, keep an exact [`CostLedger`]. Free training replays each minibatch
//! `m` times, runs the outer epoch loop `epochs / m` times, and uses the input
//! gradient from each descent step's backward pass to advance a perturbation
//! that persists across minibatches for the whole run.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, restart_rng, AttackConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::models::{argmax_rows, init_params, sgd_step, LossKind, Model, ParamSet, SgdConfig};
use crate::perturb::{project, signed_step, ValueRange};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Natural,
    Kpgd,
    Free,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Natural => "natural",
            Regime::Kpgd => "kpgd",
            Regime::Free => "free",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Regime::Natural),
            "kpgd" => Ok(Regime::Kpgd),
            "free" => Ok(Regime::Free),
            other => Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Minibatch replay count `m` (free only).
    pub replay: usize,
    /// Inner PGD steps `K` (kpgd only).
    pub pgd_steps: usize,
    pub epsilon: f32,
    /// Inner PGD step size (kpgd only; free steps by `epsilon`).
    pub step_size: f32,
    /// Random start for the inner PGD attack (kpgd only).
    pub kpgd_random_init: bool,
    /// Nominal epoch count `N_ep`.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Fractions of total iterations at which the learning rate is multiplied
    /// by `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Natural,
            replay: 1,
            pgd_steps: 7,
            epsilon: 0.0,
            step_size: 0.0,
            kpgd_random_init: true,
            epochs: 1,
            batch_size: 128,
            lr: 0.1,
            lr_decay_at: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("lr_decay_at fractions must lie in [0, 1]".into());
        }
        match self.regime {
            Regime::Natural => {}
            Regime::Kpgd => {
                if self.pgd_steps == 0 {
                    return bad("kpgd needs pgd_steps >= 1".into());
                }
                if !(self.step_size > 0.0) {
                    return bad("kpgd needs step_size > 0".into());
                }
            }
            Regime::Free => {
                if self.replay == 0 {
                    return bad("free training needs replay >= 1".into());
                }
                if self.epochs < self.replay {
                    return bad(format!(
                        "epochs ({}) must be >= replay ({}) so at least one outer epoch runs",
                        self.epochs, self.replay
                    ));
                }
            }
        }
        Ok(())
    }

    /// Outer epoch count and nominal epochs dropped by integer division.
    pub fn outer_epochs(&self) -> (usize, usize) {
        match self.regime {
            Regime::Free => outer_epochs(self.epochs, self.replay),
            _ => (self.epochs, 0),
        }
    }

    /// SGD updates the run will perform on a dataset of `n` examples.
    pub fn total_updates(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        let (outer, _) = self.outer_epochs();
        let replay = if self.regime == Regime::Free { self.replay } else { 1 };
        outer * per_epoch * replay
    }

    pub fn lr_at(&self, iteration: usize, total: usize) -> f32 {
        let drops = self
            .lr_decay_at
            .iter()
            .filter(|&&f| iteration >= (f * total as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

/// `(floor(epochs / m), epochs mod m)`.
pub fn outer_epochs(epochs: usize, replay: usize) -> (usize, usize) {
    (epochs / replay, epochs % replay)
}

/// Repeats each id `m` times in a row, preserving order.
pub fn replay_schedule<T: Clone>(ids: &[T], m: usize) -> Result<Vec<T>> {
    if m < 1 {
        return Err(Error::InvalidArgument("replay count must be >= 1".into()));
    }
    Ok(ids
        .iter()
        .flat_map(|id| std::iter::repeat_n(id.clone(), m))
        .collect())
}

/// The persistent perturbation of free training, sized for a full batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    pub delta: Tensor,
}

impl PerturbationState {
    pub fn zeros(batch_size: usize, example_shape: &[usize]) -> Self {
        let mut shape = vec![batch_size];
        shape.extend_from_slice(example_shape);
        Self {
            delta: Tensor::zeros(&shape),
        }
    }

    /// Leading `rows` examples of the buffer.
    pub fn rows(&self, rows: usize) -> &[f32] {
        &self.delta.data()[..rows * self.delta.row_len()]
    }

    fn rows_mut(&mut self, rows: usize) -> &mut [f32] {
        let len = self.delta.row_len();
        &mut self.delta.data_mut()[..rows * len]
    }
}

/// One perturbed training input, reported after the perturbation update.
#[derive(Debug)]
pub struct InnerStep<'a> {
    pub batch: usize,
    pub repetition: usize,
    pub x: &'a [f32],
    pub delta: &'a [f32],
    pub x_adv: &'a [f32],
    pub epsilon: f32,
    pub value_range: ValueRange,
}

/// Hooks into the training loop, used to audit invariants.
pub trait TrainObserver {
    fn on_batch_start(&mut self, _batch: usize, _state: &PerturbationState) {}
    fn on_batch_end(&mut self, _batch: usize, _state: &PerturbationState) {}
    fn on_inner_step(&mut self, _step: &InnerStep<'_>) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy on the (possibly perturbed) training inputs seen this epoch.
    pub train_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub ledger: CostLedger,
    pub updates: usize,
    pub outer_epochs: usize,
    pub dropped_epochs: usize,
    pub epochs: Vec<EpochStats>,
}

/// Derives an independent stream seed from a run seed.
pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_TAG: u64 = 1;
const KPGD_TAG: u64 = 2;

fn epoch_batches(cfg: &TrainConfig, dataset: &Dataset, epoch: usize) -> Result<Vec<crate::data::Batch>> {
    batches(dataset, cfg.batch_size, derive_seed(cfg.seed, SHUFFLE_TAG, epoch as u64), true)
}

struct EpochAccumulator {
    loss: f64,
    correct: u64,
    seen: u64,
    steps: u64,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            loss: 0.0,
            correct: 0,
            seen: 0,
            steps: 0,
        }
    }

    fn add(&mut self, loss: f32, logits: &Tensor, labels: &[usize]) {
        self.loss += loss as f64;
        self.steps += 1;
        self.seen += labels.len() as u64;
        self.correct += argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count() as u64;
    }

    fn finish(&self, epoch: usize) -> EpochStats {
        EpochStats {
            epoch,
            mean_loss: self.loss / self.steps.max(1) as f64,
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

/// One descent step on `x`: forward, dual backward, SGD. Returns the input
/// gradient from the same backward pass.
fn descent_step(
    model: &Model,
    params: &mut ParamSet,
    x: &Tensor,
    labels: &[usize],
    sgd: &SgdConfig,
    iteration: usize,
    ledger: &CostLedger,
    acc: &mut EpochAccumulator,
) -> Result<Tensor> {
    let rec = model
        .record(params, x, labels, LossKind::CrossEntropy, ledger)
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { iteration },
            other => other,
        })?;
    let loss = rec.loss_value();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration });
    }
    let grads = rec.backward(ledger)?;
    acc.add(loss, rec.logits_value(), labels);
    sgd_step(params, &grads.params, sgd, ledger)?;
    Ok(grads.input)
}

fn sgd_config(cfg: &TrainConfig, iteration: usize, total: usize) -> SgdConfig {
    SgdConfig {
        lr: cfg.lr_at(iteration, total),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    }
}

fn check_regime(cfg: &TrainConfig, want: Regime) -> Result<()> {
    if cfg.regime != want {
        return Err(Error::InvalidArgument(format!(
            "config regime is {}, expected {}",
            cfg.regime.name(),
            want.name()
        )));
    }
    cfg.validate()
}

/// Plain minibatch SGD on clean inputs.
pub fn train_natural(cfg: &TrainConfig, dataset: &Dataset, model: &Model) -> Result<TrainOutcome> {
    check_regime(cfg, Regime::Natural)?;
    let params = init_params(model.spec(), cfg.seed)?;
    natural_from(cfg, dataset, model, params)
}

fn natural_from(cfg: &TrainConfig, dataset: &Dataset, model: &Model, mut params: ParamSet) -> Result<TrainOutcome> {
    let ledger = CostLedger::new();
    let total = cfg.total_updates(dataset.len());
    let mut iteration = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::new();
        for batch in epoch_batches(cfg, dataset, epoch)? {
            let (x, y) = batch.gather(dataset)?;
            descent_step(model, &mut params, &x, &y, &sgd_config(cfg, iteration, total), iteration, &ledger, &mut acc)?;
            iteration += 1;
        }
        epochs.push(acc.finish(epoch));
    }
    Ok(TrainOutcome {
        params,
        ledger,
        updates: iteration,
        outer_epochs: cfg.epochs,
        dropped_epochs: 0,
        epochs,
    })
}

/// K-PGD adversarial training: per minibatch, a K-step PGD attack followed
/// by one SGD step on the adversarial batch.
pub fn train_kpgd(cfg: &TrainConfig, dataset: &Dataset, model: &Model) -> Result<TrainOutcome> {
    check_regime(cfg, Regime::Kpgd)?;
    let mut params = init_params(model.spec(), cfg.seed)?;
    let ledger = CostLedger::new();
    let total = cfg.total_updates(dataset.len());
    let attack = AttackConfig {
        epsilon: cfg.epsilon,
        step_size: cfg.step_size,
        steps: cfg.pgd_steps,
        random_init: cfg.kpgd_random_init,
        restarts: 1,
        loss: LossKind::CrossEntropy,
        value_range: dataset.value_range,
        seed: derive_seed(cfg.seed, KPGD_TAG, 0),
    };
    let mut rng = restart_rng(attack.seed, 0);
    let mut iteration = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::new();
        for batch in epoch_batches(cfg, dataset, epoch)? {
            let (x, y) = batch.gather(dataset)?;
            let x_adv = pgd_attack(model, &params, &x, &y, &attack, &mut rng, &ledger)?;
            descent_step(model, &mut params, &x_adv, &y, &sgd_config(cfg, iteration, total), iteration, &ledger, &mut acc)?;
            iteration += 1;
        }
        epochs.push(acc.finish(epoch));
    }
    Ok(TrainOutcome {
        params,
        ledger,
        updates: iteration,
        outer_epochs: cfg.epochs,
        dropped_epochs: 0,
        epochs,
    })
}

/// Free adversarial training (Free-m).
pub fn train_free(cfg: &TrainConfig, dataset: &Dataset, model: &Model) -> Result<TrainOutcome> {
    train_free_observed(cfg, dataset, model, &mut NoObserver)
}

/// [`train_free`] with invariant hooks.
pub fn train_free_observed(
    cfg: &TrainConfig,
    dataset: &Dataset,
    model: &Model,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    check_regime(cfg, Regime::Free)?;
    let mut params = init_params(model.spec(), cfg.seed)?;
    let ledger = CostLedger::new();
    let (outer, dropped) = cfg.outer_epochs();
    let total = cfg.total_updates(dataset.len());
    let eps = cfg.epsilon;
    let range = dataset.value_range;
    let mut state = PerturbationState::zeros(cfg.batch_size, dataset.example_shape());
    let mut iteration = 0;
    let mut batch_counter = 0;
    let mut epochs = Vec::with_capacity(outer);
    for epoch in 0..outer {
        let mut acc = EpochAccumulator::new();
        let epoch_batches = epoch_batches(cfg, dataset, epoch)?;
        let order: Vec<usize> = (0..epoch_batches.len()).collect();
        let schedule = replay_schedule(&order, cfg.replay)?;
        let mut current: Option<(usize, Tensor, Vec<usize>)> = None;
        for (pos, &b) in schedule.iter().enumerate() {
            let repetition = pos % cfg.replay;
            if repetition == 0 {
                if let Some((prev, _, _)) = current.take() {
                    observer.on_batch_end(prev, &state);
                }
                let (x, y) = epoch_batches[b].gather(dataset)?;
                observer.on_batch_start(batch_counter, &state);
                current = Some((batch_counter, x, y));
                batch_counter += 1;
            }
            let (batch_id, x, y) = current.as_ref().expect("batch loaded");
            let rows = x.batch();
            if rows > cfg.batch_size {
                return Err(Error::InvalidArgument(format!(
                    "batch of {rows} exceeds perturbation buffer of {}",
                    cfg.batch_size
                )));
            }
            let mut x_adv = x.clone();
            project(x.data(), state.rows_mut(rows), x_adv.data_mut(), eps, range);

            let sgd = sgd_config(cfg, iteration, total);
            let g_adv = descent_step(model, &mut params, &x_adv, y, &sgd, iteration, &ledger, &mut acc)?;
            signed_step(x.data(), g_adv.data(), state.rows_mut(rows), x_adv.data_mut(), eps, eps, range);
            ledger.record_perturbation_update();
            iteration += 1;

            observer.on_inner_step(&InnerStep {
                batch: *batch_id,
                repetition,
                x: x.data(),
                delta: state.rows(rows),
                x_adv: x_adv.data(),
                epsilon: eps,
                value_range: range,
            });
        }
        if let Some((prev, _, _)) = current.take() {
            observer.on_batch_end(prev, &state);
        }
        epochs.push(acc.finish(epoch));
    }
    Ok(TrainOutcome {
        params,
        ledger,
        updates: iteration,
        outer_epochs: outer,
        dropped_epochs: dropped,
        epochs,
    })
}

/// Dispatches on `cfg.regime`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, model: &Model) -> Result<TrainOutcome> {
    match cfg.regime {
        Regime::Natural => train_natural(cfg, dataset, model),
        Regime::Kpgd => train_kpgd(cfg, dataset, model),
        Regime::Free => train_free(cfg, dataset, model),
    }
}
