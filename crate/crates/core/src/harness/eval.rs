//! Clean and adversarial accuracy over a dataset.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{AttackKind, AttackSpec};
use crate::attacks::{attack_with_restarts, fgsm};
use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::models::{argmax_rows, Model, ParamSet};
use crate::training::derive_seed;

pub const REPORT_HEADER: &str = "attack,K,epsilon,epsilon_s,restarts,accuracy,n,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub steps: usize,
    pub epsilon: f32,
    pub step_size: f32,
    pub restarts: usize,
    pub correct: usize,
    pub n: usize,
    pub seconds: f64,
}

impl ReportRow {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub natural: ReportRow,
    pub attacks: Vec<ReportRow>,
    pub seed: u64,
    pub seconds: f64,
}

impl EvalReport {
    pub fn natural_accuracy(&self) -> f64 {
        self.natural.accuracy()
    }

    pub fn examples(&self) -> usize {
        self.natural.n
    }

    pub fn row(&self, attack: &str) -> Option<&ReportRow> {
        self.attacks.iter().find(|r| r.attack == attack)
    }

    /// Fixed-column CSV; the first data row is the clean (`natural`) accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in std::iter::once(&self.natural).chain(&self.attacks) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.attack,
                r.steps,
                r.epsilon,
                r.step_size,
                r.restarts,
                r.accuracy(),
                r.n,
                r.seconds
            );
        }
        out
    }
}

/// Clean accuracy plus accuracy under each attack. FGSM counts an example as
/// robust when the perturbed input is still classified correctly; BIM/PGD
/// examples are robust only if every restart fails. Batch `b` of attack `a`
/// is seeded from `(a.config.seed, b)`, so results do not depend on timing.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    attacks: &[AttackSpec],
    batch_size: usize,
    seed: u64,
    ledger: &CostLedger,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let start = Instant::now();
    let batches = batch_indices(dataset.len(), batch_size, 0, false)?;
    let n = dataset.len();

    let t = Instant::now();
    let mut correct = 0;
    for b in &batches {
        let (x, y) = b.gather(dataset)?;
        let pred = model.predict(params, &x, ledger)?;
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    let natural = ReportRow {
        attack: "natural".into(),
        steps: 0,
        epsilon: 0.0,
        step_size: 0.0,
        restarts: 0,
        correct,
        n,
        seconds: t.elapsed().as_secs_f64(),
    };

    let mut rows = Vec::with_capacity(attacks.len());
    for spec in attacks {
        let t = Instant::now();
        let mut robust = 0;
        for (bi, b) in batches.iter().enumerate() {
            let (x, y) = b.gather(dataset)?;
            let mut cfg = spec.config.clone();
            cfg.seed = derive_seed(spec.config.seed, 0xE7A1, bi as u64);
            robust += match spec.kind {
                AttackKind::Fgsm => {
                    let adv = fgsm(model, params, &x, &y, cfg.epsilon, cfg.value_range, cfg.loss, ledger)?;
                    let pred = argmax_rows(&model.logits(params, &adv, ledger)?);
                    pred.iter().zip(&y).filter(|(p, l)| p == l).count()
                }
                AttackKind::Bim | AttackKind::Pgd => {
                    attack_with_restarts(model, params, &x, &y, &cfg, ledger)?.robust_count()
                }
            };
        }
        rows.push(ReportRow {
            attack: spec.name.clone(),
            steps: spec.config.steps,
            epsilon: spec.config.epsilon,
            step_size: spec.config.step_size,
            restarts: spec.config.restarts,
            correct: robust,
            n,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(EvalReport {
        natural,
        attacks: rows,
        seed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
