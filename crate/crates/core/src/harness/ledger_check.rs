//! Exact cost-accounting checks on a finished run.

use crate::error::{Error, Result};
use crate::ledger::LedgerCounts;
use crate::training::Regime;

/// Backward passes a run of `updates` SGD updates must have performed.
/// `k_or_m` is the inner PGD step count for `kpgd` and the replay count for
/// `free` (which does not change the count).
pub fn expected_backward(regime: Regime, updates: u64, k_or_m: usize) -> u64 {
    match regime {
        Regime::Natural | Regime::Free => updates,
        Regime::Kpgd => (k_or_m as u64 + 1) * updates,
    }
}

/// Checks `sgd_update == updates` and the regime's backward count, exactly.
pub fn ledger_assert(counts: &LedgerCounts, regime: Regime, updates: u64, k_or_m: usize) -> Result<()> {
    if counts.sgd_update != updates {
        return Err(Error::Ledger(format!(
            "{}: expected {updates} sgd updates, ledger has {}",
            regime.name(),
            counts.sgd_update
        )));
    }
    let want = expected_backward(regime, updates, k_or_m);
    if counts.backward != want {
        return Err(Error::Ledger(format!(
            "{} (K or m = {k_or_m}): expected {want} backward passes for {updates} updates, ledger has {}",
            regime.name(),
            counts.backward
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(backward: u64, sgd_update: u64) -> LedgerCounts {
        LedgerCounts {
            forward: backward,
            backward,
            sgd_update,
        }
    }

    #[test]
    fn cost_model() {
        assert!(ledger_assert(&counts(100, 100), Regime::Natural, 100, 1).is_ok());
        assert!(ledger_assert(&counts(800, 100), Regime::Kpgd, 100, 7).is_ok());
        assert!(ledger_assert(&counts(100, 100), Regime::Free, 100, 8).is_ok());
        let err = ledger_assert(&counts(799, 100), Regime::Kpgd, 100, 7).unwrap_err();
        assert!(err.to_string().contains("expected 800"), "{err}");
        assert!(ledger_assert(&counts(100, 99), Regime::Natural, 100, 1).is_err());
    }
}
