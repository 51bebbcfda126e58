//! End-to-end runs: load data, train, evaluate, write artifacts.
//!
//! An output directory holds `manifest.json`, `checkpoint.ftck`,
//! `report.csv` and, when a `[surface]` section is configured,
//! `surface_summary.csv` plus one `surface_<i>.csv` grid per written example.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::config::{DataSource, ExperimentConfig, SurfaceConfig};
use super::eval::{evaluate, EvalReport};
use super::ledger_check::ledger_assert;
use super::surface::{loss_surface, Direction};
use crate::checkpoint;
use crate::data::{load_cifar_binary, load_idx, synth_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::ledger::{CostLedger, LedgerCounts};
use crate::models::{Model, ParamSet};
use crate::training::{derive_seed, train, EpochStats, Regime};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "FREEADV_OUTPUT_DIR";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ftck";
pub const REPORT_FILE: &str = "report.csv";
pub const SURFACE_SUMMARY_FILE: &str = "surface_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub examples: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub regime: Regime,
    /// `K` for kpgd, `m` for free, 1 for natural.
    pub k_or_m: usize,
    pub updates: u64,
    pub outer_epochs: usize,
    pub dropped_epochs: usize,
    pub ledger: LedgerCounts,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_path: Option<PathBuf>,
    /// Git-style blob hash of the config file text.
    pub config_sha1: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub train_data: DatasetInfo,
    pub eval_data: DatasetInfo,
    pub training: Option<TrainingRecord>,
}

/// Files written by a run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub report: EvalReport,
    pub params: ParamSet,
}

/// `sha1("blob <len>\0" + bytes)`, hex encoded, as `git hash-object` prints it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// `(train, eval)` datasets; the eval split is cut to `eval_n` examples.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut val) = match &cfg.data.source {
        DataSource::Mnist {
            train_images,
            train_labels,
            val_images,
            val_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(val_images, val_labels)?),
        DataSource::Cifar { train, val } => (load_cifar_binary(train)?, load_cifar_binary(val)?),
        DataSource::Blobs {
            classes,
            per_class,
            val_per_class,
            dims,
            separation,
        } => (
            synth_blobs(*classes, *per_class, *dims, *separation, derive_seed(cfg.seed, 0xB10B, 0))?,
            synth_blobs(*classes, *val_per_class, *dims, *separation, derive_seed(cfg.seed, 0xB10B, 1))?,
        ),
    };
    if let Some(n) = cfg.data.per_class {
        train = train.take_per_class(n)?;
    }
    if let Some(n) = cfg.eval.eval_n {
        val = val.take_first(n.min(val.len()))?;
    }
    train.split = Split::Train;
    val.split = Split::Validation;
    Ok((train, val))
}

/// Output directory: `FREEADV_OUTPUT_DIR` when set, else the configured one.
pub fn output_dir_for(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest: {e}")))?;
    write(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads a config file and runs it into `output_dir_for(config)`.
pub fn run_experiment(config_path: &Path) -> Result<RunArtifacts> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let cfg = ExperimentConfig::parse(&text, base)?;
    let out = output_dir_for(&cfg);
    run_experiment_in(&cfg, &text, Some(config_path), &out)
}

/// Runs `cfg` (parsed from `config_text`) writing every artifact into `out`.
pub fn run_experiment_in(
    cfg: &ExperimentConfig,
    config_text: &str,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_set, val_set) = load_datasets(cfg)?;
    let model = build(cfg, &train_set)?;

    let mut manifest = Manifest {
        code_version: cfg
            .code_version
            .clone()
            .unwrap_or_else(|| format!("freeadv {}", env!("CARGO_PKG_VERSION"))),
        config_path: config_path.map(Path::to_path_buf),
        config_sha1: git_blob_sha1(config_text.as_bytes()),
        config: cfg.clone(),
        seed: cfg.seed,
        train_data: DatasetInfo {
            examples: train_set.len(),
            fingerprint: train_set.fingerprint(),
        },
        eval_data: DatasetInfo {
            examples: val_set.len(),
            fingerprint: val_set.fingerprint(),
        },
        training: None,
    };
    write_manifest(out, &manifest)?;

    let started = Instant::now();
    let outcome = train(&cfg.train, &train_set, &model)?;
    let counts = outcome.ledger.counts();
    let k_or_m = match cfg.train.regime {
        Regime::Natural => 1,
        Regime::Kpgd => cfg.train.pgd_steps,
        Regime::Free => cfg.train.replay,
    };
    ledger_assert(&counts, cfg.train.regime, outcome.updates as u64, k_or_m)?;
    manifest.training = Some(TrainingRecord {
        regime: cfg.train.regime,
        k_or_m,
        updates: outcome.updates as u64,
        outer_epochs: outcome.outer_epochs,
        dropped_epochs: outcome.dropped_epochs,
        ledger: counts,
        epochs: outcome.epochs.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    });
    checkpoint::save(&outcome.params, &out.join(CHECKPOINT_FILE))?;

    let report = evaluate_into(cfg, &model, &outcome.params, &val_set, out)?;
    if let Some(surface) = &cfg.surface {
        surface_into(surface, &model, &outcome.params, &val_set, out)?;
    }
    write_manifest(out, &manifest)?;
    Ok(RunArtifacts {
        output_dir: out.to_path_buf(),
        manifest,
        report,
        params: outcome.params,
    })
}

fn build(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<Model> {
    let spec = cfg
        .model
        .spec(train_set.example_shape(), train_set.classes, train_set.value_range);
    Model::new(spec)
}

fn load_checked(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<(Model, ParamSet, Dataset)> {
    let (train_set, val_set) = load_datasets(cfg)?;
    let model = build(cfg, &train_set)?;
    let params = checkpoint::load(checkpoint_path)?;
    params.check_against(&model)?;
    Ok((model, params, val_set))
}

fn evaluate_into(cfg: &ExperimentConfig, model: &Model, params: &ParamSet, val: &Dataset, out: &Path) -> Result<EvalReport> {
    let ledger = CostLedger::new();
    let report = evaluate(model, params, val, &cfg.attacks, cfg.eval.batch_size, cfg.seed, &ledger)?;
    write(&out.join(REPORT_FILE), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Re-evaluates a saved checkpoint, writing `report.csv` into `out`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, params, val) = load_checked(cfg, checkpoint_path)?;
    evaluate_into(cfg, &model, &params, &val, out)
}

/// Mean losses behind the surface summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSummary {
    pub examples: usize,
    pub mean_center: f64,
    /// At `+extent` along the adversarial direction.
    pub mean_adversarial: f64,
    /// At `+extent` along the Rademacher direction.
    pub mean_rademacher: f64,
}

/// Loss grids for the first `cfg.examples` examples of `val`, each spanned by
/// the adversarial direction (rows) and a per-example Rademacher direction
/// (columns). Writes the summary and the first `cfg.write_grids` grids.
pub fn surface_into(
    cfg: &SurfaceConfig,
    model: &Model,
    params: &ParamSet,
    val: &Dataset,
    out: &Path,
) -> Result<SurfaceSummary> {
    let n = cfg.examples.min(val.len());
    let ledger = CostLedger::new();
    let mut csv = String::from(
        "# plain sign/Rademacher directions, no filter normalization\nexample,label,loss_center,loss_adversarial,loss_rademacher\n",
    );
    let (mut c, mut a, mut r) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let x = val.images.slice_rows(i, i + 1)?;
        let y = val.labels[i];
        let grid = loss_surface(
            model,
            params,
            &x,
            y,
            Direction::Adversarial,
            Direction::Rademacher {
                seed: derive_seed(cfg.seed, 0x5EF, i as u64),
            },
            cfg.extent,
            cfg.grid_n,
            val.value_range,
            &ledger,
        )?;
        if i < cfg.write_grids {
            write(&out.join(format!("surface_{i}.csv")), grid.to_csv().as_bytes())?;
        }
        let (gc, ga, gr) = (grid.center(), grid.edge_a(), grid.edge_b());
        csv.push_str(&format!("{i},{y},{gc},{ga},{gr}\n"));
        c += gc as f64;
        a += ga as f64;
        r += gr as f64;
    }
    let k = n.max(1) as f64;
    let summary = SurfaceSummary {
        examples: n,
        mean_center: c / k,
        mean_adversarial: a / k,
        mean_rademacher: r / k,
    };
    csv.push_str(&format!(
        "mean,,{},{},{}\n",
        summary.mean_center, summary.mean_adversarial, summary.mean_rademacher
    ));
    write(&out.join(SURFACE_SUMMARY_FILE), csv.as_bytes())?;
    Ok(summary)
}

/// Loss surfaces for a saved checkpoint.
pub fn surface_checkpoint(cfg: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<SurfaceSummary> {
    let surface = cfg
        .surface
        .as_ref()
        .ok_or_else(|| Error::config("surface", "missing required section"))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, params, val) = load_checked(cfg, checkpoint_path)?;
    surface_into(surface, &model, &params, &val, out)
}

/// Re-checks the cost ledger recorded in a manifest.
pub fn check_manifest(path: &Path) -> Result<TrainingRecord> {
    let manifest = read_manifest(path)?;
    let record = manifest
        .training
        .ok_or_else(|| Error::Ledger(format!("{} has no training record (run incomplete)", path.display())))?;
    ledger_assert(&record.ledger, record.regime, record.updates, record.k_or_m)?;
    Ok(record)
}
