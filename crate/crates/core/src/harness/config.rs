//! Experiment configuration files.
//!
//! Line-based `key = value` text grouped under `[section]` headers. `#` starts
//! a comment. Unknown sections and keys are errors, as are duplicates; every
//! error names the offending `section.key`.
//!
//! ```text
//! [run]
//! seed = 0
//! output_dir = out/free8
//!
//! [data]
//! kind = mnist
//! train_images = data/mnist/train-images-idx3-ubyte
//! ...
//!
//! [attack.pgd20]
//! kind = pgd
//! steps = 20
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::models::{Architecture, ConvLayer, LossKind, ModelSpec};
use crate::perturb::ValueRange;
use crate::training::{derive_seed, Regime, TrainConfig};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Default)]
struct Section {
    entries: BTreeMap<String, Entry>,
}

/// Sections in file order, keyed by name.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: Vec<(String, Section)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {line_no}"), "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::config(format!("line {line_no}"), "empty section name"));
                }
                if cfg.sections.iter().any(|(n, _)| n == name) {
                    return Err(Error::config(name, format!("duplicate section at line {line_no}")));
                }
                cfg.sections.push((name.to_string(), Section::default()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line_no}"), "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let Some((section_name, section)) = cfg.sections.last_mut() else {
                return Err(Error::config(key, format!("key outside any section at line {line_no}")));
            };
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}"), "empty key"));
            }
            if section.entries.contains_key(key) {
                return Err(Error::config(format!("{section_name}.{key}"), format!("duplicate key at line {line_no}")));
            }
            section.entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line: line_no,
                },
            );
        }
        Ok(cfg)
    }

    fn take(&mut self, name: &str) -> Option<SectionReader> {
        let idx = self.sections.iter().position(|(n, _)| n == name)?;
        let (name, section) = self.sections.remove(idx);
        Some(SectionReader { name, section })
    }

    fn take_prefixed(&mut self, prefix: &str) -> Vec<SectionReader> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.sections.len() {
            if self.sections[i].0.starts_with(prefix) {
                let (name, section) = self.sections.remove(i);
                out.push(SectionReader { name, section });
            } else {
                i += 1;
            }
        }
        out
    }

    fn finish(self) -> Result<()> {
        match self.sections.first() {
            Some((name, _)) => Err(Error::config(name.clone(), "unknown section")),
            None => Ok(()),
        }
    }
}

/// Typed reads from one section; leftovers are reported by [`finish`](Self::finish).
struct SectionReader {
    name: String,
    section: Section,
}

impl SectionReader {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            section: Section::default(),
        }
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&mut self, key: &str) -> Option<Entry> {
        self.section.entries.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| Error::config(self.key(key), format!("line {}: cannot parse `{}`: {err}", e.line, e.value))),
        }
    }

    fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(self.key(key), "missing required key"))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        if e.value.is_empty() {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|err| Error::config(self.key(key), format!("line {}: cannot parse `{}`: {err}", e.line, s.trim())))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<PathBuf> {
        let p: String = self.require(key)?;
        Ok(resolve(base, &p))
    }

    fn paths(&mut self, key: &str, base: &Path) -> Result<Vec<PathBuf>> {
        let list: Vec<String> = self
            .list(key)?
            .ok_or_else(|| Error::config(self.key(key), "missing required key"))?;
        if list.is_empty() {
            return Err(Error::config(self.key(key), "empty path list"));
        }
        Ok(list.iter().map(|p| resolve(base, p)).collect())
    }

    fn finish(self) -> Result<()> {
        match self.section.entries.keys().next() {
            Some(k) => Err(Error::config(format!("{}.{k}", self.name), "unknown key")),
            None => Ok(()),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        val: Vec<PathBuf>,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        val_per_class: usize,
        dims: usize,
        separation: f32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep only the first `n` training examples of each class.
    pub per_class: Option<usize>,
}

impl DataConfig {
    pub fn value_range(&self) -> ValueRange {
        match self.source {
            DataSource::Blobs { .. } => ValueRange::UNIT,
            _ => ValueRange::PIXELS_255,
        }
    }

    pub fn is_cifar(&self) -> bool {
        matches!(self.source, DataSource::Cifar { .. })
    }
}

/// Model layout before the input shape is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Defaults to `1 / (hi - lo)` of the data's value range.
    pub input_scale: Option<f32>,
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize], classes: usize, range: ValueRange) -> ModelSpec {
        ModelSpec {
            arch: self.arch.clone(),
            input_shape: input_shape.to_vec(),
            classes,
            input_scale: self.input_scale.unwrap_or(1.0 / range.width()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(format!("unknown attack kind `{other}` (fgsm, bim, pgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    pub kind: AttackKind,
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate on the first `eval_n` validation examples; all when unset.
    pub eval_n: Option<usize>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    /// Validation examples averaged in the summary.
    pub examples: usize,
    /// Grids written as individual CSV files.
    pub write_grids: usize,
    pub grid_n: usize,
    pub extent: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub code_version: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub attacks: Vec<AttackSpec>,
    pub surface: Option<SurfaceConfig>,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    match s {
        "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
        "cw" | "carlini_wagner" => Ok(LossKind::CarliniWagner),
        other => Err(format!("unknown loss `{other}` (ce, cw)")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;

        let mut run = raw.take("run").unwrap_or_else(|| SectionReader::empty("run"));
        let seed: u64 = run.get_or("seed", 0)?;
        let output_dir = resolve(base, &run.get_or("output_dir", "out".to_string())?);
        let code_version: Option<String> = run.get("code_version")?;
        run.finish()?;

        let mut data = raw
            .take("data")
            .ok_or_else(|| Error::config("data", "missing required section"))?;
        let kind: String = data.require("kind")?;
        let source = match kind.as_str() {
            "mnist" | "idx" => DataSource::Mnist {
                train_images: data.path("train_images", base)?,
                train_labels: data.path("train_labels", base)?,
                val_images: data.path("val_images", base)?,
                val_labels: data.path("val_labels", base)?,
            },
            "cifar" => DataSource::Cifar {
                train: data.paths("train_files", base)?,
                val: data.paths("val_files", base)?,
            },
            "blobs" => DataSource::Blobs {
                classes: data.get_or("classes", 2)?,
                per_class: data.get_or("per_class_generated", 200)?,
                val_per_class: data.get_or("val_per_class", 100)?,
                dims: data.get_or("dims", 8)?,
                separation: data.get_or("separation", 10.0)?,
            },
            other => return Err(Error::config("data.kind", format!("unknown data kind `{other}`"))),
        };
        let data_cfg = DataConfig {
            source,
            per_class: data.get("per_class")?,
        };
        data.finish()?;
        let range = data_cfg.value_range();

        let mut model = raw
            .take("model")
            .ok_or_else(|| Error::config("model", "missing required section"))?;
        let hidden: Vec<usize> = model.list("hidden")?.unwrap_or_default();
        let model_kind: String = model.require("kind")?;
        let arch = match model_kind.as_str() {
            "mlp" => Architecture::Mlp { hidden },
            "convnet" => {
                let channels: Vec<usize> = model
                    .list("conv_channels")?
                    .ok_or_else(|| Error::config("model.conv_channels", "missing required key"))?;
                let n = channels.len();
                let per_layer = |v: Option<Vec<usize>>, default: usize, key: &str| -> Result<Vec<usize>> {
                    match v {
                        None => Ok(vec![default; n]),
                        Some(v) if v.len() == 1 => Ok(vec![v[0]; n]),
                        Some(v) if v.len() == n => Ok(v),
                        Some(v) => Err(Error::config(
                            format!("model.{key}"),
                            format!("expected 1 or {n} values, got {}", v.len()),
                        )),
                    }
                };
                let kernels = per_layer(model.list("conv_kernel")?, 3, "conv_kernel")?;
                let strides = per_layer(model.list("conv_stride")?, 1, "conv_stride")?;
                let paddings = per_layer(model.list("conv_padding")?, 1, "conv_padding")?;
                let pool_after: Vec<usize> = model.list("pool_after")?.unwrap_or_default();
                let pool_size: usize = model.get_or("pool_size", 2)?;
                if let Some(&bad) = pool_after.iter().find(|&&p| p == 0 || p > n) {
                    return Err(Error::config("model.pool_after", format!("layer {bad} out of 1..={n}")));
                }
                let convs = (0..n)
                    .map(|i| ConvLayer {
                        channels: channels[i],
                        kernel: kernels[i],
                        stride: strides[i],
                        padding: paddings[i],
                        pool: pool_after.contains(&(i + 1)).then_some(pool_size),
                    })
                    .collect();
                Architecture::ConvNet { convs, hidden }
            }
            other => return Err(Error::config("model.kind", format!("unknown model kind `{other}`"))),
        };
        let model_cfg = ModelConfig {
            arch,
            input_scale: model.get("input_scale")?,
        };
        model.finish()?;

        let mut train = raw
            .take("train")
            .ok_or_else(|| Error::config("train", "missing required section"))?;
        let defaults = TrainConfig::default();
        let regime: String = train.require("regime")?;
        let regime: Regime = regime.parse().map_err(|e: Error| Error::config("train.regime", e.to_string()))?;
        let epsilon: f32 = train.get_or("epsilon", 0.0)?;
        let train_cfg = TrainConfig {
            regime,
            replay: train.get_or("replay", 1)?,
            pgd_steps: train.get_or("pgd_steps", defaults.pgd_steps)?,
            epsilon,
            step_size: train.get_or("step_size", epsilon / 4.0)?,
            kpgd_random_init: train.get_or("kpgd_random_init", true)?,
            epochs: train.require("epochs")?,
            batch_size: train.get_or("batch_size", defaults.batch_size)?,
            lr: train.get_or("lr", defaults.lr)?,
            lr_decay_at: train.list("lr_decay_at")?.unwrap_or(defaults.lr_decay_at),
            lr_decay_factor: train.get_or("lr_decay_factor", defaults.lr_decay_factor)?,
            momentum: train.get_or("momentum", defaults.momentum)?,
            weight_decay: train.get_or("weight_decay", defaults.weight_decay)?,
            seed,
        };
        train.finish()?;
        train_cfg
            .validate()
            .map_err(|e| Error::config("train", e.to_string()))?;

        let mut eval = raw.take("eval").unwrap_or_else(|| SectionReader::empty("eval"));
        let eval_cfg = EvalConfig {
            eval_n: eval.get("eval_n")?,
            batch_size: eval.get_or("batch_size", 200)?,
        };
        eval.finish()?;
        if eval_cfg.batch_size == 0 || eval_cfg.eval_n == Some(0) {
            return Err(Error::config("eval", "batch_size and eval_n must be >= 1"));
        }

        let mut attacks = Vec::new();
        for (i, mut sec) in raw.take_prefixed("attack.").into_iter().enumerate() {
            let name = sec.name["attack.".len()..].to_string();
            if name.is_empty() {
                return Err(Error::config(sec.name.clone(), "attack section needs a name"));
            }
            let kind: AttackKind = sec.require("kind")?;
            let eps: f32 = sec.get_or("epsilon", epsilon)?;
            let steps: usize = match kind {
                AttackKind::Fgsm => sec.get_or("steps", 1)?,
                _ => sec.require("steps")?,
            };
            let default_step = match kind {
                AttackKind::Fgsm => eps,
                _ => AttackConfig::default_step_size(eps, range, data_cfg.is_cifar()),
            };
            let loss = match sec.raw("loss") {
                None => LossKind::CrossEntropy,
                Some(e) => parse_loss(&e.value).map_err(|m| Error::config(sec.key("loss"), m))?,
            };
            let config = AttackConfig {
                epsilon: eps,
                step_size: sec.get_or("step_size", default_step)?,
                steps,
                random_init: kind == AttackKind::Pgd,
                restarts: sec.get_or("restarts", 1)?,
                loss,
                value_range: range,
                seed: derive_seed(seed, 0xA77AC, i as u64),
            };
            let key = sec.name.clone();
            sec.finish()?;
            if kind == AttackKind::Fgsm && (config.steps != 1 || config.restarts != 1) {
                return Err(Error::config(key, "fgsm takes exactly one step and one restart"));
            }
            config.validate().map_err(|e| Error::config(key, e.to_string()))?;
            attacks.push(AttackSpec { name, kind, config });
        }

        let surface = match raw.take("surface") {
            None => None,
            Some(mut sec) => {
                let cfg = SurfaceConfig {
                    examples: sec.get_or("examples", 32)?,
                    write_grids: sec.get_or("write_grids", 1)?,
                    grid_n: sec.get_or("grid_n", 21)?,
                    extent: sec.get_or("extent", epsilon)?,
                    seed: derive_seed(seed, 0x5EF, 0),
                };
                sec.finish()?;
                if cfg.grid_n % 2 == 0 || !(cfg.extent > 0.0) || cfg.examples == 0 {
                    return Err(Error::config(
                        "surface",
                        "grid_n must be odd, extent > 0 and examples >= 1",
                    ));
                }
                Some(cfg)
            }
        };
        raw.finish()?;

        Ok(Self {
            seed,
            output_dir,
            code_version,
            data: data_cfg,
            model: model_cfg,
            train: train_cfg,
            eval: eval_cfg,
            attacks,
            surface,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "
        [run]
        seed = 3
        output_dir = out/x

        [data]
        kind = blobs
        dims = 4 # inline comment

        [model]
        kind = mlp
        hidden = 16, 8

        [train]
        regime = free
        replay = 2
        epochs = 4
        epsilon = 0.1

        [attack.pgd20]
        kind = pgd
        steps = 20
        restarts = 3
        loss = cw

        [attack.fgsm]
        kind = fgsm
    ";

    #[test]
    fn parses_basic_config() {
        let cfg = ExperimentConfig::parse(BASIC, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out/x"));
        assert_eq!(cfg.model.arch, Architecture::Mlp { hidden: vec![16, 8] });
        assert_eq!(cfg.train.regime, Regime::Free);
        assert_eq!((cfg.train.replay, cfg.train.epochs, cfg.train.seed), (2, 4, 3));
        assert_eq!(cfg.attacks.len(), 2);
        let pgd = &cfg.attacks[0];
        assert_eq!((pgd.name.as_str(), pgd.config.steps, pgd.config.restarts), ("pgd20", 20, 3));
        assert_eq!(pgd.config.loss, LossKind::CarliniWagner);
        assert!((pgd.config.step_size - 0.025).abs() < 1e-7);
        assert!(pgd.config.random_init);
        assert_eq!(cfg.attacks[1].config.step_size, 0.1);
        assert!(cfg.surface.is_none());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASIC.replace("replay = 2", "replay = 2\nrepaly = 3");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "train.repaly"), "{err}");
    }

    #[test]
    fn unknown_section_and_missing_keys() {
        let err = ExperimentConfig::parse(&format!("{BASIC}\n[bogus]\n"), Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "bogus"), "{err}");
        let text = BASIC.replace("kind = blobs", "kind = mnist");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "data.train_images"), "{err}");
    }

    #[test]
    fn bad_values_are_reported() {
        let text = BASIC.replace("epochs = 4", "epochs = four");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "train.epochs"), "{err}");
        let text = BASIC.replace("replay = 2", "replay = 8");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
        assert!(RawConfig::parse("key = 1").is_err());
        assert!(RawConfig::parse("[a]\nk = 1\nk = 2").is_err());
        assert!(RawConfig::parse("[a\n").is_err());
    }

    #[test]
    fn convnet_layers() {
        let text = BASIC.replace(
            "kind = mlp\n        hidden = 16, 8",
            "kind = convnet\nconv_channels = 16, 32\nconv_stride = 1, 2\npool_after = 1",
        );
        let text = text.replace("kind = blobs", "kind = blobs");
        let cfg = ExperimentConfig::parse(&text, Path::new(".")).unwrap();
        let Architecture::ConvNet { convs, hidden } = cfg.model.arch else {
            panic!("expected convnet");
        };
        assert!(hidden.is_empty());
        assert_eq!(convs[0].pool, Some(2));
        assert_eq!((convs[1].stride, convs[1].pool, convs[1].kernel), (2, None, 3));
    }
}
