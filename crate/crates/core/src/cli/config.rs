//! Flat `key = value` run configuration with namespaced keys.
//!
//! Every key has a default; files and `--set key=value` overrides may only
//! name known keys. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baseline_classifier::ClassifierConfig;
use crate::curation::GeneratorConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::retrieval::CandidateConfig;
use crate::trainer::{AdamWConfig, RefreshPeriod, Stage2Flags, TrainConfig, Variant};

/// Environment variable naming the root that relative `out_dir` values
/// resolve against.
pub const OUT_ROOT_ENV: &str = "RETRORANK_OUT";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_dir", "retrorank-out"),
    ("data.n_templates", "200"),
    ("data.n_reactions", "2000"),
    ("data.zipf_exponent", "1.0"),
    ("data.multi_positive_fraction", "0.1"),
    ("data.multi_input_fraction", "0.0"),
    ("data.leak_fraction", "0.02"),
    ("data.val_fraction", "0.1"),
    ("data.test_fraction", "0.1"),
    ("data.max_outcomes", "4"),
    ("encoder.hidden_dim", "32"),
    ("encoder.layers", "2"),
    ("encoder.heads", "4"),
    ("encoder.ff_dim", "64"),
    ("encoder.max_len", "64"),
    ("encoder.dropout", "0.1"),
    ("adam.beta1", "0.9"),
    ("adam.beta2", "0.999"),
    ("adam.eps", "1e-8"),
    ("adam.weight_decay", "0.01"),
    ("train.temperature", "0.07"),
    ("train.clip_norm", "1.0"),
    ("stage1.epochs", "10"),
    ("stage1.batch_size", "32"),
    ("stage1.lr_product", "0.001"),
    ("stage1.lr_template", "0.0001"),
    ("stage1.warmup_steps", "20"),
    ("stage2.epochs", "10"),
    ("stage2.batch_size", "32"),
    ("stage2.micro_batch", "8"),
    ("stage2.accum_steps", "1"),
    ("stage2.lr_product", "0.001"),
    ("stage2.lr_template", "0.0001"),
    ("stage2.one_opt_lr", "0.002"),
    ("stage2.warmup_steps", "20"),
    ("stage2.label_smoothing", "0.02"),
    ("stage2.entropy_weight", "0.001"),
    ("stage2.kld_weight", "0.1"),
    ("stage2.candidates", "32"),
    ("stage2.in_batch_cap", "8"),
    ("stage2.hard_pool", "64"),
    ("stage2.alpha", "0.999"),
    ("stage2.ema_depth", "3"),
    ("stage2.n_frozen", "10"),
    ("stage2.n_unfrozen", "2"),
    ("stage2.refresh", "1"),
    ("eval.preset", "e3"),
    ("eval.split", "test"),
    ("eval.k_list", "1,3,5,10,20"),
    ("classifier.epochs", "30"),
    ("classifier.lr", "0.01"),
    ("drift.probes", "16"),
    ("drift.perturbations", "4"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("config key `{key}` has invalid value `{raw}`")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// `out_dir`, resolved against the output-root environment variable
    /// when relative.
    pub fn out_dir(&self) -> PathBuf {
        let dir = PathBuf::from(self.raw("out_dir"));
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            n_templates: self.get("data.n_templates")?,
            n_reactions: self.get("data.n_reactions")?,
            zipf_exponent: self.get("data.zipf_exponent")?,
            multi_positive_fraction: self.get("data.multi_positive_fraction")?,
            multi_input_fraction: self.get("data.multi_input_fraction")?,
            leak_fraction: self.get("data.leak_fraction")?,
            val_fraction: self.get("data.val_fraction")?,
            test_fraction: self.get("data.test_fraction")?,
            max_outcomes: self.get("data.max_outcomes")?,
            seed: self.seed()?,
        })
    }

    pub fn encoder(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            vocab_size,
            hidden_dim: self.get("encoder.hidden_dim")?,
            layers: self.get("encoder.layers")?,
            heads: self.get("encoder.heads")?,
            ff_dim: self.get("encoder.ff_dim")?,
            max_len: self.get("encoder.max_len")?,
            dropout: self.get("encoder.dropout")?,
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    fn adam(&self) -> Result<AdamWConfig> {
        Ok(AdamWConfig {
            beta1: self.get("adam.beta1")?,
            beta2: self.get("adam.beta2")?,
            eps: self.get("adam.eps")?,
            weight_decay: self.get("adam.weight_decay")?,
        })
    }

    pub fn stage1(&self) -> Result<TrainConfig> {
        let batch: usize = self.get("stage1.batch_size")?;
        let c = TrainConfig {
            batch_size: batch,
            micro_batch: batch,
            accum_steps: 1,
            lr_product: self.get("stage1.lr_product")?,
            lr_template: self.get("stage1.lr_template")?,
            warmup_steps: self.get("stage1.warmup_steps")?,
            epochs: self.get("stage1.epochs")?,
            temperature: self.get("train.temperature")?,
            clip_norm: self.get("train.clip_norm")?,
            seed: self.seed()?,
            adam: self.adam()?,
            ..TrainConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn stage2(&self, variant: Variant) -> Result<TrainConfig> {
        let mut c = TrainConfig {
            batch_size: self.get("stage2.batch_size")?,
            micro_batch: self.get("stage2.micro_batch")?,
            accum_steps: self.get("stage2.accum_steps")?,
            lr_product: self.get("stage2.lr_product")?,
            lr_template: self.get("stage2.lr_template")?,
            warmup_steps: self.get("stage2.warmup_steps")?,
            epochs: self.get("stage2.epochs")?,
            temperature: self.get("train.temperature")?,
            label_smoothing: self.get("stage2.label_smoothing")?,
            entropy_weight: self.get("stage2.entropy_weight")?,
            kld_weight: self.get("stage2.kld_weight")?,
            clip_norm: self.get("train.clip_norm")?,
            seed: self.seed()?,
            adam: self.adam()?,
            candidates: CandidateConfig {
                size: self.get("stage2.candidates")?,
                in_batch_cap: self.get("stage2.in_batch_cap")?,
                hard_pool: self.get("stage2.hard_pool")?,
            },
        };
        if variant == Variant::OneOpt {
            let lr = self.get("stage2.one_opt_lr")?;
            c.lr_product = lr;
            c.lr_template = lr;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn refresh(&self) -> Result<RefreshPeriod> {
        match self.raw("stage2.refresh") {
            "never" => Ok(RefreshPeriod::Never),
            _ => Ok(RefreshPeriod::Every(self.get("stage2.refresh")?)),
        }
    }

    /// Flags for `variant`; `ema_depth` overrides `stage2.ema_depth`.
    pub fn flags(&self, variant: Variant, ema_depth: Option<usize>) -> Result<Stage2Flags> {
        let depth = match ema_depth {
            Some(k) => k,
            None => self.get("stage2.ema_depth")?,
        };
        let alpha: f64 = self.get("stage2.alpha")?;
        let flags = match variant {
            Variant::Frozen => Stage2Flags::frozen(),
            Variant::Ema => Stage2Flags {
                alpha,
                ..Stage2Flags::ema(depth)
            },
            Variant::SnapshotKld => Stage2Flags {
                trainable_top_layers: Some(depth),
                ..Stage2Flags::snapshot_kld()
            },
            Variant::Alt => Stage2Flags {
                alpha,
                trainable_top_layers: Some(depth),
                ..Stage2Flags::alternating(self.get("stage2.n_frozen")?, self.get("stage2.n_unfrozen")?)
            },
            Variant::OneOpt => Stage2Flags::one_opt(self.refresh()?),
        };
        flags.validate()?;
        Ok(flags)
    }

    pub fn eval(&self, preset: Option<&str>) -> Result<EvalConfig> {
        let mut c = EvalConfig::preset(preset.unwrap_or(self.raw("eval.preset")))?;
        c.k_list = self
            .raw("eval.k_list")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("eval.k_list entry `{s}` is not an integer")))
            })
            .collect::<Result<_>>()?;
        c.max_outcomes_per_template = self.get("data.max_outcomes")?;
        c.validate()?;
        Ok(c)
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            epochs: self.get("classifier.epochs")?,
            lr: self.get("classifier.lr")?,
            seed: self.seed()?,
            ..ClassifierConfig::default()
        })
    }
}
