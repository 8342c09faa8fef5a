//! Stage 2 variant flags, named presets and the per-epoch freeze schedule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::BankSource;

/// How often the one-optimizer variant re-encodes the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPeriod {
    Never,
    Every(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Flags {
    pub ema: bool,
    pub snapshot: bool,
    pub kld: bool,
    pub alternating: bool,
    pub frozen_template: bool,
    pub n_frozen: usize,
    pub n_unfrozen: usize,
    pub alpha: f64,
    /// Top template layers trainable (plus the final norm). `None` trains
    /// the whole template tower.
    pub trainable_top_layers: Option<usize>,
    /// Single shared optimizer and schedule for both towers.
    pub one_optimizer: bool,
    pub refresh: RefreshPeriod,
}

impl Default for Stage2Flags {
    fn default() -> Self {
        Self::frozen()
    }
}

impl Stage2Flags {
    fn base() -> Self {
        Self {
            ema: false,
            snapshot: false,
            kld: false,
            alternating: false,
            frozen_template: false,
            n_frozen: 0,
            n_unfrozen: 0,
            alpha: 0.999,
            trainable_top_layers: Some(3),
            one_optimizer: false,
            refresh: RefreshPeriod::Every(1),
        }
    }

    pub fn frozen() -> Self {
        Self {
            frozen_template: true,
            trainable_top_layers: Some(0),
            ..Self::base()
        }
    }

    /// EMA with `k` trainable top layers (1 shallow, 3 mid, 6 deep).
    pub fn ema(k: usize) -> Self {
        Self {
            ema: true,
            trainable_top_layers: Some(k),
            ..Self::base()
        }
    }

    pub fn snapshot_kld() -> Self {
        Self {
            snapshot: true,
            kld: true,
            ..Self::base()
        }
    }

    /// EMA with alternating `n_frozen : n_unfrozen` epochs.
    pub fn alternating(n_frozen: usize, n_unfrozen: usize) -> Self {
        Self {
            ema: true,
            alternating: true,
            n_frozen,
            n_unfrozen,
            ..Self::base()
        }
    }

    pub fn one_opt(refresh: RefreshPeriod) -> Self {
        Self {
            one_optimizer: true,
            trainable_top_layers: None,
            refresh,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidFlags(m.to_string()));
        if self.kld && !self.snapshot {
            return bad("KLD regularization requires the snapshot teacher");
        }
        if self.ema && self.snapshot {
            return bad("EMA and snapshot teachers are mutually exclusive");
        }
        if self.frozen_template && self.alternating {
            return bad("frozen template tower cannot alternate");
        }
        if self.frozen_template && (self.ema || self.snapshot || self.one_optimizer) {
            return bad("frozen template tower has no teacher or shared optimizer");
        }
        if self.alternating && (self.n_frozen == 0 || self.n_unfrozen == 0) {
            return bad("alternating schedule needs positive N_f and N_u");
        }
        if self.ema && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if self.one_optimizer && (self.ema || self.snapshot || self.alternating) {
            return bad("one-optimizer variant runs without teachers or alternation");
        }
        if self.refresh == RefreshPeriod::Every(0) {
            return bad("refresh period must be positive");
        }
        Ok(())
    }

    pub fn bank_source(&self) -> BankSource {
        if self.ema {
            BankSource::Ema
        } else if self.snapshot {
            BankSource::Snapshot
        } else if self.frozen_template {
            BankSource::Stage1Frozen
        } else {
            BankSource::Live
        }
    }

    pub fn freeze_state(&self, epoch: usize) -> FreezeState {
        if self.alternating {
            if epoch % (self.n_frozen + self.n_unfrozen) < self.n_frozen {
                FreezeState::TemplateFrozen
            } else {
                FreezeState::ProductFrozen
            }
        } else if self.frozen_template {
            FreezeState::TemplateFrozen
        } else {
            FreezeState::BothTrainable
        }
    }

    /// Whether the bank is re-encoded at the start of `epoch`.
    pub fn refreshes_at(&self, epoch: usize) -> bool {
        match self.refresh {
            RefreshPeriod::Never => epoch == 0,
            RefreshPeriod::Every(p) => epoch % p == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeState {
    BothTrainable,
    TemplateFrozen,
    ProductFrozen,
}

impl FreezeState {
    pub fn product_trainable(self) -> bool {
        self != FreezeState::ProductFrozen
    }

    pub fn template_trainable(self) -> bool {
        self != FreezeState::TemplateFrozen
    }

    /// `F` while the template tower is frozen, `U` while it updates.
    pub fn letter(self) -> char {
        if self.template_trainable() {
            'U'
        } else {
            'F'
        }
    }
}

impl fmt::Display for FreezeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeState::BothTrainable => "both_trainable",
            FreezeState::TemplateFrozen => "template_frozen",
            FreezeState::ProductFrozen => "product_frozen",
        })
    }
}

/// Named variant presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Frozen,
    Ema,
    SnapshotKld,
    Alt,
    OneOpt,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => Variant::Frozen,
            "ema" => Variant::Ema,
            "snapshot-kld" => Variant::SnapshotKld,
            "alt" => Variant::Alt,
            "one-opt" => Variant::OneOpt,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected frozen|ema|snapshot-kld|alt|one-opt)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Ema => "ema",
            Variant::SnapshotKld => "snapshot-kld",
            Variant::Alt => "alt",
            Variant::OneOpt => "one-opt",
        }
    }
}
