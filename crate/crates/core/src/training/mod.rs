//! Adversarial training of the autoencoder against a confounder predictor.
//!
//! The encoder/decoder minimize `E = L_cae − λ·L_adv` while the adversary
//! minimizes `L_adv`; updates alternate between the two players, each with
//! its own Adam state.

mod run;
mod steps;

pub use run::{
    adversary_probe, branch, pretrain, train, train_from, ProbeSettings, TrainState,
};
pub use steps::{
    adversarial_gradients, adversary_update, adversary_update_on_codes, continuous_adversary_loss,
    main_update, standardize, AdvTarget, BatchTarget, StepLosses,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};

/// `L_cae − λ·L_adv`.
pub fn joint_objective(l_cae: f64, l_adv: f64, lambda: f64) -> f64 {
    l_cae - lambda * l_adv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub lr_main: f64,
    pub lr_adv: f64,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub batch_size: usize,
    pub adv_steps_per_main: usize,
    pub adv_pretrain_steps: usize,
    /// Leading epochs trained on reconstruction alone.
    pub cae_pretrain_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Record wall-clock seconds per epoch; when off the column is zero so
    /// reruns produce identical files.
    pub report_timing: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            lr_main: 1e-3,
            lr_adv: 1e-3,
            epochs: 20,
            batch_size: 64,
            adv_steps_per_main: 5,
            adv_pretrain_steps: 500,
            cae_pretrain_epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            report_timing: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if !(self.lr_main > 0.0 && self.lr_adv > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.adv_steps_per_main == 0 {
            return bad("epochs, batch_size and adv_steps_per_main must be positive");
        }
        if self.cae_pretrain_epochs > self.epochs {
            return bad("cae_pretrain_epochs cannot exceed epochs");
        }
        Ok(())
    }
}

/// Means over one epoch of main steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cae: f64,
    pub l_adv: f64,
    pub e_lambda: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,l_cae,l_adv,e_lambda,seconds";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Recomputes every `e_lambda` for a different λ.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| EpochRecord { e_lambda: joint_objective(r.l_cae, r.l_adv, lambda), ..*r })
            .collect();
        Self { records }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.l_cae, r.l_adv, r.e_lambda, r.seconds);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Malformed("history CSV header".into()));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Malformed(format!("history row {l:?}")))
                };
                Ok(EpochRecord {
                    epoch: num(0)? as usize,
                    l_cae: num(1)?,
                    l_adv: num(2)?,
                    e_lambda: num(3)?,
                    seconds: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}
