//! Single-file JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::format::to_json;
use crate::inner::InnerRule;
use crate::model::{Mlp, ParamVector};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA_NAME: &str = "metacurv-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub iteration: u64,
    pub val_loss: f64,
}

/// Running sum of per-task query losses since the last metrics row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWindow {
    pub sum: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub schema_version: u32,
    pub iteration: u64,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub theta: ParamVector,
    /// One shared rule, or one per inner step.
    pub rules: Vec<InnerRule>,
    pub theta_adam: AdamState,
    /// Per rule, one ADAM state per learnable group.
    pub rule_adam: Vec<Vec<AdamState>>,
    pub best: Option<BestRecord>,
    pub window: LossWindow,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Mlp> {
        Mlp::from_vector(&self.sizes, &self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_NAME {
            return Err(Error::Schema(format!("unexpected schema {:?}", self.schema)));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let net = self.network().map_err(|e| Error::Schema(e.to_string()))?;
        if self.rules.is_empty() || self.rules.len() != self.rule_adam.len() {
            return Err(Error::Schema("rule and optimizer-state counts disagree".into()));
        }
        for (rule, states) in self.rules.iter().zip(&self.rule_adam) {
            rule.check_layout(&net).map_err(|e| Error::Schema(e.to_string()))?;
            let groups = rule.learnable_groups();
            if groups.len() != states.len() || groups.iter().zip(states).any(|((_, g), s)| g.len() != s.len()) {
                return Err(Error::Schema("optimizer state does not match rule parameters".into()));
            }
        }
        if self.theta_adam.len() != self.theta.len() {
            return Err(Error::Schema("optimizer state does not match parameters".into()));
        }
        Ok(())
    }

    fn ensure_finite(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let rules_ok = self.rules.iter().all(|r| {
            let alpha_ok = match r {
                InnerRule::FixedLr { alpha } | InnerRule::MetaCurv { alpha, .. } => alpha.is_finite(),
                _ => true,
            };
            alpha_ok && r.learnable_groups().iter().all(|(_, g)| finite(g))
        });
        let adam_ok = std::iter::once(&self.theta_adam)
            .chain(self.rule_adam.iter().flatten())
            .all(|s| finite(&s.m) && finite(&s.v));
        let ok = finite(&self.theta.0)
            && rules_ok
            && adam_ok
            && self.best.is_none_or(|b| b.val_loss.is_finite())
            && self.window.sum.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::NumericFailure("checkpoint contains non-finite values".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.ensure_finite()?;
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid checkpoint: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_json()?;
        // Written next to the target and renamed into place.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
