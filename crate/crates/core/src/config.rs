//! Training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curvature::Variant;
use crate::error::{invalid, Error, Result};
use crate::inner::{InnerRule, MetaGradMode};
use crate::model::{Mlp, DEFAULT_SIZES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MAML")]
    Maml,
    #[serde(rename = "MetaSGD")]
    MetaSgd,
    #[serde(rename = "LayerLR")]
    LayerLr,
    MC1,
    MC2,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Maml, Method::MetaSgd, Method::LayerLr, Method::MC1, Method::MC2];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Maml => "MAML",
            Method::MetaSgd => "MetaSGD",
            Method::LayerLr => "LayerLR",
            Method::MC1 => "MC1",
            Method::MC2 => "MC2",
        }
    }

    /// Initial inner rule. Every method starts out identical to plain
    /// gradient descent with `alpha`.
    pub fn initial_rule(&self, net: &Mlp, alpha: f64) -> InnerRule {
        match self {
            Method::Maml => InnerRule::fixed(alpha),
            Method::MetaSgd => InnerRule::per_coordinate(net, alpha),
            Method::LayerLr => InnerRule::per_layer(net, alpha),
            Method::MC1 => InnerRule::meta_curvature(net, alpha, Variant::MC1),
            Method::MC2 => InnerRule::meta_curvature(net, alpha, Variant::MC2),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub k_shot: usize,
    /// Points in each task's validation (query) set during meta-training.
    pub query_points: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub iterations: u64,
    pub inner_steps: usize,
    pub meta_grad_mode: MetaGradMode,
    pub eval_every: u64,
    /// Held-out validation tasks used for model selection.
    pub eval_tasks: usize,
    /// Evaluation points per held-out task.
    pub eval_points: usize,
    pub seed: u64,
    /// Separate curvature blocks (or rates) for every inner step.
    pub per_step_rules: bool,
    pub deterministic: bool,
    pub sizes: Vec<usize>,
}

impl TrainConfig {
    /// Defaults follow the standard sinusoid benchmark schedule.
    pub fn new(method: Method, k_shot: usize) -> Self {
        TrainConfig {
            method,
            k_shot,
            query_points: k_shot,
            inner_lr: 0.01,
            outer_lr: 0.001,
            meta_batch: 25,
            iterations: 70_000,
            inner_steps: 1,
            meta_grad_mode: MetaGradMode::Exact,
            eval_every: 1000,
            eval_tasks: 200,
            eval_points: 100,
            seed: 0,
            per_step_rules: false,
            deterministic: false,
            sizes: DEFAULT_SIZES.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k_shot", self.k_shot as u64),
            ("query_points", self.query_points as u64),
            ("meta_batch", self.meta_batch as u64),
            ("iterations", self.iterations),
            ("inner_steps", self.inner_steps as u64),
            ("eval_every", self.eval_every),
            ("eval_tasks", self.eval_tasks as u64),
            ("eval_points", self.eval_points as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.eval_tasks < 2 {
            return invalid("eval_tasks must be at least 2");
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !v.is_finite() {
                return invalid(format!("{name} must be finite"));
            }
        }
        if self.meta_grad_mode == MetaGradMode::Exact && self.inner_steps != 1 {
            return Err(Error::UnsupportedMode(format!(
                "exact meta-gradients need inner_steps = 1, got {}",
                self.inner_steps
            )));
        }
        if self.sizes.len() < 2 || self.sizes[0] != 1 || *self.sizes.last().unwrap() != 1 {
            return invalid(format!("sizes must run from 1 to 1, got {:?}", self.sizes));
        }
        if self.sizes.contains(&0) {
            return invalid("layer widths must be positive");
        }
        Ok(())
    }

    pub fn rule_count(&self) -> usize {
        if self.per_step_rules {
            self.inner_steps
        } else {
            1
        }
    }
}
