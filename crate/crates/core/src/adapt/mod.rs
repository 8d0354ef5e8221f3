//! Pseudo-label selection and the adaptation loops: DocTTA, DocUDA and the
//! TENT baseline, plus the supervised and MVLM training loops they start from.

mod select;
mod step;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use select::{select_pseudo_labels, select_span_pseudo_labels};
pub use step::{run_doctta, run_docuda, run_tent, Hooks, StepEvent};
pub use train::{pretrain_mvlm, train_supervised, PretrainConfig, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Token classification (entity labeling or key-value extraction).
    #[default]
    Entity,
    /// Extractive question answering over start/end positions.
    Qa,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Doctta,
    Docuda,
    Tent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Accept when entropy ≤ γ.
    #[default]
    Entropy,
    /// Accept when the top probability ≥ the confidence threshold.
    Confidence,
    /// Both conditions.
    Both,
    /// Accept everything.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub mvlm: bool,
    pub ce: bool,
    pub div: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            mvlm: true,
            ce: true,
            div: true,
        }
    }
}

/// Where DocUDA starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocudaInit {
    /// The MVLM-pretrained base model.
    #[default]
    Base,
    /// The source-trained model.
    Source,
}

/// Parameters TENT may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TentScope {
    /// Layer-norm scales and shifts only.
    #[default]
    Norm,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub method: Method,
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Entropy threshold γ in nats, or in units of the maximum entropy when
    /// `normalize_entropy` is set.
    pub gamma: f64,
    pub confidence: f64,
    pub selection: Selection,
    pub losses: LossToggles,
    pub normalize_entropy: bool,
    pub mask_rate: f64,
    pub mask_token_frac: f64,
    pub docuda_init: DocudaInit,
    pub tent_scope: TentScope,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Doctta,
            task: Task::Entity,
            epochs: 1,
            lr: 5e-5,
            weight_decay: 0.0,
            batch_size: 8,
            gamma: 1.5,
            confidence: 0.95,
            selection: Selection::Entropy,
            losses: LossToggles::default(),
            normalize_entropy: false,
            mask_rate: crate::objectives::MASK_RATE,
            mask_token_frac: crate::objectives::MASK_TOKEN_FRAC,
            docuda_init: DocudaInit::Base,
            tent_scope: TentScope::Norm,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return bad(format!("gamma {} < 0", self.gamma));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return bad(format!("confidence {} not in (0, 1]", self.confidence));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if [self.lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return bad(format!(
                "lr {} / weight_decay {} must be ≥ 0",
                self.lr, self.weight_decay
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> crate::numerics::AdamWConfig {
        crate::numerics::AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Means over one epoch of adaptation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub mvlm: f64,
    pub ce: f64,
    pub div: f64,
    pub source_ce: f64,
    pub tent: f64,
    /// Accepted units / all units over the epoch.
    pub acceptance_rate: f64,
    /// Mean prediction entropy (nats) over the epoch's units.
    pub mean_entropy: f64,
    /// Monitoring metrics computed after the epoch, when requested.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub epochs: Vec<EpochLog>,
}

/// Evaluation callback run on a frozen copy of the parameters after each epoch.
pub type Monitor<'a> = dyn Fn(&crate::numerics::ParamSet<f32>) -> crate::Result<BTreeMap<String, f64>> + 'a;

/// Mixes a run seed with loop counters into an independent stream seed.
pub(crate) fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests;
