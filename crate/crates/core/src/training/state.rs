use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Backbone,
    Head,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Head => "head",
        }
    }
}

/// Progress of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches (optimizer steps are skipped on empty batches but
    /// still counted here).
    pub step: usize,
    pub rng_seed: u64,
    /// One entry per batch.
    pub loss_history: Vec<f64>,
    /// Mean loss per completed epoch.
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    /// Training accuracy per completed epoch (head stage only).
    #[serde(default)]
    pub epoch_accuracy: Vec<f64>,
}

impl TrainState {
    pub fn new(stage: Stage, rng_seed: u64) -> Self {
        TrainState {
            stage,
            epoch: 0,
            step: 0,
            rng_seed,
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
            epoch_accuracy: Vec::new(),
        }
    }
}
