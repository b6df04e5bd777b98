use serde::{Deserialize, Serialize};

use super::losses::{KDHyper, Objective};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum DistillMode {
    /// `α·l_soft + (1−α)·l_hard`, grid-searched over (T, α).
    StandardKd,
    /// Intermediate-layer epochs, then prediction-layer epochs.
    TinybertTwoStage,
    /// One pass over all five losses.
    SimplifiedOneStep,
    /// Two steps with the hard loss added to the prediction step.
    AblationHardOnly,
    /// One pass over the four distillation losses, no hard loss.
    AblationOneStepOnly,
}

impl DistillMode {
    pub const ALL: [DistillMode; 5] = [
        DistillMode::StandardKd,
        DistillMode::TinybertTwoStage,
        DistillMode::SimplifiedOneStep,
        DistillMode::AblationHardOnly,
        DistillMode::AblationOneStepOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::StandardKd => "standard_kd",
            DistillMode::TinybertTwoStage => "tinybert_two_stage",
            DistillMode::SimplifiedOneStep => "simplified_one_step",
            DistillMode::AblationHardOnly => "ablation_hard_only",
            DistillMode::AblationOneStepOnly => "ablation_one_step_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl StageSettings {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!(
                "{stage} stage needs positive epochs, batch size and learning rate, got {self:?}"
            )));
        }
        Ok(())
    }

    fn scaled(self, factor: usize, learning_rate: f64) -> Self {
        Self {
            epochs: self.epochs,
            batch_size: (self.batch_size / factor).max(1),
            learning_rate,
        }
    }
}

/// One optimizer phase of a schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub name: &'static str,
    pub objective: Objective,
    pub settings: StageSettings,
    pub hyper: KDHyper,
}

/// Teacher fine-tuning on hard labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub settings: StageSettings,
    pub weight_decay: f64,
    pub seed: u64,
    pub select_best_epoch: bool,
}

/// Batch sizes at full scale are divided by this for desk runs.
pub const DESK_BATCH_DIVISOR: usize = 8;
/// Desk-scale learning rate for every stage. Desk models start from random
/// weights rather than a pre-trained checkpoint, so the full-scale rates
/// (1e-6 / 5e-5) barely move them.
pub const DESK_LEARNING_RATE: f64 = 5e-4;

impl FinetunePlan {
    /// 2 epochs, batch 128, learning rate 1e-6, weight decay 0.01.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            settings: StageSettings {
                epochs: 2,
                batch_size: 128,
                learning_rate: 1e-6,
            },
            weight_decay: 0.01,
            seed,
            select_best_epoch: true,
        }
    }

    pub fn desk(seed: u64) -> Self {
        let full = Self::full_scale(seed);
        Self {
            settings: full.settings.scaled(DESK_BATCH_DIVISOR, DESK_LEARNING_RATE),
            ..full
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub mode: DistillMode,
    /// Intermediate-layer step; also used by the one-step modes, which
    /// involve intermediate layers.
    pub intermediate: StageSettings,
    /// Prediction-layer step and Standard KD.
    pub prediction: StageSettings,
    pub hyper: KDHyper,
    /// Candidates searched by Standard KD, in tie-break order.
    pub kd_grid: Vec<KDHyper>,
    pub weight_decay: f64,
    /// Copy the teacher's first k layers into the student.
    pub init_from_first_k: Option<usize>,
    pub seed: u64,
    /// Keep the final-stage epoch with the best validation MRR@10.
    pub select_best_epoch: bool,
}

impl DistillPlan {
    /// Intermediate: 2 epochs, batch 64, lr 5e-5. Prediction: 2 epochs,
    /// batch 128, lr 1e-6. T = 1.
    pub fn full_scale(mode: DistillMode, seed: u64) -> Self {
        Self {
            mode,
            intermediate: StageSettings {
                epochs: 2,
                batch_size: 64,
                learning_rate: 5e-5,
            },
            prediction: StageSettings {
                epochs: 2,
                batch_size: 128,
                learning_rate: 1e-6,
            },
            hyper: KDHyper::default(),
            kd_grid: KDHyper::standard_grid(),
            weight_decay: 0.01,
            init_from_first_k: None,
            seed,
            select_best_epoch: true,
        }
    }

    pub fn desk(mode: DistillMode, seed: u64) -> Self {
        let full = Self::full_scale(mode, seed);
        Self {
            intermediate: full.intermediate.scaled(DESK_BATCH_DIVISOR, DESK_LEARNING_RATE),
            prediction: full.prediction.scaled(DESK_BATCH_DIVISOR, DESK_LEARNING_RATE),
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intermediate.validate("intermediate")?;
        self.prediction.validate("prediction")?;
        self.hyper.validate()?;
        if self.mode == DistillMode::StandardKd && self.kd_grid.is_empty() {
            return Err(Error::Contract("standard_kd needs a non-empty (T, α) grid".into()));
        }
        for h in &self.kd_grid {
            h.validate()?;
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Contract("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Stages of the mode's schedule. Standard KD yields one stage per grid
    /// candidate; each starts from the same student initialization.
    pub fn schedule(&self) -> Vec<Vec<StagePlan>> {
        let stage = |name, objective, settings, hyper| StagePlan {
            name,
            objective,
            settings,
            hyper,
        };
        match self.mode {
            DistillMode::StandardKd => self
                .kd_grid
                .iter()
                .map(|h| vec![stage("prediction", Objective::StandardKd, self.prediction, *h)])
                .collect(),
            DistillMode::TinybertTwoStage => vec![vec![
                stage("intermediate", Objective::Intermediate, self.intermediate, self.hyper),
                stage("prediction", Objective::Prediction, self.prediction, self.hyper),
            ]],
            DistillMode::AblationHardOnly => vec![vec![
                stage("intermediate", Objective::Intermediate, self.intermediate, self.hyper),
                stage("prediction", Objective::PredictionWithHard, self.prediction, self.hyper),
            ]],
            DistillMode::SimplifiedOneStep => vec![vec![stage(
                "one_step",
                Objective::CombinedWithHard,
                self.intermediate,
                self.hyper,
            )]],
            DistillMode::AblationOneStepOnly => {
                vec![vec![stage("one_step", Objective::Combined, self.intermediate, self.hyper)]]
            }
        }
    }
}
