//! Training strategies, the optimizer and the training loop.

mod loss;
mod optim;
mod strategy;
mod train_loop;

pub use loss::{cross_entropy_loss, label_smoothing_loss, scheduled_sampling_prob};
pub use optim::Adam;
pub use strategy::{
    batch_loss, caption_batch_loss, content_of, parallel_map, reference_corpus, scheduled_sampling_inputs,
    scheduled_sampling_loss, scst_loss, self_critical_term, RewardFn, StepLoss,
};
pub use train_loop::{train_loop, train_loop_with, TrainOutcome};

use crate::config::SectionView;
use crate::error::{Error, Result};

pub const STRATEGIES: [&str; 4] = ["ce", "label_smoothing", "scheduled_sampling", "scst"];

/// Sentence-level reward used by self-critical training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reward {
    CiderD,
    Bleu4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainingStrategy {
    CrossEntropy,
    LabelSmoothing { epsilon: f64 },
    ScheduledSampling { k: f64, p_min: f64 },
    Scst { reward: Reward },
}

impl TrainingStrategy {
    pub fn from_section(name: &str, s: &SectionView) -> Result<Self> {
        Ok(match name {
            "ce" => Self::CrossEntropy,
            "label_smoothing" => {
                let epsilon = s.real("epsilon", 0.1)?;
                if !(0.0..1.0).contains(&epsilon) {
                    return Err(Error::config(s.name(), "epsilon", format!("{epsilon} is not in [0, 1)")));
                }
                Self::LabelSmoothing { epsilon }
            }
            "scheduled_sampling" => {
                let k = s.real("ss_k", 0.05)?;
                let p_min = s.real("ss_pmin", 0.25)?;
                if k < 0.0 {
                    return Err(Error::config(s.name(), "ss_k", "must be nonnegative"));
                }
                if !(0.0..=1.0).contains(&p_min) {
                    return Err(Error::config(s.name(), "ss_pmin", "must be in [0, 1]"));
                }
                Self::ScheduledSampling { k, p_min }
            }
            "scst" => {
                let reward = match s.string("reward", "cider")?.as_str() {
                    "cider" | "cider_d" => Reward::CiderD,
                    "bleu" | "bleu4" => Reward::Bleu4,
                    other => {
                        return Err(Error::config(s.name(), "reward", format!("unknown reward `{other}`; use cider or bleu4")))
                    }
                };
                Self::Scst { reward }
            }
            other => {
                return Err(Error::UnknownModule {
                    stage: "training".into(),
                    name: other.into(),
                    available: STRATEGIES.join(", "),
                })
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CrossEntropy => "ce",
            Self::LabelSmoothing { .. } => "label_smoothing",
            Self::ScheduledSampling { .. } => "scheduled_sampling",
            Self::Scst { .. } => "scst",
        }
    }
}

/// Loop settings from the `[training]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub save_every: usize,
    pub workers: usize,
}

impl TrainOptions {
    pub fn from_section(s: &SectionView) -> Result<Self> {
        let lr = s.real("lr", 1e-3)?;
        if lr < 0.0 {
            return Err(Error::config(s.name(), "lr", "must be nonnegative"));
        }
        let clip = s.real("clip", 0.0)?;
        if clip < 0.0 {
            return Err(Error::config(s.name(), "clip", "must be nonnegative (0 disables clipping)"));
        }
        Ok(Self {
            lr,
            steps: s.usize("steps", 100)?,
            batch_size: s.positive("batch_size", 8)?,
            clip: (clip > 0.0).then_some(clip),
            save_every: s.usize("save_every", 0)?,
            workers: 1,
        })
    }
}

/// One optimizer step's summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub teacher_forcing_prob: f64,
    pub reward_mean: Option<f64>,
}

impl TrainRecord {
    /// `step<TAB>loss<TAB>lr<TAB>p_tf[<TAB>reward]`.
    /// `step, loss, lr, p_tf, reward` separated by tabs; `-` when there is
    /// no reward.
    pub fn to_line(&self) -> String {
        let reward = self.reward_mean.map_or_else(|| "-".to_string(), |r| r.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{reward}",
            self.step, self.loss, self.learning_rate, self.teacher_forcing_prob
        )
    }
}
