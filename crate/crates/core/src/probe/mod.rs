//! Supervised probing of expert bottlenecks: label transforms, Fisher-score
//! filtering, cross-validated regression per expert, the periodic-vs-linear
//! R² gap, and point-cloud exports.

mod export;
mod fisher;
mod labels;
mod rank;
mod regress;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use export::{export_scatter, random_sample_export, RandomSampleOptions, RandomSampleSummary};
pub use fisher::fisher_score;
pub use labels::{bucket_labels, class_indices, transform_labels};
pub use rank::{
    collect_expert_samples, delta_r2_periodic, rank_expert_samples, rank_experts, rank_newline_samples,
    ExpertProbeResult, ExpertSamples, ProbeReport, ProbeTask,
};
pub use regress::{cv_regress, CvResult, Targets};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("label error: {0}")]
    Labels(String),
    #[error("a single class cannot be scored")]
    SingleClass,
    #[error("all labels are identical")]
    ConstantLabels,
    #[error("cross-validation: {0}")]
    Folds(String),
    #[error("no expert has enough activations to probe")]
    NoQualifyingExperts,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How raw labels become regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    Identity,
    /// Integer labels in `[0, n)` mapped onto the unit circle.
    Cyclic(u32),
    Log1p,
    Log10,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hypothesis::Identity => write!(f, "identity"),
            Hypothesis::Cyclic(n) => write!(f, "cyclic:{n}"),
            Hypothesis::Log1p => write!(f, "log1p"),
            Hypothesis::Log10 => write!(f, "log10"),
        }
    }
}

impl FromStr for Hypothesis {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, ProbeError> {
        match s {
            "identity" => Ok(Hypothesis::Identity),
            "log1p" => Ok(Hypothesis::Log1p),
            "log10" => Ok(Hypothesis::Log10),
            _ => match s.strip_prefix("cyclic:").map(str::parse::<u32>) {
                Some(Ok(n)) if n >= 2 => Ok(Hypothesis::Cyclic(n)),
                _ => Err(ProbeError::Parse(format!(
                    "unknown hypothesis '{s}' (expected identity, cyclic:N with N >= 2, log1p or log10)"
                ))),
            },
        }
    }
}

impl Serialize for Hypothesis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Hypothesis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    Linear,
    Ridge,
    Logistic,
    Multinomial,
}

impl RegressionKind {
    pub fn is_classification(self) -> bool {
        matches!(self, RegressionKind::Logistic | RegressionKind::Multinomial)
    }

    pub fn score_kind(self) -> ScoreKind {
        if self.is_classification() {
            ScoreKind::Accuracy
        } else {
            ScoreKind::R2
        }
    }
}

impl FromStr for RegressionKind {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, ProbeError> {
        match s {
            "linear" => Ok(RegressionKind::Linear),
            "ridge" => Ok(RegressionKind::Ridge),
            "logistic" => Ok(RegressionKind::Logistic),
            "multinomial" => Ok(RegressionKind::Multinomial),
            _ => Err(ProbeError::Parse(format!(
                "unknown regression '{s}' (expected linear, ridge, logistic or multinomial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    R2,
    Accuracy,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypothesis_parsing() {
        for h in ["identity", "cyclic:24", "log1p", "log10"] {
            assert_eq!(h.parse::<Hypothesis>().unwrap().to_string(), h);
        }
        assert!("cyclic:1".parse::<Hypothesis>().is_err());
        assert!("cyclic".parse::<Hypothesis>().is_err());
        assert!("log2".parse::<Hypothesis>().is_err());
        let json = serde_json::to_string(&Hypothesis::Cyclic(7)).unwrap();
        assert_eq!(json, "\"cyclic:7\"");
        assert_eq!(serde_json::from_str::<Hypothesis>(&json).unwrap(), Hypothesis::Cyclic(7));
    }

    #[test]
    fn regression_parsing() {
        assert_eq!("ridge".parse::<RegressionKind>().unwrap(), RegressionKind::Ridge);
        assert_eq!(RegressionKind::Logistic.score_kind(), ScoreKind::Accuracy);
        assert!("svm".parse::<RegressionKind>().is_err());
    }
}
