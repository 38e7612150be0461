//! Classifier output: a scored multi-label hypothesis for one conversation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::ThemeLabel;

/// Identifies one of the four base classifiers.  The enum order is the
/// conventional reporting order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    Cosine,
    Density,
    Hmm,
    Poisson,
}

impl SystemId {
    pub const ALL: [SystemId; 4] = [
        SystemId::Cosine,
        SystemId::Density,
        SystemId::Hmm,
        SystemId::Poisson,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SystemId::Cosine => "cosine",
            SystemId::Density => "density",
            SystemId::Hmm => "hmm",
            SystemId::Poisson => "poisson",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(SystemId::Cosine),
            "density" => Ok(SystemId::Density),
            "hmm" => Ok(SystemId::Hmm),
            "poisson" => Ok(SystemId::Poisson),
            other => Err(format!("unknown system `{other}`")),
        }
    }
}

/// A multi-label decision for one conversation.
///
/// `labels` is the decided set (never empty: classifiers that find no
/// support fall back to the reject class).  `scores` keeps the per-theme
/// evidence the decision was made from, for downstream combination;
/// `low_confidence` marks decisions produced by a fallback path rather than
/// by positive evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeHypothesis {
    pub labels: BTreeSet<ThemeLabel>,
    #[serde(default)]
    pub scores: BTreeMap<ThemeLabel, f64>,
    #[serde(default)]
    pub low_confidence: bool,
}

impl ThemeHypothesis {
    pub fn new(labels: BTreeSet<ThemeLabel>, scores: BTreeMap<ThemeLabel, f64>) -> Self {
        ThemeHypothesis {
            labels,
            scores,
            low_confidence: false,
        }
    }

    /// A confident single-label decision.
    pub fn singleton(label: ThemeLabel, scores: BTreeMap<ThemeLabel, f64>) -> Self {
        ThemeHypothesis {
            labels: BTreeSet::from([label]),
            scores,
            low_confidence: false,
        }
    }

    /// The fallback decision used when no theme gathers positive evidence.
    pub fn fallback(trash: ThemeLabel, scores: BTreeMap<ThemeLabel, f64>) -> Self {
        ThemeHypothesis {
            labels: BTreeSet::from([trash]),
            scores,
            low_confidence: true,
        }
    }

    /// True when the decision is exactly the reject class.
    pub fn is_trash_only(&self) -> bool {
        self.labels.len() == 1
            && self.labels.iter().next().map(|l| l.is_trash()).unwrap_or(false)
    }

    /// Per-theme scores rescaled to sum to 1; an all-zero (or all-negative-
    /// free) score vector is returned unchanged so callers can detect it.
    pub fn normalized_scores(&self) -> BTreeMap<ThemeLabel, f64> {
        let total: f64 = self.scores.values().sum();
        if total <= 0.0 {
            return self.scores.clone();
        }
        self.scores
            .iter()
            .map(|(l, s)| (l.clone(), s / total))
            .collect()
    }
}
