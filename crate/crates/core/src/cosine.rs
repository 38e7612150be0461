//! Global bag-of-features classifier: cosine similarity between a
//! conversation's weighted feature vector and each theme's weight vector,
//! followed by two threshold rules that admit secondary themes.
//!
//! The decision keeps every theme whose score is (a) at least `rho` times
//! the best score and (b) at least `v` times the total score mass.  Both
//! conditions must hold; the best-scoring theme is always kept as long as
//! its score is positive, so the hypothesis can only be empty when no theme
//! matches at all — that case falls back to the reject class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ThemeLabel, TRASH_LABEL};
use crate::features::{Feature, ThemeWeightTable};
use crate::hypothesis::ThemeHypothesis;

/// How a fresh conversation's feature vector is weighted before the cosine.
/// Theme vectors always use the trained discriminative weights; this choice
/// only affects the conversation side.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ConversationWeighting {
    /// Occurrence count scaled by idf and purity (default).
    #[default]
    CountIdfPurity,
    /// Raw occurrence count.
    RawCount,
    /// Occurrence count scaled by idf only.
    CountIdf,
}

/// Decision thresholds and weighting choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineConfig {
    /// Relative threshold: keep themes scoring at least `rho` × best score.
    pub rho: f64,
    /// Absolute-share threshold: keep themes holding at least `v` of the
    /// total score mass.
    pub v: f64,
    pub weighting: ConversationWeighting,
}

impl Default for CosineConfig {
    fn default() -> Self {
        CosineConfig {
            rho: 0.69,
            v: 0.16,
            weighting: ConversationWeighting::CountIdfPurity,
        }
    }
}

/// Scores one conversation (given as feature occurrence counts) against
/// every theme.  Scores live in `[0, 1]`; a theme with an empty weight
/// vector — or a conversation sharing no feature with the model — scores 0.
pub fn cosine_scores(
    counts: &BTreeMap<Feature, u32>,
    weights: &ThemeWeightTable,
    weighting: ConversationWeighting,
) -> BTreeMap<ThemeLabel, f64> {
    // Conversation-side vector over the model's feature space.
    let mut conv_vec: BTreeMap<&Feature, f64> = BTreeMap::new();
    for (f, &c) in counts {
        if !weights.contains_feature(f) {
            continue;
        }
        let w = match weighting {
            ConversationWeighting::CountIdfPurity => {
                c as f64 * weights.idf(f) * weights.gini(f)
            }
            ConversationWeighting::RawCount => c as f64,
            ConversationWeighting::CountIdf => c as f64 * weights.idf(f),
        };
        if w > 0.0 {
            conv_vec.insert(f, w);
        }
    }
    let conv_norm = conv_vec.values().map(|w| w * w).sum::<f64>().sqrt();

    let mut scores = BTreeMap::new();
    for t in weights.themes() {
        let theme_norm = weights.norm(t);
        let score = if conv_norm == 0.0 || theme_norm == 0.0 {
            0.0
        } else {
            let dot: f64 = conv_vec
                .iter()
                .map(|(f, wy)| wy * weights.weight(t, f))
                .sum();
            dot / (conv_norm * theme_norm)
        };
        scores.insert(t.clone(), score);
    }
    scores
}

/// Applies the two threshold rules to a score map.  `order` fixes argmax
/// tie-breaking (first listed theme wins).
pub fn cosine_decide(
    scores: &BTreeMap<ThemeLabel, f64>,
    order: &[ThemeLabel],
    config: &CosineConfig,
) -> ThemeHypothesis {
    let best = order
        .iter()
        .filter_map(|t| scores.get(t).map(|&s| (t, s)))
        .fold(None::<(&ThemeLabel, f64)>, |acc, (t, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((t, s)),
        });
    let (best_theme, best_score) = match best {
        Some((t, s)) if s > 0.0 => (t, s),
        _ => {
            return ThemeHypothesis::fallback(
                ThemeLabel::new(TRASH_LABEL),
                scores.clone(),
            )
        }
    };

    let total: f64 = scores.values().sum();
    let mut labels: std::collections::BTreeSet<ThemeLabel> = scores
        .iter()
        .filter(|(_, &s)| s >= config.rho * best_score && s >= config.v * total)
        .map(|(t, _)| t.clone())
        .collect();
    // The best theme is kept even if near-uniform scores push the share
    // rule above its own share.
    labels.insert(best_theme.clone());
    ThemeHypothesis::new(labels, scores.clone())
}
