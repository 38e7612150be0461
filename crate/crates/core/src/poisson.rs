//! Global classifier with independent Poisson feature-count models.
//!
//! Each theme gets a per-feature mean occurrence rate estimated from its
//! training conversations (floored at a small epsilon so logs stay finite).
//! A candidate label set — a single theme, or a pair observed in training —
//! scores the sum of its log prior and, per feature, `count · ln(rate) -
//! rate`; the constant `ln(count!)` term cancels across candidates and is
//! dropped.  Pair rates default to the elementwise maximum of the two
//! themes' rates: a conversation about both themes is expected to exhibit
//! each theme's characteristic counts, not their sum (the sum is available
//! as a config switch).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ThemeLabel, ThemeSet};
use crate::error::{Error, Result};
use crate::features::{feature_counts, normalize, Feature, FeatureConfig};
use crate::hypothesis::ThemeHypothesis;

/// A candidate annotation: one or two themes.
pub type LabelSet = BTreeSet<ThemeLabel>;

/// How a pair candidate combines its themes' per-feature rates.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PairRate {
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonConfig {
    /// Rate floor: every per-feature mean is at least this.
    pub epsilon: f64,
    pub pair_rate: PairRate,
    /// Restrict candidates to single themes (no pairs).
    pub singletons_only: bool,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        PoissonConfig {
            epsilon: 0.01,
            pair_rate: PairRate::Max,
            singletons_only: false,
        }
    }
}

/// One scored candidate label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonCandidate {
    pub labels: LabelSet,
    pub prior: f64,
    /// Total rate mass `Σ_f rate(S, f)` over the whole feature set,
    /// precomputed: it is the candidate's score on an empty conversation
    /// (up to the prior).
    pub mu_total: f64,
}

/// Trained rates and candidate priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonModel {
    pub themes: Vec<ThemeLabel>,
    /// The selected feature set the rates are defined over.
    pub features: BTreeSet<Feature>,
    /// Sparse per-theme rates; features absent here sit at the epsilon
    /// floor.
    mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>>,
    /// Candidates in deterministic (tie-breaking) order: singletons in
    /// theme order, then observed pairs in label order.
    pub candidates: Vec<PoissonCandidate>,
    pub config: PoissonConfig,
}

impl PoissonModel {
    /// The rate of `f` for a single theme.
    pub fn rate(&self, t: &ThemeLabel, f: &Feature) -> f64 {
        self.mu
            .get(t)
            .and_then(|m| m.get(f))
            .copied()
            .unwrap_or(self.config.epsilon)
    }

    /// The rate of `f` for a candidate label set.
    pub fn candidate_rate(&self, labels: &LabelSet, f: &Feature) -> f64 {
        let mut it = labels.iter();
        match (it.next(), it.next()) {
            (Some(a), None) => self.rate(a, f),
            (Some(a), Some(b)) => {
                let (ra, rb) = (self.rate(a, f), self.rate(b, f));
                match self.config.pair_rate {
                    PairRate::Max => ra.max(rb),
                    PairRate::Sum => ra + rb,
                }
            }
            _ => self.config.epsilon,
        }
    }

    /// Test/fixture constructor from explicit rates and priors.
    #[cfg(test)]
    pub(crate) fn from_raw(
        themes: Vec<ThemeLabel>,
        features: BTreeSet<Feature>,
        mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>>,
        priors: Vec<(LabelSet, f64)>,
        config: PoissonConfig,
    ) -> Self {
        let mut model = PoissonModel {
            themes,
            features,
            mu,
            candidates: Vec::new(),
            config,
        };
        model.candidates = priors
            .into_iter()
            .map(|(labels, prior)| {
                let mu_total = model
                    .features
                    .iter()
                    .map(|f| model.candidate_rate(&labels, f))
                    .sum();
                PoissonCandidate {
                    labels,
                    prior,
                    mu_total,
                }
            })
            .collect();
        model
    }
}

/// Estimates per-theme rates and candidate priors from the training split.
pub fn train_poisson(
    train: &Corpus,
    themes: &ThemeSet,
    selected: &BTreeSet<Feature>,
    features: &FeatureConfig,
    config: &PoissonConfig,
) -> Result<PoissonModel> {
    if train.is_empty() {
        return Err(Error::EmptyTrainCorpus);
    }
    if selected.is_empty() {
        return Err(Error::EmptyFeatureSet {
            purity_floor: 0.0,
            df_floor: 0,
        });
    }

    // Occurrence totals and conversation counts per theme.
    let mut totals: BTreeMap<&ThemeLabel, BTreeMap<&Feature, u64>> = BTreeMap::new();
    let mut conv_counts: BTreeMap<&ThemeLabel, u64> = BTreeMap::new();
    let mut set_counts: BTreeMap<LabelSet, u64> = BTreeMap::new();
    for conv in train.iter() {
        let tokens = normalize(conv, features);
        let counts = feature_counts(&tokens, features.max_gap);
        for t in &conv.gold {
            *conv_counts.entry(t).or_insert(0) += 1;
            let into = totals.entry(t).or_default();
            for (f, &c) in &counts {
                if let Some(key) = selected.get(f) {
                    *into.entry(key).or_insert(0) += c as u64;
                }
            }
        }
        if conv.gold.len() <= 2 {
            *set_counts.entry(conv.gold.clone()).or_insert(0) += 1;
        }
    }

    let epsilon = config.epsilon;
    let mut mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = BTreeMap::new();
    for t in themes.iter() {
        let n = conv_counts
            .get(t)
            .copied()
            .ok_or_else(|| Error::ThemeWithoutTrainData(t.as_str().to_owned()))?;
        let rates = totals
            .get(t)
            .map(|m| {
                m.iter()
                    .map(|(f, &total)| {
                        ((*f).clone(), (total as f64 / n as f64).max(epsilon))
                    })
                    .filter(|(_, r)| *r > epsilon)
                    .collect()
            })
            .unwrap_or_default();
        mu.insert(t.clone(), rates);
    }

    // Candidate universe: every singleton, plus pairs observed in train.
    let mut label_sets: Vec<LabelSet> = themes
        .iter()
        .map(|t| LabelSet::from([t.clone()]))
        .collect();
    if !config.singletons_only {
        let mut pairs: Vec<LabelSet> = set_counts
            .keys()
            .filter(|s| s.len() == 2)
            .cloned()
            .collect();
        pairs.sort();
        label_sets.extend(pairs);
    }

    // Add-one smoothing over the candidate universe.
    let observed_total: u64 = label_sets
        .iter()
        .map(|s| set_counts.get(s).copied().unwrap_or(0))
        .sum();
    let denom = observed_total as f64 + label_sets.len() as f64;

    let mut model = PoissonModel {
        themes: themes.labels().to_vec(),
        features: selected.clone(),
        mu,
        candidates: Vec::new(),
        config: *config,
    };
    model.candidates = label_sets
        .into_iter()
        .map(|labels| {
            let count = set_counts.get(&labels).copied().unwrap_or(0);
            let prior = (count as f64 + 1.0) / denom;
            // Sparse total: explicit rates plus the floor for the rest.
            let mu_total = match labels.len() {
                1 => {
                    let t = labels.iter().next().unwrap();
                    let explicit = &model.mu[t];
                    explicit.values().sum::<f64>()
                        + epsilon * (model.features.len() - explicit.len()) as f64
                }
                _ => {
                    let mut it = labels.iter();
                    let (a, b) = (it.next().unwrap(), it.next().unwrap());
                    let union: BTreeSet<&Feature> =
                        model.mu[a].keys().chain(model.mu[b].keys()).collect();
                    union
                        .iter()
                        .map(|f| model.candidate_rate(&labels, f))
                        .sum::<f64>()
                        + epsilon * (model.features.len() - union.len()) as f64
                }
            };
            PoissonCandidate {
                labels,
                prior,
                mu_total,
            }
        })
        .collect();
    Ok(model)
}

/// Scores one candidate against a conversation's feature counts.
pub fn candidate_score(
    model: &PoissonModel,
    candidate: &PoissonCandidate,
    counts: &BTreeMap<Feature, u32>,
) -> f64 {
    let mut score = candidate.prior.ln() - candidate.mu_total;
    for (f, &c) in counts {
        if c == 0 || !model.features.contains(f) {
            continue;
        }
        score += c as f64 * model.candidate_rate(&candidate.labels, f).ln();
    }
    score
}

/// Picks the best-scoring candidate label set.  Ties keep the earliest
/// candidate (singletons precede pairs).  An empty conversation is decided
/// by priors and rate mass alone — that is still a real decision, not a
/// fallback.
pub fn classify_poisson(
    model: &PoissonModel,
    counts: &BTreeMap<Feature, u32>,
) -> ThemeHypothesis {
    let mut best: Option<(usize, f64)> = None;
    let mut theme_best: BTreeMap<ThemeLabel, f64> = BTreeMap::new();
    for (i, cand) in model.candidates.iter().enumerate() {
        let s = candidate_score(model, cand, counts);
        for t in &cand.labels {
            theme_best
                .entry(t.clone())
                .and_modify(|b| *b = b.max(s))
                .or_insert(s);
        }
        if best.map(|(_, bs)| s > bs).unwrap_or(true) {
            best = Some((i, s));
        }
    }
    let (idx, best_score) =
        best.expect("candidate list always contains the singletons");
    let scores: BTreeMap<ThemeLabel, f64> = theme_best
        .into_iter()
        .map(|(t, s)| (t, (s - best_score).exp()))
        .collect();
    ThemeHypothesis::new(model.candidates[idx].labels.clone(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Conversation, Speaker, Turn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn label(s: &str) -> ThemeLabel {
        ThemeLabel::new(s)
    }

    fn feat(s: &str) -> Feature {
        Feature::Unigram(s.into())
    }

    fn conv(id: &str, gold: &[&str], words: &[&str]) -> Conversation {
        Conversation {
            id: id.to_owned(),
            gold: gold.iter().map(|s| ThemeLabel::new(*s)).collect(),
            turns: vec![Turn {
                speaker: Speaker::Caller,
                words: words.iter().map(|w| w.to_string()).collect(),
            }],
        }
    }

    fn unigram_set(words: &[&str]) -> BTreeSet<Feature> {
        words.iter().map(|w| feat(w)).collect()
    }

    #[test]
    fn rate_is_mean_count_per_theme_conversation() {
        // f occurs 2, 3, 1 times across three t1 conversations -> rate 2.
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f", "f"]),
            conv("b", &["t1"], &["f", "f", "f"]),
            conv("c", &["t1"], &["f"]),
            conv("d", &["t2"], &["g"]),
        ])
        .unwrap();
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let selected = unigram_set(&["f", "g"]);
        let m = train_poisson(
            &train,
            &themes,
            &selected,
            &FeatureConfig::default(),
            &PoissonConfig::default(),
        )
        .unwrap();
        assert!((m.rate(&label("t1"), &feat("f")) - 2.0).abs() < 1e-12);
        // Never seen in t2 -> floor.
        assert_eq!(m.rate(&label("t2"), &feat("f")), 0.01);
    }

    #[test]
    fn pair_prior_reflects_observed_fraction() {
        let mut convs: Vec<Conversation> = (0..10)
            .map(|i| conv(&format!("m{i}"), &["t1", "t2"], &["f", "g"]))
            .collect();
        for i in 0..60 {
            convs.push(conv(&format!("a{i}"), &["t1"], &["f"]));
        }
        for i in 0..60 {
            convs.push(conv(&format!("b{i}"), &["t2"], &["g"]));
        }
        let train = Corpus::new(convs).unwrap();
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let selected = unigram_set(&["f", "g"]);
        let m = train_poisson(
            &train,
            &themes,
            &selected,
            &FeatureConfig::default(),
            &PoissonConfig::default(),
        )
        .unwrap();
        let pair = m
            .candidates
            .iter()
            .find(|c| c.labels.len() == 2)
            .expect("observed pair is a candidate");
        // (10+1)/(130+3) with add-one smoothing; close to 10/130 raw.
        assert!((pair.prior - 11.0 / 133.0).abs() < 1e-12);
    }

    #[test]
    fn hand_instance_two_features() {
        let themes = vec![label("t1"), label("t2")];
        let features = unigram_set(&["f1", "f2"]);
        let mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = [
            (label("t1"), [(feat("f1"), 2.0), (feat("f2"), 1.0)].into()),
            (label("t2"), [(feat("f1"), 0.5), (feat("f2"), 1.0)].into()),
        ]
        .into();
        let priors = vec![
            (LabelSet::from([label("t1")]), 0.5),
            (LabelSet::from([label("t2")]), 0.5),
        ];
        let m = PoissonModel::from_raw(
            themes,
            features,
            mu,
            priors,
            PoissonConfig::default(),
        );
        let counts: BTreeMap<Feature, u32> = [(feat("f1"), 3)].into();
        let s1 = candidate_score(&m, &m.candidates[0], &counts);
        let s2 = candidate_score(&m, &m.candidates[1], &counts);
        // 3·ln(2/0.5) − (2 − 0.5) ≈ 2.66.
        assert!(((s1 - s2) - (3.0 * 4.0f64.ln() - 1.5)).abs() < 1e-9);
        let h = classify_poisson(&m, &counts);
        assert_eq!(h.labels, LabelSet::from([label("t1")]));
    }

    #[test]
    fn empty_conversation_decided_by_prior_and_mass() {
        let themes = vec![label("t1"), label("t2")];
        let features = unigram_set(&["f1"]);
        let mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = [
            (label("t1"), [(feat("f1"), 5.0)].into()),
            (label("t2"), [(feat("f1"), 0.1)].into()),
        ]
        .into();
        let priors = vec![
            (LabelSet::from([label("t1")]), 0.5),
            (LabelSet::from([label("t2")]), 0.5),
        ];
        let m = PoissonModel::from_raw(
            themes,
            features,
            mu,
            priors,
            PoissonConfig::default(),
        );
        // No observations: the candidate expecting less mass wins.
        let h = classify_poisson(&m, &BTreeMap::new());
        assert_eq!(h.labels, LabelSet::from([label("t2")]));
        assert!(!h.low_confidence);
    }

    #[test]
    fn uniform_rate_feature_never_changes_argmax() {
        let themes = vec![label("t1"), label("t2")];
        let base_features = unigram_set(&["f1"]);
        let with_extra = unigram_set(&["f1", "shared"]);
        let mu_base: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = [
            (label("t1"), [(feat("f1"), 2.0)].into()),
            (label("t2"), [(feat("f1"), 0.5)].into()),
        ]
        .into();
        let mut mu_extra = mu_base.clone();
        for rates in mu_extra.values_mut() {
            rates.insert(feat("shared"), 1.3);
        }
        let priors = vec![
            (LabelSet::from([label("t1")]), 0.5),
            (LabelSet::from([label("t2")]), 0.5),
        ];
        let a = PoissonModel::from_raw(
            themes.clone(),
            base_features,
            mu_base,
            priors.clone(),
            PoissonConfig::default(),
        );
        let b = PoissonModel::from_raw(
            themes,
            with_extra,
            mu_extra,
            priors,
            PoissonConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let counts: BTreeMap<Feature, u32> = [
                (feat("f1"), rng.random_range(0..6)),
                (feat("shared"), rng.random_range(0..6)),
            ]
            .into();
            assert_eq!(
                classify_poisson(&a, &counts).labels,
                classify_poisson(&b, &counts).labels
            );
        }
    }

    #[test]
    fn dropped_factorial_term_never_changes_argmax() {
        // The full log-likelihood subtracts ln(count!) per feature — a
        // candidate-independent constant.  Check numerically.
        let themes = vec![label("t1"), label("t2"), label("t3")];
        let features = unigram_set(&["f1", "f2", "f3"]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut mu: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = BTreeMap::new();
        for t in &themes {
            let rates = features
                .iter()
                .map(|f| (f.clone(), rng.random::<f64>() * 4.0 + 0.01))
                .collect();
            mu.insert(t.clone(), rates);
        }
        let priors = vec![
            (LabelSet::from([label("t1")]), 0.4),
            (LabelSet::from([label("t2")]), 0.3),
            (LabelSet::from([label("t3")]), 0.3),
        ];
        let m = PoissonModel::from_raw(
            themes,
            features.clone(),
            mu,
            priors,
            PoissonConfig::default(),
        );
        let ln_factorial = |n: u32| (1..=n).map(|k| (k as f64).ln()).sum::<f64>();
        for _ in 0..50 {
            let counts: BTreeMap<Feature, u32> = features
                .iter()
                .map(|f| (f.clone(), rng.random_range(0..8)))
                .collect();
            let constant: f64 = counts.values().map(|&c| ln_factorial(c)).sum();
            let argmax_short = m
                .candidates
                .iter()
                .map(|c| candidate_score(&m, c, &counts))
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            let argmax_full = m
                .candidates
                .iter()
                .map(|c| candidate_score(&m, c, &counts) - constant)
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax_short, argmax_full);
        }
    }

    #[test]
    fn singletons_only_mode_excludes_pairs() {
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f"]),
            conv("b", &["t2"], &["g"]),
            conv("ab", &["t1", "t2"], &["f", "g"]),
        ])
        .unwrap();
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let selected = unigram_set(&["f", "g"]);
        let full = train_poisson(
            &train,
            &themes,
            &selected,
            &FeatureConfig::default(),
            &PoissonConfig::default(),
        )
        .unwrap();
        assert!(full.candidates.iter().any(|c| c.labels.len() == 2));
        let solo = train_poisson(
            &train,
            &themes,
            &selected,
            &FeatureConfig::default(),
            &PoissonConfig {
                singletons_only: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(solo.candidates.iter().all(|c| c.labels.len() == 1));
    }

    #[test]
    fn scores_finite_for_all_inputs() {
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f"]),
            conv("b", &["t2"], &["g"]),
        ])
        .unwrap();
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let selected = unigram_set(&["f", "g"]);
        let m = train_poisson(
            &train,
            &themes,
            &selected,
            &FeatureConfig::default(),
            &PoissonConfig::default(),
        )
        .unwrap();
        let counts: BTreeMap<Feature, u32> = [(feat("f"), 1000), (feat("g"), 0)].into();
        for c in &m.candidates {
            assert!(candidate_score(&m, c, &counts).is_finite());
        }
    }
}
