//! Lattice-driven re-scoring of theme hypotheses.
//!
//! A second, independent evidence source for the repair rules: per theme, a
//! fixed-size list of high-purity features (single words, abstract classes,
//! and word pairs spanning up to a few turns) is extracted from the
//! single-label part of the training set.  At decision time each feature's
//! posterior is read off the word lattice of the conversation and combined
//! with the feature's purity into an accumulated-evidence score per theme —
//! the more theme-specific feature mass the lattice supports, the higher
//! the score.  Themes are ranked by descending score; the rule engine in
//! [`rules`] consumes the ranking and the raw scores.

pub mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Corpus, Lattice, ThemeLabel, ThemeSet};
use crate::error::{Error, Result};
use crate::features::{normalize, Feature, FeatureConfig};

pub use rules::{
    apply_rules, load_rules, standard_rules, AppliedAction, CoherenceTable,
    RecoveryReport, RecoveryRule, RuleForm,
};

/// Settings for feature-set construction and scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReConfig {
    /// Per-theme feature-list size.
    pub n_features: usize,
    /// When set, `n_features` is chosen by growing the list size and
    /// watching training accuracy instead of using the fixed value.
    pub auto_size: bool,
    /// Maximum turn distance for word pairs.
    pub window: u32,
    /// Rank themes by prior entropy minus accumulated evidence instead of
    /// by the accumulated evidence itself.
    pub use_information_gain: bool,
    /// Posterior bonus granted to features covered by a matched complete
    /// mention pattern.
    pub mention_bonus: f64,
}

impl Default for ReConfig {
    fn default() -> Self {
        ReConfig {
            n_features: 420,
            auto_size: false,
            window: 3,
            use_information_gain: false,
            mention_bonus: 0.1,
        }
    }
}

/// One ranked feature of a theme's evidence list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReFeatureEntry {
    pub feature: Feature,
    /// Smoothed probability of the theme given the feature.
    pub purity: f64,
    pub idf: f64,
}

/// Per-theme evidence lists plus the theme priors they were built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReFeatureSet {
    pub themes: Vec<ThemeLabel>,
    /// Effective per-theme list size (requested size capped by the
    /// candidate pool).
    pub n_features: usize,
    pub window: u32,
    /// Theme priors over single-label training conversations.
    pub priors: BTreeMap<ThemeLabel, f64>,
    /// Binary entropy of each theme prior.
    pub prior_entropy: BTreeMap<ThemeLabel, f64>,
    /// Lists ordered by descending purity.
    pub per_theme: BTreeMap<ThemeLabel, Vec<ReFeatureEntry>>,
}

/// Smoothed purity: interpolates the co-occurrence counts with the theme
/// prior so unseen features back off to the prior exactly.
pub fn smoothed_purity(
    count_for_theme: f64,
    total_count: f64,
    theme_count: usize,
    prior: f64,
) -> f64 {
    if count_for_theme == 0.0 && total_count == 0.0 {
        // Zero evidence must return the prior itself, not a value one
        // rounding step away from it.
        return prior;
    }
    let k = theme_count as f64;
    (count_for_theme + k * prior) / (total_count + k)
}

fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.log2();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).log2();
    }
    h
}

/// One evidence summand: `-q log2 q` with the `0 log 0 = 0` convention
/// (and `1 log 1 = 0`, so certain evidence contributes nothing).
pub fn entropy_term(q: f64) -> f64 {
    if q > 0.0 && q < 1.0 {
        -q * q.log2()
    } else {
        0.0
    }
}

/// Inverse-document-frequency weighted posterior, exposed for diagnostics
/// and feature ranking exports.
pub fn tfidf_gamma(idf: f64, posterior: f64) -> f64 {
    idf * posterior.clamp(0.0, 1.0)
}

/// The distinct re-scoring features of one transcript: normalized unigrams
/// and classes, plus ordered word pairs within `window` turns.
pub fn conversation_re_features(
    conv: &Conversation,
    config: &FeatureConfig,
    window: u32,
) -> BTreeSet<Feature> {
    let tokens = normalize(conv, config);
    let mut out = BTreeSet::new();
    for tok in &tokens {
        out.insert(tok.unigram());
    }
    for (i, left) in tokens.iter().enumerate() {
        if left.is_class {
            continue;
        }
        for right in tokens.iter().skip(i + 1) {
            if right.turn - left.turn > window {
                break;
            }
            if right.is_class {
                continue;
            }
            out.insert(Feature::TurnPair(left.text.clone(), right.text.clone()));
        }
    }
    out
}

/// Builds the per-theme evidence lists from single-label training
/// conversations.  Every theme must have at least one such conversation.
pub fn build_re_features(
    train: &Corpus,
    themes: &ThemeSet,
    features: &FeatureConfig,
    config: &ReConfig,
) -> Result<ReFeatureSet> {
    if train.is_empty() {
        return Err(Error::EmptyTrainCorpus);
    }
    let singles: Vec<(&ThemeLabel, &Conversation)> = train
        .iter()
        .filter(|c| c.gold.len() == 1)
        .map(|c| (c.gold.iter().next().unwrap(), c))
        .collect();
    let mut theme_counts: BTreeMap<&ThemeLabel, usize> = BTreeMap::new();
    for (t, _) in &singles {
        *theme_counts.entry(t).or_insert(0) += 1;
    }
    for t in themes.iter() {
        if !theme_counts.contains_key(t) {
            return Err(Error::ThemeWithoutSingleLabelData(t.to_string()));
        }
    }

    let n = singles.len() as f64;
    let k = themes.len();
    let priors: BTreeMap<ThemeLabel, f64> = themes
        .iter()
        .map(|t| (t.clone(), theme_counts[t] as f64 / n))
        .collect();
    let prior_entropy: BTreeMap<ThemeLabel, f64> = priors
        .iter()
        .map(|(t, p)| (t.clone(), binary_entropy(*p)))
        .collect();

    // Conversation-level distinct feature sets, in parallel, then an
    // ordered merge into per-feature per-theme document counts.
    let conv_features: Vec<(&ThemeLabel, BTreeSet<Feature>)> = singles
        .par_iter()
        .map(|(t, c)| (*t, conversation_re_features(c, features, config.window)))
        .collect();
    let mut counts: BTreeMap<Feature, BTreeMap<&ThemeLabel, usize>> = BTreeMap::new();
    for (t, feats) in &conv_features {
        for f in feats {
            *counts.entry(f.clone()).or_default().entry(t).or_insert(0) += 1;
        }
    }

    // Full candidate lists: every pool feature gets a purity for every
    // theme (count-free features sit at the prior).
    let mut per_theme: BTreeMap<ThemeLabel, Vec<ReFeatureEntry>> = themes
        .iter()
        .map(|t| (t.clone(), Vec::with_capacity(counts.len())))
        .collect();
    for (f, by_theme) in &counts {
        let total: usize = by_theme.values().sum();
        let idf = (n / total as f64).ln();
        for t in themes.iter() {
            let c = by_theme.get(t).copied().unwrap_or(0);
            let purity = smoothed_purity(c as f64, total as f64, k, priors[t]);
            per_theme.get_mut(t).unwrap().push(ReFeatureEntry {
                feature: f.clone(),
                purity,
                idf,
            });
        }
    }
    for list in per_theme.values_mut() {
        list.sort_by(|a, b| {
            b.purity
                .partial_cmp(&a.purity)
                .unwrap()
                .then_with(|| a.feature.cmp(&b.feature))
        });
    }

    let pool = counts.len();
    let size = if config.auto_size {
        grow_list_size(&conv_features, &per_theme, themes.labels(), pool)
    } else {
        config.n_features.min(pool)
    };
    for list in per_theme.values_mut() {
        list.truncate(size);
    }

    Ok(ReFeatureSet {
        themes: themes.labels().to_vec(),
        n_features: size,
        window: config.window,
        priors,
        prior_entropy,
        per_theme,
    })
}

/// Grows the list size in steps, scoring the single-label training
/// conversations with presence evidence, and stops once three consecutive
/// steps each improve accuracy by less than 0.001.  Returns the smallest
/// size reaching the best accuracy seen.
fn grow_list_size(
    conv_features: &[(&ThemeLabel, BTreeSet<Feature>)],
    per_theme: &BTreeMap<ThemeLabel, Vec<ReFeatureEntry>>,
    order: &[ThemeLabel],
    pool: usize,
) -> usize {
    let checkpoints: Vec<usize> = if pool < 50 {
        vec![pool]
    } else {
        (50..=1000.min(pool)).step_by(5).collect()
    };
    if checkpoints.is_empty() {
        return pool;
    }

    // Cumulative per-theme evidence at each checkpoint, per conversation.
    let sums: Vec<Vec<Vec<f64>>> = conv_features
        .par_iter()
        .map(|(_, present)| {
            order
                .iter()
                .map(|t| {
                    let list = &per_theme[t];
                    let mut acc = 0.0;
                    let mut snapshots = Vec::with_capacity(checkpoints.len());
                    let mut next = 0usize;
                    for (i, entry) in list.iter().enumerate() {
                        if present.contains(&entry.feature) {
                            acc += entropy_term(entry.purity);
                        }
                        while next < checkpoints.len() && i + 1 == checkpoints[next] {
                            snapshots.push(acc);
                            next += 1;
                        }
                    }
                    while next < checkpoints.len() {
                        snapshots.push(acc);
                        next += 1;
                    }
                    snapshots
                })
                .collect()
        })
        .collect();

    let accuracy_at = |ci: usize| -> f64 {
        let mut correct = 0usize;
        for ((gold, _), by_theme) in conv_features.iter().zip(&sums) {
            let mut best: Option<(usize, f64)> = None;
            for (ti, snapshots) in by_theme.iter().enumerate() {
                let s = snapshots[ci];
                match best {
                    Some((_, bs)) if bs >= s => {}
                    _ => best = Some((ti, s)),
                }
            }
            if let Some((ti, _)) = best {
                if &order[ti] == *gold {
                    correct += 1;
                }
            }
        }
        correct as f64 / conv_features.len() as f64
    };

    let mut best_size = checkpoints[0];
    let mut best_acc = accuracy_at(0);
    let mut prev_acc = best_acc;
    let mut stall = 0usize;
    for (ci, &size) in checkpoints.iter().enumerate().skip(1) {
        let acc = accuracy_at(ci);
        if acc > best_acc {
            best_acc = acc;
            best_size = size;
        }
        if acc - prev_acc < 0.001 {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
        prev_acc = acc;
    }
    best_size
}

/// Hand-compiled token templates whose full presence grants constituent
/// features a posterior bonus — a backstop for themes whose surface forms
/// are too varied to enumerate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MentionPatterns {
    /// Per theme, token sequences (words or class names) that must all be
    /// present.
    pub patterns: BTreeMap<ThemeLabel, Vec<Vec<String>>>,
}

impl MentionPatterns {
    /// Loads a pattern file: one `THEME token token ...` line per pattern,
    /// `#` comments allowed.
    pub fn load(path: impl AsRef<Path>, themes: &ThemeSet) -> Result<MentionPatterns> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut patterns: BTreeMap<ThemeLabel, Vec<Vec<String>>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let theme = ThemeLabel::new(parts.next().unwrap());
            if !themes.contains(&theme) {
                return Err(Error::UnknownTheme {
                    path: path.to_owned(),
                    line: lineno + 1,
                    label: theme.to_string(),
                });
            }
            let tokens: Vec<String> = parts.map(str::to_owned).collect();
            if tokens.is_empty() {
                return Err(Error::RuleParse {
                    path: path.to_owned(),
                    line: lineno + 1,
                    msg: "pattern needs at least one token".into(),
                });
            }
            patterns.entry(theme).or_default().push(tokens);
        }
        Ok(MentionPatterns { patterns })
    }

    /// Tokens of every pattern of `theme` fully covered by the present
    /// token set; empty when nothing matches.
    fn matched_tokens(
        &self,
        theme: &ThemeLabel,
        present: &BTreeSet<&str>,
    ) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(list) = self.patterns.get(theme) {
            for pattern in list {
                if pattern.iter().all(|tok| present.contains(tok.as_str())) {
                    out.extend(pattern.iter().cloned());
                }
            }
        }
        out
    }
}

/// Per-lattice posterior lookups shared by all themes: word posteriors,
/// class posteriors (strongest member word), and the lattice itself for
/// pair queries.  Lattice words are matched case-folded against the
/// normalized feature texts.
struct LatticeEvidence<'a> {
    lattice: &'a Lattice,
    words: BTreeMap<String, f64>,
    classes: BTreeMap<String, f64>,
}

impl<'a> LatticeEvidence<'a> {
    fn build(lattice: &'a Lattice, config: &FeatureConfig) -> Self {
        let mut words: BTreeMap<String, f64> = BTreeMap::new();
        let mut classes: BTreeMap<String, f64> = BTreeMap::new();
        for word in lattice.words() {
            let lower = word.to_lowercase();
            let p = lattice.word_posterior(word);
            let slot = words.entry(lower.clone()).or_insert(0.0);
            *slot = slot.max(p);
            if let Some(class) = config.class_rules.classify(&lower) {
                let slot = classes.entry(class.to_owned()).or_insert(0.0);
                *slot = slot.max(p);
            }
        }
        LatticeEvidence {
            lattice,
            words,
            classes,
        }
    }

    fn word(&self, w: &str) -> f64 {
        self.words.get(w).copied().unwrap_or(0.0)
    }

    fn posterior(&self, feature: &Feature, window: u32) -> f64 {
        match feature {
            Feature::Unigram(w) => self.word(w),
            Feature::WordClass(c) => self.classes.get(c).copied().unwrap_or(0.0),
            Feature::TurnPair(a, b) => self.lattice.pair_posterior(a, b, window),
            // The positional-classifier bigrams are not part of the
            // re-scoring pool, but score them consistently if configured
            // in: constituent product.
            Feature::Bigram(a, b) | Feature::DistanceBigram(a, b, _) => {
                self.word(a) * self.word(b)
            }
        }
    }

    fn present_tokens(&self) -> BTreeSet<&str> {
        self.words
            .iter()
            .chain(self.classes.iter())
            .filter(|(_, &p)| p > 0.0)
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

fn feature_texts(feature: &Feature) -> [Option<&str>; 2] {
    match feature {
        Feature::Unigram(w) | Feature::WordClass(w) => [Some(w.as_str()), None],
        Feature::Bigram(a, b)
        | Feature::DistanceBigram(a, b, _)
        | Feature::TurnPair(a, b) => [Some(a.as_str()), Some(b.as_str())],
    }
}

/// Per-conversation theme scores and ranking from the evidence lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReScore {
    /// Accumulated `-q log2 q` evidence per theme; always nonnegative.
    pub conditional: BTreeMap<ThemeLabel, f64>,
    /// Ranking score: the accumulated evidence, or prior entropy minus it
    /// in information-gain mode.
    pub score: BTreeMap<ThemeLabel, f64>,
    /// Themes by descending score; ties resolve to inventory order.
    pub ranking: Vec<ThemeLabel>,
}

impl ReScore {
    pub fn new(
        conditional: BTreeMap<ThemeLabel, f64>,
        score: BTreeMap<ThemeLabel, f64>,
        order: &[ThemeLabel],
    ) -> ReScore {
        let mut ranking: Vec<ThemeLabel> = order.to_vec();
        let position: BTreeMap<&ThemeLabel, usize> =
            order.iter().enumerate().map(|(i, t)| (t, i)).collect();
        ranking.sort_by(|a, b| {
            let sa = score.get(a).copied().unwrap_or(f64::NEG_INFINITY);
            let sb = score.get(b).copied().unwrap_or(f64::NEG_INFINITY);
            sb.partial_cmp(&sa)
                .unwrap()
                .then_with(|| position[a].cmp(&position[b]))
        });
        ReScore {
            conditional,
            score,
            ranking,
        }
    }

    /// 1-based rank; `None` for themes outside the inventory.
    pub fn rank_of(&self, theme: &ThemeLabel) -> Option<usize> {
        self.ranking.iter().position(|t| t == theme).map(|i| i + 1)
    }

    pub fn top(&self) -> Option<&ThemeLabel> {
        self.ranking.first()
    }

    pub fn score_of(&self, theme: &ThemeLabel) -> f64 {
        self.score.get(theme).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Scores one lattice against the evidence lists.
pub fn re_score(
    lattice: &Lattice,
    set: &ReFeatureSet,
    features: &FeatureConfig,
    mentions: Option<&MentionPatterns>,
    config: &ReConfig,
) -> ReScore {
    let evidence = LatticeEvidence::build(lattice, features);
    let present = evidence.present_tokens();
    let mut conditional = BTreeMap::new();
    let mut score = BTreeMap::new();
    for theme in &set.themes {
        let boosted = mentions
            .map(|m| m.matched_tokens(theme, &present))
            .unwrap_or_default();
        let mut h = 0.0;
        for entry in &set.per_theme[theme] {
            let mut p = evidence.posterior(&entry.feature, set.window);
            if !boosted.is_empty() {
                let covered = feature_texts(&entry.feature)
                    .into_iter()
                    .flatten()
                    .all(|t| boosted.contains(t));
                if covered {
                    p = (p + config.mention_bonus).min(1.0);
                }
            }
            h += entropy_term(entry.purity * p.clamp(0.0, 1.0));
        }
        conditional.insert(theme.clone(), h);
        let s = if config.use_information_gain {
            set.prior_entropy[theme] - h
        } else {
            h
        };
        score.insert(theme.clone(), s);
    }
    ReScore::new(conditional, score, &set.themes)
}

/// Scores a plain transcript by dressing it as a single-path lattice.
pub fn re_score_conversation(
    conv: &Conversation,
    set: &ReFeatureSet,
    features: &FeatureConfig,
    mentions: Option<&MentionPatterns>,
    config: &ReConfig,
) -> ReScore {
    let lattice = Lattice::degenerate(conv);
    re_score(&lattice, set, features, mentions, config)
}
