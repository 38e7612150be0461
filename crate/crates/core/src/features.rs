//! Feature extraction and discriminative weighting.
//!
//! The unit shared by all four classifiers is the *feature*: a unigram, an
//! adjacent bigram, a distance bigram (two words separated by one or more
//! intermediate words, up to a configured gap), or a word-class token such as
//! `TIME` produced by pattern rules.  Tokens are case-folded and stop-listed
//! *before* n-grams are formed, so a stop word never blocks adjacency.
//!
//! Each feature is scored on the training split by how concentrated its
//! conversations are on few themes (a sum-of-squared-shares purity in
//! `[1/|themes|, 1]`) and how rare it is overall (natural-log inverse
//! document frequency).  Per-theme feature weights combine document
//! frequency, squared idf and squared purity; the resulting weight vectors
//! (and their norms) are what the cosine and density classifiers consume.
//!
//! The density classifier additionally needs features laid out on a
//! positional axis: a conversation of `N` kept tokens spans `2N - 1`
//! positions, with the k-th unigram at position `2k - 1` (1-based), the k-th
//! adjacent bigram between its words at `2k`, and the k-th gap-1 distance
//! bigram on the intermediate word's position `2k + 1`.  Distance bigrams
//! with larger gaps have no midpoint slot of their own and are anchored on
//! their left word's position.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Conversation, Corpus, ThemeLabel, ThemeSet};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// What kind of observation a [`Feature`] is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureKind {
    Unigram,
    Bigram,
    DistanceBigram,
    WordClass,
    TurnPair,
}

/// A single observable unit: one or two (possibly class-mapped) tokens.
///
/// `DistanceBigram { gap }` counts the tokens *between* the two parts, so
/// `gap = 1` means exactly one intermediate token.  `TurnPair` is an
/// ordered word pair co-occurring within a bounded turn window — the
/// long-range evidence used by lattice re-scoring rather than by the
/// positional classifiers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    Unigram(String),
    WordClass(String),
    Bigram(String, String),
    DistanceBigram(String, String, u8),
    TurnPair(String, String),
}

impl Feature {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Feature::Unigram(_) => FeatureKind::Unigram,
            Feature::WordClass(_) => FeatureKind::WordClass,
            Feature::Bigram(..) => FeatureKind::Bigram,
            Feature::DistanceBigram(..) => FeatureKind::DistanceBigram,
            Feature::TurnPair(..) => FeatureKind::TurnPair,
        }
    }

    pub fn gap(&self) -> u8 {
        match self {
            Feature::DistanceBigram(_, _, g) => *g,
            _ => 0,
        }
    }

    /// Compact text encoding used for serialization and map keys:
    /// `u:w`, `c:TIME`, `b:w1 w2`, `d2:w1 w2`, `p:w1 w2`.  Tokens never
    /// contain whitespace (tokenization splits on it), so the space
    /// separator is unambiguous.
    pub fn encode(&self) -> String {
        match self {
            Feature::Unigram(w) => format!("u:{w}"),
            Feature::WordClass(c) => format!("c:{c}"),
            Feature::Bigram(a, b) => format!("b:{a} {b}"),
            Feature::DistanceBigram(a, b, g) => format!("d{g}:{a} {b}"),
            Feature::TurnPair(a, b) => format!("p:{a} {b}"),
        }
    }

    pub fn decode(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("feature `{s}` lacks a kind prefix"))?;
        let two = |rest: &str| -> std::result::Result<(String, String), String> {
            rest.split_once(' ')
                .map(|(a, b)| (a.to_owned(), b.to_owned()))
                .ok_or_else(|| format!("feature `{s}` needs two parts"))
        };
        match kind {
            "u" => Ok(Feature::Unigram(rest.to_owned())),
            "c" => Ok(Feature::WordClass(rest.to_owned())),
            "b" => {
                let (a, b) = two(rest)?;
                Ok(Feature::Bigram(a, b))
            }
            "p" => {
                let (a, b) = two(rest)?;
                Ok(Feature::TurnPair(a, b))
            }
            _ if kind.starts_with('d') => {
                let gap: u8 = kind[1..]
                    .parse()
                    .map_err(|_| format!("feature `{s}` has a malformed gap"))?;
                let (a, b) = two(rest)?;
                Ok(Feature::DistanceBigram(a, b, gap))
            }
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl Serialize for Feature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for Feature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Feature::decode(&s).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Token normalization
// ---------------------------------------------------------------------------

/// Pattern rules mapping surface tokens to class tokens (`TIME`, `PRICE`, …).
///
/// Each rule is a regular expression matched against the *whole* token
/// (anchors are added automatically); the first matching rule wins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct WordClassRules {
    rules: Vec<(String, String, Regex)>, // (class, pattern, compiled)
}

impl WordClassRules {
    pub fn new(rules: Vec<(String, String)>) -> Result<Self> {
        let mut compiled = Vec::with_capacity(rules.len());
        for (class, pattern) in rules {
            let re = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| {
                Error::InvalidConfig(format!("class rule `{class}`: {e}"))
            })?;
            compiled.push((class, pattern, re));
        }
        Ok(WordClassRules { rules: compiled })
    }

    /// Loads rules from a text file: one `CLASS PATTERN` pair per line,
    /// blank lines and `#` comments ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (class, pattern) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Error::RuleParse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: "expected `CLASS PATTERN`".into(),
                }
            })?;
            rules.push((class.to_owned(), pattern.trim().to_owned()));
        }
        WordClassRules::new(rules)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// The class for `token`, if any rule matches.
    pub fn classify(&self, token: &str) -> Option<&str> {
        self.rules
            .iter()
            .find(|(_, _, re)| re.is_match(token))
            .map(|(class, _, _)| class.as_str())
    }
}

impl TryFrom<Vec<(String, String)>> for WordClassRules {
    type Error = String;

    fn try_from(v: Vec<(String, String)>) -> std::result::Result<Self, String> {
        WordClassRules::new(v).map_err(|e| e.to_string())
    }
}

impl From<WordClassRules> for Vec<(String, String)> {
    fn from(r: WordClassRules) -> Self {
        r.rules.into_iter().map(|(c, p, _)| (c, p)).collect()
    }
}

/// Everything token handling depends on: stop list, class rules, and the
/// largest distance-bigram gap to extract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub stop_list: BTreeSet<String>,
    pub class_rules: WordClassRules,
    pub max_gap: u8,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            stop_list: BTreeSet::new(),
            class_rules: WordClassRules::default(),
            max_gap: 2,
        }
    }
}

impl FeatureConfig {
    /// Reads a stop list: one token per line, `#` comments ignored.
    pub fn load_stop_list(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_lowercase())
            .collect())
    }
}

/// A token after case folding, stop-listing and class mapping, with the turn
/// it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedToken {
    pub text: String,
    pub is_class: bool,
    pub turn: u32,
}

impl NormalizedToken {
    pub(crate) fn unigram(&self) -> Feature {
        if self.is_class {
            Feature::WordClass(self.text.clone())
        } else {
            Feature::Unigram(self.text.clone())
        }
    }
}

/// Case-folds, drops stop words, and applies class rules, preserving order.
pub fn normalize(conv: &Conversation, config: &FeatureConfig) -> Vec<NormalizedToken> {
    let mut out = Vec::with_capacity(conv.token_count());
    for (turn, word) in conv.tokens() {
        let lower = word.to_lowercase();
        if config.stop_list.contains(&lower) {
            continue;
        }
        let tok = match config.class_rules.classify(&lower) {
            Some(class) => NormalizedToken {
                text: class.to_owned(),
                is_class: true,
                turn: turn as u32,
            },
            None => NormalizedToken {
                text: lower,
                is_class: false,
                turn: turn as u32,
            },
        };
        out.push(tok);
    }
    out
}

/// Emits every feature occurrence of the token stream, in stream order:
/// unigrams, adjacent bigrams, and distance bigrams with 1..=`max_gap`
/// intermediate tokens.
fn each_feature(tokens: &[NormalizedToken], max_gap: u8, mut visit: impl FnMut(Feature)) {
    for (i, tok) in tokens.iter().enumerate() {
        visit(tok.unigram());
        if i + 1 < tokens.len() {
            visit(Feature::Bigram(
                tok.text.clone(),
                tokens[i + 1].text.clone(),
            ));
        }
        for gap in 1..=max_gap as usize {
            if let Some(right) = tokens.get(i + 1 + gap) {
                visit(Feature::DistanceBigram(
                    tok.text.clone(),
                    right.text.clone(),
                    gap as u8,
                ));
            }
        }
    }
}

/// Occurrence counts of every feature in one conversation.
pub fn feature_counts(
    tokens: &[NormalizedToken],
    max_gap: u8,
) -> BTreeMap<Feature, u32> {
    let mut counts = BTreeMap::new();
    each_feature(tokens, max_gap, |f| *counts.entry(f).or_insert(0) += 1);
    counts
}

// ---------------------------------------------------------------------------
// Vocabulary and statistics
// ---------------------------------------------------------------------------

/// The training-split vocabulary: kept word forms, the class alphabet, and
/// the full universe of observed features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: BTreeSet<String>,
    pub classes: BTreeSet<String>,
    pub universe: BTreeSet<Feature>,
}

/// Enumerates the vocabulary and feature universe of the training split.
pub fn build_vocabulary(train: &Corpus, config: &FeatureConfig) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::EmptyTrainCorpus);
    }
    let mut words = BTreeSet::new();
    let mut classes = BTreeSet::new();
    let mut universe = BTreeSet::new();
    for conv in train.iter() {
        let tokens = normalize(conv, config);
        for tok in &tokens {
            if tok.is_class {
                classes.insert(tok.text.clone());
            } else {
                words.insert(tok.text.clone());
            }
        }
        each_feature(&tokens, config.max_gap, |f| {
            universe.insert(f);
        });
    }
    Ok(Vocabulary {
        words,
        classes,
        universe,
    })
}

/// Per-feature training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// Number of train conversations containing the feature.
    pub df_c: u32,
    /// Number of train conversations annotated with each theme that contain
    /// the feature.  A conversation with two gold themes counts once per
    /// theme, so these need not sum to `df_c`.
    pub df_t: BTreeMap<ThemeLabel, u32>,
    /// Sum of squared per-theme shares.  Over single-label conversations
    /// this lies in `[1/|themes|, 1]`, hitting 1 when every containing
    /// conversation has the same single theme; multi-label counting (once
    /// per annotated theme) can push it above 1.
    pub gini: f64,
    /// `ln(train size / df_c)`: 0 for a feature present everywhere.
    pub idf: f64,
}

/// Statistics for every feature of the training universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub train_size: usize,
    pub stats: BTreeMap<Feature, FeatureStats>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn get(&self, f: &Feature) -> Option<&FeatureStats> {
        self.stats.get(f)
    }
}

/// Counts document frequencies over the training split and derives purity
/// and idf for every observed feature.
///
/// The per-conversation work (normalization, feature enumeration) is done in
/// parallel; counts are merged into ordered maps, so the result does not
/// depend on conversation order.
pub fn compute_stats(train: &Corpus, config: &FeatureConfig) -> Result<FeatureTable> {
    if train.is_empty() {
        return Err(Error::EmptyTrainCorpus);
    }

    // Distinct features and gold labels per conversation.
    let per_conv: Vec<(BTreeSet<Feature>, &BTreeSet<ThemeLabel>)> = train
        .conversations()
        .par_iter()
        .map(|conv| {
            let tokens = normalize(conv, config);
            let mut distinct = BTreeSet::new();
            each_feature(&tokens, config.max_gap, |f| {
                distinct.insert(f);
            });
            (distinct, &conv.gold)
        })
        .collect();

    let mut df_c: BTreeMap<Feature, u32> = BTreeMap::new();
    let mut df_t: BTreeMap<Feature, BTreeMap<ThemeLabel, u32>> = BTreeMap::new();
    for (features, gold) in per_conv {
        for f in features {
            *df_c.entry(f.clone()).or_insert(0) += 1;
            let themes = df_t.entry(f).or_default();
            for t in gold.iter() {
                *themes.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }

    let n = train.len() as f64;
    let mut stats = BTreeMap::new();
    for (f, dfc) in df_c {
        let themes = df_t.remove(&f).unwrap_or_default();
        let gini = themes
            .values()
            .map(|&c| {
                let share = c as f64 / dfc as f64;
                share * share
            })
            .sum::<f64>();
        let idf = (n / dfc as f64).ln();
        stats.insert(
            f,
            FeatureStats {
                df_c: dfc,
                df_t: themes,
                gini,
                idf,
            },
        );
    }
    Ok(FeatureTable {
        train_size: train.len(),
        stats,
    })
}

/// Keeps features whose purity and document frequency clear the floors.
pub fn select_features(
    table: &FeatureTable,
    purity_floor: f64,
    df_floor: u32,
) -> Result<FeatureTable> {
    let stats: BTreeMap<Feature, FeatureStats> = table
        .stats
        .iter()
        .filter(|(_, s)| s.gini >= purity_floor && s.df_c >= df_floor)
        .map(|(f, s)| (f.clone(), s.clone()))
        .collect();
    if stats.is_empty() {
        return Err(Error::EmptyFeatureSet {
            purity_floor,
            df_floor: df_floor as usize,
        });
    }
    Ok(FeatureTable {
        train_size: table.train_size,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Theme weights
// ---------------------------------------------------------------------------

/// Per-theme discriminative feature weights plus the per-feature scalars
/// needed to weight a fresh conversation the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeWeightTable {
    themes: Vec<ThemeLabel>,
    weights: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>>,
    norms: BTreeMap<ThemeLabel, f64>,
    feature_idf: BTreeMap<Feature, f64>,
    feature_gini: BTreeMap<Feature, f64>,
}

impl ThemeWeightTable {
    /// Assembles a table from explicit vectors; norms are derived.  Intended
    /// for tests and synthetic fixtures, where exact vector geometry matters
    /// more than how the weights were estimated.
    #[cfg(test)]
    pub(crate) fn from_raw(
        themes: Vec<ThemeLabel>,
        weights: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>>,
        feature_idf: BTreeMap<Feature, f64>,
        feature_gini: BTreeMap<Feature, f64>,
    ) -> Self {
        let norms = themes
            .iter()
            .map(|t| {
                let norm = weights
                    .get(t)
                    .map(|v| v.values().map(|w| w * w).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                (t.clone(), norm)
            })
            .collect();
        ThemeWeightTable {
            themes,
            weights,
            norms,
            feature_idf,
            feature_gini,
        }
    }

    /// Theme inventory, in tie-breaking order.
    pub fn themes(&self) -> &[ThemeLabel] {
        &self.themes
    }

    /// The weight of `f` for theme `t` (0 when absent).
    pub fn weight(&self, t: &ThemeLabel, f: &Feature) -> f64 {
        self.weights
            .get(t)
            .and_then(|m| m.get(f))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn theme_vector(&self, t: &ThemeLabel) -> Option<&BTreeMap<Feature, f64>> {
        self.weights.get(t)
    }

    /// Euclidean norm of the theme's weight vector (0 for an unseen theme).
    pub fn norm(&self, t: &ThemeLabel) -> f64 {
        self.norms.get(t).copied().unwrap_or(0.0)
    }

    pub fn idf(&self, f: &Feature) -> f64 {
        self.feature_idf.get(f).copied().unwrap_or(0.0)
    }

    pub fn gini(&self, f: &Feature) -> f64 {
        self.feature_gini.get(f).copied().unwrap_or(0.0)
    }

    pub fn contains_feature(&self, f: &Feature) -> bool {
        self.feature_idf.contains_key(f)
    }

    pub fn features(&self) -> impl Iterator<Item = &Feature> {
        self.feature_idf.keys()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_idf.len()
    }
}

/// Builds per-theme weights `df_t(f) · idf(f)² · purity(f)²` over a
/// (typically already filtered) feature table.
pub fn theme_weights(table: &FeatureTable, themes: &ThemeSet) -> ThemeWeightTable {
    let mut weights: BTreeMap<ThemeLabel, BTreeMap<Feature, f64>> = BTreeMap::new();
    let mut feature_idf = BTreeMap::new();
    let mut feature_gini = BTreeMap::new();
    for (f, s) in &table.stats {
        feature_idf.insert(f.clone(), s.idf);
        feature_gini.insert(f.clone(), s.gini);
        for (t, &dft) in &s.df_t {
            if !themes.contains(t) {
                continue;
            }
            let w = dft as f64 * s.idf * s.idf * s.gini * s.gini;
            if w > 0.0 {
                weights.entry(t.clone()).or_default().insert(f.clone(), w);
            }
        }
    }
    let norms = themes
        .iter()
        .map(|t| {
            let norm = weights
                .get(t)
                .map(|v| v.values().map(|w| w * w).sum::<f64>().sqrt())
                .unwrap_or(0.0);
            (t.clone(), norm)
        })
        .collect();
    ThemeWeightTable {
        themes: themes.labels().to_vec(),
        weights,
        norms,
        feature_idf,
        feature_gini,
    }
}

// ---------------------------------------------------------------------------
// Positional layout
// ---------------------------------------------------------------------------

/// A conversation unrolled onto the density axis: `n = 2N - 1` positions for
/// `N` kept tokens, each holding the features anchored there.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalSequence {
    pub conversation_id: String,
    pub n: usize,
    pub bundles: Vec<Vec<Feature>>,
}

/// Lays the token stream out on positions.  Only features in `selected`
/// (all, when `None`) are kept; positions always exist regardless, so the
/// axis length depends only on the token count.
pub fn positional_sequence(
    conversation_id: &str,
    tokens: &[NormalizedToken],
    max_gap: u8,
    selected: Option<&BTreeSet<Feature>>,
) -> PositionalSequence {
    let big_n = tokens.len();
    let n = if big_n == 0 { 0 } else { 2 * big_n - 1 };
    let mut bundles = vec![Vec::new(); n];
    let keep = |f: &Feature| selected.map(|s| s.contains(f)).unwrap_or(true);

    for (k0, tok) in tokens.iter().enumerate() {
        // 1-based token index k; unigram position 2k-1 -> 0-based 2k-2.
        let k = k0 + 1;
        let uni = tok.unigram();
        if keep(&uni) {
            bundles[2 * k - 2].push(uni);
        }
        if let Some(next) = tokens.get(k0 + 1) {
            let f = Feature::Bigram(tok.text.clone(), next.text.clone());
            if keep(&f) {
                // k-th bigram sits between its words, position 2k.
                bundles[2 * k - 1].push(f);
            }
        }
        for gap in 1..=max_gap as usize {
            if let Some(right) = tokens.get(k0 + 1 + gap) {
                let f =
                    Feature::DistanceBigram(tok.text.clone(), right.text.clone(), gap as u8);
                if keep(&f) {
                    let pos = if gap == 1 {
                        // On the intermediate word: position 2k+1.
                        2 * k
                    } else {
                        // No single midpoint slot exists; anchor on the left
                        // word's own position.
                        2 * k - 2
                    };
                    bundles[pos].push(f);
                }
            }
        }
    }
    PositionalSequence {
        conversation_id: conversation_id.to_owned(),
        n,
        bundles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Turn};
    use proptest::prelude::*;

    fn conv(id: &str, gold: &[&str], words: &[&str]) -> Conversation {
        Conversation {
            id: id.to_owned(),
            gold: gold.iter().map(|s| ThemeLabel::new(*s)).collect(),
            turns: vec![Turn {
                speaker: Speaker::Agent,
                words: words.iter().map(|w| w.to_string()).collect(),
            }],
        }
    }

    fn config_with_stop(stop: &[&str]) -> FeatureConfig {
        FeatureConfig {
            stop_list: stop.iter().map(|s| s.to_string()).collect(),
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn stop_words_removed_before_ngrams() {
        let train = Corpus::new(vec![conv("x", &["PV"], &["a", "b", "c"])]).unwrap();
        let vocab = build_vocabulary(&train, &config_with_stop(&["a"])).unwrap();
        assert_eq!(
            vocab.words,
            BTreeSet::from(["b".to_string(), "c".to_string()])
        );
        assert!(vocab.universe.contains(&Feature::Unigram("b".into())));
        assert!(vocab.universe.contains(&Feature::Unigram("c".into())));
        // b and c become adjacent once a is dropped.
        assert!(vocab
            .universe
            .contains(&Feature::Bigram("b".into(), "c".into())));
        assert!(!vocab.universe.iter().any(|f| f.encode().contains('a')));
    }

    #[test]
    fn class_rules_replace_surface_forms() {
        let mut config = FeatureConfig::default();
        config.class_rules =
            WordClassRules::new(vec![("TIME".into(), r"\d{1,2}h\d{2}".into())]).unwrap();
        let train = Corpus::new(vec![conv("x", &["PV"], &["at", "12h30"])]).unwrap();
        let vocab = build_vocabulary(&train, &config).unwrap();
        assert_eq!(vocab.classes, BTreeSet::from(["TIME".to_string()]));
        assert!(vocab.universe.contains(&Feature::WordClass("TIME".into())));
        assert!(!vocab.universe.contains(&Feature::Unigram("12h30".into())));
        assert!(vocab
            .universe
            .contains(&Feature::Bigram("at".into(), "TIME".into())));
    }

    #[test]
    fn distance_bigrams_respect_max_gap() {
        let train =
            Corpus::new(vec![conv("x", &["PV"], &["w1", "w2", "w3", "w4", "w5"])]).unwrap();
        let vocab = build_vocabulary(&train, &FeatureConfig::default()).unwrap();
        assert!(vocab
            .universe
            .contains(&Feature::DistanceBigram("w1".into(), "w3".into(), 1)));
        assert!(vocab
            .universe
            .contains(&Feature::DistanceBigram("w1".into(), "w4".into(), 2)));
        // Three intermediate words exceeds the default gap of 2.
        assert!(!vocab
            .universe
            .iter()
            .any(|f| matches!(f, Feature::DistanceBigram(a, b, _) if a == "w1" && b == "w5")));
    }

    #[test]
    fn purity_extremes_and_hand_case() {
        // All containing conversations share one theme -> purity 1.
        let train = Corpus::new(vec![
            conv("a", &["ITNR"], &["f"]),
            conv("b", &["ITNR"], &["f"]),
            conv("c", &["ITNR"], &["f"]),
        ])
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let s = table.get(&Feature::Unigram("f".into())).unwrap();
        assert_eq!(s.df_c, 3);
        assert!((s.gini - 1.0).abs() < 1e-12);

        // Spread evenly over 9 themes -> purity 1/9.
        let themes = ["t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"];
        let train = Corpus::new(
            themes
                .iter()
                .enumerate()
                .map(|(i, t)| conv(&format!("c{i}"), &[t], &["f"]))
                .collect(),
        )
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let s = table.get(&Feature::Unigram("f".into())).unwrap();
        assert!((s.gini - 1.0 / 9.0).abs() < 1e-12);

        // Shares (2/4, 1/4, 1/4) -> 0.375.
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f"]),
            conv("b", &["t1"], &["f"]),
            conv("c", &["t2"], &["f"]),
            conv("d", &["t3"], &["f"]),
        ])
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let s = table.get(&Feature::Unigram("f".into())).unwrap();
        assert!((s.gini - 0.375).abs() < 1e-12);
    }

    #[test]
    fn weight_formula_hand_check() {
        // 4 conversations, feature in 2 of them, both theme t1 -> purity 1,
        // idf = ln(2), df_t = 2, weight = 2 · ln(2)² ... scaled by idf of
        // ln(4/2) = ln 2.  Use a case with idf = ln 4 instead: feature in 1
        // of 4 conversations.
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f", "f"]),
            conv("b", &["t1"], &["g"]),
            conv("c", &["t2"], &["g"]),
            conv("d", &["t2"], &["g"]),
        ])
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let weights = theme_weights(&table, &themes);
        let f = Feature::Unigram("f".into());
        let idf = (4.0f64).ln();
        // df_t = 1 here; check exact formula.
        let expected = 1.0 * idf * idf * 1.0;
        assert!((weights.weight(&ThemeLabel::new("t1"), &f) - expected).abs() < 1e-12);
        assert_eq!(weights.weight(&ThemeLabel::new("t2"), &f), 0.0);

        // df_t = 2, idf = ln 4, purity 1 -> 2·ln(4)² ≈ 3.844.
        let w = 2.0 * idf * idf;
        assert!((w - 3.8436241113456113).abs() < 1e-10);
    }

    #[test]
    fn ubiquitous_feature_has_zero_weight() {
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["f"]),
            conv("b", &["t2"], &["f"]),
        ])
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let s = table.get(&Feature::Unigram("f".into())).unwrap();
        assert_eq!(s.idf, 0.0);
        let themes = ThemeSet::from_names(&["t1", "t2"]).unwrap();
        let weights = theme_weights(&table, &themes);
        assert_eq!(weights.weight(&ThemeLabel::new("t1"), &Feature::Unigram("f".into())), 0.0);
    }

    #[test]
    fn selection_floors() {
        let train = Corpus::new(vec![
            conv("a", &["t1"], &["pure", "mixed"]),
            conv("b", &["t2"], &["mixed"]),
        ])
        .unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        // purity_floor 0, df_floor 1 keeps everything.
        let all = select_features(&table, 0.0, 1).unwrap();
        assert_eq!(all.len(), table.len());
        // purity_floor 1 keeps only single-theme features.
        let pure = select_features(&table, 1.0, 1).unwrap();
        assert!(pure.stats.contains_key(&Feature::Unigram("pure".into())));
        assert!(!pure.stats.contains_key(&Feature::Unigram("mixed".into())));
        // Impossible floors -> error.
        assert!(matches!(
            select_features(&table, 1.1, 1).unwrap_err(),
            Error::EmptyFeatureSet { .. }
        ));
    }

    #[test]
    fn selection_keeps_planted_words_and_drops_uniform_filler() {
        // Nine themes, two conversations each.  Every conversation carries
        // its theme's own word twice plus a filler word shared by all.
        let theme_names: Vec<String> =
            (0..9).map(|i| format!("t{i}")).collect();
        let mut convs = Vec::new();
        for (i, t) in theme_names.iter().enumerate() {
            for j in 0..2 {
                let word = format!("planted{i}");
                convs.push(conv(
                    &format!("{t}-{j}"),
                    &[t.as_str()],
                    &[word.as_str(), "filler", word.as_str()],
                ));
            }
        }
        let train = Corpus::new(convs).unwrap();
        let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
        let kept = select_features(&table, 0.2, 2).unwrap();
        for i in 0..9 {
            let f = Feature::Unigram(format!("planted{i}"));
            assert!(kept.stats.contains_key(&f), "planted{i} dropped");
        }
        // The filler sits in every conversation: each theme's share is 1/9,
        // so its purity is 9·(1/9)² = 1/9 < 0.2.
        assert!(!kept
            .stats
            .contains_key(&Feature::Unigram("filler".into())));
    }

    #[test]
    fn positional_layout_three_tokens() {
        let config = FeatureConfig::default();
        let c = conv("x", &[], &["w1", "w2", "w3"]);
        let tokens = normalize(&c, &config);
        let seq = positional_sequence("x", &tokens, config.max_gap, None);
        assert_eq!(seq.n, 5);
        assert_eq!(seq.bundles[0], vec![Feature::Unigram("w1".into())]);
        assert_eq!(
            seq.bundles[1],
            vec![Feature::Bigram("w1".into(), "w2".into())]
        );
        // Position 3 (index 2): second unigram plus the gap-1 pair around it.
        let at_p3: BTreeSet<Feature> = seq.bundles[2].iter().cloned().collect();
        assert_eq!(
            at_p3,
            BTreeSet::from([
                Feature::Unigram("w2".into()),
                Feature::DistanceBigram("w1".into(), "w3".into(), 1)
            ])
        );
        assert_eq!(
            seq.bundles[3],
            vec![Feature::Bigram("w2".into(), "w3".into())]
        );
        assert_eq!(seq.bundles[4], vec![Feature::Unigram("w3".into())]);
    }

    #[test]
    fn positional_layout_edge_cases() {
        let config = FeatureConfig::default();
        let c = conv("x", &[], &["only"]);
        let tokens = normalize(&c, &config);
        let seq = positional_sequence("x", &tokens, config.max_gap, None);
        assert_eq!(seq.n, 1);
        assert_eq!(seq.bundles[0], vec![Feature::Unigram("only".into())]);

        // Features outside the selected set leave their positions empty.
        let c = conv("x", &[], &["w1", "w2"]);
        let tokens = normalize(&c, &config);
        let empty_sel = BTreeSet::new();
        let seq = positional_sequence("x", &tokens, config.max_gap, Some(&empty_sel));
        assert_eq!(seq.n, 3);
        assert!(seq.bundles.iter().all(|b| b.is_empty()));
    }

    #[test]
    fn feature_encoding_round_trips() {
        for f in [
            Feature::Unigram("hello".into()),
            Feature::WordClass("TIME".into()),
            Feature::Bigram("a".into(), "b".into()),
            Feature::DistanceBigram("a".into(), "b".into(), 2),
        ] {
            assert_eq!(Feature::decode(&f.encode()).unwrap(), f);
        }
        assert!(Feature::decode("nonsense").is_err());
    }

    proptest! {
        /// Purity stays within its mathematical bounds and bundle counts
        /// follow the 2N-1 layout for any token stream.
        #[test]
        fn purity_bounds(labels in proptest::collection::vec(0usize..4, 1..30)) {
            let themes = ["t0", "t1", "t2", "t3"];
            let train = Corpus::new(
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| conv(&format!("c{i}"), &[themes[l]], &["f"]))
                    .collect(),
            )
            .unwrap();
            let table = compute_stats(&train, &FeatureConfig::default()).unwrap();
            let s = table.get(&Feature::Unigram("f".into())).unwrap();
            prop_assert!(s.gini >= 1.0 / themes.len() as f64 - 1e-12);
            prop_assert!(s.gini <= 1.0 + 1e-12);
        }

        #[test]
        fn bundle_counts_follow_layout(n_tokens in 1usize..40) {
            let words: Vec<String> = (0..n_tokens).map(|i| format!("w{i}")).collect();
            let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
            let c = conv("x", &[], &refs);
            let config = FeatureConfig::default();
            let tokens = normalize(&c, &config);
            let seq = positional_sequence("x", &tokens, config.max_gap, None);
            prop_assert_eq!(seq.n, 2 * n_tokens - 1);
            let count = |kind: FeatureKind| {
                seq.bundles
                    .iter()
                    .flatten()
                    .filter(|f| f.kind() == kind)
                    .count()
            };
            prop_assert_eq!(count(FeatureKind::Unigram), n_tokens);
            prop_assert_eq!(count(FeatureKind::Bigram), n_tokens.saturating_sub(1));
            let gap1 = seq
                .bundles
                .iter()
                .flatten()
                .filter(|f| f.kind() == FeatureKind::DistanceBigram && f.gap() == 1)
                .count();
            prop_assert_eq!(gap1, n_tokens.saturating_sub(2));
        }
    }
}
