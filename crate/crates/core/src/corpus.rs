//! Conversation corpus model: labels, turns, transcripts, word lattices.
//!
//! A corpus is stored as JSON-lines, one conversation per line.  Each
//! conversation is a two-party dialogue already split into speaker turns with
//! tokenized words.  Gold theme annotations are optional per conversation so
//! the same loader serves labeled training data and unlabeled test data.
//!
//! Word lattices are kept in a separate JSON-lines file keyed by conversation
//! id.  A lattice is a DAG of scored word arcs; a degenerate lattice (exactly
//! one arc per transcript token, unit score) can be synthesized from any
//! transcript so downstream consumers never need a "no lattice" code path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conventional name of the reject class: conversations that fit no theme.
pub const TRASH_LABEL: &str = "TRSH";

/// A theme label such as `PV` or `HORR`.  Plain newtype over a string so
/// labels stay cheap to clone and order deterministically.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ThemeLabel(pub String);

impl ThemeLabel {
    pub fn new(s: impl Into<String>) -> Self {
        ThemeLabel(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True when this is the reject class.
    pub fn is_trash(&self) -> bool {
        self.0 == TRASH_LABEL
    }
}

impl fmt::Display for ThemeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ThemeLabel {
    fn from(s: &str) -> Self {
        ThemeLabel(s.to_owned())
    }
}

/// The closed inventory of themes a model is trained over, in a fixed order.
///
/// The order is the tie-breaking order used everywhere a deterministic
/// "first" theme is needed, so it is part of the model contract and is
/// serialized with trained models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeSet {
    labels: Vec<ThemeLabel>,
}

impl ThemeSet {
    /// Builds an inventory from an ordered list of distinct labels.
    pub fn new(labels: Vec<ThemeLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidThemeSet);
        }
        let unique: BTreeSet<&ThemeLabel> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidThemeSet);
        }
        Ok(ThemeSet { labels })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        ThemeSet::new(names.iter().map(|n| ThemeLabel::new(n.as_ref())).collect())
    }

    /// The built-in transit-helpdesk inventory: itinerary, lost-and-found,
    /// schedules, the two transportation-card types, traffic state, fares,
    /// fines, and the reject class.  Used by the default coherence table
    /// and the synthetic generator.
    pub fn standard() -> ThemeSet {
        ThemeSet::from_names(&[
            "ITNR", "OBJT", "HORR", "NVGO", "ETFC", "TARF", "PV", "VGC",
            TRASH_LABEL,
        ])
        .expect("standard inventory is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ThemeLabel> {
        self.labels.iter()
    }

    pub fn labels(&self) -> &[ThemeLabel] {
        &self.labels
    }

    pub fn contains(&self, label: &ThemeLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn index_of(&self, label: &ThemeLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The reject class, when the inventory declares one.
    pub fn trash(&self) -> Option<&ThemeLabel> {
        self.labels.iter().find(|l| l.is_trash())
    }
}

/// Which of the two parties produced a turn.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Caller,
}

/// One speaker turn: who spoke plus the tokenized words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub words: Vec<String>,
}

/// A single two-party conversation.
///
/// `gold` holds the reference annotation (one or more themes); it is empty
/// for unlabeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub gold: BTreeSet<ThemeLabel>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Iterates every token with its 0-based turn index, in transcript order.
    pub fn tokens(&self) -> impl Iterator<Item = (usize, &str)> {
        self.turns
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.words.iter().map(move |w| (i, w.as_str())))
    }

    /// Total token count across all turns.
    pub fn token_count(&self) -> usize {
        self.turns.iter().map(|t| t.words.len()).sum()
    }

    pub fn is_multi_label(&self) -> bool {
        self.gold.len() > 1
    }
}

/// An ordered collection of conversations with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    conversations: Vec<Conversation>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(conversations: Vec<Conversation>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, conv) in conversations.iter().enumerate() {
            if by_id.insert(conv.id.clone(), i).is_some() {
                return Err(Error::DuplicateConversation {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: conv.id.clone(),
                });
            }
        }
        Ok(Corpus {
            conversations,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Conversation> {
        self.conversations.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Conversation> {
        self.by_id.get(id).map(|&i| &self.conversations[i])
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    /// Reads a JSON-lines corpus.  When `require_gold` is set, every record
    /// must carry at least one theme (training/dev splits); otherwise gold is
    /// optional (test splits, live traffic).
    ///
    /// When a `themes` inventory is given, every gold label must belong to it.
    pub fn load(
        path: impl AsRef<Path>,
        themes: Option<&ThemeSet>,
        require_gold: bool,
    ) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);

        let mut conversations = Vec::new();
        let mut by_id = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let conv: Conversation =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.into(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
            if conv.token_count() == 0 {
                return Err(Error::EmptyConversation { id: conv.id });
            }
            if require_gold && conv.gold.is_empty() {
                return Err(Error::MissingGold {
                    path: path.into(),
                    line: lineno,
                    id: conv.id,
                });
            }
            if let Some(themes) = themes {
                if let Some(bad) = conv.gold.iter().find(|l| !themes.contains(l)) {
                    return Err(Error::UnknownTheme {
                        path: path.into(),
                        line: lineno,
                        label: bad.as_str().to_owned(),
                    });
                }
            }
            if by_id.insert(conv.id.clone(), conversations.len()).is_some() {
                return Err(Error::DuplicateConversation {
                    path: path.into(),
                    line: lineno,
                    id: conv.id,
                });
            }
            conversations.push(conv);
        }
        Ok(Corpus {
            conversations,
            by_id,
        })
    }

    /// Writes the corpus as JSON-lines, one conversation per line, in the
    /// corpus's own order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for conv in &self.conversations {
            let line = serde_json::to_string(conv).map_err(|e| Error::MalformedRecord {
                path: path.into(),
                line: 0,
                msg: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Distinct gold labels observed in this corpus, in label order.
    pub fn observed_labels(&self) -> BTreeSet<ThemeLabel> {
        self.conversations
            .iter()
            .flat_map(|c| c.gold.iter().cloned())
            .collect()
    }

    /// Summary statistics used by the `stats` command and sanity checks.
    pub fn stats(&self) -> CorpusStats {
        let mut label_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut vocab: BTreeSet<&str> = BTreeSet::new();
        let mut turns = 0usize;
        let mut tokens = 0usize;
        let mut multi = 0usize;
        for conv in &self.conversations {
            turns += conv.turns.len();
            for t in &conv.turns {
                tokens += t.words.len();
                for w in &t.words {
                    vocab.insert(w);
                }
            }
            if conv.is_multi_label() {
                multi += 1;
            }
            for l in &conv.gold {
                *label_counts.entry(l.as_str().to_owned()).or_default() += 1;
            }
        }
        CorpusStats {
            conversations: self.conversations.len(),
            turns,
            tokens,
            vocabulary: vocab.len(),
            multi_label: multi,
            label_counts,
        }
    }
}

/// Aggregate counts over one corpus split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations: usize,
    pub turns: usize,
    pub tokens: usize,
    pub vocabulary: usize,
    pub multi_label: usize,
    pub label_counts: BTreeMap<String, usize>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "conversations : {}", self.conversations)?;
        writeln!(f, "turns         : {}", self.turns)?;
        writeln!(f, "tokens        : {}", self.tokens)?;
        writeln!(f, "vocabulary    : {}", self.vocabulary)?;
        writeln!(f, "multi-label   : {}", self.multi_label)?;
        writeln!(f, "label counts  :")?;
        for (label, n) in &self.label_counts {
            writeln!(f, "  {label:<8} {n}")?;
        }
        Ok(())
    }
}

/// One scored word arc in a lattice: an edge `from -> to` in a DAG whose
/// nodes are totally ordered, carrying a word, a non-negative score, and the
/// 0-based index of the speaker turn the arc belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeArc {
    pub from: u32,
    pub to: u32,
    pub word: String,
    pub score: f64,
    pub turn: u32,
}

/// A word lattice for one conversation.
///
/// Competing recognition hypotheses for the same stretch of speech share the
/// same `(from, to)` span; the posterior of a word on a span is its share of
/// the total arc score mass on that span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub id: String,
    pub arcs: Vec<LatticeArc>,
}

impl Lattice {
    /// Validates DAG order (`from < to`) and non-negative scores.
    pub fn validate(&self) -> Result<()> {
        for arc in &self.arcs {
            if arc.from >= arc.to {
                return Err(Error::LatticeCycle {
                    id: self.id.clone(),
                    from: arc.from,
                    to: arc.to,
                });
            }
            if arc.score < 0.0 || !arc.score.is_finite() {
                return Err(Error::LatticeNegativeScore {
                    id: self.id.clone(),
                    score: arc.score,
                });
            }
        }
        Ok(())
    }

    /// Builds the trivial lattice for a transcript: one unit-score arc per
    /// token, chained left to right.  On such a lattice every transcript word
    /// has posterior 1 and no other word appears.
    pub fn degenerate(conv: &Conversation) -> Self {
        let mut arcs = Vec::with_capacity(conv.token_count());
        let mut node = 0u32;
        for (turn, word) in conv.tokens() {
            arcs.push(LatticeArc {
                from: node,
                to: node + 1,
                word: word.to_owned(),
                score: 1.0,
                turn: turn as u32,
            });
            node += 1;
        }
        Lattice {
            id: conv.id.clone(),
            arcs,
        }
    }

    /// Every distinct word carried by some arc, in sorted order.
    pub fn words(&self) -> BTreeSet<&str> {
        self.arcs.iter().map(|a| a.word.as_str()).collect()
    }

    /// Posterior of `word`: per span `(from, to)`, the word's share of the
    /// span's total score mass; shares are summed over spans (a word heard
    /// twice accumulates) and the result is clamped to `[0, 1]`.
    pub fn word_posterior(&self, word: &str) -> f64 {
        // (total mass, mass carrying `word`) per span.
        let mut spans: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
        for arc in &self.arcs {
            let entry = spans.entry((arc.from, arc.to)).or_insert((0.0, 0.0));
            entry.0 += arc.score;
            if arc.word == word {
                entry.1 += arc.score;
            }
        }
        let mut total = 0.0;
        for (mass, word_mass) in spans.values() {
            if *word_mass > 0.0 && *mass > 0.0 {
                total += word_mass / mass;
            }
        }
        total.clamp(0.0, 1.0)
    }

    /// Turn indices on which `word` appears on at least one arc.
    pub fn turns_of(&self, word: &str) -> BTreeSet<u32> {
        self.arcs
            .iter()
            .filter(|a| a.word == word)
            .map(|a| a.turn)
            .collect()
    }

    /// Posterior of the ordered pair `(first, second)`: the product of the
    /// word posteriors when the pair can be realized with `second` at most
    /// `window` turns after `first`, else 0.
    pub fn pair_posterior(&self, first: &str, second: &str, window: u32) -> f64 {
        let first_turns = self.turns_of(first);
        if first_turns.is_empty() {
            return 0.0;
        }
        let ordered = self
            .turns_of(second)
            .iter()
            .any(|&t2| first_turns.iter().any(|&t1| t2 >= t1 && t2 - t1 <= window));
        if !ordered {
            return 0.0;
        }
        self.word_posterior(first) * self.word_posterior(second)
    }
}

/// All lattices for a split, keyed by conversation id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatticeSet {
    by_id: BTreeMap<String, Lattice>,
}

impl LatticeSet {
    pub fn new(lattices: Vec<Lattice>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, lat) in lattices.into_iter().enumerate() {
            lat.validate()?;
            let id = lat.id.clone();
            if by_id.insert(id.clone(), lat).is_some() {
                return Err(Error::DuplicateConversation {
                    path: "<memory>".into(),
                    line: i + 1,
                    id,
                });
            }
        }
        Ok(LatticeSet { by_id })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut by_id = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let lat: Lattice =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.into(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
            lat.validate()?;
            let id = lat.id.clone();
            if by_id.insert(id.clone(), lat).is_some() {
                return Err(Error::DuplicateConversation {
                    path: path.into(),
                    line: lineno,
                    id,
                });
            }
        }
        Ok(LatticeSet { by_id })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for lat in self.by_id.values() {
            let line = serde_json::to_string(lat).map_err(|e| Error::MalformedRecord {
                path: path.into(),
                line: 0,
                msg: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn insert(&mut self, lattice: Lattice) {
        self.by_id.insert(lattice.id.clone(), lattice);
    }

    pub fn get(&self, id: &str) -> Option<&Lattice> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// The lattice for `conv`, or the degenerate transcript lattice when the
    /// set holds none for that id.
    pub fn get_or_degenerate(&self, conv: &Conversation) -> Lattice {
        match self.by_id.get(&conv.id) {
            Some(l) => l.clone(),
            None => Lattice::degenerate(conv),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, gold: &[&str], turns: &[(&str, &[&str])]) -> Conversation {
        Conversation {
            id: id.to_owned(),
            gold: gold.iter().map(|s| ThemeLabel::new(*s)).collect(),
            turns: turns
                .iter()
                .map(|(sp, ws)| Turn {
                    speaker: if *sp == "agent" {
                        Speaker::Agent
                    } else {
                        Speaker::Caller
                    },
                    words: ws.iter().map(|w| w.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(vec![
            conv("a", &["PV"], &[("agent", &["hello"]), ("caller", &["ticket", "fine"])]),
            conv("b", &["PV", "VGC"], &[("caller", &["card", "lost"])]),
        ])
        .unwrap();
        corpus.save(&path).unwrap();
        let back = Corpus::load(&path, None, true).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Corpus::new(vec![
            conv("a", &["PV"], &[("agent", &["x"])]),
            conv("a", &["PV"], &[("agent", &["y"])]),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateConversation { .. }));
    }

    #[test]
    fn unknown_label_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        Corpus::new(vec![conv("a", &["ZZZ"], &[("agent", &["x"])])])
            .unwrap()
            .save(&path)
            .unwrap();
        let themes = ThemeSet::from_names(&["PV", "TRSH"]).unwrap();
        let err = Corpus::load(&path, Some(&themes), true).unwrap_err();
        assert!(matches!(err, Error::UnknownTheme { .. }));
    }

    #[test]
    fn missing_gold_rejected_when_required() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        Corpus::new(vec![conv("a", &[], &[("agent", &["x"])])])
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(matches!(
            Corpus::load(&path, None, true).unwrap_err(),
            Error::MissingGold { .. }
        ));
        assert!(Corpus::load(&path, None, false).is_ok());
    }

    #[test]
    fn stats_count_everything() {
        let corpus = Corpus::new(vec![
            conv("a", &["PV"], &[("agent", &["hello", "hello"]), ("caller", &["ticket"])]),
            conv("b", &["PV", "VGC"], &[("caller", &["card"])]),
        ])
        .unwrap();
        let s = corpus.stats();
        assert_eq!(s.conversations, 2);
        assert_eq!(s.turns, 3);
        assert_eq!(s.tokens, 4);
        assert_eq!(s.vocabulary, 3);
        assert_eq!(s.multi_label, 1);
        assert_eq!(s.label_counts["PV"], 2);
        assert_eq!(s.label_counts["VGC"], 1);
    }

    #[test]
    fn degenerate_lattice_gives_unit_posteriors() {
        let c = conv("a", &["PV"], &[("agent", &["go", "north"]), ("caller", &["go"])]);
        let lat = Lattice::degenerate(&c);
        lat.validate().unwrap();
        assert_eq!(lat.arcs.len(), 3);
        // "go" appears on two spans; the sum of shares is clamped to 1.
        assert_eq!(lat.word_posterior("go"), 1.0);
        assert_eq!(lat.word_posterior("north"), 1.0);
        assert_eq!(lat.word_posterior("absent"), 0.0);
        assert_eq!(lat.turns_of("go"), BTreeSet::from([0u32, 1u32]));
    }

    #[test]
    fn competing_arcs_split_posterior_mass() {
        let lat = Lattice {
            id: "x".into(),
            arcs: vec![
                LatticeArc { from: 0, to: 1, word: "cat".into(), score: 3.0, turn: 0 },
                LatticeArc { from: 0, to: 1, word: "hat".into(), score: 1.0, turn: 0 },
                LatticeArc { from: 1, to: 2, word: "sat".into(), score: 2.0, turn: 1 },
            ],
        };
        lat.validate().unwrap();
        assert!((lat.word_posterior("cat") - 0.75).abs() < 1e-12);
        assert!((lat.word_posterior("hat") - 0.25).abs() < 1e-12);
        assert_eq!(lat.word_posterior("sat"), 1.0);
    }

    #[test]
    fn pair_posterior_requires_ordered_window() {
        let lat = Lattice {
            id: "x".into(),
            arcs: vec![
                LatticeArc { from: 0, to: 1, word: "late".into(), score: 1.0, turn: 0 },
                LatticeArc { from: 1, to: 2, word: "fee".into(), score: 1.0, turn: 2 },
                LatticeArc { from: 2, to: 3, word: "far".into(), score: 1.0, turn: 9 },
            ],
        };
        assert_eq!(lat.pair_posterior("late", "fee", 2), 1.0);
        // Too far apart in turns.
        assert_eq!(lat.pair_posterior("late", "far", 2), 0.0);
        // Wrong order.
        assert_eq!(lat.pair_posterior("fee", "late", 2), 0.0);
    }

    #[test]
    fn lattice_validation_rejects_bad_arcs() {
        let cyc = Lattice {
            id: "x".into(),
            arcs: vec![LatticeArc { from: 2, to: 1, word: "w".into(), score: 1.0, turn: 0 }],
        };
        assert!(matches!(cyc.validate().unwrap_err(), Error::LatticeCycle { .. }));
        let neg = Lattice {
            id: "x".into(),
            arcs: vec![LatticeArc { from: 0, to: 1, word: "w".into(), score: -0.5, turn: 0 }],
        };
        assert!(matches!(
            neg.validate().unwrap_err(),
            Error::LatticeNegativeScore { .. }
        ));
    }
}
