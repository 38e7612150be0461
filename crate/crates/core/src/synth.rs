//! Synthetic corpus and lattice generator.
//!
//! Real call-centre transcripts cannot be redistributed, so end-to-end
//! tests run on generated two-party conversations instead.  Each theme
//! owns a disjoint planted vocabulary; conversations mix planted words
//! with shared filler, multi-theme conversations splice a secondary theme
//! in (as a contiguous block or diffusely), and a substitution noise
//! model simulates recognition errors: the emitted transcript swaps a
//! word for an acoustic confusable with probability `noise`, while the
//! lattice keeps the true word at posterior `1 - noise` alongside the
//! confusables.  Generation is single-threaded and fully determined by
//! the seed.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Conversation, Corpus, Lattice, LatticeArc, LatticeSet, Speaker, ThemeLabel,
    ThemeSet, Turn,
};
use crate::error::{Error, Result};

/// How a secondary theme is mixed into a two-theme conversation.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// The secondary theme occupies one contiguous block of turns at the
    /// end — the "handled then moves on" shape.
    #[default]
    Segmented,
    /// Every turn flips a coin — secondary mentions scattered throughout.
    Diffuse,
}

/// Full description of a synthetic data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub seed: u64,
    /// Theme inventory; the reject label hosts off-domain conversations.
    pub themes: ThemeSet,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Planted words per theme (pairwise disjoint across themes).
    pub vocab_per_theme: usize,
    /// Shared topic-neutral words.
    pub filler_vocab: usize,
    /// Acoustic-confusable pool used by the noise model.
    pub confusion_vocab: usize,
    /// Probability that a token is filler rather than planted.
    pub filler_rate: f64,
    /// Inclusive turn-count range per conversation.
    pub turns: (usize, usize),
    /// Inclusive token-count range per turn.
    pub tokens_per_turn: (usize, usize),
    /// Fraction of conversations carrying two themes.
    pub multi_prob: f64,
    /// Fraction of off-domain (reject-labeled) conversations.
    pub trash_prob: f64,
    /// Theme pairs eligible for two-theme conversations.
    pub pair_pool: Vec<(ThemeLabel, ThemeLabel)>,
    /// Per-conversation share of turns given to the secondary theme,
    /// drawn uniformly from this range; small shares plant hypotheses
    /// that miss the secondary theme.
    pub secondary_share: (f64, f64),
    pub interleave: Interleave,
    /// Word substitution rate of the emitted transcript.
    pub noise: f64,
    /// Competing words per lattice span when noise is active.
    pub confusion_depth: usize,
}

impl Default for GeneratorSpec {
    /// The bundled benchmark: the standard nine-theme inventory,
    /// 600/100/300 conversations with one in five carrying two themes,
    /// and a 30% substitution rate.
    fn default() -> Self {
        let pair = |a: &str, b: &str| (ThemeLabel::new(a), ThemeLabel::new(b));
        GeneratorSpec {
            seed: 41,
            themes: ThemeSet::standard(),
            train: 600,
            dev: 100,
            test: 300,
            vocab_per_theme: 40,
            filler_vocab: 150,
            confusion_vocab: 80,
            filler_rate: 0.35,
            turns: (8, 16),
            tokens_per_turn: (4, 9),
            multi_prob: 0.2056,
            trash_prob: 0.06,
            pair_pool: vec![
                pair("NVGO", "TARF"),
                pair("ITNR", "HORR"),
                pair("ITNR", "NVGO"),
                pair("ITNR", "ETFC"),
                pair("NVGO", "OBJT"),
            ],
            secondary_share: (0.15, 0.45),
            interleave: Interleave::Segmented,
            noise: 0.3,
            confusion_depth: 3,
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidGeneratorSpec(msg.to_string()));
        let content: Vec<&ThemeLabel> =
            self.themes.iter().filter(|t| !t.is_trash()).collect();
        if content.len() < 2 {
            return fail("need at least two non-reject themes");
        }
        if self.trash_prob > 0.0 && self.themes.trash().is_none() {
            return fail("trash_prob > 0 but the inventory has no reject label");
        }
        if self.vocab_per_theme == 0 || self.filler_vocab == 0 {
            return fail("empty vocabulary");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1]");
        }
        if self.noise > 0.0
            && (self.confusion_depth == 0 || self.confusion_vocab < self.confusion_depth)
        {
            return fail("confusion pool smaller than confusion depth");
        }
        if !(0.0..=1.0).contains(&self.filler_rate) {
            return fail("filler_rate must lie in [0, 1]");
        }
        if self.multi_prob < 0.0
            || self.trash_prob < 0.0
            || self.multi_prob + self.trash_prob > 1.0
        {
            return fail("multi_prob + trash_prob must lie in [0, 1]");
        }
        if self.turns.0 == 0 || self.turns.0 > self.turns.1 {
            return fail("invalid turn range");
        }
        if self.tokens_per_turn.0 == 0 || self.tokens_per_turn.0 > self.tokens_per_turn.1
        {
            return fail("invalid tokens-per-turn range");
        }
        if self.multi_prob > 0.0 {
            if self.turns.0 < 2 {
                return fail("two-theme conversations need at least two turns");
            }
            if self.pair_pool.is_empty() {
                return fail("multi_prob > 0 but the pair pool is empty");
            }
            for (a, b) in &self.pair_pool {
                if a == b || a.is_trash() || b.is_trash() {
                    return fail("pair pool entries must be two distinct non-reject themes");
                }
                if !self.themes.contains(a) || !self.themes.contains(b) {
                    return fail("pair pool references a theme outside the inventory");
                }
            }
            let (lo, hi) = self.secondary_share;
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return fail("secondary_share must satisfy 0 < lo <= hi < 1");
            }
        }
        if self.train == 0 {
            return fail("empty train split");
        }
        Ok(())
    }
}

/// Tallies describing what was planted; used to check the label-cardinality
/// distribution and to size expectations in benchmarks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub single: usize,
    pub multi: usize,
    pub trash: usize,
    /// Two-theme conversations per planted pair, keyed "A+B" in label order.
    pub by_pair: BTreeMap<String, usize>,
}

/// Everything one seed produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    /// One lattice per conversation across all three splits.
    pub lattices: LatticeSet,
    pub summary: GenerationSummary,
}

fn planted_word(theme: &ThemeLabel, k: usize) -> String {
    format!("{}w{:03}", theme.as_str().to_lowercase(), k)
}

fn filler_word(k: usize) -> String {
    format!("fill{:03}", k)
}

fn confusable_word(k: usize) -> String {
    format!("conf{:03}", k)
}

enum Plan {
    Single(ThemeLabel),
    Multi {
        primary: ThemeLabel,
        secondary: ThemeLabel,
        share: f64,
    },
    Trash,
}

struct Generator<'a> {
    spec: &'a GeneratorSpec,
    rng: ChaCha8Rng,
    content: Vec<ThemeLabel>,
    summary: GenerationSummary,
}

impl Generator<'_> {
    fn plan(&mut self) -> Plan {
        let u: f64 = self.rng.random();
        if u < self.spec.trash_prob {
            self.summary.trash += 1;
            return Plan::Trash;
        }
        if u < self.spec.trash_prob + self.spec.multi_prob {
            let (a, b) =
                self.spec.pair_pool[self.rng.random_range(0..self.spec.pair_pool.len())]
                    .clone();
            let (primary, secondary) =
                if self.rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let (lo, hi) = self.spec.secondary_share;
            let share = self.rng.random_range(lo..=hi);
            self.summary.multi += 1;
            let mut key = [primary.as_str(), secondary.as_str()];
            key.sort_unstable();
            *self
                .summary
                .by_pair
                .entry(format!("{}+{}", key[0], key[1]))
                .or_insert(0) += 1;
            return Plan::Multi {
                primary,
                secondary,
                share,
            };
        }
        self.summary.single += 1;
        let theme = self.content[self.rng.random_range(0..self.content.len())].clone();
        Plan::Single(theme)
    }

    /// One clean token: filler or a planted word of `theme`; the reject
    /// label owns a planted vocabulary like any other theme, standing in
    /// for off-domain speech.
    fn clean_token(&mut self, theme: &ThemeLabel) -> String {
        if self.rng.random_bool(self.spec.filler_rate) {
            filler_word(self.rng.random_range(0..self.spec.filler_vocab))
        } else {
            planted_word(theme, self.rng.random_range(0..self.spec.vocab_per_theme))
        }
    }

    fn build(&mut self, id: String) -> (Conversation, Lattice) {
        let plan = self.plan();
        let n_turns = self.rng.random_range(self.spec.turns.0..=self.spec.turns.1);
        // Which theme each turn draws from.
        let turn_theme: Vec<&ThemeLabel> = match &plan {
            Plan::Single(t) => vec![t; n_turns],
            Plan::Trash => {
                let trash = self.spec.themes.trash().expect("validated");
                vec![trash; n_turns]
            }
            Plan::Multi {
                primary,
                secondary,
                share,
            } => match self.spec.interleave {
                Interleave::Segmented => {
                    let sec = ((n_turns as f64 * share).round() as usize)
                        .clamp(1, n_turns - 1);
                    (0..n_turns)
                        .map(|i| if i < n_turns - sec { primary } else { secondary })
                        .collect()
                }
                Interleave::Diffuse => (0..n_turns)
                    .map(|_| {
                        if self.rng.random_bool(*share) {
                            secondary
                        } else {
                            primary
                        }
                    })
                    .collect(),
            },
        };

        let mut turns = Vec::with_capacity(n_turns);
        let mut arcs = Vec::new();
        let mut node = 0u32;
        for (turn_idx, theme) in turn_theme.iter().enumerate() {
            let speaker = if turn_idx % 2 == 0 {
                Speaker::Agent
            } else {
                Speaker::Caller
            };
            let n_tokens = self
                .rng
                .random_range(self.spec.tokens_per_turn.0..=self.spec.tokens_per_turn.1);
            let mut words = Vec::with_capacity(n_tokens);
            for _ in 0..n_tokens {
                let truth = self.clean_token(theme);
                if self.spec.noise > 0.0 {
                    // Distinct confusables competing for this span; the
                    // true word keeps the bulk of the posterior mass.
                    let mut pool: Vec<usize> =
                        (0..self.spec.confusion_vocab).collect();
                    let (chosen, _) =
                        pool.partial_shuffle(&mut self.rng, self.spec.confusion_depth);
                    let emitted = if self.rng.random_bool(self.spec.noise) {
                        confusable_word(chosen[0])
                    } else {
                        truth.clone()
                    };
                    arcs.push(LatticeArc {
                        from: node,
                        to: node + 1,
                        word: truth,
                        score: 1.0 - self.spec.noise,
                        turn: turn_idx as u32,
                    });
                    let share = self.spec.noise / self.spec.confusion_depth as f64;
                    for &k in chosen.iter() {
                        arcs.push(LatticeArc {
                            from: node,
                            to: node + 1,
                            word: confusable_word(k),
                            score: share,
                            turn: turn_idx as u32,
                        });
                    }
                    words.push(emitted);
                } else {
                    arcs.push(LatticeArc {
                        from: node,
                        to: node + 1,
                        word: truth.clone(),
                        score: 1.0,
                        turn: turn_idx as u32,
                    });
                    words.push(truth);
                }
                node += 1;
            }
            turns.push(Turn { speaker, words });
        }

        let gold = match &plan {
            Plan::Single(t) => [t.clone()].into(),
            Plan::Trash => [self.spec.themes.trash().expect("validated").clone()].into(),
            Plan::Multi {
                primary, secondary, ..
            } => [primary.clone(), secondary.clone()].into(),
        };
        let conv = Conversation { id: id.clone(), gold, turns };
        let lattice = Lattice { id, arcs };
        (conv, lattice)
    }
}

/// Generates the three splits and their lattices.  Bit-identical output
/// for a fixed spec; with `noise = 0` every lattice is degenerate and the
/// transcript equals the clean text.
pub fn generate(spec: &GeneratorSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut gen = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        content: spec.themes.iter().filter(|t| !t.is_trash()).cloned().collect(),
        summary: GenerationSummary::default(),
    };

    let mut lattices = Vec::new();
    let mut splits = Vec::with_capacity(3);
    for (prefix, count) in [
        ("train", spec.train),
        ("dev", spec.dev),
        ("test", spec.test),
    ] {
        let mut conversations = Vec::with_capacity(count);
        for i in 0..count {
            let (conv, lattice) = gen.build(format!("{prefix}-{i:04}"));
            conversations.push(conv);
            lattices.push(lattice);
        }
        splits.push(Corpus::new(conversations)?);
    }
    let summary = gen.summary;
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SynthOutput {
        train,
        dev,
        test,
        lattices: LatticeSet::new(lattices)?,
        summary,
    })
}
