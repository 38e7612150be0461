//! Multi-label evaluation: per-conversation recall/precision averaged over
//! the corpus, exact-match and Jaccard accuracies, and error typing.
//!
//! All measures are example-based: each conversation contributes one term
//! to each average, regardless of how many labels it carries.  Differing
//! hypotheses are typed as *deletion* (a strict subset of the gold labels),
//! *insertion* (a strict superset), or *substitution* (anything else) — a
//! hypothesis can only be one of the three, so the tally is unambiguous.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ThemeLabel};
use crate::error::{Error, Result};

/// How a wrong hypothesis differs from the gold annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    /// Hypothesis is a strict subset of gold: one or more themes missed.
    Deletion,
    /// Hypothesis is a strict superset of gold: spurious themes added.
    Insertion,
    /// Sets differ in both directions (or are disjoint).
    Substitution,
}

/// Classifies one (hypothesis, gold) pair; `None` when they match.
pub fn classify_error(
    hyp: &BTreeSet<ThemeLabel>,
    gold: &BTreeSet<ThemeLabel>,
) -> Option<ErrorType> {
    if hyp == gold {
        None
    } else if hyp.is_subset(gold) {
        Some(ErrorType::Deletion)
    } else if hyp.is_superset(gold) {
        Some(ErrorType::Insertion)
    } else {
        Some(ErrorType::Substitution)
    }
}

/// Per-theme occurrence bookkeeping for the report tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThemeTally {
    /// Conversations carrying the theme in gold.
    pub gold: usize,
    /// Conversations carrying the theme in the hypothesis.
    pub hypothesized: usize,
    /// Conversations carrying it in both.
    pub hits: usize,
}

/// Aggregate evaluation of one hypothesis set against gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    /// Exact-match accuracy.
    pub acc1: f64,
    /// Jaccard accuracy.
    pub acc2: f64,
    /// Number of exactly correct conversations (the numerator of `acc1`).
    pub correct: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
    pub per_theme: BTreeMap<ThemeLabel, ThemeTally>,
}

impl MetricsReport {
    /// Evaluates an iterator of `(hypothesis, gold)` pairs.  Both sets must
    /// be nonempty for every pair.
    pub fn from_pairs<'a, I>(pairs: I) -> MetricsReport
    where
        I: IntoIterator<Item = (&'a BTreeSet<ThemeLabel>, &'a BTreeSet<ThemeLabel>)>,
    {
        let mut count = 0usize;
        let mut recall = 0.0;
        let mut precision = 0.0;
        let mut acc2 = 0.0;
        let mut correct = 0usize;
        let mut deletions = 0usize;
        let mut insertions = 0usize;
        let mut substitutions = 0usize;
        let mut per_theme: BTreeMap<ThemeLabel, ThemeTally> = BTreeMap::new();

        for (hyp, gold) in pairs {
            count += 1;
            let inter = hyp.intersection(gold).count() as f64;
            let union = hyp.union(gold).count() as f64;
            recall += inter / gold.len() as f64;
            precision += inter / hyp.len() as f64;
            acc2 += inter / union;
            match classify_error(hyp, gold) {
                None => correct += 1,
                Some(ErrorType::Deletion) => deletions += 1,
                Some(ErrorType::Insertion) => insertions += 1,
                Some(ErrorType::Substitution) => substitutions += 1,
            }
            for t in gold {
                per_theme.entry(t.clone()).or_default().gold += 1;
            }
            for t in hyp {
                let tally = per_theme.entry(t.clone()).or_default();
                tally.hypothesized += 1;
                if gold.contains(t) {
                    tally.hits += 1;
                }
            }
        }

        let n = count as f64;
        let (recall, precision, acc2) = if count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (recall / n, precision / n, acc2 / n)
        };
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MetricsReport {
            count,
            recall,
            precision,
            f_score,
            acc1: if count == 0 { 0.0 } else { correct as f64 / n },
            acc2,
            correct,
            deletions,
            insertions,
            substitutions,
            per_theme,
        }
    }
}

/// Evaluates a full hypothesis map against a gold corpus.  Every gold
/// conversation must have a nonempty hypothesis.
pub fn evaluate(
    hypotheses: &BTreeMap<String, BTreeSet<ThemeLabel>>,
    gold: &Corpus,
) -> Result<MetricsReport> {
    let mut pairs = Vec::with_capacity(gold.len());
    for conv in gold.iter() {
        let hyp = hypotheses
            .get(&conv.id)
            .ok_or_else(|| Error::MissingHypothesis(conv.id.clone()))?;
        if hyp.is_empty() {
            return Err(Error::EmptyHypothesis(conv.id.clone()));
        }
        pairs.push((hyp, &conv.gold));
    }
    Ok(MetricsReport::from_pairs(pairs))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "conversations : {}", self.count)?;
        writeln!(f, "acc1          : {:.4}", self.acc1)?;
        writeln!(f, "acc2          : {:.4}", self.acc2)?;
        writeln!(f, "precision     : {:.4}", self.precision)?;
        writeln!(f, "recall        : {:.4}", self.recall)?;
        writeln!(f, "f-score       : {:.4}", self.f_score)?;
        writeln!(
            f,
            "errors        : {} deletions, {} insertions, {} substitutions",
            self.deletions, self.insertions, self.substitutions
        )?;
        writeln!(f, "theme      gold   hyp    hits")?;
        for (t, tally) in &self.per_theme {
            writeln!(
                f,
                "  {:<8} {:<6} {:<6} {:<6}",
                t.as_str(),
                tally.gold,
                tally.hypothesized,
                tally.hits
            )?;
        }
        Ok(())
    }
}
