//! Consensus across the four classifiers: vote-agreement partitioning,
//! majority survey sets at three agreement levels, the equal-weight score
//! combination used to settle 2–2 splits, and grid-based threshold tuning.
//!
//! The partition is purely multiset-based: each conversation's four label
//! sets are grouped by equality and the group-size signature decides the
//! agreement class.  Survey sets nest by construction — the strictest
//! level keeps only unanimous conversations, each looser level adds the
//! next class down — so coverage is monotone in the level while accuracy
//! is left to the data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ThemeLabel};
use crate::cosine::{cosine_decide, CosineConfig};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::hypothesis::{SystemId, ThemeHypothesis};

/// Hypotheses from all four systems over one run set, keyed by system and
/// conversation id.  Construction enforces that every system covers the
/// same conversations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemOutputs {
    by_system: BTreeMap<SystemId, BTreeMap<String, ThemeHypothesis>>,
}

impl SystemOutputs {
    pub fn new(
        by_system: BTreeMap<SystemId, BTreeMap<String, ThemeHypothesis>>,
    ) -> Result<Self> {
        let mut ids: BTreeSet<String> = BTreeSet::new();
        for sys in SystemId::ALL {
            let map = by_system.get(&sys).ok_or(Error::MissingSystemOutput {
                system: sys.name().to_string(),
                id: "*".to_string(),
            })?;
            ids.extend(map.keys().cloned());
        }
        for sys in SystemId::ALL {
            let map = &by_system[&sys];
            for id in &ids {
                if !map.contains_key(id) {
                    return Err(Error::MissingSystemOutput {
                        system: sys.name().to_string(),
                        id: id.clone(),
                    });
                }
            }
        }
        Ok(SystemOutputs { by_system })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.by_system[&SystemId::Cosine]
            .keys()
            .map(String::as_str)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.by_system[&SystemId::Cosine].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, system: SystemId, id: &str) -> Option<&ThemeHypothesis> {
        self.by_system.get(&system).and_then(|m| m.get(id))
    }

    /// The four hypotheses for one conversation, in fixed system order.
    pub fn votes(&self, id: &str) -> Option<[&ThemeHypothesis; 4]> {
        let mut out = Vec::with_capacity(4);
        for sys in SystemId::ALL {
            out.push(self.by_system.get(&sys)?.get(id)?);
        }
        out.try_into().ok()
    }
}

/// Agreement signature of the four votes on one conversation.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AgreementClass {
    /// All four label sets identical (4).
    Unanimous,
    /// Exactly three identical (3+1).
    ThreeOne,
    /// Two pairs of identical sets (2+2).
    TwoTwo,
    /// One pair plus two distinct singles (2+1+1).
    TwoOneOne,
    /// Four pairwise different sets (1+1+1+1).
    AllDistinct,
}

impl AgreementClass {
    pub const ALL: [AgreementClass; 5] = [
        AgreementClass::Unanimous,
        AgreementClass::ThreeOne,
        AgreementClass::TwoTwo,
        AgreementClass::TwoOneOne,
        AgreementClass::AllDistinct,
    ];
}

/// One conversation's agreement class plus, where a unique largest vote
/// group exists, its label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub class: AgreementClass,
    /// Present for unanimous, 3+1, and 2+1+1 signatures; absent for 2+2
    /// and all-distinct ones where no group outweighs the rest.
    pub majority: Option<BTreeSet<ThemeLabel>>,
}

/// Groups the four votes by set equality and reads the size signature.
pub fn classify_votes(votes: &[&BTreeSet<ThemeLabel>; 4]) -> Agreement {
    let mut groups: Vec<(&BTreeSet<ThemeLabel>, usize)> = Vec::new();
    for v in votes {
        match groups.iter_mut().find(|(s, _)| s == v) {
            Some(g) => g.1 += 1,
            None => groups.push((v, 1)),
        }
    }
    let mut sizes: Vec<usize> = groups.iter().map(|(_, n)| *n).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let class = match sizes.as_slice() {
        [4] => AgreementClass::Unanimous,
        [3, 1] => AgreementClass::ThreeOne,
        [2, 2] => AgreementClass::TwoTwo,
        [2, 1, 1] => AgreementClass::TwoOneOne,
        _ => AgreementClass::AllDistinct,
    };
    let majority = match class {
        AgreementClass::Unanimous
        | AgreementClass::ThreeOne
        | AgreementClass::TwoOneOne => groups
            .iter()
            .max_by_key(|(_, n)| *n)
            .map(|(s, _)| (*s).clone()),
        AgreementClass::TwoTwo | AgreementClass::AllDistinct => None,
    };
    Agreement { class, majority }
}

/// Assignment of every conversation in the run set to one agreement class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusPartition {
    pub agreements: BTreeMap<String, Agreement>,
}

impl ConsensusPartition {
    /// Size of the run set.
    pub fn total(&self) -> usize {
        self.agreements.len()
    }

    pub fn class_of(&self, id: &str) -> Option<AgreementClass> {
        self.agreements.get(id).map(|a| a.class)
    }

    pub fn members(&self, class: AgreementClass) -> Vec<&str> {
        self.agreements
            .iter()
            .filter(|(_, a)| a.class == class)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<AgreementClass, usize> {
        let mut counts: BTreeMap<AgreementClass, usize> =
            AgreementClass::ALL.iter().map(|c| (*c, 0)).collect();
        for a in self.agreements.values() {
            *counts.get_mut(&a.class).unwrap() += 1;
        }
        counts
    }
}

/// Classifies every conversation's votes in parallel.
pub fn partition(outputs: &SystemOutputs) -> ConsensusPartition {
    let ids = outputs.ids();
    let agreements: BTreeMap<String, Agreement> = ids
        .par_iter()
        .map(|id| {
            let votes = outputs
                .votes(id)
                .expect("construction guarantees full coverage");
            let label_sets: [&BTreeSet<ThemeLabel>; 4] =
                [&votes[0].labels, &votes[1].labels, &votes[2].labels, &votes[3].labels];
            (id.to_string(), classify_votes(&label_sets))
        })
        .collect();
    ConsensusPartition { agreements }
}

/// Averages the four systems' normalized score vectors with equal weights
/// and decides with the cosine threshold rules.  A system whose scores sum
/// to zero (a rejection) contributes nothing — the mean runs over the
/// systems that actually scored.
pub fn linear_combination(
    hypotheses: &[&ThemeHypothesis],
    order: &[ThemeLabel],
    config: &CosineConfig,
) -> ThemeHypothesis {
    let mut combined: BTreeMap<ThemeLabel, f64> =
        order.iter().map(|t| (t.clone(), 0.0)).collect();
    let mut contributors = 0usize;
    for hyp in hypotheses {
        let normalized = hyp.normalized_scores();
        if normalized.values().sum::<f64>() > 0.0 {
            contributors += 1;
            for (t, s) in normalized {
                *combined.entry(t).or_insert(0.0) += s;
            }
        }
    }
    if contributors > 0 {
        for s in combined.values_mut() {
            *s /= contributors as f64;
        }
    }
    cosine_decide(&combined, order, config)
}

/// Survey strictness: which agreement classes are auto-annotated.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SurveyLevel {
    /// Unanimous conversations only.
    Maj4,
    /// Adds 3+1 conversations with their 3-vote label.
    Maj3,
    /// Adds 2+1+1 conversations with their 2-vote label and 2+2 ones with
    /// the combined-score decision.  All-distinct conversations stay out.
    Maj2,
}

impl SurveyLevel {
    pub const ALL: [SurveyLevel; 3] =
        [SurveyLevel::Maj4, SurveyLevel::Maj3, SurveyLevel::Maj2];

    pub fn name(&self) -> &'static str {
        match self {
            SurveyLevel::Maj4 => "maj4",
            SurveyLevel::Maj3 => "maj3",
            SurveyLevel::Maj2 => "maj2",
        }
    }
}

impl fmt::Display for SurveyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Auto-annotates the conversations admitted at `level`; everything else
/// is left to downstream recovery.
pub fn annotate(
    outputs: &SystemOutputs,
    partition: &ConsensusPartition,
    level: SurveyLevel,
    order: &[ThemeLabel],
    lc_config: &CosineConfig,
) -> BTreeMap<String, BTreeSet<ThemeLabel>> {
    let mut annotations = BTreeMap::new();
    for (id, agreement) in &partition.agreements {
        let labels = match (agreement.class, level) {
            (AgreementClass::Unanimous, _) => agreement.majority.clone(),
            (AgreementClass::ThreeOne, SurveyLevel::Maj3 | SurveyLevel::Maj2) => {
                agreement.majority.clone()
            }
            (AgreementClass::TwoOneOne, SurveyLevel::Maj2) => {
                agreement.majority.clone()
            }
            (AgreementClass::TwoTwo, SurveyLevel::Maj2) => {
                let votes = outputs
                    .votes(id)
                    .expect("construction guarantees full coverage");
                Some(linear_combination(&votes, order, lc_config).labels)
            }
            _ => None,
        };
        if let Some(labels) = labels {
            annotations.insert(id.clone(), labels);
        }
    }
    annotations
}

/// One row of the survey report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveyRow {
    pub level: SurveyLevel,
    /// Conversations auto-annotated at this level.
    pub size: usize,
    /// Run-set size (the coverage denominator).
    pub total: usize,
    pub coverage: f64,
    /// Exactly correct annotations within the level.
    pub correct: usize,
    pub metrics: MetricsReport,
}

/// Evaluates one survey level against gold annotations.
pub fn survey(
    outputs: &SystemOutputs,
    partition: &ConsensusPartition,
    level: SurveyLevel,
    gold: &Corpus,
    order: &[ThemeLabel],
    lc_config: &CosineConfig,
) -> Result<SurveyRow> {
    let annotations = annotate(outputs, partition, level, order, lc_config);
    if annotations.is_empty() {
        return Err(Error::EmptySurveySet(level.name().to_string()));
    }
    let mut pairs = Vec::with_capacity(annotations.len());
    for (id, labels) in &annotations {
        let conv = gold
            .get(id)
            .ok_or_else(|| Error::GoldNotFound(id.clone()))?;
        pairs.push((labels, &conv.gold));
    }
    let metrics = MetricsReport::from_pairs(pairs);
    Ok(SurveyRow {
        level,
        size: annotations.len(),
        total: partition.total(),
        coverage: annotations.len() as f64 / partition.total() as f64,
        correct: metrics.correct,
        metrics,
    })
}

/// All three survey levels as a printable report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveyReport {
    pub rows: Vec<SurveyRow>,
    pub class_counts: BTreeMap<AgreementClass, usize>,
}

pub fn survey_report(
    outputs: &SystemOutputs,
    partition: &ConsensusPartition,
    gold: &Corpus,
    order: &[ThemeLabel],
    lc_config: &CosineConfig,
) -> Result<SurveyReport> {
    let mut rows = Vec::new();
    for level in SurveyLevel::ALL {
        rows.push(survey(outputs, partition, level, gold, order, lc_config)?);
    }
    Ok(SurveyReport {
        rows,
        class_counts: partition.counts(),
    })
}

impl fmt::Display for SurveyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "level", "size", "cov", "acc1", "acc2", "prec", "recall", "f"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<6} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                row.level.name(),
                row.size,
                row.coverage,
                row.metrics.acc1,
                row.metrics.acc2,
                row.metrics.precision,
                row.metrics.recall,
                row.metrics.f_score,
            )?;
        }
        writeln!(f, "agreement classes:")?;
        for (class, count) in &self.class_counts {
            writeln!(f, "  {class:?}: {count}")?;
        }
        Ok(())
    }
}

/// Deterministic grid maximization: later cells must be strictly better to
/// replace earlier ones, so ties resolve to the earliest (smallest) cell.
pub fn grid_search<P, F>(grid: impl IntoIterator<Item = P>, mut objective: F) -> Option<(P, f64)>
where
    F: FnMut(&P) -> f64,
{
    let mut best: Option<(P, f64)> = None;
    for cell in grid {
        let score = objective(&cell);
        match &best {
            Some((_, b)) if *b >= score => {}
            _ => best = Some((cell, score)),
        }
    }
    best
}

fn exact_match_rate<F>(gold: &Corpus, ids: &[&str], mut decide: F) -> f64
where
    F: FnMut(&str) -> BTreeSet<ThemeLabel>,
{
    let mut correct = 0usize;
    for id in ids {
        let conv = gold.get(id).expect("ids drawn from gold");
        if decide(id) == conv.gold {
            correct += 1;
        }
    }
    correct as f64 / ids.len() as f64
}

/// Sweeps the cosine decision thresholds over a development set of cached
/// score maps, maximizing exact-match accuracy.  Ties keep the smaller
/// (rho, v) cell.  Returns `(rho, v, accuracy)`.
pub fn tune_cosine_thresholds(
    scores: &BTreeMap<String, BTreeMap<ThemeLabel, f64>>,
    gold: &Corpus,
    order: &[ThemeLabel],
    rho_grid: &[f64],
    v_grid: &[f64],
) -> Result<(f64, f64, f64)> {
    let ids: Vec<&str> = scores
        .keys()
        .filter(|id| gold.get(id).is_some())
        .map(String::as_str)
        .collect();
    if ids.is_empty() || rho_grid.is_empty() || v_grid.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let mut grid = Vec::with_capacity(rho_grid.len() * v_grid.len());
    for &rho in rho_grid {
        for &v in v_grid {
            grid.push((rho, v));
        }
    }
    let ((rho, v), acc) = grid_search(grid, |&(rho, v)| {
        let config = CosineConfig {
            rho,
            v,
            ..CosineConfig::default()
        };
        exact_match_rate(gold, &ids, |id| {
            cosine_decide(&scores[id], order, &config).labels
        })
    })
    .expect("grid is nonempty");
    Ok((rho, v, acc))
}

/// Sweeps the dominance-share threshold over cached share maps, maximizing
/// exact-match accuracy.  Ties keep the smaller threshold.  Returns
/// `(v, accuracy)`.
pub fn tune_density_threshold(
    shares: &BTreeMap<String, BTreeMap<ThemeLabel, f64>>,
    gold: &Corpus,
    order: &[ThemeLabel],
    v_grid: &[f64],
) -> Result<(f64, f64)> {
    let ids: Vec<&str> = shares
        .keys()
        .filter(|id| gold.get(id).is_some())
        .map(String::as_str)
        .collect();
    if ids.is_empty() || v_grid.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let (v, acc) = grid_search(v_grid.iter().copied(), |&v| {
        exact_match_rate(gold, &ids, |id| {
            crate::density::decide_from_shares(&shares[id], order, v).labels
        })
    })
    .expect("grid is nonempty");
    Ok((v, acc))
}
