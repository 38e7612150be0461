//! End-to-end orchestration: train every system from one labeled corpus,
//! classify conversations in parallel, run consensus surveys, repair
//! annotations, and measure the result.
//!
//! All inference is deterministic: parallel maps collect into ordered
//! containers keyed by conversation id, and every decision rule breaks
//! ties by inventory order.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::corpus::{Conversation, Corpus, LatticeSet, ThemeLabel, ThemeSet};
use crate::cosine::{cosine_decide, cosine_scores, CosineConfig};
use crate::density::{
    density_decide, density_profile, dominance_shares, position_contributions,
    DensityConfig,
};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::features::{
    compute_stats, feature_counts, normalize, positional_sequence, select_features,
    theme_weights, Feature, FeatureConfig,
};
use crate::hmm::{decode as hmm_decode, train_hmm, HmmConfig};
use crate::hypothesis::{SystemId, ThemeHypothesis};
use crate::model::{ModelBundle, BUNDLE_VERSION};
use crate::poisson::{classify_poisson, train_poisson, PoissonConfig};
use crate::recovery::{
    apply_rules, build_re_features, re_score, re_score_conversation, standard_rules,
    CoherenceTable, MentionPatterns, ReConfig, ReScore, RecoveryReport,
};
use crate::strategy::{
    annotate, partition, survey_report, tune_cosine_thresholds,
    tune_density_threshold, ConsensusPartition, SurveyLevel, SurveyReport,
    SystemOutputs,
};

/// Everything `train` needs beyond the corpus itself.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub feature_config: FeatureConfig,
    pub cosine: CosineConfig,
    pub density: DensityConfig,
    pub hmm: HmmConfig,
    pub poisson: PoissonConfig,
    pub re_config: ReConfig,
    /// Purity floor for the event-count system's feature selection.
    pub purity_floor: f64,
    /// Document-frequency floor for the same selection.  Rates in the
    /// event-count model are floored at a small epsilon, so a feature seen
    /// in only a couple of training conversations carries a per-occurrence
    /// log-rate ratio near zero — no discriminative value — while still
    /// adding its rate to every multi-theme candidate's expected mass.
    /// Requiring a handful of supporting conversations keeps only features
    /// whose observed occurrences outweigh their own mass penalty.
    pub df_floor: u32,
    pub mentions: Option<MentionPatterns>,
    pub coherence: CoherenceTable,
    pub rules: Vec<crate::recovery::RecoveryRule>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            feature_config: FeatureConfig::default(),
            cosine: CosineConfig::default(),
            density: DensityConfig::default(),
            hmm: HmmConfig::default(),
            poisson: PoissonConfig::default(),
            re_config: ReConfig::default(),
            purity_floor: 0.3,
            df_floor: 5,
            mentions: None,
            coherence: CoherenceTable::standard(),
            rules: standard_rules(),
        }
    }
}

/// Trains the weight table, all four classifiers, and the re-scoring
/// evidence lists from one labeled corpus.
pub fn train(corpus: &Corpus, themes: &ThemeSet, opts: &TrainOptions) -> Result<ModelBundle> {
    let stats = compute_stats(corpus, &opts.feature_config)?;
    let weights = theme_weights(&stats, themes);
    let selected_table = select_features(&stats, opts.purity_floor, opts.df_floor)?;
    let selected: BTreeSet<Feature> = selected_table.stats.keys().cloned().collect();
    let hmm = train_hmm(corpus, themes, &opts.feature_config, &opts.hmm)?;
    let poisson = train_poisson(
        corpus,
        themes,
        &selected,
        &opts.feature_config,
        &opts.poisson,
    )?;
    let re_features = build_re_features(corpus, themes, &opts.feature_config, &opts.re_config)?;
    Ok(ModelBundle {
        version: BUNDLE_VERSION,
        themes: themes.clone(),
        feature_config: opts.feature_config.clone(),
        weights,
        cosine: opts.cosine,
        density: opts.density,
        hmm,
        poisson,
        re_features,
        re_config: opts.re_config.clone(),
        mentions: opts.mentions.clone(),
        coherence: opts.coherence.clone(),
        rules: opts.rules.clone(),
    })
}

/// Runs all four systems on one conversation.
pub fn classify_conversation(
    bundle: &ModelBundle,
    conv: &Conversation,
) -> Result<BTreeMap<SystemId, ThemeHypothesis>> {
    let order = bundle.themes.labels();
    let tokens = normalize(conv, &bundle.feature_config);
    let counts = feature_counts(&tokens, bundle.feature_config.max_gap);

    let scores = cosine_scores(&counts, &bundle.weights, bundle.cosine.weighting);
    let cos = cosine_decide(&scores, order, &bundle.cosine);

    let seq = positional_sequence(&conv.id, &tokens, bundle.feature_config.max_gap, None);
    let contribs = position_contributions(&seq, &bundle.weights);
    let profile = density_profile(&conv.id, order, &contribs, bundle.density.lambda)?;
    let den = density_decide(&profile, bundle.density.v);

    let hmm = hmm_decode(&bundle.hmm, &tokens).hypothesis;
    let poi = classify_poisson(&bundle.poisson, &counts);

    Ok([
        (SystemId::Cosine, cos),
        (SystemId::Density, den),
        (SystemId::Hmm, hmm),
        (SystemId::Poisson, poi),
    ]
    .into())
}

/// Classifies a whole corpus with all four systems, in parallel.
pub fn classify(bundle: &ModelBundle, corpus: &Corpus) -> Result<SystemOutputs> {
    let per_conv: Vec<(String, BTreeMap<SystemId, ThemeHypothesis>)> = corpus
        .conversations()
        .par_iter()
        .map(|conv| classify_conversation(bundle, conv).map(|m| (conv.id.clone(), m)))
        .collect::<Result<Vec<_>>>()?;
    let mut by_system: BTreeMap<SystemId, BTreeMap<String, ThemeHypothesis>> =
        SystemId::ALL.iter().map(|s| (*s, BTreeMap::new())).collect();
    for (id, map) in per_conv {
        for (sys, hyp) in map {
            by_system
                .get_mut(&sys)
                .expect("all systems preallocated")
                .insert(id.clone(), hyp);
        }
    }
    SystemOutputs::new(by_system)
}

/// Evidence scores for every conversation; lattice-backed when a lattice
/// exists, otherwise from the transcript alone.
pub fn re_scores(
    bundle: &ModelBundle,
    corpus: &Corpus,
    lattices: Option<&LatticeSet>,
) -> BTreeMap<String, ReScore> {
    corpus
        .conversations()
        .par_iter()
        .map(|conv| {
            let score = match lattices.and_then(|l| l.get(&conv.id)) {
                Some(lattice) => re_score(
                    lattice,
                    &bundle.re_features,
                    &bundle.feature_config,
                    bundle.mentions.as_ref(),
                    &bundle.re_config,
                ),
                None => re_score_conversation(
                    conv,
                    &bundle.re_features,
                    &bundle.feature_config,
                    bundle.mentions.as_ref(),
                    &bundle.re_config,
                ),
            };
            (conv.id.clone(), score)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Annotates at the widest survey level and repairs the result.
pub fn recover(
    bundle: &ModelBundle,
    outputs: &SystemOutputs,
    partition: &ConsensusPartition,
    re: &BTreeMap<String, ReScore>,
) -> Result<RecoveryReport> {
    let order = bundle.themes.labels();
    let base = annotate(outputs, partition, SurveyLevel::Maj2, order, &bundle.cosine);
    apply_rules(
        outputs,
        partition,
        &base,
        re,
        &bundle.coherence,
        &bundle.rules,
        order,
        &bundle.cosine,
    )
}

/// Survey metrics next to before/after repair measurements.
#[derive(Debug, Clone)]
pub struct RecoveryEvaluation {
    pub survey: SurveyReport,
    /// Widest-level annotation quality before repairs, at its own coverage.
    pub base: MetricsReport,
    pub base_coverage: f64,
    /// Annotation quality after repairs, at the repaired coverage.
    pub recovered: MetricsReport,
    pub recovered_coverage: f64,
    /// Annotated conversations missing at least one gold theme before
    /// repairs, and how many of those became exactly correct.
    pub deletion_errors_before: usize,
    pub deletion_errors_fixed: usize,
    pub report: RecoveryReport,
}

/// Surveys `outputs` against gold, repairs the widest level, and measures
/// what the repairs changed.
pub fn evaluate_recovery(
    bundle: &ModelBundle,
    corpus: &Corpus,
    outputs: &SystemOutputs,
    lattices: Option<&LatticeSet>,
) -> Result<RecoveryEvaluation> {
    let order = bundle.themes.labels();
    let part = partition(outputs);
    let survey = survey_report(outputs, &part, corpus, order, &bundle.cosine)?;
    let base = annotate(outputs, &part, SurveyLevel::Maj2, order, &bundle.cosine);
    let re = re_scores(bundle, corpus, lattices);
    let report = apply_rules(
        outputs,
        &part,
        &base,
        &re,
        &bundle.coherence,
        &bundle.rules,
        order,
        &bundle.cosine,
    )?;

    let gold_of = |id: &str| -> Result<&BTreeSet<ThemeLabel>> {
        corpus
            .get(id)
            .map(|c| &c.gold)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| Error::GoldNotFound(id.to_string()))
    };

    let mut base_pairs = Vec::with_capacity(base.len());
    let mut deletion_errors_before = 0usize;
    let mut deletion_errors_fixed = 0usize;
    for (id, labels) in &base {
        let gold = gold_of(id)?;
        base_pairs.push((labels, gold));
        if labels != gold && labels.is_subset(gold) {
            deletion_errors_before += 1;
            if report.annotations.get(id) == Some(gold) {
                deletion_errors_fixed += 1;
            }
        }
    }
    let base_metrics = MetricsReport::from_pairs(base_pairs.iter().copied());

    let mut recovered_pairs = Vec::with_capacity(report.annotations.len());
    for (id, labels) in &report.annotations {
        recovered_pairs.push((labels, gold_of(id)?));
    }
    let recovered_metrics = MetricsReport::from_pairs(recovered_pairs.iter().copied());

    let total = part.total() as f64;
    Ok(RecoveryEvaluation {
        survey,
        base: base_metrics,
        base_coverage: if total > 0.0 { base.len() as f64 / total } else { 0.0 },
        recovered: recovered_metrics,
        recovered_coverage: report.coverage(),
        deletion_errors_before,
        deletion_errors_fixed,
        report,
    })
}

/// Fits the relative/share thresholds of the two vector systems on a
/// labeled development split and writes them back into the bundle.
/// Returns ((rho, v, cosine acc), (v, density acc)).
pub fn tune_thresholds(
    bundle: &mut ModelBundle,
    dev: &Corpus,
    rho_grid: &[f64],
    cosine_v_grid: &[f64],
    density_v_grid: &[f64],
) -> Result<((f64, f64, f64), (f64, f64))> {
    let order = bundle.themes.labels();
    let per_conv: Vec<(String, BTreeMap<ThemeLabel, f64>, BTreeMap<ThemeLabel, f64>)> =
        dev.conversations()
            .par_iter()
            .map(|conv| {
                let tokens = normalize(conv, &bundle.feature_config);
                let counts = feature_counts(&tokens, bundle.feature_config.max_gap);
                let scores =
                    cosine_scores(&counts, &bundle.weights, bundle.cosine.weighting);
                let seq = positional_sequence(
                    &conv.id,
                    &tokens,
                    bundle.feature_config.max_gap,
                    None,
                );
                let contribs = position_contributions(&seq, &bundle.weights);
                let shares = density_profile(
                    &conv.id,
                    order,
                    &contribs,
                    bundle.density.lambda,
                )
                .map(|profile| dominance_shares(&profile))?;
                Ok((conv.id.clone(), scores, shares))
            })
            .collect::<Result<Vec<_>>>()?;

    let mut scores = BTreeMap::new();
    let mut shares = BTreeMap::new();
    for (id, s, d) in per_conv {
        scores.insert(id.clone(), s);
        shares.insert(id, d);
    }
    let cos = tune_cosine_thresholds(&scores, dev, order, rho_grid, cosine_v_grid)?;
    let den = tune_density_threshold(&shares, dev, order, density_v_grid)?;
    bundle.cosine.rho = cos.0;
    bundle.cosine.v = cos.1;
    bundle.density.v = den.0;
    Ok((cos, den))
}

/// Fits one uniform evidence floor for the repair rules by maximizing
/// post-repair exact-match accuracy on a labeled development split; the
/// winning floor is written into the bundle's coherence table for every
/// theme.  Earliest grid value wins ties.
pub fn tune_recovery_threshold(
    bundle: &mut ModelBundle,
    dev: &Corpus,
    lattices: Option<&LatticeSet>,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if dev.is_empty() || grid.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let order = bundle.themes.labels().to_vec();
    let outputs = classify(bundle, dev)?;
    let part = partition(&outputs);
    let base = annotate(&outputs, &part, SurveyLevel::Maj2, &order, &bundle.cosine);
    let re = re_scores(bundle, dev, lattices);

    let mut best: Option<(f64, f64)> = None;
    for &floor in grid {
        let mut table = bundle.coherence.clone();
        for theme in &order {
            table.set_threshold(theme.clone(), floor);
        }
        let report = apply_rules(
            &outputs,
            &part,
            &base,
            &re,
            &table,
            &bundle.rules,
            &order,
            &bundle.cosine,
        )?;
        let mut correct = 0usize;
        for (id, labels) in &report.annotations {
            let gold = dev
                .get(id)
                .map(|c| &c.gold)
                .filter(|g| !g.is_empty())
                .ok_or_else(|| Error::GoldNotFound(id.to_string()))?;
            if labels == gold {
                correct += 1;
            }
        }
        let acc = if report.annotations.is_empty() {
            0.0
        } else {
            correct as f64 / report.annotations.len() as f64
        };
        match best {
            Some((_, b)) if b >= acc => {}
            _ => best = Some((floor, acc)),
        }
    }
    let (floor, acc) = best.expect("non-empty grid");
    for theme in &order {
        bundle.coherence.set_threshold(theme.clone(), floor);
    }
    Ok((floor, acc))
}
