//! Precondition–action repair rules over the consensus partition.
//!
//! Each rule couples a vote-pattern precondition (how the four systems
//! split on a conversation) with a guarded annotation edit backed by the
//! re-scoring ranking: add a coherent missed theme, drop a theme the
//! evidence cannot support, compose co-present themes, replace a reject
//! hypothesis, or settle four-way disagreement by a fifth vote.  All edits
//! are constrained by a domain coherence table; rules fire at most once
//! per conversation and a fixpoint is reached after one pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ThemeLabel, ThemeSet, TRASH_LABEL};
use crate::cosine::CosineConfig;
use crate::error::{Error, Result};
use crate::hypothesis::ThemeHypothesis;
use crate::recovery::ReScore;
use crate::strategy::{
    linear_combination, Agreement, AgreementClass, ConsensusPartition,
    SystemOutputs,
};

/// Domain knowledge constraining which theme combinations may be asserted.
///
/// Directed pairs `(base, added)` license adding `added` to an agreed
/// `base`; the unanimous tier is the strictest and the majority tier
/// extends it for conversations with weaker agreement.  Clusters are the
/// looser symmetric relation used by composition rules.  Thresholds gate
/// every assertion on the added theme's re-scoring evidence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoherenceTable {
    unanimous_pairs: BTreeSet<(ThemeLabel, ThemeLabel)>,
    majority_pairs: BTreeSet<(ThemeLabel, ThemeLabel)>,
    unanimous_trash: BTreeSet<ThemeLabel>,
    majority_trash: BTreeSet<ThemeLabel>,
    clusters: BTreeSet<(ThemeLabel, ThemeLabel)>,
    thresholds: BTreeMap<ThemeLabel, f64>,
}

impl CoherenceTable {
    /// The built-in transit-domain table for the standard inventory:
    /// fares pair with cards, schedules and card themes with itineraries,
    /// traffic state and lost property join at the looser tier, and fines
    /// (strict) or card/traffic themes (loose) may replace a reject
    /// hypothesis.
    pub fn standard() -> CoherenceTable {
        let l = |name: &str| ThemeLabel::new(name);
        let both = |set: &mut BTreeSet<(ThemeLabel, ThemeLabel)>, a: &str, b: &str| {
            set.insert((ThemeLabel::new(a), ThemeLabel::new(b)));
            set.insert((ThemeLabel::new(b), ThemeLabel::new(a)));
        };
        let mut table = CoherenceTable::default();
        both(&mut table.unanimous_pairs, "NVGO", "TARF");
        both(&mut table.unanimous_pairs, "ITNR", "HORR");
        both(&mut table.unanimous_pairs, "ITNR", "NVGO");
        both(&mut table.majority_pairs, "ITNR", "ETFC");
        both(&mut table.majority_pairs, "NVGO", "OBJT");
        table.unanimous_trash.insert(l("PV"));
        table.majority_trash.insert(l("VGC"));
        table.majority_trash.insert(l("ETFC"));
        for (hub, spokes) in [
            ("TARF", &["ITNR", "NVGO", "VGC"][..]),
            ("HORR", &["ITNR", "ETFC"][..]),
            ("OBJT", &["NVGO", "VGC"][..]),
            ("ITNR", &["ETFC", "NVGO", "VGC", "OBJT"][..]),
            ("PV", &["NVGO", "VGC", "OBJT"][..]),
        ] {
            for spoke in spokes {
                both(&mut table.clusters, hub, spoke);
            }
        }
        table
    }

    /// Loads a table file.  Line grammar (with `#` comments):
    ///
    /// ```text
    /// pair <unanimous|majority> <BASE> <ADDED>
    /// trash <unanimous|majority> <THEME>...
    /// cluster <HUB> <THEME>...
    /// threshold <THEME> <VALUE>
    /// ```
    pub fn load(path: impl AsRef<Path>, themes: &ThemeSet) -> Result<CoherenceTable> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = CoherenceTable::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| Error::RuleParse {
                path: path.to_owned(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let keyword = parts.next().unwrap();
            let theme = |name: &str| -> Result<ThemeLabel> {
                let label = ThemeLabel::new(name);
                if themes.contains(&label) {
                    Ok(label)
                } else {
                    Err(Error::RuleUnknownTheme(name.to_string()))
                }
            };
            match keyword {
                "pair" => {
                    let tier = parts.next().ok_or_else(|| parse_err("missing tier"))?;
                    let base = theme(
                        parts.next().ok_or_else(|| parse_err("missing base theme"))?,
                    )?;
                    let added = theme(
                        parts.next().ok_or_else(|| parse_err("missing added theme"))?,
                    )?;
                    match tier {
                        "unanimous" => table.unanimous_pairs.insert((base, added)),
                        "majority" => table.majority_pairs.insert((base, added)),
                        other => {
                            return Err(parse_err(&format!("unknown tier `{other}`")))
                        }
                    };
                }
                "trash" => {
                    let tier = parts.next().ok_or_else(|| parse_err("missing tier"))?;
                    let targets: Vec<&str> = parts.collect();
                    if targets.is_empty() {
                        return Err(parse_err("missing target theme"));
                    }
                    for name in targets {
                        let label = theme(name)?;
                        match tier {
                            "unanimous" => table.unanimous_trash.insert(label),
                            "majority" => table.majority_trash.insert(label),
                            other => {
                                return Err(parse_err(&format!(
                                    "unknown tier `{other}`"
                                )))
                            }
                        };
                    }
                }
                "cluster" => {
                    let hub =
                        theme(parts.next().ok_or_else(|| parse_err("missing hub"))?)?;
                    let spokes: Vec<&str> = parts.collect();
                    if spokes.is_empty() {
                        return Err(parse_err("cluster needs at least two themes"));
                    }
                    for name in spokes {
                        let spoke = theme(name)?;
                        table.clusters.insert((hub.clone(), spoke.clone()));
                        table.clusters.insert((spoke, hub.clone()));
                    }
                }
                "threshold" => {
                    let label =
                        theme(parts.next().ok_or_else(|| parse_err("missing theme"))?)?;
                    let value: f64 = parts
                        .next()
                        .ok_or_else(|| parse_err("missing value"))?
                        .parse()
                        .map_err(|_| parse_err("malformed threshold value"))?;
                    table.thresholds.insert(label, value);
                }
                other => return Err(parse_err(&format!("unknown keyword `{other}`"))),
            }
        }
        Ok(table)
    }

    /// Whether `added` may be asserted alongside an agreed `base` for a
    /// conversation of the given agreement class.
    pub fn may_assert(
        &self,
        class: AgreementClass,
        base: &ThemeLabel,
        added: &ThemeLabel,
    ) -> bool {
        let key = (base.clone(), added.clone());
        match class {
            AgreementClass::Unanimous => self.unanimous_pairs.contains(&key),
            _ => self.unanimous_pairs.contains(&key) || self.majority_pairs.contains(&key),
        }
    }

    /// Whether `target` may replace a reject hypothesis at this class.
    pub fn trash_recoverable(&self, class: AgreementClass, target: &ThemeLabel) -> bool {
        match class {
            AgreementClass::Unanimous => self.unanimous_trash.contains(target),
            _ => {
                self.unanimous_trash.contains(target)
                    || self.majority_trash.contains(target)
            }
        }
    }

    /// The loose symmetric relation used by composition rules.
    pub fn related(&self, a: &ThemeLabel, b: &ThemeLabel) -> bool {
        let k = (a.clone(), b.clone());
        let r = (b.clone(), a.clone());
        self.clusters.contains(&k)
            || self.unanimous_pairs.contains(&k)
            || self.unanimous_pairs.contains(&r)
            || self.majority_pairs.contains(&k)
            || self.majority_pairs.contains(&r)
    }

    /// Evidence floor for asserting `theme`; 0 when untuned.
    pub fn threshold(&self, theme: &ThemeLabel) -> f64 {
        self.thresholds.get(theme).copied().unwrap_or(0.0)
    }

    pub fn set_threshold(&mut self, theme: ThemeLabel, value: f64) {
        self.thresholds.insert(theme, value);
    }
}

/// The general precondition forms a rule can instantiate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RuleForm {
    /// Four equal votes: add one coherent missed theme to a singleton
    /// base, or replace an agreed reject hypothesis.
    UnanimousAddition,
    /// Three equal votes: the odd vote differs by one theme — add it
    /// (guarded by coherence and evidence) or remove it (when the
    /// evidence ranks it far down).
    MajorityThreeRepair,
    /// A two-vote majority repaired the same way against the single votes.
    PairMajorityRepair,
    /// Two or three co-present, mutually coherent themes with top
    /// evidence ranks replace the annotation.
    Composition,
    /// Four distinct votes: a fifth vote from the evidence ranking decides;
    /// if it matches nobody, the combined-score decision is used.
    DistinctVote,
}

impl RuleForm {
    pub fn name(&self) -> &'static str {
        match self {
            RuleForm::UnanimousAddition => "unanimous_addition",
            RuleForm::MajorityThreeRepair => "majority_three_repair",
            RuleForm::PairMajorityRepair => "pair_majority_repair",
            RuleForm::Composition => "composition",
            RuleForm::DistinctVote => "distinct_vote",
        }
    }
}

impl FromStr for RuleForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unanimous_addition" => Ok(RuleForm::UnanimousAddition),
            "majority_three_repair" => Ok(RuleForm::MajorityThreeRepair),
            "pair_majority_repair" => Ok(RuleForm::PairMajorityRepair),
            "composition" => Ok(RuleForm::Composition),
            "distinct_vote" => Ok(RuleForm::DistinctVote),
            other => Err(format!("unknown rule form `{other}`")),
        }
    }
}

/// One enabled rule: a form plus optional label bindings narrowing which
/// base/added themes it may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryRule {
    pub form: RuleForm,
    /// Restricts the agreed base theme the rule fires on.
    pub base: Option<ThemeLabel>,
    /// Restricts the theme being added, removed, or recovered.
    pub added: Option<ThemeLabel>,
}

impl RecoveryRule {
    pub fn new(form: RuleForm) -> RecoveryRule {
        RecoveryRule {
            form,
            base: None,
            added: None,
        }
    }
}

/// The default rule stack: every form enabled, unrestricted, ordered from
/// the strongest agreement downwards.
pub fn standard_rules() -> Vec<RecoveryRule> {
    [
        RuleForm::UnanimousAddition,
        RuleForm::MajorityThreeRepair,
        RuleForm::PairMajorityRepair,
        RuleForm::Composition,
        RuleForm::DistinctVote,
    ]
    .into_iter()
    .map(RecoveryRule::new)
    .collect()
}

/// Loads a rule file: one `rule <form> [base=THEME] [added=THEME]` line
/// per rule, `#` comments allowed; rules apply in file order.
pub fn load_rules(path: impl AsRef<Path>, themes: &ThemeSet) -> Result<Vec<RecoveryRule>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rules = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::RuleParse {
            path: path.to_owned(),
            line: lineno + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("rule") => {}
            Some(other) => {
                return Err(parse_err(format!("expected `rule`, found `{other}`")))
            }
            None => unreachable!("blank lines are skipped"),
        }
        let form: RuleForm = parts
            .next()
            .ok_or_else(|| parse_err("missing rule form".into()))?
            .parse()
            .map_err(parse_err)?;
        let mut rule = RecoveryRule::new(form);
        for binding in parts {
            let (key, value) = binding
                .split_once('=')
                .ok_or_else(|| parse_err(format!("malformed binding `{binding}`")))?;
            let label = ThemeLabel::new(value);
            if !themes.contains(&label) {
                return Err(Error::RuleUnknownTheme(value.to_string()));
            }
            match key {
                "base" => rule.base = Some(label),
                "added" => rule.added = Some(label),
                other => {
                    return Err(parse_err(format!("unknown binding key `{other}`")))
                }
            }
        }
        rules.push(rule);
    }
    Ok(rules)
}

/// A repair applied to one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedAction {
    pub rule: RuleForm,
    /// The annotation before the repair; `None` for conversations the
    /// survey had left unannotated.
    pub before: Option<BTreeSet<ThemeLabel>>,
    pub after: BTreeSet<ThemeLabel>,
}

/// Annotations after the repair pass plus a record of every change.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub annotations: BTreeMap<String, BTreeSet<ThemeLabel>>,
    pub actions: BTreeMap<String, AppliedAction>,
    /// Run-set size (the coverage denominator).
    pub total: usize,
}

impl RecoveryReport {
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.annotations.len() as f64 / self.total as f64
        }
    }
}

struct RuleContext<'a> {
    agreement: &'a Agreement,
    votes: [&'a ThemeHypothesis; 4],
    re: &'a ReScore,
    table: &'a CoherenceTable,
    order: &'a [ThemeLabel],
    trash: &'a ThemeLabel,
    lc_config: &'a CosineConfig,
}

impl RuleContext<'_> {
    fn class(&self) -> AgreementClass {
        self.agreement.class
    }

    fn rank(&self, theme: &ThemeLabel) -> usize {
        self.re.rank_of(theme).unwrap_or(usize::MAX)
    }

    fn passes_score(&self, theme: &ThemeLabel) -> bool {
        self.re.score_of(theme) > self.table.threshold(theme)
    }

    /// The quoted deletion-recovery guard: evidence above threshold and
    /// the added theme first, or the base first and the added second.
    fn addition_guard(&self, base: &ThemeLabel, added: &ThemeLabel) -> bool {
        self.passes_score(added)
            && (self.rank(added) == 1
                || (self.rank(base) == 1 && self.rank(added) == 2))
    }

    fn vote_sets(&self) -> [&BTreeSet<ThemeLabel>; 4] {
        [
            &self.votes[0].labels,
            &self.votes[1].labels,
            &self.votes[2].labels,
            &self.votes[3].labels,
        ]
    }

    /// Distinct non-reject themes hypothesized by any system.
    fn vote_union(&self) -> BTreeSet<ThemeLabel> {
        let mut union = BTreeSet::new();
        for set in self.vote_sets() {
            union.extend(set.iter().cloned());
        }
        union.remove(self.trash);
        union
    }
}

fn binding_ok(binding: &Option<ThemeLabel>, value: &ThemeLabel) -> bool {
    binding.as_ref().is_none_or(|b| b == value)
}

fn is_trash_set(set: &BTreeSet<ThemeLabel>, trash: &ThemeLabel) -> bool {
    set.len() == 1 && set.contains(trash)
}

/// Replaces an agreed reject hypothesis by the top-ranked recoverable
/// theme when its evidence clears the threshold.
fn try_trash_recovery(
    rule: &RecoveryRule,
    ctx: &RuleContext<'_>,
) -> Option<BTreeSet<ThemeLabel>> {
    if !binding_ok(&rule.base, ctx.trash) {
        return None;
    }
    for target in ctx.order {
        if target == ctx.trash
            || !binding_ok(&rule.added, target)
            || !ctx.table.trash_recoverable(ctx.class(), target)
        {
            continue;
        }
        if ctx.rank(target) == 1 && ctx.passes_score(target) {
            return Some([target.clone()].into());
        }
    }
    None
}

/// Adds the best-ranked coherent theme to a singleton base.
fn try_addition(
    rule: &RecoveryRule,
    ctx: &RuleContext<'_>,
    base: &ThemeLabel,
    candidates: impl Iterator<Item = ThemeLabel>,
) -> Option<BTreeSet<ThemeLabel>> {
    if !binding_ok(&rule.base, base) {
        return None;
    }
    let mut best: Option<(usize, ThemeLabel)> = None;
    for added in candidates {
        if added == *base
            || added == *ctx.trash
            || !binding_ok(&rule.added, &added)
            || !ctx.table.may_assert(ctx.class(), base, &added)
            || !ctx.addition_guard(base, &added)
        {
            continue;
        }
        let rank = ctx.rank(&added);
        match &best {
            Some((r, _)) if *r <= rank => {}
            _ => best = Some((rank, added)),
        }
    }
    best.map(|(_, added)| [base.clone(), added].into())
}

/// Repairs a majority annotation against one dissenting vote differing by
/// exactly one theme: add it under the deletion guard, or remove it when
/// the evidence ranks it outside the top three.
fn try_one_theme_repair(
    rule: &RecoveryRule,
    ctx: &RuleContext<'_>,
    majority: &BTreeSet<ThemeLabel>,
    dissent: &BTreeSet<ThemeLabel>,
) -> Option<BTreeSet<ThemeLabel>> {
    if dissent.len() == majority.len() + 1 && majority.is_subset(dissent) {
        if majority.len() != 1 {
            return None;
        }
        let base = majority.iter().next().unwrap();
        let extra = dissent.difference(majority).next().unwrap().clone();
        return try_addition(rule, ctx, base, std::iter::once(extra));
    }
    if majority.len() == dissent.len() + 1
        && dissent.is_subset(majority)
        && majority.len() >= 2
    {
        let dropped = majority.difference(dissent).next().unwrap();
        if !binding_ok(&rule.added, dropped) {
            return None;
        }
        if let Some(b) = &rule.base {
            if !dissent.contains(b) {
                return None;
            }
        }
        if ctx.rank(dropped) > 3 {
            return Some(dissent.clone());
        }
    }
    None
}

/// Keeps a combined multi-label set only when it is mutually coherent and
/// free of the reject class; otherwise falls back to its best-ranked
/// member.
fn sanitize_combination(
    labels: BTreeSet<ThemeLabel>,
    ctx: &RuleContext<'_>,
) -> BTreeSet<ThemeLabel> {
    if labels.len() <= 1 {
        return labels;
    }
    let coherent = !labels.contains(ctx.trash)
        && labels.iter().all(|a| {
            labels
                .iter()
                .all(|b| a == b || ctx.table.related(a, b))
        });
    if coherent {
        return labels;
    }
    let mut best: Option<(usize, &ThemeLabel)> = None;
    for t in &labels {
        let rank = ctx.rank(t);
        match best {
            Some((r, _)) if r <= rank => {}
            _ => best = Some((rank, t)),
        }
    }
    [best.expect("nonempty labels").1.clone()].into()
}

fn try_rule(rule: &RecoveryRule, ctx: &RuleContext<'_>) -> Option<BTreeSet<ThemeLabel>> {
    match rule.form {
        RuleForm::UnanimousAddition => {
            if ctx.class() != AgreementClass::Unanimous {
                return None;
            }
            let agreed = ctx.agreement.majority.as_ref()?;
            if is_trash_set(agreed, ctx.trash) {
                try_trash_recovery(rule, ctx)
            } else if agreed.len() == 1 {
                let base = agreed.iter().next().unwrap();
                try_addition(rule, ctx, base, ctx.order.iter().cloned())
            } else {
                None
            }
        }
        RuleForm::MajorityThreeRepair => {
            if ctx.class() != AgreementClass::ThreeOne {
                return None;
            }
            let majority = ctx.agreement.majority.as_ref()?;
            if is_trash_set(majority, ctx.trash) {
                return try_trash_recovery(rule, ctx);
            }
            let dissent = ctx
                .vote_sets()
                .into_iter()
                .find(|s| *s != majority)?;
            try_one_theme_repair(rule, ctx, majority, dissent)
        }
        RuleForm::PairMajorityRepair => {
            if ctx.class() != AgreementClass::TwoOneOne {
                return None;
            }
            let majority = ctx.agreement.majority.as_ref()?;
            if is_trash_set(majority, ctx.trash) {
                return try_trash_recovery(rule, ctx);
            }
            for dissent in ctx.vote_sets() {
                if dissent == majority {
                    continue;
                }
                if let Some(out) = try_one_theme_repair(rule, ctx, majority, dissent) {
                    return Some(out);
                }
            }
            None
        }
        RuleForm::Composition => {
            if ctx.class() == AgreementClass::Unanimous
                || ctx.class() == AgreementClass::ThreeOne
            {
                return None;
            }
            let union = ctx.vote_union();
            let bindings_within = |set: &BTreeSet<ThemeLabel>| {
                rule.base.as_ref().is_none_or(|b| set.contains(b))
                    && rule.added.as_ref().is_none_or(|b| set.contains(b))
            };
            // Three mutually coherent co-present themes holding the top
            // evidence ranks.
            if union.len() == 3 {
                let all_related = union.iter().all(|a| {
                    union.iter().all(|b| a == b || ctx.table.related(a, b))
                });
                let all_scored = union.iter().all(|t| ctx.passes_score(t));
                let top3: BTreeSet<ThemeLabel> =
                    ctx.re.ranking.iter().take(3).cloned().collect();
                if all_related && all_scored && top3 == union && bindings_within(&union)
                {
                    return Some(union);
                }
            }
            // The top two evidence themes, both hypothesized somewhere.
            let [r1, r2] = [ctx.re.ranking.first()?, ctx.re.ranking.get(1)?];
            if r1 != ctx.trash
                && r2 != ctx.trash
                && union.contains(r1)
                && union.contains(r2)
                && ctx.table.related(r1, r2)
                && ctx.passes_score(r1)
                && ctx.passes_score(r2)
            {
                let pair: BTreeSet<ThemeLabel> = [r1.clone(), r2.clone()].into();
                if bindings_within(&pair) {
                    return Some(pair);
                }
            }
            None
        }
        RuleForm::DistinctVote => {
            if ctx.class() != AgreementClass::AllDistinct {
                return None;
            }
            let top = ctx.re.top()?;
            let fifth: BTreeSet<ThemeLabel> = [top.clone()].into();
            if ctx.vote_sets().into_iter().any(|s| *s == fifth) {
                return Some(fifth);
            }
            let combined =
                linear_combination(&ctx.votes, ctx.order, ctx.lc_config).labels;
            Some(sanitize_combination(combined, ctx))
        }
    }
}

/// Runs the rule stack once over every conversation: the first rule whose
/// precondition and guards hold proposes a revision, recorded only when it
/// differs from the current annotation.  Proposals are derived from the
/// votes and the evidence ranking alone — never from the annotation being
/// revised — so re-running the pass recomputes identical proposals and
/// changes nothing.  Conversations matching no rule keep their annotation
/// bit-identically.
#[allow(clippy::too_many_arguments)]
pub fn apply_rules(
    outputs: &SystemOutputs,
    partition: &ConsensusPartition,
    base: &BTreeMap<String, BTreeSet<ThemeLabel>>,
    re_scores: &BTreeMap<String, ReScore>,
    table: &CoherenceTable,
    rules: &[RecoveryRule],
    order: &[ThemeLabel],
    lc_config: &CosineConfig,
) -> Result<RecoveryReport> {
    for rule in rules {
        for binding in [&rule.base, &rule.added].into_iter().flatten() {
            if !order.contains(binding) {
                return Err(Error::RuleUnknownTheme(binding.to_string()));
            }
        }
    }
    for (id, labels) in base {
        if labels.is_empty() {
            return Err(Error::EmptyHypothesis(id.clone()));
        }
    }
    let trash = order
        .iter()
        .find(|t| t.is_trash())
        .cloned()
        .unwrap_or_else(|| ThemeLabel::new(TRASH_LABEL));

    let entries: Vec<(&String, &Agreement)> = partition.agreements.iter().collect();
    let fired: Vec<(String, Option<AppliedAction>)> = entries
        .par_iter()
        .map(|(id, agreement)| -> Result<(String, Option<AppliedAction>)> {
            let votes = outputs.votes(id).ok_or_else(|| Error::MissingSystemOutput {
                system: "consensus".to_string(),
                id: (*id).clone(),
            })?;
            let re = re_scores.get(*id).ok_or_else(|| Error::MissingSystemOutput {
                system: "re".to_string(),
                id: (*id).clone(),
            })?;
            let current = base.get(*id);
            let ctx = RuleContext {
                agreement,
                votes,
                re,
                table,
                order,
                trash: &trash,
                lc_config,
            };
            for rule in rules {
                if let Some(after) = try_rule(rule, &ctx) {
                    debug_assert!(!after.is_empty());
                    let action = if current != Some(&after) {
                        Some(AppliedAction {
                            rule: rule.form,
                            before: current.cloned(),
                            after,
                        })
                    } else {
                        None
                    };
                    return Ok(((*id).clone(), action));
                }
            }
            Ok(((*id).clone(), None))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut annotations = base.clone();
    let mut actions = BTreeMap::new();
    for (id, action) in fired {
        if let Some(action) = action {
            annotations.insert(id.clone(), action.after.clone());
            actions.insert(id, action);
        }
    }
    Ok(RecoveryReport {
        annotations,
        actions,
        total: partition.total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::SystemId;
    use crate::recovery::ReScore;
    use crate::strategy::{annotate, partition, SurveyLevel};
    use proptest::prelude::*;
    use std::io::Write;

    fn label(s: &str) -> ThemeLabel {
        ThemeLabel::new(s)
    }

    fn set(labels: &[&str]) -> BTreeSet<ThemeLabel> {
        labels.iter().map(|s| label(s)).collect()
    }

    fn hyp(labels: &[&str]) -> ThemeHypothesis {
        ThemeHypothesis::new(set(labels), BTreeMap::new())
    }

    fn hyp_scored(labels: &[&str], scores: &[(&str, f64)]) -> ThemeHypothesis {
        ThemeHypothesis::new(
            set(labels),
            scores.iter().map(|(t, s)| (label(t), *s)).collect(),
        )
    }

    fn outputs_from(votes: Vec<(String, [ThemeHypothesis; 4])>) -> SystemOutputs {
        let mut by_system: BTreeMap<SystemId, BTreeMap<String, ThemeHypothesis>> =
            SystemId::ALL.iter().map(|s| (*s, BTreeMap::new())).collect();
        for (id, four) in votes {
            for (sys, h) in SystemId::ALL.iter().zip(four) {
                by_system.get_mut(sys).unwrap().insert(id.clone(), h);
            }
        }
        SystemOutputs::new(by_system).unwrap()
    }

    fn re_from(scores: &[(&str, f64)], order: &[ThemeLabel]) -> ReScore {
        let map: BTreeMap<ThemeLabel, f64> = order
            .iter()
            .map(|t| {
                let s = scores
                    .iter()
                    .find(|(name, _)| label(name) == *t)
                    .map(|(_, s)| *s)
                    .unwrap_or(0.0);
                (t.clone(), s)
            })
            .collect();
        ReScore::new(map.clone(), map, order)
    }

    fn standard_order() -> Vec<ThemeLabel> {
        ThemeSet::standard().labels().to_vec()
    }

    struct Fixture {
        outputs: SystemOutputs,
        partition: ConsensusPartition,
        base: BTreeMap<String, BTreeSet<ThemeLabel>>,
        re: BTreeMap<String, ReScore>,
        order: Vec<ThemeLabel>,
    }

    fn fixture(
        votes: Vec<(String, [ThemeHypothesis; 4])>,
        re: Vec<(&str, Vec<(&str, f64)>)>,
    ) -> Fixture {
        let order = standard_order();
        let outputs = outputs_from(votes);
        let part = partition(&outputs);
        let base = annotate(
            &outputs,
            &part,
            SurveyLevel::Maj2,
            &order,
            &CosineConfig::default(),
        );
        let re = re
            .into_iter()
            .map(|(id, scores)| (id.to_string(), re_from(&scores, &order)))
            .collect();
        Fixture {
            outputs,
            partition: part,
            base,
            re,
            order,
        }
    }

    fn run(fx: &Fixture, table: &CoherenceTable) -> RecoveryReport {
        apply_rules(
            &fx.outputs,
            &fx.partition,
            &fx.base,
            &fx.re,
            table,
            &standard_rules(),
            &fx.order,
            &CosineConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn standard_table_tiers() {
        let t = CoherenceTable::standard();
        let u = AgreementClass::Unanimous;
        let m = AgreementClass::ThreeOne;
        assert!(t.may_assert(u, &label("NVGO"), &label("TARF")));
        assert!(t.may_assert(u, &label("ITNR"), &label("HORR")));
        assert!(!t.may_assert(u, &label("ITNR"), &label("ETFC")));
        assert!(t.may_assert(m, &label("ITNR"), &label("ETFC")));
        assert!(t.may_assert(m, &label("OBJT"), &label("NVGO")));
        assert!(t.trash_recoverable(u, &label("PV")));
        assert!(!t.trash_recoverable(u, &label("VGC")));
        assert!(t.trash_recoverable(m, &label("VGC")));
        assert!(t.related(&label("PV"), &label("OBJT")));
        assert!(!t.related(&label("TRSH"), &label("OBJT")));
        assert_eq!(t.threshold(&label("NVGO")), 0.0);
    }

    #[test]
    fn majority_three_addition_follows_guard() {
        // Three systems found the lost-property theme; one also saw the
        // card theme, ranked second by the evidence with the base first.
        let votes = vec![(
            "x".to_string(),
            [
                hyp(&["OBJT", "NVGO"]),
                hyp(&["OBJT"]),
                hyp(&["OBJT"]),
                hyp(&["OBJT"]),
            ],
        )];
        let re = vec![("x", vec![("OBJT", 0.9), ("NVGO", 0.4)])];
        let fx = fixture(votes, re);
        assert_eq!(fx.base["x"], set(&["OBJT"]));

        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["x"], set(&["OBJT", "NVGO"]));
        assert_eq!(report.actions["x"].rule, RuleForm::MajorityThreeRepair);

        // The same precondition with the added theme below its threshold
        // leaves the annotation untouched.
        let mut strict = CoherenceTable::standard();
        strict.set_threshold(label("NVGO"), 0.5);
        let report = run(&fx, &strict);
        assert_eq!(report.annotations["x"], set(&["OBJT"]));
        assert!(report.actions.is_empty());
    }

    #[test]
    fn unanimous_addition_requires_strict_tier() {
        // All four agreed on the itinerary theme and the evidence puts the
        // schedule theme right behind it: the strict tier allows it.
        let votes = |id: &str| {
            (
                id.to_string(),
                [hyp(&["ITNR"]), hyp(&["ITNR"]), hyp(&["ITNR"]), hyp(&["ITNR"])],
            )
        };
        let fx = fixture(
            vec![votes("a"), votes("b")],
            vec![
                ("a", vec![("ITNR", 0.9), ("HORR", 0.5)]),
                // Traffic state is only coherent at the looser tier, so a
                // unanimous base must not pick it up.
                ("b", vec![("ITNR", 0.9), ("ETFC", 0.5)]),
            ],
        );
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["a"], set(&["ITNR", "HORR"]));
        assert_eq!(report.actions["a"].rule, RuleForm::UnanimousAddition);
        assert_eq!(report.annotations["b"], set(&["ITNR"]));
        assert!(!report.actions.contains_key("b"));
    }

    #[test]
    fn insertion_removed_when_ranked_low() {
        // The majority carries an extra schedule theme the dissenting
        // system dropped; the evidence ranks it far down → removed.
        let votes = vec![(
            "x".to_string(),
            [
                hyp(&["ITNR"]),
                hyp(&["ITNR", "HORR"]),
                hyp(&["ITNR", "HORR"]),
                hyp(&["ITNR", "HORR"]),
            ],
        )];
        let scores = vec![
            ("ITNR", 0.9),
            ("OBJT", 0.8),
            ("NVGO", 0.7),
            ("ETFC", 0.6),
            ("TARF", 0.5),
            ("PV", 0.45),
            ("VGC", 0.44),
            ("TRSH", 0.4),
            ("HORR", 0.01),
        ];
        let fx = fixture(votes.clone(), vec![("x", scores)]);
        assert_eq!(fx.base["x"], set(&["ITNR", "HORR"]));
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["x"], set(&["ITNR"]));

        // Ranked second instead: the theme stays.
        let fx = fixture(votes, vec![("x", vec![("ITNR", 0.9), ("HORR", 0.8)])]);
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["x"], set(&["ITNR", "HORR"]));
        assert!(report.actions.is_empty());
    }

    #[test]
    fn trash_recovery_by_tier() {
        let all_trash = |id: &str| {
            (
                id.to_string(),
                [hyp(&["TRSH"]), hyp(&["TRSH"]), hyp(&["TRSH"]), hyp(&["TRSH"])],
            )
        };
        let three_trash = |id: &str| {
            (
                id.to_string(),
                [hyp(&["ITNR"]), hyp(&["TRSH"]), hyp(&["TRSH"]), hyp(&["TRSH"])],
            )
        };
        let fx = fixture(
            vec![all_trash("a"), all_trash("b"), three_trash("c")],
            vec![
                ("a", vec![("PV", 0.6)]),
                // VGC is only a majority-tier target.
                ("b", vec![("VGC", 0.6)]),
                ("c", vec![("VGC", 0.6)]),
            ],
        );
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["a"], set(&["PV"]));
        assert_eq!(report.annotations["b"], set(&["TRSH"]));
        assert_eq!(report.annotations["c"], set(&["VGC"]));
        assert_eq!(report.actions["c"].rule, RuleForm::MajorityThreeRepair);
    }

    #[test]
    fn composition_of_two_and_three() {
        // 2+2 split between two coherent themes holding the top ranks.
        let two = (
            "two".to_string(),
            [hyp(&["ITNR"]), hyp(&["ITNR"]), hyp(&["ETFC"]), hyp(&["ETFC"])],
        );
        // 2+1+1 whose three co-present themes are mutually coherent and
        // hold the top three ranks.
        let three = (
            "three".to_string(),
            [hyp(&["ITNR"]), hyp(&["NVGO"]), hyp(&["OBJT"]), hyp(&["OBJT"])],
        );
        let fx = fixture(
            vec![two, three],
            vec![
                ("two", vec![("ITNR", 0.9), ("ETFC", 0.8)]),
                ("three", vec![("ITNR", 0.9), ("NVGO", 0.8), ("OBJT", 0.7)]),
            ],
        );
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["two"], set(&["ITNR", "ETFC"]));
        assert_eq!(report.actions["two"].rule, RuleForm::Composition);
        assert_eq!(
            report.annotations["three"],
            set(&["ITNR", "NVGO", "OBJT"])
        );
    }

    #[test]
    fn distinct_votes_settled_by_fifth_vote() {
        let votes = |id: &str| {
            (
                id.to_string(),
                [
                    hyp_scored(&["ITNR"], &[("ITNR", 1.0)]),
                    hyp(&["OBJT"]),
                    hyp(&["HORR"]),
                    hyp(&["NVGO"]),
                ],
            )
        };
        let fx = fixture(
            vec![votes("a"), votes("b")],
            vec![
                // The evidence leader matches one of the system votes.
                ("a", vec![("HORR", 0.9)]),
                // It matches nobody: the combined scores decide — only the
                // first system scored, peaking on the itinerary theme.
                ("b", vec![("TARF", 0.9)]),
            ],
        );
        // Four-way disagreements carry no survey annotation.
        assert!(!fx.base.contains_key("a"));
        let report = run(&fx, &CoherenceTable::standard());
        assert_eq!(report.annotations["a"], set(&["HORR"]));
        assert_eq!(report.annotations["b"], set(&["ITNR"]));
        assert_eq!(report.actions["a"].rule, RuleForm::DistinctVote);
        assert_eq!(report.actions["a"].before, None);
        assert!((report.coverage() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_pass_is_a_fixpoint() {
        let fx = fixture(
            vec![
                (
                    "add".to_string(),
                    [
                        hyp(&["OBJT", "NVGO"]),
                        hyp(&["OBJT"]),
                        hyp(&["OBJT"]),
                        hyp(&["OBJT"]),
                    ],
                ),
                (
                    "vote".to_string(),
                    [hyp(&["ITNR"]), hyp(&["OBJT"]), hyp(&["HORR"]), hyp(&["NVGO"])],
                ),
                (
                    "keep".to_string(),
                    [hyp(&["ETFC"]), hyp(&["ETFC"]), hyp(&["ETFC"]), hyp(&["ETFC"])],
                ),
            ],
            vec![
                ("add", vec![("OBJT", 0.9), ("NVGO", 0.4)]),
                ("vote", vec![("HORR", 0.9)]),
                ("keep", vec![("ETFC", 0.9)]),
            ],
        );
        let table = CoherenceTable::standard();
        let first = run(&fx, &table);
        assert_eq!(first.actions.len(), 2);
        // An unmatched unanimous conversation is untouched.
        assert_eq!(first.annotations["keep"], set(&["ETFC"]));

        let second = apply_rules(
            &fx.outputs,
            &fx.partition,
            &first.annotations,
            &fx.re,
            &table,
            &standard_rules(),
            &fx.order,
            &CosineConfig::default(),
        )
        .unwrap();
        assert!(second.actions.is_empty());
        assert_eq!(second.annotations, first.annotations);
    }

    #[test]
    fn bindings_narrow_rules_and_reject_unknown_themes() {
        let votes = vec![(
            "x".to_string(),
            [
                hyp(&["OBJT", "NVGO"]),
                hyp(&["OBJT"]),
                hyp(&["OBJT"]),
                hyp(&["OBJT"]),
            ],
        )];
        let re = vec![("x", vec![("OBJT", 0.9), ("NVGO", 0.4)])];
        let fx = fixture(votes, re);
        let table = CoherenceTable::standard();

        // A rule bound to a different added theme does not fire.
        let mut bound = RecoveryRule::new(RuleForm::MajorityThreeRepair);
        bound.added = Some(label("TARF"));
        let report = apply_rules(
            &fx.outputs,
            &fx.partition,
            &fx.base,
            &fx.re,
            &table,
            &[bound.clone()],
            &fx.order,
            &CosineConfig::default(),
        )
        .unwrap();
        assert!(report.actions.is_empty());

        bound.added = Some(label("ZZZZ"));
        let err = apply_rules(
            &fx.outputs,
            &fx.partition,
            &fx.base,
            &fx.re,
            &table,
            &[bound],
            &fx.order,
            &CosineConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::RuleUnknownTheme(t) if t == "ZZZZ"));
    }

    #[test]
    fn table_and_rule_files_round_trip() {
        let themes = ThemeSet::standard();
        let dir = tempfile::tempdir().unwrap();

        let table_path = dir.path().join("coherence.rules");
        let mut f = std::fs::File::create(&table_path).unwrap();
        writeln!(f, "# test table").unwrap();
        writeln!(f, "pair unanimous NVGO TARF").unwrap();
        writeln!(f, "pair majority ITNR ETFC").unwrap();
        writeln!(f, "trash unanimous PV").unwrap();
        writeln!(f, "cluster ITNR ETFC NVGO").unwrap();
        writeln!(f, "threshold TARF 0.25").unwrap();
        drop(f);
        let table = CoherenceTable::load(&table_path, &themes).unwrap();
        assert!(table.may_assert(AgreementClass::Unanimous, &label("NVGO"), &label("TARF")));
        assert!(!table.may_assert(AgreementClass::Unanimous, &label("ITNR"), &label("ETFC")));
        assert!(table.may_assert(AgreementClass::TwoOneOne, &label("ITNR"), &label("ETFC")));
        assert!(table.related(&label("NVGO"), &label("ITNR")));
        assert_eq!(table.threshold(&label("TARF")), 0.25);

        let rules_path = dir.path().join("recovery.rules");
        let mut f = std::fs::File::create(&rules_path).unwrap();
        writeln!(f, "rule unanimous_addition base=ITNR").unwrap();
        writeln!(f, "rule distinct_vote").unwrap();
        drop(f);
        let rules = load_rules(&rules_path, &themes).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].form, RuleForm::UnanimousAddition);
        assert_eq!(rules[0].base, Some(label("ITNR")));
        assert_eq!(rules[1].form, RuleForm::DistinctVote);

        let bad_path = dir.path().join("bad.rules");
        std::fs::write(&bad_path, "rule launch_missiles\n").unwrap();
        assert!(matches!(
            load_rules(&bad_path, &themes).unwrap_err(),
            Error::RuleParse { .. }
        ));
        let unknown_path = dir.path().join("unknown.rules");
        std::fs::write(&unknown_path, "rule composition base=ZZZZ\n").unwrap();
        assert!(matches!(
            load_rules(&unknown_path, &themes).unwrap_err(),
            Error::RuleUnknownTheme(_)
        ));
    }

    proptest! {
        /// Safety laws over random votes and evidence: annotations are
        /// never empty, multi-label assertions are mutually coherent and
        /// free of the reject class, unanimous conversations without an
        /// action are untouched, and a second pass changes nothing.
        #[test]
        fn recovery_safety_laws(
            votes in proptest::collection::vec(
                proptest::array::uniform4(
                    proptest::collection::btree_set(0usize..5, 1..3),
                ),
                1..20,
            ),
            score_seed in proptest::collection::vec(0.0f64..1.0, 20 * 9),
        ) {
            let order = standard_order();
            let pick = ["ITNR", "OBJT", "NVGO", "ETFC", "TRSH"];
            let entries: Vec<(String, [ThemeHypothesis; 4])> = votes
                .iter()
                .enumerate()
                .map(|(i, four)| {
                    let to_hyp = |s: &BTreeSet<usize>| {
                        hyp(&s.iter().map(|&j| pick[j]).collect::<Vec<_>>())
                    };
                    (
                        format!("c{i}"),
                        [
                            to_hyp(&four[0]),
                            to_hyp(&four[1]),
                            to_hyp(&four[2]),
                            to_hyp(&four[3]),
                        ],
                    )
                })
                .collect();
            let n = entries.len();
            let outputs = outputs_from(entries);
            let part = partition(&outputs);
            let base = annotate(
                &outputs,
                &part,
                SurveyLevel::Maj2,
                &order,
                &CosineConfig::default(),
            );
            let re: BTreeMap<String, ReScore> = (0..n)
                .map(|i| {
                    let scores: BTreeMap<ThemeLabel, f64> = order
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            (t.clone(), score_seed[(i * 9 + j) % score_seed.len()])
                        })
                        .collect();
                    (format!("c{i}"), ReScore::new(scores.clone(), scores, &order))
                })
                .collect();
            let table = CoherenceTable::standard();
            let report = apply_rules(
                &outputs,
                &part,
                &base,
                &re,
                &table,
                &standard_rules(),
                &order,
                &CosineConfig::default(),
            ).unwrap();

            for labels in report.annotations.values() {
                prop_assert!(!labels.is_empty());
            }
            let trash = label("TRSH");
            for action in report.actions.values() {
                let grew = match &action.before {
                    Some(before) => !action.after.is_subset(before),
                    None => true,
                };
                if action.after.len() > 1 && grew {
                    prop_assert!(!action.after.contains(&trash));
                    for a in &action.after {
                        for b in &action.after {
                            prop_assert!(a == b || table.related(a, b));
                        }
                    }
                }
            }
            for id in part.members(AgreementClass::Unanimous) {
                if !report.actions.contains_key(id) {
                    prop_assert_eq!(&report.annotations[id], &base[id]);
                }
            }

            let second = apply_rules(
                &outputs,
                &part,
                &report.annotations,
                &re,
                &table,
                &standard_rules(),
                &order,
                &CosineConfig::default(),
            ).unwrap();
            prop_assert!(second.actions.is_empty());
            prop_assert_eq!(second.annotations, report.annotations);
        }
    }
}
