//! Position-local classifier via thematic density profiles.
//!
//! Every position of a conversation receives, per theme, a contribution: the
//! normalized sum of the trained weights of the features anchored there.
//! The *density* of a theme at position `i` is then the distance-discounted
//! weighted average of all contributions, with geometric discount
//! `1/lambda^|i-j|` — `lambda` close to 1 smooths widely, large `lambda`
//! localizes.
//!
//! Computed naively this is quadratic in the number of positions.  The
//! production path instead folds left-sums, right-sums and normalization
//! masses with three linear recurrences ([`density_row`]); the quadratic
//! form is retained as [`density_row_direct`] purely as a reference for
//! equivalence testing.
//!
//! The decision marks a theme as discussed when it is the (tie-broken)
//! density leader somewhere and the mass it leads covers at least a `v`
//! share of the total leading mass.  The largest-share theme is always kept,
//! so the hypothesis is empty only for an all-zero profile, which falls back
//! to the reject class.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ThemeLabel, TRASH_LABEL};
use crate::error::{Error, Result};
use crate::features::{PositionalSequence, ThemeWeightTable};
use crate::hypothesis::ThemeHypothesis;

/// Density smoothing and decision parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    /// Proximity sensitivity, ≥ 1.  The default 1.04 keeps a word's
    /// influence felt tens of positions away; values like 3 confine it to
    /// immediate neighbors.
    pub lambda: f64,
    /// Minimum share of the total leading density mass a theme must hold.
    /// Tuned on the development split; 0.3 is a serviceable starting point.
    pub v: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig { lambda: 1.04, v: 0.3 }
    }
}

/// Per-theme density sequences for one conversation, with the tie-broken
/// density leader at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub conversation_id: String,
    pub n: usize,
    /// Theme order = tie-breaking order of the model.
    pub themes: Vec<ThemeLabel>,
    pub densities: BTreeMap<ThemeLabel, Vec<f64>>,
    /// Index into `themes` of the leader at each position (first theme on
    /// ties, including the all-zero tie).
    pub dominant: Vec<usize>,
}

/// Per-theme positional contributions: the sum of anchored feature weights,
/// scaled by the inverse of the theme's vector norm.  Themes with an empty
/// weight vector are skipped entirely — they can never score.
pub fn position_contributions(
    seq: &PositionalSequence,
    weights: &ThemeWeightTable,
) -> BTreeMap<ThemeLabel, Vec<f64>> {
    let mut out = BTreeMap::new();
    for t in weights.themes() {
        let norm = weights.norm(t);
        if norm == 0.0 {
            continue;
        }
        let row: Vec<f64> = seq
            .bundles
            .iter()
            .map(|bundle| {
                bundle.iter().map(|f| weights.weight(t, f)).sum::<f64>() / norm
            })
            .collect();
        out.insert(t.clone(), row);
    }
    out
}

/// Linear-time density computation for one theme's contribution row.
///
/// Maintains three recurrences while sweeping the row: the discounted sum of
/// contributions strictly left of `i`, the same strictly right of `i`, and
/// the discounted count of positions on one side (the right-hand count at
/// `i` equals the left-hand count at the mirrored position, so one array
/// serves both sides).
pub fn density_row(w: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda < 1.0 || !lambda.is_finite() {
        return Err(Error::InvalidLambda(lambda));
    }
    let n = w.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut left = vec![0.0; n];
    let mut nl = vec![0.0; n];
    for i in 1..n {
        left[i] = (left[i - 1] + w[i - 1]) / lambda;
        nl[i] = (nl[i - 1] + 1.0) / lambda;
    }
    let mut right = vec![0.0; n];
    for i in (0..n - 1).rev() {
        right[i] = (right[i + 1] + w[i + 1]) / lambda;
    }
    Ok((0..n)
        .map(|i| (left[i] + w[i] + right[i]) / (nl[i] + 1.0 + nl[n - 1 - i]))
        .collect())
}

/// Direct quadratic evaluation of the same quantity: for each position, sum
/// every contribution discounted by `1/lambda^distance` and divide by the
/// discounted position count.  Reference implementation for tests — O(n²),
/// do not use on real conversations.
pub fn density_row_direct(w: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda < 1.0 || !lambda.is_finite() {
        return Err(Error::InvalidLambda(lambda));
    }
    let n = w.len();
    Ok((0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let discount = lambda.powi(-(i.abs_diff(j) as i32));
                num += wj * discount;
                den += discount;
            }
            num / den
        })
        .collect())
}

/// Computes the full profile from per-theme contributions.
pub fn density_profile(
    conversation_id: &str,
    themes: &[ThemeLabel],
    contribs: &BTreeMap<ThemeLabel, Vec<f64>>,
    lambda: f64,
) -> Result<DensityProfile> {
    let n = contribs.values().next().map(|r| r.len()).unwrap_or(0);
    let mut densities = BTreeMap::new();
    for (t, row) in contribs {
        densities.insert(t.clone(), density_row(row, lambda)?);
    }

    // Leader per position: highest density, first theme in inventory order
    // on ties.  Themes without a density row (zero-norm) never lead.
    let mut dominant = vec![0usize; n];
    for (i, slot) in dominant.iter_mut().enumerate() {
        let mut best_idx = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (idx, t) in themes.iter().enumerate() {
            let d = densities.get(t).map(|row| row[i]).unwrap_or(f64::MIN);
            if d > best {
                best = d;
                best_idx = idx;
            }
        }
        *slot = best_idx;
    }
    Ok(DensityProfile {
        conversation_id: conversation_id.to_owned(),
        n,
        themes: themes.to_vec(),
        densities,
        dominant,
    })
}

/// Per-theme share of the total leading density mass.  Shares are the
/// decision scores: they sum to 1 whenever any mass exists.
pub fn dominance_shares(profile: &DensityProfile) -> BTreeMap<ThemeLabel, f64> {
    let mut mass: BTreeMap<&ThemeLabel, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (i, &leader) in profile.dominant.iter().enumerate() {
        let t = &profile.themes[leader];
        let d = profile.densities.get(t).map(|row| row[i]).unwrap_or(0.0);
        if d > 0.0 {
            *mass.entry(t).or_insert(0.0) += d;
            total += d;
        }
    }
    profile
        .themes
        .iter()
        .map(|t| {
            let share = if total > 0.0 {
                mass.get(t).copied().unwrap_or(0.0) / total
            } else {
                0.0
            };
            (t.clone(), share)
        })
        .collect()
}

/// Applies the dominance decision: themes leading somewhere with a mass
/// share of at least `v`.  The largest share is always kept; an all-zero
/// profile falls back to the reject class.
pub fn density_decide(profile: &DensityProfile, v: f64) -> ThemeHypothesis {
    let shares = dominance_shares(profile);
    decide_from_shares(&shares, &profile.themes, v)
}

/// Decision rule applied directly to a precomputed share map — lets
/// threshold sweeps reuse cached shares instead of rebuilding profiles.
pub fn decide_from_shares(
    shares: &BTreeMap<ThemeLabel, f64>,
    order: &[ThemeLabel],
    v: f64,
) -> ThemeHypothesis {
    let best = order
        .iter()
        .fold(None::<(&ThemeLabel, f64)>, |acc, t| {
            let s = shares.get(t).copied().unwrap_or(0.0);
            match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((t, s)),
            }
        });
    let best_theme = match best {
        Some((t, s)) if s > 0.0 => t,
        _ => {
            return ThemeHypothesis::fallback(
                ThemeLabel::new(TRASH_LABEL),
                shares.clone(),
            )
        }
    };

    let mut labels: std::collections::BTreeSet<ThemeLabel> = shares
        .iter()
        .filter(|(_, &s)| s > 0.0 && s >= v)
        .map(|(t, _)| t.clone())
        .collect();
    labels.insert(best_theme.clone());
    ThemeHypothesis::new(labels, shares.clone())
}

/// Writes the profile as tab-separated values — one row per position, one
/// column per requested theme — ready for plotting.
pub fn export_skeleton(
    profile: &DensityProfile,
    themes: &[ThemeLabel],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("position");
    for t in themes {
        header.push('\t');
        header.push_str(t.as_str());
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for i in 0..profile.n {
        let mut row = format!("{}", i + 1);
        for t in themes {
            let d = profile.densities.get(t).map(|r| r[i]).unwrap_or(0.0);
            row.push('\t');
            row.push_str(&format!("{d:.6}"));
        }
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
