//! Flag and config-file plumbing.
//!
//! Every path or parameter can come from three places, in falling
//! precedence: the command line, the JSON file named by the
//! `THEME_SURVEY_CONFIG` environment variable, and the built-in default.
//! Each subcommand resolves only the fields it needs, so a config file can
//! hold a whole project's paths while individual invocations override one
//! or two of them.

use std::env;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use theme_survey::corpus::{ThemeSet, TRASH_LABEL};
use theme_survey::strategy::SurveyLevel;
use theme_survey::SystemId;

/// Environment variable naming a JSON file with default values for the
/// flags below.
pub const CONFIG_ENV: &str = "THEME_SURVEY_CONFIG";

/// A bad invocation rather than a failed run: exits with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "theme-survey",
    version,
    about = "Multi-label theme identification over two-party conversation transcripts",
    after_help = "Set THEME_SURVEY_CONFIG to a JSON file to supply defaults for any flag."
)]
pub struct Cli {
    /// Worker threads for corpus-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model bundle from a labeled corpus.
    Train(TrainArgs),
    /// Run all four classifiers over a corpus and write their hypotheses.
    Classify(ClassifyArgs),
    /// Partition by cross-system agreement, report per-level quality, and
    /// optionally repair the widest level.
    Survey(SurveyArgs),
    /// Score a hypothesis file against gold annotations.
    Eval(EvalArgs),
    /// Export per-position theme-density curves as tab-separated values.
    Skeleton(SkeletonArgs),
    /// Generate a synthetic corpus with planted themes and noise.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled training corpus (JSON lines).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Optional labeled development corpus: reported on after training.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Where to write the model bundle.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated theme inventory (default: the built-in one).
    #[arg(long)]
    pub themes: Option<String>,
    /// Density decay parameter λ (≥ 1).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Cosine relative threshold ρ.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Density dominance-share threshold v.
    #[arg(long)]
    pub v: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Trained model bundle.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus to classify (gold labels optional).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of systems to emit
    /// (cosine,density,hmm,poisson; default all four plus the combination).
    #[arg(long)]
    pub systems: Option<String>,
}

#[derive(Debug, Args)]
pub struct SurveyArgs {
    /// Trained model bundle.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Gold-labeled corpus to survey.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Word lattices for the repair stage (JSON lines).
    #[arg(long)]
    pub lattices: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Agreement level whose annotations are written out.
    #[arg(long, value_parser = parse_level)]
    pub level: Option<SurveyLevel>,
    /// Also repair the widest level and write the repair reports.
    #[arg(long)]
    pub recover: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Hypothesis file: a JSON object mapping conversation ids to label
    /// arrays, or a per-system nesting of such objects (pick with
    /// --system).
    #[arg(long)]
    pub hyp: Option<PathBuf>,
    /// Gold-labeled corpus.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Key to pick from a nested hypothesis file (e.g. cosine, combined).
    #[arg(long)]
    pub system: Option<String>,
    /// Optional path for the metrics report (JSON); always printed too.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SkeletonArgs {
    /// Trained model bundle.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus to profile (gold labels optional).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory (one TSV per conversation).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the bundle's density decay λ for this export.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Profile a single conversation instead of the whole corpus.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (JSON); omitted means the built-in benchmark spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the spec's random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the spec's transcript noise rate (0..=1).
    #[arg(long)]
    pub rho: Option<f64>,
}

/// Defaults file named by [`CONFIG_ENV`]; every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lattices: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub themes: Option<Vec<String>>,
    pub systems: Option<Vec<String>>,
    pub level: Option<String>,
    pub recover: Option<bool>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub v: Option<f64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    /// Loads the file named by the environment variable, if any.  A named
    /// but unreadable or malformed file is an error — silently ignoring a
    /// requested config would misconfigure runs.
    pub fn from_env() -> Result<FileConfig> {
        let Some(path) = env::var_os(CONFIG_ENV) else {
            return Ok(FileConfig::default());
        };
        let path = PathBuf::from(path);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {CONFIG_ENV} file {}", path.display()))?;
        let cfg = serde_json::from_str(&text)
            .with_context(|| format!("parsing {CONFIG_ENV} file {}", path.display()))?;
        Ok(cfg)
    }
}

/// Missing required value after merging flags and the config file.
pub fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        UsageError(format!(
            "missing required --{flag} (flag or {CONFIG_ENV} entry)"
        ))
        .into()
    })
}

pub fn parse_level(s: &str) -> std::result::Result<SurveyLevel, String> {
    match s {
        "maj4" => Ok(SurveyLevel::Maj4),
        "maj3" => Ok(SurveyLevel::Maj3),
        "maj2" => Ok(SurveyLevel::Maj2),
        other => Err(format!("unknown level `{other}` (maj4, maj3, maj2)")),
    }
}

/// Builds the theme inventory from a comma-separated flag value, a config
/// list, or the built-in default.  The reject class is appended when
/// absent so every inventory can express a rejection.
pub fn resolve_themes(
    flag: Option<&str>,
    file: Option<&[String]>,
) -> Result<ThemeSet> {
    let names: Vec<String> = match (flag, file) {
        (Some(s), _) => s.split(',').map(|n| n.trim().to_string()).collect(),
        (None, Some(list)) => list.to_vec(),
        (None, None) => return Ok(ThemeSet::standard()),
    };
    let mut names: Vec<String> =
        names.into_iter().filter(|n| !n.is_empty()).collect();
    if !names.iter().any(|n| n == TRASH_LABEL) {
        names.push(TRASH_LABEL.to_string());
    }
    Ok(ThemeSet::from_names(&names)?)
}

/// Parses the enabled-system subset; empty selections are invalid.
pub fn resolve_systems(
    flag: Option<&str>,
    file: Option<&[String]>,
) -> Result<Vec<SystemId>> {
    let names: Vec<String> = match (flag, file) {
        (Some(s), _) => s.split(',').map(|n| n.trim().to_string()).collect(),
        (None, Some(list)) => list.to_vec(),
        (None, None) => {
            return Ok(SystemId::ALL.to_vec());
        }
    };
    let mut systems = Vec::new();
    for name in names.iter().filter(|n| !n.is_empty()) {
        let sys: SystemId = name
            .parse()
            .map_err(|_| UsageError(format!("unknown system `{name}`")))?;
        if !systems.contains(&sys) {
            systems.push(sys);
        }
    }
    if systems.is_empty() {
        return Err(UsageError("no systems enabled".into()).into());
    }
    Ok(systems)
}
