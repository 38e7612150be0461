//! The six subcommands, each a thin orchestration of core-crate calls:
//! resolve inputs, run, write files, print a one-screen summary.  All
//! emitted maps are ordered (sorted keys), so reruns over the same inputs
//! produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use theme_survey::corpus::{Corpus, LatticeSet, ThemeLabel};
use theme_survey::density::{
    density_profile, export_skeleton, position_contributions,
};
use theme_survey::eval::evaluate;
use theme_survey::features::{normalize, positional_sequence};
use theme_survey::model::ModelBundle;
use theme_survey::pipeline::{
    classify, evaluate_recovery, train, TrainOptions,
};
use theme_survey::strategy::{
    annotate, linear_combination, partition, survey_report, SurveyLevel,
};
use theme_survey::synth::{generate, GeneratorSpec};
use theme_survey::SystemId;

use crate::config::{
    require, resolve_systems, resolve_themes, Cli, Command, FileConfig,
    UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::from_env()?;
    if let Some(n) = cli.workers.or(cfg.workers) {
        if n == 0 {
            bail!(UsageError("--workers must be at least 1".into()));
        }
        // Ignore a second initialization (e.g. library users re-entering):
        // the pool is process-global and set-once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Classify(args) => cmd_classify(args, &cfg),
        Command::Survey(args) => cmd_survey(args, &cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
        Command::Skeleton(args) => cmd_skeleton(args, &cfg),
        Command::Synth(args) => cmd_synth(args, &cfg),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .with_context(|| format!("serializing {}", path.display()))?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating directory {}", path.display()))
}

/// Label sets per conversation for one system, ready for JSON emission.
fn label_map(
    outputs: &theme_survey::strategy::SystemOutputs,
    system: SystemId,
) -> BTreeMap<String, BTreeSet<ThemeLabel>> {
    outputs
        .ids()
        .into_iter()
        .map(|id| {
            let hyp = outputs
                .get(system, id)
                .expect("construction guarantees full coverage");
            (id.to_string(), hyp.labels.clone())
        })
        .collect()
}

fn cmd_train(args: crate::config::TrainArgs, cfg: &FileConfig) -> Result<()> {
    let train_path = require(args.train.or_else(|| cfg.train.clone()), "train")?;
    let model_path = require(args.model.or_else(|| cfg.model.clone()), "model")?;
    let themes = resolve_themes(args.themes.as_deref(), cfg.themes.as_deref())?;

    let mut opts = TrainOptions::default();
    if let Some(lambda) = args.lambda.or(cfg.lambda) {
        opts.density.lambda = lambda;
    }
    if let Some(rho) = args.rho.or(cfg.rho) {
        opts.cosine.rho = rho;
    }
    if let Some(v) = args.v.or(cfg.v) {
        opts.density.v = v;
    }

    let corpus = Corpus::load(&train_path, Some(&themes), true)?;
    let bundle = train(&corpus, &themes, &opts)?;
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    bundle.save(&model_path)?;

    println!(
        "trained on {} conversations, {} themes, {} selected features",
        corpus.len(),
        themes.labels().len(),
        bundle.poisson.features.len(),
    );
    println!("model bundle: {}", model_path.display());

    if let Some(dev_path) = args.dev.or_else(|| cfg.dev.clone()) {
        let dev = Corpus::load(&dev_path, Some(&themes), true)?;
        let outputs = classify(&bundle, &dev)?;
        println!("development set ({} conversations):", dev.len());
        for sys in SystemId::ALL {
            let metrics = evaluate(&label_map(&outputs, sys), &dev)?;
            println!(
                "  {:<8} exact {:.3}  f {:.3}",
                sys.name(),
                metrics.acc1,
                metrics.f_score
            );
        }
    }
    Ok(())
}

fn cmd_classify(
    args: crate::config::ClassifyArgs,
    cfg: &FileConfig,
) -> Result<()> {
    let model_path = require(args.model.or_else(|| cfg.model.clone()), "model")?;
    let test_path = require(args.test.or_else(|| cfg.test.clone()), "test")?;
    let out_dir = require(args.out.or_else(|| cfg.out.clone()), "out")?;
    let systems =
        resolve_systems(args.systems.as_deref(), cfg.systems.as_deref())?;

    let bundle = ModelBundle::load(&model_path)?;
    let corpus = Corpus::load(&test_path, Some(&bundle.themes), false)?;
    let outputs = classify(&bundle, &corpus)?;

    let mut emitted: BTreeMap<String, BTreeMap<String, BTreeSet<ThemeLabel>>> =
        BTreeMap::new();
    for sys in &systems {
        emitted.insert(sys.name().to_string(), label_map(&outputs, *sys));
    }
    // The equal-weight combination only makes sense over the full panel.
    if systems.len() == SystemId::ALL.len() {
        let order = bundle.themes.labels();
        let combined: BTreeMap<String, BTreeSet<ThemeLabel>> = outputs
            .ids()
            .into_iter()
            .map(|id| {
                let votes = outputs
                    .votes(id)
                    .expect("construction guarantees full coverage");
                let hyp = linear_combination(&votes, order, &bundle.cosine);
                (id.to_string(), hyp.labels)
            })
            .collect();
        emitted.insert("combined".to_string(), combined);
    }

    ensure_dir(&out_dir)?;
    let out_path = out_dir.join("hypotheses.json");
    write_json(&out_path, &emitted)?;
    println!(
        "classified {} conversations with {} system(s): {}",
        corpus.len(),
        emitted.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_survey(args: crate::config::SurveyArgs, cfg: &FileConfig) -> Result<()> {
    let model_path = require(args.model.or_else(|| cfg.model.clone()), "model")?;
    let test_path = require(args.test.or_else(|| cfg.test.clone()), "test")?;
    let out_dir = require(args.out.or_else(|| cfg.out.clone()), "out")?;
    let level = match args.level {
        Some(level) => level,
        None => match cfg.level.as_deref() {
            Some(name) => crate::config::parse_level(name)
                .map_err(UsageError)?,
            None => SurveyLevel::Maj2,
        },
    };
    let recover_enabled = args.recover || cfg.recover.unwrap_or(false);
    let lattices_path = args.lattices.clone().or_else(|| cfg.lattices.clone());

    let bundle = ModelBundle::load(&model_path)?;
    let corpus = Corpus::load(&test_path, Some(&bundle.themes), true)?;
    let lattices = match &lattices_path {
        Some(p) => Some(LatticeSet::load(p)?),
        None => None,
    };

    let outputs = classify(&bundle, &corpus)?;
    let part = partition(&outputs);
    let order = bundle.themes.labels();
    let report = survey_report(&outputs, &part, &corpus, order, &bundle.cosine)?;

    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("survey.json"), &report)?;
    write_json(&out_dir.join("partition.json"), &part)?;
    let annotations = annotate(&outputs, &part, level, order, &bundle.cosine);
    write_json(&out_dir.join("annotations.json"), &annotations)?;
    print!("{report}");
    println!("annotated {} of {} at {}", annotations.len(), part.total(), level);

    if recover_enabled {
        let eval =
            evaluate_recovery(&bundle, &corpus, &outputs, lattices.as_ref())?;
        write_json(&out_dir.join("recovery.json"), &eval.report)?;
        #[derive(Serialize)]
        struct RecoverySummary {
            base_acc1: f64,
            base_coverage: f64,
            recovered_acc1: f64,
            recovered_coverage: f64,
            deletion_errors_before: usize,
            deletion_errors_fixed: usize,
        }
        let summary = RecoverySummary {
            base_acc1: eval.base.acc1,
            base_coverage: eval.base_coverage,
            recovered_acc1: eval.recovered.acc1,
            recovered_coverage: eval.recovered_coverage,
            deletion_errors_before: eval.deletion_errors_before,
            deletion_errors_fixed: eval.deletion_errors_fixed,
        };
        write_json(&out_dir.join("recovery_eval.json"), &summary)?;
        println!(
            "repair: exact {:.3} @ cov {:.3} -> {:.3} @ cov {:.3} ({} of {} missing-theme errors fixed)",
            summary.base_acc1,
            summary.base_coverage,
            summary.recovered_acc1,
            summary.recovered_coverage,
            summary.deletion_errors_fixed,
            summary.deletion_errors_before,
        );
    }
    Ok(())
}

/// Reads a hypothesis file: either a flat `{id: [labels]}` object or a
/// nested `{system: {id: [labels]}}` one selected with `--system`.
fn read_hypotheses(
    path: &Path,
    system: Option<&str>,
) -> Result<BTreeMap<String, BTreeSet<ThemeLabel>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let Value::Object(top) = &value else {
        bail!("{}: expected a JSON object", path.display());
    };

    let chosen: Value = match system {
        Some(key) => top.get(key).cloned().ok_or_else(|| {
            let available: Vec<&String> = top.keys().collect();
            UsageError(format!(
                "no `{key}` entry in {} (available: {available:?})",
                path.display()
            ))
        })?,
        None => {
            let nested = top.values().all(|v| v.is_object());
            if nested && !top.is_empty() {
                let available: Vec<&String> = top.keys().collect();
                bail!(UsageError(format!(
                    "{} is a per-system file; pick one with --system (available: {available:?})",
                    path.display()
                )));
            }
            value.clone()
        }
    };
    serde_json::from_value(chosen)
        .with_context(|| format!("decoding label sets from {}", path.display()))
}

fn cmd_eval(args: crate::config::EvalArgs, cfg: &FileConfig) -> Result<()> {
    let hyp_path = require(args.hyp, "hyp")?;
    let test_path = require(args.test.or_else(|| cfg.test.clone()), "test")?;

    let hypotheses = read_hypotheses(&hyp_path, args.system.as_deref())?;
    let corpus = Corpus::load(&test_path, None, true)?;
    let metrics = evaluate(&hypotheses, &corpus)?;
    print!("{metrics}");
    if let Some(out) = args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        write_json(&out, &metrics)?;
        println!("metrics: {}", out.display());
    }
    Ok(())
}

fn cmd_skeleton(
    args: crate::config::SkeletonArgs,
    cfg: &FileConfig,
) -> Result<()> {
    let model_path = require(args.model.or_else(|| cfg.model.clone()), "model")?;
    let test_path = require(args.test.or_else(|| cfg.test.clone()), "test")?;
    let out_dir = require(args.out.or_else(|| cfg.out.clone()), "out")?;
    let lambda = args.lambda.or(cfg.lambda);

    let bundle = ModelBundle::load(&model_path)?;
    let corpus = Corpus::load(&test_path, Some(&bundle.themes), false)?;
    let order = bundle.themes.labels();
    let lambda = lambda.unwrap_or(bundle.density.lambda);

    let selected: Vec<&theme_survey::Conversation> = match &args.id {
        Some(id) => {
            let conv = corpus.get(id).ok_or_else(|| {
                UsageError(format!("no conversation `{id}` in {}", test_path.display()))
            })?;
            vec![conv]
        }
        None => corpus.conversations().iter().collect(),
    };

    ensure_dir(&out_dir)?;
    for &conv in &selected {
        let tokens = normalize(conv, &bundle.feature_config);
        let seq = positional_sequence(
            &conv.id,
            &tokens,
            bundle.feature_config.max_gap,
            None,
        );
        let contribs = position_contributions(&seq, &bundle.weights);
        let profile = density_profile(&conv.id, order, &contribs, lambda)?;
        export_skeleton(&profile, order, out_dir.join(format!("{}.tsv", conv.id)))?;
    }
    println!(
        "wrote {} density profile(s) at lambda {} to {}",
        selected.len(),
        lambda,
        out_dir.display()
    );
    Ok(())
}

fn cmd_synth(args: crate::config::SynthArgs, cfg: &FileConfig) -> Result<()> {
    let out_dir = require(args.out.or_else(|| cfg.out.clone()), "out")?;
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<GeneratorSpec>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => GeneratorSpec::default(),
    };
    if let Some(seed) = args.seed.or(cfg.seed) {
        spec.seed = seed;
    }
    if let Some(rho) = args.rho.or(cfg.rho) {
        spec.noise = rho;
    }

    let output = generate(&spec)?;
    ensure_dir(&out_dir)?;
    output.train.save(out_dir.join("train.jsonl"))?;
    output.dev.save(out_dir.join("dev.jsonl"))?;
    output.test.save(out_dir.join("test.jsonl"))?;
    output.lattices.save(out_dir.join("lattices.jsonl"))?;
    write_json(&out_dir.join("spec.json"), &spec)?;
    write_json(&out_dir.join("summary.json"), &output.summary)?;
    println!(
        "generated {}/{}/{} train/dev/test conversations (seed {}) in {}",
        output.train.len(),
        output.dev.len(),
        output.test.len(),
        spec.seed,
        out_dir.display()
    );
    Ok(())
}
