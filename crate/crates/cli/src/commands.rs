use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;

use conslab::analysis::{discordant_counts, mcnemar, representation_study, TestResult};
use conslab::experiment::{pretraining_corpus, run_experiment, ExperimentConfig, ExperimentOutcome};
use conslab::metrics::{relation_report, AggregateMode, PredictionTable, SuiteSummary};
use conslab::probe::{
    prediction_records, prepare_suite, probe_suite, tuple_correctness, PredictionRecord, Suite,
};
use conslab::report::{resource_fingerprint, to_json, write_json, write_jsonl, FilterSummary, ProbeReport};
use conslab::resource::{
    build_candidates, build_vocabulary, generate_synth_kb, load_resource, load_tuples, split_relations,
    write_synth_kb, KBTuple, Relation, ResourceStats, TupleLoad,
};
use conslab::scorer::{BridgeEndpoint, BridgeScorer, MajorityScorer, Scorer, ToyDims, ToyMLM, ToyParams};
use conslab::trainer::{self, select_lambda, PretrainConfig, TrainConfig};
use conslab::Error;

use crate::{
    AggregateChoice, AnalyzeArgs, CompareArgs, ExperimentArgs, GenSynthArgs, PretrainArgs, ProbeArgs, TrainArgs,
    ValidateArgs,
};

type CmdResult = anyhow::Result<ExitCode>;

/// 2 for bad input, 1 for failures surfaced by a run (divergence, scorer or
/// bridge errors).
pub fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Diverged { .. } | Error::Scorer { .. } | Error::Bridge(_)) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

/// RFC 3339 UTC, or `CONSLAB_TIMESTAMP` when set.
fn timestamp() -> String {
    std::env::var("CONSLAB_TIMESTAMP")
        .unwrap_or_else(|_| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    match out {
        Some(path) => write_json(path, value)?,
        None => print!("{}", to_json(value)?),
    }
    Ok(())
}

fn load_inputs(resource: &Path, tuples: &Path) -> anyhow::Result<(Vec<Relation>, TupleLoad)> {
    let relations = load_resource(resource)?;
    let loaded = load_tuples(tuples, &relations)?;
    for e in &loaded.line_errors {
        eprintln!("warning: {}:{}: {}", tuples.display(), e.line, e.msg);
    }
    if loaded.rejected_unknown_relation > 0 {
        eprintln!(
            "warning: {} tuples name relations missing from the resource",
            loaded.rejected_unknown_relation
        );
    }
    Ok((relations, loaded))
}

enum ScorerSpec {
    Majority,
    Toy(PathBuf),
    Bridge(String),
}

fn parse_scorer(spec: &str) -> anyhow::Result<ScorerSpec> {
    if spec == "majority" {
        return Ok(ScorerSpec::Majority);
    }
    if let Some(path) = spec.strip_prefix("toy:") {
        return Ok(ScorerSpec::Toy(PathBuf::from(path)));
    }
    if let Some(endpoint) = spec.strip_prefix("bridge:") {
        return Ok(ScorerSpec::Bridge(endpoint.to_owned()));
    }
    Err(Error::Invalid(format!(
        "unknown scorer {spec:?}; expected majority, toy:<checkpoint> or bridge:<endpoint>"
    )))?
}

fn build_scorer(spec: &str, tuples: &[KBTuple], bridge_override: Option<&str>) -> anyhow::Result<Box<dyn Scorer>> {
    Ok(match parse_scorer(spec)? {
        ScorerSpec::Majority => Box::new(MajorityScorer::from_tuples(tuples)),
        ScorerSpec::Toy(path) => Box::new(ToyMLM::load(&path)?),
        ScorerSpec::Bridge(endpoint) => {
            Box::new(BridgeScorer::connect(&BridgeEndpoint::resolve(&endpoint, bridge_override)?)?)
        }
    })
}

fn load_toy(spec: &str) -> anyhow::Result<ToyMLM> {
    match parse_scorer(spec)? {
        ScorerSpec::Toy(path) => Ok(ToyMLM::load(&path)?),
        _ => Err(Error::Invalid(format!("training needs a toy checkpoint (toy:<path>), got {spec:?}")))?,
    }
}

fn filter_summary(suite: &Suite) -> FilterSummary {
    FilterSummary {
        retained: suite.retained,
        removed: suite.removed,
        dropped_relations: suite.dropped_relations.clone(),
    }
}

fn reports_for(tables: &[PredictionTable]) -> anyhow::Result<Vec<conslab::metrics::RelationReport>> {
    Ok(tables.iter().map(relation_report).collect::<Result<_, _>>()?)
}

fn print_summary(report: &ProbeReport, choice: AggregateChoice) {
    let print = |s: &SuiteSummary| {
        let fmt = |m: &Option<conslab::metrics::MetricSummary>| match m {
            Some(m) => match m.std {
                Some(sd) => format!("{:.1}±{:.1}", 100.0 * m.mean, 100.0 * sd),
                None => format!("{:.1}", 100.0 * m.mean),
            },
            None => "n/a".into(),
        };
        let mode = match s.mode {
            AggregateMode::Macro => "macro",
            AggregateMode::Micro => "micro",
        };
        println!(
            "{mode}: consistency {} accuracy {} consistent-acc {} determinism {}",
            fmt(&s.consistency),
            fmt(&s.accuracy),
            fmt(&s.consistent_acc),
            fmt(&s.determinism)
        );
    };
    if choice != AggregateChoice::Micro {
        print(&report.macro_summary);
    }
    if choice != AggregateChoice::Macro {
        print(&report.micro_summary);
    }
}

pub fn validate(args: &ValidateArgs) -> CmdResult {
    let relations = load_resource(&args.resource)?;
    let stats = ResourceStats::compute(&relations).context("the resource holds no relations")?;
    let mut out = json!({ "resource": args.resource, "statistics": stats });
    let mut failed = false;
    if let Some(path) = &args.tuples {
        let loaded = load_tuples(path, &relations)?;
        failed = !loaded.line_errors.is_empty() || loaded.rejected_unknown_relation > 0;
        out["tuples"] = json!({
            "accepted": loaded.tuples.len(),
            "rejected_unknown_relation": loaded.rejected_unknown_relation,
            "line_errors": loaded.line_errors.iter().map(|e| json!({"line": e.line, "msg": e.msg})).collect::<Vec<_>>(),
        });
    }
    emit(args.out.as_deref(), &out)?;
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

pub fn probe(args: &ProbeArgs) -> CmdResult {
    let (relations, loaded) = load_inputs(&args.resource, &args.tuples)?;
    if args.dry_run {
        let plan: BTreeMap<&str, serde_json::Value> = relations
            .iter()
            .map(|r| {
                let n = loaded.tuples.iter().filter(|t| t.relation_id == r.id).count();
                (r.id.as_str(), json!({"tuples": n, "patterns": r.patterns.len(), "queries": n * r.patterns.len()}))
            })
            .collect();
        let total: usize = plan.values().map(|v| v["queries"].as_u64().unwrap_or(0) as usize).sum();
        print!("{}", to_json(&json!({"relations": plan, "total_queries": total}))?);
        return Ok(ExitCode::SUCCESS);
    }
    let scorer = build_scorer(&args.scorer, &loaded.tuples, args.bridge_override.as_deref())?;
    let suite = prepare_suite(&relations, &loaded.tuples, &[scorer.as_ref()])?;
    let tables = probe_suite(scorer.as_ref(), &suite)?;
    let report = ProbeReport::new(
        scorer.model_id(),
        resource_fingerprint(&args.resource, Some(&args.tuples))?,
        args.seed,
        timestamp(),
        serde_json::to_value(args)?,
        filter_summary(&suite),
        reports_for(&tables)?,
    )?;
    write_json(&args.out, &report)?;
    if let Some(path) = &args.predictions {
        write_jsonl(path, &prediction_records(&tables))?;
    }
    print_summary(&report, args.aggregate);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GridEntry {
    lambda: f64,
    best_epoch: usize,
    val_consistent_acc: Option<f64>,
    log: String,
}

fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let (relations, loaded) = load_inputs(&args.resource, &args.tuples)?;
    let model = load_toy(&args.scorer)?;
    if args.lambda_grid.is_empty() {
        bail!(Error::Invalid("empty lambda grid".into()));
    }
    let suite = prepare_suite(&relations, &loaded.tuples, &[&model])?;
    let split = split_relations(&suite.relations, &args.train_relations, &args.val_relations)?;
    if split.test.is_empty() {
        bail!(Error::Invalid("no test relations left after the train/validation split".into()));
    }
    let tuples = suite.all_tuples();
    let base = TrainConfig {
        epochs: args.epochs,
        tuples_per_batch: args.batch_tuples,
        learning_rate: args.lr,
        seed: args.seed,
        restrict_to_candidates: !args.no_typed,
        use_consistency_loss: !args.no_consistency_loss,
        use_mlm_loss: !args.no_mlm,
        mlm_mask_rate: args.mask_rate,
        max_grad_norm: args.max_grad_norm,
        ..TrainConfig::default()
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut grid = Vec::new();
    let mut models = Vec::new();
    for &lambda in &args.lambda_grid {
        let config = TrainConfig { lambda, ..base.clone() };
        let outcome = trainer::train(&model, &split.train, &split.val, &tuples, &config)?;
        let log_path = args.out.join(lambda_dir_name(lambda)).join("log.jsonl");
        fs::create_dir_all(log_path.parent().unwrap())?;
        write_jsonl(&log_path, &outcome.log)?;
        let score = outcome
            .log
            .iter()
            .find(|l| l.epoch == outcome.best_epoch)
            .and_then(|l| l.val_consistent_acc);
        grid.push(GridEntry {
            lambda,
            best_epoch: outcome.best_epoch,
            val_consistent_acc: score,
            log: log_path.strip_prefix(&args.out).unwrap_or(&log_path).display().to_string(),
        });
        models.push((lambda, outcome.model));
    }
    let selected = select_lambda(&grid.iter().map(|g| (g.lambda, g.val_consistent_acc)).collect::<Vec<_>>())?;
    let trained = models
        .into_iter()
        .find(|(l, _)| *l == selected)
        .map(|(_, m)| m.with_model_id(format!("{}+consistency", model.model_id())))
        .expect("selected lambda comes from the grid");
    trained.save(&args.out.join("model.ckpt"))?;

    let fingerprint = resource_fingerprint(&args.resource, Some(&args.tuples))?;
    let config_value = serde_json::to_value(args)?;
    let test_suite = Suite {
        relations: split.test.clone(),
        tuples: suite.tuples.clone(),
        retained: suite.retained,
        removed: suite.removed,
        dropped_relations: suite.dropped_relations.clone(),
    };
    let mut summaries = BTreeMap::new();
    for (name, m) in [("before", &model), ("after", &trained)] {
        let tables = probe_suite(m, &test_suite)?;
        let report = ProbeReport::new(
            m.model_id(),
            fingerprint.clone(),
            args.seed,
            timestamp(),
            config_value.clone(),
            filter_summary(&suite),
            reports_for(&tables)?,
        )?;
        write_json(&args.out.join(format!("{name}.json")), &report)?;
        write_jsonl(&args.out.join(format!("{name}_predictions.jsonl")), &prediction_records(&tables))?;
        summaries.insert(name, report.macro_summary);
    }
    let selection = json!({
        "config": config_value,
        "train_config": base,
        "train_relations": split.train.iter().map(|r| &r.id).collect::<Vec<_>>(),
        "val_relations": split.val.iter().map(|r| &r.id).collect::<Vec<_>>(),
        "test_relations": split.test.iter().map(|r| &r.id).collect::<Vec<_>>(),
        "grid": grid,
        "selected_lambda": selected,
    });
    write_json(&args.out.join("selection.json"), &selection)?;
    write_json(&args.out.join("comparison.json"), &summaries)?;
    let cons = |s: &SuiteSummary| s.consistency.as_ref().map_or(f64::NAN, |m| m.mean);
    println!(
        "selected lambda {selected}; test consistency {:.3} -> {:.3}",
        cons(&summaries["before"]),
        cons(&summaries["after"])
    );
    Ok(ExitCode::SUCCESS)
}

fn read_records(path: &Path) -> anyhow::Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Load {
                    file: path.to_path_buf(),
                    msg: format!("line {}: {e}", i + 1),
                }
                .into()
            })
        })
        .collect()
}

fn model_id_of(report: Option<&PathBuf>) -> anyhow::Result<Option<String>> {
    let Some(path) = report else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Load {
        file: path.clone(),
        msg: e.to_string(),
    })?;
    Ok(value["model_id"].as_str().map(str::to_owned))
}

#[derive(Serialize)]
struct Comparison {
    model_a: Option<String>,
    model_b: Option<String>,
    tuples: usize,
    consistent_acc_a: f64,
    consistent_acc_b: f64,
    /// Tuples A gets right and B gets wrong.
    b: u64,
    /// Tuples B gets right and A gets wrong.
    c: u64,
    test: TestResult,
}

pub fn compare(args: &CompareArgs) -> CmdResult {
    let a = tuple_correctness(&read_records(&args.predictions_a)?);
    let b = tuple_correctness(&read_records(&args.predictions_b)?);
    if a.is_empty() || !a.keys().eq(b.keys()) {
        let only_a = a.keys().filter(|k| !b.contains_key(*k)).count();
        let only_b = b.keys().filter(|k| !a.contains_key(*k)).count();
        bail!(Error::Invalid(format!(
            "prediction dumps cover different tuples ({only_a} only in A, {only_b} only in B)"
        )));
    }
    let va: Vec<bool> = a.values().copied().collect();
    let vb: Vec<bool> = b.values().copied().collect();
    let (bb, cc) = discordant_counts(&va, &vb)?;
    let n = va.len() as f64;
    let result = Comparison {
        model_a: model_id_of(args.report_a.as_ref())?,
        model_b: model_id_of(args.report_b.as_ref())?,
        tuples: va.len(),
        consistent_acc_a: va.iter().filter(|x| **x).count() as f64 / n,
        consistent_acc_b: vb.iter().filter(|x| **x).count() as f64 / n,
        b: bb,
        c: cc,
        test: mcnemar(bb, cc),
    };
    emit(args.out.as_deref(), &result)?;
    Ok(ExitCode::SUCCESS)
}

pub fn analyze(args: &AnalyzeArgs) -> CmdResult {
    let (relations, loaded) = load_inputs(&args.resource, &args.tuples)?;
    let relation = relations
        .iter()
        .find(|r| r.id == args.relation)
        .ok_or_else(|| Error::Invalid(format!("relation {} is not in the resource", args.relation)))?;
    let relation = build_candidates(relation, &loaded.tuples)?;
    let scorer = build_scorer(&args.scorer, &loaded.tuples, args.bridge_override.as_deref())?;
    let (embeddings, study) =
        representation_study(scorer.as_ref(), &relation, &loaded.tuples, args.seed, args.max_iter)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let tsv_path = args.out.join("embeddings.tsv");
    let file = fs::File::create(&tsv_path).map_err(|e| Error::Io {
        path: tsv_path.clone(),
        source: e,
    })?;
    embeddings
        .write_tsv(std::io::BufWriter::new(file))
        .map_err(|e| Error::Io { path: tsv_path, source: e })?;
    write_json(
        &args.out.join("vmeasure.json"),
        &json!({"config": args, "timestamp": timestamp(), "study": study}),
    )?;
    println!(
        "pattern v-measure {:.3}, subject v-measure {:.3}",
        study.pattern_vmeasure, study.subject_vmeasure
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gen_synth(args: &GenSynthArgs) -> CmdResult {
    let kb = generate_synth_kb(args.seed, args.relations, args.entities, args.patterns);
    write_synth_kb(&args.out, &kb)?;
    println!(
        "{} relations, {} tuples, {} vocabulary entries written to {}",
        kb.relations.len(),
        kb.tuples.len(),
        kb.vocabulary.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_vocab(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

pub fn pretrain(args: &PretrainArgs) -> CmdResult {
    let (relations, loaded) = load_inputs(&args.resource, &args.tuples)?;
    let vocab = match &args.vocab {
        Some(p) => read_vocab(p)?,
        None => build_vocabulary(&relations, &loaded.tuples),
    };
    let dims = ToyDims::new(vocab.len(), args.d_model, args.d_ff, args.max_len);
    let init = ToyMLM::new(vocab, ToyParams::random(dims, args.seed))?;

    let corpus = pretraining_corpus(&relations, &loaded.tuples, args.exposure, args.seed);
    let config = PretrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        ..PretrainConfig::default()
    };
    let (model, losses) = trainer::pretrain(&init, &corpus, &config)?;
    model.save(&args.out)?;
    println!(
        "{} examples; loss {:.4} -> {:.4}; checkpoint {}",
        corpus.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ExperimentReport<'a> {
    config: &'a ExperimentConfig,
    outcome: &'a ExperimentOutcome,
    consistency_gain: Option<f64>,
}

pub fn experiment(args: &ExperimentArgs) -> CmdResult {
    let config = ExperimentConfig {
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    let outcome = run_experiment(&config)?;
    let gain = outcome.full.consistency.zip(outcome.control.consistency).map(|(f, c)| f - c);
    write_json(
        &args.out,
        &ExperimentReport {
            config: &config,
            outcome: &outcome,
            consistency_gain: gain,
        },
    )?;
    for (name, s) in [
        ("pretrained", &outcome.pretrained),
        ("control (lambda=0)", &outcome.control),
        ("full", &outcome.full),
        ("-MLM", &outcome.no_mlm),
    ] {
        println!(
            "{name:>20}: consistency {:.3} accuracy {:.3} consistent-acc {:.3}",
            s.consistency.unwrap_or(f64::NAN),
            s.accuracy.unwrap_or(f64::NAN),
            s.consistent_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(ExitCode::SUCCESS)
}
