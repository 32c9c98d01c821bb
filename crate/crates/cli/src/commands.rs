use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use headlab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use headlab::dissociation::{iap, percent2, DissociationReport, IapOptions, PerfTable};
use headlab::exec::Exec;
use headlab::experiment::{
    load_probes, prepare, prepare_with_vocab, resolve_output_dir, ExperimentConfig, Prepared, OUT_ENV,
};
use headlab::importance::{importance_matrix, SelectionMode};
use headlab::model::ModelState;
use headlab::report::{
    emit_report, Comparison, ExperimentReport, NamedCorrelation, TaskMetric, Timing, TrainingSummary, TransferMatrix,
};
use headlab::selfcheck::run_selfcheck;
use headlab::similarity::{
    ahp, correlate, cra, dse, extract_representations, pair_series, SimilarityMatrix, SimilarityMetric,
};
use headlab::tasks::Vocabulary;
use headlab::train::{paired_bootstrap, LogRecord, TrainSchedule, Trainer, TransferOptions};
use headlab::{Error, Result};

use crate::{Cli, Command, ModelArgs, TrainArgs};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_DIR: &str = "checkpoint";
const LOG_FILE: &str = "train.log.jsonl";

fn cfg_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    resolve_output_dir(cli.out.as_deref(), std::env::var_os(OUT_ENV), cfg.and_then(|c| c.output_dir.as_deref()))
}

pub fn run(cli: &Cli) -> Result<u8> {
    let exec = cli.exec();
    match &cli.command {
        Command::Train(a) => train(cli, a, false, exec),
        Command::Iat { train: a, seeds } if seeds.is_empty() => train(cli, a, true, exec),
        Command::Iat { train: a, seeds } => compare(cli, a, seeds, exec),
        Command::Importance { model } => importance(cli, model, exec),
        Command::PruneEval { model, alpha, selection } => prune(cli, model, *alpha, *selection, false, exec),
        Command::Dissociate { from, config, tasks, alpha, selection } => {
            if from.is_dir() {
                let m = ModelArgs { checkpoint: from.clone(), config: config.clone(), tasks: tasks.clone() };
                prune(cli, &m, *alpha, *selection, true, exec)
            } else {
                dissociate_csv(cli, from, *alpha)
            }
        }
        Command::Transfer { config, seed, k } => transfer(cli, config, *seed, *k, exec),
        Command::Similarity { config, models, probes, metrics, transfer, layer, rdm } => {
            similarity(cli, config.as_deref(), models, probes.as_deref(), metrics, transfer.as_deref(), *layer, *rdm, exec)
        }
        Command::Correlate { similarity, scores } => correlate_cmd(cli, similarity, scores),
        Command::Report { inputs } => merge_reports(cli, inputs),
        Command::Selfcheck { seeds } => selfcheck(cli, *seeds, exec),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(cfg_err("--config", format!("{} does not exist", path.display())));
    }
    ExperimentConfig::load(path)
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.schedule.seed = s;
    }
    if let Some(d) = a.delta {
        cfg.schedule.delta = d;
    }
    if let Some(x) = a.alpha {
        cfg.schedule.alpha = x;
    }
    cfg.validate()
}

fn write_json(path: &Path, v: &ExperimentConfig) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    io(path, fs::write(path, s))
}

fn dev_metrics(tr: &Trainer) -> Result<Vec<TaskMetric>> {
    let vals = tr.evaluate()?;
    Ok(tr
        .tasks()
        .iter()
        .zip(vals)
        .map(|(t, value)| TaskMetric { task: t.spec.name.clone(), metric: t.spec.metric, value })
        .collect())
}

/// Runs `tr` to `stop`, writing JSON-lines records and a marker when the
/// phase changes.
fn run_logged(tr: &mut Trainer, stop: Option<usize>, log: &mut impl Write) -> Result<Option<f64>> {
    let mut phase = tr.phase();
    let mut last = None;
    let mut failure = None;
    tr.run_until(stop.unwrap_or(usize::MAX), |r: &LogRecord| {
        if r.phase != phase {
            phase = r.phase;
            let marker = serde_json::json!({"event": "phase", "phase": r.phase, "step": r.step});
            if let Err(e) = writeln!(log, "{marker}") {
                failure.get_or_insert(e);
            }
        }
        last = Some(r.loss);
        if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).unwrap()) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(Error::Io { path: LOG_FILE.into(), source: e });
    }
    Ok(last)
}

fn summary(tr: &Trainer, final_loss: Option<f64>) -> Result<TrainingSummary> {
    Ok(TrainingSummary {
        seed: tr.schedule.seed,
        steps: tr.state.step,
        iat_start: (tr.schedule.delta > 0.0).then(|| tr.iat_start()),
        final_loss,
        dev: dev_metrics(tr)?,
        iat: tr.state.masks.clone(),
    })
}

fn checkpoint_meta(prep: &Prepared, tr: &Trainer) -> CheckpointMeta {
    CheckpointMeta {
        tasks: prep.tasks.iter().map(|t| t.spec.clone()).collect(),
        vocab: Some(prep.vocab.clone().into()),
        schedule: Some(tr.schedule.clone()),
        phase: Some(tr.phase()),
        trainer: Some(tr.state.clone()),
    }
}

fn train(cli: &Cli, a: &TrainArgs, iat: bool, exec: Exec) -> Result<u8> {
    let mut timing = Timing { command: if iat { "iat" } else { "train" }.into(), ..Default::default() };
    let cfg_path = match (&a.config, &a.resume) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => r.join(CONFIG_FILE),
        (None, None) => return Err(cfg_err("--config", "required unless --resume is given")),
    };
    let mut cfg = load_config(&cfg_path)?;
    apply_overrides(&mut cfg, a)?;
    if iat && cfg.schedule.delta <= 0.0 {
        return Err(cfg_err("schedule.delta", "iat needs delta > 0 (set it in the config or pass --delta)"));
    }
    let out = out_dir(cli, Some(&cfg));
    io(&out, fs::create_dir_all(&out))?;

    let (prep, mut tr) = timing.stage("prepare", || -> Result<(Prepared, Trainer)> {
        match &a.resume {
            None => {
                let prep = prepare(&cfg)?;
                let model = prep.init_model(cfg.schedule.seed)?;
                let tr = Trainer::new(model, prep.tasks.clone(), cfg.schedule.clone(), exec)?;
                Ok((prep, tr))
            }
            Some(dir) => {
                let ck = load_checkpoint(dir)?;
                let vocab = ck.meta.vocab.clone().ok_or_else(|| Error::Checkpoint("no vocabulary recorded".into()))?;
                let prep = prepare_with_vocab(&cfg, Vocabulary::from(vocab))?;
                let state = ck.meta.trainer.ok_or_else(|| Error::Checkpoint("no trainer state recorded".into()))?;
                let optim = ck.optim.ok_or_else(|| Error::Checkpoint("no optimizer state recorded".into()))?;
                let schedule = ck.meta.schedule.unwrap_or_else(|| cfg.schedule.clone());
                if schedule != cfg.schedule {
                    return Err(cfg_err("schedule", "differs from the schedule recorded in the checkpoint"));
                }
                let tr = Trainer::resume(ck.model, optim, prep.tasks.clone(), schedule, state, exec)?;
                Ok((prep, tr))
            }
        }
    })?;

    let log_path = out.join(LOG_FILE);
    let file = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(io(&log_path, file)?);
    let final_loss = timing.stage("train", || run_logged(&mut tr, a.stop_at, &mut log))?;
    io(&log_path, log.flush())?;

    let ck_dir = out.join(CHECKPOINT_DIR);
    timing.stage("checkpoint", || -> Result<()> {
        save_checkpoint(&ck_dir, &tr.model, Some(&tr.optim), &checkpoint_meta(&prep, &tr))?;
        write_json(&ck_dir.join(CONFIG_FILE), &cfg)
    })?;

    let mut report = ExperimentReport::new(timing.command.clone(), Some(cfg.clone()), vec![cfg.schedule.seed]);
    if let Some(r) = &a.resume {
        report.inputs.push(r.display().to_string());
    }
    let s = timing.stage("evaluate", || summary(&tr, final_loss))?;
    println!("step {}/{} phase {:?}", tr.state.step, tr.total_steps(), tr.phase());
    for m in &s.dev {
        println!("{}: {:?} = {:.4}", m.task, m.metric, m.value);
    }
    report.training.push(s);
    emit_report(&out, &report, Some(&timing))?;
    println!("checkpoint: {}", ck_dir.display());
    Ok(0)
}

/// Trains IAT and vanilla models for each seed and compares their average
/// dev metric with a paired bootstrap.
fn compare(cli: &Cli, a: &TrainArgs, seeds: &[u64], exec: Exec) -> Result<u8> {
    let path = a.config.as_ref().ok_or_else(|| cfg_err("--config", "required for a seed comparison"))?;
    let mut cfg = load_config(path)?;
    apply_overrides(&mut cfg, a)?;
    if cfg.schedule.delta <= 0.0 {
        return Err(cfg_err("schedule.delta", "iat needs delta > 0 (set it in the config or pass --delta)"));
    }
    let out = out_dir(cli, Some(&cfg));
    let mut timing = Timing { command: "iat".into(), ..Default::default() };
    let prep = timing.stage("prepare", || prepare(&cfg))?;
    let mut report = ExperimentReport::new("iat", Some(cfg.clone()), seeds.to_vec());
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut avg = [0.0; 2];
        for (k, delta) in [cfg.schedule.delta, 0.0].into_iter().enumerate() {
            let schedule = TrainSchedule { seed, delta, ..cfg.schedule.clone() };
            let model = prep.init_model(seed)?;
            let mut tr = Trainer::new(model, prep.tasks.clone(), schedule, exec)?;
            let name = format!("seed {seed} {}", if k == 0 { "iat" } else { "vanilla" });
            let mut last = None;
            timing.stage(&name, || tr.run(|r| last = Some(r.loss)))?;
            let s = summary(&tr, last)?;
            avg[k] = s.dev.iter().map(|m| m.value).sum::<f64>() / s.dev.len() as f64;
            report.training.push(s);
        }
        println!("seed {seed}: iat {:.4} vanilla {:.4}", avg[0], avg[1]);
        pairs.push((avg[0], avg[1]));
    }
    if pairs.len() >= 2 {
        let b = paired_bootstrap(&pairs, cfg.analysis.bootstrap_resamples, seeds[0], exec)?;
        println!("mean difference {:.4}, bootstrap p = {:.4}", b.mean_difference, b.p_value);
        report.comparison = Some(Comparison {
            system: "iat".into(),
            baseline: "vanilla".into(),
            seeds: seeds.to_vec(),
            mean_difference: b.mean_difference,
            pairs,
            bootstrap: b,
        });
    }
    emit_report(&out, &report, Some(&timing))?;
    Ok(0)
}

struct Trained {
    cfg: ExperimentConfig,
    prep: Prepared,
    model: ModelState<f32>,
}

fn load_trained(args: &ModelArgs) -> Result<Trained> {
    let cfg_path = args.config.clone().unwrap_or_else(|| args.checkpoint.join(CONFIG_FILE));
    let cfg = load_config(&cfg_path)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let prep = match ck.meta.vocab {
        Some(v) => prepare_with_vocab(&cfg, Vocabulary::from(v))?,
        None => prepare(&cfg)?,
    };
    if prep.model_config != ck.model.config {
        return Err(Error::Checkpoint("model config differs from the one implied by the experiment config".into()));
    }
    Ok(Trained { cfg, prep, model: ck.model })
}

fn selected_tasks(t: &Trained, names: &[String]) -> Result<Vec<headlab::tasks::TaskData>> {
    if names.is_empty() {
        Ok(t.prep.tasks.clone())
    } else {
        t.prep.select(names)
    }
}

fn importance(cli: &Cli, m: &ModelArgs, exec: Exec) -> Result<u8> {
    let t = load_trained(m)?;
    let out = out_dir(cli, Some(&t.cfg));
    let mut timing = Timing { command: "importance".into(), ..Default::default() };
    let tasks = selected_tasks(&t, &m.tasks)?;
    let imp = timing.stage("importance", || importance_matrix(&t.model, &tasks, &t.cfg.analysis.importance, exec))?;
    for r in &imp.rows {
        let (best, _) = r.scores.iter().enumerate().fold((0, f64::MIN), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        println!("{}: {} samples, top head {}", r.task, r.n_samples, headlab::model::HeadId::from_flat(best, imp.n_heads));
    }
    let mut report = ExperimentReport::new("importance", Some(t.cfg.clone()), vec![t.cfg.schedule.seed]);
    report.inputs.push(m.checkpoint.display().to_string());
    report.importance = Some(imp);
    emit_report(&out, &report, Some(&timing))?;
    Ok(0)
}

fn print_dissociation(d: &DissociationReport) {
    let parts: Vec<String> =
        d.tasks.iter().zip(&d.scores.per_task).map(|(t, s)| format!("{t}={}", s.map_or("undefined".into(), percent2))).collect();
    println!("D_i({:.2}): {}", d.alpha, parts.join(" "));
    match d.scores.average {
        Some(a) => println!("average: {}", percent2(a)),
        None => println!("average: undefined ({} RP cells excluded)", d.scores.excluded.len()),
    }
    match &d.classification {
        Some(c) => {
            let label = serde_json::to_value(c.label).unwrap();
            let level = serde_json::to_value(c.level).unwrap();
            println!("label: {} ({})", label.as_str().unwrap(), level.as_str().unwrap());
        }
        None => println!("label: unavailable"),
    }
}

fn prune(cli: &Cli, m: &ModelArgs, alpha: Option<f64>, sel: Option<SelectionMode>, scores: bool, exec: Exec) -> Result<u8> {
    let t = load_trained(m)?;
    let out = out_dir(cli, Some(&t.cfg));
    let command = if scores { "dissociate" } else { "prune-eval" };
    let mut timing = Timing { command: command.into(), ..Default::default() };
    let tasks = selected_tasks(&t, &m.tasks)?;
    let a = &t.cfg.analysis;
    let alpha = alpha.unwrap_or(a.alpha);
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(cfg_err("--alpha", "must be in (0, 1]"));
    }
    let opts = IapOptions {
        alpha,
        mode: sel.unwrap_or(a.selection),
        seed: t.cfg.schedule.seed,
        importance: a.importance.clone(),
        thresholds: a.thresholds,
        random_baseline: true,
    };
    let mut model = t.model.clone();
    model.gates = headlab::model::HeadGateVector::ones(model.config.n_layers, model.config.n_heads);
    let (imp, d) = timing.stage("iap", || iap(&model, &tasks, &opts, exec))?;
    if scores {
        print_dissociation(&d);
    } else {
        print!("{}", d.table.to_csv(None));
    }
    let mut report = ExperimentReport::new(command, Some(t.cfg.clone()), vec![t.cfg.schedule.seed]);
    report.inputs.push(m.checkpoint.display().to_string());
    report.importance = Some(imp);
    report.head_sets = d.head_sets.clone().unwrap_or_default();
    report.dissociation.push(d);
    emit_report(&out, &report, Some(&timing))?;
    Ok(0)
}

fn dissociate_csv(cli: &Cli, from: &Path, alpha: Option<f64>) -> Result<u8> {
    let text = io(from, fs::read_to_string(from))?;
    let table = PerfTable::from_csv(&text)?;
    let d = DissociationReport::from_table(table, alpha.unwrap_or(0.3), &Default::default());
    print_dissociation(&d);
    let mut report = ExperimentReport::new("dissociate", None, Vec::new());
    report.inputs.push(from.display().to_string());
    report.dissociation.push(d);
    emit_report(&out_dir(cli, None), &report, None)?;
    Ok(0)
}

fn transfer(cli: &Cli, path: &Path, seed: Option<u64>, k: Option<usize>, exec: Exec) -> Result<u8> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    if let Some(k) = k {
        cfg.analysis.transfer.k = k;
    }
    cfg.validate()?;
    let out = out_dir(cli, Some(&cfg));
    let mut timing = Timing { command: "transfer".into(), ..Default::default() };
    let prep = timing.stage("prepare", || prepare(&cfg))?;
    let names = cfg.task_names();
    let n = names.len();
    if n < 2 {
        return Err(cfg_err("tasks", "transfer needs at least two tasks"));
    }
    let opts = TransferOptions { seed: cfg.schedule.seed, ..cfg.analysis.transfer.clone() };
    let mut values = vec![vec![None; n]; n];
    for (s, src) in prep.tasks.iter().enumerate() {
        let schedule = TrainSchedule { delta: 0.0, ..cfg.schedule.clone() };
        let mut tr = Trainer::new(prep.init_model(cfg.schedule.seed)?, vec![src.clone()], schedule, exec)?;
        timing.stage(&format!("source {}", src.spec.name), || tr.run(|_| {}))?;
        for (j, tgt) in prep.tasks.iter().enumerate().filter(|&(j, _)| j != s) {
            let r = timing.stage(&format!("{} -> {}", src.spec.name, tgt.spec.name), || {
                headlab::train::transfer_finetune(&tr.model, tgt, &opts, exec)
            })?;
            println!("{} -> {}: {:.4}", src.spec.name, tgt.spec.name, r.metric);
            values[s][j] = Some(r.metric);
        }
    }
    let mut report = ExperimentReport::new("transfer", Some(cfg.clone()), vec![cfg.schedule.seed]);
    let p: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
    match ahp(&names, &p) {
        Ok(m) => report.similarity.push(m),
        Err(e) => eprintln!("AHP skipped: {e}"),
    }
    report.transfer = Some(TransferMatrix { tasks: names, k: opts.k, values });
    emit_report(&out, &report, Some(&timing))?;
    Ok(0)
}

fn read_transfer(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = io(path, fs::read_to_string(path))?;
    let mut tasks: Vec<String> = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in csv_records(&text).into_iter().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 2, message: e })?;
        let bad = |m: &str| Error::Parse { path: path.display().to_string(), line: i + 2, message: m.into() };
        if rec.len() != 4 {
            return Err(bad("expected source,target,k,value"));
        }
        for t in [&rec[0], &rec[1]] {
            if !tasks.iter().any(|x| x == t) {
                tasks.push(t.to_string());
            }
        }
        let v: f64 = rec[3].trim().parse().map_err(|_| bad("value is not a number"))?;
        cells.push((rec[0].to_string(), rec[1].to_string(), v));
    }
    let n = tasks.len();
    let mut p = vec![vec![0.0; n]; n];
    for (a, b, v) in cells {
        let i = tasks.iter().position(|t| *t == a).unwrap();
        let j = tasks.iter().position(|t| *t == b).unwrap();
        p[i][j] = v;
    }
    Ok((tasks, p))
}

/// Trimmed records after the header; blank lines are skipped.
fn csv_records(text: &str) -> Vec<std::result::Result<Vec<String>, String>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| e.to_string()))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn similarity(
    cli: &Cli,
    config: Option<&Path>,
    models: &[String],
    probes: Option<&Path>,
    metrics: &[SimilarityMetric],
    transfer_csv: Option<&Path>,
    layer: Option<usize>,
    rdm: Option<headlab::similarity::RdmCorrelation>,
    exec: Exec,
) -> Result<u8> {
    let cfg = config.map(load_config).transpose()?;
    let analysis = cfg.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
    let metrics = if metrics.is_empty() { analysis.similarity.clone() } else { metrics.to_vec() };
    if metrics.is_empty() {
        return Err(cfg_err("--metric", "no similarity metric requested"));
    }
    let out = out_dir(cli, cfg.as_ref());
    let mut timing = Timing { command: "similarity".into(), ..Default::default() };
    let mut report = ExperimentReport::new("similarity", cfg.clone(), cfg.iter().map(|c| c.schedule.seed).collect());
    let needs_reps = metrics.iter().any(|m| matches!(m, SimilarityMetric::Dse | SimilarityMetric::Cra));
    if needs_reps {
        let probe_path = probes.map(Path::to_path_buf).or(analysis.probe_file.clone()).ok_or_else(|| cfg_err("--probes", "DSE and CRA need a probe file"))?;
        if models.len() < 2 {
            return Err(cfg_err("--model", "DSE and CRA need at least two TASK=DIR checkpoints"));
        }
        let mut names = Vec::new();
        let mut reps = Vec::new();
        for spec in models {
            let (task, dir) = spec.split_once('=').ok_or_else(|| cfg_err("--model", format!("`{spec}` is not TASK=DIR")))?;
            let ck = load_checkpoint(Path::new(dir))?;
            let vocab = Vocabulary::from(ck.meta.vocab.clone().ok_or_else(|| Error::Checkpoint(format!("{dir}: no vocabulary recorded")))?);
            let inputs = load_probes(&probe_path, &vocab, ck.model.config.max_seq_len)?;
            let head = ck.model.task_index(task).unwrap_or(0);
            let r = timing.stage(&format!("represent {task}"), || {
                extract_representations(&ck.model, head, &inputs, layer.or(analysis.representation_layer), analysis.representation_pooling, exec)
            })?;
            report.inputs.push(dir.to_string());
            names.push(task.to_string());
            reps.push(r);
        }
        for m in &metrics {
            match m {
                SimilarityMetric::Dse => report.similarity.push(dse(&names, &reps)?),
                SimilarityMetric::Cra => report.similarity.push(cra(&names, &reps, rdm.unwrap_or(analysis.rdm_correlation))?),
                SimilarityMetric::Ahp => {}
            }
        }
    }
    if metrics.contains(&SimilarityMetric::Ahp) {
        let path = transfer_csv.ok_or_else(|| cfg_err("--transfer", "AHP needs a transfer CSV"))?;
        let (tasks, p) = read_transfer(path)?;
        report.inputs.push(path.display().to_string());
        report.similarity.push(ahp(&tasks, &p)?);
    }
    for m in &report.similarity {
        println!("{}", serde_json::to_value(m.metric).unwrap().as_str().unwrap());
        for (i, a) in m.tasks.iter().enumerate() {
            let row: Vec<String> = m.values[i].iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))).collect();
            println!("  {a}: {}", row.join(" "));
        }
        for f in &m.flags {
            println!("  note: {f}");
        }
    }
    emit_report(&out, &report, Some(&timing))?;
    Ok(0)
}

fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = io(path, fs::read_to_string(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        let r: ExperimentReport = serde_json::from_str(&text)?;
        return Ok(r
            .dissociation
            .iter()
            .filter(|d| d.tasks.len() == 2)
            .filter_map(|d| d.scores.average.map(|s| (d.tasks[0].clone(), d.tasks[1].clone(), s)))
            .collect());
    }
    let mut out = Vec::new();
    for (i, rec) in csv_records(&text).into_iter().enumerate() {
        let bad = |m: String| Error::Parse { path: path.display().to_string(), line: i + 2, message: m };
        let rec = rec.map_err(bad)?;
        if rec.len() != 3 {
            return Err(bad("expected task_a,task_b,score".into()));
        }
        let v: f64 = rec[2].parse().map_err(|_| bad(format!("score `{}` is not a number", rec[2])))?;
        out.push((rec[0].clone(), rec[1].clone(), v));
    }
    Ok(out)
}

fn correlate_cmd(cli: &Cli, sim_path: &Path, scores_path: &Path) -> Result<u8> {
    let sim = SimilarityMatrix::from_csv(&io(sim_path, fs::read_to_string(sim_path))?)?;
    let scores = read_scores(scores_path)?;
    let (xs, ys, labels) = pair_series(&sim, &scores);
    let mut c = correlate(&xs, &ys)?;
    c.labels = labels;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!("n = {} pearson = {} spearman = {} slope = {}", c.n, fmt(c.pearson), fmt(c.spearman), fmt(c.slope));
    if let Some(f) = &c.flag {
        println!("note: {f}");
    }
    let name = serde_json::to_value(sim.metric).unwrap();
    let mut report = ExperimentReport::new("correlate", None, Vec::new());
    report.inputs = vec![sim_path.display().to_string(), scores_path.display().to_string()];
    report.correlation.push(NamedCorrelation { x: name.as_str().unwrap().to_string(), y: "dissociation".into(), stats: c });
    emit_report(&out_dir(cli, None), &report, None)?;
    Ok(0)
}

fn merge_reports(cli: &Cli, inputs: &[PathBuf]) -> Result<u8> {
    let mut merged = ExperimentReport::new("report", None, Vec::new());
    for p in inputs {
        let r: ExperimentReport = serde_json::from_str(&io(p, fs::read_to_string(p))?)?;
        merged.config = merged.config.or(r.config);
        for s in r.seeds {
            if !merged.seeds.contains(&s) {
                merged.seeds.push(s);
            }
        }
        merged.inputs.push(p.display().to_string());
        merged.training.extend(r.training);
        merged.importance = merged.importance.or(r.importance);
        merged.head_sets.extend(r.head_sets);
        merged.dissociation.extend(r.dissociation);
        merged.similarity.extend(r.similarity);
        merged.transfer = merged.transfer.or(r.transfer);
        merged.correlation.extend(r.correlation);
        merged.comparison = merged.comparison.or(r.comparison);
        merged.checks.extend(r.checks);
    }
    let written = emit_report(&out_dir(cli, merged.config.as_ref()), &merged, None)?;
    for w in written {
        println!("{}", w.display());
    }
    Ok(0)
}

fn selfcheck(cli: &Cli, seeds: u64, exec: Exec) -> Result<u8> {
    let mut timing = Timing { command: "selfcheck".into(), ..Default::default() };
    let checks = timing.stage("checks", || run_selfcheck(seeds, exec));
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    let mut report = ExperimentReport::new("selfcheck", None, (0..seeds).collect());
    report.checks = checks;
    emit_report(&out_dir(cli, None), &report, Some(&timing))?;
    Ok(if ok { 0 } else { 1 })
}
