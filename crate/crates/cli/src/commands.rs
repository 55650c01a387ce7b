use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use probekit::data::{
    define_pairs, generate_synthetic, load_manifest, Dataset, DatasetManifest, FeatureDims, OrderCorruption, Split,
    SymmetricSplit, FEATURE_VERSION, MANIFEST_HEADER,
};
use probekit::probe::{
    count_params, estimate_probe_gflops, load_checkpoint, save_checkpoint, ProbeConfig, ProbeModel, CHECKPOINT_VERSION,
};
use probekit::train::{
    ablation_preset, evaluate, format_ablation_table, multi_task_evaluate, run_ablation, sensitivity_analysis, train,
    AblationRow, DiskFeatures, EvalReport, MultiTaskReport, MultiTaskSpec, TaskSpec, TrainHistory,
};
use probekit::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::{Experiment, ProbeSection, TaskEntry};
use crate::rundir::RunDir;

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "probe.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const MULTITASK_FILE: &str = "multitask.json";

/// Options shared by every subcommand.
pub struct Context {
    pub experiment: Experiment,
    pub dry_run: bool,
    pub overwrite: bool,
    pub quiet: bool,
    pub argv: Vec<String>,
}

impl Context {
    fn say(&self, text: impl AsRef<str>) {
        if !self.quiet {
            emit(text.as_ref());
        }
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", text.trim_end());
}

/// Provenance written next to every result.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub probe_seed: u64,
    pub train_seed: u64,
    pub synth_seed: u64,
    pub feature_format_version: u16,
    pub checkpoint_format_version: u16,
    pub manifest_header: String,
}

fn run_info(ctx: &Context, command: &str) -> RunInfo {
    RunInfo {
        command: command.into(),
        argv: ctx.argv.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        probe_seed: ctx.experiment.probe.seed,
        train_seed: ctx.experiment.train.seed,
        synth_seed: ctx.experiment.synth.seed,
        feature_format_version: FEATURE_VERSION,
        checkpoint_format_version: CHECKPOINT_VERSION,
        manifest_header: MANIFEST_HEADER.into(),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })
}

/// Writes the resolved experiment and provenance into `dir`.
fn write_metadata(dir: &RunDir, ctx: &Context, command: &str, resolved: &Experiment) -> Result<()> {
    dir.write(CONFIG_FILE, resolved.to_toml())?;
    dir.write(RUN_FILE, json(&run_info(ctx, command)))
}

/// `1234567` → `"1,234,567"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

struct Data {
    manifest: DatasetManifest,
    dataset: Dataset,
    pairs: SymmetricSplit,
    dims: FeatureDims,
}

fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| Error::Config(format!("no {what} given (flag or config file)")))
}

fn load_pairs(pairs: Option<&Path>, manifest: &DatasetManifest) -> Result<SymmetricSplit> {
    match pairs {
        Some(p) => define_pairs(p, &manifest.classes),
        None => Ok(SymmetricSplit::none(manifest.num_classes())),
    }
}

fn load_data(exp: &Experiment) -> Result<Data> {
    let manifest = load_manifest(require(&exp.data.manifest, "manifest")?)?;
    let pairs = load_pairs(exp.data.pairs.as_deref(), &manifest)?;
    let dataset = Dataset::load(&manifest)?;
    let dims = manifest
        .dims
        .or_else(|| dataset.dims())
        .ok_or_else(|| Error::EmptySplit("manifest lists no clips".into()))?;
    Ok(Data { manifest, dataset, pairs, dims })
}

fn check_dims(model: &ProbeModel<f32>, dims: FeatureDims) -> Result<()> {
    let expected = model.config().dims();
    if expected != dims {
        return Err(Error::Shape {
            op: "checkpoint vs dataset dims",
            lhs: vec![expected.frames, expected.tokens, expected.dim],
            rhs: vec![dims.frames, dims.tokens, dims.dim],
        });
    }
    Ok(())
}

/// The experiment with every probe override pinned to the resolved value and
/// data paths made absolute, so the echoed file re-runs identically.
fn pinned(exp: &Experiment, probe: &ProbeConfig) -> Experiment {
    let mut out = exp.clone();
    out.probe = ProbeSection {
        variant: probe.variant,
        num_heads: probe.num_heads,
        pe_scheme: Some(probe.pe_scheme),
        pe_granularity: Some(probe.pe_granularity),
        block_style: Some(probe.block_style),
        aggregation: Some(probe.aggregation),
        cls_mode: Some(probe.cls_mode),
        seed: probe.seed,
    };
    out.data.manifest = out.data.manifest.as_deref().map(absolute);
    out.data.pairs = out.data.pairs.as_deref().map(absolute);
    out
}

fn render_history(history: &TrainHistory) -> String {
    let mut out = String::new();
    writeln!(out, "{:>6} {:>12} {:>10} {:>12}", "epoch", "train loss", "val acc", "lr").unwrap();
    for e in &history.epochs {
        let val = e.val_acc.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
        writeln!(out, "{:>6} {:>12.6} {:>10} {:>12.3e}", e.epoch, e.train_loss, val, e.lr).unwrap();
    }
    writeln!(out, "best epoch {}", history.best_epoch).unwrap();
    out
}

pub fn gen_synth(ctx: &Context, out: &Path) -> Result<()> {
    let cfg = &ctx.experiment.synth;
    cfg.validate()?;
    let (train, val, test) = cfg.split_sizes();
    let classes = cfg.num_classes();
    let summary = format!(
        "classes {classes} ({} pairs, {} non-symmetric), clips {} (train {} / val {} / test {}), dims {}x{}x{}",
        cfg.num_pairs,
        cfg.num_nsym,
        classes * cfg.clips_per_class,
        classes * train,
        classes * val,
        classes * test,
        cfg.frames,
        cfg.tokens,
        cfg.dim
    );
    if ctx.dry_run {
        ctx.say(toml::to_string(cfg).expect("synth config serializes"));
        ctx.say(summary);
        return Ok(());
    }
    let dir = RunDir::create(out, ctx.overwrite)?;
    let synth = generate_synthetic(cfg)?;
    let bytes = synth.write(dir.path())?;
    write_metadata(&dir, ctx, "gen-synth", &ctx.experiment)?;
    let path = dir.commit()?;
    ctx.say(format!("{summary}, bytes {}", thousands(bytes as usize)));
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

pub fn train_cmd(ctx: &Context, out: &Path) -> Result<()> {
    let exp = &ctx.experiment;
    exp.train.validate()?;
    let data = load_data(exp)?;
    let probe = exp.probe.resolve(data.dims, data.manifest.num_classes())?;
    let resolved = pinned(exp, &probe);
    if ctx.dry_run {
        ctx.say(resolved.to_toml());
        ctx.say(format!(
            "parameters {} | head {:.4} GFLOPs per clip",
            thousands(count_params(&probe)),
            estimate_probe_gflops(&probe)
        ));
        return Ok(());
    }
    let dir = RunDir::create(out, ctx.overwrite)?;
    let init = ProbeModel::init(&probe)?;
    let (model, history) = train(&init, &data.dataset, &exp.train)?;
    let report = evaluate(&model, &data.dataset.test, &data.dataset.classes, &data.pairs)?;
    save_checkpoint(&dir.file(CHECKPOINT_FILE), &model)?;
    dir.write(HISTORY_FILE, json(&history))?;
    dir.write(REPORT_FILE, json(&report))?;
    let text = report.render(probe.variant.name());
    dir.write("report.txt", &text)?;
    write_metadata(&dir, ctx, "train", &resolved)?;
    let path = dir.commit()?;
    ctx.say(render_history(&history));
    emit(&text);
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn eval_common(ctx: &Context, checkpoint: &Path, split: Split) -> Result<(ProbeModel<f32>, Data, EvalReport)> {
    let model = load_checkpoint(checkpoint)?;
    let data = load_data(&ctx.experiment)?;
    check_dims(&model, data.dims)?;
    let clips = data.dataset.split(split);
    let report = evaluate(&model, clips, &data.dataset.classes, &data.pairs)?;
    Ok((model, data, report))
}

fn finish_report(ctx: &Context, out: Option<&Path>, command: &str, label: &str, report: &EvalReport) -> Result<()> {
    let text = report.render(label);
    if let Some(out) = out {
        let dir = RunDir::create(out, ctx.overwrite)?;
        dir.write(REPORT_FILE, json(report))?;
        dir.write("report.txt", &text)?;
        write_metadata(&dir, ctx, command, &ctx.experiment)?;
        dir.commit()?;
    }
    emit(&text);
    Ok(())
}

pub fn eval_cmd(ctx: &Context, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    if ctx.dry_run {
        let model = load_checkpoint(checkpoint)?;
        ctx.say(model.config().to_toml());
        return Ok(());
    }
    let (model, _, report) = eval_common(ctx, checkpoint, split)?;
    finish_report(ctx, out, "eval", model.config().variant.name(), &report)
}

pub fn sensitivity_cmd(ctx: &Context, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let modes: Vec<OrderCorruption> =
        ctx.experiment.sensitivity.modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::Config("no corruption modes given".into()));
    }
    if ctx.dry_run {
        let model = load_checkpoint(checkpoint)?;
        ctx.say(model.config().to_toml());
        ctx.say(format!("modes {}", ctx.experiment.sensitivity.modes.join(", ")));
        return Ok(());
    }
    let (model, data, mut report) = eval_common(ctx, checkpoint, split)?;
    sensitivity_analysis(&model, data.dataset.split(split), &data.pairs, &mut report, &modes)?;
    finish_report(ctx, out, "sensitivity", model.config().variant.name(), &report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationFile {
    pub preset: String,
    pub rows: Vec<AblationRow>,
    pub reports: BTreeMap<String, EvalReport>,
    pub histories: BTreeMap<String, TrainHistory>,
}

pub fn ablate_cmd(ctx: &Context, out: &Path) -> Result<()> {
    let exp = &ctx.experiment;
    let preset = exp
        .ablation
        .preset
        .as_deref()
        .ok_or_else(|| Error::Config("no ablation preset given (--preset or [ablation] preset)".into()))?;
    exp.train.validate()?;
    let data = load_data(exp)?;
    let mut grid = ablation_preset(preset, data.dims, exp.probe.num_heads, data.manifest.num_classes())?;
    for (_, c) in &mut grid {
        c.seed = exp.probe.seed;
    }
    if ctx.dry_run {
        for (label, c) in &grid {
            ctx.say(format!(
                "{label:<20} params {:>12} head GF {:.4}",
                thousands(count_params(c)),
                estimate_probe_gflops(c)
            ));
        }
        return Ok(());
    }
    let dir = RunDir::create(out, ctx.overwrite)?;
    let outcomes = run_ablation(&grid, &data.dataset, &data.pairs, &exp.train)?;
    let rows: Vec<AblationRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let file = AblationFile {
        preset: preset.into(),
        rows: rows.clone(),
        reports: outcomes.iter().map(|o| (o.row.label.clone(), o.report.clone())).collect(),
        histories: outcomes.iter().map(|o| (o.row.label.clone(), o.history.clone())).collect(),
    };
    let table = format_ablation_table(&rows);
    dir.write(ABLATION_FILE, json(&file))?;
    dir.write("ablation.txt", &table)?;
    let mut resolved = exp.clone();
    resolved.data.manifest = resolved.data.manifest.as_deref().map(absolute);
    resolved.data.pairs = resolved.data.pairs.as_deref().map(absolute);
    write_metadata(&dir, ctx, "ablate", &resolved)?;
    let path = dir.commit()?;
    emit(&table);
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

pub struct ParamsQuery {
    pub checkpoint: Option<PathBuf>,
    pub dims: Option<FeatureDims>,
    pub classes: Option<usize>,
}

pub fn params_cmd(ctx: &Context, q: &ParamsQuery) -> Result<()> {
    let cfg = if let Some(ckpt) = &q.checkpoint {
        load_checkpoint(ckpt)?.config().clone()
    } else {
        let exp = &ctx.experiment;
        let (dims, classes) = match (q.dims, q.classes) {
            (Some(d), Some(c)) => (d, c),
            _ => {
                let manifest = load_manifest(require(&exp.data.manifest, "manifest or --dim/--frames/--tokens/--classes")?)?;
                let dims = q.dims.or(manifest.dims).ok_or_else(|| {
                    Error::Config("manifest has no dims line; pass --dim, --frames and --tokens".into())
                })?;
                (dims, q.classes.unwrap_or(manifest.num_classes()))
            }
        };
        exp.probe.resolve(dims, classes)?
    };
    emit(&thousands(count_params(&cfg)));
    ctx.say(format!(
        "{} probe, d={} heads={} T={} n={} C={} | head {:.2} GFLOPs per clip",
        cfg.variant, cfg.d_model, cfg.num_heads, cfg.num_frames, cfg.tokens_per_frame, cfg.num_classes,
        estimate_probe_gflops(&cfg)
    ));
    Ok(())
}

pub fn report_cmd(ctx: &Context, run: &Path) -> Result<()> {
    let mut found = false;
    let label = fs::read_to_string(run.join(CONFIG_FILE))
        .ok()
        .and_then(|t| toml::from_str::<Experiment>(&t).ok())
        .map_or_else(|| "probe".to_string(), |e| e.probe.variant.name().to_string());
    let report_path = run.join(REPORT_FILE);
    if report_path.exists() {
        found = true;
        let report: EvalReport = read_json(&report_path)?;
        emit(&report.render(&label));
    }
    let history_path = run.join(HISTORY_FILE);
    if history_path.exists() && !ctx.quiet {
        let history: TrainHistory = read_json(&history_path)?;
        emit(&format!("\n{}", render_history(&history)));
    }
    let ablation_path = run.join(ABLATION_FILE);
    if ablation_path.exists() {
        found = true;
        let file: AblationFile = read_json(&ablation_path)?;
        emit(&format!("ablation {}\n{}", file.preset, format_ablation_table(&file.rows)));
    }
    let multitask_path = run.join(MULTITASK_FILE);
    if multitask_path.exists() {
        found = true;
        let report: MultiTaskReport = read_json(&multitask_path)?;
        emit(&render_multitask(&report));
    }
    if !found {
        return Err(Error::Io {
            path: run.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no report, ablation or multitask results"),
        });
    }
    Ok(())
}

fn render_multitask(r: &MultiTaskReport) -> String {
    let mut out = String::new();
    for (name, report) in &r.reports {
        writeln!(out, "{}", report.render(name)).unwrap();
    }
    let a = &r.accounting;
    writeln!(out, "clips {} | tasks {} | feature loads {}", a.clips, a.tasks, a.feature_loads).unwrap();
    writeln!(
        out,
        "GFLOPs: shared {:.2} + heads {:.4} = {:.2} (separate passes {:.2})",
        a.shared_gflops,
        a.head_gflops.values().sum::<f64>(),
        a.total_gflops,
        a.separate_passes_gflops
    )
    .unwrap();
    out
}

pub fn multitask_cmd(ctx: &Context, split: Split, out: Option<&Path>) -> Result<()> {
    let section = &ctx.experiment.multitask;
    if section.tasks.is_empty() {
        return Err(Error::Config("no tasks given (--task or [[multitask.tasks]])".into()));
    }
    let tasks = section
        .tasks
        .iter()
        .map(|t: &TaskEntry| {
            let manifest = load_manifest(&t.manifest)?;
            let pairs = load_pairs(t.pairs.as_deref(), &manifest)?;
            let model = load_checkpoint(&t.checkpoint)?;
            Ok(TaskSpec { name: t.name.clone(), manifest, pairs, model })
        })
        .collect::<Result<Vec<_>>>()?;
    if ctx.dry_run {
        for t in &tasks {
            ctx.say(format!("{:<16} {} probe, {} clips", t.name, t.model.config().variant, t.manifest.records(split).count()));
        }
        return Ok(());
    }
    let spec = MultiTaskSpec { tasks, shared_gflops_per_clip: section.shared_gflops_per_clip };
    let report = multi_task_evaluate(&spec, split, &DiskFeatures)?;
    let text = render_multitask(&report);
    if let Some(out) = out {
        let dir = RunDir::create(out, ctx.overwrite)?;
        dir.write(MULTITASK_FILE, json(&report))?;
        dir.write("multitask.txt", &text)?;
        write_metadata(&dir, ctx, "multitask", &ctx.experiment)?;
        dir.commit()?;
    }
    emit(&text);
    Ok(())
}
