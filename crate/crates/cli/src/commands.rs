use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use destyle_core::checkpoint;
use destyle_core::data::{split_classes, Dataset, Manifest, ManifestEntry, CLEAN};
use destyle_core::desk::{desk_corpus, DeskSpec};
use destyle_core::experiment::{
    self, evaluate_groups, filtered_groups, EvalConfig, ExperimentConfig, RunRecord, CONFIG_FILE, SEED_ENV,
};
use destyle_core::filters::{generate_corpus, CorpusMode, CorpusOptions, PresetRegistry};
use destyle_core::network::BLOCKS;
use destyle_core::report::{Report, ReportFormat};
use destyle_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "destyle", version, about = "Filter-robust image classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the desk corpus, or filter a folder-per-class tree with the presets.
    GenData(GenDataArgs),
    /// Run one training regime from a JSON config.
    Train(TrainArgs),
    /// Score a checkpoint on clean and filtered images.
    Eval(EvalArgs),
    /// Per-preset feature divergence against a reference set.
    Divergence(DivergenceArgs),
    /// Partition a dataset's classes into two seeded halves.
    SplitClasses(SplitArgs),
    /// Re-emit reports as CSV/JSON and draw them as SVG.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Folder-per-class PNG tree to filter.
    #[arg(long, conflicts_with = "desk", required_unless_present = "desk")]
    pub src: Option<PathBuf>,
    /// Write the bundled procedural corpus instead (`train/` and `val/`).
    #[arg(long)]
    pub desk: bool,
    #[arg(long, visible_alias = "dst")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Share of each class kept in mini mode.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Preset registry JSON; the built-in twenty when absent.
    #[arg(long)]
    pub presets: Option<PathBuf>,
    /// Also write the preset registry in use to `presets.json`.
    #[arg(long)]
    pub write_presets: bool,
    #[arg(long, default_value_t = DeskSpec::default().size)]
    pub size: usize,
    #[arg(long, default_value_t = DeskSpec::default().train_per_class)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = DeskSpec::default().val_per_class)]
    pub val_per_class: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `out`.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Class order: a folder-per-class tree or a comma-separated list.
    /// Defaults to the classes found in the data.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub presets: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clean folder-per-class tree, or a corpus manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// With a clean folder, also score every preset applied on the fly.
    #[arg(long)]
    pub per_preset: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Block whose features feed the divergence column.
    #[arg(long, default_value = "block5")]
    pub layer: String,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct DivergenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `blockK` or `K`, 1-based.
    #[arg(long, default_value = "block5")]
    pub layer: String,
    /// Reference (clean) folder-per-class tree.
    #[arg(long)]
    pub data_a: PathBuf,
    /// Folder or manifest to compare; every preset applied to A when absent.
    #[arg(long)]
    pub data_b: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also draw `divergence.svg`.
    #[arg(long)]
    pub svg: bool,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    /// Folder-per-class tree or corpus manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Report files (.csv/.json) or run records.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// csv, json or both.
    #[arg(long, default_value = "both")]
    pub format: String,
    #[arg(long)]
    pub svg: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Divergence(a) => divergence(a),
        Command::SplitClasses(a) => split(a),
        Command::Report(a) => report(a),
    }
}

fn env_seed(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

/// Writes the effective arguments as `config.json` and starts a record.
fn start(command: &str, out: &Path, args: &impl Serialize, seed: u64) -> Result<RunRecord> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut text = serde_json::to_string_pretty(args)?;
    text.push('\n');
    write(out, CONFIG_FILE, text.as_bytes())?;
    let mut record = RunRecord::new(command, text.as_bytes(), seed);
    record.outputs.push(CONFIG_FILE.into());
    Ok(record)
}

fn finish(mut record: RunRecord, out: &Path, started: Instant) -> Result<()> {
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    record.save(out)?;
    println!("{}", out.join(experiment::RUN_RECORD).display());
    Ok(())
}

fn write(out: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })
}

fn registry(path: Option<&Path>) -> Result<PresetRegistry> {
    match path {
        Some(p) => PresetRegistry::load(p),
        None => Ok(PresetRegistry::builtin()),
    }
}

fn gen_data(mut a: GenDataArgs) -> Result<()> {
    let started = Instant::now();
    a.seed = env_seed(a.seed)?;
    let mode: CorpusMode = a.mode.parse()?;
    let reg = registry(a.presets.as_deref())?;
    let mut record = start("gen-data", &a.out, &a, a.seed)?;
    if a.write_presets {
        write(&a.out, "presets.json", reg.to_json().as_bytes())?;
        record.outputs.push("presets.json".into());
    }
    if a.desk {
        let (train, val) = desk_corpus(&DeskSpec {
            size: a.size,
            train_per_class: a.train_per_class,
            val_per_class: a.val_per_class,
            seed: a.seed,
        });
        train.save_folder(&a.out.join("train"))?;
        val.save_folder(&a.out.join("val"))?;
        record.outputs.extend(["train".to_string(), "val".to_string()]);
    } else {
        let src = a.src.as_ref().expect("clap requires --src without --desk");
        let opts = CorpusOptions {
            mode,
            seed: a.seed,
            fraction: a.fraction,
            workers: a.workers,
        };
        let manifest = generate_corpus(src, &a.out, &reg, &opts)?;
        let skipped = manifest.entries.iter().filter(|e| e.warning.is_some()).count();
        if skipped > 0 {
            log::warn!("{skipped} unreadable images skipped; see manifest.json");
        }
        record.outputs.push("manifest.json".into());
    }
    finish(record, &a.out, started)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    cfg.apply_env()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory; set `out` or pass --out".into()))?;
    let outcome = experiment::run(&cfg, Some(&out))?;
    if let Some(val) = outcome.record.metrics.get("val") {
        if let (Some(clean), Some(mean)) = (val.row("clean"), val.row("mean")) {
            log::info!("clean top1 {:.4}, filtered mean top1 {:.4}", clean.top1, mean.top1);
        }
    }
    println!("{}", out.join(experiment::RUN_RECORD).display());
    Ok(())
}

fn parse_layer(layer: &str) -> Result<usize> {
    let digits = layer.strip_prefix("block").unwrap_or(layer);
    match digits.parse::<usize>() {
        Ok(k) if (1..=BLOCKS).contains(&k) => Ok(k),
        _ => Err(Error::UnknownSite(layer.to_string())),
    }
}

fn class_list(spec: Option<&str>) -> Result<Option<Vec<String>>> {
    let Some(spec) = spec else { return Ok(None) };
    let path = Path::new(spec);
    if path.is_dir() {
        return Ok(Some(
            destyle_core::data::class_dirs(path)?.into_iter().map(|(n, _)| n).collect(),
        ));
    }
    Ok(Some(spec.split(',').map(|s| s.trim().to_string()).collect()))
}

fn is_manifest(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e == "json")
}

fn load_data(path: &Path, classes: Option<&[String]>) -> Result<Dataset> {
    if is_manifest(path) {
        Dataset::load_manifest(path, classes)
    } else {
        Dataset::load_folder(path, classes)
    }
}

/// Splits a manifest dataset by preset; every non-clean preset must exist in `reg`.
fn by_preset(data: &Dataset, reg: &PresetRegistry) -> Result<(Option<Dataset>, Vec<(String, Dataset)>)> {
    let mut clean = None;
    let mut groups = Vec::new();
    for name in data.presets() {
        let subset = data.filter_preset(&name);
        if name == CLEAN {
            clean = Some(subset);
        } else {
            reg.get(&name)?;
            groups.push((name, subset));
        }
    }
    // Registry order keeps reports comparable across corpora.
    groups.sort_by_key(|(n, _)| reg.names().iter().position(|r| r == n));
    Ok((clean, groups))
}

fn check_classes(net: &destyle_core::network::Network, data: &Dataset) -> Result<()> {
    if net.spec().num_classes != data.num_classes() {
        return Err(Error::Incompatible(format!(
            "checkpoint predicts {} classes but the data names {}; pass --classes",
            net.spec().num_classes,
            data.num_classes()
        )));
    }
    Ok(())
}

fn emit(report: &Report, out: &Path, stem: &str, record: &mut RunRecord) -> Result<()> {
    for fmt in [ReportFormat::Csv, ReportFormat::Json] {
        let rel = format!("{stem}.{}", fmt.extension());
        report.emit(fmt, &out.join(&rel))?;
        record.outputs.push(rel);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let mut record = start("eval", &a.out, &a, 0)?;
    let net = checkpoint::load(&a.checkpoint)?;
    let reg = registry(a.data_args.presets.as_deref())?;
    let classes = class_list(a.data_args.classes.as_deref())?;
    let data = load_data(&a.data, classes.as_deref())?;
    check_classes(&net, &data)?;
    let cfg = EvalConfig {
        batch_size: a.data_args.batch_size.max(1),
        probe_block: parse_layer(&a.layer)?,
        per_preset: a.per_preset,
    };
    let (clean, groups) = if is_manifest(&a.data) {
        by_preset(&data, &reg)?
    } else if a.per_preset {
        let groups = filtered_groups(&data, &reg)?;
        (Some(data), groups)
    } else {
        (Some(data), Vec::new())
    };
    let report = evaluate_groups(&net, clean.as_ref(), &groups, &cfg, false)?;
    emit(&report, &a.out, "metrics", &mut record)?;
    record.metrics.insert("eval".into(), report);
    record.checkpoint = Some(a.checkpoint.display().to_string());
    finish(record, &a.out, started)
}

fn divergence(a: DivergenceArgs) -> Result<()> {
    let started = Instant::now();
    let mut record = start("divergence", &a.out, &a, 0)?;
    let net = checkpoint::load(&a.checkpoint)?;
    let reg = registry(a.data_args.presets.as_deref())?;
    let block = parse_layer(&a.layer)?;
    let classes = class_list(a.data_args.classes.as_deref())?;
    let data_a = load_data(&a.data_a, classes.as_deref())?;
    check_classes(&net, &data_a)?;
    let classes = Some(data_a.classes.clone());
    let groups = match &a.data_b {
        None => filtered_groups(&data_a, &reg)?,
        Some(b) if is_manifest(b) => {
            let data_b = load_data(b, classes.as_deref())?;
            let (clean, mut groups) = by_preset(&data_b, &reg)?;
            if let Some(c) = clean {
                groups.insert(0, (CLEAN.to_string() + "_b", c));
            }
            groups
        }
        Some(b) => {
            let name = b.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "b".into());
            vec![(name, load_data(b, classes.as_deref())?)]
        }
    };
    let cfg = EvalConfig {
        batch_size: a.data_args.batch_size.max(1),
        probe_block: block,
        per_preset: true,
    };
    let report = evaluate_groups(&net, Some(&data_a), &groups, &cfg, false)?;
    emit(&report, &a.out, "divergence", &mut record)?;
    if a.svg {
        // Titled by file stem, as `report` would redraw it.
        write(&a.out, "divergence.svg", report.to_svg("divergence").as_bytes())?;
        record.outputs.push("divergence.svg".into());
    }
    record.metrics.insert(format!("block{block}"), report);
    record.checkpoint = Some(a.checkpoint.display().to_string());
    finish(record, &a.out, started)
}

/// Entries of a folder tree or manifest, with `dst` made absolute so the
/// split manifests resolve from any directory.
fn entries_of(data: &Path) -> Result<Vec<ManifestEntry>> {
    let abs = |p: PathBuf| std::fs::canonicalize(&p).map_err(|e| Error::Io { path: p, source: e });
    if is_manifest(data) {
        let root = data.parent().unwrap_or(Path::new("."));
        let m = Manifest::load(data)?;
        return m
            .usable()
            .map(|e| {
                let mut e = e.clone();
                e.dst = abs(root.join(&e.dst))?.to_string_lossy().into_owned();
                Ok(e)
            })
            .collect();
    }
    let mut out = Vec::new();
    for (class, dir) in destyle_core::data::class_dirs(data)? {
        for file in destyle_core::data::png_files(&dir)? {
            let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push(ManifestEntry {
                src: format!("{class}/{name}"),
                preset: CLEAN.into(),
                dst: abs(file)?.to_string_lossy().into_owned(),
                class: class.clone(),
                seed: None,
                warning: None,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SplitSummary {
    classes_a: Vec<String>,
    classes_b: Vec<String>,
}

fn split(mut a: SplitArgs) -> Result<()> {
    let started = Instant::now();
    a.seed = env_seed(a.seed)?;
    let mut record = start("split-classes", &a.out, &a, a.seed)?;
    let entries = entries_of(&a.data)?;
    let mut classes: Vec<String> = entries.iter().map(|e| e.class.clone()).collect();
    classes.sort();
    classes.dedup();
    let (ia, ib) = split_classes(classes.len(), a.fraction, a.seed)?;
    let pick = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| classes[i].clone()).collect() };
    let (ca, cb) = (pick(&ia), pick(&ib));
    for (rel, names) in [("split_a.json", &ca), ("split_b.json", &cb)] {
        let m = Manifest {
            entries: entries.iter().filter(|e| names.contains(&e.class)).cloned().collect(),
        };
        write(&a.out, rel, m.to_json().as_bytes())?;
        record.outputs.push(rel.into());
    }
    let summary = SplitSummary {
        classes_a: ca,
        classes_b: cb,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write(&a.out, "classes.json", text.as_bytes())?;
    record.outputs.push("classes.json".into());
    finish(record, &a.out, started)
}

/// Reports in `path`: one for a report file, one per group for a run record.
fn reports_in(path: &Path) -> Result<BTreeMap<String, Report>> {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    if ReportFormat::from_path(path)? == ReportFormat::Json {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if let Ok(record) = serde_json::from_str::<RunRecord>(&text) {
            return Ok(record.metrics.into_iter().map(|(k, v)| (format!("{stem}_{k}"), v)).collect());
        }
    }
    Ok(BTreeMap::from([(stem, Report::load(path)?)]))
}

fn report(a: ReportArgs) -> Result<()> {
    let started = Instant::now();
    let formats = match a.format.as_str() {
        "both" => vec![ReportFormat::Csv, ReportFormat::Json],
        f => vec![f.parse()?],
    };
    let mut record = start("report", &a.out, &a, 0)?;
    for input in &a.input {
        for (stem, rep) in reports_in(input)? {
            for fmt in &formats {
                let rel = format!("{stem}.{}", fmt.extension());
                rep.emit(*fmt, &a.out.join(&rel))?;
                record.outputs.push(rel);
            }
            if a.svg {
                let rel = format!("{stem}.svg");
                write(&a.out, &rel, rep.to_svg(&stem).as_bytes())?;
                record.outputs.push(rel);
            }
            record.metrics.insert(stem, rep);
        }
    }
    finish(record, &a.out, started)
}
