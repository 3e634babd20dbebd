//! Reproducible training and evaluation runs driven by a JSON config.
//!
//! A run loads or generates data, prepares the network for its regime,
//! trains with momentum SGD, evaluates on clean and per-preset filtered
//! validation sets, audits which weights changed, and writes everything
//! under one output directory next to a `run_record.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{spearman, summary_divergence, topk_accuracy, ChannelGaussianSummary};
use crate::checkpoint;
use crate::data::{split_classes, Dataset, Sample};
use crate::desk::{desk_corpus, DeskSpec, SHAPES};
use crate::destyle::{self, DsMode, DEFAULT_WIDTH, DS_PREFIX};
use crate::error::{Error, Result};
use crate::filters::{filter_dataset, CorpusMode, PresetRegistry};
use crate::network::{adabn_recalibrate, Arch, NetSpec, Network, Site, BASE_PREFIX, RESIN_PREFIX};
use crate::report::{write_file, Report, ReportRow, CLEAN_ROW};
use crate::train::{embed_dataset, predict, train_epoch, OptimizerConfig, Sgd};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "DESTYLE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Train every weight from a fresh initialization.
    Scratch,
    /// Finetune every weight of a pretrained network.
    Ft,
    /// Train only the IN affine parameters of an IBN network.
    IbnIn,
    /// Hypernetwork codes at the IN sites of an IBN network.
    Ds,
    Resin,
    ResinNoskip,
    Gds,
    /// No training; BN statistics recalibrated per evaluation domain.
    Adabn,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Ft => "ft",
            Regime::IbnIn => "ibn_in",
            Regime::Ds => "ds",
            Regime::Resin => "resin",
            Regime::ResinNoskip => "resin_noskip",
            Regime::Gds => "gds",
            Regime::Adabn => "adabn",
        }
    }

    /// Whether a parameter may change during training under this regime.
    pub fn may_train(self, name: &str) -> bool {
        match self {
            Regime::Scratch | Regime::Ft => true,
            Regime::IbnIn => name.contains("/norm1_in/"),
            Regime::Ds | Regime::Gds => name.starts_with(DS_PREFIX),
            Regime::Resin | Regime::ResinNoskip => name.starts_with(RESIN_PREFIX),
            Regime::Adabn => false,
        }
    }

    pub fn default_sites(self) -> Vec<Site> {
        match self {
            Regime::Ds => vec![Site::In(1), Site::In(2), Site::In(3)],
            _ => vec![Site::Block(1), Site::Block(2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The bundled procedural shape corpus.
    Desk {
        #[serde(default = "desk_size")]
        size: usize,
        #[serde(default = "desk_train")]
        train_per_class: usize,
        #[serde(default = "desk_val")]
        val_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Folder-per-class PNG trees.
    Folder { train: PathBuf, val: PathBuf },
}

fn desk_size() -> usize {
    DeskSpec::default().size
}

fn desk_train() -> usize {
    DeskSpec::default().train_per_class
}

fn desk_val() -> usize {
    DeskSpec::default().val_per_class
}

impl Default for DataSource {
    fn default() -> Self {
        let d = DeskSpec::default();
        DataSource::Desk {
            size: d.size,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSet {
    #[default]
    Clean,
    /// Each sampled training image through one random preset.
    Mini,
    /// Every training image through every preset.
    Full,
    /// Images listed in a corpus manifest.
    Manifest(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    #[serde(default = "half")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Which half training sees; the other half is held out.
    pub train_on: Half,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default)]
    pub train_set: TrainSet,
    /// Share of each class drawn for the mini train set.
    #[serde(default = "mini_fraction")]
    pub mini_fraction: f64,
    /// Also keep the unfiltered images in a mini/full train set.
    #[serde(default)]
    pub include_clean: bool,
    #[serde(default)]
    pub class_split: Option<ClassSplit>,
}

fn mini_fraction() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            train_set: TrainSet::Clean,
            mini_fraction: mini_fraction(),
            include_clean: false,
            class_split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "arch")]
    pub arch: Arch,
    #[serde(default = "channels")]
    pub channels: Vec<usize>,
    #[serde(default = "classes")]
    pub num_classes: usize,
    #[serde(default = "input_size")]
    pub input_size: usize,
}

fn arch() -> Arch {
    Arch::Base
}

fn channels() -> Vec<usize> {
    NetSpec::default().channels
}

fn classes() -> usize {
    NetSpec::default().num_classes
}

fn input_size() -> usize {
    NetSpec::default().input_size
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            arch: arch(),
            channels: channels(),
            num_classes: classes(),
            input_size: input_size(),
        }
    }
}

/// Either a named schedule (`"finetune"`) or explicit settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OptimizerSpec {
    Named(String),
    Explicit(OptimizerConfig),
}

impl OptimizerSpec {
    pub fn resolve(&self) -> Result<OptimizerConfig> {
        let cfg = match self {
            OptimizerSpec::Named(n) => OptimizerConfig::named(n)?,
            OptimizerSpec::Explicit(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "eval_batch")]
    pub batch_size: usize,
    /// Block whose features feed the divergence column.
    #[serde(default = "probe_block")]
    pub probe_block: usize,
    /// Evaluate every preset on the validation set.
    #[serde(default = "yes")]
    pub per_preset: bool,
}

fn eval_batch() -> usize {
    64
}

fn probe_block() -> usize {
    crate::network::BLOCKS
}

fn yes() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: eval_batch(),
            probe_block: probe_block(),
            per_preset: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub regime: Regime,
    #[serde(default)]
    pub data: DataConfig,
    /// Preset registry JSON; the built-in twenty when absent.
    #[serde(default)]
    pub presets: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Pretrained checkpoint, required by every regime except scratch.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub sites: Option<Vec<Site>>,
    #[serde(default = "ds_width")]
    pub ds_width: usize,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn ds_width() -> usize {
    DEFAULT_WIDTH
}

impl ExperimentConfig {
    /// Parses strictly; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical bytes of the config. The output directory is left out so
    /// that identical experiments hash identically wherever they write.
    pub fn to_json(&self) -> String {
        let canonical = ExperimentConfig {
            out: None,
            ..self.clone()
        };
        let mut s = serde_json::to_string_pretty(&canonical).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Folder { train, val } = &mut self.data.source {
            fix(train);
            fix(val);
        }
        if let TrainSet::Manifest(p) = &mut self.data.train_set {
            fix(p);
        }
        if let Some(p) = &mut self.presets {
            fix(p);
        }
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.out {
            fix(p);
        }
    }

    /// Applies `DESTYLE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<Site> {
        self.sites.clone().unwrap_or_else(|| self.regime.default_sites())
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let opt = self.optimizer.resolve()?;
        if self.regime != Regime::Scratch && self.init_checkpoint.is_none() {
            return Err(Error::Config(format!(
                "regime {} needs init_checkpoint",
                self.regime.name()
            )));
        }
        if self.regime == Regime::Adabn && opt.epochs != 0 {
            return Err(Error::Config("adabn does not train; set epochs to 0".into()));
        }
        if !(self.data.mini_fraction > 0.0 && self.data.mini_fraction <= 1.0) {
            return Err(Error::Config("mini_fraction must be in (0, 1]".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        if !(1..=crate::network::BLOCKS).contains(&self.eval.probe_block) {
            return Err(Error::Config("eval.probe_block must be in 1..=5".into()));
        }
        if self.ds_width == 0 {
            return Err(Error::Config("ds_width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<PresetRegistry> {
        match &self.presets {
            Some(p) => PresetRegistry::load(p),
            None => Ok(PresetRegistry::builtin()),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of every tensor's f64 bytes, keyed by name.
pub fn weight_hashes(net: &Network) -> BTreeMap<String, String> {
    net.params()
        .iter()
        .map(|(n, p)| {
            let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.to_string(), sha256_hex(&bytes))
        })
        .collect()
}

/// Which weights a run changed, and whether any frozen one did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightAudit {
    pub changed: Vec<String>,
    pub unchanged: usize,
    pub violations: Vec<String>,
}

impl WeightAudit {
    pub fn compare(regime: Regime, before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Self {
        let mut changed = Vec::new();
        let mut violations = Vec::new();
        let mut unchanged = 0;
        for (name, h) in after {
            if before.get(name) == Some(h) {
                unchanged += 1;
                continue;
            }
            if before.contains_key(name) && !regime.may_train(name) {
                violations.push(name.clone());
            }
            changed.push(name.clone());
        }
        WeightAudit {
            changed,
            unchanged,
            violations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// SHA-256 of the `config.json` written next to this record.
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    /// Evaluation reports keyed by validation group.
    #[serde(default)]
    pub metrics: BTreeMap<String, Report>,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_audit: Option<WeightAudit>,
    /// Files written by the run, relative to the output directory.
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        RunRecord {
            command: command.to_string(),
            config_hash: sha256_hex(config_bytes),
            seed,
            regime: None,
            epoch_losses: Vec::new(),
            metrics: BTreeMap::new(),
            wall_clock_secs: 0.0,
            checkpoint: None,
            weight_audit: None,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_file(&out.join(RUN_RECORD), self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const RUN_RECORD: &str = "run_record.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";

/// Clean train/val splits and class names for a data source.
pub fn load_source(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Desk {
            size,
            train_per_class,
            val_per_class,
            seed,
        } => Ok(desk_corpus(&DeskSpec {
            size: *size,
            train_per_class: *train_per_class,
            val_per_class: *val_per_class,
            seed: *seed,
        })),
        DataSource::Folder { train, val } => {
            let train = Dataset::load_folder(train, None)?;
            let val = Dataset::load_folder(val, Some(&train.classes))?;
            Ok((train, val))
        }
    }
}

/// Everything a run needs besides the config: the clean data.
pub struct RunInputs {
    pub train: Dataset,
    pub val: Dataset,
    pub registry: PresetRegistry,
}

impl RunInputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, val) = load_source(&cfg.data.source)?;
        Ok(RunInputs {
            train,
            val,
            registry: cfg.registry()?,
        })
    }
}

/// Validation groups: the whole set, or seen/unseen halves under a class split.
fn groups(cfg: &ExperimentConfig, val: &Dataset) -> Result<(Option<Vec<usize>>, Vec<(String, Dataset)>)> {
    let Some(split) = &cfg.data.class_split else {
        return Ok((None, vec![("val".to_string(), val.clone())]));
    };
    let (a, b) = split_classes(val.num_classes(), split.fraction, split.seed)?;
    let (seen, unseen) = match split.train_on {
        Half::A => (a, b),
        Half::B => (b, a),
    };
    let groups = vec![
        ("val".to_string(), val.clone()),
        ("val_seen".to_string(), val.filter_labels(&seen)),
        ("val_unseen".to_string(), val.filter_labels(&unseen)),
    ];
    Ok((Some(seen), groups))
}

fn build_train_set(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64, seen: Option<&[usize]>) -> Result<Dataset> {
    let clean = match seen {
        Some(labels) => inputs.train.filter_labels(labels),
        None => inputs.train.clone(),
    };
    let mut set = match &cfg.data.train_set {
        TrainSet::Clean => return Ok(clean),
        TrainSet::Mini => filter_dataset(&clean, &inputs.registry, CorpusMode::Mini, cfg.data.mini_fraction, seed)?,
        TrainSet::Full => filter_dataset(&clean, &inputs.registry, CorpusMode::Full, 1.0, seed)?,
        TrainSet::Manifest(p) => {
            let d = Dataset::load_manifest(p, Some(&inputs.train.classes))?;
            match seen {
                Some(labels) => d.filter_labels(labels),
                None => d,
            }
        }
    };
    if cfg.data.include_clean {
        set.samples.extend(clean.samples);
    }
    Ok(set)
}

/// Builds the network for `cfg.regime`, loading and attaching as needed.
pub fn prepare_network(cfg: &ExperimentConfig, seed: u64, classes: usize) -> Result<Network> {
    let mut net = match cfg.regime {
        Regime::Scratch => Network::new(NetSpec {
            arch: cfg.network.arch,
            channels: cfg.network.channels.clone(),
            num_classes: cfg.network.num_classes,
            input_size: cfg.network.input_size,
            seed,
        })?,
        _ => {
            let path = cfg
                .init_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("init_checkpoint is required".into()))?;
            let net = checkpoint::load(path)?;
            if net.attachment().is_some() {
                return Err(Error::Incompatible(
                    "init_checkpoint must hold a base network without attachments".into(),
                ));
            }
            net
        }
    };
    if net.spec().num_classes != classes {
        return Err(Error::Incompatible(format!(
            "network predicts {} classes, data has {classes}",
            net.spec().num_classes
        )));
    }
    let sites = cfg.sites();
    match cfg.regime {
        Regime::Scratch | Regime::Ft => {
            net.params_mut().set_trainable(|_| true);
            net.set_bn_frozen(false);
        }
        Regime::IbnIn => {
            if net.spec().arch != Arch::Ibn {
                return Err(Error::Incompatible("ibn_in needs an IBN network".into()));
            }
            net.params_mut().set_trainable(|n| Regime::IbnIn.may_train(n));
            net.set_bn_frozen(true);
        }
        Regime::Ds => destyle::attach(&mut net, &sites, DsMode::Ds, cfg.ds_width, seed)?,
        Regime::Gds => destyle::attach(&mut net, &sites, DsMode::Gds, cfg.ds_width, seed)?,
        Regime::Resin => net.attach_resin(&sites, true, seed)?,
        Regime::ResinNoskip => net.attach_resin(&sites, false, seed)?,
        Regime::Adabn => {
            net.params_mut().set_trainable(|_| false);
            net.set_bn_frozen(true);
        }
    }
    Ok(net)
}

/// One report row for `data`: accuracy plus divergence from `clean` when given.
pub fn metric_row(
    name: &str,
    net: &Network,
    data: &Dataset,
    cfg: &EvalConfig,
    clean: Option<&ChannelGaussianSummary>,
) -> Result<(ReportRow, ChannelGaussianSummary)> {
    let (logits, feats) = predict(net, data, cfg.batch_size, Some(cfg.probe_block))?;
    let labels = data.labels();
    let summary = ChannelGaussianSummary::from_features(&feats.expect("features requested"))?;
    let divergence = clean.map(|c| summary_divergence(c, &summary)).transpose()?;
    let classes = logits.dims2()?.1;
    Ok((
        ReportRow {
            preset: name.to_string(),
            top1: topk_accuracy(&logits, &labels, 1)?,
            top5: topk_accuracy(&logits, &labels, 5.min(classes))?,
            divergence,
        },
        summary,
    ))
}

/// Clean validation images pushed through every preset.
pub fn filtered_groups(val: &Dataset, registry: &PresetRegistry) -> Result<Vec<(String, Dataset)>> {
    let mut groups = Vec::with_capacity(registry.len());
    for preset in registry.presets() {
        let mut samples = Vec::with_capacity(val.len());
        for s in &val.samples {
            samples.push(Sample {
                image: preset.apply(&s.image)?.quantized(),
                label: s.label,
                preset: preset.name.clone(),
            });
        }
        groups.push((preset.name.clone(), Dataset::new(val.classes.clone(), samples)));
    }
    Ok(groups)
}

/// Clean row (divergence 0), one row per group with divergence from the
/// clean set, then the mean row and the divergence/top-1 rank correlation.
/// With `adabn`, every set is scored by a copy recalibrated on that set.
pub fn evaluate_groups(
    net: &Network,
    clean: Option<&Dataset>,
    groups: &[(String, Dataset)],
    cfg: &EvalConfig,
    adabn: bool,
) -> Result<Report> {
    let calibrated = |data: &Dataset| -> Result<Network> {
        if !adabn {
            return Ok(net.clone());
        }
        let batches: Vec<_> = data
            .batches(cfg.batch_size)
            .map(|idx| data.batch(&idx).map(|(x, _)| x))
            .collect::<Result<_>>()?;
        adabn_recalibrate(net, batches.iter())
    };
    let mut rows = Vec::with_capacity(groups.len() + 2);
    let clean_summary = match clean {
        Some(c) => {
            let (mut row, summary) = metric_row(CLEAN_ROW, &calibrated(c)?, c, cfg, None)?;
            row.divergence = Some(0.0);
            rows.push(row);
            Some(summary)
        }
        None => None,
    };
    for (name, data) in groups {
        let (row, _) = metric_row(name, &calibrated(data)?, data, cfg, clean_summary.as_ref())?;
        log::debug!("{name}: top1 {:.4}", row.top1);
        rows.push(row);
    }
    let mut report = Report::new(rows);
    if let Some(mean) = report.mean_row() {
        let pairs: Vec<(f64, f64)> = report
            .preset_rows()
            .filter_map(|r| r.divergence.map(|d| (d, r.top1)))
            .collect();
        let (divs, accs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        report.spearman = spearman(&divs, &accs).ok();
        report.rows.push(mean);
    }
    Ok(report)
}

/// Clean validation plus, when `cfg.per_preset`, every preset of `registry`.
pub fn evaluate(net: &Network, val: &Dataset, registry: &PresetRegistry, cfg: &EvalConfig, adabn: bool) -> Result<Report> {
    let groups = if cfg.per_preset { filtered_groups(val, registry)? } else { Vec::new() };
    evaluate_groups(net, Some(val), &groups, cfg, adabn)
}

pub struct RunOutcome {
    pub record: RunRecord,
    pub network: Network,
}

/// Runs `cfg` with already-loaded inputs. Writes into `out` when given.
pub fn run_with_inputs(cfg: &ExperimentConfig, inputs: &RunInputs, out: Option<&Path>) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let opt_cfg = cfg.optimizer.resolve()?;
    let seed = cfg.seed;
    let config_bytes = cfg.to_json();
    let mut record = RunRecord::new("train", config_bytes.as_bytes(), seed);
    record.regime = Some(cfg.regime);

    let classes = inputs.train.num_classes();
    if let DataSource::Desk { size, .. } = cfg.data.source {
        if size != cfg.network.input_size && cfg.regime == Regime::Scratch {
            return Err(Error::Config(format!(
                "desk images are {size}px but network.input_size is {}",
                cfg.network.input_size
            )));
        }
    }
    let mut net = prepare_network(cfg, seed, classes)?;
    let (seen, groups) = groups(cfg, &inputs.val)?;
    let train = build_train_set(cfg, inputs, seed, seen.as_deref())?;
    if opt_cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    log::info!(
        "{}: {} training images, {} trainable of {} base parameters",
        cfg.regime.name(),
        train.len(),
        net.trainable_param_count(),
        net.base_param_count()
    );

    if let Some(out) = out {
        write_file(&out.join(CONFIG_FILE), config_bytes.as_bytes())?;
        record.outputs.push(CONFIG_FILE.into());
    }
    let before = weight_hashes(&net);
    let embeddings = if opt_cfg.epochs > 0 {
        embed_dataset(&net, &train, cfg.eval.batch_size)?
    } else {
        None
    };
    let mut sgd = Sgd::new(opt_cfg.momentum, opt_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::desk::mix_seed(seed, 0x7EA1));
    for epoch in 0..opt_cfg.epochs {
        let lr = opt_cfg.lr_at(epoch);
        let loss = train_epoch(&mut net, &train, &mut sgd, lr, opt_cfg.batch_size, &mut rng, embeddings.as_ref())?;
        log::info!("epoch {}/{}: lr {lr} loss {loss:.5}", epoch + 1, opt_cfg.epochs);
        record.epoch_losses.push(loss);
        if let Some(out) = out {
            let rel = format!("checkpoints/epoch_{:03}.ckpt", epoch + 1);
            checkpoint::save(&net, &out.join(&rel))?;
            record.outputs.push(rel);
        }
    }
    let audit = WeightAudit::compare(cfg.regime, &before, &weight_hashes(&net));
    if !audit.violations.is_empty() {
        return Err(Error::Incompatible(format!(
            "frozen weights changed: {}",
            audit.violations.join(", ")
        )));
    }
    record.weight_audit = Some(audit);
    checkpoint::round_to_storage(&mut net)?;
    if let Some(out) = out {
        checkpoint::save(&net, &out.join(MODEL_FILE))?;
        record.checkpoint = Some(MODEL_FILE.into());
        record.outputs.push(MODEL_FILE.into());
    }

    for (name, data) in &groups {
        let report = evaluate(&net, data, &inputs.registry, &cfg.eval, cfg.regime == Regime::Adabn)?;
        if let Some(out) = out {
            for fmt in [crate::report::ReportFormat::Csv, crate::report::ReportFormat::Json] {
                let rel = format!("metrics_{name}.{}", fmt.extension());
                report.emit(fmt, &out.join(&rel))?;
                record.outputs.push(rel);
            }
        }
        record.metrics.insert(name.clone(), report);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(out) = out {
        record.save(out)?;
    }
    Ok(RunOutcome { record, network: net })
}

/// Loads the inputs for `cfg` and runs it.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let inputs = RunInputs::load(cfg)?;
    run_with_inputs(cfg, &inputs, out)
}

/// Class names of the bundled corpus.
pub fn desk_classes() -> Vec<String> {
    SHAPES.iter().map(|s| s.to_string()).collect()
}

/// Every parameter prefix a regime may touch, for documentation and audits.
pub fn trainable_prefixes(regime: Regime) -> &'static [&'static str] {
    match regime {
        Regime::Scratch | Regime::Ft => &[BASE_PREFIX],
        Regime::IbnIn => &["base/block*/norm1_in/"],
        Regime::Ds | Regime::Gds => &[DS_PREFIX],
        Regime::Resin | Regime::ResinNoskip => &[RESIN_PREFIX],
        Regime::Adabn => &[],
    }
}
