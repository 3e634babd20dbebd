//! The five-block CNN, its IBN variant, and attachments at normalization sites.
//!
//! A block is `[conv3x3 → norm → relu] × 2` followed by 2×2 average pooling;
//! the classifier is global average pooling and one linear layer. Parameters
//! live in a single [`ParamStore`] under the `base/`, `ds/` and `resin/`
//! namespaces so that each part can be frozen, saved and loaded on its own.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::destyle::{DsSpec, Encoder};
use crate::error::{Error, Result};
use crate::moments::{ChannelMoments, MomentScope};
use crate::norm::{self, BatchStats, BnMode, DEFAULT_EPS};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

pub const BLOCKS: usize = 5;
pub const DEFAULT_CHANNELS: [usize; BLOCKS] = [16, 32, 64, 64, 64];
/// Blocks whose first normalization is split between IN and BN in the IBN variant.
pub const IBN_BLOCKS: usize = 3;
pub const BASE_PREFIX: &str = "base/";
pub const RESIN_PREFIX: &str = "resin/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Base,
    Ibn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub arch: Arch,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Square input side; must be a multiple of 32.
    pub input_size: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            arch: Arch::Base,
            channels: DEFAULT_CHANNELS.to_vec(),
            num_classes: 10,
            input_size: 32,
            seed: 0,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != BLOCKS || self.channels.contains(&0) {
            return Err(Error::param(
                "channels",
                format!("need {BLOCKS} positive widths, got {:?}", self.channels),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "need at least 2 classes"));
        }
        let stride = 1 << BLOCKS;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::param(
                "input_size",
                format!("{} is not a positive multiple of {stride}", self.input_size),
            ));
        }
        if self.arch == Arch::Ibn {
            if let Some(c) = self.channels[..IBN_BLOCKS].iter().find(|c| *c % 2 != 0) {
                return Err(Error::param("channels", format!("odd width {c} at an IBN split site")));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            3
        } else {
            self.channels[block - 1]
        }
    }

    pub fn is_split(&self, block: usize, layer: usize) -> bool {
        self.arch == Arch::Ibn && block < IBN_BLOCKS && layer == 0
    }
}

/// A place where normalization can be attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Site {
    /// Output of block `k` (1-based), after downsampling.
    Block(usize),
    /// The instance-normalized half of block `k`'s first normalization (IBN only).
    In(usize),
}

impl Site {
    pub fn block(self) -> usize {
        match self {
            Site::Block(k) | Site::In(k) => k,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Block(k) => write!(f, "block{k}"),
            Site::In(k) => write!(f, "block{k}.in"),
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownSite(s.to_string());
        let rest = s.strip_prefix("block").ok_or_else(unknown)?;
        let (num, is_in) = match rest.strip_suffix(".in") {
            Some(n) => (n, true),
            None => (rest, false),
        };
        let k: usize = num.parse().map_err(|_| unknown())?;
        match (is_in, k) {
            (false, 1..=BLOCKS) => Ok(Site::Block(k)),
            (true, 1..=IBN_BLOCKS) => Ok(Site::In(k)),
            _ => Err(unknown()),
        }
    }
}

impl TryFrom<String> for Site {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Site> for String {
    fn from(s: Site) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachKind {
    /// DS codes replace the static IN affine parameters of an IBN network.
    Ds,
    /// `v + AdaIN(v, code)` at block outputs.
    Gds,
    /// `v + IN(v)` with static trainable affine parameters.
    Resin,
    /// `IN(v)` with static affine parameters and no skip path.
    ResinNoskip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub kind: AttachKind,
    pub sites: Vec<Site>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ds: Option<DsSpec>,
}

/// Architecture descriptor stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub net: NetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<Attachment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Train-mode batch moments of one BN layer, with the element count per channel.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub key: String,
    pub moments: ChannelMoments,
    pub count: usize,
}

pub struct Forward {
    pub logits: Var,
    /// Each block's output after downsampling and any attached site.
    pub blocks: Vec<Var>,
    /// Trainable parameters recorded on the tape.
    pub bindings: Bindings,
    pub bn: Vec<BnObservation>,
}

#[derive(Default)]
pub(crate) struct RunOptions<'a> {
    pub z: Option<&'a Tensor>,
    /// Stop after this many blocks and skip the classifier.
    pub stop_after: Option<usize>,
    pub bare: bool,
    pub force_bn: Option<BnMode>,
}

pub(crate) struct RunOutput {
    pub logits: Option<Var>,
    pub blocks: Vec<Var>,
    pub bindings: Bindings,
    pub bn: Vec<BnObservation>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub(crate) spec: NetSpec,
    pub(crate) attachment: Option<Attachment>,
    pub(crate) params: ParamStore,
    pub(crate) stats: BTreeMap<String, BatchStats>,
    pub(crate) bn_frozen: bool,
    pub(crate) encoder: Option<Box<Encoder>>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.attachment == other.attachment
            && self.params == other.params
            && self.stats == other.stats
    }
}

fn conv_name(b: usize, l: usize) -> String {
    format!("base/block{}/conv{}/weight", b + 1, l + 1)
}

fn norm_key(b: usize, l: usize) -> String {
    format!("base/block{}/norm{}", b + 1, l + 1)
}

fn in_key(b: usize) -> String {
    format!("base/block{}/norm1_in", b + 1)
}

pub(crate) fn resin_key(site: Site) -> String {
    format!("{RESIN_PREFIX}{site}")
}

pub fn build_basenet(channels: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    Network::new(NetSpec {
        channels: channels.to_vec(),
        num_classes,
        seed,
        ..NetSpec::default()
    })
}

pub fn build_ibn_variant(channels: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    Network::new(NetSpec {
        arch: Arch::Ibn,
        channels: channels.to_vec(),
        num_classes,
        seed,
        ..NetSpec::default()
    })
}

impl Network {
    /// Fresh network with He-initialized convolutions.
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let mut stats = BTreeMap::new();
        for b in 0..BLOCKS {
            let out = spec.channels[b];
            for l in 0..2 {
                let cin = if l == 0 { spec.in_channels(b) } else { out };
                let std = (2.0 / (cin * 9) as f64).sqrt();
                params.insert(conv_name(b, l), Tensor::randn(&[out, cin, 3, 3], std, &mut rng), true);
                let bn_width = if spec.is_split(b, l) { out / 2 } else { out };
                let key = norm_key(b, l);
                params.insert(format!("{key}/gamma"), Tensor::full(&[bn_width], 1.0), true);
                params.insert(format!("{key}/beta"), Tensor::zeros(&[bn_width]), true);
                stats.insert(key, BatchStats::new(bn_width));
                if spec.is_split(b, l) {
                    let key = in_key(b);
                    params.insert(format!("{key}/gamma"), Tensor::full(&[out - bn_width], 1.0), true);
                    params.insert(format!("{key}/beta"), Tensor::zeros(&[out - bn_width]), true);
                }
            }
        }
        let last = spec.channels[BLOCKS - 1];
        let bound = 1.0 / (last as f64).sqrt();
        params.insert(
            "base/fc/weight",
            Tensor::uniform(&[last, spec.num_classes], -bound, bound, &mut rng),
            true,
        );
        params.insert("base/fc/bias", Tensor::zeros(&[spec.num_classes]), true);
        Ok(Network {
            spec,
            attachment: None,
            params,
            stats,
            bn_frozen: false,
            encoder: None,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn attachment(&self) -> Option<&Attachment> {
        self.attachment.as_ref()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            net: self.spec.clone(),
            attachment: self.attachment.clone(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stats(&self) -> &BTreeMap<String, BatchStats> {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut BTreeMap<String, BatchStats> {
        &mut self.stats
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_deref()
    }

    /// When set, BN layers use running statistics even in train mode.
    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn_frozen = frozen;
    }

    pub fn bn_frozen(&self) -> bool {
        self.bn_frozen
    }

    /// Scalar count of the `base/` parameters.
    pub fn base_param_count(&self) -> usize {
        self.params.count_with_prefix(BASE_PREFIX)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Every normalization site this network offers.
    pub fn sites(&self) -> Vec<Site> {
        let mut out: Vec<Site> = (1..=BLOCKS).map(Site::Block).collect();
        if self.spec.arch == Arch::Ibn {
            out.extend((1..=IBN_BLOCKS).map(Site::In));
        }
        out
    }

    /// Channel count seen at `site`.
    pub fn site_channels(&self, site: Site) -> Result<usize> {
        if !self.sites().contains(&site) {
            return Err(Error::UnknownSite(site.to_string()));
        }
        Ok(match site {
            Site::Block(k) => self.spec.channels[k - 1],
            Site::In(k) => {
                let c = self.spec.channels[k - 1];
                c - c / 2
            }
        })
    }

    /// Rebuilds the frozen encoder from the current `base/` weights.
    pub(crate) fn refresh_encoder(&mut self) -> Result<()> {
        if matches!(
            self.attachment.as_ref().map(|a| a.kind),
            Some(AttachKind::Ds | AttachKind::Gds)
        ) {
            self.encoder = Some(Box::new(Encoder::from_network(self)?));
        }
        Ok(())
    }

    /// A copy holding only the `base/` parameters and statistics.
    pub fn base_only(&self) -> Network {
        let mut params = self.params.clone();
        params.remove_prefix(crate::destyle::DS_PREFIX);
        params.remove_prefix(RESIN_PREFIX);
        Network {
            spec: self.spec.clone(),
            attachment: None,
            params,
            stats: self.stats.clone(),
            bn_frozen: self.bn_frozen,
            encoder: None,
        }
    }

    /// Attaches static IN at block outputs. The skip form starts at zero
    /// (an identity insertion); the no-skip form starts near γ = 1, β = 0.
    pub fn attach_resin(&mut self, sites: &[Site], skip: bool, seed: u64) -> Result<()> {
        self.check_unattached()?;
        if sites.is_empty() {
            return Err(Error::param("sites", "need at least one site"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).expect("valid std");
        for &site in sites {
            if !matches!(site, Site::Block(_)) {
                return Err(Error::Incompatible(format!("ResIN needs block outputs, got {site}")));
            }
            let c = self.site_channels(site)?;
            let (gamma, beta): (Vec<f64>, Vec<f64>) = if skip {
                (vec![0.0; c], vec![0.0; c])
            } else {
                (0..c).map(|_| (1.0 + noise.sample(&mut rng), noise.sample(&mut rng))).unzip()
            };
            let key = resin_key(site);
            self.params.insert(format!("{key}/gamma"), Tensor::from_parts(vec![c], gamma), true);
            self.params.insert(format!("{key}/beta"), Tensor::from_parts(vec![c], beta), true);
        }
        self.attachment = Some(Attachment {
            kind: if skip { AttachKind::Resin } else { AttachKind::ResinNoskip },
            sites: sites.to_vec(),
            ds: None,
        });
        self.params.set_trainable(|n| n.starts_with(RESIN_PREFIX));
        self.bn_frozen = true;
        Ok(())
    }

    pub(crate) fn check_unattached(&self) -> Result<()> {
        if let Some(a) = &self.attachment {
            return Err(Error::Incompatible(format!("already has a {:?} attachment", a.kind)));
        }
        Ok(())
    }

    /// Validates the input before anything is recorded.
    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let (n, c, h, w) = input.dims4()?;
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "forward",
                format!("expected N×3×{s}×{s}, got {:?}", input.shape()),
            ));
        }
        Ok(n)
    }

    pub fn forward(&self, tape: &mut Tape, input: &Tensor, mode: Mode) -> Result<Forward> {
        self.forward_with_embedding(tape, input, mode, None)
    }

    /// Forward pass with a precomputed encoder embedding (N×z) for DS/gDS.
    pub fn forward_with_embedding(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        mode: Mode,
        z: Option<&Tensor>,
    ) -> Result<Forward> {
        let out = self.run(
            tape,
            input,
            mode,
            RunOptions {
                z,
                ..RunOptions::default()
            },
        )?;
        Ok(Forward {
            logits: out.logits.expect("full run yields logits"),
            blocks: out.blocks,
            bindings: out.bindings,
            bn: out.bn,
        })
    }

    pub(crate) fn run(&self, tape: &mut Tape, input: &Tensor, mode: Mode, opts: RunOptions) -> Result<RunOutput> {
        let n = self.check_input(input)?;
        let bn_mode = opts.force_bn.unwrap_or(match mode {
            Mode::Train if !self.bn_frozen => BnMode::Train,
            _ => BnMode::Eval,
        });
        let mut bound = Bindings::new();
        let mut bn_obs = Vec::new();
        let attachment = if opts.bare { None } else { self.attachment.as_ref() };

        let mut codes: HashMap<Site, (Var, Var)> = HashMap::new();
        if let Some(a) = attachment {
            if let Some(ds) = &a.ds {
                let z = match opts.z {
                    Some(z) => z.clone(),
                    None => self
                        .encoder
                        .as_ref()
                        .ok_or_else(|| Error::Incompatible("DS attachment without an encoder".into()))?
                        .encode(input)?,
                };
                if z.shape() != [n, ds.z_dim] {
                    return Err(Error::shape(
                        "forward",
                        format!("embedding {:?} for batch {n}, z_dim {}", z.shape(), ds.z_dim),
                    ));
                }
                let zv = tape.constant(z);
                for (head, (s, t)) in ds.heads.iter().zip(ds.forward_var(tape, &self.params, zv, &mut bound)?) {
                    codes.insert(head.site, (s, t));
                }
            }
        }

        let mut x = tape.constant(input.clone());
        let mut blocks = Vec::with_capacity(BLOCKS);
        let last = opts.stop_after.unwrap_or(BLOCKS);
        for b in 0..last {
            for l in 0..2 {
                let k = self.params.bind(tape, &conv_name(b, l), &mut bound)?;
                x = tape.conv2d(x, k, 1, 1)?;
                x = self.norm(tape, x, b, l, bn_mode, &codes, &mut bound, &mut bn_obs)?;
                x = tape.relu(x)?;
            }
            x = tape.avg_pool2d(x, 2)?;
            if let Some(a) = attachment {
                let site = Site::Block(b + 1);
                if a.sites.contains(&site) {
                    x = self.site_hook(tape, x, site, a.kind, &codes, &mut bound)?;
                }
            }
            blocks.push(x);
        }
        let logits = if last == BLOCKS {
            let pooled = tape.global_avg_pool(x)?;
            let flat = tape.flatten(pooled)?;
            let w = self.params.bind(tape, "base/fc/weight", &mut bound)?;
            let bias = self.params.bind(tape, "base/fc/bias", &mut bound)?;
            Some(tape.linear(flat, w, bias)?)
        } else {
            None
        };
        Ok(RunOutput {
            logits,
            blocks,
            bindings: bound,
            bn: bn_obs,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape,
        x: Var,
        b: usize,
        l: usize,
        mode: BnMode,
        codes: &HashMap<Site, (Var, Var)>,
        bound: &mut Bindings,
        obs: &mut Vec<BnObservation>,
    ) -> Result<Var> {
        let key = norm_key(b, l);
        let mut bn = |tape: &mut Tape, x: Var, bound: &mut Bindings| -> Result<Var> {
            let g = self.params.bind(tape, &format!("{key}/gamma"), bound)?;
            let beta = self.params.bind(tape, &format!("{key}/beta"), bound)?;
            let stats = self.stats.get(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
            let (y, moments) = norm::batch_norm_var(tape, x, g, beta, stats, mode)
                .map_err(|e| match e {
                    Error::NoStats(_) => Error::NoStats(key.clone()),
                    other => other,
                })?;
            if let Some(moments) = moments {
                let (n, _, h, w) = tape.value(x).dims4()?;
                obs.push(BnObservation {
                    key: key.clone(),
                    moments,
                    count: n * h * w,
                });
            }
            Ok(y)
        };
        if !self.spec.is_split(b, l) {
            return bn(tape, x, bound);
        }
        let c = self.spec.channels[b];
        let half = c / 2;
        let xi = tape.slice_axis1(x, 0, c - half)?;
        let xb = tape.slice_axis1(x, c - half, c)?;
        let yi = match codes.get(&Site::In(b + 1)) {
            Some(&(s, t)) => norm::adain_var(tape, xi, s, t, DEFAULT_EPS)?,
            None => {
                let k = in_key(b);
                let g = self.params.bind(tape, &format!("{k}/gamma"), bound)?;
                let beta = self.params.bind(tape, &format!("{k}/beta"), bound)?;
                norm::instance_norm_var(tape, xi, g, beta, DEFAULT_EPS)?
            }
        };
        let yb = bn(tape, xb, bound)?;
        tape.concat_axis1(yi, yb)
    }

    fn site_hook(
        &self,
        tape: &mut Tape,
        v: Var,
        site: Site,
        kind: AttachKind,
        codes: &HashMap<Site, (Var, Var)>,
        bound: &mut Bindings,
    ) -> Result<Var> {
        match kind {
            AttachKind::Ds => Ok(v),
            AttachKind::Gds => {
                let &(s, t) = codes.get(&site).ok_or_else(|| Error::UnknownSite(site.to_string()))?;
                let styled = norm::adain_var(tape, v, s, t, DEFAULT_EPS)?;
                tape.add(styled, v)
            }
            AttachKind::Resin | AttachKind::ResinNoskip => {
                let key = resin_key(site);
                let g = self.params.bind(tape, &format!("{key}/gamma"), bound)?;
                let beta = self.params.bind(tape, &format!("{key}/beta"), bound)?;
                let y = norm::instance_norm_var(tape, v, g, beta, DEFAULT_EPS)?;
                if kind == AttachKind::Resin {
                    tape.add(y, v)
                } else {
                    Ok(y)
                }
            }
        }
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn apply_bn(&mut self, obs: &[BnObservation]) -> Result<()> {
        for o in obs {
            self.stats
                .get_mut(&o.key)
                .ok_or_else(|| Error::MissingTensor(o.key.clone()))?
                .update(&o.moments)?;
        }
        Ok(())
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, input, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Eval-mode logits with a precomputed embedding.
    pub fn logits_with_embedding(&self, input: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_with_embedding(&mut tape, input, Mode::Eval, z)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Eval-mode per-image channel means of block `k`'s output (N×C).
    pub fn block_features(&self, input: &Tensor, k: usize) -> Result<Tensor> {
        if !(1..=BLOCKS).contains(&k) {
            return Err(Error::UnknownSite(format!("block{k}")));
        }
        let mut tape = Tape::new();
        let out = self.run(
            &mut tape,
            input,
            Mode::Eval,
            RunOptions {
                stop_after: Some(k),
                ..RunOptions::default()
            },
        )?;
        let pooled = tape.global_avg_pool(out.blocks[k - 1])?;
        let flat = tape.flatten(pooled)?;
        Ok(tape.value(flat).clone())
    }

    /// Forward pass that records BN inputs in train mode without touching
    /// any parameters; used for statistics recalibration.
    pub(crate) fn observe_bn(&self, input: &Tensor) -> Result<Vec<BnObservation>> {
        let mut tape = Tape::new();
        let out = self.run(
            &mut tape,
            input,
            Mode::Train,
            RunOptions {
                force_bn: Some(BnMode::Train),
                ..RunOptions::default()
            },
        )?;
        Ok(out.bn)
    }
}

/// Replaces every BN layer's running statistics with moments pooled over
/// `batches`. Weights are untouched.
pub fn adabn_recalibrate<'a>(
    net: &Network,
    batches: impl IntoIterator<Item = &'a Tensor>,
) -> Result<Network> {
    if net.stats.is_empty() {
        return Err(Error::Incompatible("network has no batch-norm layers".into()));
    }
    // Per layer: total count, Σ count·mean, Σ count·(var + mean²).
    let mut acc: BTreeMap<String, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut seen = 0usize;
    for batch in batches {
        seen += 1;
        for o in net.observe_bn(batch)? {
            let c = o.moments.mean.len();
            let e = acc
                .entry(o.key)
                .or_insert_with(|| (0.0, vec![0.0; c], vec![0.0; c]));
            let w = o.count as f64;
            e.0 += w;
            for i in 0..c {
                let m = o.moments.mean[i];
                e.1[i] += w * m;
                e.2[i] += w * (o.moments.variance[i] + m * m);
            }
        }
    }
    if seen == 0 {
        return Err(Error::Empty("AdaBN target stream".into()));
    }
    let mut out = net.clone();
    for (key, (total, s1, s2)) in acc {
        let mean: Vec<f64> = s1.iter().map(|v| v / total).collect();
        let variance = s2
            .iter()
            .zip(&mean)
            .map(|(v, m)| (v / total - m * m).max(0.0))
            .collect();
        out.stats
            .get_mut(&key)
            .ok_or_else(|| Error::MissingTensor(key.clone()))?
            .set(&ChannelMoments { mean, variance })?;
    }
    out.refresh_encoder()?;
    Ok(out)
}

/// Per-channel moments of the standardized input to the first BN layer.
pub fn first_bn_standardized_mean(net: &Network, input: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = net.params.bind(&mut tape, &conv_name(0, 0), &mut Bindings::new())?;
    let y = tape.conv2d(x, k, 1, 1)?;
    let key = norm_key(0, 0);
    let stats = net.stats.get(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
    let y = if net.spec.is_split(0, 0) {
        let c = net.spec.channels[0];
        tape.slice_axis1(y, c - c / 2, c)?
    } else {
        y
    };
    let c = stats.channels();
    let ones = tape.constant(Tensor::full(&[c], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[c]));
    let (s, _) = norm::batch_norm_var(&mut tape, y, ones, zeros, stats, BnMode::Eval)?;
    Ok(crate::moments::channel_moments(tape.value(s), MomentScope::PerBatch)?.mean)
}
