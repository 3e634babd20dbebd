//! De-stylization: a hypernetwork that predicts per-site AdaIN codes from a
//! frozen image embedding.
//!
//! The trunk is four `linear → relu` layers shared by all sites, followed by
//! one linear head per site emitting `[scale; shift]`. Heads start at zero,
//! so a freshly attached gDS module leaves the base network's outputs
//! unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{AttachKind, Attachment, Arch, Mode, Network, RunOptions, Site, BASE_PREFIX};
use crate::norm::{self, StyleCode, DEFAULT_EPS};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

pub const DS_PREFIX: &str = "ds/";
pub const TRUNK_LAYERS: usize = 4;
pub const DEFAULT_WIDTH: usize = 48;
/// Blocks fed to the encoder.
pub const ENCODER_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub site: Site,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsSpec {
    pub z_dim: usize,
    pub width: usize,
    pub heads: Vec<HeadSpec>,
}

fn trunk_name(i: usize, what: &str) -> String {
    format!("{DS_PREFIX}trunk{i}/{what}")
}

fn head_name(site: Site, what: &str) -> String {
    format!("{DS_PREFIX}head_{site}/{what}")
}

impl DsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.width == 0 {
            return Err(Error::param("width", "DS widths must be positive"));
        }
        if self.heads.is_empty() {
            return Err(Error::param("sites", "DS needs at least one head"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let trunk = (self.z_dim + 1) * self.width + (TRUNK_LAYERS - 1) * (self.width + 1) * self.width;
        let heads: usize = self.heads.iter().map(|h| (self.width + 1) * 2 * h.channels).sum();
        trunk + heads
    }

    /// He-initialized trunk, zero heads.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..TRUNK_LAYERS {
            let fan_in = if i == 0 { self.z_dim } else { self.width };
            let std = (2.0 / fan_in as f64).sqrt();
            store.insert(trunk_name(i, "weight"), Tensor::randn(&[fan_in, self.width], std, &mut rng), true);
            store.insert(trunk_name(i, "bias"), Tensor::zeros(&[self.width]), true);
        }
        for h in &self.heads {
            store.insert(head_name(h.site, "weight"), Tensor::zeros(&[self.width, 2 * h.channels]), true);
            store.insert(head_name(h.site, "bias"), Tensor::zeros(&[2 * h.channels]), true);
        }
        Ok(())
    }

    /// Zeroes every head, restoring the identity-at-init behaviour.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        for h in &self.heads {
            for what in ["weight", "bias"] {
                if let Some(p) = store.param_mut(&head_name(h.site, what)) {
                    p.value = Tensor::zeros(p.value.shape());
                }
            }
        }
    }

    /// Records the hypernetwork on `tape`; returns `(scale, shift)` N×C per head.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        bound: &mut Bindings,
    ) -> Result<Vec<(Var, Var)>> {
        let (_, d) = tape.value(z).dims2()?;
        if d != self.z_dim {
            return Err(Error::shape("ds_forward", format!("z of width {d}, expected {}", self.z_dim)));
        }
        let mut h = z;
        for i in 0..TRUNK_LAYERS {
            let w = store.bind(tape, &trunk_name(i, "weight"), bound)?;
            let b = store.bind(tape, &trunk_name(i, "bias"), bound)?;
            h = tape.linear(h, w, b)?;
            h = tape.relu(h)?;
        }
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = store.bind(tape, &head_name(head.site, "weight"), bound)?;
            let b = store.bind(tape, &head_name(head.site, "bias"), bound)?;
            let y = tape.linear(h, w, b)?;
            let scale = tape.slice_axis1(y, 0, head.channels)?;
            let shift = tape.slice_axis1(y, head.channels, 2 * head.channels)?;
            out.push((scale, shift));
        }
        Ok(out)
    }
}

/// Standalone hypernetwork with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DsModule {
    pub spec: DsSpec,
    pub params: ParamStore,
}

impl DsModule {
    pub fn new(spec: DsSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        spec.init(&mut params, seed)?;
        Ok(DsModule { spec, params })
    }

    /// Codes for every instance of `z` (N×z_dim): `result[head][instance]`.
    pub fn codes(&self, z: &Tensor) -> Result<Vec<Vec<StyleCode>>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let heads = self.spec.forward_var(&mut tape, &self.params, zv, &mut Bindings::new())?;
        let mut out = Vec::with_capacity(heads.len());
        for (s, t) in heads {
            let (n, c) = tape.value(s).dims2()?;
            let (sv, tv) = (tape.value(s).data(), tape.value(t).data());
            out.push(
                (0..n)
                    .map(|i| StyleCode {
                        scale: sv[i * c..(i + 1) * c].to_vec(),
                        shift: tv[i * c..(i + 1) * c].to_vec(),
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// One StyleCode per head for a single embedding.
pub fn ds_forward(ds: &DsModule, z: &[f64]) -> Result<Vec<StyleCode>> {
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    Ok(ds.codes(&zt)?.into_iter().map(|mut per| per.remove(0)).collect())
}

/// AdaIN at a DS site, replacing the static IN affine parameters.
pub fn ds_apply(x: &Tensor, codes: &[StyleCode]) -> Result<Tensor> {
    norm::adain(x, codes, DEFAULT_EPS)
}

/// `AdaIN(v, code) + v`.
pub fn gds_apply(v: &Tensor, codes: &[StyleCode]) -> Result<Tensor> {
    let (n, c, _, _) = v.dims4()?;
    let (scale, shift) = norm::code_tensors(codes, n, c)?;
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let s = tape.constant(scale);
    let t = tape.constant(shift);
    let y = norm::adain_var(&mut tape, x, s, t, DEFAULT_EPS)?;
    let out = tape.add(y, x)?;
    Ok(tape.value(out).clone())
}

/// Frozen feature extractor: the first three blocks of a base network,
/// globally pooled. Runs with running BN statistics.
#[derive(Clone, Debug)]
pub struct Encoder {
    net: Network,
}

impl Encoder {
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut base = net.base_only();
        base.params.remove_prefix("base/fc/");
        base.params.set_trainable(|_| false);
        base.bn_frozen = true;
        Ok(Encoder { net: base })
    }

    pub fn z_dim(&self) -> usize {
        self.net.spec.channels[ENCODER_BLOCKS - 1]
    }

    /// N×z embedding of an N×3×S×S batch.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.net.run(
            &mut tape,
            batch,
            Mode::Eval,
            RunOptions {
                stop_after: Some(ENCODER_BLOCKS),
                bare: true,
                ..RunOptions::default()
            },
        )?;
        let pooled = tape.global_avg_pool(out.blocks[ENCODER_BLOCKS - 1])?;
        let flat = tape.flatten(pooled)?;
        Ok(tape.value(flat).clone())
    }

    pub fn encode_image(&self, img: &Image) -> Result<Vec<f64>> {
        let s = self.net.spec.input_size;
        if img.width() != s || img.height() != s {
            return Err(Error::shape(
                "encode",
                format!("{}x{} image, encoder expects {s}x{s}", img.width(), img.height()),
            ));
        }
        Ok(self.encode(&Image::batch_to_tensor(&[img])?)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsMode {
    /// Codes replace the IN affine parameters of an IBN network.
    Ds,
    /// Codes drive skip-connected AdaIN at block outputs.
    Gds,
}

/// Attaches a fresh hypernetwork at `sites`, freezing every base weight.
/// The network's BN layers switch to running statistics.
pub fn attach(net: &mut Network, sites: &[Site], mode: DsMode, width: usize, seed: u64) -> Result<()> {
    net.check_unattached()?;
    if sites.is_empty() {
        return Err(Error::param("sites", "need at least one site"));
    }
    if mode == DsMode::Ds && net.spec.arch != Arch::Ibn {
        return Err(Error::Incompatible("DS mode needs a network with IN layers".into()));
    }
    let mut heads = Vec::with_capacity(sites.len());
    for &site in sites {
        let channels = net.site_channels(site)?;
        match (mode, site) {
            (DsMode::Ds, Site::In(_)) | (DsMode::Gds, Site::Block(_)) => {}
            _ => {
                return Err(Error::Incompatible(format!("site {site} is not valid in {mode:?} mode")));
            }
        }
        heads.push(HeadSpec { site, channels });
    }
    let encoder = Encoder::from_network(net)?;
    let spec = DsSpec {
        z_dim: encoder.z_dim(),
        width,
        heads,
    };
    spec.init(&mut net.params, seed)?;
    net.params.set_trainable(|n| n.starts_with(DS_PREFIX));
    net.attachment = Some(Attachment {
        kind: match mode {
            DsMode::Ds => AttachKind::Ds,
            DsMode::Gds => AttachKind::Gds,
        },
        sites: sites.to_vec(),
        ds: Some(spec),
    });
    net.bn_frozen = true;
    net.encoder = Some(Box::new(encoder));
    Ok(())
}

/// Copies the attached hypernetwork out of `net`.
pub fn extract(net: &Network) -> Option<DsModule> {
    let spec = net.attachment.as_ref()?.ds.clone()?;
    let mut params = ParamStore::new();
    for (name, p) in net.params.iter().filter(|(n, _)| n.starts_with(DS_PREFIX)) {
        params.insert(name, p.value.clone(), p.trainable);
    }
    Some(DsModule { spec, params })
}

/// True when only `ds/` parameters are trainable and every base weight is frozen.
pub fn base_is_frozen(net: &Network) -> bool {
    net.params
        .iter()
        .filter(|(n, _)| n.starts_with(BASE_PREFIX))
        .all(|(_, p)| !p.trainable)
}
