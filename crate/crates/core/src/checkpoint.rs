//! Versioned named-tensor checkpoints.
//!
//! Layout: the 8-byte magic `DSTYCKPT`, a little-endian u64 header length,
//! the UTF-8 JSON header, then the payload of little-endian f32 values. The
//! header records the architecture, every tensor's shape and byte offset,
//! batch-norm bookkeeping, and the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::destyle::DS_PREFIX;
use crate::error::{Error, Result};
use crate::network::{resin_key, Architecture, AttachKind, Network, BASE_PREFIX, RESIN_PREFIX};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DSTYCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsMeta {
    pub momentum: f64,
    pub epsilon: f64,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub stats: BTreeMap<String, StatsMeta>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

/// Named f64 tensors in the order they are stored.
fn collect(net: &Network) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = net
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    for (key, s) in net.stats() {
        let shape = vec![s.channels()];
        out.push((format!("{key}/running_mean"), shape.clone(), s.running_mean.clone()));
        out.push((format!("{key}/running_var"), shape, s.running_var.clone()));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let tensors = collect(net);
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        index.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset: payload.len(),
        });
        for v in data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let stats = net
        .stats()
        .iter()
        .map(|(k, s)| {
            (
                k.clone(),
                StatsMeta {
                    momentum: s.momentum,
                    epsilon: s.epsilon,
                    updates: s.updates,
                },
            )
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        architecture: net.architecture(),
        tensors: index,
        stats,
        payload_len: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Rounds every stored value to f32 in place, so that the in-memory network
/// behaves exactly like one loaded back from its checkpoint.
pub fn round_to_storage(net: &mut Network) -> Result<()> {
    let round = |v: f64| v as f32 as f64;
    for (_, p) in net.params_mut().iter_mut() {
        p.value = p.value.map(round);
    }
    for s in net.stats_mut().values_mut() {
        s.running_mean.iter_mut().for_each(|v| *v = round(*v));
        s.running_var.iter_mut().for_each(|v| *v = round(*v));
    }
    net.refresh_encoder()
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint: header plus tensors widened back to f64.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..hend])?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| bad("no format_version"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw)?;
        let payload = &bytes[hend..];
        let found = hex::encode(Sha256::digest(payload));
        if found != header.payload_sha256 || payload.len() != header.payload_len {
            return Err(Error::HashMismatch {
                expected: header.payload_sha256.clone(),
                found,
            });
        }
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {} for {}", e.dtype, e.name)));
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset + 4 * count;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn take(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Builds the network the checkpoint describes.
    pub fn into_network(self) -> Result<Network> {
        let arch = self.header.architecture.clone();
        let mut net = Network::new(arch.net)?;
        if let Some(a) = arch.attachment {
            if let Some(ds) = &a.ds {
                ds.init(&mut net.params, 0)?;
            }
            if matches!(a.kind, AttachKind::Resin | AttachKind::ResinNoskip) {
                for &site in &a.sites {
                    let c = net.site_channels(site)?;
                    let key = resin_key(site);
                    net.params.insert(format!("{key}/gamma"), Tensor::zeros(&[c]), false);
                    net.params.insert(format!("{key}/beta"), Tensor::zeros(&[c]), false);
                }
            }
            net.attachment = Some(a);
        }
        self.fill(&mut net, false)?;
        apply_regime_flags(&mut net);
        net.refresh_encoder()?;
        Ok(net)
    }

    /// Loads matching tensors into `net`. Missing `base/` tensors are an
    /// error; missing `ds/` heads are zero-filled and other non-base
    /// tensors keep their current values.
    pub fn load_into(&self, net: &mut Network) -> Result<()> {
        self.fill(net, true)?;
        net.refresh_encoder()
    }

    fn fill(&self, net: &mut Network, lenient: bool) -> Result<()> {
        let mut missing_ds = false;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for name in names {
            match self.tensors.get(&name) {
                Some(t) => {
                    let p = net.params.param_mut(&name).expect("name from store");
                    if p.value.shape() != t.shape() {
                        return Err(Error::shape(
                            "checkpoint",
                            format!("{name}: stored {:?}, network {:?}", t.shape(), p.value.shape()),
                        ));
                    }
                    p.value = t.clone();
                }
                None if lenient && !name.starts_with(BASE_PREFIX) => {
                    missing_ds |= name.starts_with(DS_PREFIX);
                }
                None => return Err(Error::MissingTensor(name)),
            }
        }
        if missing_ds {
            if let Some(spec) = net.attachment.as_ref().and_then(|a| a.ds.clone()) {
                spec.zero_heads(&mut net.params);
            }
        }
        for (key, s) in net.stats.iter_mut() {
            let mean = self.take(&format!("{key}/running_mean"))?;
            let var = self.take(&format!("{key}/running_var"))?;
            if mean.len() != s.running_mean.len() || var.len() != s.running_var.len() {
                return Err(Error::shape("checkpoint", format!("{key}: statistics width")));
            }
            s.running_mean = mean.data().to_vec();
            s.running_var = var.data().to_vec();
            if let Some(meta) = self.header.stats.get(key) {
                s.momentum = meta.momentum;
                s.epsilon = meta.epsilon;
                s.updates = meta.updates;
            }
        }
        Ok(())
    }
}

/// Trainability and BN mode implied by the attachment kind.
fn apply_regime_flags(net: &mut Network) {
    match net.attachment.as_ref().map(|a| a.kind) {
        None => {
            net.params.set_trainable(|_| true);
            net.bn_frozen = false;
        }
        Some(AttachKind::Ds | AttachKind::Gds) => {
            net.params.set_trainable(|n| n.starts_with(DS_PREFIX));
            net.bn_frozen = true;
        }
        Some(_) => {
            net.params.set_trainable(|n| n.starts_with(RESIN_PREFIX));
            net.bn_frozen = true;
        }
    }
}

pub fn load(path: &Path) -> Result<Network> {
    Checkpoint::read(path)?.into_network()
}
