//! Versioned JSON checkpoints of named parameter arrays.
//!
//! Tensors are stored as base64 little-endian f64 buffers, so a
//! save → load → save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::encoder::{EncoderConfig, EncoderWeights, HOOK_POINT};
use crate::error::{Error, Result};
use crate::numerics::{LrGroup, ParamSet, Tensor};
use crate::steering::{Bridge, StaticAdapter, SteeringConfig, SteeringState};

pub const FORMAT: &str = "steermoe-checkpoint";
pub const VERSION: u32 = 1;

/// `v<crate version>`, recorded in every checkpoint and report.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Choices the method description leaves open, recorded with every artifact.
pub fn open_decisions() -> Value {
    json!({
        "hook_point": HOOK_POINT,
        "router_layout": "single D x (L*N) matrix, layer l reads columns [l*N, (l+1)*N)",
        "pooling": "average, kernel 4, stride 4, partial last window averaged over its frames",
        "projection_bias": false,
        "alpha_weight_decay": false,
        "weight_decay": 0.01,
        "grad_clip_norm": 1.0,
        "lr_schedule": "constant",
        "best_checkpoint": "lowest dev WER",
        "static_adapter": "projection only, no layer-wise steering",
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub lr_group: LrGroup,
    pub data: String,
}

impl TensorRecord {
    pub fn tensor(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(self.data.as_bytes())
            .map_err(|e| Error::Format(format!("tensor {}: {e}", self.name)))?;
        Tensor::from_le_bytes(self.shape.clone(), &bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params<P: ParamSet + ?Sized>(kind: &str, set: &P, metadata: BTreeMap<String, Value>) -> Self {
        let tensors = set
            .params()
            .into_iter()
            .map(|p| TensorRecord {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                trainable: p.trainable(),
                lr_group: p.lr_group(),
                data: B64.encode(p.tensor().to_le_bytes()),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // Check the header fields before trusting the rest of the document.
        let raw: Value = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
        if raw.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(Error::Format(format!(
                "missing or unknown format tag, expected {FORMAT:?}"
            )));
        }
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("missing version".into()))?;
        if version != VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("metadata key {key:?} missing")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Copies every stored tensor into the parameter of the same name. All
    /// tensors are decoded and checked first, so on error `set` is untouched.
    pub fn restore_into<P: ParamSet + ?Sized>(&self, set: &mut P) -> Result<()> {
        let mut decoded: BTreeMap<&str, Tensor> = BTreeMap::new();
        for rec in &self.tensors {
            decoded.insert(&rec.name, rec.tensor()?);
        }
        {
            let params = set.params();
            if params.len() != decoded.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} tensors, model has {}",
                    decoded.len(),
                    params.len()
                )));
            }
            for p in params {
                let t = decoded
                    .get(p.name())
                    .ok_or_else(|| Error::Format(format!("tensor {} missing", p.name())))?;
                if t.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "restore",
                        lhs: p.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        for p in set.params_mut() {
            let t = &decoded[p.name()];
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of parameter names, shapes and values.
pub fn params_hash<P: ParamSet + ?Sized>(set: &P) -> String {
    let mut h = Sha256::new();
    for p in set.params() {
        h.update(p.name().as_bytes());
        h.update([0u8]);
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(p.tensor().to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn base_metadata(extra: BTreeMap<String, Value>) -> BTreeMap<String, Value> {
    let mut m = extra;
    m.insert("version".into(), Value::String(version_string()));
    m.insert("decisions".into(), open_decisions());
    m
}

pub fn encoder_checkpoint(weights: &EncoderWeights, extra: BTreeMap<String, Value>) -> Result<Checkpoint> {
    let mut m = base_metadata(extra);
    m.insert("config".into(), serde_json::to_value(&weights.config)?);
    m.insert("frame_accuracy".into(), json!(weights.frame_accuracy));
    Ok(Checkpoint::from_params("encoder", weights, m))
}

/// Restores frozen encoder weights.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<EncoderWeights> {
    ckpt.expect_kind("encoder")?;
    let config: EncoderConfig = ckpt.meta("config")?;
    let mut w = EncoderWeights::init(&config, 0)?;
    ckpt.restore_into(&mut w)?;
    w.freeze_all();
    w.frame_accuracy = ckpt.meta("frame_accuracy")?;
    Ok(w)
}

pub fn decoder_checkpoint(weights: &DecoderWeights, extra: BTreeMap<String, Value>) -> Result<Checkpoint> {
    let mut m = base_metadata(extra);
    m.insert("config".into(), serde_json::to_value(&weights.config)?);
    m.insert("perplexity".into(), json!(weights.perplexity));
    Ok(Checkpoint::from_params("decoder", weights, m))
}

/// Restores frozen decoder weights.
pub fn load_decoder(ckpt: &Checkpoint) -> Result<DecoderWeights> {
    ckpt.expect_kind("decoder")?;
    let config: DecoderConfig = ckpt.meta("config")?;
    let mut w = DecoderWeights::init(&config, 0)?;
    ckpt.restore_into(&mut w)?;
    w.freeze_all();
    w.perplexity = ckpt.meta("perplexity")?;
    Ok(w)
}

pub fn bridge_checkpoint(bridge: &Bridge, extra: BTreeMap<String, Value>) -> Result<Checkpoint> {
    let mut m = base_metadata(extra);
    let p = bridge.projection().shape();
    m.insert("variant".into(), json!(bridge.label()));
    m.insert("model_dim".into(), json!(p[0]));
    m.insert("decoder_dim".into(), json!(p[1]));
    if let Bridge::Moe(s) = bridge {
        m.insert("steering".into(), serde_json::to_value(&s.config)?);
        m.insert("num_layers".into(), json!(s.num_layers()));
    }
    Ok(Checkpoint::from_params("bridge", bridge, m))
}

pub fn load_bridge(ckpt: &Checkpoint) -> Result<Bridge> {
    ckpt.expect_kind("bridge")?;
    let model_dim: usize = ckpt.meta("model_dim")?;
    let decoder_dim: usize = ckpt.meta("decoder_dim")?;
    let variant: String = ckpt.meta("variant")?;
    let mut bridge = if variant == "static" {
        Bridge::Static(StaticAdapter::init(model_dim, decoder_dim, 0))
    } else {
        let config: SteeringConfig = ckpt.meta("steering")?;
        let layers: usize = ckpt.meta("num_layers")?;
        Bridge::Moe(SteeringState::init(&config, layers, model_dim, decoder_dim, 0)?)
    };
    ckpt.restore_into(&mut bridge)?;
    Ok(bridge)
}
