//! Versioned checkpoint files with content hashes and bit-exact weight
//! serialization (hex-encoded f64 bit patterns, human-readable headers).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use infusion_core::customization::ResidualConceptEmbedding;
use infusion_core::denoiser::{DenoiserConfig, DenoiserWeights};
use infusion_core::numerics::tape::ParamSet;
use infusion_core::numerics::Tensor;

use crate::error::{CliError, Result};
use crate::util::write_atomic;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    BaseWeights,
    FinetunedWeights,
    Residual,
    TokenEmbedding,
}

/// A checkpoint payload plus provenance: which config produced it and at
/// which training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: usize,
    pub config_hash: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Weights(DenoiserWeights),
    Residual(ResidualConceptEmbedding),
    TokenEmbedding { token: String, base_fingerprint: String, embedding: Tensor },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    kind: CheckpointKind,
    step: usize,
    config_hash: String,
    payload: Value,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data_hex: String,
}

#[derive(Serialize, Deserialize)]
struct WeightsPayload {
    config: DenoiserConfig,
    arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct TokenPayload {
    token: String,
    base_fingerprint: String,
    shape: Vec<usize>,
    data_hex: String,
}

fn encode_hex(data: &[f64]) -> String {
    let mut s = String::with_capacity(data.len() * 16);
    for v in data {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

fn decode_hex(hex: &str, expect: usize) -> Result<Vec<f64>> {
    if hex.len() != expect * 16 {
        return Err(CliError::Integrity(format!(
            "hex payload length {} does not match {expect} values",
            hex.len()
        )));
    }
    let mut out = Vec::with_capacity(expect);
    for i in 0..expect {
        let chunk = &hex[i * 16..(i + 1) * 16];
        let bits = u64::from_str_radix(chunk, 16)
            .map_err(|e| CliError::Integrity(format!("bad hex chunk `{chunk}`: {e}")))?;
        out.push(f64::from_bits(bits));
    }
    Ok(out)
}

fn weights_to_value(weights: &DenoiserWeights) -> Value {
    let arrays = weights
        .flat()
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data_hex: encode_hex(t.data()),
        })
        .collect();
    serde_json::to_value(WeightsPayload { config: weights.config.clone(), arrays })
        .expect("payload serializes")
}

fn weights_from_value(value: &Value) -> Result<DenoiserWeights> {
    let payload: WeightsPayload = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Integrity(format!("weights payload parse: {e}")))?;
    let mut params = ParamSet::new();
    for arr in payload.arrays {
        let numel: usize = arr.shape.iter().product();
        let data = decode_hex(&arr.data_hex, numel)?;
        params.insert(arr.name, Tensor::new(arr.shape, data)?);
    }
    Ok(DenoiserWeights::from_flat(payload.config, params)?)
}

fn payload_to_value(payload: &Payload) -> Value {
    match payload {
        Payload::Weights(w) => weights_to_value(w),
        Payload::Residual(r) => {
            serde_json::from_str(&r.to_json()).expect("residual json is valid")
        }
        Payload::TokenEmbedding { token, base_fingerprint, embedding } => {
            serde_json::to_value(TokenPayload {
                token: token.clone(),
                base_fingerprint: base_fingerprint.clone(),
                shape: embedding.shape().to_vec(),
                data_hex: encode_hex(embedding.data()),
            })
            .expect("payload serializes")
        }
    }
}

fn payload_from_value(kind: CheckpointKind, value: &Value) -> Result<Payload> {
    match kind {
        CheckpointKind::BaseWeights | CheckpointKind::FinetunedWeights => {
            Ok(Payload::Weights(weights_from_value(value)?))
        }
        CheckpointKind::Residual => {
            let json = serde_json::to_string(value).expect("value serializes");
            Ok(Payload::Residual(ResidualConceptEmbedding::from_json(&json)?))
        }
        CheckpointKind::TokenEmbedding => {
            let payload: TokenPayload = serde_json::from_value(value.clone())
                .map_err(|e| CliError::Integrity(format!("token payload parse: {e}")))?;
            let numel: usize = payload.shape.iter().product();
            let data = decode_hex(&payload.data_hex, numel)?;
            Ok(Payload::TokenEmbedding {
                token: payload.token,
                base_fingerprint: payload.base_fingerprint,
                embedding: Tensor::new(payload.shape, data)?,
            })
        }
    }
}

/// Hash of the canonical payload encoding. `serde_json` maps are sorted,
/// so this is stable across runs.
fn hash_value(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let payload = payload_to_value(&ckpt.payload);
    let envelope = Envelope {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: ckpt.kind,
        step: ckpt.step,
        config_hash: ckpt.config_hash.clone(),
        content_hash: hash_value(&payload),
        payload,
    };
    let json = serde_json::to_string_pretty(&envelope).expect("envelope serializes");
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path)?;
    let envelope: Envelope = serde_json::from_str(&json)
        .map_err(|e| CliError::Integrity(format!("checkpoint parse `{}`: {e}", path.display())))?;
    if envelope.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CliError::Migration(format!(
            "checkpoint format_version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
            envelope.format_version
        )));
    }
    let actual = hash_value(&envelope.payload);
    if actual != envelope.content_hash {
        return Err(CliError::Integrity(format!(
            "content hash mismatch in `{}`: stored {}, computed {}",
            path.display(),
            &envelope.content_hash[..12.min(envelope.content_hash.len())],
            &actual[..12]
        )));
    }
    Ok(Checkpoint {
        kind: envelope.kind,
        step: envelope.step,
        config_hash: envelope.config_hash,
        payload: payload_from_value(envelope.kind, &envelope.payload)?,
    })
}
