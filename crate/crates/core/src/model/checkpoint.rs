//! Binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic            14 bytes  "STAGENET-CKPT\0"
//! manifest length  u64 little-endian
//! manifest         UTF-8 text (versioned; recreates the model skeleton)
//! payload          little-endian f64 values, concatenated per manifest
//! digest           SHA-256 over every preceding byte
//! ```
//!
//! The manifest carries the architecture, scale profile, seed, dropout
//! rate, optional free-form metadata lines, and one `tensor` line per
//! parameter with its dimensions and element offset into the payload.
//! Loading rebuilds the model from the manifest and overwrites every
//! tensor, so a round trip is bitwise exact; the digest catches any
//! corruption of the stored bytes.

use crate::error::{Error, Result};
use crate::model::arch::{ArchitectureId, ScaleProfile};
use crate::model::build::Model;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 14] = b"STAGENET-CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const DIGEST_LEN: usize = 32;

fn fmt_list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Schema(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

pub(crate) fn encode_checkpoint(
    model: &Model,
    meta: &[(String, String)],
    version: u32,
) -> Vec<u8> {
    let params = model.named_parameters();

    let mut manifest = String::new();
    manifest.push_str(&format!("version={version}\n"));
    manifest.push_str(&format!("architecture={}\n", model.architecture));
    manifest.push_str(&format!("profile.name={}\n", model.profile.name));
    manifest.push_str(&format!(
        "profile.input_shape={}\n",
        fmt_list(&model.profile.input_shape)
    ));
    manifest.push_str(&format!(
        "profile.conv_channels={}\n",
        fmt_list(&model.profile.conv_channels)
    ));
    manifest.push_str(&format!("profile.hidden_size={}\n", model.profile.hidden_size));
    manifest.push_str(&format!(
        "profile.head_widths={}\n",
        fmt_list(&model.profile.head_widths)
    ));
    manifest.push_str(&format!("seed={}\n", model.seed));
    manifest.push_str(&format!("dropout_rate={}\n", model.dropout_rate));
    for (key, value) in meta {
        manifest.push_str(&format!("meta.{key}={value}\n"));
    }
    let mut offset = 0usize;
    for (name, tensor) in &params {
        manifest.push_str(&format!(
            "tensor {name} {} {offset}\n",
            fmt_list(tensor.shape())
        ));
        offset += tensor.numel();
    }

    let manifest_bytes = manifest.into_bytes();
    let payload_len: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut bytes = Vec::with_capacity(
        CHECKPOINT_MAGIC.len() + 8 + manifest_bytes.len() + payload_len * 8 + DIGEST_LEN,
    );
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_bytes);
    for (_, tensor) in &params {
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

/// Writes the model (and optional metadata lines) to `path`.
pub fn save_checkpoint(model: &Model, meta: &[(String, String)], path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta, CHECKPOINT_VERSION);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Vec<(String, String)>)> {
    let header_len = CHECKPOINT_MAGIC.len() + 8;
    if bytes.len() < header_len + DIGEST_LEN {
        return Err(Error::Truncated(format!(
            "checkpoint is {} bytes, shorter than the fixed framing",
            bytes.len()
        )));
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }

    let body = &bytes[..bytes.len() - DIGEST_LEN];
    let stored = &bytes[bytes.len() - DIGEST_LEN..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Integrity("checkpoint digest mismatch".into()));
    }

    let mut len_buf = [0u8; 8];
    len_buf.copy_from_slice(&bytes[CHECKPOINT_MAGIC.len()..header_len]);
    let manifest_len = u64::from_le_bytes(len_buf) as usize;
    let manifest_end = header_len
        .checked_add(manifest_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| Error::Truncated("manifest extends past end of file".into()))?;
    let manifest = std::str::from_utf8(&bytes[header_len..manifest_end])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;

    let mut fields: Vec<(String, String)> = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for line in manifest.lines() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Schema(format!("malformed tensor line {line:?}")));
            }
            let dims = parse_list(parts[1], "tensor shape")?;
            let offset = parts[2]
                .parse::<usize>()
                .map_err(|_| Error::Schema(format!("bad tensor offset in {line:?}")))?;
            tensors.push((parts[0].to_string(), dims, offset));
        } else if let Some((key, value)) = line.split_once('=') {
            fields.push((key.to_string(), value.to_string()));
        } else {
            return Err(Error::Schema(format!("malformed manifest line {line:?}")));
        }
    }

    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Schema(format!("manifest missing {key}")))
    };

    let version: u32 = get("version")?
        .parse()
        .map_err(|_| Error::Schema("unreadable version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }

    let architecture = ArchitectureId::parse(get("architecture")?)?;
    let input_shape_vec = parse_list(get("profile.input_shape")?, "input_shape")?;
    let input_shape: [usize; 4] = input_shape_vec
        .as_slice()
        .try_into()
        .map_err(|_| Error::Schema("input_shape must have 4 entries".into()))?;
    let profile = ScaleProfile {
        name: get("profile.name")?.to_string(),
        input_shape,
        conv_channels: parse_list(get("profile.conv_channels")?, "conv_channels")?,
        hidden_size: get("profile.hidden_size")?
            .parse()
            .map_err(|_| Error::Schema("bad hidden_size".into()))?,
        head_widths: parse_list(get("profile.head_widths")?, "head_widths")?,
    };
    let seed: u64 = get("seed")?.parse().map_err(|_| Error::Schema("bad seed".into()))?;
    let dropout_rate: f64 = get("dropout_rate")?
        .parse()
        .map_err(|_| Error::Schema("bad dropout_rate".into()))?;

    let mut model = Model::build(architecture, &profile, seed)?;
    model.dropout_rate = dropout_rate;

    let payload = &body[manifest_end..];
    if payload.len() % 8 != 0 {
        return Err(Error::Truncated("payload is not a whole number of values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut expected: std::collections::BTreeMap<String, Vec<usize>> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut assignments: Vec<(String, usize)> = Vec::with_capacity(tensors.len());
    for (name, dims, offset) in &tensors {
        match expected.remove(name) {
            None => {
                return Err(Error::Schema(format!(
                    "checkpoint tensor {name} does not exist in a {architecture} model"
                )))
            }
            Some(shape) if &shape != dims => {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {dims:?}, model expects {shape:?}"
                )))
            }
            Some(_) => {}
        }
        let count: usize = dims.iter().product();
        if offset + count > values.len() {
            return Err(Error::Truncated(format!(
                "tensor {name} extends past the payload"
            )));
        }
        assignments.push((name.clone(), *offset));
    }
    if let Some(name) = expected.keys().next() {
        return Err(Error::Schema(format!("checkpoint is missing tensor {name}")));
    }

    for (name, tensor) in model.named_parameters_mut() {
        let &(_, offset) = assignments
            .iter()
            .find(|(n, _)| n == &name)
            .expect("every parameter was matched above");
        let count = tensor.numel();
        tensor.data_mut().copy_from_slice(&values[offset..offset + count]);
    }

    let meta = fields
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v)))
        .collect();
    Ok((model, meta))
}

/// Reads a checkpoint written by `save_checkpoint`, verifying the digest
/// before trusting any field.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vec<(String, String)>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
