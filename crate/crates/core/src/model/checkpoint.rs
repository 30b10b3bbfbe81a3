//! Checkpoint files: a text manifest followed by raw little-endian f32 data.
//!
//! ```text
//! recipegen-checkpoint v1
//! vocab_size 2054
//! ...
//! tensor wte 2054x128 0 262912
//! ...
//! end
//! <bytes>
//! ```
//! Offsets and lengths count elements, not bytes.

use std::path::Path;

use super::{Activation, Model, ModelConfig, ModelError, Parameters};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &str = "recipegen-checkpoint v1";

fn manifest(m: &Model<f32>) -> String {
    let c = &m.config;
    let mut out = format!(
        "{CHECKPOINT_MAGIC}\nvocab_size {}\nn_positions {}\nn_embd {}\nn_layer {}\nn_head {}\n\
         resid_dropout {}\nembd_dropout {}\nattn_dropout {}\nactivation {}\n",
        c.vocab_size, c.n_positions, c.n_embd, c.n_layer, c.n_head,
        c.resid_dropout, c.embd_dropout, c.attn_dropout, c.activation
    );
    let mut offset = 0;
    for (name, t) in m.params.names().iter().zip(m.params.tensors()) {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor {name} {} {offset} {}\n", shape.join("x"), t.len()));
        offset += t.len();
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(m: &Model<f32>, path: &Path) -> Result<(), ModelError> {
    let mut bytes = manifest(m).into_bytes();
    for t in m.params.tensors() {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, ModelError> {
    let bytes = std::fs::read(path)?;
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("manifest has no end line"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing checkpoint header"));
    }
    let mut field = |key: &str| -> Result<String, ModelError> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
    };
    let int = |s: String| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
    let real = |s: String| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let config = ModelConfig {
        vocab_size: int(field("vocab_size")?)?,
        n_positions: int(field("n_positions")?)?,
        n_embd: int(field("n_embd")?)?,
        n_layer: int(field("n_layer")?)?,
        n_head: int(field("n_head")?)?,
        resid_dropout: real(field("resid_dropout")?)?,
        embd_dropout: real(field("embd_dropout")?)?,
        attn_dropout: real(field("attn_dropout")?)?,
        activation: field("activation")?.parse::<Activation>()?,
    };
    config.validate()?;
    let mut params = Parameters::<f32>::zeros(&config);
    let names = params.names();
    let data = &bytes[end..];
    let mut offset = 0usize;
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let line = lines.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let parts: Vec<&str> = line.split(' ').collect();
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let expect = [
            "tensor".to_string(),
            name.clone(),
            shape.join("x"),
            offset.to_string(),
            t.len().to_string(),
        ];
        if parts != expect.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad(format!("tensor line {line:?} does not match expected {:?}", expect.join(" "))));
        }
        let chunk = data
            .get(offset * 4..(offset + t.len()) * 4)
            .ok_or_else(|| bad(format!("data truncated in {name}")))?;
        for (v, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        offset += t.len();
    }
    if lines.next() != Some("end") {
        return Err(bad("unexpected trailing manifest lines"));
    }
    if data.len() != offset * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", offset * 4, data.len())));
    }
    Ok(Model { config, params })
}
