//! Text-hex parameter checkpoints.
//!
//! Format (one parameter per line, little-endian f64 bytes hex-encoded):
//!
//! ```text
//! hopper-params v1
//! <name> <ndim> <dim0> [<dim1> ...] <hex>
//! ```
//!
//! The hex encoding round-trips bit-exactly, including NaN payloads.

use std::fmt::Write as _;

use super::{Param, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad header: expected 'hopper-params v1'")]
    BadHeader,
    #[error("malformed line {0}: {1}")]
    BadLine(usize, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const HEADER: &str = "hopper-params v1";

pub fn encode(store: &ParamStore) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for p in store.params() {
        out.push_str(&p.name);
        write!(out, " {}", p.shape.len()).unwrap();
        for d in &p.shape {
            write!(out, " {d}").unwrap();
        }
        out.push(' ');
        for v in &p.value {
            for b in v.to_le_bytes() {
                write!(out, "{b:02x}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn decode(text: &str) -> Result<ParamStore, CheckpointError> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(CheckpointError::BadHeader);
    }
    let mut store = ParamStore::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let bad = |msg: &str| CheckpointError::BadLine(lineno + 2, msg.to_string());
        let name = parts.next().ok_or_else(|| bad("missing name"))?;
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing ndim"))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("missing dim"))?,
            );
        }
        let hex = parts.next().ok_or_else(|| bad("missing values"))?;
        let count: usize = shape.iter().product();
        if hex.len() != count * 16 {
            return Err(bad(&format!(
                "expected {} hex chars, got {}",
                count * 16,
                hex.len()
            )));
        }
        let mut value = Vec::with_capacity(count);
        for chunk in hex.as_bytes().chunks(16) {
            let mut bytes = [0u8; 8];
            for (i, b) in bytes.iter_mut().enumerate() {
                let s = std::str::from_utf8(&chunk[i * 2..i * 2 + 2]).unwrap();
                *b = u8::from_str_radix(s, 16).map_err(|_| bad("bad hex"))?;
            }
            value.push(f64::from_le_bytes(bytes));
        }
        store.register(name, &shape, value);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &std::path::Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<ParamStore, CheckpointError> {
    decode(&std::fs::read_to_string(path)?)
}

impl ParamStore {
    pub fn to_checkpoint_text(&self) -> String {
        encode(self)
    }
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
