//! Shared output helpers: float formatting, provenance envelope, file writing.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Version stamped into every emitted artifact.
pub const FORMAT_VERSION: u32 = 1;

/// 17 significant digits, `.` decimal separator; parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Wraps a payload with the format version and the resolved configuration that produced it.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, C: Serialize, P: Serialize> {
    pub format_version: u32,
    pub kind: &'a str,
    pub config: &'a C,
    #[serde(flatten)]
    pub payload: P,
}

impl<'a, C: Serialize, P: Serialize> Envelope<'a, C, P> {
    pub fn new(kind: &'a str, config: &'a C, payload: P) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            config,
            payload,
        }
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// CSV preamble: comment lines carrying the format version and the compact config JSON.
pub fn csv_preamble<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    Ok(format!("# format_version={FORMAT_VERSION}\n# config={json}\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
