//! Token bundle: line-delimited JSON.
//!
//! Line 1 is a `header` record; then one `embedding` record per token;
//! then one `log` record per optimization step. Floats are written with
//! round-trip precision and no timestamps are stored, so equal runs give
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, InversionConfig, InversionError, InversionOutput, Method, StepRecord, TokenSet, TrainingLog};
use crate::router::Activity;

pub const BUNDLE_FORMAT: &str = "matte-token-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub backend: String,
    pub dim: usize,
    pub config: InversionConfig,
    pub ground_truth: Option<GroundTruth>,
    pub schedule: BTreeMap<String, Activity>,
    pub reference_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BundleLine {
    Header(Box<BundleHeader>),
    Embedding { token: String, values: Vec<f64> },
    Log(StepRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    pub header: BundleHeader,
    pub embeddings: BTreeMap<String, Array1<f64>>,
    pub log: TrainingLog,
}

impl TokenBundle {
    pub fn from_output(out: &InversionOutput, backend: &str) -> Self {
        let dim = out.tokens.values.values().next().map_or(0, |v| v.len());
        Self {
            header: BundleHeader {
                format: BUNDLE_FORMAT.into(),
                version: BUNDLE_VERSION,
                method: out.tokens.method,
                backend: backend.into(),
                dim,
                config: out.config.clone(),
                ground_truth: out.ground_truth.clone(),
                schedule: out.tokens.activity.clone(),
                reference_sha256: out.reference_sha256.clone(),
            },
            embeddings: out.tokens.values.clone(),
            log: out.log.clone(),
        }
    }

    pub fn tokens(&self) -> TokenSet {
        TokenSet {
            method: self.header.method,
            values: self.embeddings.clone(),
            activity: self.header.schedule.clone(),
        }
    }
}

pub fn write_bundle(bundle: &TokenBundle, mut w: impl Write) -> Result<(), InversionError> {
    let io = |e: std::io::Error| InversionError::Bundle(e.to_string());
    let mut line = |rec: &BundleLine| -> Result<(), InversionError> {
        let s = serde_json::to_string(rec).map_err(|e| InversionError::Bundle(e.to_string()))?;
        writeln!(w, "{s}").map_err(io)
    };
    line(&BundleLine::Header(Box::new(bundle.header.clone())))?;
    for (token, v) in &bundle.embeddings {
        line(&BundleLine::Embedding {
            token: token.clone(),
            values: v.to_vec(),
        })?;
    }
    for rec in &bundle.log.records {
        line(&BundleLine::Log(rec.clone()))?;
    }
    Ok(())
}

pub fn read_bundle(r: impl BufRead) -> Result<TokenBundle, InversionError> {
    let err = |n: usize, m: String| InversionError::Bundle(format!("line {n}: {m}"));
    let mut header = None;
    let mut embeddings = BTreeMap::new();
    let mut log = TrainingLog::default();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BundleLine = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        match (rec, header.is_some()) {
            (BundleLine::Header(h), false) => {
                if h.format != BUNDLE_FORMAT {
                    return Err(err(n, format!("unknown format `{}`", h.format)));
                }
                if h.version != BUNDLE_VERSION {
                    return Err(err(n, format!("unsupported version {}", h.version)));
                }
                header = Some(*h);
            }
            (BundleLine::Header(_), true) => return Err(err(n, "second header".into())),
            (_, false) => return Err(err(n, "first record must be the header".into())),
            (BundleLine::Embedding { token, values }, true) => {
                let dim = header.as_ref().map_or(0, |h| h.dim);
                if values.len() != dim {
                    return Err(err(n, format!("embedding {token} has {} values, header says {dim}", values.len())));
                }
                embeddings.insert(token, Array1::from(values));
            }
            (BundleLine::Log(rec), true) => log.records.push(rec),
        }
    }
    let header = header.ok_or_else(|| InversionError::Bundle("empty bundle".into()))?;
    for tok in header.schedule.keys() {
        if !embeddings.contains_key(tok) {
            return Err(InversionError::Bundle(format!("no embedding for scheduled token {tok}")));
        }
    }
    Ok(TokenBundle {
        header,
        embeddings,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};
    use crate::inversion::invert;

    #[test]
    fn round_trips_exactly() {
        let mut b = ToyBackend::new(ToyConfig::default());
        let img = image::RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30]));
        let cfg = InversionConfig {
            steps: 5,
            ..Default::default()
        };
        let out = invert(&mut b, &img, "cube", &cfg).unwrap();
        let bundle = TokenBundle::from_output(&out, "toy");
        let mut buf = Vec::new();
        write_bundle(&bundle, &mut buf).unwrap();
        let back = read_bundle(buf.as_slice()).unwrap();
        assert_eq!(back, bundle);
        let mut buf2 = Vec::new();
        write_bundle(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 1 + 4 + 5);
    }

    #[test]
    fn rejects_headerless_input() {
        let line = r#"{"kind":"embedding","token":"<c>","values":[1.0]}"#;
        assert!(read_bundle(line.as_bytes()).is_err());
        assert!(read_bundle("".as_bytes()).is_err());
    }
}
