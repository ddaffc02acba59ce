// SPDX-License-Identifier: Apache-2.0

//! Signed maps as PFM plus an 8-bit diverging preview and a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{encode_netpbm, encode_pfm};
use crate::error::{Error, Result};
use crate::tensor::{image_dims, Tensor};

/// Normalization constants needed to read true values off a preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub max_abs: f64,
    pub min: f64,
    pub max: f64,
}

impl Sidecar {
    pub fn of(t: &Tensor) -> Self {
        let d = t.data();
        Self {
            shape: t.shape().to_vec(),
            max_abs: t.max_abs(),
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sidecar serializes");
        s.push('\n');
        s
    }
}

/// `round(127.5 + 127.5·v/max|v|)`, or 128 everywhere for an all-zero map.
pub fn preview_samples(t: &Tensor) -> Vec<u8> {
    let m = t.max_abs();
    t.data()
        .iter()
        .map(|&v| {
            if m == 0.0 {
                128
            } else {
                (127.5 + 127.5 * (v / m)).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// PGM of the preview; channels are stacked vertically.
pub fn preview_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(t.shape())?;
    encode_netpbm(w, c * h, 1, &preview_samples(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedMap {
    pub pfm: PathBuf,
    pub preview: PathBuf,
    pub sidecar: PathBuf,
    pub max_abs: f64,
}

/// Writes `stem.pfm`, `stem.pgm` and `stem.json`.
pub fn export_signed_map(t: &Tensor, stem: &Path) -> Result<ExportedMap> {
    if !t.is_finite() {
        return Err(Error::Contract(format!("map for {} is not finite", stem.display())));
    }
    let with = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(".");
        p.push(ext);
        PathBuf::from(p)
    };
    let out = ExportedMap {
        pfm: with("pfm"),
        preview: with("pgm"),
        sidecar: with("json"),
        max_abs: t.max_abs(),
    };
    fs::write(&out.pfm, encode_pfm(t)?)?;
    fs::write(&out.preview, preview_pgm(t)?)?;
    fs::write(&out.sidecar, Sidecar::of(t).to_json())?;
    Ok(out)
}
