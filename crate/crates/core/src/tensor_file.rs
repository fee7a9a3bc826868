//! Flat little-endian tensor files with a JSON sidecar.
//!
//! A tensor stored at stem `path/x` occupies `path/x.bin` (raw values) and
//! `path/x.json` (`{shape, dtype, sample_rate?, hop?}`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop: Option<usize>,
}

impl Sidecar {
    pub fn new(shape: Vec<usize>, dtype: Dtype) -> Self {
        Self {
            shape,
            dtype,
            sample_rate: None,
            hop: None,
        }
    }

    pub fn with_audio(mut self, sample_rate: u32, hop: usize) -> Self {
        self.sample_rate = Some(sample_rate);
        self.hop = Some(hop);
        self
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_bytes(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}

fn write_pair(stem: &Path, payload: &[u8], sidecar: &Sidecar) -> Result<()> {
    let bin = with_ext(stem, "bin");
    let json = with_ext(stem, "json");
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_vec_pretty(sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

fn read_pair(stem: &Path, dtype: Dtype) -> Result<(Vec<u8>, Sidecar)> {
    let bin = with_ext(stem, "bin");
    let json = with_ext(stem, "json");
    let meta = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&meta).map_err(|e| Error::Format {
        path: json.clone(),
        msg: e.to_string(),
    })?;
    if sidecar.dtype != dtype {
        return Err(Error::Format {
            path: json,
            msg: format!("expected dtype {dtype:?}, found {:?}", sidecar.dtype),
        });
    }
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = sidecar.shape.iter().product::<usize>() * 8;
    if payload.len() != expected {
        return Err(Error::Format {
            path: bin,
            msg: format!("expected {expected} bytes, found {}", payload.len()),
        });
    }
    Ok((payload, sidecar))
}

pub fn write_tensor(stem: &Path, tensor: &Tensor, sidecar: Option<Sidecar>) -> Result<()> {
    let mut meta = sidecar.unwrap_or_else(|| Sidecar::new(Vec::new(), Dtype::F64));
    meta.shape = tensor.shape().to_vec();
    meta.dtype = Dtype::F64;
    write_pair(stem, &f64_to_bytes(tensor.data()), &meta)
}

pub fn read_tensor(stem: &Path) -> Result<(Tensor, Sidecar)> {
    let (payload, sidecar) = read_pair(stem, Dtype::F64)?;
    let data = f64_from_bytes(&payload).expect("length checked against shape");
    Ok((Tensor::new(sidecar.shape.clone(), data)?, sidecar))
}

pub fn write_indices(stem: &Path, values: &[i64]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(stem, &payload, &Sidecar::new(vec![values.len()], Dtype::I64))
}

pub fn read_indices(stem: &Path) -> Result<Vec<i64>> {
    let (payload, _) = read_pair(stem, Dtype::I64)?;
    Ok(payload
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
