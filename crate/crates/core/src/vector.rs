// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense-vector helpers and the base64 little-endian f32 codec used
//! for grids and axes in JSON.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Result, StidError};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn to_f64(a: &[f32]) -> Vec<f64> {
    a.iter().map(|&x| f64::from(x)).collect()
}

pub fn to_f32(a: &[f64]) -> Vec<f32> {
    a.iter().map(|&x| x as f32).collect()
}

/// Arithmetic mean of equally sized vectors.
pub fn mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| StidError::InvalidArgument("mean of zero vectors".into()))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(StidError::shape("vector length", d, v.len()));
        }
        axpy(&mut acc, 1.0, v);
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|x| x / n).collect())
}

pub fn encode_f32_b64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32_b64(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| StidError::Schema(format!("bad base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(StidError::Schema(format!(
            "base64 vector has {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Serde adapter for `Vec<f64>` stored as base64 little-endian f32.
pub mod b64_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode_f32_b64(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_f32_b64(&text).map_err(serde::de::Error::custom)
    }
}

/// Same adapter for `Option<Vec<f64>>`.
pub mod b64_vec_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&super::encode_f32_b64(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let text = Option::<String>::deserialize(d)?;
        text.map(|t| super::decode_f32_b64(&t).map_err(serde::de::Error::custom))
            .transpose()
    }
}
