// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StidError};

/// Answer words every toy vocabulary starts with, in readout order.
pub const ANSWER_WORDS: [&str; 10] = [
    "left", "right", "above", "below", "before", "after", "near", "far", "yes", "no",
];

pub const DEFAULT_OBJECTS: [&str; 10] = [
    "dog", "cup", "chair", "lamp", "plant", "bottle", "clock", "book", "shoe", "vase",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalBasis {
    /// Coordinates on orthogonal axes: row, column, frame, radial distance.
    Orthogonal,
    /// Sinusoidal features per axis, concatenated.
    Rope,
}

/// Toy model hyperparameters. Serializable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Grid side.
    pub m: usize,
    /// Model width.
    pub d: usize,
    /// Heads per block.
    pub heads: usize,
    pub n_layers: usize,
    /// Positional-basis width.
    pub d_psi: usize,
    /// Frames; 1 for still images.
    pub frames: usize,
    pub objects: Vec<String>,
    /// Optional multi-token spellings, e.g. `thermometer -> [therm, ometer]`.
    pub subwords: BTreeMap<String, Vec<String>>,
    pub seed: u64,
    /// Readout softmax temperature.
    pub temperature: f64,
    pub basis: PositionalBasis,
    /// Pre-softmax score gap between the true patch and unrelated tokens.
    pub peak_sharpness: f64,
    /// Score of the text-token attention sink for word queries.
    pub sink_sharpness: f64,
    /// Patch noise norm as a fraction of the content norm.
    pub noise_scale: f64,
    /// Std of per-scene Gaussian corruption added to each patch's positional
    /// features. Zero for a healthy encoder.
    pub pos_noise: f64,
    /// Output scale of heads that carry no engineered circuit.
    pub quiet_scale: f64,
    /// Gain of the positional-to-ID map `M`.
    pub id_gain: f64,
    /// Norm of the spatial unembedding rows.
    pub readout_gain: f64,
    /// Weight of the radial-distance positional feature.
    pub radial_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            m: 4,
            d: 64,
            heads: 4,
            n_layers: 4,
            d_psi: 3,
            frames: 1,
            objects: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
            subwords: BTreeMap::new(),
            seed: 0,
            temperature: 1.0,
            basis: PositionalBasis::Orthogonal,
            peak_sharpness: 40.0,
            sink_sharpness: 20.0,
            noise_scale: 0.01,
            pos_noise: 0.0,
            quiet_scale: 0.02,
            id_gain: 1.0,
            readout_gain: 1.5,
            radial_scale: 0.5,
        }
    }
}

/// Named positional axes in feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosAxis {
    Row,
    Column,
    Frame,
    Radial,
}

impl ToyConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn vocab(&self) -> Vec<String> {
        ANSWER_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(self.objects.iter().cloned())
            .collect()
    }

    pub fn cells_per_frame(&self) -> usize {
        self.m * self.m
    }

    pub fn num_patches(&self) -> usize {
        self.frames * self.cells_per_frame()
    }

    /// Axes carried by the positional basis, in feature order.
    pub fn axes(&self) -> Vec<PosAxis> {
        let mut axes = vec![PosAxis::Row, PosAxis::Column];
        if self.frames > 1 {
            axes.push(PosAxis::Frame);
        }
        if self.basis == PositionalBasis::Orthogonal && axes.len() < self.d_psi {
            axes.push(PosAxis::Radial);
        }
        axes
    }

    /// Index of `axis` in the orthogonal feature layout.
    pub fn axis_feature(&self, axis: PosAxis) -> Option<usize> {
        match self.basis {
            PositionalBasis::Orthogonal => self.axes().iter().position(|&a| a == axis),
            PositionalBasis::Rope => None,
        }
    }

    /// 1-based index of the block that writes IDs into object words.
    pub fn integration_block(&self) -> usize {
        if self.n_layers >= 3 {
            self.n_layers / 2
        } else {
            1
        }
    }

    /// Block that reads object-word IDs into the answer token, if any.
    pub fn reasoning_block(&self) -> Option<usize> {
        let r = self.integration_block() + 1;
        (r <= self.n_layers).then_some(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(StidError::Config(msg));
        if self.m < 2 {
            return bad(format!("grid side m={} must be >= 2", self.m));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads={} must divide d={}", self.heads, self.d));
        }
        if self.d_psi > self.d {
            return bad(format!("d_psi={} exceeds d={}", self.d_psi, self.d));
        }
        if self.n_layers == 0 || self.frames == 0 {
            return bad("n_layers and frames must be positive".into());
        }
        if self.objects.is_empty() {
            return bad("at least one object name required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.objects {
            if ANSWER_WORDS.contains(&o.as_str()) || !seen.insert(o) {
                return bad(format!("object name `{o}` duplicates a vocabulary word"));
            }
        }
        match self.basis {
            PositionalBasis::Orthogonal => {
                let needed = if self.frames > 1 { 3 } else { 2 };
                if self.d_psi < needed {
                    return bad(format!("orthogonal basis needs d_psi >= {needed}"));
                }
            }
            PositionalBasis::Rope => {
                let n_axes = if self.frames > 1 { 3 } else { 2 };
                if !self.d_psi.is_multiple_of(n_axes) || !(self.d_psi / n_axes).is_multiple_of(2) {
                    return bad(format!(
                        "rope basis needs d_psi divisible into {n_axes} even blocks, got {}",
                        self.d_psi
                    ));
                }
            }
        }
        let n_obj = self.objects.len();
        let dh = self.head_dim();
        if n_obj + 1 > dh || self.d_psi + 1 > dh {
            return bad(format!(
                "head width {dh} too small for {n_obj} objects and d_psi={}",
                self.d_psi
            ));
        }
        // pos_in, id_out, content(objects, background, foreground), fg_out,
        // four role directions, one word direction per object.
        let reserved = 2 * self.d_psi + (n_obj + 2) + 1 + 4 + n_obj;
        if reserved > self.d {
            return bad(format!("d={} too small, need at least {reserved}", self.d));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if self.noise_scale < 0.0 || self.pos_noise < 0.0 {
            return bad("noise scales must be non-negative".into());
        }
        for (obj, pieces) in &self.subwords {
            if !self.objects.contains(obj) || pieces.is_empty() {
                return bad(format!("subword spelling for unknown object `{obj}`"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips_json() {
        let c = ToyConfig::default();
        c.validate().unwrap();
        let back: ToyConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.integration_block(), 2);
        assert_eq!(c.reasoning_block(), Some(3));
        assert_eq!(c.axes(), vec![PosAxis::Row, PosAxis::Column, PosAxis::Radial]);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut c = ToyConfig {
            d_psi: 80,
            ..ToyConfig::default()
        };
        assert!(c.validate().is_err());
        c.d_psi = 3;
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.m = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn video_axes_use_frame_feature() {
        let c = ToyConfig {
            frames: 8,
            ..ToyConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.axes(), vec![PosAxis::Row, PosAxis::Column, PosAxis::Frame]);
    }
}
