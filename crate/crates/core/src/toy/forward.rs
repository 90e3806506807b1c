// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-only forward pass with residual accumulation.
//!
//! The residual stream is rounded to `f32` after every block, so a pass
//! resumed from a stored layer reproduces the full pass bit for bit.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::scene::RenderedScene;
use super::weights::{BlockWeights, HeadWeights, ToyWeights};
use crate::error::{Result, StidError};
use crate::model::Resume;
use crate::trace::{ActivationTrace, BeliefReadout, LayerActivations};

fn to_matrix(x: &LayerActivations) -> DMatrix<f64> {
    DMatrix::from_fn(x.seq(), x.dim(), |r, c| f64::from(x.row(r)[c]))
}

/// Causal softmax attention pattern of one head, `[seq, seq]`.
pub fn attention_pattern(head: &HeadWeights, x: &DMatrix<f64>) -> DMatrix<f64> {
    let q = x * head.w_q.transpose();
    let k = x * head.w_k.transpose();
    let scale = 1.0 / (head.w_q.nrows() as f64).sqrt();
    let mut scores = (q * k.transpose()) * scale;
    let seq = scores.nrows();
    for r in 0..seq {
        let max = (0..=r).map(|c| scores[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..seq {
            let w = if c <= r { (scores[(r, c)] - max).exp() } else { 0.0 };
            scores[(r, c)] = w;
            total += w;
        }
        for c in 0..=r {
            scores[(r, c)] /= total;
        }
    }
    scores
}

/// Attention patterns of every head in a block.
pub fn block_attention(block: &BlockWeights, x: &LayerActivations) -> Vec<DMatrix<f64>> {
    let xm = to_matrix(x);
    block.heads.iter().map(|h| attention_pattern(h, &xm)).collect()
}

/// `x + sum_h (A_h X W_V^T) W_out^T`, rounded to `f32`.
pub fn block_forward(block: &BlockWeights, x: &LayerActivations) -> LayerActivations {
    let xm = to_matrix(x);
    let mut delta = DMatrix::<f64>::zeros(x.seq(), x.dim());
    for head in &block.heads {
        let a = attention_pattern(head, &xm);
        let v = &xm * head.w_v.transpose();
        delta += (a * v) * head.w_out.transpose();
    }
    let data = (0..x.seq())
        .flat_map(|r| {
            let delta = &delta;
            let xm = &xm;
            (0..x.dim()).map(move |c| (xm[(r, c)] + delta[(r, c)]) as f32)
        })
        .collect();
    LayerActivations::new(x.seq(), x.dim(), data).expect("shape preserved")
}

impl ToyWeights {
    /// Log-softmax readout of the last token's residual over the vocabulary.
    pub fn readout(&self, final_layer: &LayerActivations) -> BeliefReadout {
        let z = final_layer.row_f64(final_layer.seq() - 1);
        let logits: Vec<f64> = self
            .unembed
            .iter()
            .map(|(_, w)| crate::vector::dot(w, &z))
            .collect();
        let t = self.config.temperature;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = max + logits.iter().map(|l| (l / t - max).exp()).sum::<f64>().ln();
        let mut candidates = BTreeMap::new();
        let mut raw = BTreeMap::new();
        for ((word, _), l) in self.unembed.iter().zip(&logits) {
            candidates.insert(word.clone(), (l / t - lse).min(0.0));
            raw.insert(word.clone(), *l);
        }
        BeliefReadout {
            candidates,
            logits: Some(raw),
        }
    }

    fn check_shape(&self, x: &LayerActivations) -> Result<()> {
        if x.dim() != self.config.d {
            return Err(StidError::shape("activation width", self.config.d, x.dim()));
        }
        if x.seq() == 0 {
            return Err(StidError::InvalidArgument("empty sequence".into()));
        }
        Ok(())
    }

    /// Run blocks `layer+1 ..= L_max` from a layer snapshot, returning every
    /// produced layer.
    pub fn run_from(&self, layer: usize, x: &LayerActivations) -> Result<Vec<LayerActivations>> {
        self.check_shape(x)?;
        if layer > self.blocks.len() {
            return Err(StidError::InvalidArgument(format!(
                "layer {layer} beyond L_max={}",
                self.blocks.len()
            )));
        }
        let mut out = Vec::with_capacity(self.blocks.len() - layer);
        let mut cur = x.clone();
        for block in &self.blocks[layer..] {
            cur = block_forward(block, &cur);
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Full pass. With `capture` every layer is kept; otherwise the trace
    /// holds only the embeddings and final layer duplicated for shape.
    pub fn forward(&self, scene: &RenderedScene, capture: bool) -> Result<(ActivationTrace, BeliefReadout)> {
        let x0 = &scene.embeddings;
        self.check_shape(x0)?;
        let produced = self.run_from(0, x0)?;
        let readout = self.readout(produced.last().unwrap_or(x0));
        let layers = if capture {
            std::iter::once(x0.clone()).chain(produced).collect()
        } else {
            let last = produced.last().cloned().unwrap_or_else(|| x0.clone());
            let mut v = vec![x0.clone(); self.blocks.len()];
            v.push(last);
            v
        };
        let trace = ActivationTrace {
            model_id: self.model_id(),
            num_layers: self.blocks.len(),
            seq_len: x0.seq(),
            dim: x0.dim(),
            layers,
            roles: scene.roles.clone(),
            readout: readout.clone(),
            labels: Some(scene.labels.clone()),
        };
        Ok((trace, readout))
    }

    /// Resume from block `layer + 1` with (possibly edited) layer activations.
    pub fn forward_from_layer(&self, x: &LayerActivations, layer: usize) -> Result<BeliefReadout> {
        let produced = self.run_from(layer, x)?;
        Ok(self.readout(produced.last().unwrap_or(x)))
    }
}

impl Resume for ToyWeights {
    fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    fn resume(&self, layer: usize, activations: &LayerActivations) -> Result<BeliefReadout> {
        self.forward_from_layer(activations, layer)
    }
}
