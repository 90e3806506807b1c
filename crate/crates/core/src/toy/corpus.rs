// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scene collections used for extraction and intervention sweeps.

use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::{render_scene, QueryKind, RenderedScene, SceneSpec};
use super::weights::ToyWeights;
use crate::error::{Result, StidError};
use crate::trace::{ActivationTrace, LayerActivations};
use crate::vector;

impl ToyWeights {
    /// Render and run a scene, capturing every layer.
    pub fn trace(&self, spec: &SceneSpec) -> Result<ActivationTrace> {
        let scene = render_scene(spec, self)?;
        Ok(self.forward(&scene, true)?.0)
    }

    /// Run an already rendered (possibly edited) scene.
    pub fn trace_rendered(&self, scene: &RenderedScene) -> Result<ActivationTrace> {
        Ok(self.forward(scene, true)?.0)
    }
}

/// Presence scenes placing `object` on every cell of frame 0, row-major.
pub fn cell_sweep(weights: &ToyWeights, object: &str, seed: u64) -> Vec<SceneSpec> {
    let m = weights.config.m;
    (0..m * m)
        .map(|k| SceneSpec::presence(object, (k / m, k % m), 0, seed.wrapping_add(k as u64)))
        .collect()
}

/// Presence scenes placing `object` at `cell` in each frame.
pub fn frame_sweep(weights: &ToyWeights, object: &str, cell: (usize, usize), seed: u64) -> Vec<SceneSpec> {
    (0..weights.config.frames)
        .map(|t| SceneSpec::presence(object, cell, t, seed.wrapping_add(t as u64)))
        .collect()
}

/// Traces for a list of scenes, in order, computed in parallel.
pub fn run_all(weights: &ToyWeights, specs: &[SceneSpec]) -> Result<Vec<ActivationTrace>> {
    use rayon::prelude::*;
    specs.par_iter().map(|s| weights.trace(s)).collect()
}

/// A relational scene with two distinct objects whose coordinates differ
/// along the queried axis.
pub fn random_pair<R: Rng>(weights: &ToyWeights, kind: QueryKind, rng: &mut R) -> Result<SceneSpec> {
    let c = &weights.config;
    if c.objects.len() < 2 {
        return Err(StidError::Config("need at least two objects for a pair".into()));
    }
    if kind == QueryKind::TemporalBa && c.frames < 2 {
        return Err(StidError::Config("temporal queries need frames >= 2".into()));
    }
    let mut names: Vec<&String> = c.objects.iter().collect();
    names.shuffle(rng);
    loop {
        let cell = |rng: &mut R| (rng.random_range(0..c.m), rng.random_range(0..c.m));
        let (a, b) = (cell(rng), cell(rng));
        let (ta, tb) = (rng.random_range(0..c.frames), rng.random_range(0..c.frames));
        let spec = SceneSpec::pair(
            kind,
            (names[0], a, ta),
            (names[1], b, tb),
            rng.random(),
        );
        if (ta, a) != (tb, b) && spec.ground_truth().is_some() {
            return Ok(spec);
        }
    }
}

/// Replace the content of the patch at `(cell, frame)` with background.
/// Cells without a labelled object are left unchanged.
pub fn mask_patch(
    scene: &RenderedScene,
    weights: &ToyWeights,
    cell: (usize, usize),
    frame: usize,
) -> Result<RenderedScene> {
    let c = &weights.config;
    if cell.0 >= c.m || cell.1 >= c.m || frame >= c.frames {
        return Err(StidError::InvalidArgument(format!("cell {cell:?} frame {frame} outside the grid")));
    }
    let mut out = scene.clone();
    let here = scene
        .labels
        .objects
        .iter()
        .find(|o| (o.i, o.j) == cell && o.frame.unwrap_or(0) == frame);
    if let Some(o) = here {
        let q = weights.psi_index(cell, frame);
        let x = scene.embeddings.row_f64(q);
        let swapped = vector::add(&vector::sub(&x, &weights.content[&o.name]), &weights.background);
        let mut data = scene.embeddings.as_slice().to_vec();
        data[q * c.d..(q + 1) * c.d].copy_from_slice(&vector::to_f32(&swapped));
        out.embeddings = LayerActivations::new(scene.embeddings.seq(), c.d, data)?;
    }
    Ok(out)
}

/// Up to `r` distinct frame-0 cells holding no labelled object.
pub fn random_mask_cells<R: Rng>(scene: &RenderedScene, m: usize, r: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut free: Vec<(usize, usize)> = (0..m * m)
        .map(|k| (k / m, k % m))
        .filter(|&(i, j)| !scene.labels.objects.iter().any(|o| (o.i, o.j) == (i, j)))
        .collect();
    free.shuffle(rng);
    free.truncate(r);
    free
}
