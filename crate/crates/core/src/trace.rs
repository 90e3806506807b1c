// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation traces: the in-memory model and the on-disk dump format.
//!
//! A dump is a directory holding `manifest.json` plus one raw tensor file per
//! layer. Tensor files are little-endian `f32`, row-major `[seq, dim]`.
//! Layer 0 holds the embeddings; layer `L` holds the residual stream after
//! block `L`. Intervention requests (`intervention.json`) and readout
//! responses are the other two files exchanged with external extractors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StidError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

// ---------------------------------------------------------------------------
// Token roles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    ImagePatch,
    Text,
    ObjectWord,
    SpatialWord,
    AnswerCandidate,
    Other,
}

impl RoleKind {
    pub fn is_text(self) -> bool {
        matches!(
            self,
            RoleKind::Text | RoleKind::ObjectWord | RoleKind::SpatialWord | RoleKind::AnswerCandidate
        )
    }
}

/// Role metadata for one sequence position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRole {
    pub text: String,
    pub kind: RoleKind,
    /// `(row i, column j)` on the patch grid.
    pub cell: Option<(usize, usize)>,
    /// Frame index for video patches.
    pub frame: Option<usize>,
    pub object_name: Option<String>,
    /// Last subword of a (possibly multi-token) word.
    pub subword_last: bool,
}

impl TokenRole {
    pub fn text(text: impl Into<String>, kind: RoleKind) -> Self {
        TokenRole {
            text: text.into(),
            kind,
            cell: None,
            frame: None,
            object_name: None,
            subword_last: true,
        }
    }

    pub fn patch(cell: (usize, usize), frame: Option<usize>) -> Self {
        TokenRole {
            text: "<patch>".into(),
            kind: RoleKind::ImagePatch,
            cell: Some(cell),
            frame,
            object_name: None,
            subword_last: true,
        }
    }

    pub fn object(text: impl Into<String>, object: impl Into<String>, last: bool) -> Self {
        TokenRole {
            text: text.into(),
            kind: RoleKind::ObjectWord,
            cell: None,
            frame: None,
            object_name: Some(object.into()),
            subword_last: last,
        }
    }
}

// ---------------------------------------------------------------------------
// Readouts and labels
// ---------------------------------------------------------------------------

/// Natural-log probabilities per answer string.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BeliefReadout {
    pub candidates: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<BTreeMap<String, f64>>,
}

impl BeliefReadout {
    pub fn logprob(&self, word: &str) -> Result<f64> {
        self.candidates
            .get(word)
            .copied()
            .ok_or_else(|| StidError::InvalidArgument(format!("readout has no candidate `{word}`")))
    }

    /// `log P(a) - log P(b)`.
    pub fn gap(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.logprob(a)? - self.logprob(b)?)
    }

    /// Probability of `word` renormalized over `set` only.
    pub fn prob_within(&self, word: &str, set: &[&str]) -> Result<f64> {
        let lps = set
            .iter()
            .map(|w| self.logprob(w))
            .collect::<Result<Vec<_>>>()?;
        let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = lps.iter().map(|lp| (lp - max).exp()).sum();
        Ok((self.logprob(word)? - max).exp() / denom)
    }

    pub fn validate(&self) -> Result<()> {
        for (word, &lp) in &self.candidates {
            if lp.is_nan() || lp > 0.0 {
                return Err(StidError::validation(
                    format!("readout.{word}"),
                    format!("log-probability must be <= 0, got {lp}"),
                ));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &BeliefReadout) -> bool {
        self.candidates.len() == other.candidates.len()
            && self
                .candidates
                .iter()
                .zip(&other.candidates)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub name: String,
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub objects: Vec<ObjectLabel>,
    pub gt_answer: String,
}

impl Labels {
    pub fn object(&self, name: &str) -> Option<&ObjectLabel> {
        self.objects.iter().find(|o| o.name == name)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// One layer of residual activations, row-major `[seq, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    seq: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LayerActivations {
    pub fn new(seq: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != seq * dim {
            return Err(StidError::shape("layer activations", seq * dim, data.len()));
        }
        Ok(LayerActivations { seq, dim, data })
    }

    pub fn zeros(seq: usize, dim: usize) -> Self {
        LayerActivations {
            seq,
            dim,
            data: vec![0.0; seq * dim],
        }
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.data[q * self.dim..(q + 1) * self.dim]
    }

    pub fn row_mut(&mut self, q: usize) -> &mut [f32] {
        &mut self.data[q * self.dim..(q + 1) * self.dim]
    }

    pub fn row_f64(&self, q: usize) -> Vec<f64> {
        crate::vector::to_f64(self.row(q))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn bit_eq(&self, other: &LayerActivations) -> bool {
        self.seq == other.seq
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(seq: usize, dim: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != seq * dim * 4 {
            return Err(StidError::shape("layer file bytes", seq * dim * 4, bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(LayerActivations { seq, dim, data })
    }
}

/// Layerwise token activations of one run plus roles and readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub model_id: String,
    /// `L_max`: number of blocks. There are `num_layers + 1` stored layers.
    pub num_layers: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub layers: Vec<LayerActivations>,
    pub roles: Vec<TokenRole>,
    pub readout: BeliefReadout,
    pub labels: Option<Labels>,
}

impl ActivationTrace {
    pub fn layer(&self, l: usize) -> Result<&LayerActivations> {
        self.layers.get(l).ok_or_else(|| {
            StidError::InvalidArgument(format!("layer {l} out of range 0..={}", self.num_layers))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.num_layers + 1 {
            return Err(StidError::shape("layer count", self.num_layers + 1, self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.seq != self.seq_len {
                return Err(StidError::shape(format!("layer {l} seq"), self.seq_len, layer.seq));
            }
            if layer.dim != self.dim {
                return Err(StidError::shape(format!("layer {l} dim"), self.dim, layer.dim));
            }
            if !layer.is_finite() {
                return Err(StidError::validation(
                    format!("activations[{l}]"),
                    "non-finite activation",
                ));
            }
        }
        if self.roles.len() != self.seq_len {
            return Err(StidError::shape("token roles", self.seq_len, self.roles.len()));
        }
        validate_roles(&self.roles)?;
        self.readout.validate()
    }

    /// Index of the representative (last-subword) token of `object`.
    pub fn object_index(&self, object: &str) -> Result<usize> {
        self.roles
            .iter()
            .position(|r| {
                r.kind == RoleKind::ObjectWord
                    && r.subword_last
                    && r.object_name.as_deref() == Some(object)
            })
            .ok_or_else(|| {
                StidError::InvalidArgument(format!("trace has no object word for `{object}`"))
            })
    }

    /// Activation of the object's word token at layer `l`.
    pub fn object_activation(&self, object: &str, l: usize) -> Result<Vec<f64>> {
        let q = self.object_index(object)?;
        Ok(self.layer(l)?.row_f64(q))
    }
}

fn validate_roles(roles: &[TokenRole]) -> Result<()> {
    for (index, r) in roles.iter().enumerate() {
        match r.kind {
            RoleKind::ImagePatch => {
                if r.cell.is_none() && r.frame.is_none() {
                    return Err(StidError::Role {
                        index,
                        msg: "image_patch without grid_coord".into(),
                    });
                }
            }
            kind if kind.is_text()
                && (r.cell.is_some() || r.frame.is_some()) => {
                    return Err(StidError::Role {
                        index,
                        msg: "text token carries a grid_coord".into(),
                    });
                }
            _ => {}
        }
        if r.kind == RoleKind::ObjectWord && r.object_name.is_none() {
            return Err(StidError::Role {
                index,
                msg: "object_word without object_name".into(),
            });
        }
    }
    // Runs of consecutive object_word tokens naming the same object form one
    // word; exactly one token of the run, its last, is marked subword_last.
    let mut i = 0;
    while i < roles.len() {
        if roles[i].kind != RoleKind::ObjectWord {
            i += 1;
            continue;
        }
        let name = roles[i].object_name.clone();
        let mut end = i;
        while end < roles.len()
            && roles[end].kind == RoleKind::ObjectWord
            && roles[end].object_name == name
        {
            end += 1;
            if roles[end - 1].subword_last {
                break;
            }
        }
        let marked = roles[i..end].iter().filter(|r| r.subword_last).count();
        if marked != 1 || !roles[end - 1].subword_last {
            return Err(StidError::Role {
                index: end - 1,
                msg: "multi-token object word must end with exactly one subword_last token".into(),
            });
        }
        i = end;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Index selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selector {
    AllText,
    AllImage,
    All,
    ObjectWords,
    SpatialWords,
    NonObjectWords { seed: u64 },
    Explicit { indices: Vec<usize> },
}

impl Selector {
    pub fn name(&self) -> String {
        match self {
            Selector::AllText => "all_text".into(),
            Selector::AllImage => "all_image".into(),
            Selector::All => "all".into(),
            Selector::ObjectWords => "object_words".into(),
            Selector::SpatialWords => "spatial_words".into(),
            Selector::NonObjectWords { .. } => "non_object_words".into(),
            Selector::Explicit { .. } => "explicit".into(),
        }
    }

    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "all_text" => Ok(Selector::AllText),
            "all_image" => Ok(Selector::AllImage),
            "all" => Ok(Selector::All),
            "object_words" => Ok(Selector::ObjectWords),
            "spatial_words" => Ok(Selector::SpatialWords),
            "non_object_words" => Ok(Selector::NonObjectWords { seed }),
            other => Err(StidError::InvalidArgument(format!("unknown selector `{other}`"))),
        }
    }
}

/// Resolve a selector to sorted sequence indices. Never returns an empty list.
pub fn select_indices(trace: &ActivationTrace, selector: &Selector) -> Result<Vec<usize>> {
    select_from_roles(&trace.roles, selector)
}

pub fn select_from_roles(roles: &[TokenRole], selector: &Selector) -> Result<Vec<usize>> {
    let pick = |f: &dyn Fn(&TokenRole) -> bool| -> Vec<usize> {
        roles
            .iter()
            .enumerate()
            .filter(|(_, r)| f(r))
            .map(|(i, _)| i)
            .collect()
    };
    let out = match selector {
        Selector::AllText => pick(&|r| r.kind.is_text()),
        Selector::AllImage => pick(&|r| r.kind == RoleKind::ImagePatch),
        Selector::All => (0..roles.len()).collect(),
        Selector::ObjectWords => pick(&|r| r.kind == RoleKind::ObjectWord && r.subword_last),
        Selector::SpatialWords => pick(&|r| r.kind == RoleKind::SpatialWord && r.subword_last),
        Selector::NonObjectWords { seed } => {
            let k = pick(&|r| r.kind == RoleKind::ObjectWord && r.subword_last).len();
            let pool = pick(&|r| r.kind.is_text() && r.kind != RoleKind::ObjectWord);
            let k = k.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut chosen: Vec<usize> = sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            chosen.sort_unstable();
            chosen
        }
        Selector::Explicit { indices } => {
            if let Some(&bad) = indices.iter().find(|&&q| q >= roles.len()) {
                return Err(StidError::InvalidArgument(format!(
                    "index {bad} out of range for seq_len {}",
                    roles.len()
                )));
            }
            let mut v = indices.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    if out.is_empty() {
        return Err(StidError::EmptySelection(format!(
            "selector `{}` matched no tokens",
            selector.name()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenEntry {
    text: String,
    role: RoleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_i: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object_name: Option<String>,
    subword_last: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_id: String,
    num_layers: usize,
    seq_len: usize,
    dim: usize,
    tokens: Vec<TokenEntry>,
    readout: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    readout_logits: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
    layer_files: Vec<String>,
}

fn role_to_entry(r: &TokenRole) -> TokenEntry {
    TokenEntry {
        text: r.text.clone(),
        role: r.kind,
        grid_i: r.cell.map(|c| c.0),
        grid_j: r.cell.map(|c| c.1),
        frame: r.frame,
        object_name: r.object_name.clone(),
        subword_last: r.subword_last,
    }
}

fn entry_to_role(index: usize, e: &TokenEntry) -> Result<TokenRole> {
    let cell = match (e.grid_i, e.grid_j) {
        (Some(i), Some(j)) => Some((i, j)),
        (None, None) => None,
        _ => {
            return Err(StidError::Role {
                index,
                msg: "grid_i and grid_j must be given together".into(),
            })
        }
    };
    Ok(TokenRole {
        text: e.text.clone(),
        kind: e.role,
        cell,
        frame: e.frame,
        object_name: e.object_name.clone(),
        subword_last: e.subword_last,
    })
}

pub fn layer_file_name(l: usize) -> String {
    format!("layer_{l:03}.f32")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| StidError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| StidError::io(path, e))
}

/// Write `manifest.json` and one tensor file per layer into `dir`.
pub fn save_trace(trace: &ActivationTrace, dir: &Path) -> Result<()> {
    trace.validate()?;
    fs::create_dir_all(dir).map_err(|e| StidError::io(dir, e))?;
    let layer_files: Vec<String> = (0..trace.layers.len()).map(layer_file_name).collect();
    for (layer, name) in trace.layers.iter().zip(&layer_files) {
        write_file(&dir.join(name), &layer.to_le_bytes())?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_id: trace.model_id.clone(),
        num_layers: trace.num_layers,
        seq_len: trace.seq_len,
        dim: trace.dim,
        tokens: trace.roles.iter().map(role_to_entry).collect(),
        readout: trace.readout.candidates.clone(),
        readout_logits: trace.readout.logits.clone(),
        labels: trace.labels.clone(),
        layer_files,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), &json)
}

/// Load and validate a dump written by [`save_trace`] or an external extractor.
pub fn load_trace(dir: &Path) -> Result<ActivationTrace> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| StidError::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StidError::Schema(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.layer_files.len() != manifest.num_layers + 1 {
        return Err(StidError::shape(
            "layer_files",
            manifest.num_layers + 1,
            manifest.layer_files.len(),
        ));
    }
    if manifest.tokens.len() != manifest.seq_len {
        return Err(StidError::shape("tokens", manifest.seq_len, manifest.tokens.len()));
    }
    let roles = manifest
        .tokens
        .iter()
        .enumerate()
        .map(|(i, e)| entry_to_role(i, e))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(manifest.layer_files.len());
    for name in &manifest.layer_files {
        let path = dir.join(name);
        let raw = read_file(&path)?;
        let layer = LayerActivations::from_le_bytes(manifest.seq_len, manifest.dim, &raw)
            .map_err(|_| {
                StidError::shape(
                    format!("layer file {}", path.display()),
                    manifest.seq_len * manifest.dim * 4,
                    raw.len(),
                )
            })?;
        layers.push(layer);
    }
    let trace = ActivationTrace {
        model_id: manifest.model_id,
        num_layers: manifest.num_layers,
        seq_len: manifest.seq_len,
        dim: manifest.dim,
        layers,
        roles,
        readout: BeliefReadout {
            candidates: manifest.readout,
            logits: manifest.readout_logits,
        },
        labels: manifest.labels,
    };
    trace.validate()?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Replace,
    Add,
}

/// One residual edit. Vectors are stored already scaled; `alpha` on the
/// enclosing spec records the scaling used to produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub index: usize,
    pub mode: EditMode,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub edits: Vec<Edit>,
    pub alpha: f64,
    #[serde(default)]
    pub note: String,
}

impl InterventionSpec {
    pub fn validate(&self, num_layers: usize, seq_len: usize, dim: usize) -> Result<()> {
        if self.layer >= num_layers {
            return Err(StidError::validation(
                "layer",
                format!("layer {} not in 0..{num_layers}", self.layer),
            ));
        }
        for (k, e) in self.edits.iter().enumerate() {
            if e.index >= seq_len {
                return Err(StidError::validation(
                    format!("edits[{k}].index"),
                    format!("{} >= seq_len {seq_len}", e.index),
                ));
            }
            if e.vector.len() != dim {
                return Err(StidError::validation(
                    format!("edits[{k}].vector"),
                    format!("length {} != dim {dim}", e.vector.len()),
                ));
            }
            if e.vector.iter().any(|x| !x.is_finite()) {
                return Err(StidError::validation(
                    format!("edits[{k}].vector"),
                    "non-finite value",
                ));
            }
        }
        Ok(())
    }

    /// Apply the edits in order to a copy of the layer activations.
    pub fn apply(&self, layer: &LayerActivations) -> Result<LayerActivations> {
        let mut out = layer.clone();
        for e in &self.edits {
            if e.index >= out.seq() || e.vector.len() != out.dim() {
                return Err(StidError::validation("edits", "edit does not fit the layer"));
            }
            let row = out.row_mut(e.index);
            match e.mode {
                EditMode::Replace => row.copy_from_slice(&e.vector),
                EditMode::Add => {
                    for (x, v) in row.iter_mut().zip(&e.vector) {
                        *x += v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `intervention.json`: a spec plus the trace it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub trace: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(flatten)]
    pub spec: InterventionSpec,
}

pub fn write_intervention_request(req: &InterventionRequest, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(req)?;
    write_file(path, &json)
}

pub fn read_intervention_request(path: &Path) -> Result<InterventionRequest> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| StidError::Schema(format!("{}: {e}", path.display())))
}

pub fn write_readout(readout: &BeliefReadout, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(readout)?;
    write_file(path, &json)
}

pub fn read_readout(path: &Path) -> Result<BeliefReadout> {
    let bytes = read_file(path)?;
    let readout: BeliefReadout = serde_json::from_slice(&bytes)
        .map_err(|e| StidError::Schema(format!("{}: {e}", path.display())))?;
    readout.validate()?;
    Ok(readout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> ActivationTrace {
        let (seq, dim, l_max) = (3, 4, 2);
        let layers = (0..=l_max)
            .map(|l| {
                let data = (0..seq * dim).map(|k| (l * 100 + k) as f32 * 0.25).collect();
                LayerActivations::new(seq, dim, data).unwrap()
            })
            .collect();
        let roles = vec![
            TokenRole::patch((0, 0), None),
            TokenRole::object("dog", "dog", true),
            TokenRole::text("?", RoleKind::Text),
        ];
        let mut candidates = BTreeMap::new();
        candidates.insert("left".to_string(), -0.25);
        candidates.insert("right".to_string(), -1.5);
        ActivationTrace {
            model_id: "tiny".into(),
            num_layers: l_max,
            seq_len: seq,
            dim,
            layers,
            roles,
            readout: BeliefReadout {
                candidates,
                logits: None,
            },
            labels: None,
        }
    }

    #[test]
    fn save_writes_one_file_per_layer_of_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let trace = tiny_trace();
        save_trace(&trace, dir.path()).unwrap();
        for l in 0..=2 {
            let len = fs::metadata(dir.path().join(layer_file_name(l))).unwrap().len();
            assert_eq!(len, 48);
        }
        assert!(dir.path().join(MANIFEST_FILE).exists());
        let back = load_trace(dir.path()).unwrap();
        assert_eq!(back, trace);
        assert!(back.layers.iter().zip(&trace.layers).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn nan_activation_is_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = tiny_trace();
        trace.layers[1].row_mut(0)[2] = f32::NAN;
        let err = save_trace(&trace, dir.path()).unwrap_err();
        assert_eq!(err.code(), "validation");
        assert!(err.to_string().contains("non-finite activation"));
    }

    #[test]
    fn wrong_layer_length_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_trace(&tiny_trace(), dir.path()).unwrap();
        fs::write(dir.path().join(layer_file_name(1)), [0u8; 44]).unwrap();
        assert_eq!(load_trace(dir.path()).unwrap_err().code(), "shape_mismatch");
    }

    #[test]
    fn patch_without_coord_is_a_role_error() {
        let dir = tempfile::tempdir().unwrap();
        save_trace(&tiny_trace(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        let tok = v["tokens"][0].as_object_mut().unwrap();
        tok.remove("grid_i");
        tok.remove("grid_j");
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(load_trace(dir.path()).unwrap_err().code(), "role");
    }

    #[test]
    fn missing_manifest_and_bad_schema_have_distinct_codes() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_trace(dir.path()).unwrap_err().code(), "missing_file");
        fs::write(dir.path().join(MANIFEST_FILE), b"{\"format_version\": 1}").unwrap();
        assert_eq!(load_trace(dir.path()).unwrap_err().code(), "schema");
    }

    #[test]
    fn multi_subword_object_selects_final_piece() {
        let roles = vec![
            TokenRole::text("Is", RoleKind::Text),
            TokenRole::object("therm", "thermometer", false),
            TokenRole::object("ometer", "thermometer", true),
            TokenRole::text("?", RoleKind::Text),
        ];
        validate_roles(&roles).unwrap();
        assert_eq!(select_from_roles(&roles, &Selector::ObjectWords).unwrap(), vec![2]);

        let mut bad = roles.clone();
        bad[1].subword_last = true;
        bad[2].subword_last = false;
        assert!(validate_roles(&bad).is_err());
    }

    #[test]
    fn empty_selection_is_an_error() {
        let trace = tiny_trace();
        let err = select_indices(&trace, &Selector::SpatialWords).unwrap_err();
        assert_eq!(err.code(), "empty_selection");
        assert_eq!(select_indices(&trace, &Selector::ObjectWords).unwrap(), vec![1]);
        assert_eq!(select_indices(&trace, &Selector::AllImage).unwrap(), vec![0]);
    }

    #[test]
    fn intervention_spec_validation_and_apply() {
        let trace = tiny_trace();
        let spec = InterventionSpec {
            layer: 1,
            edits: vec![
                Edit {
                    index: 1,
                    mode: EditMode::Add,
                    vector: vec![1.0; 4],
                },
                Edit {
                    index: 2,
                    mode: EditMode::Replace,
                    vector: vec![0.5; 4],
                },
            ],
            alpha: 5.0,
            note: String::new(),
        };
        spec.validate(2, 3, 4).unwrap();
        let out = spec.apply(&trace.layers[1]).unwrap();
        assert_eq!(out.row(0), trace.layers[1].row(0));
        assert_eq!(out.row(2), &[0.5; 4]);
        assert_eq!(out.row(1)[0], trace.layers[1].row(1)[0] + 1.0);

        let mut bad = spec.clone();
        bad.layer = 2;
        assert!(bad.validate(2, 3, 4).is_err());
    }

    #[test]
    fn readout_probabilities_within_candidate_set() {
        let r = tiny_trace().readout;
        let p = r.prob_within("left", &["left", "right"]).unwrap();
        let expected = 1.0 / (1.0 + (-1.25f64).exp());
        assert!((p - expected).abs() < 1e-12);
        assert!((r.gap("left", "right").unwrap() - 1.25).abs() < 1e-12);
    }
}
