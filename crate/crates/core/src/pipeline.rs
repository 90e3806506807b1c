// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded end-to-end runs on the toy model.
//!
//! Every stage reads its inputs from and writes its outputs to a bundle
//! directory, so stages can run one at a time or back to back:
//!
//! ```text
//! out/corpus/index.json, out/corpus/traces/<sample_id>/
//! out/grids/   out/axes/   out/swaps/   out/steers/   out/diagnosis/   out/fits/
//! out/summary.json
//! ```
//!
//! Each stage directory also holds a `stage.json` summary that [`report`]
//! gathers into `summary.json`. Outputs depend only on the configuration:
//! parallel work is collected in sample order before any reduction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{self, Alternative, MannWhitney};
use crate::error::{Result, StidError};
use crate::ids::{self, AxisNaming, AxisSet, GridKey, Quality, SpatialIdGrid};
use crate::intervention::{self, InterventionRow, SteerResult, SwapResult, DEFAULT_ALPHA};
use crate::posenc::{self, DesignMatrix, PositionLabel};
use crate::report;
use crate::toy::{self, init_model, QueryKind, SceneSpec, ToyConfig, ToyWeights};
use crate::trace::{self, ActivationTrace, InterventionRequest, Selector};

/// Object set used when a configuration names none.
pub const DEFAULT_EXTRACTION_OBJECTS: [&str; 4] = ["dog", "cup", "chair", "lamp"];

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Objects swept over the grid. Empty means [`DEFAULT_EXTRACTION_OBJECTS`].
    pub objects: Vec<String>,
    /// Independent sweeps per object, each with fresh patch noise.
    pub sizes: usize,
    /// Layers to extract; empty means every stored layer.
    pub layers: Vec<usize>,
    /// Cell holding the object in temporal sweeps.
    pub frame_cell: (usize, usize),
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            objects: Vec::new(),
            sizes: 1,
            layers: Vec::new(),
            frame_cell: (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub alpha: f64,
    /// Token selector for mirror swaps, e.g. `object_words`.
    pub selector: String,
    /// Relational scene pairs generated for swaps, steering and diagnosis.
    pub samples: usize,
    /// Layers to intervene at; empty means every block input `0..L_max`.
    pub layers: Vec<usize>,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            alpha: DEFAULT_ALPHA,
            selector: "object_words".into(),
            samples: 40,
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisConfig {
    /// Random patch masks per sample for masking sensitivity.
    pub random_masks: usize,
    pub bins: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            random_masks: 3,
            bins: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub ranks: Vec<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { ranks: vec![1, 2, 3] }
    }
}

/// Everything a run depends on. Loaded from one JSON file; absent fields take
/// their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for scene sampling and noise steering. Model weights use
    /// `toy.seed`.
    pub seed: u64,
    pub toy: ToyConfig,
    pub extraction: ExtractionConfig,
    pub intervention: InterventionConfig,
    pub diagnosis: DiagnosisConfig,
    pub fit: FitConfig,
    /// Layer used for steering headlines, diagnosis and fits. Defaults to
    /// the toy model's integration layer when it was extracted.
    pub analysis_layer: Option<usize>,
    /// Write `intervention.json` requests instead of resuming.
    pub emit_intervention_requests: bool,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| StidError::Config(e.to_string()))
    }

    pub fn objects(&self) -> Vec<String> {
        if self.extraction.objects.is_empty() {
            DEFAULT_EXTRACTION_OBJECTS.iter().map(|s| s.to_string()).collect()
        } else {
            self.extraction.objects.clone()
        }
    }

    pub fn temporal(&self) -> bool {
        self.toy.frames > 1
    }

    pub fn extraction_layers(&self) -> Vec<usize> {
        if self.extraction.layers.is_empty() {
            (0..=self.toy.n_layers).collect()
        } else {
            self.extraction.layers.clone()
        }
    }

    pub fn intervention_layers(&self) -> Vec<usize> {
        if self.intervention.layers.is_empty() {
            (0..self.toy.n_layers).collect()
        } else {
            self.intervention.layers.clone()
        }
    }

    /// Check everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let c = &self.toy;
        let bad = |field: &str, msg: String| Err(StidError::validation(field, msg));
        for o in self.objects() {
            if !c.objects.contains(&o) {
                return bad("extraction.objects", format!("`{o}` is not in the toy vocabulary"));
            }
        }
        if self.objects().is_empty() {
            return bad("extraction.objects", "at least one object required".into());
        }
        if self.extraction.sizes == 0 {
            return bad("extraction.sizes", "must be positive".into());
        }
        if let Some(&l) = self.extraction.layers.iter().find(|&&l| l > c.n_layers) {
            return bad("extraction.layers", format!("layer {l} > {}", c.n_layers));
        }
        if let Some(&l) = self.intervention.layers.iter().find(|&&l| l >= c.n_layers) {
            return bad("intervention.layers", format!("layer {l} >= {}", c.n_layers));
        }
        if let Some(l) = self.analysis_layer {
            if l >= c.n_layers {
                return bad("analysis_layer", format!("layer {l} >= {}", c.n_layers));
            }
        }
        let (fi, fj) = self.extraction.frame_cell;
        if fi >= c.m || fj >= c.m {
            return bad("extraction.frame_cell", format!("({fi}, {fj}) outside the {} grid", c.m));
        }
        if !self.intervention.alpha.is_finite() {
            return bad("intervention.alpha", "must be finite".into());
        }
        Selector::parse(&self.intervention.selector, self.seed)?;
        if self.fit.ranks.contains(&0) {
            return bad("fit.ranks", "ranks must be positive".into());
        }
        if self.diagnosis.bins == 0 {
            return bad("diagnosis.bins", "must be positive".into());
        }
        if c.objects.len() < 2 {
            return bad("toy.objects", "relational scenes need two objects".into());
        }
        Ok(())
    }

    fn query_kind(&self) -> QueryKind {
        if self.temporal() {
            QueryKind::TemporalBa
        } else {
            QueryKind::SpatialLr
        }
    }
}

// ---------------------------------------------------------------------------
// Stages and errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    /// A single forward or replayed intervention outside the bundle stages.
    Run,
    Extract,
    Axes,
    Swap,
    Steer,
    Diagnose,
    Fit,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Gen => "gen",
            Stage::Run => "run",
            Stage::Extract => "extract-ids",
            Stage::Axes => "axes",
            Stage::Swap => "swap",
            Stage::Steer => "steer",
            Stage::Diagnose => "diagnose",
            Stage::Fit => "fit-posenc",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

/// A failure tagged with the stage it happened in. Outputs of earlier stages
/// stay on disk.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: StidError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| StidError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| StidError::Schema(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| StidError::io(path, e))
}

fn layer_tag(l: usize) -> String {
    format!("L{l:02}")
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// One object at one placement, used for extraction.
    Sweep,
    /// A relational scene.
    Pair,
    /// The mirror (or reversal) of a relational scene.
    Counterpart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub sample_id: String,
    pub kind: EntryKind,
    /// Sweep group (`object/size`) or the pair this counterpart belongs to.
    pub group: String,
    /// Trace directory relative to the bundle root.
    pub path: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub model_id: String,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusIndex {
    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }
}

struct SweepGroup {
    object: String,
    ids: Vec<String>,
    traces: Vec<ActivationTrace>,
}

/// A loaded corpus: index plus traces keyed by sample ID.
pub struct Corpus {
    pub index: CorpusIndex,
    pub traces: BTreeMap<String, ActivationTrace>,
}

impl Corpus {
    fn trace(&self, id: &str) -> Result<&ActivationTrace> {
        self.traces
            .get(id)
            .ok_or_else(|| StidError::InvalidArgument(format!("sample `{id}` not in corpus")))
    }

    /// Sweep traces grouped by `object/size`, in placement order, with
    /// their sample IDs.
    fn sweep_groups(&self) -> BTreeMap<String, SweepGroup> {
        let mut groups: BTreeMap<String, SweepGroup> = BTreeMap::new();
        for e in self.index.entries.iter().filter(|e| e.kind == EntryKind::Sweep) {
            let g = groups.entry(e.group.clone()).or_insert_with(|| SweepGroup {
                object: e.scene.query.subject.clone(),
                ids: Vec::new(),
                traces: Vec::new(),
            });
            g.ids.push(e.sample_id.clone());
            g.traces.push(self.traces[&e.sample_id].clone());
        }
        groups
    }

    /// `(pair entry, pair trace, counterpart trace)` in sample order.
    fn pairs(&self) -> Result<Vec<(&CorpusEntry, &ActivationTrace, &ActivationTrace)>> {
        self.index
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::Pair)
            .map(|e| Ok((e, self.trace(&e.sample_id)?, self.trace(&counterpart_id(&e.sample_id))?)))
            .collect()
    }
}

fn counterpart_id(pair_id: &str) -> String {
    format!("{pair_id}_counterpart")
}

pub const CORPUS_INDEX: &str = "corpus/index.json";

/// Scene specs of the corpus, without running the model.
pub fn corpus_specs(cfg: &RunConfig, weights: &ToyWeights) -> Result<Vec<CorpusEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let entry = |sample_id: String, kind, group: String, scene| CorpusEntry {
        path: format!("corpus/traces/{sample_id}"),
        sample_id,
        kind,
        group,
        scene,
    };
    for object in cfg.objects() {
        for size in 0..cfg.extraction.sizes {
            let base: u64 = rng.random();
            let group = format!("{object}/{size}");
            if cfg.temporal() {
                for s in toy::frame_sweep(weights, &object, cfg.extraction.frame_cell, base) {
                    let t = s.placements[0].frame;
                    entries.push(entry(format!("{object}_s{size}_t{t}"), EntryKind::Sweep, group.clone(), s));
                }
            } else {
                for s in toy::cell_sweep(weights, &object, base) {
                    let (i, j) = s.placements[0].cell;
                    entries.push(entry(format!("{object}_s{size}_r{i}c{j}"), EntryKind::Sweep, group.clone(), s));
                }
            }
        }
    }
    let (m, frames) = (cfg.toy.m, cfg.toy.frames);
    for k in 0..cfg.intervention.samples {
        let id = format!("pair{k:04}");
        let spec = toy::random_pair(weights, cfg.query_kind(), &mut rng)?;
        let mirror = spec.counterpart(m, frames);
        entries.push(entry(id.clone(), EntryKind::Pair, id.clone(), spec));
        entries.push(entry(counterpart_id(&id), EntryKind::Counterpart, id, mirror));
    }
    Ok(entries)
}

/// Generate the scene corpus, run the model on it and store every trace.
pub fn gen(cfg: &RunConfig, out: &Path) -> StageResult<CorpusIndex> {
    let stage = Stage::Gen;
    cfg.validate().at(stage)?;
    let weights = init_model(&cfg.toy).at(stage)?;
    let entries = corpus_specs(cfg, &weights).at(stage)?;
    entries
        .par_iter()
        .map(|e| {
            let t = weights.trace(&e.scene)?;
            trace::save_trace(&t, &out.join(&e.path))
        })
        .collect::<Result<Vec<()>>>()
        .at(stage)?;
    let index = CorpusIndex {
        model_id: weights.model_id(),
        entries,
    };
    report::write_json(&out.join(CORPUS_INDEX), &index).at(stage)?;
    log::info!("wrote {} traces", index.entries.len());
    Ok(index)
}

/// Load the corpus index and every trace it lists.
pub fn load_corpus(out: &Path) -> Result<Corpus> {
    let index: CorpusIndex = read_json(&out.join(CORPUS_INDEX))?;
    let loaded = index
        .entries
        .par_iter()
        .map(|e| Ok((e.sample_id.clone(), trace::load_trace(&out.join(&e.path))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        index,
        traces: loaded.into_iter().collect(),
    })
}

// ---------------------------------------------------------------------------
// Extraction and axes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub layer: usize,
    pub grid: String,
    pub quality: Quality,
    pub mean_cell_norm: f64,
    pub reference_norm: f64,
    pub source_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub layers: Vec<usize>,
    pub degenerate_layers: Vec<usize>,
    pub groups: usize,
}

fn universal_path(out: &Path, layer: usize) -> PathBuf {
    out.join("grids").join(format!("universal_{}.json", layer_tag(layer)))
}

fn object_grid(traces: &[ActivationTrace], object: &str, layer: usize, temporal: bool) -> Result<SpatialIdGrid> {
    if temporal {
        Ok(ids::temporal_ids(traces, object, layer)?.0)
    } else {
        ids::object_ids(traces, object, layer)
    }
}

/// Object-specific and universal grids at every extraction layer.
pub fn extract(cfg: &RunConfig, out: &Path, corpus: &Corpus) -> StageResult<ExtractSummary> {
    let stage = Stage::Extract;
    let groups = corpus.sweep_groups();
    if groups.is_empty() {
        return Err(StidError::InvalidArgument("corpus has no sweep traces".into())).at(stage);
    }
    let layers = cfg.extraction_layers();
    let mut rows = Vec::new();
    let mut degenerate = Vec::new();
    for &layer in &layers {
        let grids = groups
            .par_iter()
            .map(|(name, g)| Ok((name.clone(), object_grid(&g.traces, &g.object, layer, cfg.temporal())?)))
            .collect::<Result<Vec<_>>>()
            .at(stage)?;
        for (name, g) in &grids {
            rows.push(GridRow {
                layer,
                grid: name.clone(),
                quality: g.quality,
                mean_cell_norm: g.mean_cell_norm(),
                reference_norm: g.reference_norm,
                source_count: g.source_count,
            });
            let file = format!("object_{}_{}.json", name.replace('/', "_s"), layer_tag(layer));
            report::write_bytes(&out.join("grids").join(file), g.to_json().at(stage)?.as_bytes()).at(stage)?;
        }
        let plain: Vec<SpatialIdGrid> = grids.into_iter().map(|(_, g)| g).collect();
        let universal = ids::universal_ids(&plain).at(stage)?;
        if universal.quality == Quality::Degenerate {
            log::warn!("universal grid at layer {layer} is degenerate");
            degenerate.push(layer);
        }
        rows.push(GridRow {
            layer,
            grid: "universal".into(),
            quality: universal.quality,
            mean_cell_norm: universal.mean_cell_norm(),
            reference_norm: universal.reference_norm,
            source_count: universal.source_count,
        });
        report::write_bytes(&universal_path(out, layer), universal.to_json().at(stage)?.as_bytes()).at(stage)?;
    }
    report::write_csv(&out.join("grids/grids.csv"), &rows).at(stage)?;
    let summary = ExtractSummary {
        layers,
        degenerate_layers: degenerate,
        groups: groups.len(),
    };
    report::write_json(&out.join("grids/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

fn load_universal(out: &Path, layer: usize) -> Result<SpatialIdGrid> {
    SpatialIdGrid::from_json(&read_text(&universal_path(out, layer))?)
}

fn axes_path(out: &Path, layer: usize) -> PathBuf {
    out.join("axes").join(format!("axes_{}.json", layer_tag(layer)))
}

fn load_axes(out: &Path, layer: usize) -> Result<AxisSet> {
    AxisSet::from_json(&read_text(&axes_path(out, layer))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxesRow {
    pub layer: usize,
    pub quality: Quality,
    pub variance_explained_v: f64,
    pub variance_explained_h: f64,
    pub variance_explained_t: f64,
    pub variance_explained: f64,
    pub cos_vh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub layer: usize,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub t: Option<usize>,
    pub coef_v: f64,
    pub coef_h: f64,
    pub coef_t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxesSummary {
    pub rows: Vec<AxesRow>,
}

/// Direction vectors and projected coefficients for each universal grid.
pub fn axes(cfg: &RunConfig, out: &Path) -> StageResult<AxesSummary> {
    let stage = Stage::Axes;
    let mut rows = Vec::new();
    let mut coeffs = Vec::new();
    for layer in cfg.extraction_layers() {
        let grid = load_universal(out, layer).at(stage)?;
        let axes = ids::direction_vectors(&grid, AxisNaming::AsPrinted).at(stage)?;
        report::write_bytes(&axes_path(out, layer), axes.to_json().at(stage)?.as_bytes()).at(stage)?;
        let cos_vh = match (&axes.v, &axes.h) {
            (Some(v), Some(h)) => crate::vector::cosine(v, h),
            _ => None,
        };
        rows.push(AxesRow {
            layer,
            quality: axes.quality,
            variance_explained_v: axes.variance_explained_v,
            variance_explained_h: axes.variance_explained_h,
            variance_explained_t: axes.variance_explained_t,
            variance_explained: axes.variance_explained(),
            cos_vh,
        });
        for (key, v) in &grid.cells {
            let c = axes.coefficients(v);
            let (i, j, t) = match *key {
                GridKey::Cell { i, j } => (Some(i), Some(j), None),
                GridKey::Frame { t } => (None, None, Some(t)),
            };
            coeffs.push(CoefficientRow {
                layer,
                i,
                j,
                t,
                coef_v: c.v,
                coef_h: c.h,
                coef_t: c.t,
            });
        }
    }
    report::write_csv(&out.join("axes/axes.csv"), &rows).at(stage)?;
    report::write_csv(&out.join("axes/coefficients.csv"), &coeffs).at(stage)?;
    let summary = AxesSummary { rows };
    report::write_json(&out.join("axes/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

/// Layer for steering headlines, diagnosis and fits: the configured one, else
/// the integration layer, else the intervenable extracted layer with the most
/// variance explained. `None` when every candidate grid is degenerate.
pub fn analysis_layer(cfg: &RunConfig, out: &Path) -> Result<Option<usize>> {
    if cfg.analysis_layer.is_some() {
        return Ok(cfg.analysis_layer);
    }
    let summary: AxesSummary = read_json(&out.join("axes/stage.json"))?;
    let usable: Vec<&AxesRow> = summary
        .rows
        .iter()
        .filter(|r| r.quality == Quality::Ok && r.layer < cfg.toy.n_layers)
        .collect();
    let integration = cfg.toy.n_layers / 2;
    if usable.iter().any(|r| r.layer == integration) {
        return Ok(Some(integration));
    }
    Ok(usable
        .iter()
        .fold(None::<&AxesRow>, |best, r| match best {
            Some(b) if b.variance_explained >= r.variance_explained => Some(b),
            _ => Some(r),
        })
        .map(|r| r.layer))
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

fn candidates_of(entry: &CorpusEntry) -> (&'static str, &'static str) {
    entry.scene.query.kind.candidates()
}

/// Write a request for an external runner. The trace path is relative to
/// the request file.
fn emit_request(out: &Path, dir: &str, name: &str, entry: &CorpusEntry, spec: trace::InterventionSpec) -> Result<()> {
    let req = InterventionRequest {
        trace: PathBuf::from("../..").join(&entry.path),
        sample_id: Some(entry.sample_id.clone()),
        spec,
    };
    let path = out.join(dir).join("requests").join(format!("{name}.json"));
    let dir = path.parent().expect("request path has a parent");
    fs::create_dir_all(dir).map_err(|e| StidError::io(dir, e))?;
    trace::write_intervention_request(&req, &path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapLayerRow {
    pub layer: usize,
    pub selector: String,
    pub samples: usize,
    pub mean_belief_shift: f64,
    pub unstable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSummary {
    pub emitted_requests: usize,
    pub by_layer: Vec<SwapLayerRow>,
}

/// Mirror swaps of the configured token selection at every intervention layer.
pub fn swap(cfg: &RunConfig, out: &Path, corpus: &Corpus) -> StageResult<SwapSummary> {
    let stage = Stage::Swap;
    let weights = init_model(&cfg.toy).at(stage)?;
    let selector = Selector::parse(&cfg.intervention.selector, cfg.seed).at(stage)?;
    let pairs = corpus.pairs().at(stage)?;
    let layers = cfg.intervention_layers();
    let mut rows = Vec::new();
    let mut by_layer = Vec::new();
    let mut emitted = 0;
    for &layer in &layers {
        let jobs = pairs
            .par_iter()
            .map(|(entry, x, y)| {
                let q = trace::select_indices(x, &selector)?;
                if cfg.emit_intervention_requests {
                    let spec = intervention::swap_spec(y.layer(layer)?, layer, &q);
                    emit_request(out, "swaps", &format!("{}_{}", entry.sample_id, layer_tag(layer)), entry, spec)?;
                    return Ok(None);
                }
                let r = intervention::mirror_swap(x, y, layer, &q, &selector.name(), candidates_of(entry), &weights)?;
                Ok(Some((entry.sample_id.clone(), r)))
            })
            .collect::<Result<Vec<Option<(String, SwapResult)>>>>()
            .at(stage)?;
        if cfg.emit_intervention_requests {
            emitted += jobs.len();
            continue;
        }
        let results: Vec<(String, SwapResult)> = jobs.into_iter().flatten().collect();
        let n = results.len();
        by_layer.push(SwapLayerRow {
            layer,
            selector: selector.name(),
            samples: n,
            mean_belief_shift: results.iter().map(|(_, r)| r.belief_shift).sum::<f64>() / n.max(1) as f64,
            unstable: results.iter().filter(|(_, r)| r.unstable).count(),
        });
        rows.extend(results.iter().map(|(id, r)| InterventionRow::from_swap(id, r)));
    }
    if !cfg.emit_intervention_requests {
        report::write_csv(&out.join("swaps/swaps.csv"), &rows).at(stage)?;
        report::write_csv(&out.join("swaps/by_layer.csv"), &by_layer).at(stage)?;
    }
    let summary = SwapSummary {
        emitted_requests: emitted,
        by_layer,
    };
    report::write_json(&out.join("swaps/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerLayerRow {
    pub layer: usize,
    pub samples: usize,
    pub id_swap_rate: f64,
    pub noise_swap_rate: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSummary {
    pub alpha: f64,
    pub emitted_requests: usize,
    pub skipped_layers: Vec<usize>,
    pub by_layer: Vec<SteerLayerRow>,
    /// Mean excess gap change of ID steering over noise within the middle
    /// third of the layers, when that band was steered.
    pub steerability: Option<f64>,
}

fn noise_seed(run_seed: u64, sample: usize, layer: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((sample as u64) << 8)
        .wrapping_add(layer as u64)
}

/// Adversarial ID steering and matched noise steering of the subject word.
pub fn steer(cfg: &RunConfig, out: &Path, corpus: &Corpus) -> StageResult<SteerSummary> {
    let stage = Stage::Steer;
    let weights = init_model(&cfg.toy).at(stage)?;
    let pairs = corpus.pairs().at(stage)?;
    let alpha = cfg.intervention.alpha;
    let extracted = cfg.extraction_layers();
    let mut rows = Vec::new();
    let mut by_layer = Vec::new();
    let mut skipped = Vec::new();
    let mut matched = Vec::new();
    let mut emitted = 0;
    for layer in cfg.intervention_layers() {
        let grid = if extracted.contains(&layer) {
            Some(load_universal(out, layer).at(stage)?)
        } else {
            None
        };
        let Some(grid) = grid.filter(|g| g.quality == Quality::Ok) else {
            skipped.push(layer);
            continue;
        };
        let jobs = pairs
            .par_iter()
            .enumerate()
            .map(|(k, (entry, x, _))| {
                let subject = &entry.scene.query.subject;
                let cands = candidates_of(entry);
                let seed = noise_seed(cfg.seed, k, layer);
                if cfg.emit_intervention_requests {
                    let (spec, _) = intervention::adversarial_spec(x, subject, &grid, layer, alpha, cands)?;
                    emit_request(out, "steers", &format!("{}_{}_id", entry.sample_id, layer_tag(layer)), entry, spec)?;
                    let (a, s) = intervention::noise_pair(seed, x.dim);
                    let q = x.object_index(subject)?;
                    let spec = intervention::steer_spec(x.layer(layer)?, layer, q, &a, &s, alpha, format!("noise:{seed}"))?;
                    emit_request(out, "steers", &format!("{}_{}_noise", entry.sample_id, layer_tag(layer)), entry, spec)?;
                    return Ok(None);
                }
                let id = &entry.sample_id;
                let adv = intervention::adversarial_steer(x, id, subject, &grid, layer, alpha, cands, &weights)?;
                let q = x.object_index(subject)?;
                let noise = intervention::noise_steer(x, id, layer, q, seed, alpha, cands, &weights)?;
                Ok(Some((adv, noise)))
            })
            .collect::<Result<Vec<Option<(SteerResult, SteerResult)>>>>()
            .at(stage)?;
        if cfg.emit_intervention_requests {
            emitted += 2 * jobs.len();
            continue;
        }
        let results: Vec<(SteerResult, SteerResult)> = jobs.into_iter().flatten().collect();
        let ids: Vec<SteerResult> = results.iter().map(|r| r.0.clone()).collect();
        let noise: Vec<SteerResult> = results.iter().map(|r| r.1.clone()).collect();
        let (a, n) = (
            intervention::swap_rate(&ids).at(stage)?,
            intervention::swap_rate(&noise).at(stage)?,
        );
        by_layer.push(SteerLayerRow {
            layer,
            samples: results.len(),
            id_swap_rate: a,
            noise_swap_rate: n,
            difference: a - n,
        });
        for (x, y) in &results {
            rows.push(InterventionRow::from_steer(x));
            rows.push(InterventionRow::from_steer(y));
        }
        matched.extend(results);
    }
    let band = diagnosis::middle_third(cfg.toy.n_layers);
    let steerability = if matched.iter().any(|(r, _)| band.contains(&r.layer)) {
        Some(diagnosis::steerability(&matched, band).at(stage)?)
    } else {
        None
    };
    if !cfg.emit_intervention_requests {
        report::write_csv(&out.join("steers/steers.csv"), &rows).at(stage)?;
        report::write_csv(&out.join("steers/by_layer.csv"), &by_layer).at(stage)?;
    }
    let summary = SteerSummary {
        alpha,
        emitted_requests: emitted,
        skipped_layers: skipped,
        by_layer,
        steerability,
    };
    report::write_json(&out.join("steers/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Diagnosis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadbackRow {
    pub sample_id: String,
    pub layer: usize,
    pub true_index: String,
    pub assigned_index: String,
    pub coord_a: f64,
    pub coord_b: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTest {
    pub name: String,
    pub count_a: usize,
    pub count_b: usize,
    pub alternative: Alternative,
    pub result: Option<MannWhitney>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub layer: Option<usize>,
    pub skipped: Option<String>,
    pub readback_accuracy: Option<f64>,
    pub margin_test: Option<PopulationTest>,
    pub sensitivity_test: Option<PopulationTest>,
    pub injection: Option<diagnosis::InjectionReport>,
}

fn key_label(k: &GridKey) -> String {
    match k {
        GridKey::Cell { i, j } => format!("{i}-{j}"),
        GridKey::Frame { t } => format!("t{t}"),
    }
}

/// Continuous position of an activation along the axis a query asks about.
/// Spatial grids use the calibrated assignment; temporal grids regress the
/// frame index on the `t` coefficient.
struct Locator<'a> {
    grid: &'a SpatialIdGrid,
    axes: &'a AxisSet,
    frame_fit: Option<(f64, f64)>,
}

impl<'a> Locator<'a> {
    fn new(grid: &'a SpatialIdGrid, axes: &'a AxisSet) -> Result<Self> {
        let frame_fit = if grid.temporal {
            let pts: Vec<(f64, f64)> = grid
                .cells
                .iter()
                .filter_map(|(k, v)| match k {
                    GridKey::Frame { t } => Some((axes.coefficients(v).t.unwrap_or(0.0), *t as f64)),
                    GridKey::Cell { .. } => None,
                })
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            if sxx == 0.0 {
                return Err(StidError::Degenerate("temporal coefficients do not vary".into()));
            }
            let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
            Some((slope, my - slope * mx))
        } else {
            None
        };
        Ok(Locator { grid, axes, frame_fit })
    }

    /// `(nearest key, coordinate pair)`; the pair is `(row, column)` or
    /// `(frame, frame)`.
    fn locate(&self, phi: &[f64], center: Option<&[f64]>) -> Result<(GridKey, (f64, f64))> {
        match self.frame_fit {
            None => {
                let a = diagnosis::assign(phi, self.axes, self.grid, center)?;
                Ok((a.nearest, a.coords))
            }
            Some((slope, offset)) => {
                let x = match center {
                    Some(c) => crate::vector::sub(phi, c),
                    None => phi.to_vec(),
                };
                let f = slope * self.axes.coefficients(&x).t.unwrap_or(0.0) + offset;
                let t = f.round().clamp(0.0, (self.grid.side - 1) as f64) as usize;
                Ok((GridKey::Frame { t }, (f, f)))
            }
        }
    }
}

fn axis_coordinate(kind: QueryKind, coords: (f64, f64)) -> f64 {
    match kind {
        QueryKind::SpatialAb => coords.0,
        _ => coords.1,
    }
}

fn gt_coordinate(kind: QueryKind, spec: &SceneSpec, object: &str) -> Result<f64> {
    let p = spec
        .placement(object)
        .ok_or_else(|| StidError::InvalidArgument(format!("scene has no `{object}`")))?;
    Ok(match kind {
        QueryKind::SpatialAb => p.cell.0 as f64,
        QueryKind::TemporalBa => p.frame as f64,
        _ => p.cell.1 as f64,
    })
}

fn population_test(name: &str, a: &[f64], b: &[f64], alt: Alternative) -> Result<PopulationTest> {
    let result = if a.is_empty() || b.is_empty() {
        None
    } else {
        Some(diagnosis::mann_whitney_u(a, b, alt)?)
    };
    Ok(PopulationTest {
        name: name.into(),
        count_a: a.len(),
        count_b: b.len(),
        alternative: alt,
        result,
    })
}

fn write_histogram(path: &Path, pops: &[(&str, &[f64])], bins: usize, p: Option<f64>) -> Result<()> {
    if pops.iter().all(|(_, v)| v.is_empty()) {
        return Ok(());
    }
    let h = diagnosis::histogram(pops, bins, p)?;
    let mut buf = Vec::new();
    h.write_csv(&mut buf)?;
    report::write_bytes(path, &buf)
}

/// Assigned-ID readback, deviation margins of clean and ID-corrupted runs,
/// masking sensitivity and oracle ID injection at the analysis layer.
pub fn diagnose(cfg: &RunConfig, out: &Path, corpus: &Corpus) -> StageResult<DiagnoseSummary> {
    let stage = Stage::Diagnose;
    let skip = |reason: &str, layer| -> StageResult<DiagnoseSummary> {
        let s = DiagnoseSummary {
            layer,
            skipped: Some(reason.into()),
            readback_accuracy: None,
            margin_test: None,
            sensitivity_test: None,
            injection: None,
        };
        report::write_json(&out.join("diagnosis/stage.json"), &s).at(stage)?;
        Ok(s)
    };
    if cfg.emit_intervention_requests {
        return skip("intervention requests emitted; no resumed runs to diagnose", None);
    }
    let Some(layer) = analysis_layer(cfg, out).at(stage)? else {
        return skip("no non-degenerate grid at an intervenable layer", None);
    };
    if !cfg.extraction_layers().contains(&layer) {
        return skip("analysis layer was not extracted", Some(layer));
    }
    let weights = init_model(&cfg.toy).at(stage)?;
    let grid = load_universal(out, layer).at(stage)?;
    let axes = load_axes(out, layer).at(stage)?;
    if axes.quality == Quality::Degenerate {
        return skip("axes at the analysis layer are degenerate", Some(layer));
    }
    let locator = Locator::new(&grid, &axes).at(stage)?;

    // Readback on sweep traces, centered on each group's mean embedding.
    let mut readback = Vec::new();
    for g in corpus.sweep_groups().into_values() {
        let center = ids::mean_embedding(&g.traces, &g.object, layer).at(stage)?;
        for (id, t) in g.ids.iter().zip(&g.traces) {
            let label = t.labels.as_ref().and_then(|l| l.object(&g.object)).cloned();
            let truth = match (label, cfg.temporal()) {
                (Some(o), true) => GridKey::Frame { t: o.frame.unwrap_or(0) },
                (Some(o), false) => GridKey::cell(o.i, o.j),
                (None, _) => continue,
            };
            let phi = t.object_activation(&g.object, layer).at(stage)?;
            let (nearest, coords) = locator.locate(&phi, Some(&center)).at(stage)?;
            readback.push(ReadbackRow {
                sample_id: id.clone(),
                layer,
                true_index: key_label(&truth),
                assigned_index: key_label(&nearest),
                coord_a: coords.0,
                coord_b: coords.1,
                hit: nearest == truth,
            });
        }
    }
    let readback_accuracy =
        (!readback.is_empty()).then(|| readback.iter().filter(|r| r.hit).count() as f64 / readback.len() as f64);
    report::write_csv(&out.join("diagnosis/readback.csv"), &readback).at(stage)?;

    // Margins of clean runs and runs whose subject ID was steered away.
    let pairs = corpus.pairs().at(stage)?;
    let alpha = cfg.intervention.alpha;
    let margins = pairs
        .par_iter()
        .map(|(entry, x, _)| {
            let spec = &entry.scene;
            let kind = spec.query.kind;
            let cands = candidates_of(entry);
            let subject = &spec.query.subject;
            let reference = spec
                .query
                .reference
                .as_deref()
                .ok_or_else(|| StidError::InvalidArgument("relational scene without reference".into()))?;
            let gt = x.labels.as_ref().map(|l| l.gt_answer.clone()).unwrap_or_default();
            let (corrupt, _) = intervention::adversarial_spec(x, subject, &grid, layer, alpha, cands)?;
            let clean = x.layer(layer)?.clone();
            let steered = corrupt.apply(&clean)?;
            let mut recs = Vec::new();
            for (acts, tag) in [(clean, "clean"), (steered, "steered")] {
                let readout = weights.forward_from_layer(&acts, layer)?;
                let correct = diagnosis::is_correct(&readout, cands, &gt)?;
                let coord = |name: &str| -> Result<f64> {
                    let q = x.object_index(name)?;
                    Ok(axis_coordinate(kind, locator.locate(&acts.row_f64(q), None)?.1))
                };
                recs.push((
                    tag,
                    diagnosis::deviation_margin(
                        &format!("{}:{tag}", entry.sample_id),
                        coord(subject)?,
                        coord(reference)?,
                        gt_coordinate(kind, spec, subject)?,
                        gt_coordinate(kind, spec, reference)?,
                        correct,
                    ),
                ));
            }
            Ok(recs)
        })
        .collect::<Result<Vec<_>>>()
        .at(stage)?;
    let margins: Vec<diagnosis::DeviationRecord> = margins.into_iter().flatten().map(|(_, r)| r).collect();
    let wrong: Vec<f64> = margins.iter().filter(|r| !r.correct).map(|r| r.margin).collect();
    let right: Vec<f64> = margins.iter().filter(|r| r.correct).map(|r| r.margin).collect();
    let margin_test = population_test("margin_wrong_vs_correct", &wrong, &right, Alternative::ALess).at(stage)?;
    report::write_csv(&out.join("diagnosis/margins.csv"), &margins).at(stage)?;
    write_histogram(
        &out.join("diagnosis/margins_hist.csv"),
        &[("wrong", &wrong), ("correct", &right)],
        cfg.diagnosis.bins,
        margin_test.result.map(|r| r.p_value),
    )
    .at(stage)?;

    // Masking sensitivity on clean scenes.
    let sens = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (entry, x, _))| {
            let spec = &entry.scene;
            let cands = candidates_of(entry);
            let gt = x.labels.as_ref().map(|l| l.gt_answer.clone()).unwrap_or_default();
            let set = [cands.0, cands.1];
            let scene = toy::render_scene(spec, &weights)?;
            let p_base = x.readout.prob_within(&gt, &set)?;
            let subject = spec
                .placement(&spec.query.subject)
                .ok_or_else(|| StidError::InvalidArgument("subject not placed".into()))?;
            let masked = toy::mask_patch(&scene, &weights, subject.cell, subject.frame)?;
            let p_obj = weights.trace_rendered(&masked)?.readout.prob_within(&gt, &set)?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed ^ 0x5eed, k, 0));
            let cells = toy::random_mask_cells(&scene, cfg.toy.m, cfg.diagnosis.random_masks, &mut rng);
            let randoms = cells
                .iter()
                .map(|&c| {
                    let s = toy::mask_patch(&scene, &weights, c, 0)?;
                    weights.trace_rendered(&s)?.readout.prob_within(&gt, &set)
                })
                .collect::<Result<Vec<f64>>>()?;
            if randoms.is_empty() {
                return Ok(None);
            }
            let correct = diagnosis::is_correct(&x.readout, cands, &gt)?;
            diagnosis::bbox_sensitivity(&entry.sample_id, p_base, p_obj, &randoms, correct).map(Some)
        })
        .collect::<Result<Vec<_>>>()
        .at(stage)?;
    let sens: Vec<diagnosis::SensitivityRecord> = sens.into_iter().flatten().collect();
    let s_wrong: Vec<f64> = sens.iter().filter(|r| !r.correct).map(|r| r.sensitivity).collect();
    let s_right: Vec<f64> = sens.iter().filter(|r| r.correct).map(|r| r.sensitivity).collect();
    let sensitivity_test =
        population_test("sensitivity_wrong_vs_correct", &s_wrong, &s_right, Alternative::ALess).at(stage)?;
    report::write_csv(&out.join("diagnosis/sensitivity.csv"), &sens).at(stage)?;
    write_histogram(
        &out.join("diagnosis/sensitivity_hist.csv"),
        &[("wrong", &s_wrong), ("correct", &s_right)],
        cfg.diagnosis.bins,
        sensitivity_test.result.map(|r| r.p_value),
    )
    .at(stage)?;

    // Oracle injection of ground-truth IDs at every intervention layer.
    let xs: Vec<ActivationTrace> = pairs.iter().map(|(_, x, _)| (*x).clone()).collect();
    let injection = if xs.is_empty() {
        None
    } else {
        let rep = diagnosis::oracle_injection(&xs, &grid, &cfg.intervention_layers(), alpha, &weights).at(stage)?;
        report::write_csv(&out.join("diagnosis/injection.csv"), &rep.layers).at(stage)?;
        Some(rep)
    };

    let summary = DiagnoseSummary {
        layer: Some(layer),
        skipped: None,
        readback_accuracy,
        margin_test: Some(margin_test),
        sensitivity_test: Some(sensitivity_test),
        injection,
    };
    report::write_json(&out.join("diagnosis/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Positional-encoding fits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// `(layer, rank, R^2, degenerate)` for every fit.
    pub fits: Vec<posenc::FitRow>,
}

/// Design matrix of the toy's positional table, one row per grid key.
pub fn toy_design(weights: &ToyWeights, grid: &SpatialIdGrid, frame_cell: (usize, usize)) -> Result<DesignMatrix> {
    let rows = grid
        .cells
        .keys()
        .map(|k| {
            let psi = match *k {
                GridKey::Cell { i, j } => weights.psi_row((i, j), 0),
                GridKey::Frame { t } => weights.psi_row(frame_cell, t),
            };
            (PositionLabel::Key(*k), psi.to_vec())
        })
        .collect();
    DesignMatrix::learned_table(rows)
}

/// Rank-r fits from the positional table to universal IDs at each layer.
pub fn fit(cfg: &RunConfig, out: &Path) -> StageResult<FitSummary> {
    let stage = Stage::Fit;
    let weights = init_model(&cfg.toy).at(stage)?;
    let mut rows = Vec::new();
    for layer in cfg.extraction_layers() {
        let grid = load_universal(out, layer).at(stage)?;
        let design = toy_design(&weights, &grid, cfg.extraction.frame_cell).at(stage)?;
        let fits = posenc::posenc_to_ids_fit(&design, &grid, &cfg.fit.ranks).at(stage)?;
        rows.extend(posenc::fit_rows(&weights.model_id(), layer, &fits, 3));
    }
    let mut buf = Vec::new();
    posenc::write_fit_csv(&rows, &mut buf).at(stage)?;
    report::write_bytes(&out.join("fits/posenc_fit.csv"), &buf).at(stage)?;
    let summary = FitSummary { fits: rows };
    report::write_json(&out.join("fits/stage.json"), &summary).at(stage)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub threshold: f64,
    /// `>=` or `<=`.
    pub relation: String,
    pub pass: bool,
}

impl Check {
    fn at_least(name: &str, value: Option<f64>, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            relation: ">=".into(),
            pass: value.is_some_and(|v| v >= threshold),
        }
    }

    fn at_most(name: &str, value: Option<f64>, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            relation: "<=".into(),
            pass: value.is_some_and(|v| v <= threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model_id: String,
    pub seed: u64,
    pub traces: usize,
    pub analysis_layer: Option<usize>,
    pub variance_explained: Option<f64>,
    pub cos_vh: Option<f64>,
    pub degenerate_layers: Vec<usize>,
    pub mean_belief_shift_by_layer: BTreeMap<usize, f64>,
    pub id_swap_rate: Option<f64>,
    pub noise_swap_rate: Option<f64>,
    pub steerability: Option<f64>,
    pub readback_accuracy: Option<f64>,
    pub margin_p_value: Option<f64>,
    pub rank_r_squared: BTreeMap<usize, f64>,
    pub emitted_requests: usize,
    pub checks: Vec<Check>,
}

/// Gather stage summaries into `summary.json` and score them against the
/// toy-scale thresholds.
pub fn report(cfg: &RunConfig, out: &Path) -> StageResult<Summary> {
    let stage = Stage::Report;
    let index: CorpusIndex = read_json(&out.join(CORPUS_INDEX)).at(stage)?;
    let extract: ExtractSummary = read_json(&out.join("grids/stage.json")).at(stage)?;
    let axes: AxesSummary = read_json(&out.join("axes/stage.json")).at(stage)?;
    let swaps: SwapSummary = read_json(&out.join("swaps/stage.json")).at(stage)?;
    let steers: SteerSummary = read_json(&out.join("steers/stage.json")).at(stage)?;
    let diag: DiagnoseSummary = read_json(&out.join("diagnosis/stage.json")).at(stage)?;
    let fits: FitSummary = read_json(&out.join("fits/stage.json")).at(stage)?;
    let layer = analysis_layer(cfg, out).at(stage)?;

    let axes_row = layer.and_then(|l| axes.rows.iter().find(|r| r.layer == l));
    let steer_row = layer.and_then(|l| steers.by_layer.iter().find(|r| r.layer == l));
    let rank_r_squared: BTreeMap<usize, f64> = fits
        .fits
        .iter()
        .filter(|f| Some(f.layer) == layer)
        .map(|f| (f.rank, f.r_squared))
        .collect();
    let variance_explained = axes_row.map(|r| {
        if cfg.temporal() {
            r.variance_explained_t
        } else {
            r.variance_explained_v + r.variance_explained_h
        }
    });
    let cos_vh = axes_row.and_then(|r| r.cos_vh).map(f64::abs);
    let margin_p_value = diag.margin_test.as_ref().and_then(|t| t.result).map(|r| r.p_value);
    let difference = steer_row.map(|r| r.difference);

    let mut checks = vec![Check::at_least("variance_explained", variance_explained, 0.90)];
    if !cfg.temporal() {
        checks.push(Check::at_most("abs_cos_vh", cos_vh, 0.05));
    }
    checks.push(Check::at_least("id_minus_noise_swap_rate", difference, 0.2));
    checks.push(Check::at_least("rank3_r_squared", rank_r_squared.get(&3).copied(), 0.99));
    checks.push(Check::at_most("margin_p_value", margin_p_value, 0.01));

    let summary = Summary {
        model_id: index.model_id,
        seed: cfg.seed,
        traces: index.entries.len(),
        analysis_layer: layer,
        variance_explained,
        cos_vh,
        degenerate_layers: extract.degenerate_layers,
        mean_belief_shift_by_layer: swaps.by_layer.iter().map(|r| (r.layer, r.mean_belief_shift)).collect(),
        id_swap_rate: steer_row.map(|r| r.id_swap_rate),
        noise_swap_rate: steer_row.map(|r| r.noise_swap_rate),
        steerability: steers.steerability,
        readback_accuracy: diag.readback_accuracy,
        margin_p_value,
        rank_r_squared,
        emitted_requests: swaps.emitted_requests + steers.emitted_requests,
        checks,
    };
    report::write_json(&out.join("summary.json"), &summary).at(stage)?;
    Ok(summary)
}

/// Every stage in order. Outputs of completed stages survive a failure.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> StageResult<Summary> {
    cfg.validate().at(Stage::Gen)?;
    gen(cfg, out)?;
    let corpus = load_corpus(out).at(Stage::Extract)?;
    extract(cfg, out, &corpus)?;
    axes(cfg, out)?;
    swap(cfg, out, &corpus)?;
    steer(cfg, out, &corpus)?;
    diagnose(cfg, out, &corpus)?;
    fit(cfg, out)?;
    report(cfg, out)
}
