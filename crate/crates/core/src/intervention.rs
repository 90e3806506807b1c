// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mirror swapping, belief shift and residual steering.
//!
//! Every intervention is expressed as an [`InterventionSpec`] first, so the
//! same edit can either be resumed locally through a [`Resume`] model or
//! written out for replay elsewhere and ingested afterwards.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StidError};
use crate::ids::{GridKey, SpatialIdGrid};
use crate::model::Resume;
use crate::trace::{ActivationTrace, BeliefReadout, Edit, EditMode, InterventionSpec, LayerActivations};
use crate::vector;

/// Below this `|P_x(GT) - P_y(GT)|` a belief shift is flagged unstable.
pub const SHIFT_FLOOR: f64 = 1e-3;

/// Default steering scale.
pub const DEFAULT_ALPHA: f64 = 5.0;

/// `(P_x - P_xt) / (P_x - P_y)` and whether the denominator is below the floor.
pub fn belief_shift(p_x: f64, p_intervened: f64, p_y: f64) -> (f64, bool) {
    let den = p_x - p_y;
    let num = p_x - p_intervened;
    if num == 0.0 {
        return (0.0, den.abs() < SHIFT_FLOOR);
    }
    (num / den, den.abs() < SHIFT_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    pub layer: usize,
    pub selector: String,
    pub gt: String,
    pub candidates: (String, String),
    pub p_original: f64,
    pub p_intervened: f64,
    pub p_counterpart: f64,
    pub belief_shift: f64,
    pub unstable: bool,
    pub original: BeliefReadout,
    pub intervened: BeliefReadout,
    pub counterpart: BeliefReadout,
}

fn gt_answer(trace: &ActivationTrace) -> Result<String> {
    trace
        .labels
        .as_ref()
        .map(|l| l.gt_answer.clone())
        .ok_or_else(|| StidError::InvalidArgument("trace has no ground-truth answer".into()))
}

/// Replace edits copying rows `q` of `y` over `x` at one layer.
pub fn swap_spec(y_layer: &LayerActivations, layer: usize, q: &[usize]) -> InterventionSpec {
    InterventionSpec {
        layer,
        edits: q
            .iter()
            .map(|&i| Edit {
                index: i,
                mode: EditMode::Replace,
                vector: y_layer.row(i).to_vec(),
            })
            .collect(),
        alpha: 1.0,
        note: "mirror swap".into(),
    }
}

/// Score a swap from the three readouts.
pub fn ingest_swap(
    x: &ActivationTrace,
    y: &ActivationTrace,
    layer: usize,
    selector: &str,
    candidates: (&str, &str),
    intervened: BeliefReadout,
) -> Result<SwapResult> {
    let gt = gt_answer(x)?;
    let set = [candidates.0, candidates.1];
    let p_x = x.readout.prob_within(&gt, &set)?;
    let p_xt = intervened.prob_within(&gt, &set)?;
    let p_y = y.readout.prob_within(&gt, &set)?;
    let (shift, unstable) = belief_shift(p_x, p_xt, p_y);
    Ok(SwapResult {
        layer,
        selector: selector.to_string(),
        gt,
        candidates: (candidates.0.to_string(), candidates.1.to_string()),
        p_original: p_x,
        p_intervened: p_xt,
        p_counterpart: p_y,
        belief_shift: shift,
        unstable,
        original: x.readout.clone(),
        intervened,
        counterpart: y.readout.clone(),
    })
}

/// Swap rows `q` of `x_L` for those of `y_L`, resume, and score the shift.
pub fn mirror_swap(
    x: &ActivationTrace,
    y: &ActivationTrace,
    layer: usize,
    q: &[usize],
    selector: &str,
    candidates: (&str, &str),
    model: &dyn Resume,
) -> Result<SwapResult> {
    if x.seq_len != y.seq_len || x.dim != y.dim || x.num_layers != y.num_layers {
        return Err(StidError::InvalidArgument("traces are not shape-compatible".into()));
    }
    if let Some(&bad) = q.iter().find(|&&i| i >= x.seq_len) {
        return Err(StidError::InvalidArgument(format!("index {bad} out of range")));
    }
    let spec = swap_spec(y.layer(layer)?, layer, q);
    let edited = spec.apply(x.layer(layer)?)?;
    let out = model.resume(layer, &edited)?;
    ingest_swap(x, y, layer, selector, candidates, out)
}

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

/// Where an added steering vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Provenance {
    SpatialId { add: GridKey, sub: GridKey },
    AssignedId { add: GridKey },
    Noise { seed: u64 },
    Custom,
}

impl Provenance {
    pub fn label(&self) -> String {
        let key = |k: &GridKey| match k {
            GridKey::Cell { i, j } => format!("({i},{j})"),
            GridKey::Frame { t } => format!("t{t}"),
        };
        match self {
            Provenance::SpatialId { add, sub } => format!("id{}-{}", key(add), key(sub)),
            Provenance::AssignedId { add } => format!("id{}-assigned", key(add)),
            Provenance::Noise { seed } => format!("noise:{seed}"),
            Provenance::Custom => "custom".into(),
        }
    }
}

/// Which vector is subtracted when steering towards a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtractRule {
    /// `Delta(m-1-i, j)`.
    #[default]
    MirroredRow,
    /// `Delta(i, m-1-j)`.
    MirroredColumn,
    /// The current projection of the activation onto the ID axes.
    AssignedId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    #[serde(default)]
    pub sample_id: String,
    pub layer: usize,
    pub index: usize,
    pub provenance: Provenance,
    pub alpha: f64,
    pub candidates: (String, String),
    pub baseline: BeliefReadout,
    pub steered: BeliefReadout,
    pub delta_logprob: BTreeMap<String, f64>,
    /// `log P(a) - log P(b)` before and after.
    pub gap_before: f64,
    pub gap_after: f64,
    pub swapped: bool,
}

impl SteerResult {
    pub fn gap_change(&self) -> f64 {
        self.gap_after - self.gap_before
    }
}

/// `alpha ||x|| (add/||add|| - sub/||sub||)`. A zero `add` or `sub` vector
/// contributes nothing.
pub fn steer_vector(x_row: &[f64], add: &[f64], sub: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if add.len() != x_row.len() || sub.len() != x_row.len() {
        return Err(StidError::shape("steering vector", x_row.len(), add.len().max(sub.len())));
    }
    let xn = vector::norm(x_row);
    if xn == 0.0 {
        return Err(StidError::InvalidArgument("zero-norm activation at target index".into()));
    }
    if add == sub {
        return Ok(vec![0.0; x_row.len()]);
    }
    let unit = |v: &[f64]| {
        let n = vector::norm(v);
        if n == 0.0 {
            vec![0.0; v.len()]
        } else {
            vector::scale(v, 1.0 / n)
        }
    };
    let dir = vector::sub(&unit(add), &unit(sub));
    Ok(vector::scale(&dir, alpha * xn))
}

/// Single additive edit at `q`.
pub fn steer_spec(
    x_layer: &LayerActivations,
    layer: usize,
    q: usize,
    add: &[f64],
    sub: &[f64],
    alpha: f64,
    note: impl Into<String>,
) -> Result<InterventionSpec> {
    if q >= x_layer.seq() {
        return Err(StidError::InvalidArgument(format!("index {q} out of range")));
    }
    let v = steer_vector(&x_layer.row_f64(q), add, sub, alpha)?;
    Ok(InterventionSpec {
        layer,
        edits: vec![Edit {
            index: q,
            mode: EditMode::Add,
            vector: vector::to_f32(&v),
        }],
        alpha,
        note: note.into(),
    })
}

/// Edits restoring the rows touched by `spec` to their values in `before`.
///
/// `f32` addition is not exactly invertible by negation, so the inverse of
/// an additive edit stores the original rows.
pub fn inverse_spec(spec: &InterventionSpec, before: &LayerActivations) -> Result<InterventionSpec> {
    let mut seen = std::collections::BTreeSet::new();
    let mut edits = Vec::new();
    for e in spec.edits.iter().rev() {
        if e.index >= before.seq() {
            return Err(StidError::InvalidArgument(format!("index {} out of range", e.index)));
        }
        if seen.insert(e.index) {
            edits.push(Edit {
                index: e.index,
                mode: EditMode::Replace,
                vector: before.row(e.index).to_vec(),
            });
        }
    }
    Ok(InterventionSpec {
        layer: spec.layer,
        edits,
        alpha: spec.alpha,
        note: format!("inverse of: {}", spec.note),
    })
}

/// Build a [`SteerResult`] from a baseline and the readout after the edit.
pub fn ingest_steer(
    sample_id: &str,
    spec: &InterventionSpec,
    provenance: Provenance,
    candidates: (&str, &str),
    baseline: &BeliefReadout,
    steered: BeliefReadout,
) -> Result<SteerResult> {
    let index = spec.edits.first().map_or(0, |e| e.index);
    let gap_before = baseline.gap(candidates.0, candidates.1)?;
    let gap_after = steered.gap(candidates.0, candidates.1)?;
    let mut delta_logprob = BTreeMap::new();
    for c in [candidates.0, candidates.1] {
        delta_logprob.insert(c.to_string(), steered.logprob(c)? - baseline.logprob(c)?);
    }
    Ok(SteerResult {
        sample_id: sample_id.to_string(),
        layer: spec.layer,
        index,
        provenance,
        alpha: spec.alpha,
        candidates: (candidates.0.to_string(), candidates.1.to_string()),
        baseline: baseline.clone(),
        steered,
        delta_logprob,
        gap_before,
        gap_after,
        swapped: (gap_before > 0.0) != (gap_after > 0.0),
    })
}

fn run_spec(trace: &ActivationTrace, spec: &InterventionSpec, model: &dyn Resume) -> Result<BeliefReadout> {
    spec.validate(trace.num_layers, trace.seq_len, trace.dim)?;
    let edited = spec.apply(trace.layer(spec.layer)?)?;
    model.resume(spec.layer, &edited)
}

/// Add `add_id` and subtract `sub_id` at index `q` of layer `layer`, both
/// rescaled to `alpha ||x_L[q]||`, and resume.
#[allow(clippy::too_many_arguments)]
pub fn steer(
    trace: &ActivationTrace,
    sample_id: &str,
    layer: usize,
    q: usize,
    add_id: &[f64],
    sub_id: &[f64],
    alpha: f64,
    provenance: Provenance,
    candidates: (&str, &str),
    model: &dyn Resume,
) -> Result<SteerResult> {
    let spec = steer_spec(trace.layer(layer)?, layer, q, add_id, sub_id, alpha, provenance.label())?;
    let out = run_spec(trace, &spec, model)?;
    ingest_steer(sample_id, &spec, provenance, candidates, &trace.readout, out)
}

/// Cell subtracted when steering towards `add` under `rule`.
pub fn subtract_cell(grid: &SpatialIdGrid, add: GridKey, rule: SubtractRule) -> GridKey {
    let m = grid.side;
    match (add, rule) {
        (GridKey::Cell { i, j }, SubtractRule::MirroredRow) => GridKey::cell(m - 1 - i, j),
        (GridKey::Cell { i, j }, SubtractRule::MirroredColumn) => GridKey::cell(i, m - 1 - j),
        (GridKey::Frame { t }, _) => GridKey::Frame { t: m - 1 - t },
        (k, SubtractRule::AssignedId) => k,
    }
}

/// Vectors and provenance for steering towards `add` on a grid.
pub fn grid_steering_vectors(
    grid: &SpatialIdGrid,
    add: GridKey,
    rule: SubtractRule,
    assigned: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>, Provenance)> {
    let add_v = grid
        .get(add)
        .ok_or_else(|| StidError::InvalidArgument(format!("grid has no cell {add:?}")))?
        .to_vec();
    if rule == SubtractRule::AssignedId {
        let a = assigned
            .ok_or_else(|| StidError::InvalidArgument("assigned-ID rule needs an assigned ID".into()))?;
        return Ok((add_v, a.to_vec(), Provenance::AssignedId { add }));
    }
    let sub = subtract_cell(grid, add, rule);
    let sub_v = grid.get(sub).expect("mirrored cell in grid").to_vec();
    Ok((add_v, sub_v, Provenance::SpatialId { add, sub }))
}

/// Cell most opposed to the current belief for a candidate pair.
///
/// The pushed-towards end of the relevant axis is the far end (`m-1`) when
/// the first candidate is currently favoured or tied, else `0`. For
/// left/right the row of `anchor` is kept; for above/below its column.
pub fn adversarial_cell(
    grid: &SpatialIdGrid,
    candidates: (&str, &str),
    baseline: &BeliefReadout,
    anchor: GridKey,
) -> Result<GridKey> {
    let gap = baseline.gap(candidates.0, candidates.1)?;
    let far = grid.side - 1;
    let end = if gap >= 0.0 { far } else { 0 };
    let (ai, aj) = match anchor {
        GridKey::Cell { i, j } => (i, j),
        GridKey::Frame { t } => (t, t),
    };
    Ok(match candidates {
        ("left", "right") | ("right", "left") => {
            let end = if candidates.0 == "left" { end } else { far - end };
            GridKey::cell(ai.min(far), end)
        }
        ("above", "below") | ("below", "above") => {
            let end = if candidates.0 == "above" { end } else { far - end };
            GridKey::cell(end, aj.min(far))
        }
        ("before", "after") | ("after", "before") => {
            let end = if candidates.0 == "before" { end } else { far - end };
            GridKey::Frame { t: end }
        }
        other => {
            return Err(StidError::InvalidArgument(format!(
                "no spatial ordering for candidates {other:?}"
            )))
        }
    })
}

/// Mirror rule that flips the axis a candidate pair asks about.
pub fn opposing_rule(candidates: (&str, &str)) -> SubtractRule {
    match candidates.0 {
        "left" | "right" => SubtractRule::MirroredColumn,
        _ => SubtractRule::MirroredRow,
    }
}

/// Steer the subject word with the ID most likely to reverse the current
/// answer; the subtracted ID is the mirror along the queried axis.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_steer(
    trace: &ActivationTrace,
    sample_id: &str,
    subject: &str,
    grid: &SpatialIdGrid,
    layer: usize,
    alpha: f64,
    candidates: (&str, &str),
    model: &dyn Resume,
) -> Result<SteerResult> {
    let (spec, provenance) = adversarial_spec(trace, subject, grid, layer, alpha, candidates)?;
    let out = run_spec(trace, &spec, model)?;
    ingest_steer(sample_id, &spec, provenance, candidates, &trace.readout, out)
}

/// The edit [`adversarial_steer`] would apply, without resuming.
pub fn adversarial_spec(
    trace: &ActivationTrace,
    subject: &str,
    grid: &SpatialIdGrid,
    layer: usize,
    alpha: f64,
    candidates: (&str, &str),
) -> Result<(InterventionSpec, Provenance)> {
    let q = trace.object_index(subject)?;
    let anchor = trace
        .labels
        .as_ref()
        .and_then(|l| l.object(subject))
        .map_or(GridKey::cell(0, 0), |o| GridKey::cell(o.i, o.j));
    let add = adversarial_cell(grid, candidates, &trace.readout, anchor)?;
    let (a, s, provenance) = grid_steering_vectors(grid, add, opposing_rule(candidates), None)?;
    let spec = steer_spec(trace.layer(layer)?, layer, q, &a, &s, alpha, provenance.label())?;
    Ok((spec, provenance))
}

/// Seeded isotropic Gaussian pair `(add, sub)` of width `d`.
pub fn noise_pair(seed: u64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let a = draw();
    let b = draw();
    (a, b)
}

/// Steering with random vectors rescaled exactly like spatial IDs.
#[allow(clippy::too_many_arguments)]
pub fn noise_steer(
    trace: &ActivationTrace,
    sample_id: &str,
    layer: usize,
    q: usize,
    seed: u64,
    alpha: f64,
    candidates: (&str, &str),
    model: &dyn Resume,
) -> Result<SteerResult> {
    let (a, s) = noise_pair(seed, trace.dim);
    steer(trace, sample_id, layer, q, &a, &s, alpha, Provenance::Noise { seed }, candidates, model)
}

/// Fraction of results whose candidate ordering flipped.
pub fn swap_rate(results: &[SteerResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(StidError::InvalidArgument("no steering results".into()));
    }
    Ok(results.iter().filter(|r| r.swapped).count() as f64 / results.len() as f64)
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub sample_id: String,
    pub kind: String,
    pub layer: usize,
    pub target: String,
    pub candidate_a: String,
    pub candidate_b: String,
    pub belief_shift: Option<f64>,
    pub delta_logprob_a: Option<f64>,
    pub delta_logprob_b: Option<f64>,
    pub swapped: Option<bool>,
    pub unstable: Option<bool>,
}

impl InterventionRow {
    pub fn from_swap(sample_id: &str, r: &SwapResult) -> Self {
        InterventionRow {
            sample_id: sample_id.to_string(),
            kind: "swap".into(),
            layer: r.layer,
            target: r.selector.clone(),
            candidate_a: r.candidates.0.clone(),
            candidate_b: r.candidates.1.clone(),
            belief_shift: Some(r.belief_shift),
            delta_logprob_a: None,
            delta_logprob_b: None,
            swapped: None,
            unstable: Some(r.unstable),
        }
    }

    pub fn from_steer(r: &SteerResult) -> Self {
        InterventionRow {
            sample_id: r.sample_id.clone(),
            kind: match r.provenance {
                Provenance::Noise { .. } => "noise_steer".into(),
                _ => "id_steer".into(),
            },
            layer: r.layer,
            target: r.provenance.label(),
            candidate_a: r.candidates.0.clone(),
            candidate_b: r.candidates.1.clone(),
            belief_shift: None,
            delta_logprob_a: r.delta_logprob.get(&r.candidates.0).copied(),
            delta_logprob_b: r.delta_logprob.get(&r.candidates.1).copied(),
            swapped: Some(r.swapped),
            unstable: None,
        }
    }
}

pub fn write_rows_csv<W: Write>(rows: &[InterventionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| StidError::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn belief_shift_arithmetic() {
        assert_eq!(belief_shift(0.9, 0.5, 0.1), (0.5, false));
        assert_eq!(belief_shift(0.9, 0.9, 0.1).0, 0.0);
        assert_eq!(belief_shift(0.9, 0.1, 0.1).0, 1.0);
        let (v, unstable) = belief_shift(0.5, 0.4, 0.4999);
        assert!(unstable && v.is_finite());
    }

    #[test]
    fn steer_vector_scaling() {
        let x = [3.0, 4.0];
        let v = steer_vector(&x, &[1.0, 0.0], &[0.0, 2.0], 2.0).unwrap();
        assert_eq!(v, vec![10.0, -10.0]);
        assert_eq!(steer_vector(&x, &[1.0, 1.0], &[1.0, 1.0], 5.0).unwrap(), vec![0.0, 0.0]);
        assert!(steer_vector(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).is_err());
        let norm_after = vector::norm(&vector::add(&x, &v));
        assert!(norm_after <= vector::norm(&x) * (1.0 + 2.0 * 2.0));
    }

    #[test]
    fn swap_rate_counts() {
        let base = BeliefReadout {
            candidates: [("left".to_string(), -0.1), ("right".to_string(), -2.0)].into(),
            logits: None,
        };
        let flipped = BeliefReadout {
            candidates: [("left".to_string(), -3.0), ("right".to_string(), -0.05)].into(),
            logits: None,
        };
        let spec = InterventionSpec {
            layer: 0,
            edits: vec![],
            alpha: 5.0,
            note: String::new(),
        };
        let mk = |out: &BeliefReadout| {
            ingest_steer("s", &spec, Provenance::Custom, ("left", "right"), &base, out.clone()).unwrap()
        };
        let results: Vec<_> = (0..10).map(|k| if k < 3 { mk(&flipped) } else { mk(&base) }).collect();
        assert!((swap_rate(&results).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(swap_rate(&results[..3]).unwrap(), 1.0);
        assert_eq!(swap_rate(&results[3..]).unwrap(), 0.0);
        assert!(swap_rate(&[]).is_err());
    }

    #[test]
    fn adversarial_cell_rules() {
        let mut cells = BTreeMap::new();
        for i in 0..4 {
            for j in 0..4 {
                cells.insert(GridKey::cell(i, j), vec![i as f64, j as f64]);
            }
        }
        let grid = SpatialIdGrid {
            layer: 1,
            side: 4,
            temporal: false,
            cells,
            kind: crate::ids::GridKind::Universal,
            source_count: 1,
            quality: crate::ids::Quality::Ok,
            reference_norm: 1.0,
        };
        let r = |l: f64, rt: f64| BeliefReadout {
            candidates: [("left".to_string(), l), ("right".to_string(), rt)].into(),
            logits: None,
        };
        let anchor = GridKey::cell(2, 0);
        assert_eq!(adversarial_cell(&grid, ("left", "right"), &r(-0.1, -2.0), anchor).unwrap(), GridKey::cell(2, 3));
        assert_eq!(adversarial_cell(&grid, ("left", "right"), &r(-2.0, -0.1), anchor).unwrap(), GridKey::cell(2, 0));
        assert_eq!(adversarial_cell(&grid, ("left", "right"), &r(-0.7, -0.7), anchor).unwrap(), GridKey::cell(2, 3));
        assert_eq!(subtract_cell(&grid, GridKey::cell(2, 3), SubtractRule::MirroredColumn), GridKey::cell(2, 0));
        assert_eq!(subtract_cell(&grid, GridKey::cell(2, 3), SubtractRule::MirroredRow), GridKey::cell(1, 3));
    }

    #[test]
    fn noise_pair_is_seeded() {
        assert_eq!(noise_pair(9, 8), noise_pair(9, 8));
        assert_ne!(noise_pair(9, 8), noise_pair(10, 8));
    }
}
