// SPDX-License-Identifier: MIT OR Apache-2.0

//! Failure attribution: assigned IDs, deviation margins, masking
//! sensitivity, rank statistics, response classification, steerability and
//! oracle ID injection.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, StidError};
use crate::ids::{AxisSet, Coefficients, GridIndex, GridKey, Quality, SpatialIdGrid};
use crate::intervention::{self, opposing_rule, SteerResult};
use crate::model::Resume;
use crate::trace::{ActivationTrace, BeliefReadout, InterventionSpec};
use crate::vector;

// ---------------------------------------------------------------------------
// Assigned IDs
// ---------------------------------------------------------------------------

/// Per-axis affine map from projection coefficient to grid index, fitted on
/// the projected cells of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub row_slope: f64,
    pub row_offset: f64,
    pub col_slope: f64,
    pub col_offset: f64,
}

fn line_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

impl Calibration {
    /// Regress each axis coefficient on the grid index it tracks.
    pub fn fit(grid: &SpatialIdGrid, axes: &AxisSet) -> Result<Self> {
        if grid.temporal {
            return Err(StidError::InvalidArgument("calibration needs a spatial grid".into()));
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for (key, v) in &grid.cells {
            if let GridKey::Cell { i, j } = key {
                let c = axes.coefficients(v);
                rows.push((*i as f64, axes.coefficient_for(&c, GridIndex::Row).unwrap_or(0.0)));
                cols.push((*j as f64, axes.coefficient_for(&c, GridIndex::Column).unwrap_or(0.0)));
            }
        }
        let (row_slope, row_offset) = line_fit(&rows);
        let (col_slope, col_offset) = line_fit(&cols);
        if row_slope == 0.0 || col_slope == 0.0 {
            return Err(StidError::Degenerate("grid projections do not vary along an axis".into()));
        }
        Ok(Calibration {
            row_slope,
            row_offset,
            col_slope,
            col_offset,
        })
    }

    /// Continuous `(row, column)` coordinates of a coefficient pair.
    pub fn coords(&self, axes: &AxisSet, c: &Coefficients) -> (f64, f64) {
        let r = axes.coefficient_for(c, GridIndex::Row).unwrap_or(0.0);
        let k = axes.coefficient_for(c, GridIndex::Column).unwrap_or(0.0);
        ((r - self.row_offset) / self.row_slope, (k - self.col_offset) / self.col_slope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `V V^T phi`.
    #[serde(with = "crate::vector::b64_vec")]
    pub vector: Vec<f64>,
    pub coefficients: Coefficients,
    /// Grid cell whose projected coefficients are closest.
    pub nearest: GridKey,
    /// Continuous `(row, column)` estimate.
    pub coords: (f64, f64),
}

/// Project `phi` (optionally minus a reference such as the object's mean
/// embedding) onto the axes and read back a grid position.
pub fn assign(phi: &[f64], axes: &AxisSet, grid: &SpatialIdGrid, center: Option<&[f64]>) -> Result<Assignment> {
    if axes.quality == Quality::Degenerate {
        return Err(StidError::Degenerate("axes are degenerate".into()));
    }
    let d = axes.dim().unwrap_or(0);
    if phi.len() != d {
        return Err(StidError::shape("activation", d, phi.len()));
    }
    let x = match center {
        Some(c) if c.len() == d => vector::sub(phi, c),
        Some(c) => return Err(StidError::shape("center", d, c.len())),
        None => phi.to_vec(),
    };
    let coefficients = axes.coefficients(&x);
    let mut best: Option<(f64, GridKey)> = None;
    for (key, v) in &grid.cells {
        let c = axes.coefficients(v);
        let dist = (c.h - coefficients.h).powi(2) + (c.v - coefficients.v).powi(2);
        if best.is_none_or(|(b, _)| dist < b) {
            best = Some((dist, *key));
        }
    }
    let nearest = best.map(|b| b.1).ok_or_else(|| StidError::InvalidArgument("empty grid".into()))?;
    let coords = Calibration::fit(grid, axes)?.coords(axes, &coefficients);
    Ok(Assignment {
        vector: axes.project_vector(&x),
        coefficients,
        nearest,
        coords,
    })
}

/// Assigned ID of an object word in a trace.
pub fn assigned_id(
    trace: &ActivationTrace,
    object: &str,
    layer: usize,
    axes: &AxisSet,
    grid: &SpatialIdGrid,
    center: Option<&[f64]>,
) -> Result<Assignment> {
    let phi = trace.object_activation(object, layer)?;
    assign(&phi, axes, grid, center)
}

// ---------------------------------------------------------------------------
// Deviation margin and masking sensitivity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub sample_id: String,
    pub epsilon_gt: f64,
    pub epsilon_ext: f64,
    pub margin: f64,
    pub correct: bool,
}

/// `epsilon_ext - epsilon_gt` without orientation normalization.
pub fn raw_margin(sub_ext: f64, ref_ext: f64, sub_gt: f64, ref_gt: f64) -> f64 {
    (sub_ext - ref_ext) - (sub_gt - ref_gt)
}

/// Margin with roles oriented so that `epsilon_gt >= 0`. A negative margin
/// means the assigned IDs oppose the ground truth.
pub fn deviation_margin(
    sample_id: &str,
    sub_ext: f64,
    ref_ext: f64,
    sub_gt: f64,
    ref_gt: f64,
    correct: bool,
) -> DeviationRecord {
    let mut epsilon_gt = sub_gt - ref_gt;
    let mut epsilon_ext = sub_ext - ref_ext;
    if epsilon_gt < 0.0 {
        epsilon_gt = -epsilon_gt;
        epsilon_ext = -epsilon_ext;
    }
    DeviationRecord {
        sample_id: sample_id.to_string(),
        epsilon_gt,
        epsilon_ext,
        margin: epsilon_ext - epsilon_gt,
        correct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub sample_id: String,
    pub p_base: f64,
    pub p_mask_object: f64,
    pub p_mask_random_min: f64,
    pub sensitivity: f64,
    pub correct: bool,
}

/// `(p_base - p_obj) - (p_base - min_r p_r)`.
pub fn bbox_sensitivity(
    sample_id: &str,
    p_base: f64,
    p_mask_object: f64,
    p_mask_randoms: &[f64],
    correct: bool,
) -> Result<SensitivityRecord> {
    if p_mask_randoms.is_empty() {
        return Err(StidError::InvalidArgument("at least one random mask required".into()));
    }
    for p in std::iter::once(&p_base).chain(std::iter::once(&p_mask_object)).chain(p_mask_randoms) {
        if !(0.0..=1.0).contains(p) {
            return Err(StidError::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
    }
    let p_min = p_mask_randoms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SensitivityRecord {
        sample_id: sample_id.to_string(),
        p_base,
        p_mask_object,
        p_mask_random_min: p_min,
        sensitivity: (p_base - p_mask_object) - (p_base - p_min),
        correct,
    })
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

/// Combined sample size at or below which p-values are exact.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `a` tends to be smaller than `b`.
    ALess,
    /// `a` tends to be larger than `b`.
    AGreater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `sum_a sum_b [a > b] + 0.5 [a = b]`.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
    pub degenerate: bool,
}

fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

fn tail_p(alt: Alternative, le: f64, ge: f64) -> f64 {
    match alt {
        Alternative::ALess => le,
        Alternative::AGreater => ge,
        Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
    }
}

/// U distribution under every split of the pooled sample.
fn exact_p(a: &[f64], b: &[f64], u_obs: f64, alt: Alternative) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let k = a.len();
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    let mut chosen = Vec::with_capacity(k);
    fn walk(
        start: usize,
        k: usize,
        pooled: &[f64],
        chosen: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if chosen.len() == k {
            visit(chosen);
            return;
        }
        for i in start..pooled.len() {
            if pooled.len() - i < k - chosen.len() {
                break;
            }
            chosen.push(i);
            walk(i + 1, k, pooled, chosen, visit);
            chosen.pop();
        }
    }
    let mut visit = |idx: &[usize]| {
        let mut in_a = vec![false; n];
        for &i in idx {
            in_a[i] = true;
        }
        let ga: Vec<f64> = (0..n).filter(|&i| in_a[i]).map(|i| pooled[i]).collect();
        let gb: Vec<f64> = (0..n).filter(|&i| !in_a[i]).map(|i| pooled[i]).collect();
        let u = u_statistic(&ga, &gb);
        total += 1;
        if u <= u_obs + 1e-9 {
            le += 1;
        }
        if u >= u_obs - 1e-9 {
            ge += 1;
        }
    };
    walk(0, k, &pooled, &mut chosen, &mut visit);
    tail_p(alt, le as f64 / total as f64, ge as f64 / total as f64)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(a: &[f64], b: &[f64], u: f64, alt: Alternative) -> Option<f64> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return None;
    }
    let sd = var.sqrt();
    let mu = na * nb / 2.0;
    let phi = Normal::new(0.0, 1.0).expect("unit normal");
    Some(match alt {
        Alternative::ALess => phi.cdf((u - mu + 0.5) / sd),
        Alternative::AGreater => phi.sf((u - mu - 0.5) / sd),
        Alternative::TwoSided => {
            let z = ((u - mu).abs() - 0.5).max(0.0) / sd;
            (2.0 * phi.sf(z)).min(1.0)
        }
    })
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alt: Alternative) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(StidError::InvalidArgument("both groups must be nonempty".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StidError::InvalidArgument("non-finite sample".into()));
    }
    let u = u_statistic(a, b);
    let first = a[0];
    if a.iter().chain(b).all(|&x| x == first) {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            exact: a.len() + b.len() <= EXACT_LIMIT,
            degenerate: true,
        });
    }
    if a.len() + b.len() <= EXACT_LIMIT {
        return Ok(MannWhitney {
            u,
            p_value: exact_p(a, b, u, alt),
            exact: true,
            degenerate: false,
        });
    }
    let p = normal_p(a, b, u, alt);
    Ok(MannWhitney {
        u,
        p_value: p.unwrap_or(1.0),
        exact: false,
        degenerate: p.is_none(),
    })
}

// ---------------------------------------------------------------------------
// Response classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseClass {
    Correct,
    Incorrect,
    Nonsense,
}

/// Exactly one option present decides the class; none or both is nonsense.
/// Matching is case-insensitive on whole words.
pub fn classify_response(decoded: &str, option_a: &str, option_b: &str, gt: &str) -> ResponseClass {
    let words: Vec<String> = decoded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let has = |opt: &str| {
        let opt: Vec<String> = opt.split_whitespace().map(str::to_lowercase).collect();
        !opt.is_empty() && words.windows(opt.len()).any(|w| w == opt.as_slice())
    };
    match (has(option_a), has(option_b)) {
        (true, false) if option_a.eq_ignore_ascii_case(gt) => ResponseClass::Correct,
        (false, true) if option_b.eq_ignore_ascii_case(gt) => ResponseClass::Correct,
        (true, false) | (false, true) => ResponseClass::Incorrect,
        _ => ResponseClass::Nonsense,
    }
}

// ---------------------------------------------------------------------------
// Steerability
// ---------------------------------------------------------------------------

/// Intervention layers in the middle third of `num_layers`.
pub fn middle_third(num_layers: usize) -> Range<usize> {
    let start = num_layers / 3;
    let end = (2 * num_layers).div_ceil(3).max(start + 1);
    start..end
}

/// Mean `|gap change|` of ID steering minus that of noise steering, over
/// pairs whose layer lies in `band`.
pub fn steerability(pairs: &[(SteerResult, SteerResult)], band: Range<usize>) -> Result<f64> {
    let mut id = 0.0;
    let mut noise = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        if a.sample_id != b.sample_id || a.layer != b.layer || a.candidates != b.candidates {
            return Err(StidError::InvalidArgument(format!(
                "unpaired results `{}`@{} and `{}`@{}",
                a.sample_id, a.layer, b.sample_id, b.layer
            )));
        }
        if band.contains(&a.layer) {
            id += a.gap_change().abs();
            noise += b.gap_change().abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(StidError::EmptySelection("no paired results inside the layer band".into()));
    }
    Ok((id - noise) / n as f64)
}

// ---------------------------------------------------------------------------
// Oracle injection
// ---------------------------------------------------------------------------

/// Canonical candidate pair containing `answer`.
pub fn candidate_pair(answer: &str) -> Option<(&'static str, &'static str)> {
    const PAIRS: [(&str, &str); 4] = [("left", "right"), ("above", "below"), ("before", "after"), ("yes", "no")];
    PAIRS.into_iter().find(|(a, b)| *a == answer || *b == answer)
}

/// Whether the favoured candidate of the pair equals `gt`.
pub fn is_correct(readout: &BeliefReadout, candidates: (&str, &str), gt: &str) -> Result<bool> {
    let gap = readout.gap(candidates.0, candidates.1)?;
    Ok(if gap > 0.0 { candidates.0 == gt } else if gap < 0.0 { candidates.1 == gt } else { false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionLayer {
    pub layer: usize,
    pub accuracy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub samples: usize,
    pub baseline_accuracy: f64,
    pub layers: Vec<InjectionLayer>,
}

/// Additive edits writing every labelled object's ground-truth ID into its
/// word token, subtracting the mirror along the queried axis.
pub fn injection_spec(
    trace: &ActivationTrace,
    grid: &SpatialIdGrid,
    layer: usize,
    alpha: f64,
    candidates: (&str, &str),
) -> Result<InterventionSpec> {
    let labels = trace
        .labels
        .as_ref()
        .ok_or_else(|| StidError::InvalidArgument("trace has no labels".into()))?;
    let rule = opposing_rule(candidates);
    let mut edits = Vec::new();
    let x = trace.layer(layer)?;
    for o in &labels.objects {
        let Ok(q) = trace.object_index(&o.name) else {
            continue;
        };
        let key = if grid.temporal {
            GridKey::Frame {
                t: o.frame.unwrap_or(0),
            }
        } else {
            GridKey::cell(o.i, o.j)
        };
        let (a, s, _) = intervention::grid_steering_vectors(grid, key, rule, None)?;
        let spec = intervention::steer_spec(x, layer, q, &a, &s, alpha, "")?;
        edits.extend(spec.edits);
    }
    if edits.is_empty() {
        return Err(StidError::EmptySelection("no labelled object words to inject".into()));
    }
    Ok(InterventionSpec {
        layer,
        edits,
        alpha,
        note: "oracle ID injection".into(),
    })
}

/// Accuracy after injecting ground-truth IDs at each layer, minus baseline.
pub fn oracle_injection(
    traces: &[ActivationTrace],
    grid: &SpatialIdGrid,
    layers: &[usize],
    alpha: f64,
    model: &dyn Resume,
) -> Result<InjectionReport> {
    use rayon::prelude::*;
    if traces.is_empty() {
        return Err(StidError::InvalidArgument("no traces".into()));
    }
    let meta = traces
        .iter()
        .map(|t| {
            let gt = t
                .labels
                .as_ref()
                .map(|l| l.gt_answer.clone())
                .ok_or_else(|| StidError::InvalidArgument("trace has no labels".into()))?;
            let pair = candidate_pair(&gt)
                .ok_or_else(|| StidError::InvalidArgument(format!("no candidate pair for `{gt}`")))?;
            Ok((gt, pair))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = traces.len() as f64;
    let mut base = 0usize;
    for (t, (gt, pair)) in traces.iter().zip(&meta) {
        base += usize::from(is_correct(&t.readout, *pair, gt)?);
    }
    let baseline_accuracy = base as f64 / n;
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let hits = traces
            .par_iter()
            .zip(meta.par_iter())
            .map(|(t, (gt, pair))| -> Result<usize> {
                let spec = injection_spec(t, grid, layer, alpha, *pair)?;
                let edited = spec.apply(t.layer(layer)?)?;
                let r = model.resume(layer, &edited)?;
                Ok(usize::from(is_correct(&r, *pair, gt)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let accuracy = hits.iter().sum::<usize>() as f64 / n;
        out.push(InjectionLayer {
            layer,
            accuracy,
            delta: accuracy - baseline_accuracy,
        });
    }
    Ok(InjectionReport {
        samples: traces.len(),
        baseline_accuracy,
        layers: out,
    })
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub name: String,
    pub count: usize,
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub populations: Vec<Population>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

/// Shared-edge density histogram of several populations.
pub fn histogram(populations: &[(&str, &[f64])], bins: usize, p_value: Option<f64>) -> Result<Histogram> {
    if bins == 0 {
        return Err(StidError::InvalidArgument("bins must be positive".into()));
    }
    let all: Vec<f64> = populations.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if all.is_empty() {
        return Err(StidError::InvalidArgument("no values to bin".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let populations = populations
        .iter()
        .map(|(name, values)| {
            let mut counts = vec![0usize; bins];
            for &v in *values {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
            let total = values.len().max(1) as f64;
            Population {
                name: name.to_string(),
                count: values.len(),
                densities: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
            }
        })
        .collect();
    Ok(Histogram {
        edges,
        populations,
        p_value,
    })
}

impl Histogram {
    /// One row per bin: `bin_lo, bin_hi, <population densities...>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
        header.extend(self.populations.iter().map(|p| p.name.clone()));
        w.write_record(&header)?;
        for k in 0..self.edges.len() - 1 {
            let mut row = vec![self.edges[k].to_string(), self.edges[k + 1].to_string()];
            row.extend(self.populations.iter().map(|p| p.densities[k].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| StidError::io("<csv>", e))?;
        Ok(())
    }
}

pub fn write_records_csv<T: Serialize, W: Write>(records: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| StidError::io("<csv>", e))?;
    Ok(())
}
