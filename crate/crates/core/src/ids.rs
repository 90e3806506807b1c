// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial and temporal ID extraction.
//!
//! For one object, the mean of its word activation over all placements is
//! subtracted from each placement's activation, giving an object-specific ID
//! grid. Averaging grids over objects gives the universal grid. Direction
//! vectors average pairwise cell differences along one grid index; their
//! Gram-Schmidt orthonormalization is the projection basis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StidError};
use crate::trace::ActivationTrace;
use crate::vector::{self, b64_vec, b64_vec_opt};

/// Relative norm below which a grid or axis counts as empty.
pub const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridKey {
    Cell { i: usize, j: usize },
    Frame { t: usize },
}

impl GridKey {
    pub fn cell(i: usize, j: usize) -> Self {
        GridKey::Cell { i, j }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum GridKind {
    ObjectSpecific { object: String },
    Universal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ok,
    Degenerate,
}

/// IDs per grid cell (or frame) at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialIdGrid {
    pub layer: usize,
    /// Grid side `m`, or frame count `F` for temporal grids.
    pub side: usize,
    pub temporal: bool,
    pub cells: BTreeMap<GridKey, Vec<f64>>,
    pub kind: GridKind,
    pub source_count: usize,
    pub quality: Quality,
    /// Mean norm of the activations the grid was centered against.
    pub reference_norm: f64,
}

impl SpatialIdGrid {
    pub fn dim(&self) -> usize {
        self.cells.values().next().map_or(0, Vec::len)
    }

    pub fn get(&self, key: GridKey) -> Option<&[f64]> {
        self.cells.get(&key).map(Vec::as_slice)
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.get(GridKey::cell(i, j))
    }

    pub fn mean_cell_norm(&self) -> f64 {
        let n = self.cells.len().max(1) as f64;
        self.cells.values().map(|v| vector::norm(v)).sum::<f64>() / n
    }

    /// Cellwise sum; zero up to rounding for any centered grid.
    pub fn cell_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for v in self.cells.values() {
            vector::axpy(&mut acc, 1.0, v);
        }
        acc
    }

    fn expected_keys(side: usize, temporal: bool) -> Vec<GridKey> {
        if temporal {
            (0..side).map(|t| GridKey::Frame { t }).collect()
        } else {
            (0..side)
                .flat_map(|i| (0..side).map(move |j| GridKey::cell(i, j)))
                .collect()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GridFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GridFile = serde_json::from_str(text)?;
        f.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    #[serde(flatten)]
    key: GridKey,
    #[serde(with = "b64_vec")]
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    layer: usize,
    side: usize,
    temporal: bool,
    kind: GridKind,
    source_count: usize,
    quality: Quality,
    reference_norm: f64,
    cells: Vec<CellEntry>,
}

impl From<&SpatialIdGrid> for GridFile {
    fn from(g: &SpatialIdGrid) -> Self {
        GridFile {
            layer: g.layer,
            side: g.side,
            temporal: g.temporal,
            kind: g.kind.clone(),
            source_count: g.source_count,
            quality: g.quality,
            reference_norm: g.reference_norm,
            cells: g
                .cells
                .iter()
                .map(|(k, v)| CellEntry {
                    key: *k,
                    vector: v.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<GridFile> for SpatialIdGrid {
    type Error = StidError;

    fn try_from(f: GridFile) -> Result<Self> {
        let cells: BTreeMap<_, _> = f.cells.into_iter().map(|c| (c.key, c.vector)).collect();
        let expected = SpatialIdGrid::expected_keys(f.side, f.temporal);
        if expected.len() != cells.len() || expected.iter().any(|k| !cells.contains_key(k)) {
            return Err(StidError::Schema("grid cells do not cover the declared grid".into()));
        }
        Ok(SpatialIdGrid {
            layer: f.layer,
            side: f.side,
            temporal: f.temporal,
            cells,
            kind: f.kind,
            source_count: f.source_count,
            quality: f.quality,
            reference_norm: f.reference_norm,
        })
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Mean of the object's word activation over the given placements.
pub fn mean_embedding(traces: &[ActivationTrace], object: &str, layer: usize) -> Result<Vec<f64>> {
    let phis = object_activations(traces, object, layer)?;
    vector::mean(&phis)
}

fn object_activations(traces: &[ActivationTrace], object: &str, layer: usize) -> Result<Vec<Vec<f64>>> {
    if traces.is_empty() {
        return Err(StidError::InvalidArgument("no traces given".into()));
    }
    let d = traces[0].dim;
    traces
        .iter()
        .map(|t| {
            if t.dim != d {
                return Err(StidError::shape("trace dim", d, t.dim));
            }
            t.object_activation(object, layer)
        })
        .collect()
}

fn placement_key(trace: &ActivationTrace, object: &str, temporal: bool) -> Result<GridKey> {
    let label = trace
        .labels
        .as_ref()
        .and_then(|l| l.object(object))
        .ok_or_else(|| {
            StidError::InvalidArgument(format!("trace lacks a placement label for `{object}`"))
        })?;
    if temporal {
        let t = label.frame.ok_or_else(|| {
            StidError::InvalidArgument(format!("label for `{object}` has no frame"))
        })?;
        Ok(GridKey::Frame { t })
    } else {
        Ok(GridKey::cell(label.i, label.j))
    }
}

fn centered_grid(
    traces: &[ActivationTrace],
    object: &str,
    layer: usize,
    temporal: bool,
) -> Result<SpatialIdGrid> {
    let phis = object_activations(traces, object, layer)?;
    let n = traces.len();
    let side = if temporal {
        n
    } else {
        let m = (n as f64).sqrt().round() as usize;
        if m * m != n {
            return Err(StidError::InvalidArgument(format!(
                "{n} traces do not form a square grid"
            )));
        }
        m
    };
    if side < 2 {
        return Err(StidError::InvalidArgument(format!(
            "need at least 2 positions per axis, got {side}"
        )));
    }
    // Placements are keyed and sorted first so the result does not depend on
    // the order the traces were given in.
    let mut keyed = BTreeMap::new();
    for (trace, phi) in traces.iter().zip(phis) {
        let key = placement_key(trace, object, temporal)?;
        if keyed.insert(key, phi).is_some() {
            return Err(StidError::InvalidArgument(format!("duplicate placement {key:?}")));
        }
    }
    for key in SpatialIdGrid::expected_keys(side, temporal) {
        if !keyed.contains_key(&key) {
            return Err(StidError::InvalidArgument(format!("missing placement {key:?}")));
        }
    }
    let phis: Vec<Vec<f64>> = keyed.values().cloned().collect();
    let mean = vector::mean(&phis)?;
    let cells: BTreeMap<_, _> = keyed.iter().map(|(k, phi)| (*k, vector::sub(phi, &mean))).collect();
    let reference_norm = phis.iter().map(|p| vector::norm(p)).sum::<f64>() / n as f64;
    let mut grid = SpatialIdGrid {
        layer,
        side,
        temporal,
        cells,
        kind: GridKind::ObjectSpecific {
            object: object.to_string(),
        },
        source_count: 1,
        quality: Quality::Ok,
        reference_norm,
    };
    grid.quality = grid_quality(&grid);
    Ok(grid)
}

fn grid_quality(grid: &SpatialIdGrid) -> Quality {
    let scale = grid.reference_norm.max(f64::MIN_POSITIVE);
    let max = grid.cells.values().map(|v| vector::norm(v)).fold(0.0, f64::max);
    if max <= DEGENERATE_TOL * scale {
        Quality::Degenerate
    } else {
        Quality::Ok
    }
}

/// Object-specific spatial IDs: one trace per grid cell.
pub fn object_ids(traces: &[ActivationTrace], object: &str, layer: usize) -> Result<SpatialIdGrid> {
    centered_grid(traces, object, layer, false)
}

/// Cellwise mean of object-specific grids.
pub fn universal_ids(grids: &[SpatialIdGrid]) -> Result<SpatialIdGrid> {
    let first = grids
        .first()
        .ok_or_else(|| StidError::InvalidArgument("no grids to average".into()))?;
    for g in grids {
        if g.side != first.side
            || g.temporal != first.temporal
            || g.dim() != first.dim()
            || g.cells.keys().ne(first.cells.keys())
        {
            return Err(StidError::InvalidArgument("grid shapes differ".into()));
        }
    }
    let n = grids.len() as f64;
    let mut cells = BTreeMap::new();
    for key in first.cells.keys() {
        let mut acc = vec![0.0; first.dim()];
        for g in grids {
            vector::axpy(&mut acc, 1.0, &g.cells[key]);
        }
        cells.insert(*key, vector::scale(&acc, 1.0 / n));
    }
    let mut out = SpatialIdGrid {
        layer: first.layer,
        side: first.side,
        temporal: first.temporal,
        cells,
        kind: GridKind::Universal,
        source_count: grids.iter().map(|g| g.source_count).sum(),
        quality: Quality::Ok,
        reference_norm: grids.iter().map(|g| g.reference_norm).sum::<f64>() / n,
    };
    out.quality = grid_quality(&out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Axes
// ---------------------------------------------------------------------------

/// Which grid index the `v` axis varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisNaming {
    /// `v` averages differences over the column index `j`, `h` over the row
    /// index `i`, exactly as the direction-vector formula is written.
    #[default]
    AsPrinted,
    /// Swapped: `v` varies `i`, `h` varies `j`.
    Swapped,
}

/// Grid index an axis tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridIndex {
    Row,
    Column,
    Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSet {
    pub layer: usize,
    pub naming: AxisNaming,
    #[serde(with = "b64_vec_opt", default)]
    pub v: Option<Vec<f64>>,
    #[serde(with = "b64_vec_opt", default)]
    pub h: Option<Vec<f64>>,
    #[serde(with = "b64_vec_opt", default)]
    pub t: Option<Vec<f64>>,
    /// Orthonormalized `v`, `h`, `t` in that order; `None` for absent or
    /// degenerate axes.
    #[serde(with = "b64_vec_opt", default)]
    pub basis_v: Option<Vec<f64>>,
    #[serde(with = "b64_vec_opt", default)]
    pub basis_h: Option<Vec<f64>>,
    #[serde(with = "b64_vec_opt", default)]
    pub basis_t: Option<Vec<f64>>,
    pub variance_explained_v: f64,
    pub variance_explained_h: f64,
    pub variance_explained_t: f64,
    pub quality: Quality,
}

/// Coefficients of a vector on the orthonormalized axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub h: f64,
    pub v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl AxisSet {
    pub fn variance_explained(&self) -> f64 {
        self.variance_explained_v + self.variance_explained_h + self.variance_explained_t
    }

    /// Grid index tracked by `v` and `h`.
    pub fn v_index(&self) -> GridIndex {
        match self.naming {
            AxisNaming::AsPrinted => GridIndex::Column,
            AxisNaming::Swapped => GridIndex::Row,
        }
    }

    pub fn h_index(&self) -> GridIndex {
        match self.naming {
            AxisNaming::AsPrinted => GridIndex::Row,
            AxisNaming::Swapped => GridIndex::Column,
        }
    }

    /// Coefficient along the axis that tracks `index`.
    pub fn coefficient_for(&self, c: &Coefficients, index: GridIndex) -> Option<f64> {
        match index {
            GridIndex::Frame => c.t,
            idx if idx == self.v_index() => Some(c.v),
            _ => Some(c.h),
        }
    }

    pub fn basis(&self) -> Vec<&[f64]> {
        [&self.basis_v, &self.basis_h, &self.basis_t]
            .into_iter()
            .flatten()
            .map(Vec::as_slice)
            .collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.basis().first().map(|b| b.len())
    }

    /// `V V^T x` over the orthonormal basis.
    pub fn project_vector(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for b in self.basis() {
            vector::axpy(&mut out, vector::dot(b, x), b);
        }
        out
    }

    pub fn coefficients(&self, x: &[f64]) -> Coefficients {
        let c = |b: &Option<Vec<f64>>| b.as_ref().map_or(0.0, |b| vector::dot(b, x));
        Coefficients {
            h: c(&self.basis_h),
            v: c(&self.basis_v),
            t: self.basis_t.as_ref().map(|b| vector::dot(b, x)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `(1 / C(n,2)) sum_{a>b} [f(a) - f(b)]` over one index of length `n`.
fn pair_average(n: usize, f: impl Fn(usize) -> Vec<f64>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for a in 0..n {
        for b in 0..a {
            vector::axpy(&mut acc, 1.0, &f(a));
            vector::axpy(&mut acc, -1.0, &f(b));
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    vector::scale(&acc, 1.0 / pairs)
}

/// Gram-Schmidt; returns `None` for a direction with no new component.
fn orthonormalize(dirs: &[Option<&Vec<f64>>], scale: f64) -> Vec<Option<Vec<f64>>> {
    let mut done: Vec<Vec<f64>> = Vec::new();
    dirs.iter()
        .map(|d| {
            let d = (*d)?;
            let mut r = d.clone();
            // Two passes keep the basis orthonormal to ~1e-15.
            for _ in 0..2 {
                for b in &done {
                    let c = vector::dot(b, &r);
                    vector::axpy(&mut r, -c, b);
                }
            }
            let n = vector::norm(&r);
            if n <= DEGENERATE_TOL * scale || n == 0.0 {
                return None;
            }
            let u = vector::scale(&r, 1.0 / n);
            done.push(u.clone());
            Some(u)
        })
        .collect()
}

fn axis_set(
    grid: &SpatialIdGrid,
    naming: AxisNaming,
    v: Option<Vec<f64>>,
    h: Option<Vec<f64>>,
    t: Option<Vec<f64>>,
) -> AxisSet {
    let scale = grid.mean_cell_norm().max(grid.reference_norm);
    fn live(x: &Option<Vec<f64>>, scale: f64) -> Option<&Vec<f64>> {
        x.as_ref()
            .filter(|x| vector::norm(x) > DEGENERATE_TOL * scale.max(f64::MIN_POSITIVE))
    }
    let basis = orthonormalize(
        &[live(&v, scale), live(&h, scale), live(&t, scale)],
        scale.max(f64::MIN_POSITIVE),
    );
    let total: f64 = grid.cells.values().map(|c| vector::dot(c, c)).sum();
    let explained = |b: &Option<Vec<f64>>| -> f64 {
        match b {
            Some(b) if total > 0.0 => {
                grid.cells.values().map(|c| vector::dot(b, c).powi(2)).sum::<f64>() / total
            }
            _ => 0.0,
        }
    };
    let mut it = basis.into_iter();
    let (basis_v, basis_h, basis_t) = (it.next().flatten(), it.next().flatten(), it.next().flatten());
    let expected_axes = if grid.temporal { 1 } else { 2 };
    let present = [&basis_v, &basis_h, &basis_t].iter().filter(|b| b.is_some()).count();
    let quality = if grid.quality == Quality::Degenerate || present < expected_axes {
        Quality::Degenerate
    } else {
        Quality::Ok
    };
    AxisSet {
        layer: grid.layer,
        naming,
        variance_explained_v: explained(&basis_v),
        variance_explained_h: explained(&basis_h),
        variance_explained_t: explained(&basis_t),
        v,
        h,
        t,
        basis_v,
        basis_h,
        basis_t,
        quality,
    }
}

/// Direction vectors of an `m x m` grid. Degenerate grids yield axes flagged
/// [`Quality::Degenerate`] rather than an error.
pub fn direction_vectors(grid: &SpatialIdGrid, naming: AxisNaming) -> Result<AxisSet> {
    if grid.temporal {
        return temporal_axis(grid);
    }
    let m = grid.side;
    if m < 2 {
        return Err(StidError::InvalidArgument(format!("grid side {m} < 2")));
    }
    let d = grid.dim();
    let cell = |i: usize, j: usize| grid.cells[&GridKey::cell(i, j)].clone();
    // Varying j inside each row, averaged over rows.
    let mut along_j = vec![0.0; d];
    for i in 0..m {
        vector::axpy(&mut along_j, 1.0 / m as f64, &pair_average(m, |j| cell(i, j), d));
    }
    let mut along_i = vec![0.0; d];
    for j in 0..m {
        vector::axpy(&mut along_i, 1.0 / m as f64, &pair_average(m, |i| cell(i, j), d));
    }
    let (v, h) = match naming {
        AxisNaming::AsPrinted => (along_j, along_i),
        AxisNaming::Swapped => (along_i, along_j),
    };
    Ok(axis_set(grid, naming, Some(v), Some(h), None))
}

fn temporal_axis(grid: &SpatialIdGrid) -> Result<AxisSet> {
    let f = grid.side;
    if f < 2 {
        return Err(StidError::InvalidArgument(format!("need F >= 2 frames, got {f}")));
    }
    let t = pair_average(f, |t| grid.cells[&GridKey::Frame { t }].clone(), grid.dim());
    Ok(axis_set(grid, AxisNaming::AsPrinted, None, None, Some(t)))
}

/// Project vectors onto the orthonormalized axes.
pub fn project(vectors: &[Vec<f64>], axes: &AxisSet) -> Result<Vec<Coefficients>> {
    let d = axes
        .dim()
        .ok_or_else(|| StidError::Degenerate("axis set has no usable direction".into()))?;
    vectors
        .iter()
        .map(|x| {
            if x.len() != d {
                return Err(StidError::shape("projected vector", d, x.len()));
            }
            Ok(axes.coefficients(x))
        })
        .collect()
}

/// Temporal IDs and the `t` direction: one trace per frame placement.
pub fn temporal_ids(
    traces: &[ActivationTrace],
    object: &str,
    layer: usize,
) -> Result<(SpatialIdGrid, AxisSet)> {
    if traces.len() < 2 {
        return Err(StidError::InvalidArgument(format!(
            "need F >= 2 frame placements, got {}",
            traces.len()
        )));
    }
    let grid = centered_grid(traces, object, layer, true)?;
    let axes = temporal_axis(&grid)?;
    Ok((grid, axes))
}

/// Projection of every spatial-word token of a trace onto the axes.
pub fn word_projections(
    trace: &ActivationTrace,
    layer: usize,
    axes: &AxisSet,
) -> Result<Vec<(String, Coefficients)>> {
    let idx = crate::trace::select_indices(trace, &crate::trace::Selector::SpatialWords)?;
    let acts = trace.layer(layer)?;
    let vecs: Vec<Vec<f64>> = idx.iter().map(|&q| acts.row_f64(q)).collect();
    let coeffs = project(&vecs, axes)?;
    Ok(idx
        .iter()
        .map(|&q| trace.roles[q].text.clone())
        .zip(coeffs)
        .collect())
}

/// Universal grid for several objects straight from traces grouped by object.
pub fn universal_from_traces(
    groups: &BTreeMap<String, Vec<ActivationTrace>>,
    layer: usize,
) -> Result<SpatialIdGrid> {
    let grids = groups
        .iter()
        .map(|(object, traces)| object_ids(traces, object, layer))
        .collect::<Result<Vec<_>>>()?;
    universal_ids(&grids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(m: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> SpatialIdGrid {
        let mut cells = BTreeMap::new();
        for i in 0..m {
            for j in 0..m {
                cells.insert(GridKey::cell(i, j), f(i, j));
            }
        }
        SpatialIdGrid {
            layer: 1,
            side: m,
            temporal: false,
            cells,
            kind: GridKind::Universal,
            source_count: 1,
            quality: Quality::Ok,
            reference_norm: 1.0,
        }
    }

    #[test]
    fn linear_grid_gives_five_thirds_axes() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        let g = synthetic(4, |i, j| {
            (0..3).map(|k| i as f64 * a[k] + j as f64 * b[k]).collect()
        });
        let axes = direction_vectors(&g, AxisNaming::AsPrinted).unwrap();
        let v = axes.v.as_ref().unwrap();
        let h = axes.h.as_ref().unwrap();
        for k in 0..3 {
            assert!((v[k] - 5.0 / 3.0 * b[k]).abs() < 1e-12);
            assert!((h[k] - 5.0 / 3.0 * a[k]).abs() < 1e-12);
        }
        let swapped = direction_vectors(&g, AxisNaming::Swapped).unwrap();
        assert_eq!(swapped.v, axes.h);
    }

    #[test]
    fn zero_grid_is_flagged_not_failed() {
        let g = synthetic(3, |_, _| vec![0.0; 4]);
        let axes = direction_vectors(&g, AxisNaming::AsPrinted).unwrap();
        assert_eq!(axes.quality, Quality::Degenerate);
        assert!(axes.basis().is_empty());
        assert!(project(&[vec![1.0; 4]], &axes).is_err());
    }

    #[test]
    fn projection_of_v_and_orthogonal_vectors() {
        let g = synthetic(4, |i, j| vec![i as f64 + 0.3 * j as f64, j as f64, 0.0, 0.0]);
        let axes = direction_vectors(&g, AxisNaming::AsPrinted).unwrap();
        let v = axes.v.clone().unwrap();
        let c = project(&[v.clone(), vec![0.0, 0.0, 2.0, -1.0]], &axes).unwrap();
        assert!((c[0].v - vector::norm(&v)).abs() < 1e-12);
        assert!(c[0].h.abs() < 1e-12);
        assert_eq!((c[1].h, c[1].v), (0.0, 0.0));
        let b = axes.basis();
        assert!((vector::dot(b[0], b[1])).abs() < 1e-12);
    }

    #[test]
    fn grid_json_round_trip() {
        let g = synthetic(2, |i, j| vec![i as f64 - 0.5, j as f64 - 0.5]);
        let back = SpatialIdGrid::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let axes = direction_vectors(&g, AxisNaming::AsPrinted).unwrap();
        let back = AxisSet::from_json(&axes.to_json().unwrap()).unwrap();
        assert_eq!(back.quality, axes.quality);
        assert_eq!(back.v.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn universal_of_opposites_is_zero() {
        let g = synthetic(2, |i, j| vec![i as f64 - 0.5, j as f64 - 0.5]);
        let mut neg = g.clone();
        for v in neg.cells.values_mut() {
            *v = vector::scale(v, -1.0);
        }
        let u = universal_ids(&[g.clone(), neg]).unwrap();
        assert!(u.cells.values().all(|v| v.iter().all(|x| *x == 0.0)));
        assert_eq!(u.quality, Quality::Degenerate);
        let single = universal_ids(std::slice::from_ref(&g)).unwrap();
        assert_eq!(single.cells, g.cells);
        assert_eq!(single.kind, GridKind::Universal);
    }
}
