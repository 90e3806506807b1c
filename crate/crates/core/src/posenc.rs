// SPDX-License-Identifier: MIT OR Apache-2.0

//! Positional-encoding design matrices and reduced-rank least squares.
//!
//! `fit_rank_r` solves `min ||Y - X W||_F` with `W` restricted to the top `r`
//! singular directions of `X`: `W_r = V_r S_r^{-1} U_r^T Y`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StidError};
use crate::ids::{GridKey, SpatialIdGrid};
use crate::trace::ActivationTrace;
use crate::vector;

/// Singular values below this fraction of the largest are treated as zero.
pub const SINGULAR_CUTOFF: f64 = 1e-12;

/// `[cos(t0 p), sin(t0 p), ..., cos(t_{w/2-1} p), sin(t_{w/2-1} p)]` with
/// `t_k = 10000^(-2k/w)`. `width` must be even.
pub fn rope_features(p: f64, width: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let theta = 10000f64.powf(-2.0 * k as f64 / width as f64);
        row.push((theta * p).cos());
        row.push((theta * p).sin());
    }
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    LearnedTable,
    Rope,
}

/// How a 2-D cell is turned into RoPE positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFlatten {
    /// One sinusoid block per axis, concatenated.
    #[default]
    PerAxis,
    /// A single block at position `i * m + j`.
    RowMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PositionLabel {
    Key(GridKey),
    Scalar { p: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub kind: DesignKind,
    pub labels: Vec<PositionLabel>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    /// Rows taken verbatim from a positional table.
    pub fn learned_table(rows: Vec<(PositionLabel, Vec<f64>)>) -> Result<Self> {
        let n = rows.len();
        let dx = rows.first().map_or(0, |r| r.1.len());
        if n == 0 || dx == 0 {
            return Err(StidError::InvalidArgument("empty positional table".into()));
        }
        let mut x = DMatrix::zeros(n, dx);
        let mut labels = Vec::with_capacity(n);
        for (r, (label, row)) in rows.into_iter().enumerate() {
            if row.len() != dx {
                return Err(StidError::shape("positional table row", dx, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StidError::validation("design", "non-finite entry"));
            }
            x.row_mut(r).copy_from_slice(&row);
            labels.push(label);
        }
        Ok(DesignMatrix {
            x,
            kind: DesignKind::LearnedTable,
            labels,
        })
    }
}

fn check_even(d: usize) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(StidError::InvalidArgument(format!("RoPE width must be even and positive, got {d}")));
    }
    Ok(())
}

/// One RoPE row per scalar position.
pub fn rope_design(positions: &[i64], d: usize) -> Result<DesignMatrix> {
    check_even(d)?;
    let rows = positions
        .iter()
        .map(|&p| (PositionLabel::Scalar { p }, rope_features(p as f64, d)))
        .collect();
    let mut dm = DesignMatrix::learned_table(rows)?;
    dm.kind = DesignKind::Rope;
    Ok(dm)
}

/// RoPE rows for every cell of an `m x m` grid in row-major order.
/// `d` is the total width; with [`GridFlatten::PerAxis`] each axis gets `d/2`.
pub fn rope_grid_design(m: usize, d: usize, flatten: GridFlatten) -> Result<DesignMatrix> {
    let mut rows = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let feats = match flatten {
                GridFlatten::PerAxis => {
                    check_even(d / 2)?;
                    let mut f = rope_features(i as f64, d / 2);
                    f.extend(rope_features(j as f64, d / 2));
                    f
                }
                GridFlatten::RowMajor => {
                    check_even(d)?;
                    rope_features((i * m + j) as f64, d)
                }
            };
            rows.push((PositionLabel::Key(GridKey::cell(i, j)), feats));
        }
    }
    let mut dm = DesignMatrix::learned_table(rows)?;
    dm.kind = DesignKind::Rope;
    Ok(dm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRFit {
    /// `[d_x, d_y]`.
    pub w: DMatrix<f64>,
    /// All singular values of `X`, descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub requested_rank: usize,
    pub r_squared: f64,
    /// Zero total variance in `Y`; `r_squared` is reported as 0.
    pub degenerate: bool,
    /// Requested rank exceeded the numerical rank of `X`.
    pub clamped: bool,
}

/// Rank-`r` truncated-SVD least squares.
pub fn fit_rank_r(x: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<RankRFit> {
    if x.nrows() != y.nrows() {
        return Err(StidError::shape("design rows vs targets", x.nrows(), y.nrows()));
    }
    if r == 0 {
        return Err(StidError::InvalidArgument("rank must be at least 1".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StidError::validation("fit", "non-finite input"));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let max = sv.first().copied().unwrap_or(0.0);
    let numerical = sv.iter().filter(|&&s| s > SINGULAR_CUTOFF * max && s > 0.0).count();
    let rank = r.min(numerical);
    if rank < r {
        log::warn!("rank {r} exceeds numerical rank {numerical}; clamped");
    }
    let mut w = DMatrix::zeros(x.ncols(), y.ncols());
    for &k in order.iter().take(rank) {
        let uk = u.column(k);
        let vk = vt.row(k).transpose();
        let coeff = (uk.transpose() * y) / svd.singular_values[k];
        w += vk * coeff;
    }
    let resid = y - x * &w;
    let rss = resid.norm_squared();
    let means = y.row_mean();
    let mut tss = 0.0;
    for row in y.row_iter() {
        tss += (row - &means).norm_squared();
    }
    let degenerate = tss <= 1e-24 * y.norm_squared() || tss == 0.0;
    let r_squared = if degenerate { 0.0 } else { 1.0 - rss / tss };
    Ok(RankRFit {
        w,
        singular_values: sv,
        rank,
        requested_rank: r,
        r_squared,
        degenerate,
        clamped: rank < r,
    })
}

/// Targets aligned with the design rows by label.
fn grid_targets(design: &DesignMatrix, grid: &SpatialIdGrid) -> Result<DMatrix<f64>> {
    if design.rows() != grid.cells.len() {
        return Err(StidError::InvalidArgument(format!(
            "design has {} rows, grid has {} cells",
            design.rows(),
            grid.cells.len()
        )));
    }
    let d = grid.dim();
    let mut y = DMatrix::zeros(design.rows(), d);
    for (r, label) in design.labels.iter().enumerate() {
        let key = match label {
            PositionLabel::Key(k) => *k,
            PositionLabel::Scalar { p } if grid.temporal && *p >= 0 => GridKey::Frame { t: *p as usize },
            other => {
                return Err(StidError::InvalidArgument(format!(
                    "design label {other:?} does not name a grid cell"
                )))
            }
        };
        let v = grid
            .get(key)
            .ok_or_else(|| StidError::InvalidArgument(format!("grid has no cell {key:?}")))?;
        y.row_mut(r).copy_from_slice(v);
    }
    Ok(y)
}

/// Fits of the grid's IDs from positional features, one per rank. Design
/// columns are centered first, matching the centering of the IDs.
pub fn posenc_to_ids_fit(design: &DesignMatrix, grid: &SpatialIdGrid, ranks: &[usize]) -> Result<Vec<RankRFit>> {
    let y = grid_targets(design, grid)?;
    let mut x = design.x.clone();
    let means = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &means;
    }
    ranks.iter().map(|&r| fit_rank_r(&x, &y, r)).collect()
}

/// `1 - cos(predicted, gt)`, in `[0, 2]`.
pub fn spatial_id_loss(predicted: &[f64], gt: &[f64]) -> Result<f64> {
    if predicted.len() != gt.len() {
        return Err(StidError::shape("loss operands", gt.len(), predicted.len()));
    }
    let c = vector::cosine(predicted, gt)
        .ok_or_else(|| StidError::InvalidArgument("zero vector in spatial-ID loss".into()))?;
    Ok((1.0 - c).clamp(0.0, 2.0))
}

/// Each trace's object activation minus the batch mean.
pub fn predicted_id_from_batch(traces: &[ActivationTrace], object: &str, layer: usize) -> Result<Vec<Vec<f64>>> {
    if traces.len() < 2 {
        return Err(StidError::InvalidArgument("batch needs at least 2 traces".into()));
    }
    let phis = traces
        .iter()
        .map(|t| t.object_activation(object, layer))
        .collect::<Result<Vec<_>>>()?;
    let d = phis[0].len();
    if let Some(bad) = phis.iter().find(|p| p.len() != d) {
        return Err(StidError::shape("trace dim", d, bad.len()));
    }
    let mean = vector::mean(&phis)?;
    Ok(phis.iter().map(|p| vector::sub(p, &mean)).collect())
}

/// One report row per fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub model_id: String,
    pub layer: usize,
    pub rank: usize,
    pub r_squared: f64,
    pub degenerate: bool,
    pub top_singular_values: String,
}

pub fn fit_rows(model_id: &str, layer: usize, fits: &[RankRFit], top: usize) -> Vec<FitRow> {
    fits.iter()
        .map(|f| FitRow {
            model_id: model_id.to_string(),
            layer,
            rank: f.rank,
            r_squared: f.r_squared,
            degenerate: f.degenerate,
            top_singular_values: f
                .singular_values
                .iter()
                .take(top)
                .map(|s| format!("{s:.6e}"))
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect()
}

pub fn write_fit_csv<W: Write>(rows: &[FitRow], out: W) -> Result<()> {
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
    fn rope_rows() {
        let d = rope_design(&[0, 1, -1], 6).unwrap();
        assert_eq!(d.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((d.x[(1, 0)] - 1f64.cos()).abs() < 1e-15);
        for c in 0..6 {
            let s = if c % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(d.x[(1, c)], s * d.x[(2, c)]);
        }
        assert!(rope_design(&[0], 5).is_err());
    }

    #[test]
    fn exact_rank_one_recovery() {
        let x = DMatrix::from_fn(10, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 + (r * c) as f64 * 0.1);
        let a = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        let b = DMatrix::from_row_slice(1, 3, &[0.3, 1.0, -1.0]);
        let y = &x * (a * b);
        let fit = fit_rank_r(&x, &y, 4).unwrap();
        assert!((fit.r_squared - 1.0).abs() < 1e-8);
        let fit1 = fit_rank_r(&x, &y, 1).unwrap();
        assert!(fit1.r_squared <= fit.r_squared + 1e-12);
    }

    #[test]
    fn constant_targets_are_degenerate() {
        let x = DMatrix::from_fn(5, 2, |r, c| (r + c) as f64);
        let y = DMatrix::from_fn(5, 3, |_, c| c as f64 + 1.0);
        let fit = fit_rank_r(&x, &y, 1).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.r_squared, 0.0);
    }

    #[test]
    fn rank_clamped_to_numerical_rank() {
        let x = DMatrix::from_fn(6, 3, |r, c| if c == 2 { r as f64 } else { (r + c) as f64 });
        let y = DMatrix::from_fn(6, 1, |r, _| r as f64);
        let fit = fit_rank_r(&x, &y, 3).unwrap();
        assert!(fit.clamped);
        assert_eq!(fit.rank, 2);
    }

    #[test]
    fn loss_values() {
        assert!(spatial_id_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((spatial_id_loss(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((spatial_id_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(spatial_id_loss(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fit_csv_has_header() {
        let x = DMatrix::identity(3, 3);
        let fit = fit_rank_r(&x, &x, 2).unwrap();
        let mut buf = Vec::new();
        write_fit_csv(&fit_rows("toy", 2, &[fit], 3), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model_id,layer,rank,r_squared,degenerate,top_singular_values"));
    }
}
