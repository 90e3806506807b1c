// SPDX-License-Identifier: MIT OR Apache-2.0

//! Construction of the toy model's weights.
//!
//! The residual stream is split, in a random orthonormal frame, into
//! subspaces with fixed jobs: patch positional features (`pos_in`), the IDs
//! written into object words (`id_out`), patch content, an objectness flag
//! written into object words (`fg_out`), four role directions and word
//! identities. The integration block ties each object word's query to the key
//! of the patch carrying that object's content, so its attention peaks at the
//! object's patch; its value/output maps send `pos_in` to `id_out`. The
//! reasoning block copies subject minus reference IDs into the answer token,
//! where the spatial unembedding rows read them.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{PosAxis, PositionalBasis, ToyConfig, ANSWER_WORDS};
use super::scene::TEMPLATE_WORDS;
use crate::error::{Result, StidError};
use crate::posenc::rope_features;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Quiet,
    Integration,
    Reasoning,
}

/// One attention head. Column-vector convention: `q = W_Q x`, `W_Q` is
/// `d_head x d`; `W_out` is `d x d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub kind: BlockKind,
    pub heads: Vec<HeadWeights>,
}

/// Column ranges of the residual frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Orthonormal `d x d` frame; each range below indexes its columns.
    pub frame: DMatrix<f64>,
    pub pos_in: Range<usize>,
    pub id_out: Range<usize>,
    pub content: Range<usize>,
    pub fg_out: usize,
    pub role_text: usize,
    pub role_subject: usize,
    pub role_reference: usize,
    pub role_answer: usize,
    pub words: Range<usize>,
}

impl Layout {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.frame.column(k).iter().copied().collect()
    }

    fn block(&self, r: &Range<usize>) -> DMatrix<f64> {
        self.frame.columns(r.start, r.len()).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub config: ToyConfig,
    pub layout: Layout,
    pub blocks: Vec<BlockWeights>,
    /// Positional injection, `d x d_psi`.
    pub p: DMatrix<f64>,
    /// Positional basis table, one row per (frame, row, column), frame-major.
    pub psi: Vec<Vec<f64>>,
    /// Patch content `s` per object name.
    pub content: BTreeMap<String, Vec<f64>>,
    pub background: Vec<f64>,
    /// Word-identity vectors per token string.
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub role_text: Vec<f64>,
    pub role_subject: Vec<f64>,
    pub role_reference: Vec<f64>,
    pub role_answer: Vec<f64>,
    /// Unembedding rows in vocabulary order.
    pub unembed: Vec<(String, Vec<f64>)>,
    /// Target `d_psi x d_psi` map realised by the integration heads, in the
    /// `pos_in -> id_out` coordinates.
    pub id_map: DMatrix<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn orthonormal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let a = gaussian_matrix(rng, n, n, 1.0);
        let qr = a.qr();
        let r = qr.r();
        if (0..n).all(|k| r[(k, k)].abs() > 1e-6) {
            return qr.q();
        }
    }
}

fn vec_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Positional features of one patch.
pub fn positional_features(config: &ToyConfig, cell: (usize, usize), frame: usize) -> Vec<f64> {
    let (i, j) = (cell.0 as f64, cell.1 as f64);
    let centre = (config.m as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(config.d_psi);
    match config.basis {
        PositionalBasis::Orthogonal => {
            for axis in config.axes() {
                out.push(match axis {
                    PosAxis::Row => i,
                    PosAxis::Column => j,
                    PosAxis::Frame => frame as f64,
                    PosAxis::Radial => {
                        config.radial_scale * ((i - centre).powi(2) + (j - centre).powi(2)).sqrt()
                    }
                });
            }
        }
        PositionalBasis::Rope => {
            let mut coords = vec![i, j];
            if config.frames > 1 {
                coords.push(frame as f64);
            }
            let width = config.d_psi / coords.len();
            for c in coords {
                out.extend(rope_features(c, width));
            }
        }
    }
    out.resize(config.d_psi, 0.0);
    out
}

/// Build weights for `config`. Deterministic in `config.seed`.
pub fn init_model(config: &ToyConfig) -> Result<ToyWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let dp = config.d_psi;
    let n_obj = config.objects.len();

    let frame = orthonormal(&mut rng, d);
    let mut next = 0;
    let mut take = |n: usize| {
        let r = next..next + n;
        next += n;
        r
    };
    let pos_in = take(dp);
    let id_out = take(dp);
    let content = take(n_obj + 2);
    let fg_out = take(1).start;
    let roles = take(4);
    let words = next..d;
    let layout = Layout {
        frame,
        pos_in,
        id_out,
        content,
        fg_out,
        role_text: roles.start,
        role_subject: roles.start + 1,
        role_reference: roles.start + 2,
        role_answer: roles.start + 3,
        words,
    };

    let q_pos = layout.block(&layout.pos_in);
    let q_id = layout.block(&layout.id_out);
    let p = q_pos.clone();

    let psi: Vec<Vec<f64>> = (0..config.frames)
        .flat_map(|t| {
            (0..config.m).flat_map(move |i| (0..config.m).map(move |j| (t, i, j)))
        })
        .map(|(t, i, j)| positional_features(config, (i, j), t))
        .collect();

    // Content: one orthonormal direction per object, then background, then
    // a shared foreground flag present on every object patch.
    let content_col = |k: usize| layout.column(layout.content.start + k);
    let fg = content_col(n_obj + 1);
    let background = content_col(n_obj);
    let mut content = BTreeMap::new();
    for (k, name) in config.objects.iter().enumerate() {
        let s: Vec<f64> = content_col(k).iter().zip(&fg).map(|(a, b)| a + b).collect();
        content.insert(name.clone(), s);
    }

    // Word identities: objects get dedicated directions; other tokens get
    // dedicated directions while they last, then random unit vectors in the
    // word subspace.
    let mut embeddings = BTreeMap::new();
    let mut word_cols = layout.words.clone();
    for name in &config.objects {
        let k = word_cols.next().expect("validated word budget");
        embeddings.insert(name.clone(), layout.column(k));
    }
    let mut others: Vec<String> = TEMPLATE_WORDS
        .iter()
        .chain(ANSWER_WORDS.iter())
        .map(|s| s.to_string())
        .collect();
    for pieces in config.subwords.values() {
        others.extend(pieces[..pieces.len() - 1].iter().cloned());
    }
    others.sort();
    others.dedup();
    let word_basis = layout.block(&layout.words);
    for w in others {
        if embeddings.contains_key(&w) {
            continue;
        }
        let v = match word_cols.next() {
            Some(k) => layout.column(k),
            None => {
                let c = gaussian_matrix(&mut rng, layout.words.len(), 1, 1.0);
                let v = &word_basis * c;
                let n = v.norm();
                vec_of(&(v / n))
            }
        };
        embeddings.insert(w, v);
    }

    // Target ID map G: a scaled random rotation of positional coordinates.
    let id_map = orthonormal(&mut rng, dp) * config.id_gain;

    let integ = config.integration_block();
    let reason = config.reasoning_block();
    let mut blocks = Vec::with_capacity(config.n_layers);
    for b in 1..=config.n_layers {
        let kind = if b == integ {
            BlockKind::Integration
        } else if Some(b) == reason {
            BlockKind::Reasoning
        } else {
            BlockKind::Quiet
        };
        let heads = match kind {
            BlockKind::Quiet => (0..config.heads)
                .map(|_| quiet_head(&mut rng, config))
                .collect(),
            BlockKind::Integration => integration_heads(&mut rng, config, &layout, &id_map)?,
            BlockKind::Reasoning => reasoning_heads(&mut rng, config, &layout),
        };
        blocks.push(BlockWeights { kind, heads });
    }

    // Unembedding rows. Spatial words read the ID axes through the same map
    // G the integration heads realise, so (w_left - w_right)^T M points
    // against the column feature of psi.
    let a = config.readout_gain;
    let id_dir = |axis: PosAxis| -> Vec<f64> {
        match config.axis_feature(axis) {
            Some(f) => {
                let e = DVector::from_fn(dp, |r, _| if r == f { 1.0 } else { 0.0 });
                let v = &q_id * (&id_map * e);
                let n = v.norm();
                (v / n).iter().copied().collect()
            }
            None => vec![0.0; d],
        }
    };
    let fg_dir = layout.column(layout.fg_out);
    let small_word = |rng: &mut ChaCha8Rng| {
        let c = gaussian_matrix(rng, layout.words.len(), 1, 0.01);
        vec_of(&(&word_basis * c))
    };
    let mut unembed = Vec::new();
    for word in config.vocab() {
        let row = match word.as_str() {
            "left" => crate::vector::scale(&id_dir(PosAxis::Column), -a),
            "right" => crate::vector::scale(&id_dir(PosAxis::Column), a),
            "above" => crate::vector::scale(&id_dir(PosAxis::Row), -a),
            "below" => crate::vector::scale(&id_dir(PosAxis::Row), a),
            "before" => crate::vector::scale(&id_dir(PosAxis::Frame), -a),
            "after" => crate::vector::scale(&id_dir(PosAxis::Frame), a),
            "yes" => crate::vector::scale(&fg_dir, a),
            "no" => crate::vector::scale(&fg_dir, -a),
            _ => small_word(&mut rng),
        };
        unembed.push((word, row));
    }

    Ok(ToyWeights {
        config: config.clone(),
        role_text: layout.column(layout.role_text),
        role_subject: layout.column(layout.role_subject),
        role_reference: layout.column(layout.role_reference),
        role_answer: layout.column(layout.role_answer),
        layout,
        blocks,
        p,
        psi,
        content,
        background,
        embeddings,
        unembed,
        id_map,
    })
}

fn quiet_head(rng: &mut ChaCha8Rng, config: &ToyConfig) -> HeadWeights {
    let d = config.d;
    let dh = config.head_dim();
    let s = 1.0 / (d as f64).sqrt();
    HeadWeights {
        w_q: gaussian_matrix(rng, dh, d, s),
        w_k: gaussian_matrix(rng, dh, d, s),
        w_v: gaussian_matrix(rng, dh, d, s),
        w_out: gaussian_matrix(rng, d, dh, config.quiet_scale / (dh as f64).sqrt()),
    }
}

/// Outer product `a b^T` written into rows/cols of a zero matrix.
fn set_row(m: &mut DMatrix<f64>, r: usize, v: &[f64], s: f64) {
    for (c, x) in v.iter().enumerate() {
        m[(r, c)] = s * x;
    }
}

fn integration_heads(
    rng: &mut ChaCha8Rng,
    config: &ToyConfig,
    layout: &Layout,
    id_map: &DMatrix<f64>,
) -> Result<Vec<HeadWeights>> {
    let d = config.d;
    let dp = config.d_psi;
    let dh = config.head_dim();
    let n_obj = config.objects.len();
    let h = config.heads;
    let root = (dh as f64).sqrt();
    let kappa = config.peak_sharpness * root;
    let kappa_sink = config.sink_sharpness * root;

    // Split G across heads: G = sum_h S_h R_h with random factors and the
    // last head's S solved for.
    let mut rs = Vec::with_capacity(h);
    let mut ss = Vec::with_capacity(h);
    let mut acc = DMatrix::<f64>::zeros(dp, dp);
    for k in 0..h {
        let r = gaussian_matrix(rng, dp, dp, 1.0 / (dp as f64).sqrt());
        if k + 1 < h {
            let s = gaussian_matrix(rng, dp, dp, 1.0 / (dp as f64).sqrt());
            acc += &s * &r;
            ss.push(s);
            rs.push(r);
        } else {
            let inv = r.clone().try_inverse().ok_or_else(|| {
                StidError::Config("singular head factor; choose another seed".into())
            })?;
            ss.push((id_map - &acc) * inv);
            rs.push(r);
        }
    }

    let q_pos = layout.block(&layout.pos_in);
    let q_id = layout.block(&layout.id_out);
    let n_obj_content = layout.content.start;
    let fg_content = layout.column(n_obj_content + n_obj + 1);
    let fg_out = layout.column(layout.fg_out);
    let tau = layout.column(layout.role_text);

    let mut heads = Vec::with_capacity(h);
    for (r, s) in rs.iter().zip(&ss) {
        let mut w_q = DMatrix::zeros(dh, d);
        let mut w_k = DMatrix::zeros(dh, d);
        for k in 0..n_obj {
            let word = layout.column(layout.words.start + k);
            let content = layout.column(n_obj_content + k);
            set_row(&mut w_q, k, &word, kappa);
            set_row(&mut w_k, k, &content, 1.0);
        }
        set_row(&mut w_q, n_obj, &tau, kappa_sink);
        set_row(&mut w_k, n_obj, &tau, 1.0);

        let mut w_v = DMatrix::zeros(dh, d);
        let rv = r * q_pos.transpose();
        w_v.rows_mut(0, dp).copy_from(&rv);
        set_row(&mut w_v, dp, &fg_content, 1.0);

        let mut w_out = DMatrix::zeros(d, dh);
        let so = &q_id * s;
        w_out.columns_mut(0, dp).copy_from(&so);
        for (row, x) in fg_out.iter().enumerate() {
            w_out[(row, dp)] = x / h as f64;
        }
        heads.push(HeadWeights { w_q, w_k, w_v, w_out });
    }
    Ok(heads)
}

fn reasoning_heads(rng: &mut ChaCha8Rng, config: &ToyConfig, layout: &Layout) -> Vec<HeadWeights> {
    let d = config.d;
    let dp = config.d_psi;
    let dh = config.head_dim();
    let kappa = config.peak_sharpness * (dh as f64).sqrt();
    let q_id = layout.block(&layout.id_out);
    let fg_out = layout.column(layout.fg_out);
    let ans = layout.column(layout.role_answer);

    let copy_head = |target: usize, sign: f64, with_fg: bool| {
        let mut w_q = DMatrix::zeros(dh, d);
        let mut w_k = DMatrix::zeros(dh, d);
        set_row(&mut w_q, 0, &ans, kappa);
        set_row(&mut w_k, 0, &layout.column(target), 1.0);
        let mut w_v = DMatrix::zeros(dh, d);
        w_v.rows_mut(0, dp).copy_from(&q_id.transpose());
        set_row(&mut w_v, dp, &fg_out, 1.0);
        let mut w_out = DMatrix::zeros(d, dh);
        w_out.columns_mut(0, dp).copy_from(&(&q_id * sign));
        if with_fg {
            for (row, x) in fg_out.iter().enumerate() {
                w_out[(row, dp)] = *x;
            }
        }
        HeadWeights { w_q, w_k, w_v, w_out }
    };

    let mut heads = vec![copy_head(layout.role_subject, 1.0, true)];
    if config.heads > 1 {
        heads.push(copy_head(layout.role_reference, -1.0, false));
    }
    while heads.len() < config.heads {
        heads.push(quiet_head(rng, config));
    }
    heads
}

impl ToyWeights {
    pub fn model_id(&self) -> String {
        format!(
            "toy-vlm/seed={}/m={}/d={}/H={}/L={}/F={}/post-block-residual",
            self.config.seed,
            self.config.m,
            self.config.d,
            self.config.heads,
            self.config.n_layers,
            self.config.frames
        )
    }

    /// Activation layer whose object words first carry IDs.
    pub fn integration_layer(&self) -> usize {
        self.config.integration_block()
    }

    pub fn psi_index(&self, cell: (usize, usize), frame: usize) -> usize {
        let m = self.config.m;
        frame * m * m + cell.0 * m + cell.1
    }

    pub fn psi_row(&self, cell: (usize, usize), frame: usize) -> &[f64] {
        &self.psi[self.psi_index(cell, frame)]
    }

    /// `M = sum_h W_out^h W_V^h P` over the integration block.
    pub fn positional_map(&self) -> DMatrix<f64> {
        let block = self
            .blocks
            .iter()
            .find(|b| b.kind == BlockKind::Integration)
            .expect("every toy model has an integration block");
        let mut m = DMatrix::zeros(self.config.d, self.config.d_psi);
        for h in &block.heads {
            m += &h.w_out * &h.w_v * &self.p;
        }
        m
    }

    pub fn unembed_row(&self, word: &str) -> Option<&[f64]> {
        self.unembed
            .iter()
            .find(|(w, _)| w == word)
            .map(|(_, v)| v.as_slice())
    }

    /// Unit direction of `id_out` along one positional axis, i.e. the column
    /// of `M` for that feature, normalized.
    pub fn id_direction(&self, axis: PosAxis) -> Option<Vec<f64>> {
        let f = self.config.axis_feature(axis)?;
        let m = self.positional_map();
        let col: Vec<f64> = m.column(f).iter().copied().collect();
        let n = crate::vector::norm(&col);
        (n > 0.0).then(|| crate::vector::scale(&col, 1.0 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let c = ToyConfig::default();
        assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
        let other = ToyConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(init_model(&c).unwrap().p, init_model(&other).unwrap().p);
    }

    #[test]
    fn positional_map_matches_target_rotation() {
        for heads in [1, 2, 4] {
            let c = ToyConfig {
                heads,
                ..ToyConfig::default()
            };
            let w = init_model(&c).unwrap();
            let m = w.positional_map();
            let q_id = w.layout.block(&w.layout.id_out);
            let expected = &q_id * &w.id_map;
            assert!((m - expected).norm() < 1e-9, "heads={heads}");
        }
    }

    #[test]
    fn single_head_single_layer_closed_form() {
        let c = ToyConfig {
            heads: 1,
            n_layers: 1,
            ..ToyConfig::default()
        };
        let w = init_model(&c).unwrap();
        assert_eq!(w.blocks.len(), 1);
        assert_eq!(w.blocks[0].kind, BlockKind::Integration);
        let h = &w.blocks[0].heads[0];
        let direct = &h.w_out * &h.w_v * &w.p;
        assert!((direct - w.positional_map()).norm() < 1e-12);
    }

    #[test]
    fn spatial_readout_aligns_against_column_feature() {
        let w = init_model(&ToyConfig::default()).unwrap();
        let diff = crate::vector::sub(w.unembed_row("left").unwrap(), w.unembed_row("right").unwrap());
        let m = w.positional_map();
        let row: Vec<f64> = (0..c_dpsi(&w)).map(|f| {
            let col: Vec<f64> = m.column(f).iter().copied().collect();
            crate::vector::dot(&diff, &col)
        }).collect();
        // Negative on the column feature, zero on the others.
        assert!(row[1] < -1.0);
        assert!(row[0].abs() < 1e-9 && row[2].abs() < 1e-9);
    }

    fn c_dpsi(w: &ToyWeights) -> usize {
        w.config.d_psi
    }

    #[test]
    fn psi_table_has_one_row_per_cell() {
        let w = init_model(&ToyConfig::default()).unwrap();
        assert_eq!(w.psi.len(), 16);
        assert_eq!(w.psi_row((1, 2), 0)[..2], [1.0, 2.0]);
        let video = init_model(&ToyConfig {
            frames: 8,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_eq!(video.psi.len(), 128);
        assert_eq!(video.psi_row((0, 0), 5)[2], 5.0);
    }
}
