// SPDX-License-Identifier: MIT OR Apache-2.0

//! Invariants checked against brute force or independent arithmetic.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stid_core::diagnosis;
use stid_core::ids::{self, AxisNaming, GridKey};
use stid_core::intervention::{self, DEFAULT_ALPHA};
use stid_core::pipeline::{self, RunConfig};
use stid_core::posenc;
use stid_core::toy::{self, init_model, QueryKind, SceneSpec, ToyConfig, ToyWeights};
use stid_core::trace::{self, select_indices, ActivationTrace, RoleKind, Selector};
use stid_core::vector;

fn model() -> &'static ToyWeights {
    static W: OnceLock<ToyWeights> = OnceLock::new();
    W.get_or_init(|| init_model(&ToyConfig::default()).unwrap())
}

fn sweep(w: &ToyWeights, object: &str, seed: u64) -> Vec<ActivationTrace> {
    toy::run_all(w, &toy::cell_sweep(w, object, seed)).unwrap()
}

fn lr_scene(w: &ToyWeights, seed: u64) -> (SceneSpec, ActivationTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = toy::random_pair(w, QueryKind::SpatialLr, &mut rng).unwrap();
    let t = w.trace(&s).unwrap();
    (s, t)
}

// ---------------------------------------------------------------------------
// Trace store and selectors
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_then_load_is_identity(seed in any::<u64>(), logits in proptest::collection::vec(-1e6f64..1e6, 10)) {
        let w = model();
        let (_, mut t) = lr_scene(w, seed);
        for ((_, v), l) in t.readout.candidates.iter_mut().zip(&logits) {
            *v = -l.abs();
        }
        t.readout.logits = Some(t.readout.candidates.keys().cloned().zip(logits.iter().copied()).collect());
        let dir = tempfile::tempdir().unwrap();
        trace::save_trace(&t, dir.path()).unwrap();
        let back = trace::load_trace(dir.path()).unwrap();
        prop_assert!(back.readout.bit_eq(&t.readout));
        prop_assert!(back.layers.iter().zip(&t.layers).all(|(a, b)| a.bit_eq(b)));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn text_and_image_selections_partition_the_sequence(seed in any::<u64>()) {
        let (_, t) = lr_scene(model(), seed);
        prop_assume!(t.roles.iter().all(|r| r.kind != RoleKind::Other));
        let mut all = select_indices(&t, &Selector::AllText).unwrap();
        let image = select_indices(&t, &Selector::AllImage).unwrap();
        prop_assert!(image.iter().all(|i| !all.contains(i)));
        all.extend(image);
        all.sort_unstable();
        prop_assert_eq!(all, (0..t.seq_len).collect::<Vec<_>>());
    }

    #[test]
    fn non_object_words_match_object_words_in_size_only(seed in any::<u64>(), pick in any::<u64>()) {
        let (_, t) = lr_scene(model(), seed);
        let obj = select_indices(&t, &Selector::ObjectWords).unwrap();
        let other = select_indices(&t, &Selector::NonObjectWords { seed: pick }).unwrap();
        prop_assert_eq!(obj.len(), other.len());
        prop_assert!(other.iter().all(|i| !obj.contains(i)));
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn grids_are_centered(seed in any::<u64>(), layer in 0usize..5) {
        let w = model();
        let grids: Vec<_> = ["dog", "cup", "lamp"]
            .iter()
            .map(|o| ids::object_ids(&sweep(w, o, seed), o, layer).unwrap())
            .collect();
        let universal = ids::universal_ids(&grids).unwrap();
        for g in grids.iter().chain(std::iter::once(&universal)) {
            let scale = g.reference_norm.max(1e-12) * g.cells.len() as f64;
            prop_assert!(vector::norm(&g.cell_sum()) <= 1e-5 * scale, "sum {:e}", vector::norm(&g.cell_sum()));
        }
    }
}

/// Averaging object grids equals centering the per-cell mean over objects.
#[test]
fn object_averaging_commutes_with_centering() {
    let w = model();
    let objects = ["dog", "cup", "chair", "lamp"];
    let layer = 2;
    let sweeps: Vec<Vec<ActivationTrace>> = objects.iter().enumerate().map(|(k, o)| sweep(w, o, 10 * k as u64)).collect();
    let grids: Vec<_> = objects
        .iter()
        .zip(&sweeps)
        .map(|(o, s)| ids::object_ids(s, o, layer).unwrap())
        .collect();
    let universal = ids::universal_ids(&grids).unwrap();

    let m = w.config.m;
    let mut pooled = vec![vec![0.0; w.config.d]; m * m];
    for (o, s) in objects.iter().zip(&sweeps) {
        for t in s {
            let l = t.labels.as_ref().unwrap().object(o).unwrap();
            vector::axpy(&mut pooled[l.i * m + l.j], 1.0 / objects.len() as f64, &t.object_activation(o, layer).unwrap());
        }
    }
    let grand = vector::mean(&pooled).unwrap();
    for (k, cell) in pooled.iter().enumerate() {
        let expect = vector::sub(cell, &grand);
        let got = universal.cell(k / m, k % m).unwrap();
        assert!(vector::norm(&vector::sub(got, &expect)) <= 1e-6 * vector::norm(&expect).max(1e-12));
    }
}

#[test]
fn disjoint_object_subsets_give_the_same_universal_ids() {
    let w = model();
    let objects = &w.config.objects;
    let grid_of = |names: &[String]| {
        let groups: BTreeMap<String, Vec<ActivationTrace>> =
            names.iter().enumerate().map(|(k, o)| (o.clone(), sweep(w, o, 77 + k as u64))).collect();
        ids::universal_from_traces(&groups, w.integration_layer()).unwrap()
    };
    let (a, b) = (grid_of(&objects[..5]), grid_of(&objects[5..]));
    for (key, va) in &a.cells {
        let c = vector::cosine(va, b.get(*key).unwrap()).unwrap();
        assert!(c >= 0.9, "cell {key:?} cosine {c}");
    }
}

/// Batch-predicted IDs equal temporal IDs extracted from the same 15 traces.
#[test]
fn batch_predicted_ids_match_extraction() {
    let w = init_model(&ToyConfig {
        frames: 15,
        ..ToyConfig::default()
    })
    .unwrap();
    let traces = toy::run_all(&w, &toy::frame_sweep(&w, "cup", (2, 1), 3)).unwrap();
    assert_eq!(traces.len(), 15);
    let layer = w.integration_layer();
    let batch = posenc::predicted_id_from_batch(&traces, "cup", layer).unwrap();
    let (grid, _) = ids::temporal_ids(&traces, "cup", layer).unwrap();
    for (t, p) in batch.iter().enumerate() {
        let g = grid.get(GridKey::Frame { t }).unwrap();
        assert!(vector::norm(&vector::sub(p, g)) <= 1e-6 * vector::norm(g).max(1e-12));
        assert!(posenc::spatial_id_loss(p, g).unwrap() < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn steering_is_local_and_norm_bounded(seed in any::<u64>(), layer in 0usize..4, alpha in 0.0f64..10.0, noise in any::<u64>()) {
        let (_, t) = lr_scene(model(), seed);
        let q = seed as usize % t.seq_len;
        let (a, s) = intervention::noise_pair(noise, t.dim);
        let before = t.layer(layer).unwrap();
        let spec = intervention::steer_spec(before, layer, q, &a, &s, alpha, String::from("prop")).unwrap();
        let after = spec.apply(before).unwrap();
        for i in (0..t.seq_len).filter(|&i| i != q) {
            prop_assert_eq!(after.row(i), before.row(i));
        }
        let xn = vector::norm(&before.row_f64(q));
        let yn = vector::norm(&after.row_f64(q));
        prop_assert!(yn <= xn * (1.0 + 2.0 * alpha) * (1.0 + 1e-6));
        let inverse = intervention::inverse_spec(&spec, before).unwrap();
        prop_assert!(inverse.apply(&after).unwrap().bit_eq(before));
    }
}

#[test]
fn adversarial_swap_rate_grows_with_alpha() {
    let w = model();
    let layer = w.integration_layer();
    let groups: BTreeMap<String, Vec<ActivationTrace>> =
        w.config.objects.iter().map(|o| (o.clone(), sweep(w, o, 5))).collect();
    let grid = ids::universal_from_traces(&groups, layer).unwrap();
    let scenes: Vec<_> = (0..60).map(|k| lr_scene(w, 9000 + k)).collect();
    let rate = |alpha: f64| {
        let rs: Vec<_> = scenes
            .iter()
            .map(|(s, t)| {
                intervention::adversarial_steer(t, "s", &s.query.subject, &grid, layer, alpha, ("left", "right"), w)
                    .unwrap()
            })
            .collect();
        intervention::swap_rate(&rs).unwrap()
    };
    let rates: Vec<f64> = [1.0, 2.5, DEFAULT_ALPHA].iter().map(|&a| rate(a)).collect();
    assert!(rates.windows(2).all(|p| p[1] >= p[0]), "{rates:?}");
}

// ---------------------------------------------------------------------------
// Diagnosis
// ---------------------------------------------------------------------------

#[test]
fn assigned_ids_are_idempotent_and_read_back_cells() {
    let w = model();
    let layer = w.integration_layer();
    let groups: BTreeMap<String, Vec<ActivationTrace>> =
        w.config.objects.iter().map(|o| (o.clone(), sweep(w, o, 40))).collect();
    let grid = ids::universal_from_traces(&groups, layer).unwrap();
    let axes = ids::direction_vectors(&grid, AxisNaming::AsPrinted).unwrap();
    let mut hits = 0;
    let mut total = 0;
    for (o, _) in groups.iter().take(4) {
        let fresh = sweep(w, o, 4000);
        let center = ids::mean_embedding(&fresh, o, layer).unwrap();
        for t in &fresh {
            let a = diagnosis::assigned_id(t, o, layer, &axes, &grid, Some(&center)).unwrap();
            let again = axes.project_vector(&a.vector);
            assert!(vector::norm(&vector::sub(&again, &a.vector)) <= 1e-6 * vector::norm(&a.vector).max(1e-12));
            let l = t.labels.as_ref().unwrap().object(o).unwrap();
            hits += usize::from(a.nearest == GridKey::cell(l.i, l.j));
            total += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
}

proptest! {
    #[test]
    fn raw_margin_is_antisymmetric(a in -5.0f64..5.0, b in -5.0f64..5.0, c in 0usize..8, d in 0usize..8) {
        let fwd = diagnosis::raw_margin(a, b, c as f64, d as f64);
        let rev = diagnosis::raw_margin(b, a, d as f64, c as f64);
        prop_assert!((fwd + rev).abs() < 1e-12);
    }
}

#[test]
fn toy_answers_every_decidable_left_right_scene() {
    let w = model();
    let m = w.config.m;
    let mut checked = 0;
    for a in 0..m * m {
        for b in 0..m * m {
            let spec = SceneSpec::pair(QueryKind::SpatialLr, ("dog", (a / m, a % m), 0), ("cup", (b / m, b % m), 0), a as u64);
            let Some(gt) = (a != b).then(|| spec.ground_truth()).flatten() else {
                continue;
            };
            let t = w.trace(&spec).unwrap();
            assert!(diagnosis::is_correct(&t.readout, ("left", "right"), gt).unwrap(), "{spec:?}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn masking_the_subject_costs_more_than_masking_background() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.intervention.samples = 30;
    let s = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("diagnosis/sensitivity.csv")).unwrap();
    let values: Vec<f64> = r
        .deserialize::<diagnosis::SensitivityRecord>()
        .map(|x| x.unwrap().sensitivity)
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!(mean > 0.0, "mean sensitivity {mean}");
    assert!(s.steerability.unwrap() > 0.0);
}

// ---------------------------------------------------------------------------
// Positional fits
// ---------------------------------------------------------------------------

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn r_squared_is_monotone_and_full_rank_is_least_squares(seed in any::<u64>(), n in 10usize..30, dx in 2usize..8, dy in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(n, dx, &mut rng);
        let y = gaussian(n, dy, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for r in 1..=dx {
            let f = posenc::fit_rank_r(&x, &y, r).unwrap();
            prop_assert!(f.r_squared >= prev - 1e-12);
            prev = f.r_squared;
        }
        // Unconstrained least squares through the normal equations.
        let xtx = x.transpose() * &x;
        let oracle = xtx.lu().solve(&(x.transpose() * &y)).unwrap();
        let full = posenc::fit_rank_r(&x, &y, dx).unwrap();
        prop_assert!((&full.w - &oracle).norm() <= 1e-6 * oracle.norm());
    }

    #[test]
    fn loss_ignores_positive_scale(v in proptest::collection::vec(-3.0f64..3.0, 6), g in proptest::collection::vec(-3.0f64..3.0, 6), s in 0.01f64..100.0) {
        prop_assume!(vector::norm(&v) > 1e-3 && vector::norm(&g) > 1e-3);
        let base = posenc::spatial_id_loss(&v, &g).unwrap();
        prop_assert!((posenc::spatial_id_loss(&vector::scale(&v, s), &g).unwrap() - base).abs() < 1e-12);
        prop_assert!((posenc::spatial_id_loss(&v, &vector::scale(&g, s)).unwrap() - base).abs() < 1e-12);
    }
}

/// Independence is judged with the fit's own rank cutoff. Slow frequencies
/// look polynomial over a short run of positions, so wide designs sample
/// positions spread across the slowest wavelength.
#[test]
fn rope_columns_are_independent_when_rows_exceed_width() {
    for (d, stride) in [(4usize, 1i64), (8, 1), (16, 211), (32, 997)] {
        let positions: Vec<i64> = (0..(3 * d) as i64).map(|k| k * stride).collect();
        let design = posenc::rope_design(&positions, d).unwrap();
        let sv = design.x.clone().svd(false, false).singular_values;
        let max = sv.max();
        let rank = sv.iter().filter(|&&s| s > posenc::SINGULAR_CUTOFF * max).count();
        assert_eq!(rank, d, "d={d} stride={stride}: singular values {sv}");
    }
}
