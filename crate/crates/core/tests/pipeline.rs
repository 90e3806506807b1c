// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::Path;

use stid_core::error::StidError;
use stid_core::intervention;
use stid_core::pipeline::{self, EntryKind, RunConfig, Stage};
use stid_core::toy::{init_model, ToyConfig};
use stid_core::trace::{self, Selector};
use stid_core::Resume;

fn small(objects: &[&str], frames: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.extraction.objects = objects.iter().map(|s| s.to_string()).collect();
    cfg.toy = ToyConfig {
        frames,
        ..ToyConfig::default()
    };
    cfg.intervention.samples = 12;
    cfg
}

#[test]
fn corpus_counts_follow_objects_cells_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let idx = pipeline::gen(&small(&["dog", "cup"], 1), dir.path()).unwrap();
    assert_eq!(idx.count(EntryKind::Sweep), 32);
    assert_eq!(idx.count(EntryKind::Pair), 12);
    assert_eq!(idx.count(EntryKind::Counterpart), 12);

    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["dog", "cup", "chair", "lamp", "plant"], 8);
    let idx = pipeline::gen(&cfg, dir.path()).unwrap();
    assert_eq!(idx.count(EntryKind::Sweep), 40);

    let mut sized = small(&["dog", "cup"], 1);
    sized.extraction.sizes = 3;
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pipeline::gen(&sized, dir.path()).unwrap().count(EntryKind::Sweep), 96);
}

#[test]
fn early_layer_only_run_flags_degenerate_grid_and_skips_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&["dog", "cup"], 1);
    cfg.extraction.layers = vec![0];
    cfg.intervention.layers = vec![0];
    let s = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(s.degenerate_layers, vec![0]);
    assert_eq!(s.analysis_layer, None);
    assert!(s.checks.iter().any(|c| !c.pass));
    let steer: pipeline::SteerSummary =
        serde_json::from_slice(&std::fs::read(dir.path().join("steers/stage.json")).unwrap()).unwrap();
    assert_eq!(steer.skipped_layers, vec![0]);
    let diag: pipeline::DiagnoseSummary =
        serde_json::from_slice(&std::fs::read(dir.path().join("diagnosis/stage.json")).unwrap()).unwrap();
    assert!(diag.skipped.is_some());
}

#[derive(serde::Deserialize)]
struct SwapCsvRow {
    sample_id: String,
    layer: usize,
    belief_shift: Option<f64>,
}

/// Emitted requests replayed through the trace store and the model's resume
/// must reproduce the shifts computed in-process.
#[test]
fn emitted_swap_requests_replay_to_in_process_results() {
    let cfg = small(&["dog", "cup"], 1);
    let live = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&cfg, live.path()).unwrap();

    let mut emit_cfg = cfg.clone();
    emit_cfg.emit_intervention_requests = true;
    let emitted = tempfile::tempdir().unwrap();
    let s = pipeline::run_pipeline(&emit_cfg, emitted.path()).unwrap();
    let expect = 12 * 4 + 2 * 12 * (cfg.toy.n_layers - 1);
    assert_eq!(s.emitted_requests, expect, "one swap per pair per layer, two steers per steered layer");
    assert!(!emitted.path().join("swaps/swaps.csv").exists());

    let model = init_model(&cfg.toy).unwrap();
    let mut reader = csv::Reader::from_path(live.path().join("swaps/swaps.csv")).unwrap();
    let mut checked = 0;
    for row in reader.deserialize::<SwapCsvRow>() {
        let row = row.unwrap();
        let req_path = emitted
            .path()
            .join("swaps/requests")
            .join(format!("{}_L{:02}.json", row.sample_id, row.layer));
        let req = trace::read_intervention_request(&req_path).unwrap();
        let x = trace::load_trace(&req_path.parent().unwrap().join(&req.trace)).unwrap();
        let y = trace::load_trace(&emitted.path().join(format!("corpus/traces/{}_counterpart", row.sample_id))).unwrap();
        req.spec.validate(x.num_layers, x.seq_len, x.dim).unwrap();
        let edited = req.spec.apply(x.layer(req.spec.layer).unwrap()).unwrap();
        let readout = model.resume(req.spec.layer, &edited).unwrap();
        // Round trip the response file as an external runner would.
        let resp = emitted.path().join("resp.json");
        trace::write_readout(&readout, &resp).unwrap();
        let readout = trace::read_readout(&resp).unwrap();
        let r = intervention::ingest_swap(&x, &y, row.layer, "object_words", ("left", "right"), readout).unwrap();
        assert_eq!(Some(r.belief_shift), row.belief_shift, "{} layer {}", row.sample_id, row.layer);
        checked += 1;
    }
    assert_eq!(checked, 12 * 4);
}

#[test]
fn temporal_run_reports_monotone_frame_structure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["dog", "cup", "chair"], 8);
    let s = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(s.analysis_layer, Some(2));
    assert!(s.variance_explained.unwrap() >= 0.9, "{s:?}");
    assert!(s.readback_accuracy.unwrap() >= 0.95, "{s:?}");
    assert!(s.id_swap_rate.unwrap() > s.noise_swap_rate.unwrap());
}

fn sample_ids_in(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    let Some(col) = headers.iter().position(|h| h == "sample_id") else {
        return Vec::new();
    };
    r.records().map(|rec| rec.unwrap()[col].to_string()).collect()
}

#[test]
fn every_csv_row_traces_back_to_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["dog", "cup"], 1);
    pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    let corpus = pipeline::load_corpus(dir.path()).unwrap();
    let known: BTreeSet<&str> = corpus.index.entries.iter().map(|e| e.sample_id.as_str()).collect();
    let mut seen = 0;
    for name in [
        "swaps/swaps.csv",
        "steers/steers.csv",
        "diagnosis/readback.csv",
        "diagnosis/margins.csv",
        "diagnosis/sensitivity.csv",
    ] {
        for id in sample_ids_in(&dir.path().join(name)) {
            // Margin rows tag the clean or steered variant after a colon.
            let base = id.split(':').next().unwrap();
            assert!(known.contains(base), "{name}: `{id}` not in corpus");
            seen += 1;
        }
    }
    assert!(seen > 100);
}

#[test]
fn stage_failures_carry_the_stage_and_keep_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::axes(&RunConfig::default(), dir.path()).unwrap_err();
    assert_eq!(err.stage, Stage::Axes);
    assert!(matches!(err.source, StidError::MissingFile(_)));

    let cfg = small(&["dog", "cup"], 1);
    pipeline::gen(&cfg, dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("corpus/traces/pair0003")).unwrap();
    let err = pipeline::run_pipeline(&cfg, dir.path()).map(|_| ());
    // Regeneration restores the deleted trace, so the full run succeeds.
    assert!(err.is_ok());
    std::fs::remove_dir_all(dir.path().join("corpus/traces/pair0003")).unwrap();
    let err = pipeline::load_corpus(dir.path()).err().unwrap();
    assert!(matches!(err, StidError::MissingFile(_)));
    assert!(dir.path().join("grids/grids.csv").exists());
}

#[test]
fn invalid_configs_are_rejected_before_work() {
    let mut cfg = RunConfig::default();
    cfg.extraction.objects = vec!["unicorn".into()];
    assert!(matches!(cfg.validate(), Err(StidError::Validation { .. })));
    let mut cfg = RunConfig::default();
    cfg.intervention.layers = vec![4];
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.intervention.selector = "nonsense".into();
    assert!(cfg.validate().is_err());
    assert!(matches!(
        RunConfig::from_json(r#"{"sed": 1}"#),
        Err(StidError::Config(_))
    ));
    let parsed = RunConfig::from_json(r#"{"seed": 9, "toy": {"frames": 8}}"#).unwrap();
    assert_eq!(parsed.seed, 9);
    assert!(parsed.temporal());
    assert_eq!(Selector::parse(&parsed.intervention.selector, 0).unwrap(), Selector::ObjectWords);
}
