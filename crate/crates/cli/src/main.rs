// SPDX-License-Identifier: MIT OR Apache-2.0

//! `stid`: generate toy corpora, extract IDs, intervene, diagnose and fit.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 a stage
//! failed (outputs of earlier stages are kept).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use stid_core::pipeline::{self, RunConfig, Stage, StageError};
use stid_core::toy::{init_model, SceneSpec};
use stid_core::trace;
use stid_core::{Resume, StidError};

#[derive(Parser, Debug)]
#[command(name = "stid", version, about = "Spatial and temporal ID toolkit for vision-language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Each can also be set through the
/// environment variable shown, all prefixed `STID_`.
#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; absent fields take defaults.
    #[arg(long, global = true, env = "STID_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for scene sampling and noise steering.
    #[arg(long, global = true, env = "STID_SEED")]
    seed: Option<u64>,
    /// Bundle directory.
    #[arg(long, global = true, env = "STID_OUT", default_value = "out")]
    out: PathBuf,
    /// Comma-separated layers to extract; interventions use those below
    /// the last block.
    #[arg(long, global = true, env = "STID_LAYERS", value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Steering scale.
    #[arg(long, global = true, env = "STID_ALPHA")]
    alpha: Option<f64>,
    /// Token selector for mirror swaps.
    #[arg(long, global = true, env = "STID_SELECTOR")]
    selector: Option<String>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true, env = "STID_WORKERS")]
    workers: Option<usize>,
    /// Write intervention.json requests instead of resuming.
    #[arg(long, global = true, env = "STID_EMIT_INTERVENTION_REQUESTS")]
    emit_intervention_requests: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the scene corpus and store a trace per scene.
    Gen,
    /// Run the toy model on one scene, or replay an intervention request.
    Run(RunArgs),
    /// Object-specific and universal ID grids per layer.
    ExtractIds,
    /// Direction vectors and projected coefficients.
    Axes,
    /// Mirror swaps at every intervention layer.
    Swap,
    /// Adversarial ID steering against matched noise.
    Steer,
    /// Readback, deviation margins, masking sensitivity, ID injection.
    Diagnose,
    /// Rank-r fits from positional features to IDs.
    FitPosenc,
    /// Gather stage outputs into summary.json.
    Report,
    /// Every stage in order.
    Pipeline,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scene specification (JSON) to render and run.
    #[arg(long, conflicts_with = "request", required_unless_present = "request")]
    scene: Option<PathBuf>,
    /// Where to write the trace of `--scene`.
    #[arg(long, requires = "scene")]
    trace_out: Option<PathBuf>,
    /// intervention.json to replay. Relative trace paths resolve against
    /// the request's directory.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Where to write the readout response of `--request`.
    #[arg(long, requires = "request")]
    readout_out: Option<PathBuf>,
}

enum Failure {
    Invalid(String),
    Stage(StageError),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(invalid)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(layers) = &c.layers {
        cfg.extraction.layers = layers.clone();
        let below: Vec<usize> = layers.iter().copied().filter(|&l| l < cfg.toy.n_layers).collect();
        if !below.is_empty() {
            cfg.intervention.layers = below;
        }
    }
    if let Some(alpha) = c.alpha {
        cfg.intervention.alpha = alpha;
    }
    if let Some(sel) = &c.selector {
        cfg.intervention.selector = sel.clone();
    }
    cfg.emit_intervention_requests |= c.emit_intervention_requests;
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

/// SHA-256 over the corpus index and every stored trace file, in index order.
fn corpus_digest(out: &Path, index: &pipeline::CorpusIndex) -> Result<String, StidError> {
    let mut h = Sha256::new();
    let read = |p: &Path| fs::read(p).map_err(|e| StidError::Io { path: p.to_path_buf(), source: e });
    h.update(read(&out.join(pipeline::CORPUS_INDEX))?);
    for e in &index.entries {
        let dir = out.join(&e.path);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|err| StidError::Io { path: dir.clone(), source: err })?
            .map(|f| f.map(|f| f.path()))
            .collect::<Result<_, _>>()
            .map_err(|err| StidError::Io { path: dir.clone(), source: err })?;
        files.sort();
        for f in files {
            h.update(read(&f)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn corpus(out: &Path, stage: Stage) -> Result<pipeline::Corpus, Failure> {
    pipeline::load_corpus(out).map_err(|source| Failure::Stage(StageError { stage, source }))
}

fn run_one(cfg: &RunConfig, args: &RunArgs) -> Result<(), Failure> {
    let weights = init_model(&cfg.toy).map_err(invalid)?;
    let stage_err = |source| Failure::Stage(StageError { stage: Stage::Run, source });
    if let Some(scene) = &args.scene {
        let text = fs::read_to_string(scene).map_err(|e| invalid(format!("{}: {e}", scene.display())))?;
        let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", scene.display())))?;
        spec.validate(&weights).map_err(invalid)?;
        let t = weights.trace(&spec).map_err(stage_err)?;
        let dir = args.trace_out.clone().unwrap_or_else(|| PathBuf::from("trace"));
        trace::save_trace(&t, &dir).map_err(stage_err)?;
        println!("{}", serde_json::to_string(&t.readout).map_err(invalid)?);
        return Ok(());
    }
    let path = args.request.as_ref().expect("clap enforces --scene or --request");
    let req = trace::read_intervention_request(path).map_err(invalid)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let x = trace::load_trace(&base.join(&req.trace)).map_err(invalid)?;
    if x.model_id != weights.model_id() {
        return Err(invalid(format!(
            "trace was produced by `{}`, configuration builds `{}`",
            x.model_id,
            weights.model_id()
        )));
    }
    req.spec.validate(weights.num_layers(), x.seq_len, x.dim).map_err(invalid)?;
    let edited = req.spec.apply(x.layer(req.spec.layer).map_err(invalid)?).map_err(invalid)?;
    let readout = weights.resume(req.spec.layer, &edited).map_err(stage_err)?;
    match &args.readout_out {
        Some(p) => trace::write_readout(&readout, p).map_err(stage_err)?,
        None => println!("{}", serde_json::to_string_pretty(&readout).map_err(invalid)?),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(invalid("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(invalid)?;
    }
    let out = &cli.common.out;
    match &cli.command {
        Command::Gen => {
            let index = pipeline::gen(&cfg, out)?;
            let digest = corpus_digest(out, &index).map_err(|source| StageError { stage: Stage::Gen, source })?;
            println!("traces {}", index.entries.len());
            println!("sweep_traces {}", index.count(pipeline::EntryKind::Sweep));
            println!("digest {digest}");
        }
        Command::Run(args) => run_one(&cfg, args)?,
        Command::ExtractIds => {
            let s = pipeline::extract(&cfg, out, &corpus(out, Stage::Extract)?)?;
            println!("layers {:?} degenerate {:?}", s.layers, s.degenerate_layers);
        }
        Command::Axes => {
            for r in pipeline::axes(&cfg, out)?.rows {
                println!("layer {} variance_explained {:.4} quality {:?}", r.layer, r.variance_explained, r.quality);
            }
        }
        Command::Swap => {
            let s = pipeline::swap(&cfg, out, &corpus(out, Stage::Swap)?)?;
            for r in s.by_layer {
                println!("layer {} mean_belief_shift {:.4}", r.layer, r.mean_belief_shift);
            }
        }
        Command::Steer => {
            let s = pipeline::steer(&cfg, out, &corpus(out, Stage::Steer)?)?;
            for r in s.by_layer {
                println!("layer {} id {:.3} noise {:.3}", r.layer, r.id_swap_rate, r.noise_swap_rate);
            }
        }
        Command::Diagnose => {
            let s = pipeline::diagnose(&cfg, out, &corpus(out, Stage::Diagnose)?)?;
            println!("{}", serde_json::to_string_pretty(&s).map_err(invalid)?);
        }
        Command::FitPosenc => {
            for r in pipeline::fit(&cfg, out)?.fits {
                println!("layer {} rank {} r2 {:.6}", r.layer, r.rank, r.r_squared);
            }
        }
        Command::Report | Command::Pipeline => {
            let s = if matches!(cli.command, Command::Pipeline) {
                pipeline::run_pipeline(&cfg, out)?
            } else {
                pipeline::report(&cfg, out)?
            };
            for c in &s.checks {
                let v = c.value.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("{} {} = {v} ({} {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.relation, c.threshold);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
