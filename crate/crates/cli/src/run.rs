//! Run directories: settings, manifest and the files a search leaves behind.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chansearch::container::{read_weights, write_weights, WeightMap};
use chansearch::dependency::extract_dependencies;
use chansearch::graph::parse_graph;
use chansearch::init::init_weights;
use chansearch::plan::ChannelPlan;
use chansearch::search::{run_search, BestEntry, SearchConfig, SearchResult, SeededUniform};
use chansearch::tensor::Shape;
use chansearch::trainer::{ExternalTrainer, MockTrainer, ResponseSurface, ToyTrainer, Trainer};
use chansearch::visualize::export_visualizer;
use serde::{Deserialize, Serialize};

use crate::error::{read_text, write_text, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "search_result.json";
pub const BEST_PLAN_FILE: &str = "best_plan.json";
pub const DEPS_FILE: &str = "deps.json";
pub const TRACES_DIR: &str = "traces";
pub const FINAL_WEIGHTS_DIR: &str = "final_weights";

pub fn trace_file(trial: usize) -> String {
    format!("metrics_trial_{trial}.json")
}

/// `toy`, `external:DIR` or `mock:FILE`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    Toy,
    External { dir: PathBuf },
    Mock { surface: PathBuf },
}

impl FromStr for TrainerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "toy" => Ok(TrainerSpec::Toy),
            Some(("external", dir)) if !dir.is_empty() => Ok(TrainerSpec::External { dir: dir.into() }),
            Some(("mock", file)) if !file.is_empty() => Ok(TrainerSpec::Mock { surface: file.into() }),
            _ => Err(format!("expected `toy`, `external:DIR` or `mock:FILE`, got `{s}`")),
        }
    }
}

impl fmt::Display for TrainerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerSpec::Toy => write!(f, "toy"),
            TrainerSpec::External { dir } => write!(f, "external:{}", dir.display()),
            TrainerSpec::Mock { surface } => write!(f, "mock:{}", surface.display()),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub graph: PathBuf,
    pub weights: Option<PathBuf>,
    pub config_file: Option<PathBuf>,
    pub trainer: TrainerSpec,
    pub timeout_secs: f64,
    pub seed: u64,
    pub config: SearchConfig,
    pub outputs: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPlanFile {
    pub plan: ChannelPlan,
    pub best: Vec<BestEntry>,
    pub layer_shapes: BTreeMap<String, Shape>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn make_trainer(spec: &TrainerSpec, timeout: f64) -> CliResult<Box<dyn Trainer>> {
    Ok(match spec {
        TrainerSpec::Toy => Box::new(ToyTrainer),
        TrainerSpec::External { dir } => Box::new(ExternalTrainer::new(dir, Duration::from_secs_f64(timeout))),
        TrainerSpec::Mock { surface } => {
            let text = read_text(surface)?;
            let surface = ResponseSurface::from_json(&text)
                .map_err(|e| CliError::usage(format!("bad surface file {}: {e}", surface.display())))?;
            Box::new(MockTrainer::new(surface))
        }
    })
}

fn prepare_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out)
            .map_err(|e| CliError::runtime(format!("cannot list {}: {e}", out.display())))?;
        if entries.next().is_some() {
            return Err(CliError::runtime(format!("run directory {} is not empty", out.display())));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))
}

fn check_layers(graph: &chansearch::graph::ComputationGraph, weights: &WeightMap) -> CliResult<()> {
    for node in graph.weighted_layers() {
        let t = weights
            .get(&node.id)
            .ok_or_else(|| CliError::runtime(format!("weights have no tensor for layer `{}`", node.id)))?;
        let expected = node.weight_shape.expect("weighted layers have shapes");
        let got = t.shape();
        if got[0] != expected[0] || got[1] != expected[1] {
            return Err(CliError::runtime(format!(
                "layer `{}` has kernel {}x{} in the weights but {}x{} in the graph",
                node.id, got[0], got[1], expected[0], expected[1]
            )));
        }
    }
    if let Some(extra) = weights.keys().find(|k| graph.node(k).map(|n| !n.kind.is_weighted()).unwrap_or(true)) {
        return Err(CliError::runtime(format!("weights hold `{extra}`, which is not a weighted layer")));
    }
    Ok(())
}

/// Runs a search as described by `manifest` (outputs and timestamps are
/// filled in) and writes the run directory `out`.
pub fn execute(mut manifest: RunManifest, out: &Path) -> CliResult<RunManifest> {
    manifest.started_unix_ms = now_ms();
    let config = &manifest.config;
    let graph = parse_graph(&read_text(&manifest.graph)?)?;
    let deps = extract_dependencies(&graph)?;
    let weights = match &manifest.weights {
        Some(dir) => read_weights(dir)?,
        None => {
            let plan = ChannelPlan::uniform(&graph, &deps, config.init_size)?;
            init_weights(&plan.layer_shapes(&graph, &deps)?, config.seed)?
        }
    };
    check_layers(&graph, &weights)?;
    let mut trainer = make_trainer(&manifest.trainer, manifest.timeout_secs)?;
    prepare_out_dir(out)?;

    tracing::info!(
        algorithm = ?config.algorithm,
        trials = config.trials,
        groups = deps.searchable_count(),
        "starting search"
    );
    let mut rng = SeededUniform::new(config.seed);
    let outcome = run_search(&graph, &deps, weights, config, trainer.as_mut(), &mut rng)?;
    let result = &outcome.result;

    let mut outputs = Vec::new();
    let mut emit = |name: String, text: String| -> CliResult<()> {
        write_text(&out.join(&name), &text)?;
        outputs.push(name);
        Ok(())
    };
    emit(DEPS_FILE.into(), deps.to_json()?)?;
    emit(RESULT_FILE.into(), serde_json::to_string_pretty(result)?)?;
    for t in &result.trials {
        emit(format!("{TRACES_DIR}/{}", trace_file(t.trial)), serde_json::to_string_pretty(t)?)?;
    }
    let best = BestPlanFile {
        plan: result.best_plan.clone(),
        best: result.best.clone(),
        layer_shapes: result.best_plan.layer_shapes(&graph, &deps)?,
    };
    emit(BEST_PLAN_FILE.into(), serde_json::to_string_pretty(&best)?)?;
    emit("best_plan.dot".into(), export_visualizer(&graph, &deps, &result.best_plan)?.dot)?;
    write_weights(&outcome.final_weights, &out.join(FINAL_WEIGHTS_DIR))?;
    outputs.push(format!("{FINAL_WEIGHTS_DIR}/"));

    manifest.outputs = outputs;
    manifest.finished_unix_ms = now_ms();
    write_text(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_result(run_dir: &Path) -> CliResult<SearchResult> {
    let path = run_dir.join(RESULT_FILE);
    if !path.exists() {
        return Err(CliError::runtime(format!("{} is not a run directory (no {RESULT_FILE})", run_dir.display())));
    }
    Ok(serde_json::from_str(&read_text(&path)?)?)
}
