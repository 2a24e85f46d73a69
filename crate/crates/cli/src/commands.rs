use std::path::Path;

use chansearch::container::read_weights;
use chansearch::dependency::extract_dependencies;
use chansearch::graph::{parse_graph, ChannelEndpoint};
use chansearch::metric::{check_threshold, endpoint_metrics, SpectralSummary};
use chansearch::plan::ChannelPlan;
use chansearch::search::SearchConfig;
use chansearch::visualize::export_visualizer;
use serde::Serialize;

use crate::error::{print_stdout, read_text, require_exists, write_text, CliError, CliResult};
use crate::run::{execute, RunManifest, TrainerSpec};
use crate::SearchArgs;

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => write_text(path, text),
        None => print_stdout(&format!("{text}\n")),
    }
}

pub fn extract_deps(graph: &Path, out: Option<&Path>, dot: Option<&Path>) -> CliResult<()> {
    require_exists(graph, "graph file")?;
    let g = parse_graph(&read_text(graph)?)?;
    let deps = extract_dependencies(&g)?;
    if let Some(dot) = dot {
        let plan = ChannelPlan::from_graph(&g, &deps)?;
        write_text(dot, &export_visualizer(&g, &deps, &plan)?.dot)?;
    }
    emit(out, &deps.to_json()?)
}

#[derive(Serialize)]
struct EndpointMetric {
    endpoint: ChannelEndpoint,
    group: String,
    #[serde(flatten)]
    summary: SpectralSummary,
}

#[derive(Serialize)]
struct MetricReport {
    tau: f64,
    endpoints: Vec<EndpointMetric>,
}

pub fn metric(graph: &Path, weights: &Path, tau: f64, out: Option<&Path>) -> CliResult<()> {
    check_threshold(tau).map_err(|e| CliError::usage(e.to_string()))?;
    require_exists(graph, "graph file")?;
    require_exists(weights, "weights directory")?;
    let g = parse_graph(&read_text(graph)?)?;
    let deps = extract_dependencies(&g)?;
    let w = read_weights(weights)?;
    let refs: Vec<_> = deps.all_refs().collect();
    let endpoints: Vec<ChannelEndpoint> = refs.iter().flat_map(|&r| deps.endpoints(r).to_vec()).collect();
    let summaries = endpoint_metrics(&w, &endpoints, tau)?;
    let groups = refs.iter().flat_map(|&r| deps.endpoints(r).iter().map(move |_| r.to_string()));
    let report = MetricReport {
        tau,
        endpoints: endpoints
            .into_iter()
            .zip(groups)
            .zip(summaries)
            .map(|((endpoint, group), summary)| EndpointMetric { endpoint, group, summary })
            .collect(),
    };
    emit(out, &serde_json::to_string_pretty(&report)?)
}

/// Built-in defaults, then the config file, then flags.
pub fn resolve_config(args: &SearchArgs) -> CliResult<SearchConfig> {
    let mut c = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::usage(format!("bad config file {}: {e}", path.display())))?,
        None => SearchConfig::default(),
    };
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = args.$field {
                c.$field = v;
            }
        };
    }
    flag!(algorithm);
    flag!(gamma);
    flag!(alpha);
    flag!(trials);
    flag!(epochs);
    flag!(seed);
    flag!(init_size);
    flag!(width_mult);
    flag!(tau);
    flag!(min_channel);
    if let Some(g) = args.granularity {
        c.train_granularity = g;
    }
    c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(c)
}

pub fn search(args: &SearchArgs) -> CliResult<()> {
    require_exists(&args.graph, "graph file")?;
    if let Some(w) = &args.weights {
        require_exists(w, "weights directory")?;
    }
    if let Some(c) = &args.config {
        require_exists(c, "config file")?;
    }
    if let TrainerSpec::Mock { surface } = &args.trainer {
        require_exists(surface, "surface file")?;
    }
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        return Err(CliError::usage("timeout must be a positive number of seconds"));
    }
    let config = resolve_config(args)?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        graph: args.graph.clone(),
        weights: args.weights.clone(),
        config_file: args.config.clone(),
        trainer: args.trainer.clone(),
        timeout_secs: args.timeout,
        seed: config.seed,
        config,
        outputs: Vec::new(),
        started_unix_ms: 0,
        finished_unix_ms: 0,
    };
    let done = execute(manifest, &args.out)?;
    eprintln!("wrote {} ({} files)", args.out.display(), done.outputs.len());
    Ok(())
}

pub fn replay(manifest: &Path, out: &Path) -> CliResult<()> {
    require_exists(manifest, "manifest")?;
    let m: RunManifest = serde_json::from_str(&read_text(manifest)?)
        .map_err(|e| CliError::usage(format!("bad manifest {}: {e}", manifest.display())))?;
    m.config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    require_exists(&m.graph, "graph file")?;
    execute(m, out)?;
    Ok(())
}
