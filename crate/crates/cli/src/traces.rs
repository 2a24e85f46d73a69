//! CSV exports of a run directory.

use std::collections::HashMap;
use std::path::Path;

use chansearch::dependency::GroupRef;
use chansearch::search::{GroupTrace, SearchResult, TrialTrace};

use crate::error::{print_stdout, read_text, require_exists, write_text, CliError, CliResult};
use crate::run::{load_result, trace_file, TRACES_DIR};
use crate::TraceKind;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-trial traces from `traces/`, in trial order.
fn load_traces(run_dir: &Path, result: &SearchResult) -> CliResult<Vec<TrialTrace>> {
    result
        .trials
        .iter()
        .map(|t| {
            let path = run_dir.join(TRACES_DIR).join(trace_file(t.trial));
            Ok(serde_json::from_str(&read_text(&path)?)?)
        })
        .collect()
}

fn metric_evolution(run_dir: &Path, result: &SearchResult) -> CliResult<csv::Writer<Vec<u8>>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "group", "endpoint", "qc", "effective_rank", "channel_size", "condition", "group_momentum"])?;
    let owner: HashMap<String, GroupRef> = result
        .groups
        .iter()
        .flat_map(|g| g.endpoints.iter().map(move |e| (e.to_string(), g.group)))
        .collect();
    for t in load_traces(run_dir, result)? {
        let momentum: HashMap<GroupRef, f64> = t.groups.iter().map(|g| (g.group, g.m_curr)).collect();
        for e in &t.endpoints {
            let name = e.endpoint.to_string();
            let group = owner
                .get(&name)
                .ok_or_else(|| CliError::runtime(format!("trace endpoint `{name}` is in no group")))?;
            w.write_record([
                t.trial.to_string(),
                group.to_string(),
                name,
                e.qc.to_string(),
                e.effective_rank.to_string(),
                e.channel_size.to_string(),
                opt(e.condition),
                opt(momentum.get(group)),
            ])?;
        }
    }
    Ok(w)
}

fn cumulative(result: &SearchResult) -> CliResult<csv::Writer<Vec<u8>>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "cumulative"])?;
    for t in &result.trials {
        w.write_record([t.trial.to_string(), t.cumulative.to_string()])?;
    }
    Ok(w)
}

/// Sizes of every group before the first trial (trial 0) and after each
/// trial, with the step that produced them.
fn channel_evolution(result: &SearchResult) -> CliResult<csv::Writer<Vec<u8>>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial", "group", "size", "m", "delta", "temperature", "zeta", "draw", "accepted", "scale",
    ])?;
    for g in &result.groups {
        w.write_record([
            "0".to_string(),
            g.group.to_string(),
            result.initial_plan.size(g.group).to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    for t in &result.trials {
        let steps: HashMap<GroupRef, &GroupTrace> = t.groups.iter().map(|g| (g.group, g)).collect();
        for g in &result.groups {
            let step = steps.get(&g.group);
            w.write_record([
                t.trial.to_string(),
                g.group.to_string(),
                t.plan.size(g.group).to_string(),
                opt(step.map(|s| s.m_curr)),
                opt(step.map(|s| s.delta)),
                opt(t.temperature),
                opt(step.and_then(|s| s.zeta)),
                opt(step.and_then(|s| s.draw)),
                opt(step.and_then(|s| s.accepted)),
                opt(step.map(|s| s.scale)),
            ])?;
        }
    }
    Ok(w)
}

pub fn export(run_dir: &Path, what: TraceKind, out: Option<&Path>) -> CliResult<()> {
    require_exists(run_dir, "run directory")?;
    let result = load_result(run_dir)?;
    let writer = match what {
        TraceKind::MetricEvolution => metric_evolution(run_dir, &result)?,
        TraceKind::Cumulative => cumulative(&result)?,
        TraceKind::ChannelEvolution => channel_evolution(&result)?,
    };
    let bytes = writer
        .into_inner()
        .map_err(|e| CliError::runtime(format!("csv: {}", e.error())))?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::runtime(e.to_string()))?;
    match out {
        Some(path) => write_text(path, &text),
        None => print_stdout(&text),
    }
}
