//! Trial loop for channel-size search.
//!
//! Each trial scores every endpoint, folds the scores of each searchable
//! group into its momentum `m`, turns the change `dm` into a clipped scale
//! factor, and resizes the group. Weights are then carried over to the new
//! shapes and trained. Simulated annealing adds a random kick to `dm` while
//! the temperature is high.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::WeightMap;
use crate::dependency::{DependencyList, GroupRef};
use crate::distill::transfer_all;
use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, ComputationGraph};
use crate::init::init_weights;
use crate::metric::{check_threshold, cumulative_metric, endpoint_metrics, group_momentum, GroupMetricState};
use crate::plan::ChannelPlan;
use crate::trainer::{shapes_of, validate_response, TrainRequest, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Greedy,
    Sa,
    Random,
    Compound,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Algorithm::Greedy),
            "sa" => Ok(Algorithm::Sa),
            "random" => Ok(Algorithm::Random),
            "compound" => Ok(Algorithm::Compound),
            other => Err(Error::invalid(format!(
                "unknown algorithm `{other}` (expected greedy, sa, random or compound)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Resize every group, then train once.
    PerTrial,
    /// Resize and train after each group in turn.
    PerGroup,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_trial" | "per-trial" => Ok(Granularity::PerTrial),
            "per_group" | "per-group" => Ok(Granularity::PerGroup),
            other => Err(Error::invalid(format!("unknown training granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub trials: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub clip: [f64; 2],
    pub init_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub train_granularity: Granularity,
    pub min_channel: usize,
    /// Multiplier for the compound baseline.
    pub width_mult: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Greedy,
            trials: 35,
            epochs: 2,
            gamma: 0.5,
            alpha: 5.0,
            clip: [0.5, 2.0],
            init_size: 16,
            tau: 0.01,
            seed: 0,
            train_granularity: Granularity::PerTrial,
            min_channel: 1,
            width_mult: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::invalid("at least one trial is required"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        let [lo, hi] = self.clip;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0 && hi <= 2.0) {
            return Err(Error::invalid(format!(
                "clip bounds must satisfy 0 < lo < 1 < hi <= 2, got [{lo}, {hi}]"
            )));
        }
        if self.init_size < 1 || self.min_channel < 1 {
            return Err(Error::invalid("init size and min channel must be at least 1"));
        }
        if self.init_size < self.min_channel {
            return Err(Error::invalid("init size is below the minimum channel count"));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::invalid(format!("width multiplier must be positive, got {}", self.width_mult)));
        }
        check_threshold(self.tau)
    }
}

/// `clamp(1 + dm, lo, hi)`.
pub fn scale_factor(delta_m: f64, clip: [f64; 2]) -> f64 {
    (1.0 + delta_m).max(clip[0]).min(clip[1])
}

/// `S * dS` rounded half up, never below `min_channel`.
pub fn apply_scale(size: usize, factor: f64, min_channel: usize) -> usize {
    let scaled = (size as f64 * factor + 0.5).floor();
    (scaled.max(0.0) as usize).max(min_channel)
}

pub fn temperature(trial: usize, trials: usize, alpha: f64) -> f64 {
    alpha * (trials as f64 - trial as f64) / trials as f64
}

/// Source of `x ~ U[0, 1)` for annealing kicks.
pub trait UniformSource {
    fn uniform(&mut self) -> f64;
}

#[derive(Debug, Clone)]
pub struct SeededUniform(ChaCha8Rng);

impl SeededUniform {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5a);
        Self(rng)
    }
}

impl UniformSource for SeededUniform {
    fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub zeta: f64,
    /// The draw, when one was made.
    pub draw: Option<f64>,
    pub accepted: bool,
}

/// Annealing acceptance. Only a positive `dm` at positive temperature draws
/// from `rng`; otherwise `zeta = 0`.
pub fn accept(delta_m: f64, temp: f64, alpha: f64, rng: &mut dyn UniformSource) -> Acceptance {
    if !(delta_m > 0.0 && temp > 0.0 && alpha > 0.0) {
        return Acceptance {
            zeta: 0.0,
            draw: None,
            accepted: false,
        };
    }
    let zeta = (-1.0 / (alpha * delta_m * temp)).exp();
    let x = rng.uniform();
    Acceptance {
        zeta,
        draw: Some(x),
        accepted: x < zeta,
    }
}

/// Each searchable group at `size * u`, `u ~ U[0.5, 2]`, rounded half up.
pub fn random_baseline(base: &ChannelPlan, deps: &DependencyList, min_channel: usize, rng: &mut dyn UniformSource) -> ChannelPlan {
    let mut plan = base.clone();
    for (i, _) in deps.searchable() {
        let u = 0.5 + 1.5 * rng.uniform();
        plan.sizes[i] = apply_scale(base.sizes[i], u, min_channel);
    }
    plan.recompute_derived(deps);
    plan
}

/// Every searchable group scaled by one multiplier.
pub fn compound_baseline(base: &ChannelPlan, deps: &DependencyList, width_mult: f64, min_channel: usize) -> ChannelPlan {
    let mut plan = base.clone();
    for (i, _) in deps.searchable() {
        plan.sizes[i] = apply_scale(base.sizes[i], width_mult, min_channel);
    }
    plan.recompute_derived(deps);
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointTrace {
    pub endpoint: ChannelEndpoint,
    pub qc: f64,
    pub effective_rank: usize,
    pub channel_size: usize,
    pub condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: GroupRef,
    pub size_before: usize,
    pub m_prev: f64,
    pub m_curr: f64,
    /// `m_curr - m_prev`, before any annealing kick.
    pub delta: f64,
    pub zeta: Option<f64>,
    pub draw: Option<f64>,
    pub accepted: Option<bool>,
    pub scale: f64,
    pub size_after: usize,
}

/// Everything recorded for one trial; also written as `metrics_trial_{t}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTrace {
    pub trial: usize,
    pub temperature: Option<f64>,
    /// Endpoint scores in dependency-list order.
    pub endpoints: Vec<EndpointTrace>,
    pub groups: Vec<GroupTrace>,
    pub cumulative: f64,
    /// Sizes after this trial's resize.
    pub plan: ChannelPlan,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub group: GroupRef,
    pub endpoints: Vec<ChannelEndpoint>,
    pub fixed: bool,
    pub sources: Vec<GroupRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub group: GroupRef,
    pub best_m: f64,
    pub best_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub algorithm: Algorithm,
    pub config: SearchConfig,
    pub groups: Vec<GroupInfo>,
    pub initial_plan: ChannelPlan,
    /// Each searchable group at the size where its momentum peaked. Sizes may
    /// come from different trials.
    pub best_plan: ChannelPlan,
    pub final_plan: ChannelPlan,
    pub best: Vec<BestEntry>,
    pub cumulative: Vec<f64>,
    pub trials: Vec<TrialTrace>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub result: SearchResult,
    pub final_weights: WeightMap,
}

fn group_infos(deps: &DependencyList) -> Vec<GroupInfo> {
    deps.all_refs()
        .map(|r| GroupInfo {
            group: r,
            endpoints: deps.endpoints(r).to_vec(),
            fixed: matches!(r, GroupRef::Group(i) if deps.groups[i].fixed),
            sources: match r {
                GroupRef::Derived(i) => deps.derived[i].sources.clone(),
                GroupRef::Group(_) => Vec::new(),
            },
        })
        .collect()
}

fn all_endpoints(deps: &DependencyList) -> Vec<ChannelEndpoint> {
    deps.all_refs().flat_map(|r| deps.endpoints(r).to_vec()).collect()
}

struct Engine<'a> {
    graph: &'a ComputationGraph,
    deps: &'a DependencyList,
    config: &'a SearchConfig,
    trainer: &'a mut dyn Trainer,
    rng: &'a mut dyn UniformSource,
    endpoints: Vec<ChannelEndpoint>,
    plan: ChannelPlan,
    weights: WeightMap,
    states: Vec<GroupMetricState>,
    last_stats: Option<(f64, f64)>,
}

impl Engine<'_> {
    fn score(&self, endpoints: &[ChannelEndpoint]) -> Result<Vec<EndpointTrace>> {
        let summaries = endpoint_metrics(&self.weights, endpoints, self.config.tau)?;
        Ok(endpoints
            .iter()
            .zip(summaries)
            .map(|(e, s)| EndpointTrace {
                endpoint: e.clone(),
                qc: s.qc,
                effective_rank: s.effective_rank,
                channel_size: s.channel_size,
                condition: s.condition,
            })
            .collect())
    }

    /// Distils the current weights onto the current plan and trains them.
    fn resize_and_train(&mut self, trial: usize) -> Result<()> {
        self.plan.recompute_derived(self.deps);
        let shapes = self.plan.layer_shapes(self.graph, self.deps)?;
        let moved = transfer_all(&self.weights, &shapes)?;
        let request = TrainRequest {
            trial,
            epochs: self.config.epochs,
            seed: self.config.seed,
            graph: self.graph,
            deps: self.deps,
            plan: &self.plan,
            weights: &moved,
        };
        let response = self.trainer.train(&request)?;
        validate_response(&shapes, &response, trial)?;
        self.weights = response.weights;
        self.last_stats = Some((response.train_loss, response.train_acc));
        Ok(())
    }

    /// Momentum, annealing kick and resize for searchable group `slot`.
    fn step_group(&mut self, slot: usize, qcs: &[f64], temp: Option<f64>) -> Result<GroupTrace> {
        let g = self.states[slot].group;
        let size = self.plan.sizes[g];
        let next = group_momentum(&self.states[slot], qcs, self.config.gamma, size)?;
        let mut dm = next.delta;
        let (mut zeta, mut draw, mut accepted) = (None, None, None);
        if let Some(temp) = temp {
            let a = accept(dm, temp, self.config.alpha, self.rng);
            if a.accepted {
                dm += a.zeta;
            }
            zeta = Some(a.zeta);
            draw = a.draw;
            accepted = Some(a.accepted);
        }
        let scale = scale_factor(dm, self.config.clip);
        let new_size = apply_scale(size, scale, self.config.min_channel);
        let trace = GroupTrace {
            group: GroupRef::Group(g),
            size_before: size,
            m_prev: next.m_prev,
            m_curr: next.m_curr,
            delta: next.delta,
            zeta,
            draw,
            accepted,
            scale,
            size_after: new_size,
        };
        self.states[slot] = next;
        self.plan.sizes[g] = new_size;
        Ok(trace)
    }

    fn trial(&mut self, t: usize) -> Result<TrialTrace> {
        let temp = (self.config.algorithm == Algorithm::Sa)
            .then(|| temperature(t, self.config.trials, self.config.alpha));
        let mut endpoints = self.score(&self.endpoints)?;
        let position: HashMap<ChannelEndpoint, usize> =
            self.endpoints.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let mut groups = Vec::with_capacity(self.states.len());
        for slot in 0..self.states.len() {
            let g = self.states[slot].group;
            let members = self.deps.groups[g].endpoints.clone();
            if self.config.train_granularity == Granularity::PerGroup && slot > 0 {
                // Weights changed since the trial started.
                for e in self.score(&members)? {
                    let i = position[&e.endpoint];
                    endpoints[i] = e;
                }
            }
            let qcs: Vec<f64> = members.iter().map(|e| endpoints[position[e]].qc).collect();
            groups.push(self.step_group(slot, &qcs, temp)?);
            if self.config.train_granularity == Granularity::PerGroup {
                self.resize_and_train(t)?;
            }
        }
        if self.config.train_granularity == Granularity::PerTrial || self.states.is_empty() {
            self.resize_and_train(t)?;
        }
        let qc_map: HashMap<ChannelEndpoint, f64> = endpoints.iter().map(|e| (e.endpoint.clone(), e.qc)).collect();
        let cumulative = cumulative_metric(self.deps, &qc_map)?;
        Ok(TrialTrace {
            trial: t,
            temperature: temp,
            endpoints,
            groups,
            cumulative,
            plan: self.plan.clone(),
            train_loss: self.last_stats.map(|s| s.0),
            train_acc: self.last_stats.map(|s| s.1),
        })
    }
}

/// Runs the configured search from `weights`.
///
/// For the baselines the plan is computed directly, fresh weights are drawn
/// at that plan and trained once; the single trace describes the result.
pub fn run_search(
    graph: &ComputationGraph,
    deps: &DependencyList,
    weights: WeightMap,
    config: &SearchConfig,
    trainer: &mut dyn Trainer,
    rng: &mut dyn UniformSource,
) -> Result<SearchOutcome> {
    config.validate()?;
    deps.check_partition(graph)?;
    let initial_plan = ChannelPlan::from_weights(&weights, deps)?;
    let mut engine = Engine {
        graph,
        deps,
        config,
        trainer,
        rng,
        endpoints: all_endpoints(deps),
        plan: initial_plan.clone(),
        weights,
        states: deps.searchable().map(|(i, _)| GroupMetricState::new(i)).collect(),
        last_stats: None,
    };
    let wrap = |trial: usize| move |e: Error| Error::Search {
        trial,
        source: Box::new(e),
    };

    let mut trials = Vec::new();
    match config.algorithm {
        Algorithm::Greedy | Algorithm::Sa => {
            for t in 1..=config.trials {
                let trace = engine.trial(t).map_err(wrap(t))?;
                tracing::info!(trial = t, cumulative = trace.cumulative, "trial finished");
                trials.push(trace);
            }
        }
        Algorithm::Random | Algorithm::Compound => {
            let plan = if config.algorithm == Algorithm::Random {
                random_baseline(&initial_plan, deps, config.min_channel, engine.rng)
            } else {
                compound_baseline(&initial_plan, deps, config.width_mult, config.min_channel)
            };
            let run = |engine: &mut Engine<'_>| -> Result<TrialTrace> {
                let shapes = plan.layer_shapes(graph, deps)?;
                engine.plan = plan.clone();
                engine.weights = init_weights(&shapes, config.seed)?;
                engine.states.clear();
                engine.resize_and_train(1)?;
                let endpoints = engine.score(&engine.endpoints)?;
                let qc_map: HashMap<ChannelEndpoint, f64> =
                    endpoints.iter().map(|e| (e.endpoint.clone(), e.qc)).collect();
                Ok(TrialTrace {
                    trial: 1,
                    temperature: None,
                    endpoints,
                    groups: Vec::new(),
                    cumulative: cumulative_metric(deps, &qc_map)?,
                    plan: plan.clone(),
                    train_loss: engine.last_stats.map(|s| s.0),
                    train_acc: engine.last_stats.map(|s| s.1),
                })
            };
            trials.push(run(&mut engine).map_err(wrap(1))?);
        }
    }

    let final_plan = engine.plan.clone();
    let mut best_plan = final_plan.clone();
    let mut best = Vec::new();
    for s in &engine.states {
        if let Some(size) = s.best_size {
            best_plan.sizes[s.group] = size;
            best.push(BestEntry {
                group: GroupRef::Group(s.group),
                best_m: s.best_m,
                best_size: size,
            });
        }
    }
    best_plan.recompute_derived(deps);
    let result = SearchResult {
        algorithm: config.algorithm,
        config: config.clone(),
        groups: group_infos(deps),
        initial_plan,
        best_plan,
        final_plan,
        best,
        cumulative: trials.iter().map(|t| t.cumulative).collect(),
        trials,
    };
    debug_assert_eq!(shapes_of(&engine.weights), result.final_plan.layer_shapes(graph, deps)?);
    Ok(SearchOutcome {
        result,
        final_weights: engine.weights,
    })
}
