//! The "train for e epochs" step of a search trial.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::container::WeightMap;
use crate::dependency::DependencyList;
use crate::error::{Error, Result};
use crate::graph::ComputationGraph;
use crate::plan::ChannelPlan;
use crate::tensor::Shape;

pub mod external;
pub mod mock;
pub mod toy;

pub use external::ExternalTrainer;
pub use mock::{MockTrainer, ResponseSurface};
pub use toy::ToyTrainer;

/// Everything a trainer gets for one trial.
#[derive(Debug, Clone, Copy)]
pub struct TrainRequest<'a> {
    pub trial: usize,
    pub epochs: usize,
    pub seed: u64,
    pub graph: &'a ComputationGraph,
    pub deps: &'a DependencyList,
    pub plan: &'a ChannelPlan,
    pub weights: &'a WeightMap,
}

#[derive(Debug, Clone)]
pub struct TrainResponse {
    pub trial: usize,
    pub weights: WeightMap,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// Summary of a response, as written to traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub train_loss: f64,
    pub train_acc: f64,
}

pub trait Trainer {
    fn name(&self) -> &str;

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainResponse>;
}

/// Checks that a trainer returned exactly the layers and shapes it was given.
pub fn validate_response(expected: &BTreeMap<String, Shape>, response: &TrainResponse, trial: usize) -> Result<()> {
    let fail = |message: String| Error::Trainer { trial, message };
    if response.trial != trial {
        return Err(fail(format!("response is for trial {}", response.trial)));
    }
    for (id, shape) in expected {
        match response.weights.get(id) {
            None => return Err(fail(format!("layer `{id}` missing from trained weights"))),
            Some(t) if t.shape() != *shape => {
                return Err(fail(format!(
                    "layer `{id}` came back with shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = response.weights.keys().find(|k| !expected.contains_key(*k)) {
        return Err(fail(format!("unexpected layer `{extra}` in trained weights")));
    }
    if !response.train_loss.is_finite() {
        return Err(fail("train loss is not finite".into()));
    }
    if !(0.0..=1.0).contains(&response.train_acc) {
        return Err(fail(format!("train accuracy {} outside [0, 1]", response.train_acc)));
    }
    Ok(())
}

pub(crate) fn shapes_of(weights: &WeightMap) -> BTreeMap<String, Shape> {
    weights.iter().map(|(k, t)| (k.clone(), t.shape())).collect()
}
