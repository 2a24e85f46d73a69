//! Channel sizes assigned to dependency groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::container::WeightMap;
use crate::dependency::{DependencyList, GroupRef};
use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, ComputationGraph, Side};
use crate::tensor::Shape;

/// One size per plain group and one per derived group, indexed like the
/// [`DependencyList`] it was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub sizes: Vec<usize>,
    pub derived: Vec<usize>,
}

impl ChannelPlan {
    /// Reads the sizes implied by the weight shapes declared in the graph.
    pub fn from_graph(graph: &ComputationGraph, deps: &DependencyList) -> Result<Self> {
        let shapes: BTreeMap<String, Shape> = graph
            .weighted_layers()
            .map(|n| (n.id.clone(), n.weight_shape.expect("weighted node has a shape")))
            .collect();
        Self::from_shapes(&shapes, deps)
    }

    pub fn from_weights(weights: &WeightMap, deps: &DependencyList) -> Result<Self> {
        let shapes: BTreeMap<String, Shape> = weights.iter().map(|(k, t)| (k.clone(), t.shape())).collect();
        Self::from_shapes(&shapes, deps)
    }

    pub fn from_shapes(shapes: &BTreeMap<String, Shape>, deps: &DependencyList) -> Result<Self> {
        let size_of = |e: &ChannelEndpoint| -> Result<usize> {
            let shape = shapes
                .get(&e.layer_id)
                .ok_or_else(|| Error::Dependency(format!("no shape for layer `{}`", e.layer_id)))?;
            Ok(match e.side {
                Side::In => shape[2],
                Side::Out => shape[3],
            })
        };
        let agree = |r: GroupRef| -> Result<usize> {
            let eps = deps.endpoints(r);
            let first = size_of(&eps[0])?;
            for e in &eps[1..] {
                let s = size_of(e)?;
                if s != first {
                    return Err(Error::Dependency(format!(
                        "group {r}: `{}` has {first} channels but `{e}` has {s}",
                        eps[0]
                    )));
                }
            }
            Ok(first)
        };
        let sizes = (0..deps.groups.len())
            .map(|i| agree(GroupRef::Group(i)))
            .collect::<Result<Vec<_>>>()?;
        let derived = (0..deps.derived.len())
            .map(|i| agree(GroupRef::Derived(i)))
            .collect::<Result<Vec<_>>>()?;
        let plan = Self { sizes, derived };
        let mut expected = plan.clone();
        expected.recompute_derived(deps);
        if let Some(i) = (0..plan.derived.len()).find(|&i| plan.derived[i] != expected.derived[i]) {
            return Err(Error::Dependency(format!(
                "derived group d{i} has {} channels but its sources sum to {}",
                plan.derived[i], expected.derived[i]
            )));
        }
        Ok(plan)
    }

    /// Every searchable group set to `size`; fixed groups keep the graph's sizes.
    pub fn uniform(graph: &ComputationGraph, deps: &DependencyList, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("channel size must be at least 1"));
        }
        let mut plan = Self::from_graph(graph, deps)?;
        for (i, _) in deps.searchable() {
            plan.sizes[i] = size;
        }
        plan.recompute_derived(deps);
        Ok(plan)
    }

    pub fn recompute_derived(&mut self, deps: &DependencyList) {
        self.derived.resize(deps.derived.len(), 0);
        for (i, d) in deps.derived.iter().enumerate() {
            self.derived[i] = d
                .sources
                .iter()
                .map(|s| match *s {
                    GroupRef::Group(g) => self.sizes[g],
                    GroupRef::Derived(k) => self.derived[k],
                })
                .sum();
        }
    }

    pub fn size(&self, r: GroupRef) -> usize {
        match r {
            GroupRef::Group(i) => self.sizes[i],
            GroupRef::Derived(i) => self.derived[i],
        }
    }

    /// Target weight shape of every weighted layer under this plan.
    pub fn layer_shapes(&self, graph: &ComputationGraph, deps: &DependencyList) -> Result<BTreeMap<String, Shape>> {
        let index = deps.group_index();
        let lookup = |e: ChannelEndpoint| {
            index
                .get(&e)
                .map(|&r| self.size(r))
                .ok_or_else(|| Error::Dependency(format!("endpoint `{e}` is not in any group")))
        };
        graph
            .weighted_layers()
            .map(|n| {
                let base = n.weight_shape.expect("weighted node has a shape");
                let cin = lookup(ChannelEndpoint::input(&n.id))?;
                let cout = lookup(ChannelEndpoint::output(&n.id))?;
                Ok((n.id.clone(), [base[0], base[1], cin, cout]))
            })
            .collect()
    }
}
