//! The architecture DAG: parsing, validation and traversal.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Conv,
    Fc,
    Add,
    Concat,
    Pool,
    Input,
    Output,
    #[serde(alias = "other-passthrough", alias = "passthrough")]
    Other,
}

impl NodeKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, NodeKind::Conv | NodeKind::Fc)
    }

    /// Nodes that forward their input channels unchanged.
    pub fn is_passthrough(self) -> bool {
        matches!(self, NodeKind::Pool | NodeKind::Other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_shape: Option<Shape>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, weight_shape: Option<Shape>) -> Self {
        Self {
            id: id.into(),
            kind,
            weight_shape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    In,
    Out,
}

impl Side {
    pub fn mode(self) -> Mode {
        match self {
            Side::In => Mode::In,
            Side::Out => Mode::Out,
        }
    }
}

/// One resizable channel dimension: the input or output side of a weighted layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelEndpoint {
    pub layer_id: String,
    pub side: Side,
}

impl ChannelEndpoint {
    pub fn new(layer_id: impl Into<String>, side: Side) -> Self {
        Self {
            layer_id: layer_id.into(),
            side,
        }
    }

    pub fn input(layer_id: impl Into<String>) -> Self {
        Self::new(layer_id, Side::In)
    }

    pub fn output(layer_id: impl Into<String>) -> Self {
        Self::new(layer_id, Side::Out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (id, side) = text
            .rsplit_once('.')
            .ok_or_else(|| Error::invalid(format!("endpoint `{text}` lacks a .in/.out suffix")))?;
        let side = match side {
            "in" => Side::In,
            "out" => Side::Out,
            other => return Err(Error::invalid(format!("unknown endpoint side `{other}`"))),
        };
        Ok(Self::new(id, side))
    }
}

impl fmt::Display for ChannelEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::In => "in",
            Side::Out => "out",
        };
        write!(f, "{}.{}", self.layer_id, side)
    }
}

impl Serialize for ChannelEndpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelEndpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ChannelEndpoint::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<LayerNode>,
    edges: Vec<(String, String)>,
}

/// A validated, immutable architecture graph.
#[derive(Debug, Clone)]
pub struct ComputationGraph {
    nodes: Vec<LayerNode>,
    edges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    topo: Vec<usize>,
    input: usize,
}

pub fn parse_graph(text: &str) -> Result<ComputationGraph> {
    let file: GraphFile =
        serde_json::from_str(text).map_err(|e| Error::Graph(format!("malformed graph json: {e}")))?;
    ComputationGraph::new(file.nodes, file.edges)
}

impl ComputationGraph {
    pub fn new(nodes: Vec<LayerNode>, edges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
            match (n.kind.is_weighted(), n.weight_shape) {
                (true, None) => {
                    return Err(Error::Graph(format!("{:?} node `{}` is missing weight_shape", n.kind, n.id)))
                }
                (false, Some(_)) => {
                    return Err(Error::Graph(format!(
                        "{:?} node `{}` must not carry a weight_shape",
                        n.kind, n.id
                    )))
                }
                (true, Some(shape)) => {
                    if shape.iter().any(|&d| d == 0) {
                        return Err(Error::Graph(format!("node `{}` has a zero dimension in {shape:?}", n.id)));
                    }
                    if n.kind == NodeKind::Fc && (shape[0] != 1 || shape[1] != 1) {
                        return Err(Error::Graph(format!(
                            "fc node `{}` must have a 1x1 kernel, got {shape:?}",
                            n.id
                        )));
                    }
                }
                (false, None) => {}
            }
        }

        let mut succ = vec![Vec::new(); nodes.len()];
        let mut pred = vec![Vec::new(); nodes.len()];
        let mut seen = HashSet::new();
        for (src, dst) in &edges {
            let s = *index
                .get(src)
                .ok_or_else(|| Error::Graph(format!("edge refers to unknown node `{src}`")))?;
            let d = *index
                .get(dst)
                .ok_or_else(|| Error::Graph(format!("edge refers to unknown node `{dst}`")))?;
            if !seen.insert((s, d)) {
                return Err(Error::Graph(format!("duplicate edge `{src}` -> `{dst}`")));
            }
            succ[s].push(d);
            pred[d].push(s);
        }

        let inputs: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].kind == NodeKind::Input).collect();
        let input = match inputs.as_slice() {
            [one] => *one,
            [] => return Err(Error::Graph("graph has no input node".into())),
            _ => return Err(Error::Graph(format!("graph has {} input nodes, expected one", inputs.len()))),
        };
        if !pred[input].is_empty() {
            return Err(Error::Graph(format!("input node `{}` has incoming edges", nodes[input].id)));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.kind == NodeKind::Output && !succ[i].is_empty() {
                return Err(Error::Graph(format!("output node `{}` has outgoing edges", n.id)));
            }
            if i != input && pred[i].is_empty() {
                return Err(Error::Graph(format!("node `{}` has no inputs", n.id)));
            }
        }

        let topo = topological_order(&succ, &pred)
            .ok_or_else(|| Error::Graph("graph contains a cycle".into()))?;

        let mut reached = vec![false; nodes.len()];
        let mut stack = vec![input];
        reached[input] = true;
        while let Some(n) = stack.pop() {
            for &s in &succ[n] {
                if !reached[s] {
                    reached[s] = true;
                    stack.push(s);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(Error::Graph(format!("node `{}` is unreachable from the input", nodes[i].id)));
        }

        Ok(Self {
            nodes,
            edges,
            index,
            succ,
            pred,
            topo,
            input,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown node id `{id}`")))
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn node_at(&self, idx: usize) -> &LayerNode {
        &self.nodes[idx]
    }

    pub fn input_index(&self) -> usize {
        self.input
    }

    /// Successors in edge insertion order.
    pub fn successors(&self, id: &str) -> Result<Vec<&LayerNode>> {
        let i = self.index_of(id)?;
        Ok(self.succ[i].iter().map(|&s| &self.nodes[s]).collect())
    }

    pub fn predecessors(&self, id: &str) -> Result<Vec<&LayerNode>> {
        let i = self.index_of(id)?;
        Ok(self.pred[i].iter().map(|&s| &self.nodes[s]).collect())
    }

    pub fn succ_indices(&self, idx: usize) -> &[usize] {
        &self.succ[idx]
    }

    pub fn pred_indices(&self, idx: usize) -> &[usize] {
        &self.pred[idx]
    }

    /// Topological order; ties are broken by declaration order.
    pub fn topo_order(&self) -> Vec<&str> {
        self.topo.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub fn topo_indices(&self) -> &[usize] {
        &self.topo
    }

    /// Weighted layers in topological order.
    pub fn weighted_layers(&self) -> impl Iterator<Item = &LayerNode> {
        self.topo.iter().map(|&i| &self.nodes[i]).filter(|n| n.kind.is_weighted())
    }

    /// Both endpoints of every weighted layer, in topological order.
    pub fn endpoints(&self) -> Vec<ChannelEndpoint> {
        self.weighted_layers()
            .flat_map(|n| [ChannelEndpoint::input(&n.id), ChannelEndpoint::output(&n.id)])
            .collect()
    }
}

fn topological_order(succ: &[Vec<usize>], pred: &[Vec<usize>]) -> Option<Vec<usize>> {
    let mut indeg: Vec<usize> = pred.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..succ.len()).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(succ.len());
    while let Some(Reverse(n)) = ready.pop() {
        order.push(n);
        for &s in &succ[n] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    (order.len() == succ.len()).then_some(order)
}
