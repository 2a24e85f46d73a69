//! Channel dependency extraction.
//!
//! Every weighted layer exposes two channel endpoints (its input and output
//! channel dimensions). Endpoints that must always carry the same channel
//! count are collected into one group:
//!
//! * a layer's output and the inputs of every weighted layer reached through
//!   pass-through nodes (pooling, activations, ...),
//! * everything flowing into and out of an element-wise `add`,
//! * anything wired to the network input or output, which makes the group
//!   fixed (image channels, class count).
//!
//! A `concat` node breaks the chain: its consumers form a *derived* group
//! whose size is the sum of the concatenated sources and is never searched.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, ComputationGraph, NodeKind, Side};

/// Reference to either a plain group or a derived group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupRef {
    Group(usize),
    Derived(usize),
}

impl std::fmt::Display for GroupRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupRef::Group(i) => write!(f, "g{i}"),
            GroupRef::Derived(i) => write!(f, "d{i}"),
        }
    }
}

impl GroupRef {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad group reference `{text}`"));
        let (kind, num) = text.split_at(1.min(text.len()));
        let n: usize = num.parse().map_err(|_| bad())?;
        match kind {
            "g" => Ok(GroupRef::Group(n)),
            "d" => Ok(GroupRef::Derived(n)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for GroupRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        GroupRef::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGroup {
    pub endpoints: Vec<ChannelEndpoint>,
    /// Tied to the network input or output; its size is never changed.
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedGroup {
    pub endpoints: Vec<ChannelEndpoint>,
    /// Concatenated sources, in concat input order. Sizes add up.
    pub sources: Vec<GroupRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyList {
    pub groups: Vec<DependencyGroup>,
    pub derived: Vec<DerivedGroup>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DepsFile {
    groups: Vec<Vec<ChannelEndpoint>>,
    derived: Vec<Vec<ChannelEndpoint>>,
    #[serde(default)]
    fixed: Vec<usize>,
    #[serde(default)]
    derived_sources: Vec<Vec<GroupRef>>,
}

impl DependencyList {
    pub fn searchable(&self) -> impl Iterator<Item = (usize, &DependencyGroup)> {
        self.groups.iter().enumerate().filter(|(_, g)| !g.fixed)
    }

    pub fn searchable_count(&self) -> usize {
        self.searchable().count()
    }

    pub fn endpoint_count(&self) -> usize {
        self.groups.iter().map(|g| g.endpoints.len()).sum::<usize>()
            + self.derived.iter().map(|g| g.endpoints.len()).sum::<usize>()
    }

    pub fn endpoints(&self, r: GroupRef) -> &[ChannelEndpoint] {
        match r {
            GroupRef::Group(i) => &self.groups[i].endpoints,
            GroupRef::Derived(i) => &self.derived[i].endpoints,
        }
    }

    /// All groups (plain first, then derived) with their references.
    pub fn all_refs(&self) -> impl Iterator<Item = GroupRef> + '_ {
        (0..self.groups.len())
            .map(GroupRef::Group)
            .chain((0..self.derived.len()).map(GroupRef::Derived))
    }

    pub fn group_index(&self) -> HashMap<ChannelEndpoint, GroupRef> {
        let mut map = HashMap::new();
        for r in self.all_refs() {
            for e in self.endpoints(r) {
                map.insert(e.clone(), r);
            }
        }
        map
    }

    pub fn group_of(&self, endpoint: &ChannelEndpoint) -> Option<GroupRef> {
        self.all_refs().find(|&r| self.endpoints(r).contains(endpoint))
    }

    /// Checks that every endpoint of every weighted layer appears exactly once.
    pub fn check_partition(&self, graph: &ComputationGraph) -> Result<()> {
        let mut counts: BTreeMap<ChannelEndpoint, usize> =
            graph.endpoints().into_iter().map(|e| (e, 0)).collect();
        for r in self.all_refs() {
            for e in self.endpoints(r) {
                match counts.get_mut(e) {
                    Some(c) => *c += 1,
                    None => return Err(Error::Dependency(format!("endpoint `{e}` is not in the graph"))),
                }
            }
        }
        for (e, c) in counts {
            if c != 1 {
                return Err(Error::Dependency(format!("endpoint `{e}` appears {c} times")));
            }
        }
        for (i, d) in self.derived.iter().enumerate() {
            for s in &d.sources {
                let ok = match *s {
                    GroupRef::Group(g) => g < self.groups.len(),
                    GroupRef::Derived(k) => k < i,
                };
                if !ok {
                    return Err(Error::Dependency(format!("derived group d{i} has bad source {s}")));
                }
            }
        }
        Ok(())
    }

    /// Sorts endpoints by topological position (input side first), groups by
    /// their earliest endpoint, and remaps derived sources accordingly.
    /// Derived groups are ordered so that every derived source precedes its
    /// consumer.
    pub fn canonicalize(&mut self, graph: &ComputationGraph) {
        let pos: HashMap<&str, usize> = graph
            .topo_order()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let key = |e: &ChannelEndpoint| (pos.get(e.layer_id.as_str()).copied().unwrap_or(usize::MAX), e.side);
        for g in &mut self.groups {
            g.endpoints.sort_by_key(|e| key(e));
        }
        for d in &mut self.derived {
            d.endpoints.sort_by_key(|e| key(e));
        }
        let first = |eps: &[ChannelEndpoint]| eps.first().map(key).unwrap_or((usize::MAX, Side::Out));

        let mut gorder: Vec<usize> = (0..self.groups.len()).collect();
        gorder.sort_by_key(|&i| first(&self.groups[i].endpoints));
        let mut gmap = vec![0; self.groups.len()];
        for (new, &old) in gorder.iter().enumerate() {
            gmap[old] = new;
        }
        // Smallest first endpoint among the derived groups whose derived
        // sources are already placed.
        let mut dorder: Vec<usize> = Vec::with_capacity(self.derived.len());
        let mut placed = vec![false; self.derived.len()];
        while dorder.len() < self.derived.len() {
            let next = (0..self.derived.len())
                .filter(|&i| !placed[i])
                .filter(|&i| {
                    self.derived[i].sources.iter().all(|s| match *s {
                        GroupRef::Derived(k) => placed[k],
                        GroupRef::Group(_) => true,
                    })
                })
                .min_by_key(|&i| first(&self.derived[i].endpoints));
            // A source cycle cannot come out of extraction; fall back to index order.
            let next = next.unwrap_or_else(|| placed.iter().position(|p| !p).unwrap());
            placed[next] = true;
            dorder.push(next);
        }
        let mut dmap = vec![0; self.derived.len()];
        for (new, &old) in dorder.iter().enumerate() {
            dmap[old] = new;
        }
        let remap = |r: GroupRef| match r {
            GroupRef::Group(i) => GroupRef::Group(gmap[i]),
            GroupRef::Derived(i) => GroupRef::Derived(dmap[i]),
        };
        let groups = gorder.iter().map(|&i| self.groups[i].clone()).collect();
        let derived = dorder
            .iter()
            .map(|&i| {
                let d = &self.derived[i];
                DerivedGroup {
                    endpoints: d.endpoints.clone(),
                    sources: d.sources.iter().copied().map(remap).collect(),
                }
            })
            .collect();
        self.groups = groups;
        self.derived = derived;
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DepsFile {
            groups: self.groups.iter().map(|g| g.endpoints.clone()).collect(),
            derived: self.derived.iter().map(|g| g.endpoints.clone()).collect(),
            fixed: self
                .groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.fixed)
                .map(|(i, _)| i)
                .collect(),
            derived_sources: self.derived.iter().map(|d| d.sources.clone()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DepsFile = serde_json::from_str(text)?;
        if file.derived_sources.len() != file.derived.len() {
            return Err(Error::Dependency("derived_sources must match derived groups".into()));
        }
        let groups = file
            .groups
            .into_iter()
            .enumerate()
            .map(|(i, endpoints)| DependencyGroup {
                endpoints,
                fixed: file.fixed.contains(&i),
            })
            .collect();
        let derived = file
            .derived
            .into_iter()
            .zip(file.derived_sources)
            .map(|(endpoints, sources)| DerivedGroup { endpoints, sources })
            .collect();
        Ok(Self { groups, derived })
    }
}

/// Items tracked while grouping: endpoints of weighted layers, and the output
/// signal of every non-weighted node (for an `output` node, the signal it
/// consumes).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Item {
    Endpoint(ChannelEndpoint),
    Signal(usize),
}

fn source_item(graph: &ComputationGraph, idx: usize) -> Item {
    let node = graph.node_at(idx);
    if node.kind.is_weighted() {
        Item::Endpoint(ChannelEndpoint::output(&node.id))
    } else {
        Item::Signal(idx)
    }
}

/// The item a node contributes when it consumes `src`'s signal, or `None`
/// for a concat (which starts a new signal instead of joining).
fn consumer_item(graph: &ComputationGraph, idx: usize) -> Option<Item> {
    let node = graph.node_at(idx);
    match node.kind {
        NodeKind::Conv | NodeKind::Fc => Some(Item::Endpoint(ChannelEndpoint::input(&node.id))),
        NodeKind::Concat => None,
        NodeKind::Input => unreachable!("input nodes have no predecessors"),
        NodeKind::Add | NodeKind::Pool | NodeKind::Other | NodeKind::Output => Some(Item::Signal(idx)),
    }
}

/// One equivalence class before it is turned into a group.
struct Class {
    items: Vec<Item>,
}

/// Builds a dependency list from equivalence classes and a lookup from item to
/// class id. Shared output step of both extraction routes.
fn build_list(
    graph: &ComputationGraph,
    classes: &[Class],
    class_of: &dyn Fn(&Item) -> usize,
) -> Result<DependencyList> {
    #[derive(Clone, Copy, PartialEq)]
    enum Role {
        Plain { fixed: bool },
        Derived { concat: usize },
    }
    let mut roles = Vec::with_capacity(classes.len());
    for (ci, class) in classes.iter().enumerate() {
        let mut concat = None;
        let mut fixed = false;
        for item in &class.items {
            if let Item::Signal(n) = item {
                match graph.node_at(*n).kind {
                    NodeKind::Concat => {
                        if concat.replace(*n).is_some() {
                            return Err(Error::Dependency(format!(
                                "class {ci} joins the outputs of several concat nodes"
                            )));
                        }
                    }
                    NodeKind::Input | NodeKind::Output => fixed = true,
                    _ => {}
                }
            }
        }
        roles.push(match concat {
            Some(c) => Role::Derived { concat: c },
            None => Role::Plain { fixed },
        });
    }

    let endpoints_of = |ci: usize| -> Vec<ChannelEndpoint> {
        classes[ci]
            .items
            .iter()
            .filter_map(|i| match i {
                Item::Endpoint(e) => Some(e.clone()),
                Item::Signal(_) => None,
            })
            .collect()
    };

    let mut list = DependencyList::default();
    let mut plain_ref: HashMap<usize, usize> = HashMap::new();
    for (ci, role) in roles.iter().enumerate() {
        if let Role::Plain { fixed } = *role {
            let endpoints = endpoints_of(ci);
            if !endpoints.is_empty() {
                plain_ref.insert(ci, list.groups.len());
                list.groups.push(DependencyGroup { endpoints, fixed });
            }
        }
    }

    // Derived classes in topological order of their concat node, so sources
    // are resolved before use. Empty derived classes are inlined.
    let mut derived_classes: Vec<(usize, usize)> = roles
        .iter()
        .enumerate()
        .filter_map(|(ci, r)| match r {
            Role::Derived { concat } => Some((*concat, ci)),
            _ => None,
        })
        .collect();
    let topo_pos: HashMap<usize, usize> =
        graph.topo_indices().iter().enumerate().map(|(p, &n)| (n, p)).collect();
    derived_classes.sort_by_key(|(c, _)| topo_pos[c]);

    let mut resolved: HashMap<usize, Vec<GroupRef>> = HashMap::new();
    let mut derived_ref: HashMap<usize, usize> = HashMap::new();
    for (concat, ci) in derived_classes {
        let mut sources = Vec::new();
        for &p in graph.pred_indices(concat) {
            let src = class_of(&source_item(graph, p));
            if let Some(&g) = plain_ref.get(&src) {
                sources.push(GroupRef::Group(g));
            } else if let Some(&d) = derived_ref.get(&src) {
                sources.push(GroupRef::Derived(d));
            } else if let Some(inner) = resolved.get(&src) {
                sources.extend(inner.iter().copied());
            } else if matches!(roles[src], Role::Derived { .. }) {
                return Err(Error::Dependency(format!(
                    "concat `{}` input from `{}` is tied to a concat output that depends on it",
                    graph.node_at(concat).id,
                    graph.node_at(p).id
                )));
            } else {
                return Err(Error::Dependency(format!(
                    "concat `{}` input from `{}` has no resizable producer",
                    graph.node_at(concat).id,
                    graph.node_at(p).id
                )));
            }
        }
        let endpoints = endpoints_of(ci);
        if endpoints.is_empty() {
            resolved.insert(ci, sources);
        } else {
            derived_ref.insert(ci, list.derived.len());
            list.derived.push(DerivedGroup { endpoints, sources });
        }
    }

    list.canonicalize(graph);
    list.check_partition(graph)?;
    Ok(list)
}

/// Single pass over the graph in topological order.
///
/// Each producer (a weighted layer, a concat, or the network input) opens a
/// working group with its output signal and walks forward through
/// non-weighted nodes, collecting consumer endpoints. Hitting an item that is
/// already assigned merges the working group into the existing group
/// (lowest index wins when several are hit).
pub fn extract_dependencies(graph: &ComputationGraph) -> Result<DependencyList> {
    let mut assigned: HashMap<Item, usize> = HashMap::new();
    let mut groups: Vec<Vec<Item>> = Vec::new();
    // Merged-away groups point at the group that absorbed them.
    let mut forward: Vec<usize> = Vec::new();

    fn live(forward: &[usize], mut g: usize) -> usize {
        while forward[g] != g {
            g = forward[g];
        }
        g
    }

    for &n in graph.topo_indices() {
        let node = graph.node_at(n);
        let is_producer = node.kind.is_weighted() || matches!(node.kind, NodeKind::Input | NodeKind::Concat);
        if !is_producer {
            continue;
        }
        let start = source_item(graph, n);
        let mut working = Vec::new();
        let mut backprop: Vec<usize> = Vec::new();
        if let Some(&g) = assigned.get(&start) {
            backprop.push(live(&forward, g));
        } else {
            working.push(start);
        }

        let mut stack: Vec<usize> = graph.succ_indices(n).iter().rev().copied().collect();
        let mut local_seen = std::collections::HashSet::new();
        while let Some(v) = stack.pop() {
            let Some(item) = consumer_item(graph, v) else {
                continue;
            };
            if let Some(&g) = assigned.get(&item) {
                backprop.push(live(&forward, g));
                continue;
            }
            if !local_seen.insert(item.clone()) {
                continue;
            }
            let expand = matches!(item, Item::Signal(_));
            working.push(item);
            if expand {
                stack.extend(graph.succ_indices(v).iter().rev().copied());
            }
        }

        backprop.sort_unstable();
        backprop.dedup();
        let target = match backprop.first() {
            Some(&t) => {
                for &other in &backprop[1..] {
                    let moved = std::mem::take(&mut groups[other]);
                    for item in &moved {
                        assigned.insert(item.clone(), t);
                    }
                    groups[t].extend(moved);
                    forward[other] = t;
                }
                t
            }
            None => {
                groups.push(Vec::new());
                forward.push(groups.len() - 1);
                groups.len() - 1
            }
        };
        for item in &working {
            assigned.insert(item.clone(), target);
        }
        groups[target].extend(working);
    }

    let live_ids: Vec<usize> = (0..groups.len()).filter(|&g| forward[g] == g).collect();
    let mut dense = vec![usize::MAX; groups.len()];
    for (k, &g) in live_ids.iter().enumerate() {
        dense[g] = k;
    }
    let classes: Vec<Class> = live_ids
        .iter()
        .map(|&g| Class {
            items: groups[g].clone(),
        })
        .collect();
    let class_of = |item: &Item| dense[live(&forward, assigned[item])];
    build_list(graph, &classes, &class_of)
}

/// Reference extraction: union-find over every pairwise constraint, repeated
/// until a full pass merges nothing. Used to cross-check
/// [`extract_dependencies`].
pub fn oracle_dependencies(graph: &ComputationGraph) -> Result<DependencyList> {
    let mut items: Vec<Item> = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        if node.kind.is_weighted() {
            items.push(Item::Endpoint(ChannelEndpoint::input(&node.id)));
            items.push(Item::Endpoint(ChannelEndpoint::output(&node.id)));
        } else {
            items.push(Item::Signal(i));
        }
    }
    let id: HashMap<Item, usize> = items.iter().cloned().enumerate().map(|(i, it)| (it, i)).collect();
    let mut parent: Vec<usize> = (0..items.len()).collect();

    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while cur != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }

    let mut pairs = Vec::new();
    for (src, dst) in graph.edges() {
        let s = graph.index_of(src)?;
        let d = graph.index_of(dst)?;
        if let Some(c) = consumer_item(graph, d) {
            pairs.push((id[&source_item(graph, s)], id[&c]));
        }
    }
    loop {
        let mut merged = false;
        for &(a, b) in &pairs {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }

    let mut roots: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes: Vec<Class> = Vec::new();
    for i in 0..items.len() {
        let r = find(&mut parent, i);
        let k = *roots.entry(r).or_insert_with(|| {
            classes.push(Class { items: Vec::new() });
            classes.len() - 1
        });
        classes[k].items.push(items[i].clone());
    }
    let root_of: Vec<usize> = (0..items.len()).map(|i| find(&mut parent, i)).collect();
    let class_of = |item: &Item| roots[&root_of[id[item]]];
    build_list(graph, &classes, &class_of)
}
