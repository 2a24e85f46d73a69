//! Oracles and generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use chansearch::dependency::DependencyList;
use chansearch::graph::{parse_graph, ComputationGraph, LayerNode, NodeKind};
use chansearch::init::init_weights;
use chansearch::linalg::Matrix;
use chansearch::tensor::Shape;
use chansearch::trainer::toy::{params_from_weights, Params, ToyDataset, ToyNet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap()
}

/// Groups as sets of endpoint labels, plain and derived kept apart.
pub fn partition(deps: &DependencyList) -> (BTreeSet<BTreeSet<String>>, BTreeSet<BTreeSet<String>>) {
    let set = |eps: &[chansearch::graph::ChannelEndpoint]| eps.iter().map(|e| e.to_string()).collect::<BTreeSet<_>>();
    (
        deps.groups.iter().map(|g| set(&g.endpoints)).collect(),
        deps.derived.iter().map(|g| set(&g.endpoints)).collect(),
    )
}

pub struct RandomDag {
    pub graph: ComputationGraph,
    pub edges: usize,
    pub add_edges: usize,
}

/// A random valid DAG with at most `max_nodes` nodes. Concats only join
/// weighted layers so every concat has a resizable source, and adds never
/// take an input that carries concatenated channels.
pub fn random_dag(seed: u64, max_nodes: usize) -> RandomDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=max_nodes);
    let mut nodes = vec![LayerNode::new("n0", NodeKind::Input, None)];
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut weighted: Vec<usize> = Vec::new();
    // Nodes whose output channels come from a concat without a layer between.
    let mut tainted = vec![false];
    let mut add_edges = 0;
    let shape = Some([3, 3, 4, 4]);
    for i in 1..n {
        let id = format!("n{i}");
        let last = i == n - 1;
        let roll: f64 = rng.gen();
        let kind = if last {
            NodeKind::Output
        } else if i == 1 || roll < 0.45 {
            NodeKind::Conv
        } else if roll < 0.5 {
            NodeKind::Fc
        } else if roll < 0.72 && tainted.iter().filter(|t| !**t).count() >= 2 {
            NodeKind::Add
        } else if roll < 0.8 && weighted.len() >= 2 {
            NodeKind::Concat
        } else if roll < 0.9 {
            NodeKind::Pool
        } else {
            NodeKind::Other
        };
        let node_shape = match kind {
            NodeKind::Conv => shape,
            NodeKind::Fc => Some([1, 1, 4, 4]),
            _ => None,
        };
        nodes.push(LayerNode::new(id.clone(), kind, node_shape));
        let mut preds: BTreeSet<usize> = BTreeSet::new();
        match kind {
            NodeKind::Add => {
                // Concat outputs never meet other signals in an add.
                let clean: Vec<usize> = (0..i).filter(|&p| !tainted[p]).collect();
                let k = rng.gen_range(2..=3).min(clean.len());
                if !tainted[i - 1] {
                    preds.insert(i - 1);
                }
                while preds.len() < k {
                    preds.insert(clean[rng.gen_range(0..clean.len())]);
                }
            }
            NodeKind::Concat => {
                let k = rng.gen_range(2..=3).min(weighted.len());
                while preds.len() < k {
                    preds.insert(weighted[rng.gen_range(0..weighted.len())]);
                }
            }
            _ => {
                let p = if rng.gen_bool(0.7) { i - 1 } else { rng.gen_range(0..i) };
                preds.insert(p);
            }
        }
        tainted.push(match kind {
            NodeKind::Concat => true,
            NodeKind::Add | NodeKind::Pool | NodeKind::Other => preds.iter().any(|&p| tainted[p]),
            _ => false,
        });
        for p in preds {
            if kind == NodeKind::Add {
                add_edges += 1;
            }
            edges.push((format!("n{p}"), id.clone()));
        }
        if kind.is_weighted() {
            weighted.push(i);
        }
    }
    let count = edges.len();
    let graph = ComputationGraph::new(nodes, edges).expect("generated graph is valid");
    RandomDag {
        graph,
        edges: count,
        add_edges,
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn to_nalgebra(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Singular values from nalgebra, descending.
pub fn reference_singular_values(m: &Matrix) -> Vec<f64> {
    let mut sv: Vec<f64> = to_nalgebra(m).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// (N', kappa, QC) straight from the definitions.
pub fn reference_qc(sv: &[f64], n: usize, tau: f64) -> (usize, Option<f64>, f64) {
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > tau * top).count();
    if rank == 0 {
        return (0, None, 0.0);
    }
    let kappa = top / sv[rank - 1];
    let r = rank as f64 / n as f64;
    let qc = if kappa == 1.0 {
        std::f64::consts::FRAC_PI_2
    } else {
        (r / (1.0 - 1.0 / kappa)).atan()
    };
    (rank, Some(kappa), qc)
}

/// Frobenius error of reconstructing `w` from the row space of `c`:
/// `|| w - w P ||` with `P` the orthogonal projector onto rowspace(c).
pub fn rowspace_error(w: &Matrix, c: &Matrix) -> f64 {
    let w = to_nalgebra(w);
    let c = to_nalgebra(c);
    let svd = c.transpose().svd(true, false);
    let u = svd.u.unwrap();
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * top)
        .collect();
    let basis = u.select_columns(&keep);
    let proj = &basis * basis.transpose();
    (&w - &w * proj).norm()
}

/// Parses DOT text against the language grammar (graph, statements,
/// attribute lists, quoted and HTML ids, ports). Returns (nodes, edges).
pub fn validate_dot(text: &str) -> Result<(BTreeSet<String>, Vec<(String, String)>), String> {
    DotParser::new(text).parse()
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    Punct(&'static str),
}

struct DotParser {
    toks: Vec<Tok>,
    pos: usize,
    directed: bool,
    nodes: BTreeSet<String>,
    edges: Vec<(String, String)>,
}

fn lex(text: &str) -> Result<Vec<Tok>, String> {
    let c: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < c.len() {
        let ch = c[i];
        if ch.is_whitespace() {
            i += 1;
        } else if ch == '/' && c.get(i + 1) == Some(&'/') || ch == '#' {
            while i < c.len() && c[i] != '\n' {
                i += 1;
            }
        } else if ch == '/' && c.get(i + 1) == Some(&'*') {
            i += 2;
            while i + 1 < c.len() && !(c[i] == '*' && c[i + 1] == '/') {
                i += 1;
            }
            i += 2;
        } else if ch == '-' && c.get(i + 1) == Some(&'>') {
            out.push(Tok::Punct("->"));
            i += 2;
        } else if ch == '-' && c.get(i + 1) == Some(&'-') {
            out.push(Tok::Punct("--"));
            i += 2;
        } else if "{}[];,=:".contains(ch) {
            let p = match ch {
                '{' => "{",
                '}' => "}",
                '[' => "[",
                ']' => "]",
                ';' => ";",
                ',' => ",",
                '=' => "=",
                _ => ":",
            };
            out.push(Tok::Punct(p));
            i += 1;
        } else if ch == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match c.get(i) {
                    None => return Err("unterminated string".into()),
                    Some('"') => break,
                    Some('\\') if c.get(i + 1) == Some(&'"') => {
                        s.push('"');
                        i += 2;
                    }
                    Some(&x) => {
                        s.push(x);
                        i += 1;
                    }
                }
            }
            i += 1;
            out.push(Tok::Id(s));
        } else if ch == '<' {
            let mut depth = 0;
            let start = i;
            loop {
                match c.get(i) {
                    None => return Err("unterminated HTML string".into()),
                    Some('<') => depth += 1,
                    Some('>') => {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    _ => {}
                }
                i += 1;
            }
            i += 1;
            out.push(Tok::Id(c[start..i].iter().collect()));
        } else if ch.is_ascii_digit() || ch == '.' || ch == '-' {
            let start = i;
            if ch == '-' {
                i += 1;
            }
            let mut dot = false;
            while i < c.len() && (c[i].is_ascii_digit() || (c[i] == '.' && !dot)) {
                dot |= c[i] == '.';
                i += 1;
            }
            let s: String = c[start..i].iter().collect();
            if s == "-" || s == "." || s == "-." {
                return Err(format!("bad numeral `{s}`"));
            }
            if i < c.len() && (c[i].is_alphabetic() || c[i] == '_') {
                return Err(format!("identifier cannot start with a digit near `{s}`"));
            }
            out.push(Tok::Id(s));
        } else if ch.is_alphabetic() || ch == '_' {
            let start = i;
            while i < c.len() && (c[i].is_alphanumeric() || c[i] == '_') {
                i += 1;
            }
            out.push(Tok::Id(c[start..i].iter().collect()));
        } else {
            return Err(format!("unexpected character `{ch}`"));
        }
    }
    Ok(out)
}

impl DotParser {
    fn new(text: &str) -> Self {
        let toks = lex(text).unwrap_or_else(|e| vec![Tok::Id(format!("\u{0}lex error: {e}"))]);
        Self {
            toks,
            pos: 0,
            directed: true,
            nodes: BTreeSet::new(),
            edges: Vec::new(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn punct(&mut self, p: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(q)) if *q == p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> Result<(), String> {
        if self.punct(p) {
            Ok(())
        } else {
            Err(format!("expected `{p}` at token {} ({:?})", self.pos, self.peek()))
        }
    }

    fn id(&mut self) -> Result<String, String> {
        match self.peek().cloned() {
            Some(Tok::Id(s)) if s.starts_with('\u{0}') => Err(s),
            Some(Tok::Id(s)) => {
                self.pos += 1;
                Ok(s)
            }
            other => Err(format!("expected an id at token {}, got {other:?}", self.pos)),
        }
    }

    fn keyword(&self, k: &str) -> bool {
        matches!(self.peek(), Some(Tok::Id(s)) if s.eq_ignore_ascii_case(k))
    }

    fn parse(mut self) -> Result<(BTreeSet<String>, Vec<(String, String)>), String> {
        if self.keyword("strict") {
            self.pos += 1;
        }
        if self.keyword("digraph") {
            self.directed = true;
        } else if self.keyword("graph") {
            self.directed = false;
        } else {
            return Err("expected `graph` or `digraph`".into());
        }
        self.pos += 1;
        if matches!(self.peek(), Some(Tok::Id(_))) {
            self.id()?;
        }
        self.expect("{")?;
        self.stmt_list()?;
        self.expect("}")?;
        if self.pos != self.toks.len() {
            return Err(format!("trailing tokens after the graph body at {}", self.pos));
        }
        Ok((self.nodes, self.edges))
    }

    fn stmt_list(&mut self) -> Result<(), String> {
        while !matches!(self.peek(), Some(Tok::Punct("}")) | None) {
            self.stmt()?;
            self.punct(";");
        }
        Ok(())
    }

    fn attr_list(&mut self) -> Result<(), String> {
        while self.punct("[") {
            while !self.punct("]") {
                self.id()?;
                self.expect("=")?;
                self.id()?;
                if !self.punct(",") {
                    self.punct(";");
                }
            }
        }
        Ok(())
    }

    fn node_id(&mut self) -> Result<String, String> {
        let id = self.id()?;
        if self.punct(":") {
            self.id()?;
            if self.punct(":") {
                self.id()?;
            }
        }
        Ok(id)
    }

    fn stmt(&mut self) -> Result<(), String> {
        if self.keyword("graph") || self.keyword("node") || self.keyword("edge") {
            self.pos += 1;
            return self.attr_list();
        }
        if self.keyword("subgraph") || matches!(self.peek(), Some(Tok::Punct("{"))) {
            if self.keyword("subgraph") {
                self.pos += 1;
                if matches!(self.peek(), Some(Tok::Id(_))) {
                    self.id()?;
                }
            }
            self.expect("{")?;
            self.stmt_list()?;
            return self.expect("}");
        }
        let first = self.node_id()?;
        if self.punct("=") {
            self.id()?;
            return Ok(());
        }
        self.nodes.insert(first.clone());
        let mut prev = first;
        loop {
            let op_ok = if self.directed { self.punct("->") } else { self.punct("--") };
            if !op_ok {
                if matches!(self.peek(), Some(Tok::Punct("->")) | Some(Tok::Punct("--"))) {
                    return Err("edge operator does not match the graph type".into());
                }
                break;
            }
            let next = self.node_id()?;
            self.nodes.insert(next.clone());
            self.edges.push((prev, next.clone()));
            prev = next;
        }
        self.attr_list()
    }
}

pub fn oracle_unfold(t: &[f64], shape: Shape, axis: usize) -> DMatrix<f64> {
    let rows = shape[axis];
    let cols = t.len() / rows;
    let mut m = DMatrix::zeros(rows, cols);
    let mut counters = vec![0usize; rows];
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                for d in 0..shape[3] {
                    let idx = [a, b, c, d];
                    let r = idx[axis];
                    let v = t[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
                    m[(r, counters[r])] = v;
                    counters[r] += 1;
                }
            }
        }
    }
    m
}

pub fn oracle_fold(m: &DMatrix<f64>, shape: Shape, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; shape.iter().product()];
    let mut counters = vec![0usize; shape[axis]];
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                for d in 0..shape[3] {
                    let r = [a, b, c, d][axis];
                    out[((a * shape[1] + b) * shape[2] + c) * shape[3] + d] = m[(r, counters[r])];
                    counters[r] += 1;
                }
            }
        }
    }
    out
}

pub fn oracle_resize(m: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    let n = m.nrows();
    if rows > n {
        DMatrix::from_fn(rows, m.ncols(), |i, j| if i < n { m[(i, j)] } else { m[(2 * n - 1 - i, j)] })
    } else if rows < n {
        let svd = m.clone().svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let k = rows.min(svd.singular_values.len());
        let mut out = DMatrix::zeros(rows, m.ncols());
        for j in 0..k {
            out += u.view((0, j), (rows, 1)) * svd.singular_values[j] * vt.view((j, 0), (1, m.ncols()));
        }
        out
    } else {
        m.clone()
    }
}

pub fn build_graph(nodes: &[(&str, &str, Option<Shape>)], edges: &[(&str, &str)]) -> ComputationGraph {
    let nodes: Vec<serde_json::Value> = nodes
        .iter()
        .map(|(id, kind, shape)| match shape {
            Some(s) => serde_json::json!({"id": id, "kind": kind, "weight_shape": s}),
            None => serde_json::json!({"id": id, "kind": kind}),
        })
        .collect();
    let doc = serde_json::json!({"nodes": nodes, "edges": edges});
    parse_graph(&doc.to_string()).unwrap()
}

pub fn graph_shapes(g: &ComputationGraph) -> BTreeMap<String, Shape> {
    g.weighted_layers().map(|n| (n.id.clone(), n.weight_shape.unwrap())).collect()
}

/// One small graph per op kind.
pub fn op_graphs() -> Vec<(&'static str, ComputationGraph)> {
    vec![
        (
            "conv+output gap",
            build_graph(
                &[("x", "input", None), ("c", "conv", Some([3, 3, 1, 2])), ("y", "output", None)],
                &[("x", "c"), ("c", "y")],
            ),
        ),
        (
            "rectangular conv",
            build_graph(
                &[
                    ("x", "input", None),
                    ("c", "conv", Some([1, 3, 2, 3])),
                    ("f", "fc", Some([1, 1, 3, 2])),
                    ("y", "output", None),
                ],
                &[("x", "c"), ("c", "f"), ("f", "y")],
            ),
        ),
        (
            "fc",
            build_graph(
                &[("x", "input", None), ("f", "fc", Some([1, 1, 1, 3])), ("y", "output", None)],
                &[("x", "f"), ("f", "y")],
            ),
        ),
        (
            "add",
            build_graph(
                &[
                    ("x", "input", None),
                    ("a", "conv", Some([3, 3, 1, 3])),
                    ("b", "conv", Some([3, 3, 3, 3])),
                    ("s", "add", None),
                    ("f", "fc", Some([1, 1, 3, 2])),
                    ("y", "output", None),
                ],
                &[("x", "a"), ("a", "b"), ("a", "s"), ("b", "s"), ("s", "f"), ("f", "y")],
            ),
        ),
        (
            "concat",
            build_graph(
                &[
                    ("x", "input", None),
                    ("a", "conv", Some([1, 1, 1, 2])),
                    ("b", "conv", Some([3, 3, 1, 3])),
                    ("k", "concat", None),
                    ("f", "fc", Some([1, 1, 5, 2])),
                    ("y", "output", None),
                ],
                &[("x", "a"), ("x", "b"), ("a", "k"), ("b", "k"), ("k", "f"), ("f", "y")],
            ),
        ),
        (
            "pool",
            build_graph(
                &[
                    ("x", "input", None),
                    ("a", "conv", Some([3, 3, 1, 2])),
                    ("p", "pool", None),
                    ("b", "conv", Some([3, 3, 2, 2])),
                    ("y", "output", None),
                ],
                &[("x", "a"), ("a", "p"), ("p", "b"), ("b", "y")],
            ),
        ),
        (
            "pool at 1x1",
            build_graph(
                &[
                    ("x", "input", None),
                    ("a", "conv", Some([3, 3, 1, 2])),
                    ("p1", "pool", None),
                    ("p2", "pool", None),
                    ("p3", "pool", None),
                    ("p4", "pool", None),
                    ("b", "conv", Some([1, 1, 2, 2])),
                    ("y", "output", None),
                ],
                &[("x", "a"), ("a", "p1"), ("p1", "p2"), ("p2", "p3"), ("p3", "p4"), ("p4", "b"), ("b", "y")],
            ),
        ),
        (
            "other",
            build_graph(
                &[
                    ("x", "input", None),
                    ("a", "conv", Some([3, 3, 1, 2])),
                    ("o", "other", None),
                    ("f", "fc", Some([1, 1, 2, 2])),
                    ("y", "output", None),
                ],
                &[("x", "a"), ("a", "o"), ("o", "f"), ("f", "y")],
            ),
        ),
    ]
}

/// Central finite differences against the analytic gradient of every
/// parameter of `g`, on six images. Relative error must stay below 1e-4.
pub fn fd_check(g: &ComputationGraph, seed: u64) -> Result<(), String> {
    let data = ToyDataset::generate(5, 8);
    let images: Vec<&[f64]> = (0..6).map(|i| data.image(i)).collect();
    let labels = data.labels[..6].to_vec();
    let shapes = graph_shapes(g);
    let net = ToyNet::compile(g, &shapes).map_err(|e| e.to_string())?;
    let params = params_from_weights(&init_weights(&shapes, seed).map_err(|e| e.to_string())?);
    let (_, grads) = net.loss_and_gradients(&params, &images, &labels);
    let loss = |p: &Params| net.evaluate(p, &images, &labels).loss;
    let eps = 1e-6;
    for (id, values) in &params {
        let mut numeric = vec![0.0; values.len()];
        for i in 0..values.len() {
            let mut p = params.clone();
            p.get_mut(id).unwrap()[i] += eps;
            let up = loss(&p);
            p.get_mut(id).unwrap()[i] -= 2.0 * eps;
            let down = loss(&p);
            numeric[i] = (up - down) / (2.0 * eps);
        }
        let analytic = &grads[id];
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return Err(format!("{id}: zero gradient"));
        }
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale);
            if rel >= 1e-4 {
                return Err(format!("{id}[{i}]: analytic {a} numeric {n}"));
            }
        }
    }
    Ok(())
}
