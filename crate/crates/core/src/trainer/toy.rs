//! A small, deterministic CNN trainer on procedurally generated images.
//!
//! Every convolution runs as an im2col matrix product followed by ReLU, with
//! "same" zero padding and stride 1. Fully connected layers global-average-pool
//! their input first. `pool` nodes are 2x2 average pools (identity once the
//! feature map is 1x1). The loss is softmax cross-entropy over the logits that
//! reach the `output` node, optimised with plain minibatch SGD.
//!
//! The dataset is 8x8 single-channel images in two classes: stripes running
//! horizontally or vertically, with seeded frequency, phase and noise. The
//! image is replicated across however many channels the network input has.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::WeightMap;
use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, NodeKind};
use crate::tensor::{Shape, WeightTensor};
use crate::trainer::{shapes_of, TrainRequest, TrainResponse, Trainer};

pub const IMAGE_SIDE: usize = 8;
pub const TRAIN_SAMPLES: usize = 256;
pub const LEARNING_RATE: f64 = 0.05;
pub const BATCH_SIZE: usize = 32;
/// Global gradient norm above which a step is rescaled.
pub const GRAD_CLIP: f64 = 5.0;
const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ToyDataset {
    /// `len * 64` pixels, one image after another.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x7079);
        let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
        let px = IMAGE_SIDE * IMAGE_SIDE;
        let mut images = Vec::with_capacity(len * px);
        let mut labels = Vec::with_capacity(len);
        for i in 0..len {
            let label = i % 2;
            let freq: f64 = rng.gen_range(0.6..1.6);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let coord = if label == 0 { y } else { x } as f64;
                    images.push((freq * coord + phase).sin() + noise.sample(&mut rng));
                }
            }
            labels.push(label);
        }
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let px = IMAGE_SIDE * IMAGE_SIDE;
        &self.images[i * px..(i + 1) * px]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv {
        layer: String,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    },
    Fc {
        layer: String,
        cin: usize,
        cout: usize,
    },
    Add,
    Concat,
    Pool { active: bool },
    Identity,
    Output,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    preds: Vec<usize>,
    channels: usize,
    h: usize,
    w: usize,
}

/// A graph compiled against concrete weight shapes.
#[derive(Debug, Clone)]
pub struct ToyNet {
    nodes: Vec<Node>,
    output: usize,
    input_channels: usize,
    classes: usize,
}

impl ToyNet {
    pub fn compile(graph: &ComputationGraph, shapes: &BTreeMap<String, Shape>) -> Result<Self> {
        let input_channels = infer_input_channels(graph, shapes)?;
        let mut nodes: Vec<Option<Node>> = vec![None; graph.len()];
        let mut outputs = Vec::new();
        for &idx in graph.topo_indices() {
            let spec = graph.node_at(idx);
            let preds: Vec<usize> = graph.pred_indices(idx).to_vec();
            let pred_nodes: Vec<&Node> = preds.iter().map(|&p| nodes[p].as_ref().expect("topological")).collect();
            let merged = |what: &str| -> Result<(usize, usize, usize)> {
                let first = pred_nodes[0];
                for p in &pred_nodes[1..] {
                    if (p.channels, p.h, p.w) != (first.channels, first.h, first.w) {
                        return Err(Error::Graph(format!(
                            "{what} `{}` sums inputs of mismatched shape ({}x{}x{} vs {}x{}x{})",
                            spec.id, first.channels, first.h, first.w, p.channels, p.h, p.w
                        )));
                    }
                }
                Ok((first.channels, first.h, first.w))
            };
            let node = match spec.kind {
                NodeKind::Input => Node {
                    op: Op::Input,
                    preds,
                    channels: input_channels,
                    h: IMAGE_SIDE,
                    w: IMAGE_SIDE,
                },
                NodeKind::Conv | NodeKind::Fc => {
                    let shape = *shapes
                        .get(&spec.id)
                        .ok_or_else(|| Error::format(&spec.id, "no weights for layer"))?;
                    let (c, h, w) = merged("layer")?;
                    if c != shape[2] {
                        return Err(Error::format(
                            &spec.id,
                            format!("expects {} input channels but receives {c}", shape[2]),
                        ));
                    }
                    if spec.kind == NodeKind::Fc {
                        Node {
                            op: Op::Fc {
                                layer: spec.id.clone(),
                                cin: shape[2],
                                cout: shape[3],
                            },
                            preds,
                            channels: shape[3],
                            h: 1,
                            w: 1,
                        }
                    } else {
                        if shape[0] % 2 == 0 || shape[1] % 2 == 0 {
                            return Err(Error::format(
                                &spec.id,
                                format!("toy trainer needs odd kernels for same padding, got {shape:?}"),
                            ));
                        }
                        Node {
                            op: Op::Conv {
                                layer: spec.id.clone(),
                                kh: shape[0],
                                kw: shape[1],
                                cin: shape[2],
                                cout: shape[3],
                            },
                            preds,
                            channels: shape[3],
                            h,
                            w,
                        }
                    }
                }
                NodeKind::Add => {
                    let (c, h, w) = merged("add")?;
                    Node {
                        op: Op::Add,
                        preds,
                        channels: c,
                        h,
                        w,
                    }
                }
                NodeKind::Concat => {
                    let (h, w) = (pred_nodes[0].h, pred_nodes[0].w);
                    if pred_nodes.iter().any(|p| (p.h, p.w) != (h, w)) {
                        return Err(Error::Graph(format!("concat `{}` joins different spatial sizes", spec.id)));
                    }
                    let channels = pred_nodes.iter().map(|p| p.channels).sum();
                    Node {
                        op: Op::Concat,
                        preds,
                        channels,
                        h,
                        w,
                    }
                }
                NodeKind::Pool => {
                    let (c, h, w) = merged("pool")?;
                    let active = h >= 2 && w >= 2;
                    let (h, w) = if active { (h / 2, w / 2) } else { (h, w) };
                    Node {
                        op: Op::Pool { active },
                        preds,
                        channels: c,
                        h,
                        w,
                    }
                }
                NodeKind::Other => {
                    let (c, h, w) = merged("node")?;
                    Node {
                        op: Op::Identity,
                        preds,
                        channels: c,
                        h,
                        w,
                    }
                }
                NodeKind::Output => {
                    let (c, _, _) = merged("output")?;
                    outputs.push(idx);
                    Node {
                        op: Op::Output,
                        preds,
                        channels: c,
                        h: 1,
                        w: 1,
                    }
                }
            };
            nodes[idx] = Some(node);
        }
        let output = match outputs.as_slice() {
            [one] => *one,
            _ => {
                return Err(Error::Graph(format!(
                    "toy trainer needs exactly one output node, found {}",
                    outputs.len()
                )))
            }
        };
        let nodes: Vec<Node> = nodes.into_iter().map(|n| n.expect("all nodes compiled")).collect();
        let classes = nodes[output].channels;
        if classes < 2 {
            return Err(Error::Graph(format!("toy trainer needs at least 2 logits, got {classes}")));
        }
        Ok(Self {
            nodes,
            output,
            input_channels,
            classes,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

fn infer_input_channels(graph: &ComputationGraph, shapes: &BTreeMap<String, Shape>) -> Result<usize> {
    let mut stack = vec![graph.input_index()];
    let mut seen = vec![false; graph.len()];
    while let Some(n) = stack.pop() {
        for &s in graph.succ_indices(n) {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let node = graph.node_at(s);
            match node.kind {
                NodeKind::Conv | NodeKind::Fc => {
                    let shape = shapes
                        .get(&node.id)
                        .ok_or_else(|| Error::format(&node.id, "no weights for layer"))?;
                    return Ok(shape[2]);
                }
                NodeKind::Concat => {}
                _ => stack.push(s),
            }
        }
    }
    Err(Error::Graph("cannot infer the number of input channels".into()))
}

/// `c = a * b (+ c if accumulate)`, with optional transposes of row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer weights as a `cout x (kh*kw*cin)` matrix.
fn weight_matrix(w: &[f64], kh: usize, kw: usize, cin: usize, cout: usize) -> Vec<f64> {
    let k = kh * kw * cin;
    let mut m = vec![0.0; cout * k];
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..cin {
                let src = ((a * kw + b) * cin + i) * cout;
                let col = (a * kw + b) * cin + i;
                for o in 0..cout {
                    m[o * k + col] = w[src + o];
                }
            }
        }
    }
    m
}

/// Inverse layout of [`weight_matrix`], accumulated into `dw`.
fn scatter_weight_grad(dm: &[f64], dw: &mut [f64], kh: usize, kw: usize, cin: usize, cout: usize) {
    let k = kh * kw * cin;
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..cin {
                let dst = ((a * kw + b) * cin + i) * cout;
                let col = (a * kw + b) * cin + i;
                for o in 0..cout {
                    dw[dst + o] += dm[o * k + col];
                }
            }
        }
    }
}

struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.batch * self.h * self.w
    }
}

fn im2col(x: &[f64], cin: usize, g: &Geometry, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let plane = g.plane();
    let mut cols = vec![0.0; kh * kw * cin * plane];
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..cin {
                let row = (a * kw + b) * cin + i;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let src = &x[i * plane..(i + 1) * plane];
                for n in 0..g.batch {
                    for y in 0..g.h {
                        let sy = y as isize + a as isize - ph as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for xx in 0..g.w {
                            let sx = xx as isize + b as isize - pw as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[(n * g.h + y) * g.w + xx] = src[(n * g.h + sy as usize) * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, g: &Geometry, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let plane = g.plane();
    let mut x = vec![0.0; cin * plane];
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..cin {
                let row = (a * kw + b) * cin + i;
                let src = &cols[row * plane..(row + 1) * plane];
                let dst = &mut x[i * plane..(i + 1) * plane];
                for n in 0..g.batch {
                    for y in 0..g.h {
                        let sy = y as isize + a as isize - ph as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for xx in 0..g.w {
                            let sx = xx as isize + b as isize - pw as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[(n * g.h + sy as usize) * g.w + sx as usize] += src[(n * g.h + y) * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Mean over the spatial positions of each (channel, sample).
fn global_pool(x: &[f64], c: usize, batch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * batch];
    for ch in 0..c {
        for n in 0..batch {
            let base = (ch * batch + n) * hw;
            out[ch * batch + n] = x[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    out
}

fn global_pool_grad(d: &[f64], c: usize, batch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * batch * hw];
    let scale = 1.0 / hw as f64;
    for ch in 0..c {
        for n in 0..batch {
            let v = d[ch * batch + n] * scale;
            let base = (ch * batch + n) * hw;
            out[base..base + hw].iter_mut().for_each(|o| *o = v);
        }
    }
    out
}

enum Cache {
    None,
    Conv { cols: Vec<f64>, pre: Vec<f64> },
    Dense { pooled: Vec<f64> },
}

/// Parameters in `(kh, kw, in, out)` layout, as `f64`.
pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_from_weights(weights: &WeightMap) -> Params {
    weights
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| f64::from(v)).collect()))
        .collect()
}

pub fn weights_from_params(params: &Params, template: &WeightMap) -> Result<WeightMap> {
    template
        .iter()
        .map(|(k, t)| {
            let data = params[k].iter().map(|&v| v as f32).collect();
            Ok((k.clone(), WeightTensor::new(k.clone(), t.shape(), data)?))
        })
        .collect()
}

pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
}

impl ToyNet {
    fn gather_sum(&self, acts: &[Vec<f64>], preds: &[usize]) -> Vec<f64> {
        let mut x = acts[preds[0]].clone();
        for &p in &preds[1..] {
            for (a, b) in x.iter_mut().zip(&acts[p]) {
                *a += b;
            }
        }
        x
    }

    fn forward(&self, params: &Params, images: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<Cache>) {
        let batch = images.len();
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut caches: Vec<Cache> = (0..self.nodes.len()).map(|_| Cache::None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Input => {
                    let px = IMAGE_SIDE * IMAGE_SIDE;
                    let mut x = Vec::with_capacity(node.channels * batch * px);
                    for _ in 0..node.channels {
                        for img in images {
                            x.extend_from_slice(img);
                        }
                    }
                    x
                }
                Op::Conv {
                    layer,
                    kh,
                    kw,
                    cin,
                    cout,
                } => {
                    let x = self.gather_sum(&acts, &node.preds);
                    let g = Geometry {
                        batch,
                        h: node.h,
                        w: node.w,
                    };
                    let cols = im2col(&x, *cin, &g, *kh, *kw);
                    let wm = weight_matrix(&params[layer], *kh, *kw, *cin, *cout);
                    let mut pre = vec![0.0; cout * g.plane()];
                    gemm(*cout, kh * kw * cin, g.plane(), &wm, false, &cols, false, &mut pre, false);
                    let out = pre.iter().map(|&v| v.max(0.0)).collect();
                    caches[idx] = Cache::Conv { cols, pre };
                    out
                }
                Op::Fc { layer, cin, cout } => {
                    let x = self.gather_sum(&acts, &node.preds);
                    let p = &self.nodes[node.preds[0]];
                    let pooled = global_pool(&x, *cin, batch, p.h * p.w);
                    let wm = weight_matrix(&params[layer], 1, 1, *cin, *cout);
                    let mut out = vec![0.0; cout * batch];
                    gemm(*cout, *cin, batch, &wm, false, &pooled, false, &mut out, false);
                    caches[idx] = Cache::Dense { pooled };
                    out
                }
                Op::Add | Op::Identity => self.gather_sum(&acts, &node.preds),
                Op::Concat => {
                    let mut x = Vec::new();
                    for &p in &node.preds {
                        x.extend_from_slice(&acts[p]);
                    }
                    x
                }
                Op::Pool { active } => {
                    let x = self.gather_sum(&acts, &node.preds);
                    if !active {
                        x
                    } else {
                        let p = &self.nodes[node.preds[0]];
                        let (h, w) = (p.h, p.w);
                        let mut out = vec![0.0; node.channels * batch * node.h * node.w];
                        for cn in 0..node.channels * batch {
                            for y in 0..node.h {
                                for xx in 0..node.w {
                                    let s = |dy: usize, dx: usize| x[(cn * h + 2 * y + dy) * w + 2 * xx + dx];
                                    out[(cn * node.h + y) * node.w + xx] = 0.25 * (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1));
                                }
                            }
                        }
                        out
                    }
                }
                Op::Output => {
                    let x = self.gather_sum(&acts, &node.preds);
                    let p = &self.nodes[node.preds[0]];
                    let hw = p.h * p.w;
                    if hw > 1 {
                        global_pool(&x, node.channels, batch, hw)
                    } else {
                        x
                    }
                }
            };
            acts[idx] = out;
        }
        (acts, caches)
    }

    /// Mean cross-entropy and its gradient with respect to the logits.
    fn loss(&self, logits: &[f64], labels: &[usize]) -> (f64, Vec<f64>, usize) {
        let batch = labels.len();
        let k = self.classes;
        let mut grad = vec![0.0; k * batch];
        let mut loss = 0.0;
        let mut correct = 0;
        for (n, &label) in labels.iter().enumerate() {
            let col: Vec<f64> = (0..k).map(|c| logits[c * batch + n]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - col[label];
            let argmax = (0..k).fold(0, |best, c| if col[c] > col[best] { c } else { best });
            if argmax == label {
                correct += 1;
            }
            for c in 0..k {
                let p = (col[c] - log_z).exp();
                grad[c * batch + n] = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
            }
        }
        (loss / batch as f64, grad, correct)
    }

    pub fn evaluate(&self, params: &Params, images: &[&[f64]], labels: &[usize]) -> BatchResult {
        let (acts, _) = self.forward(params, images);
        let (loss, _, correct) = self.loss(&acts[self.output], labels);
        BatchResult { loss, correct }
    }

    /// Loss on one batch and the gradient of every parameter tensor.
    pub fn loss_and_gradients(&self, params: &Params, images: &[&[f64]], labels: &[usize]) -> (BatchResult, Params) {
        let batch = images.len();
        let (acts, caches) = self.forward(params, images);
        let (loss, dlogits, correct) = self.loss(&acts[self.output], labels);

        let mut grads: Params = params.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
        let mut dacts: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        dacts[self.output] = Some(dlogits);

        let add_to = |dacts: &mut Vec<Option<Vec<f64>>>, p: usize, g: &[f64]| match &mut dacts[p] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(dout) = dacts[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    layer,
                    kh,
                    kw,
                    cin,
                    cout,
                } => {
                    let Cache::Conv { cols, pre } = &caches[idx] else {
                        unreachable!("conv cache")
                    };
                    let g = Geometry {
                        batch,
                        h: node.h,
                        w: node.w,
                    };
                    let k = kh * kw * cin;
                    let dpre: Vec<f64> = dout
                        .iter()
                        .zip(pre)
                        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                        .collect();
                    let mut dwm = vec![0.0; cout * k];
                    gemm(*cout, g.plane(), k, &dpre, false, cols, true, &mut dwm, false);
                    scatter_weight_grad(&dwm, grads.get_mut(layer).expect("param"), *kh, *kw, *cin, *cout);
                    let wm = weight_matrix(&params[layer], *kh, *kw, *cin, *cout);
                    let mut dcols = vec![0.0; k * g.plane()];
                    gemm(k, *cout, g.plane(), &wm, true, &dpre, false, &mut dcols, false);
                    let dx = col2im(&dcols, *cin, &g, *kh, *kw);
                    for &p in &node.preds {
                        add_to(&mut dacts, p, &dx);
                    }
                }
                Op::Fc { layer, cin, cout } => {
                    let Cache::Dense { pooled } = &caches[idx] else {
                        unreachable!("fc cache")
                    };
                    let mut dwm = vec![0.0; cout * cin];
                    gemm(*cout, batch, *cin, &dout, false, pooled, true, &mut dwm, false);
                    scatter_weight_grad(&dwm, grads.get_mut(layer).expect("param"), 1, 1, *cin, *cout);
                    let wm = weight_matrix(&params[layer], 1, 1, *cin, *cout);
                    let mut dpooled = vec![0.0; cin * batch];
                    gemm(*cin, *cout, batch, &wm, true, &dout, false, &mut dpooled, false);
                    let p = &self.nodes[node.preds[0]];
                    let dx = global_pool_grad(&dpooled, *cin, batch, p.h * p.w);
                    for &p in &node.preds {
                        add_to(&mut dacts, p, &dx);
                    }
                }
                Op::Add | Op::Identity => {
                    for &p in &node.preds {
                        add_to(&mut dacts, p, &dout);
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in &node.preds {
                        let len = acts[p].len();
                        add_to(&mut dacts, p, &dout[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Pool { active } => {
                    let dx = if !active {
                        dout
                    } else {
                        let p = &self.nodes[node.preds[0]];
                        let (h, w) = (p.h, p.w);
                        let mut dx = vec![0.0; node.channels * batch * h * w];
                        for cn in 0..node.channels * batch {
                            for y in 0..node.h {
                                for xx in 0..node.w {
                                    let v = 0.25 * dout[(cn * node.h + y) * node.w + xx];
                                    for dy in 0..2 {
                                        for dxx in 0..2 {
                                            dx[(cn * h + 2 * y + dy) * w + 2 * xx + dxx] += v;
                                        }
                                    }
                                }
                            }
                        }
                        dx
                    };
                    for &p in &node.preds {
                        add_to(&mut dacts, p, &dx);
                    }
                }
                Op::Output => {
                    let p = &self.nodes[node.preds[0]];
                    let hw = p.h * p.w;
                    let dx = if hw > 1 {
                        global_pool_grad(&dout, node.channels, batch, hw)
                    } else {
                        dout
                    };
                    for &p in &node.preds {
                        add_to(&mut dacts, p, &dx);
                    }
                }
            }
        }
        (BatchResult { loss, correct }, grads)
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub weights: WeightMap,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// Full-dataset loss and accuracy.
pub fn evaluate(net: &ToyNet, params: &Params, data: &ToyDataset) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(BATCH_SIZE) {
        let images: Vec<&[f64]> = chunk.iter().map(|&i| data.image(i)).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let r = net.evaluate(params, &images, &labels);
        loss += r.loss * chunk.len() as f64;
        correct += r.correct;
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

/// Trains `epochs` passes of minibatch SGD with clipped steps. `seed` fixes the dataset;
/// `shuffle_seed` fixes the batch order.
pub fn toy_train(
    graph: &ComputationGraph,
    weights: &WeightMap,
    epochs: usize,
    seed: u64,
    shuffle_seed: u64,
) -> Result<ToyOutcome> {
    let net = ToyNet::compile(graph, &shapes_of(weights))?;
    let data = ToyDataset::generate(seed, TRAIN_SAMPLES);
    let mut params = params_from_weights(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH_SIZE) {
            let images: Vec<&[f64]> = chunk.iter().map(|&i| data.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (res, grads) = net.loss_and_gradients(&params, &images, &labels);
            if !res.loss.is_finite() {
                return Err(Error::NonFinite("toy training loss diverged".into()));
            }
            let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
            let step = if norm > GRAD_CLIP { LEARNING_RATE * GRAD_CLIP / norm } else { LEARNING_RATE };
            for (k, g) in grads {
                let p = params.get_mut(&k).expect("param");
                for (w, d) in p.iter_mut().zip(&g) {
                    *w -= step * d;
                }
            }
        }
    }
    let (train_loss, train_acc) = evaluate(&net, &params, &data);
    if !train_loss.is_finite() {
        return Err(Error::NonFinite("toy training loss is not finite".into()));
    }
    let weights = weights_from_params(&params, weights)?;
    Ok(ToyOutcome {
        weights,
        train_loss,
        train_acc,
    })
}

/// [`toy_train`] behind the [`Trainer`] interface. The dataset is fixed by
/// the request seed; the batch order also depends on the trial.
#[derive(Debug, Default, Clone)]
pub struct ToyTrainer;

impl Trainer for ToyTrainer {
    fn name(&self) -> &str {
        "toy"
    }

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainResponse> {
        let shuffle_seed = request.seed ^ (request.trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let out = toy_train(request.graph, request.weights, request.epochs, request.seed, shuffle_seed)
            .map_err(|e| Error::Trainer {
                trial: request.trial,
                message: e.to_string(),
            })?;
        Ok(TrainResponse {
            trial: request.trial,
            weights: out.weights,
            train_loss: out.train_loss,
            train_acc: out.train_acc,
        })
    }
}
