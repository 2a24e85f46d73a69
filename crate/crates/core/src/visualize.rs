//! Channel-size diagrams.
//!
//! Every weighted layer is drawn as a circle (a square for fully connected
//! layers) split into an IN and an OUT half. Each half takes its group's
//! colour; the first endpoint of a group is opaque, later members are drawn
//! at alpha 0.6. Node width grows linearly with the layer's channel count.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::dependency::{DependencyList, GroupRef};
use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, ComputationGraph, NodeKind};
use crate::plan::ChannelPlan;

pub const MEMBER_ALPHA: f64 = 0.6;
/// Inches of node width per channel.
pub const WIDTH_PER_CHANNEL: f64 = 1.0 / 32.0;
const GOLDEN: f64 = 0.618_033_988_749_895;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfStyle {
    pub group: GroupRef,
    pub size: usize,
    pub color: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStyle {
    pub id: String,
    pub kind: NodeKind,
    pub shape: &'static str,
    pub width: f64,
    #[serde(rename = "in")]
    pub input: HalfStyle,
    #[serde(rename = "out")]
    pub output: HalfStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStyle {
    pub group: GroupRef,
    pub size: usize,
    pub color: String,
    pub endpoints: Vec<ChannelEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Visualization {
    pub layers: Vec<LayerStyle>,
    pub groups: Vec<GroupStyle>,
    pub edges: Vec<(String, String)>,
    #[serde(skip)]
    pub dot: String,
}

/// `#rrggbb` for the `index`-th group: golden-ratio hue steps.
pub fn group_color(index: usize) -> String {
    let h = (index as f64 * GOLDEN).fract() * 6.0;
    let (s, v) = (0.55, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let byte = |u: f64| ((u + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", byte(r), byte(g), byte(b))
}

fn alpha_hex(alpha: f64) -> String {
    format!("{:02x}", (alpha * 255.0).round() as u8)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn export_visualizer(graph: &ComputationGraph, deps: &DependencyList, plan: &ChannelPlan) -> Result<Visualization> {
    if plan.sizes.len() != deps.groups.len() || plan.derived.len() != deps.derived.len() {
        return Err(Error::invalid(format!(
            "plan has {} + {} sizes for {} groups and {} derived groups",
            plan.sizes.len(),
            plan.derived.len(),
            deps.groups.len(),
            deps.derived.len()
        )));
    }
    let refs: Vec<GroupRef> = deps.all_refs().collect();
    let colors: HashMap<GroupRef, String> = refs.iter().enumerate().map(|(i, r)| (*r, group_color(i))).collect();
    let index = deps.group_index();
    let mut seen: HashMap<GroupRef, usize> = HashMap::new();
    let mut style = |e: ChannelEndpoint| -> Result<HalfStyle> {
        let group = *index
            .get(&e)
            .ok_or_else(|| Error::Dependency(format!("endpoint `{e}` is not in any group")))?;
        let count = seen.entry(group).or_insert(0);
        *count += 1;
        Ok(HalfStyle {
            group,
            size: plan.size(group),
            color: colors[&group].clone(),
            alpha: if *count == 1 { 1.0 } else { MEMBER_ALPHA },
        })
    };

    let mut layers = Vec::new();
    for node in graph.weighted_layers() {
        let input = style(ChannelEndpoint::input(&node.id))?;
        let output = style(ChannelEndpoint::output(&node.id))?;
        layers.push(LayerStyle {
            id: node.id.clone(),
            kind: node.kind,
            shape: if node.kind == NodeKind::Fc { "square" } else { "circle" },
            width: (input.size + output.size) as f64 / 2.0 * WIDTH_PER_CHANNEL,
            input,
            output,
        });
    }
    let groups = refs
        .iter()
        .map(|&r| GroupStyle {
            group: r,
            size: plan.size(r),
            color: colors[&r].clone(),
            endpoints: deps.endpoints(r).to_vec(),
        })
        .collect();

    let mut dot = String::new();
    dot.push_str("digraph channels {\n");
    dot.push_str("  rankdir=LR;\n");
    dot.push_str("  node [fontname=\"Helvetica\", fontsize=10];\n");
    let by_id: HashMap<&str, &LayerStyle> = layers.iter().map(|l| (l.id.as_str(), l)).collect();
    for node in graph.nodes() {
        match by_id.get(node.id.as_str()) {
            Some(l) => {
                let cell = |h: &HalfStyle, side: &str| {
                    format!(
                        "<TD BGCOLOR=\"{}{}\">{side} {}</TD>",
                        h.color,
                        alpha_hex(h.alpha),
                        h.size
                    )
                };
                let _ = writeln!(
                    dot,
                    "  {} [shape={}, fixedsize=true, width={:.3}, style=filled, fillcolor=\"#ffffff\", \
                     label=<<TABLE BORDER=\"0\" CELLBORDER=\"1\" CELLSPACING=\"0\"><TR><TD COLSPAN=\"2\">{}</TD></TR><TR>{}{}</TR></TABLE>>];",
                    quote(&l.id),
                    l.shape,
                    l.width.max(0.3),
                    escape_html(&l.id),
                    cell(&l.input, "IN"),
                    cell(&l.output, "OUT"),
                );
            }
            None => {
                let _ = writeln!(dot, "  {} [shape=plaintext, label={}];", quote(&node.id), quote(&node.id));
            }
        }
    }
    for (a, b) in graph.edges() {
        let _ = writeln!(dot, "  {} -> {};", quote(a), quote(b));
    }
    dot.push_str("}\n");

    Ok(Visualization {
        layers,
        groups,
        edges: graph.edges().to_vec(),
        dot,
    })
}
