mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use chansearch::dependency::{extract_dependencies, oracle_dependencies, DependencyList};
use chansearch::graph::parse_graph;
use chansearch::plan::ChannelPlan;
use chansearch::visualize::export_visualizer;
use common::{fixture, partition, random_dag, validate_dot};

/// Graphs that add together two concat outputs are rejected by both
/// implementations; such seeds are checked for agreement and skipped.
#[test]
fn random_dags_match_the_oracle() {
    let start = Instant::now();
    let (mut edges, mut add_edges, mut checked, mut rejected) = (0, 0, 0, 0);
    let mut seed = 0;
    while checked < 100 {
        let dag = random_dag(seed, 30);
        seed += 1;
        match (extract_dependencies(&dag.graph), oracle_dependencies(&dag.graph)) {
            (Ok(fast), Ok(slow)) => {
                assert_eq!(fast, slow, "seed {}", seed - 1);
                fast.check_partition(&dag.graph).unwrap();
                edges += dag.edges;
                add_edges += dag.add_edges;
                checked += 1;
            }
            (Err(_), Err(_)) => rejected += 1,
            (a, b) => panic!("seed {}: implementations disagree: {a:?} vs {b:?}", seed - 1),
        }
    }
    assert!(rejected < 20, "{rejected} graphs rejected");
    assert!(add_edges * 5 >= edges, "{add_edges}/{edges} add edges");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn fixtures_match_the_oracle() {
    for name in ["resnet34.json", "darts7.json", "fig3_mini.json"] {
        let g = parse_graph(&fixture(name)).unwrap();
        let d = extract_dependencies(&g).unwrap();
        assert_eq!(d, oracle_dependencies(&g).unwrap(), "{name}");
        // Shapes in the fixtures agree with the groups.
        ChannelPlan::from_graph(&g, &d).unwrap();
    }
}

#[test]
fn resnet34_matches_answer_file() {
    let g = parse_graph(&fixture("resnet34.json")).unwrap();
    assert_eq!(g.weighted_layers().count(), 37);
    let d = extract_dependencies(&g).unwrap();
    let answer: serde_json::Value = serde_json::from_str(&fixture("resnet34.partition.json")).unwrap();
    let expected: BTreeSet<BTreeSet<String>> = answer["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|grp| grp.as_array().unwrap().iter().map(|e| e.as_str().unwrap().to_string()).collect())
        .collect();
    let (groups, derived) = partition(&d);
    assert!(derived.is_empty());
    assert_eq!(groups, expected);
    assert_eq!(d.groups.len(), 22);
    // One group per stage holds every residual add of that stage.
    let stage1 = d
        .groups
        .iter()
        .find(|g| g.endpoints.iter().any(|e| e.to_string() == "conv1.out"))
        .unwrap();
    let labels: BTreeSet<String> = stage1.endpoints.iter().map(|e| e.to_string()).collect();
    for k in 0..3 {
        assert!(labels.contains(&format!("layer1.{k}.conv_b.out")));
        assert!(labels.contains(&format!("layer1.{k}.conv_a.in")));
    }
    assert!(labels.contains("layer2.0.downsample.in"));
}

#[test]
fn fig3_groups() {
    let g = parse_graph(&fixture("fig3_mini.json")).unwrap();
    let d = extract_dependencies(&g).unwrap();
    let names: Vec<Vec<String>> = d
        .groups
        .iter()
        .map(|g| g.endpoints.iter().map(|e| e.to_string()).collect())
        .collect();
    assert_eq!(
        names,
        vec![
            vec!["conv1.in"],
            vec!["conv1.out", "conv2.in", "conv2.out", "conv3.in"],
            vec!["conv3.out", "fc.in"],
            vec!["fc.out"],
        ]
    );
    let fixed: Vec<bool> = d.groups.iter().map(|g| g.fixed).collect();
    assert_eq!(fixed, vec![true, false, false, true]);
}

#[test]
fn darts7_has_derived_concat_groups() {
    let g = parse_graph(&fixture("darts7.json")).unwrap();
    let d = extract_dependencies(&g).unwrap();
    assert_eq!(d.derived.len(), 7);
    let p = ChannelPlan::uniform(&g, &d, 16).unwrap();
    assert!(p.derived.iter().all(|&s| s == 64));
    // Determinism of ordering.
    let again: DependencyList = extract_dependencies(&g).unwrap();
    assert_eq!(d, again);
    let round = DependencyList::from_json(&d.to_json().unwrap()).unwrap();
    assert_eq!(round, d);
}

#[test]
fn visualizer_dot_parses_for_fixtures() {
    for name in ["resnet34.json", "darts7.json", "fig3_mini.json"] {
        let g = parse_graph(&fixture(name)).unwrap();
        let d = extract_dependencies(&g).unwrap();
        let p = ChannelPlan::from_graph(&g, &d).unwrap();
        let v = export_visualizer(&g, &d, &p).unwrap();
        let (nodes, edges) = validate_dot(&v.dot).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(nodes.len(), g.len());
        assert_eq!(edges.len(), g.edges().len());
    }
}

#[test]
fn dot_validator_rejects_garbage() {
    assert!(validate_dot("digraph { a -> }").is_err());
    assert!(validate_dot("graph { a -> b }").is_err());
    assert!(validate_dot("digraph { a [label=<x<b>y</b>>]; a -> b }").is_ok());
    assert!(validate_dot("digraph g { \"a\" -> \"b\" [color=red]; }").is_ok());
    assert!(validate_dot("digraph { a [label=\"x\" }").is_err());
}
