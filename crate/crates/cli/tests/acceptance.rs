//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p chansearch-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::FRAC_PI_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chansearch::container::WeightMap;
use chansearch::dependency::{extract_dependencies, oracle_dependencies, DependencyList, GroupRef};
use chansearch::distill::{expand, shrink, transfer_to_shape};
use chansearch::graph::parse_graph;
use chansearch::init::init_weights;
use chansearch::linalg::{singular_values, Matrix};
use chansearch::metric::{group_momentum, quality_condition, summarize, GroupMetricState};
use chansearch::plan::ChannelPlan;
use chansearch::search::{
    accept, apply_scale, run_search, scale_factor, temperature, Algorithm, SearchConfig, SearchResult, UniformSource,
};
use chansearch::tensor::{Mode, UnfoldedMatrix, WeightTensor};
use chansearch::trainer::toy::toy_train;
use chansearch::trainer::{MockTrainer, ResponseSurface, ToyTrainer};
use common::{
    fd_check, fixture, fixture_path, graph_shapes, op_graphs, oracle_fold, oracle_resize, oracle_unfold, random_dag,
    random_matrix, reference_qc, reference_singular_values, rowspace_error,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Constant(f64);

impl UniformSource for Constant {
    fn uniform(&mut self) -> f64 {
        self.0
    }
}

fn dependency_oracle() -> Check {
    let start = Instant::now();
    let (mut checked, mut seed, mut edges, mut add_edges) = (0, 0, 0, 0);
    while checked < 100 {
        let dag = random_dag(seed, 30);
        match (extract_dependencies(&dag.graph), oracle_dependencies(&dag.graph)) {
            (Ok(a), Ok(b)) => {
                ensure!(a == b, "random dag {seed}: partitions differ");
                edges += dag.edges;
                add_edges += dag.add_edges;
                checked += 1;
            }
            (Err(_), Err(_)) => {}
            _ => return Err(format!("random dag {seed}: only one implementation rejected it")),
        }
        seed += 1;
    }
    ensure!(add_edges * 5 >= edges, "only {add_edges}/{edges} skip/add edges");
    for name in ["resnet34.json", "darts7.json", "fig3_mini.json"] {
        let g = parse_graph(&fixture(name)).map_err(|e| e.to_string())?;
        let a = extract_dependencies(&g).map_err(|e| e.to_string())?;
        ensure!(a == oracle_dependencies(&g).map_err(|e| e.to_string())?, "{name}: partitions differ");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("100 random DAGs ({add_edges}/{edges} skip/add edges) and 3 fixtures in {secs:.2} s"))
}

fn qc_correctness() -> Check {
    let tau = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (rows, cols) = (rng.gen_range(1..=64), rng.gen_range(1..=256));
        let mut m = random_matrix(&mut rng, rows, cols);
        if case % 3 == 0 {
            for i in 0..rows {
                let s = 10f64.powf(-4.0 * i as f64 / rows as f64);
                for j in 0..cols {
                    m[(i, j)] *= s;
                }
            }
        }
        let ours = singular_values(&m).map_err(|e| e.to_string())?;
        let reference = reference_singular_values(&m);
        for (a, b) in ours.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
        let s = summarize(ours, rows, tau).map_err(|e| e.to_string())?;
        let (rank, kappa, qc) = reference_qc(&reference, rows, tau);
        ensure!(s.effective_rank == rank, "case {case}: rank {} vs {rank}", s.effective_rank);
        match (s.condition, kappa) {
            (Some(a), Some(b)) => ensure!((a - b).abs() < 1e-6 * b.max(1.0), "case {case}: kappa {a} vs {b}"),
            (a, b) => ensure!(a == b, "case {case}: kappa {a:?} vs {b:?}"),
        }
        worst = worst.max((s.qc - qc).abs());
    }
    ensure!(worst < 1e-6, "max deviation {worst:e}");

    for case in 0..10_000 {
        let (rows, cols) = (rng.gen_range(1..=8), rng.gen_range(1..=12));
        let m = match case % 4 {
            0 => Matrix::zeros(rows, cols),
            1 => {
                let u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Matrix::from_vec(rows, cols, u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect())
            }
            2 => {
                let c = rng.gen_range(0.1..10.0);
                let mut m = Matrix::zeros(rows, cols);
                for i in 0..rows.min(cols) {
                    m[(i, i)] = c;
                }
                m
            }
            _ => random_matrix(&mut rng, rows, cols),
        };
        let s = summarize(singular_values(&m).map_err(|e| e.to_string())?, rows, rng.gen_range(1e-4..0.5))
            .map_err(|e| e.to_string())?;
        ensure!((0.0..=FRAC_PI_2).contains(&s.qc), "case {case}: qc {}", s.qc);
        ensure!(case % 4 != 0 || s.qc == 0.0, "zero matrix gave {}", s.qc);
        ensure!(case % 4 != 2 || s.qc == FRAC_PI_2, "kappa=1 gave {}", s.qc);
        let hi = rng.gen_range(0.0..100.0);
        let q = quality_condition(rng.gen_range(0.0..=1.0), hi, rng.gen_range(0.0..=hi));
        ensure!((0.0..=FRAC_PI_2).contains(&q), "direct qc {q}");
    }

    let mut scale_worst: f64 = 0.0;
    for _ in 0..200 {
        let (rows, cols) = (rng.gen_range(1..=16), rng.gen_range(1..=32));
        let m = random_matrix(&mut rng, rows, cols);
        let c = 10f64.powf(rng.gen_range(-3.0..3.0));
        let scaled = Matrix::from_vec(rows, cols, m.as_slice().iter().map(|v| v * c).collect());
        let qc = |m: &Matrix| summarize(singular_values(m).unwrap(), rows, tau).unwrap().qc;
        scale_worst = scale_worst.max((qc(&m) - qc(&scaled)).abs());
    }
    ensure!(scale_worst < 1e-9, "scale invariance off by {scale_worst:e}");
    Ok(format!(
        "oracle deviation {worst:.1e}, 10000 range cases, scale deviation {scale_worst:.1e}"
    ))
}

fn momentum_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut state = GroupMetricState::new(0);
    for t in 0..35 {
        let metrics: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..FRAC_PI_2)).collect();
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        state = group_momentum(&state, &metrics, 0.0, t + 1).map_err(|e| e.to_string())?;
        ensure!(state.m_curr == mean, "gamma 0, step {t}: {} vs {mean}", state.m_curr);
    }
    let gamma = 0.9;
    let mut state = GroupMetricState::new(0);
    let mut means = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 0..35 {
        let metrics: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..FRAC_PI_2)).collect();
        means.push(metrics.iter().sum::<f64>() / metrics.len() as f64);
        state = group_momentum(&state, &metrics, gamma, t + 1).map_err(|e| e.to_string())?;
        let closed: f64 = means.iter().enumerate().map(|(s, m)| gamma.powi((t - s) as i32) * m).sum();
        worst = worst.max((state.m_curr - closed).abs());
    }
    ensure!(worst < 1e-12, "gamma 0.9 off by {worst:e}");
    Ok(format!("gamma 0 exact, gamma 0.9 closed form within {worst:.1e}"))
}

fn clip_rounding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let s: usize = rng.gen_range(1..=2048);
        let dm: f64 = rng.gen_range(-3.0..3.0);
        let f = scale_factor(dm, [0.5, 2.0]);
        ensure!((0.5..=2.0).contains(&f), "factor {f} for dm {dm}");
        let next = apply_scale(s, f, 1);
        ensure!(next >= 1 && next <= 2 * s, "{s} * {f} -> {next}");
    }
    Ok("10000 random steps".into())
}

fn unfolded(m: Matrix) -> UnfoldedMatrix {
    UnfoldedMatrix {
        mode: Mode::Out,
        matrix: m,
    }
}

fn distillation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..100 {
        let (rows, cols) = (rng.gen_range(2..=24), rng.gen_range(1..=40));
        let m = random_matrix(&mut rng, rows, cols);
        let k = rng.gen_range(1..rows);
        let out = shrink(&unfolded(m.clone()), k).map_err(|e| e.to_string())?.matrix;
        let sv = singular_values(&out).map_err(|e| e.to_string())?;
        ensure!(sv.len() <= k || sv[k] < 1e-8 * sv[0], "case {case}: rank above {k}");
        let ours = rowspace_error(&m, &out);
        let deletion = rowspace_error(&m, &m.submatrix(k, cols));
        ensure!(ours <= deletion + 1e-9, "case {case}: error {ours} above row deletion {deletion}");
    }
    for case in 0..100 {
        let (rows, cols) = (rng.gen_range(1..=16), rng.gen_range(1..=20));
        let m = random_matrix(&mut rng, rows, cols);
        let out = expand(&unfolded(m.clone()), rng.gen_range(rows + 1..=2 * rows))
            .map_err(|e| e.to_string())?
            .matrix;
        for i in 0..rows {
            let same = out.row(i).iter().zip(m.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "expand case {case}: row {i} changed");
        }
    }
    let bits = |w: &WeightTensor| w.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let k = [1, 3][rng.gen_range(0..2)];
        let (cin, cout) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let (nin, nout) = (rng.gen_range(1..=2 * cin), rng.gen_range(1..=2 * cout));
        let shape = [k, k, cin, cout];
        let t = WeightTensor::new("w", shape, (0..k * k * cin * cout).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .map_err(|e| e.to_string())?;
        let same = transfer_to_shape(&t, shape).map_err(|e| e.to_string())?;
        ensure!(bits(&same) == bits(&t), "case {case}: same-shape transfer changed the weights");
        let ours = transfer_to_shape(&t, [k, k, nin, nout]).map_err(|e| e.to_string())?;
        let data: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
        let mid_shape = [k, k, cin, nout];
        let mid = oracle_fold(&oracle_resize(&oracle_unfold(&data, shape, 3), nout), mid_shape, 3);
        let mid: Vec<f64> = mid.iter().map(|&v| f64::from(v as f32)).collect();
        let end = oracle_fold(&oracle_resize(&oracle_unfold(&mid, mid_shape, 2), nin), [k, k, nin, nout], 2);
        for (a, b) in ours.data().iter().zip(&end) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
    }
    ensure!(worst < 1e-5, "transfer off by {worst:e}");
    Ok(format!("100 shrink, 100 expand, 50 transfers within {worst:.1e}"))
}

fn sizes(r: &SearchResult) -> Vec<Vec<usize>> {
    r.trials.iter().map(|t| t.plan.sizes.clone()).collect()
}

fn sa_mechanics() -> Check {
    let temp = temperature(1, 35, 5.0);
    ensure!((temp - 4.857_142_857_142_857).abs() < 1e-9, "temperature {temp}");
    let zeta = accept(0.1, temp, 5.0, &mut Constant(0.0)).zeta;
    let oracle = (-1.0f64 / (5.0 * 0.1 * temp)).exp();
    ensure!((zeta - oracle).abs() < 1e-6, "zeta {zeta} vs oracle {oracle}");
    let at_end = accept(0.1, temperature(35, 35, 5.0), 5.0, &mut Constant(0.0));
    ensure!(at_end.zeta == 0.0 && !at_end.accepted, "zeta at t=T is {}", at_end.zeta);
    for dm in [0.0, -1e-9, -0.3] {
        let r = accept(dm, temp, 5.0, &mut Constant(0.0));
        ensure!(r.zeta == 0.0 && !r.accepted, "zeta for dm {dm} is {}", r.zeta);
    }

    let g = parse_graph(&fixture("fig3_mini.json")).map_err(|e| e.to_string())?;
    let d = extract_dependencies(&g).map_err(|e| e.to_string())?;
    let w = init_weights(&graph_shapes(&g), 0).map_err(|e| e.to_string())?;
    for gamma in [0.0, 0.5, 0.9] {
        let cfg = SearchConfig {
            trials: 4,
            epochs: 1,
            gamma,
            ..SearchConfig::default()
        };
        let greedy = run_search(&g, &d, w.clone(), &cfg, &mut ToyTrainer, &mut Constant(1.0))
            .map_err(|e| e.to_string())?;
        let sa_cfg = SearchConfig {
            algorithm: Algorithm::Sa,
            ..cfg
        };
        let sa = run_search(&g, &d, w.clone(), &sa_cfg, &mut ToyTrainer, &mut Constant(1.0))
            .map_err(|e| e.to_string())?;
        ensure!(sizes(&greedy.result) == sizes(&sa.result), "gamma {gamma}: sizes differ");
    }
    Ok(format!("temperature {temp:.10}, zeta {zeta:.10}, all-reject SA equals greedy"))
}

fn weight_bits(w: &WeightMap) -> Vec<(String, Vec<u32>)> {
    w.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn toy_trainer() -> Check {
    let graphs = op_graphs();
    for (name, g) in &graphs {
        fd_check(g, 17).map_err(|e| format!("{name}: {e}"))?;
    }
    let g = parse_graph(&fixture("fig3_mini.json")).map_err(|e| e.to_string())?;
    let w = init_weights(&graph_shapes(&g), 1).map_err(|e| e.to_string())?;
    let a = toy_train(&g, &w, 2, 7, 9).map_err(|e| e.to_string())?;
    let b = toy_train(&g, &w, 2, 7, 9).map_err(|e| e.to_string())?;
    ensure!(weight_bits(&a.weights) == weight_bits(&b.weights), "weights differ between runs");
    ensure!(a.train_loss.to_bits() == b.train_loss.to_bits(), "loss differs between runs");
    Ok(format!("finite differences on {} op graphs, byte-exact reruns", graphs.len()))
}

fn chansearch(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_chansearch"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

/// Every file below `dir` except the manifest, which holds timestamps.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p != dir.join("manifest.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn desk_search(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    chansearch(&[
        "search",
        &fixture_path("darts7.json").to_string_lossy(),
        "--init-size",
        "16",
        "--trials",
        "5",
        "--epochs",
        "1",
        "--trainer",
        "toy",
        "--seed",
        "3",
        "-o",
        &out.to_string_lossy(),
    ])?;
    Ok(start.elapsed())
}

/// Best size per group after each trial, rebuilt from the traces.
fn best_history(r: &SearchResult) -> Vec<BTreeMap<GroupRef, (f64, usize)>> {
    let mut best: BTreeMap<GroupRef, (f64, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    for t in &r.trials {
        for g in &t.groups {
            let e = best.entry(g.group).or_insert((f64::NEG_INFINITY, 0));
            if g.m_curr > e.0 {
                *e = (g.m_curr, g.size_before);
            }
        }
        out.push(best.clone());
    }
    out
}

fn desk_run(root: &Path) -> Check {
    let (a, b) = (root.join("a"), root.join("b"));
    let ta = desk_search(&a)?;
    let tb = desk_search(&b)?;
    let limit = Duration::from_secs(120);
    ensure!(ta < limit && tb < limit, "runs took {ta:?} and {tb:?}");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    ensure!(sa.len() >= 10, "run directory holds only {} files", sa.len());
    ensure!(sa == sb, "reruns differ");

    let g = parse_graph(&fixture("fig3_mini.json")).map_err(|e| e.to_string())?;
    let d = extract_dependencies(&g).map_err(|e| e.to_string())?;
    let w = init_weights(&ChannelPlan::from_graph(&g, &d).and_then(|p| p.layer_shapes(&g, &d)).map_err(|e| e.to_string())?, 0)
        .map_err(|e| e.to_string())?;
    let surface = ResponseSurface::Step {
        threshold: 24,
        below: FRAC_PI_2,
        above: (0.5f64 / 0.75).atan(),
    };
    let cfg = SearchConfig {
        epochs: 1,
        ..SearchConfig::default()
    };
    let r = run_search(&g, &d, w, &cfg, &mut MockTrainer::new(surface), &mut Constant(1.0))
        .map_err(|e| e.to_string())?
        .result;
    let h = best_history(&r);
    let n = h.len();
    let best = |m: &BTreeMap<GroupRef, (f64, usize)>| m.values().map(|v| v.1).collect::<Vec<_>>();
    ensure!(best(&h[n - 1]) == best(&h[n - 2]), "best sizes moved in the last trial");
    Ok(format!(
        "darts7 runs in {:.1} s and {:.1} s, {} files identical; mock best sizes {:?} over trials {}..{n}",
        ta.as_secs_f64(),
        tb.as_secs_f64(),
        sa.len(),
        best(&h[n - 1]),
        n - 1
    ))
}

fn trace_fidelity(run: &Path) -> Check {
    let csv = chansearch(&["export-traces", &run.to_string_lossy(), "--what", "cumulative"])?;
    let deps = DependencyList::from_json(&std::fs::read_to_string(run.join("deps.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let (trial, value) = line.split_once(',').ok_or("malformed csv row")?;
        let value: f64 = value.parse().map_err(|_| format!("bad value `{value}`"))?;
        let path = run.join("traces").join(format!("metrics_trial_{trial}.json"));
        let trace: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let qc: HashMap<String, f64> = trace["endpoints"]
            .as_array()
            .ok_or("trace has no endpoints")?
            .iter()
            .map(|e| (e["endpoint"].as_str().unwrap().to_string(), e["qc"].as_f64().unwrap()))
            .collect();
        let (mut sum, mut count) = (0.0, 0usize);
        for r in deps.all_refs() {
            for e in deps.endpoints(r) {
                sum += qc.get(&e.to_string()).ok_or_else(|| format!("trial {trial}: no qc for {e}"))?;
                count += 1;
            }
        }
        let expected = sum / count as f64;
        ensure!(value.to_bits() == expected.to_bits(), "trial {trial}: csv {value} vs traces {expected}");
        rows += 1;
    }
    ensure!(rows == 5, "{rows} csv rows for 5 trials");
    Ok(format!("{rows} trials recomputed exactly"))
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let desk = root.path().join("a");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("dependency oracle equivalence", Box::new(dependency_oracle)),
        ("QC correctness", Box::new(qc_correctness)),
        ("momentum algebra", Box::new(momentum_algebra)),
        ("clip and rounding", Box::new(clip_rounding)),
        ("knowledge distillation", Box::new(distillation)),
        ("annealing mechanics", Box::new(sa_mechanics)),
        ("toy trainer", Box::new(toy_trainer)),
        ("end-to-end desk run", Box::new(|| desk_run(root.path()))),
        ("trace fidelity", Box::new(move || trace_fidelity(&desk))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
