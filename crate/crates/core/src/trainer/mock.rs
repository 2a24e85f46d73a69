//! A trainer that ignores the data and writes weights with prescribed QC.
//!
//! Each searchable endpoint gets a target QC from a [`ResponseSurface`]
//! evaluated at its group size. The weights are sparse: every nonzero entry
//! sits at a distinct (kernel position, in, out) triple chosen so that both
//! the IN and OUT unfoldings have orthogonal rows. Their singular values are
//! then just the row norms, which are picked to realise the target spectrum.
//! The squared entries form a transport plan between the two row-norm
//! profiles; kernel positions come from an edge colouring of that plan.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dependency::GroupRef;
use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, Side};
use crate::metric::DEFAULT_RANK_THRESHOLD;
use crate::tensor::{Shape, WeightTensor};
use crate::trainer::{TrainRequest, TrainResponse, Trainer};

/// Target QC as a function of group size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseSurface {
    Constant { qc: f64 },
    /// `below` for sizes up to and including `threshold`, `above` beyond.
    Step { threshold: usize, below: f64, above: f64 },
    /// `low + (high - low) * exp(-((size - center) / width)^2)`.
    Peak { center: f64, width: f64, high: f64, low: f64 },
}

impl ResponseSurface {
    pub fn qc(&self, size: usize) -> f64 {
        match *self {
            ResponseSurface::Constant { qc } => qc,
            ResponseSurface::Step { threshold, below, above } => {
                if size <= threshold {
                    below
                } else {
                    above
                }
            }
            ResponseSurface::Peak { center, width, high, low } => {
                let z = (size as f64 - center) / width;
                low + (high - low) * (-z * z).exp()
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        let values: Vec<f64> = match s {
            ResponseSurface::Constant { qc } => vec![qc],
            ResponseSurface::Step { below, above, .. } => vec![below, above],
            ResponseSurface::Peak { width, high, low, .. } => {
                if !(width > 0.0) {
                    return Err(Error::invalid("peak width must be positive"));
                }
                vec![high, low]
            }
        };
        if let Some(v) = values.iter().find(|v| !(0.0..=FRAC_PI_2).contains(*v)) {
            return Err(Error::invalid(format!("surface value {v} outside [0, pi/2]")));
        }
        Ok(s)
    }
}

/// Margin kept between the smallest retained singular value and the rank cut.
const CUT_MARGIN: f64 = 2.0;

/// A descending spectrum of length `n` with at most `max_rank` nonzero
/// values whose QC is `target`.
pub fn target_spectrum(n: usize, max_rank: usize, target: f64) -> Result<Vec<f64>> {
    let tau = DEFAULT_RANK_THRESHOLD;
    if n == 0 || max_rank == 0 {
        return Err(Error::invalid("channel size must be at least 1"));
    }
    let max_rank = max_rank.min(n);
    if !(0.0..=FRAC_PI_2).contains(&target) {
        return Err(Error::invalid(format!("target QC {target} outside [0, pi/2]")));
    }
    if target == 0.0 {
        return Ok(vec![0.0; n]);
    }
    if FRAC_PI_2 - target < 1e-12 {
        let mut sv = vec![0.0; n];
        sv[..max_rank].fill(1.0);
        return Ok(sv);
    }
    // QC = atan(r / (1 - 1/kappa)), so r < tan(QC) and 1/kappa = 1 - r / tan(QC).
    // Two or more retained values are needed for kappa > 1. Aim for kappa near 2.
    let t = target.tan();
    let ok = |k: usize| k >= 2 && 1.0 - (k as f64 / n as f64) / t > CUT_MARGIN * tau;
    let aim = ((n as f64 * t / 2.0).round() as usize).clamp(2, max_rank.max(2)).min(max_rank);
    let k = (2..=aim).rev().find(|&k| ok(k)).ok_or_else(|| {
        Error::invalid(format!("QC {target} is unreachable with {n} channels"))
    })?;
    let inv_kappa = 1.0 - (k as f64 / n as f64) / t;
    let mut sv = vec![0.0; n];
    for (j, s) in sv.iter_mut().take(k).enumerate() {
        *s = inv_kappa.powf(j as f64 / (k - 1) as f64);
    }
    sv[k - 1] = inv_kappa;
    Ok(sv)
}

fn normalised_energy(sv: &[f64]) -> Vec<f64> {
    let total: f64 = sv.iter().map(|s| s * s).sum();
    sv.iter().map(|s| s * s / total).collect()
}

/// North-west corner transport plan between two mass profiles.
/// Consecutive edges share an endpoint.
fn transport(rows: &[f64], cols: &[f64]) -> Vec<(usize, usize, f64)> {
    let eps = 1e-14;
    let rn = rows.iter().filter(|&&m| m > 0.0).count();
    let cn = cols.iter().filter(|&&m| m > 0.0).count();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (rows[0], cols[0]);
    let mut edges = Vec::new();
    while i < rn && j < cn {
        let x = ra.min(rb);
        edges.push((i, j, x));
        ra -= x;
        rb -= x;
        let (next_i, next_j) = (ra <= eps, rb <= eps);
        if next_i {
            i += 1;
            ra = rows.get(i).copied().unwrap_or(0.0);
        }
        if next_j {
            j += 1;
            rb = cols.get(j).copied().unwrap_or(0.0);
        }
        if !next_i && !next_j {
            break;
        }
    }
    edges
}

/// Builds a tensor whose IN and OUT unfoldings have the given spectra
/// (up to a common scale). `None` leaves a side unconstrained.
pub fn build_tensor(id: &str, shape: Shape, spec_in: Option<Vec<f64>>, spec_out: Option<Vec<f64>>) -> Result<WeightTensor> {
    let [kh, kw, cin, cout] = shape;
    let positions = kh * kw;
    let fail = |m: String| Error::format(id, m);
    let flat = |n: usize| vec![1.0; n];
    let (sin, sout) = if positions == 1 {
        // Both unfoldings are the same matrix up to transposition.
        let nz = |s: &[f64]| s.iter().copied().filter(|&v| v > 0.0).collect::<Vec<f64>>();
        let common = match (&spec_in, &spec_out) {
            (Some(a), Some(b)) => {
                let (a, b) = (nz(a), nz(b));
                let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x / a[0] - y / b[0]).abs() < 1e-9);
                if !same {
                    return Err(fail("1x1 layer cannot realise different IN and OUT spectra".into()));
                }
                a
            }
            (Some(a), None) => nz(a),
            (None, Some(b)) => nz(b),
            (None, None) => flat(cin.min(cout)),
        };
        if common.len() > cin.min(cout) {
            return Err(fail(format!(
                "{} nonzero singular values do not fit a {cin}x{cout} 1x1 layer",
                common.len()
            )));
        }
        let pad = |n: usize| {
            let mut v = common.clone();
            v.resize(n, 0.0);
            v
        };
        (pad(cin), pad(cout))
    } else {
        let padded = |n: usize, rank: usize| {
            let mut v = flat(rank.min(n));
            v.resize(n, 0.0);
            v
        };
        (
            spec_in.unwrap_or_else(|| padded(cin, positions * cout)),
            spec_out.unwrap_or_else(|| padded(cout, positions * cin)),
        )
    };
    if sin.len() != cin || sout.len() != cout {
        return Err(fail("spectrum length does not match the channel count".into()));
    }
    let zero_in = sin.iter().all(|&s| s == 0.0);
    let zero_out = sout.iter().all(|&s| s == 0.0);
    let mut data = vec![0f32; shape.iter().product()];
    if zero_in || zero_out {
        if zero_in != zero_out {
            return Err(fail("a zero spectrum on one side forces zero on the other".into()));
        }
        return WeightTensor::new(id, shape, data);
    }
    let edges = transport(&normalised_energy(&sin), &normalised_energy(&sout));
    let mut used_row = vec![Vec::<usize>::new(); cin];
    let mut used_col = vec![Vec::<usize>::new(); cout];
    let scale = ((cin * cout) as f64).sqrt();
    for (i, o, mass) in edges {
        let p = (0..positions)
            .find(|p| !used_row[i].contains(p) && !used_col[o].contains(p))
            .ok_or_else(|| {
                fail(format!(
                    "spectra need more than {positions} kernel positions per channel; \
                     the sizes are too unbalanced"
                ))
            })?;
        used_row[i].push(p);
        used_col[o].push(p);
        data[(p * cin + i) * cout + o] = (mass.sqrt() * scale) as f32;
    }
    WeightTensor::new(id, shape, data)
}

/// Serves weights shaped by a [`ResponseSurface`]; training is instantaneous.
#[derive(Debug, Clone)]
pub struct MockTrainer {
    pub surface: ResponseSurface,
}

impl MockTrainer {
    pub fn new(surface: ResponseSurface) -> Self {
        Self { surface }
    }

    fn target(&self, request: &TrainRequest<'_>, endpoint: &ChannelEndpoint, shape: Shape) -> Result<Option<Vec<f64>>> {
        let n = shape[endpoint.side.mode().axis()];
        match request.deps.group_of(endpoint) {
            Some(GroupRef::Group(g)) if !request.deps.groups[g].fixed => {
                let size = request.plan.sizes[g];
                if size != n {
                    return Err(Error::invalid(format!(
                        "`{endpoint}` has {n} channels but its group is planned at {size}"
                    )));
                }
                let [kh, kw, cin, cout] = shape;
                let max_rank = match endpoint.side {
                    Side::In => cin.min(kh * kw * cout),
                    Side::Out => cout.min(kh * kw * cin),
                };
                target_spectrum(n, max_rank, self.surface.qc(size)).map(Some)
            }
            Some(_) => Ok(None),
            None => Err(Error::Dependency(format!("endpoint `{endpoint}` is not in any group"))),
        }
    }
}

impl Trainer for MockTrainer {
    fn name(&self) -> &str {
        "mock"
    }

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainResponse> {
        let wrap = |e: Error| Error::Trainer {
            trial: request.trial,
            message: e.to_string(),
        };
        if request.plan.sizes.is_empty() || request.weights.is_empty() {
            return Err(wrap(Error::invalid("empty channel plan")));
        }
        let mut weights = request.weights.clone();
        for (id, t) in weights.iter_mut() {
            let shape = t.shape();
            let sin = self.target(request, &ChannelEndpoint::input(id), shape).map_err(wrap)?;
            let sout = self.target(request, &ChannelEndpoint::output(id), shape).map_err(wrap)?;
            *t = build_tensor(id, shape, sin, sout).map_err(wrap)?;
        }
        Ok(TrainResponse {
            trial: request.trial,
            weights,
            train_loss: 0.0,
            train_acc: 0.0,
        })
    }
}
