//! Spectral layer scoring.
//!
//! Each channel endpoint is scored by unfolding its layer's weights along the
//! endpoint's channel dimension and looking at the singular values:
//!
//! * effective rank `N'`: singular values above `tau * sigma_1`,
//! * rank ratio `r = N' / N` with `N` the channel count,
//! * condition `kappa = sigma_1 / sigma_N'`,
//! * quality condition `QC = atan(r / (1 - 1/kappa))`, in `[0, pi/2]`.
//!
//! Group scores accumulate across trials with momentum:
//! `m_t = gamma * m_{t-1} + mean(QC over the group's endpoints)`.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::WeightMap;
use crate::dependency::DependencyList;
use crate::error::{Error, Result};
use crate::graph::{ChannelEndpoint, Side};
use crate::linalg::singular_values;
use crate::tensor::{unfold, WeightTensor};

pub const DEFAULT_RANK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub channel_size: usize,
    pub rank_ratio: f64,
    /// `None` when the effective rank is zero.
    pub condition: Option<f64>,
    pub qc: f64,
    /// Energy (sum of squares) of the singular values below the threshold.
    pub discarded_energy: f64,
}

pub fn check_threshold(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rank threshold must lie in (0, 1), got {tau}")))
    }
}

/// Number of singular values strictly above `tau * sigma_1`.
pub fn effective_rank(sv: &[f64], tau: f64) -> Result<usize> {
    check_threshold(tau)?;
    if sv.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("singular values must be sorted in descending order"));
    }
    if sv.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("singular values must be finite and non-negative"));
    }
    let Some(&top) = sv.first() else {
        return Ok(0);
    };
    let cut = tau * top;
    Ok(sv.iter().take_while(|&&s| s > cut).count())
}

/// QC from the rank ratio and the retained extreme singular values.
///
/// `N' = 0` gives 0 and `kappa = 1` gives `pi/2`.
pub fn quality_condition(rank_ratio: f64, sigma_max: f64, sigma_min: f64) -> f64 {
    if rank_ratio <= 0.0 || sigma_max <= 0.0 {
        return 0.0;
    }
    // 1 - 1/kappa, written to avoid cancellation when kappa is close to 1.
    let gap = (sigma_max - sigma_min) / sigma_max;
    if gap <= 0.0 {
        return FRAC_PI_2;
    }
    (rank_ratio / gap).atan().clamp(0.0, FRAC_PI_2)
}

/// Summary for a spectrum computed on a matrix with `channel_size` rows.
pub fn summarize(sv: Vec<f64>, channel_size: usize, tau: f64) -> Result<SpectralSummary> {
    if channel_size == 0 {
        return Err(Error::invalid("channel size must be at least 1"));
    }
    let rank = effective_rank(&sv, tau)?;
    let rank_ratio = rank as f64 / channel_size as f64;
    let (condition, qc) = if rank == 0 {
        (None, 0.0)
    } else {
        let (hi, lo) = (sv[0], sv[rank - 1]);
        (Some(hi / lo), quality_condition(rank_ratio, hi, lo))
    };
    let discarded_energy = sv[rank..].iter().map(|s| s * s).sum();
    Ok(SpectralSummary {
        singular_values: sv,
        effective_rank: rank,
        channel_size,
        rank_ratio,
        condition,
        qc,
        discarded_energy,
    })
}

pub fn layer_metric(tensor: &WeightTensor, side: Side, tau: f64) -> Result<SpectralSummary> {
    let m = unfold(tensor, side.mode());
    let channel_size = m.rows();
    let sv = singular_values(&m.matrix)?;
    summarize(sv, channel_size, tau)
}

/// Scores many endpoints in parallel; results come back in input order.
pub fn endpoint_metrics(
    weights: &WeightMap,
    endpoints: &[ChannelEndpoint],
    tau: f64,
) -> Result<Vec<SpectralSummary>> {
    endpoints
        .par_iter()
        .map(|e| {
            let t = weights
                .get(&e.layer_id)
                .ok_or_else(|| Error::format(&e.layer_id, "no weights for layer"))?;
            let s = layer_metric(t, e.side, tau)?;
            if !s.qc.is_finite() {
                return Err(Error::NonFinite(format!("QC of `{e}`")));
            }
            Ok(s)
        })
        .collect()
}

/// Momentum state of one dependency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricState {
    pub group: usize,
    pub m_prev: f64,
    pub m_curr: f64,
    pub delta: f64,
    pub best_m: f64,
    pub best_size: Option<usize>,
}

impl GroupMetricState {
    /// Fresh state: `m^0 = 0`, no best yet.
    pub fn new(group: usize) -> Self {
        Self::with_previous(group, 0.0)
    }

    /// State whose latest momentum value is `m`.
    pub fn with_previous(group: usize, m: f64) -> Self {
        Self {
            group,
            m_prev: m,
            m_curr: m,
            delta: 0.0,
            best_m: f64::NEG_INFINITY,
            best_size: None,
        }
    }
}

/// One momentum step. `size` is the group's channel count at which
/// `layer_metrics` were measured; it becomes `best_size` when `m` improves.
pub fn group_momentum(
    state: &GroupMetricState,
    layer_metrics: &[f64],
    gamma: f64,
    size: usize,
) -> Result<GroupMetricState> {
    if layer_metrics.is_empty() {
        return Err(Error::invalid(format!("group {} has no endpoint metrics", state.group)));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {gamma}")));
    }
    let mean = layer_metrics.iter().sum::<f64>() / layer_metrics.len() as f64;
    let m_prev = state.m_curr;
    let m_curr = gamma * m_prev + mean;
    if !m_curr.is_finite() {
        return Err(Error::NonFinite(format!("momentum of group {}", state.group)));
    }
    let mut next = GroupMetricState {
        group: state.group,
        m_prev,
        m_curr,
        delta: m_curr - m_prev,
        best_m: state.best_m,
        best_size: state.best_size,
    };
    if m_curr > next.best_m {
        next.best_m = m_curr;
        next.best_size = Some(size);
    }
    Ok(next)
}

/// Mean endpoint metric over every endpoint of every group.
pub fn cumulative_metric(deps: &DependencyList, metrics: &HashMap<ChannelEndpoint, f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in deps.all_refs() {
        for e in deps.endpoints(r) {
            let m = metrics
                .get(e)
                .ok_or_else(|| Error::invalid(format!("no metric for endpoint `{e}`")))?;
            sum += m;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}
