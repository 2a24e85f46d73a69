//! Carries trained weights across a channel-size change.
//!
//! The tensor is unfolded along the resized channel dimension. Growing the
//! dimension appends the last `D` rows in reverse order (a reflection about
//! the boundary row); shrinking it keeps the leading singular triplets:
//! `W' = U[..k, ..k] * S[..k] * V[:, ..k]^T`, a `k x cols` matrix of rank at
//! most `k`. The output side is resized before the input side.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::WeightMap;
use crate::error::{Error, Result};
use crate::graph::Side;
use crate::linalg::{svd, Matrix};
use crate::tensor::{refold, unfold, Shape, UnfoldedMatrix, WeightTensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub layer_id: String,
    pub side: Side,
    pub old_size: usize,
    pub new_size: usize,
}

impl ResizePlan {
    pub fn new(layer_id: impl Into<String>, side: Side, old_size: usize, new_size: usize) -> Result<Self> {
        let plan = Self {
            layer_id: layer_id.into(),
            side,
            old_size,
            new_size,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if self.old_size == 0 || self.new_size == 0 {
            return Err(Error::invalid(format!(
                "resize of `{}` needs sizes >= 1, got {} -> {}",
                self.layer_id, self.old_size, self.new_size
            )));
        }
        if self.new_size > 2 * self.old_size {
            return Err(Error::invalid(format!(
                "resize of `{}` from {} to {} exceeds the 2x reflection limit",
                self.layer_id, self.old_size, self.new_size
            )));
        }
        Ok(())
    }
}

/// Appends rows `n-1, n-2, ..., n-D` (zero-based) to reach `new_rows`.
pub fn expand(m: &UnfoldedMatrix, new_rows: usize) -> Result<UnfoldedMatrix> {
    let n = m.rows();
    if new_rows <= n {
        return Err(Error::invalid(format!("expand needs more rows than {n}, got {new_rows}")));
    }
    if new_rows > 2 * n {
        return Err(Error::invalid(format!(
            "cannot reflect {n} rows out to {new_rows}; at most {} are available",
            2 * n
        )));
    }
    let cols = m.cols();
    let extra = new_rows - n;
    let mut data = Vec::with_capacity(new_rows * cols);
    data.extend_from_slice(m.matrix.as_slice());
    for k in 0..extra {
        data.extend_from_slice(m.matrix.row(n - 1 - k));
    }
    Ok(UnfoldedMatrix {
        mode: m.mode,
        matrix: Matrix::from_vec(new_rows, cols, data),
    })
}

/// Row-compresses to `new_rows` keeping the dominant singular subspace.
pub fn shrink(m: &UnfoldedMatrix, new_rows: usize) -> Result<UnfoldedMatrix> {
    let n = m.rows();
    if new_rows < 1 {
        return Err(Error::invalid("shrink target must be at least 1 row"));
    }
    if new_rows >= n {
        return Err(Error::invalid(format!("shrink needs fewer rows than {n}, got {new_rows}")));
    }
    let dec = svd(&m.matrix)?;
    // With fewer columns than rows the spectrum has only `cols` entries.
    let k = new_rows.min(dec.singular_values.len());
    let cols = m.cols();
    let mut out = Matrix::zeros(new_rows, cols);
    for i in 0..new_rows {
        for j in 0..k {
            let coef = dec.u[(i, j)] * dec.singular_values[j];
            if coef == 0.0 {
                continue;
            }
            for c in 0..cols {
                out[(i, c)] += coef * dec.v[(c, j)];
            }
        }
    }
    Ok(UnfoldedMatrix {
        mode: m.mode,
        matrix: out,
    })
}

/// Dispatches to [`expand`], [`shrink`] or a copy.
pub fn resize_rows(m: &UnfoldedMatrix, new_rows: usize) -> Result<UnfoldedMatrix> {
    use std::cmp::Ordering::*;
    match new_rows.cmp(&m.rows()) {
        Greater => expand(m, new_rows),
        Less => shrink(m, new_rows),
        Equal => Ok(m.clone()),
    }
}

fn apply(tensor: WeightTensor, plan: &ResizePlan) -> Result<WeightTensor> {
    plan.validate()?;
    let mode = plan.side.mode();
    if plan.layer_id != tensor.layer_id {
        return Err(Error::invalid(format!(
            "resize plan for `{}` applied to `{}`",
            plan.layer_id, tensor.layer_id
        )));
    }
    let current = tensor.dim(mode);
    if plan.old_size != current {
        return Err(Error::invalid(format!(
            "resize plan for `{}` expects {} {:?} channels, tensor has {current}",
            plan.layer_id, plan.old_size, plan.side
        )));
    }
    if plan.new_size == current {
        return Ok(tensor);
    }
    let resized = resize_rows(&unfold(&tensor, mode), plan.new_size)?;
    let mut shape = tensor.shape();
    shape[mode.axis()] = plan.new_size;
    refold(&resized, tensor.layer_id, shape)
}

/// Resizes the output side, then the input side.
pub fn transfer(
    old: &WeightTensor,
    plan_in: Option<&ResizePlan>,
    plan_out: Option<&ResizePlan>,
) -> Result<WeightTensor> {
    if plan_in.is_some_and(|p| p.side != Side::In) || plan_out.is_some_and(|p| p.side != Side::Out) {
        return Err(Error::invalid("input/output resize plans given on the wrong side"));
    }
    let mut t = old.clone();
    if let Some(p) = plan_out {
        t = apply(t, p)?;
    }
    if let Some(p) = plan_in {
        t = apply(t, p)?;
    }
    Ok(t)
}

/// Transfers a tensor to a new `(.., in, out)` shape; kernel dims must match.
pub fn transfer_to_shape(old: &WeightTensor, target: Shape) -> Result<WeightTensor> {
    let shape = old.shape();
    if shape[0] != target[0] || shape[1] != target[1] {
        return Err(Error::invalid(format!(
            "`{}`: kernel {shape:?} cannot become {target:?}",
            old.layer_id
        )));
    }
    let plan = |side: Side, from: usize, to: usize| -> Result<Option<ResizePlan>> {
        if from == to {
            Ok(None)
        } else {
            ResizePlan::new(old.layer_id.clone(), side, from, to).map(Some)
        }
    };
    let pin = plan(Side::In, shape[2], target[2])?;
    let pout = plan(Side::Out, shape[3], target[3])?;
    transfer(old, pin.as_ref(), pout.as_ref())
}

/// Transfers every tensor to its target shape, in parallel.
pub fn transfer_all(weights: &WeightMap, targets: &BTreeMap<String, Shape>) -> Result<WeightMap> {
    let items: Vec<(&String, &WeightTensor)> = weights.iter().collect();
    let out: Result<Vec<(String, WeightTensor)>> = items
        .par_iter()
        .map(|(id, t)| {
            let target = targets
                .get(*id)
                .ok_or_else(|| Error::format(id.as_str(), "no target shape for layer"))?;
            let moved = transfer_to_shape(t, *target)?;
            Ok(((*id).clone(), moved))
        })
        .collect();
    let out: WeightMap = out?.into_iter().collect();
    if let Some(missing) = targets.keys().find(|k| !out.contains_key(*k)) {
        return Err(Error::format(missing.as_str(), "no weights for layer"));
    }
    Ok(out)
}
