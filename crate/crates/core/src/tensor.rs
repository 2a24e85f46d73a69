//! Four-dimensional convolution weights and their mode-d unfoldings.
//!
//! A weight tensor is laid out row-major over `(kernel_h, kernel_w, in, out)`.
//! Unfolding along a mode produces a matrix whose row `i` holds every element
//! whose index along that mode equals `i`; the columns run row-major over the
//! remaining three dimensions in ascending dimension order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One of the four tensor dimensions, numbered 1..=4 as in `(kh, kw, in, out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Mode {
    KernelH,
    KernelW,
    In,
    Out,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::KernelH, Mode::KernelW, Mode::In, Mode::Out];

    /// Zero-based axis index into a shape array.
    pub fn axis(self) -> usize {
        match self {
            Mode::KernelH => 0,
            Mode::KernelW => 1,
            Mode::In => 2,
            Mode::Out => 3,
        }
    }

    pub fn number(self) -> u8 {
        self.axis() as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Mode::KernelH),
            2 => Ok(Mode::KernelW),
            3 => Ok(Mode::In),
            4 => Ok(Mode::Out),
            other => Err(Error::invalid(format!("unfold mode must be 1..=4, got {other}"))),
        }
    }
}

impl TryFrom<u8> for Mode {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        Mode::from_number(n)
    }
}

impl From<Mode> for u8 {
    fn from(m: Mode) -> u8 {
        m.number()
    }
}

pub type Shape = [usize; 4];

pub fn element_count(shape: &Shape) -> usize {
    shape.iter().product()
}

fn strides(shape: &Shape) -> [usize; 4] {
    [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub layer_id: String,
    shape: Shape,
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(layer_id: impl Into<String>, shape: Shape, data: Vec<f32>) -> Result<Self> {
        let layer_id = layer_id.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::format(&layer_id, format!("shape {shape:?} has a zero dimension")));
        }
        if data.len() != element_count(&shape) {
            return Err(Error::format(
                &layer_id,
                format!("shape {shape:?} needs {} values, got {}", element_count(&shape), data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(&layer_id, format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { layer_id, shape, data })
    }

    pub fn zeros(layer_id: impl Into<String>, shape: Shape) -> Result<Self> {
        Self::new(layer_id, shape, vec![0.0; element_count(&shape)])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dim(&self, mode: Mode) -> usize {
        self.shape[mode.axis()]
    }
}

/// A tensor flattened along one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedMatrix {
    pub mode: Mode,
    pub matrix: Matrix,
}

impl UnfoldedMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }
}

/// Maps `(row, col)` of the mode unfolding back to a flat tensor offset.
fn unfold_offsets(shape: &Shape, mode: Mode) -> impl Iterator<Item = usize> {
    let st = strides(shape);
    let axis = mode.axis();
    let rest: Vec<usize> = (0..4).filter(|&a| a != axis).collect();
    let (r0, r1, r2) = (rest[0], rest[1], rest[2]);
    let (n0, n1, n2) = (shape[r0], shape[r1], shape[r2]);
    let (s0, s1, s2, sa) = (st[r0], st[r1], st[r2], st[axis]);
    (0..shape[axis]).flat_map(move |i| {
        (0..n0).flat_map(move |a| {
            (0..n1).flat_map(move |b| (0..n2).map(move |c| i * sa + a * s0 + b * s1 + c * s2))
        })
    })
}

pub fn unfold(tensor: &WeightTensor, mode: Mode) -> UnfoldedMatrix {
    let shape = tensor.shape;
    let rows = shape[mode.axis()];
    let cols = element_count(&shape) / rows;
    let data = unfold_offsets(&shape, mode)
        .map(|off| f64::from(tensor.data[off]))
        .collect();
    UnfoldedMatrix {
        mode,
        matrix: Matrix::from_vec(rows, cols, data),
    }
}

/// Inverse of [`unfold`]; values are rounded to `f32` on the way back.
pub fn refold(
    unfolded: &UnfoldedMatrix,
    layer_id: impl Into<String>,
    shape: Shape,
) -> Result<WeightTensor> {
    let mode = unfolded.mode;
    let rows = shape[mode.axis()];
    let total = element_count(&shape);
    if rows == 0 || unfolded.rows() != rows || unfolded.rows() * unfolded.cols() != total {
        return Err(Error::invalid(format!(
            "cannot refold a {}x{} matrix along mode {} into shape {shape:?}",
            unfolded.rows(),
            unfolded.cols(),
            mode.number()
        )));
    }
    let mut data = vec![0f32; total];
    for (off, &v) in unfold_offsets(&shape, mode).zip(unfolded.matrix.as_slice()) {
        data[off] = v as f32;
    }
    WeightTensor::new(layer_id, shape, data)
}
