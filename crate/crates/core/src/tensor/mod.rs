//! Dense row-major tensors, a tape-based reverse-mode differentiation
//! engine and the Adam optimizer.

mod kernels;
mod optim;
mod param;
mod tape;

pub use kernels::{matmul_2d, transpose_2d};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but {} were supplied",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum::<usize>();
        self.data[off]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {:?} are not a permutation of rank {}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = self.strides();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        if self.numel() > 0 {
            // innermost axis handled as a strided run
            let inner = *out_shape.last().unwrap_or(&1);
            let inner_stride = *perm_strides.last().unwrap_or(&1);
            let outer_shape = &out_shape[..rank.saturating_sub(1)];
            let mut idx = vec![0usize; outer_shape.len()];
            loop {
                let base: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
                if rank == 0 {
                    out.push(self.data[0]);
                } else {
                    out.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
                }
                if !advance(&mut idx, outer_shape) {
                    break;
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Picks `indices` along `axis`, in the given order.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "index_select",
                format!("axis {} out of range for shape {:?}", axis, self.shape),
            ));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::shape(
                "index_select",
                format!("index {} out of range for axis {} of extent {}", bad, axis, extent),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data })
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.index_select(axis, &idx)
    }

    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {} out of range", axis)));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", p.shape, first.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let run = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Odometer increment over `shape`; returns false once it wraps around.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
