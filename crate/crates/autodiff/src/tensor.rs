//! Dense row-major tensors and the broadcasting rules shared by the tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::TensorError;

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Value at a multi-dimensional index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut offset = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            offset = offset * dim + ix;
        }
        self.data[offset]
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Numpy-style broadcast of two shapes (right aligned, size-1 axes stretch).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// How an input of some shape maps onto a broadcast output, picked so the hot
/// cases avoid the odometer walk.
#[derive(Clone, Copy)]
pub(crate) enum Mapping<'a> {
    Same,
    Single,
    /// Input repeats every `n` output elements.
    Cycle(usize),
    /// Each input element covers a run of `n` consecutive output elements.
    Run(usize),
    General(&'a [usize]),
}

pub(crate) fn mapping<'a>(shape: &[usize], out_shape: &[usize], bstrides: &'a [usize]) -> Mapping<'a> {
    let n: usize = shape.iter().product();
    let out_n: usize = out_shape.iter().product();
    if n == out_n {
        return Mapping::Same;
    }
    if n == 1 {
        return Mapping::Single;
    }
    let pad = out_shape.len() - shape.len();
    // Leading axes broadcast, trailing axes match.
    let first_real = (0..shape.len()).find(|&i| shape[i] != 1).unwrap_or(shape.len());
    if shape[first_real..] == out_shape[pad + first_real..] {
        return Mapping::Cycle(n);
    }
    // Leading axes match, trailing axes are singletons.
    let last_real = (0..shape.len()).rev().find(|&i| shape[i] != 1).map_or(0, |i| i + 1);
    if (0..pad).all(|i| out_shape[i] == 1) && shape[..last_real] == out_shape[pad..pad + last_real] {
        return Mapping::Run(out_n / n);
    }
    Mapping::General(bstrides)
}

/// Calls `f(out_index, in_index)` for every output element in order.
pub(crate) fn for_each_mapped(out_shape: &[usize], map: Mapping<'_>, mut f: impl FnMut(usize, usize)) {
    let out_n: usize = out_shape.iter().product();
    match map {
        Mapping::Same => (0..out_n).for_each(|i| f(i, i)),
        Mapping::Single => (0..out_n).for_each(|i| f(i, 0)),
        Mapping::Cycle(n) => (0..out_n).for_each(|i| f(i, i % n)),
        Mapping::Run(n) => (0..out_n).for_each(|i| f(i, i / n)),
        Mapping::General(bstrides) => {
            let rank = out_shape.len();
            let mut idx = vec![0usize; rank];
            let mut off = 0usize;
            for i in 0..out_n {
                f(i, off);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    off += bstrides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    off -= bstrides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
    }
}

/// Sums `grad` (shaped like `out_shape`) back down to `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], out_shape: &[usize], shape: &[usize]) -> Vec<T> {
    let n: usize = shape.iter().product();
    if n == grad.len() {
        return grad.to_vec();
    }
    let bs = broadcast_strides(shape, out_shape);
    let map = mapping(shape, out_shape, &bs);
    let mut out = vec![T::zero(); n];
    for_each_mapped(out_shape, map, |i, j| out[j] = out[j] + grad[i]);
    out
}
