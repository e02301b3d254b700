//! Dense tensors: a flat buffer plus shape metadata.
//!
//! Activations use N×C×H×W layout (row-major). The element type is generic
//! so the same code runs in f32 for training and f64 for gradient checking.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign, NumCast};
use rand::distributions::uniform::SampleUniform;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// Element trait: everything the numeric code needs from a float type.
pub trait Elem:
    Float
    + NumAssign
    + NumCast
    + FromPrimitive
    + SampleUniform
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Elem for f32 {}
impl Elem for f64 {}

/// Cast an f64 constant into the element type.
#[inline]
pub fn c<T: Elem>(x: f64) -> T {
    T::from(x).expect("constant fits element type")
}

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform draw in [lo, hi), deterministic under the given rng.
    pub fn rand_uniform(shape: &[usize], lo: T, hi: T, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new(lo, hi);
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape_mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// View a 3-D C×H×W tensor as 1×C×H×W; 4-D passes through.
    pub fn as_batched(&self) -> Result<(Tensor<T>, bool)> {
        match self.shape.len() {
            4 => Ok((self.clone(), false)),
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(&self.shape);
                Ok((self.reshape(&s)?, true))
            }
            _ => Err(Error::invalid(format!(
                "expected 3-D or 4-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert elements to another float width.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("cast"))
                .collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

/// Right-aligned broadcast check: can `b` expand to `a`?
/// Every trailing dim of `b` must be 1 or equal to the matching dim of `a`;
/// missing leading dims of `b` count as 1. Scalars broadcast to anything.
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let offset = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &bd)| bd == 1 || bd == a[offset + i])
}

/// Element-wise binary op where `b` broadcasts to `a`'s shape.
pub fn zip_broadcast<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    context: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    if !broadcastable(a.shape(), b.shape()) {
        return Err(Error::shape_mismatch(context, a.shape(), b.shape()));
    }
    let out_shape = a.shape().to_vec();
    let rank = out_shape.len();
    let mut b_shape = vec![1; rank];
    let offset = rank - b.shape().len();
    b_shape[offset..].copy_from_slice(b.shape());
    let b_strides = contiguous_strides(&b_shape);

    let mut data = Vec::with_capacity(a.numel());
    let mut idx = vec![0usize; rank];
    for &av in a.data() {
        let mut boff = 0usize;
        for d in 0..rank {
            if b_shape[d] != 1 {
                boff += idx[d] * b_strides[d];
            }
        }
        data.push(f(av, b.data()[boff]));
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Reduce a full-shape gradient back onto the broadcast operand's shape
/// by summing over expanded axes.
pub fn reduce_to_shape<T: Elem>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let rank = grad.shape().len();
    let mut t_shape = vec![1; rank];
    let offset = rank - target.len();
    t_shape[offset..].copy_from_slice(target);
    let t_strides = contiguous_strides(&t_shape);

    let mut out = Tensor::zeros(&t_shape);
    let mut idx = vec![0usize; rank];
    for &g in grad.data() {
        let mut toff = 0usize;
        for d in 0..rank {
            if t_shape[d] != 1 {
                toff += idx[d] * t_strides[d];
            }
        }
        out.data_mut()[toff] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < grad.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out.reshape(target).expect("reduce_to_shape numel")
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
