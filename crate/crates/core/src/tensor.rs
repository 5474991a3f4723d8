//! Dense NCHW tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch of feature maps laid out as `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    /// Values per batch element.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Concatenates two tensors with equal batch and spatial size along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3] {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape, b.shape
            )));
        }
        let shape = [a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3]];
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut a = Self::zeros([n, first, h, w]);
        let mut b = Self::zeros([n, c - first, h, w]);
        for i in 0..n {
            let s = self.sample(i);
            a.sample_mut(i).copy_from_slice(&s[..first * hw]);
            b.sample_mut(i).copy_from_slice(&s[first * hw..]);
        }
        (a, b)
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }
}
