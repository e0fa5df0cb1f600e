//! Dense NCHW tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A batch of multi-channel planes stored row-major as `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

/// A single normalized RGB image: a `[1, 3, h, w]` tensor with values in `[0, 1]`.
pub type Image01<T> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::arg(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Spatial size `(h, w)`.
    pub fn hw(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// The contiguous `[c, h, w]` block of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copy of sample `i` as a batch of one.
    pub fn sample_tensor(&self, i: usize) -> Tensor<T> {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(i).to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + y) * ww + x]
    }

    /// Plane `(n, c)` as a slice of length `h * w`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Stacks batches along `n`. All parts must share `[c, h, w]`.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::arg(format!(
                    "stack: shape {:?} does not match {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Repeats a batch-of-one `count` times along `n`.
    pub fn repeat(&self, count: usize) -> Tensor<T> {
        debug_assert_eq!(self.shape[0], 1);
        let mut data = Vec::with_capacity(self.len() * count);
        for _ in 0..count {
            data.extend_from_slice(&self.data);
        }
        Tensor {
            shape: [count, self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Concatenates along the channel axis. All parts must share `n, h, w`.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("cannot concatenate zero tensors"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::arg(format!(
                    "channel concat: shape {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(s));
            }
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Extracts channels `[from, from + count)`.
    pub fn channel_slice(&self, from: usize, count: usize) -> Tensor<T> {
        let [n, c, h, w] = self.shape;
        debug_assert!(from + count <= c);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * count * hw);
        for s in 0..n {
            let base = s * c * hw;
            data.extend_from_slice(&self.data[base + from * hw..base + (from + count) * hw]);
        }
        Tensor {
            shape: [n, count, h, w],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }
}
