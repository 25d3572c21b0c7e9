//! Dense N-dimensional tensors and the scalar trait shared by all numerics.
//!
//! Feature maps use NCHW order. Storage is contiguous row-major. Training
//! runs in `f32`; gradient-check tests instantiate the same code with `f64`.
//!
//! Setting `HGD_CHECK_FINITE=1` (or building with debug assertions) makes
//! every tape operation assert that its output is finite.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Element type for all tensor math. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Whether per-op finiteness assertions are active.
pub fn finite_checks_enabled() -> bool {
    static ENABLED: OnceLock<bool> = OnceLock::new();
    *ENABLED.get_or_init(|| {
        cfg!(debug_assertions) || std::env::var("HGD_CHECK_FINITE").as_deref() == Ok("1")
    })
}

/// Dense tensor: a shape and a contiguous row-major value buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Single-element tensor (used for loss values).
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dim(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copy of image `n` from an NCHW batch, keeping a batch dim of 1.
    pub fn select_batch(&self, n: usize) -> Result<Tensor<S>> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(Error::Dim(format!("batch index {n} out of {batch}")));
        }
        let per = c * h * w;
        Ok(Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Stack single-image NCHW tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dim("concat_batch of nothing".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut total = 0usize;
        for p in parts {
            let (n, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::Dim(format!(
                    "concat_batch shapes differ: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            total += n;
        }
        let mut data = Vec::with_capacity(total * c * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(&[total, c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elements through `f64` (used to run f32 models under f64 checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Flat index into an NCHW buffer.
#[inline]
pub fn idx4(shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + h) * shape[3] + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_size() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn select_batch_copies_one_image() {
        let t = Tensor::<f32>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b1 = t.select_batch(1).unwrap();
        assert_eq!(b1.shape(), &[1, 1, 1, 2]);
        assert_eq!(b1.data(), &[3.0, 4.0]);
        assert!(t.select_batch(2).is_err());
    }

    #[test]
    fn zip_map_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }
}
