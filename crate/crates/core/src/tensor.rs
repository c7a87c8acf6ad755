//! Dense row-major tensors.
//!
//! Shapes are plain `Vec<usize>`; a scalar is the empty shape. All graph
//! operations and the optimizer work on these buffers directly.

use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, E::one())
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    pub fn scalar_value(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", other))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
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

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += other * scale.
    pub fn add_scaled(&mut self, other: &Self, scale: E) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> E {
        let mut acc = E::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    /// A(m,k) * B(k,n) for rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm(m, k, n, &self.data, false, &other.data, false, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Bit patterns of every element, for bitwise-equality assertions.
    pub fn to_bits(&self) -> Vec<u64> {
        self.data.iter().map(|x| x.to_bits_u64()).collect()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_bits() == other.to_bits()
    }

    /// Lossy conversion between element widths (used when loading a
    /// checkpoint written at a different precision is explicitly allowed —
    /// the checkpoint layer itself rejects that by default).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let r = Tensor::new(vec![2, 3], vec![0.0f32; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn matmul_shape_algebra() {
        let a = Tensor::<f32>::ones(&[2, 3]);
        let b = Tensor::<f32>::ones(&[3, 4]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f32>::ones(&[2, 3]);
        let b = Tensor::<f32>::ones(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::scalar(2.5f64);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.scalar_value(), 2.5);
    }

    #[test]
    fn bitwise_eq_detects_sign_of_zero() {
        let a = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0f32]).unwrap();
        assert_eq!(a, b); // numeric equality
        assert!(!a.bitwise_eq(&b)); // but different bits
    }
}
