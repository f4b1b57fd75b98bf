//! Dense row-major tensors.

use crate::error::{Result, SspError};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 5;

/// A dense tensor of rank 1 to 5, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(op: &str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(SspError::contract(op, format!("rank {} outside 1..={MAX_RANK}", shape.len())));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(SspError::contract(op, format!("axis {axis} has zero extent")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let count = check_shape("Tensor::new", shape)?;
        if count != data.len() {
            return Err(SspError::contract("Tensor::new", format!("shape {shape:?} needs {count} elements, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for internally computed shapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let count = check_shape("Tensor::full", shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; count] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let count = check_shape("Tensor::from_fn", shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: (0..count).map(&mut f).collect() })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the elements under a new shape with the same count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshaped(shape)
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        let count = check_shape("reshape", shape)?;
        if count != self.data.len() {
            return Err(SspError::contract(
                "reshape",
                format!("cannot reshape {:?} ({} elements) to {shape:?}", self.shape, self.data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    /// Reorders axes; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = [false; MAX_RANK];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(SspError::contract("permute", format!("{axes:?} is not a permutation of {rank} axes")));
        }
        let src_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut index = vec![0usize; rank];
        for _ in 0..self.len() {
            let offset: usize = index.iter().zip(axes).map(|(&i, &a)| i * src_strides[a]).sum();
            out.push(self.data[offset]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major element strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(t.permute(&[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
            let t = Tensor::<f64>::from_fn(&[a, b, c], |i| i as f64 * 0.5).unwrap();
            let r = t.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
            prop_assert_eq!(r, t);
        }

        #[test]
        fn permute_preserves_count(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let t = Tensor::<f32>::from_fn(&[a, b, c], |i| i as f32).unwrap();
            let p = t.permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(p.len(), t.len());
            let back = p.permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
