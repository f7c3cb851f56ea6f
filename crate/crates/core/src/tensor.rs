//! Dense row-major `f32` tensors.
//!
//! Images travel as `[N, C, H, W]`. Reductions always run in flat index order
//! so single-threaded results are bit-reproducible.

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::rng_from_seed;

pub const MAX_RANK: usize = 4;

/// Tensor dimensions: 1 to 4 axes, each at least 1.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(shape_err!("rank must be 1..={MAX_RANK}, got {}", dims.len()));
        }
        if dims.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {dims:?}"));
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = count
                .checked_mul(d)
                .ok_or_else(|| shape_err!("element count of {dims:?} overflows"))?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Unpacks a rank-4 shape as `(n, c, h, w)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected [N, C, H, W], got {self:?}")),
        }
    }

    pub fn matrix(&self) -> Result<(usize, usize)> {
        match self.0[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a matrix, got {self:?}")),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Vec<usize> {
        s.0
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, fill: f32) -> Tensor {
        let data = vec![fill; shape.numel()];
        Tensor { shape, data }
    }

    pub fn zeros(dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::new(Shape::new(dims)?, 0.0))
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} elements, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor::new(other.shape.clone(), 0.0)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.dims()[self.shape.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Copies batch items `[start, end)` of an `[N, ...]` tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = self.dims()[0];
        if start >= end || end > n {
            return Err(shape_err!("batch range {start}..{end} outside 0..{n}"));
        }
        let item = self.numel() / n;
        let mut dims = self.dims().to_vec();
        dims[0] = end - start;
        Tensor::from_vec(&dims, self.data[start * item..end * item].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        if first.shape.rank() == MAX_RANK {
            return Err(shape_err!("cannot stack rank-{MAX_RANK} tensors"));
        }
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.check_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Tensor::from_vec(&dims, data)
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(
            f,
            "Tensor{:?} {:?}",
            self.shape,
            &self.data[..self.data.len().min(SHOWN)]
        )?;
        if self.data.len() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

/// Standard matrix product of `a: [m, k]` and `b: [k, n]`.
///
/// Each output element accumulates its `k` products in ascending `k` order
/// starting from `0.0`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape().matrix()?;
    let (k2, n) = b.shape().matrix()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![0.0f32; m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a.data()[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Transpose of a matrix.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.shape().matrix()?;
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// He-normal initialization: samples from `N(0, sqrt(2 / fan_in))`.
pub fn he_init(shape: Shape, fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Config("he_init: fan_in must be at least 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let data = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn new_fills() {
        let z = Tensor::new(Shape::new([2, 2]).unwrap(), 0.0);
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::new(Shape::new([3]).unwrap(), 1.5);
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
        let s = Tensor::new(Shape::new([1, 1, 1, 1]).unwrap(), -2.0);
        assert_eq!(s.data(), &[-2.0]);
    }

    #[test]
    fn shape_rejects_bad_dims() {
        assert!(matches!(Shape::new([2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Shape::new(Vec::<usize>::new()), Err(Error::Shape(_))));
        assert!(matches!(Shape::new([1, 1, 1, 1, 1]), Err(Error::Shape(_))));
        assert!(matches!(Shape::new([usize::MAX, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn add_cases() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(a.add(&t(&[2], &[0.0, 0.0])).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(a.add(&t(&[2], &[-1.0, -2.0])).unwrap().data(), &[0.0, 0.0]);
        let b = t(&[2], &[1.5, 2.5]);
        assert_eq!(b.add(&t(&[2], &[0.5, 0.5])).unwrap().data(), &[2.0, 3.0]);
        assert!(matches!(a.add(&t(&[1, 2], &[0.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let zero = t(&[2, 1], &[0.0, 0.0]);
        assert_eq!(matmul(&a, &zero).unwrap().data(), &[0.0, 0.0]);
        let v = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &v).unwrap().data(), &[17.0, 39.0]);
        assert!(matches!(matmul(&a, &t(&[3, 1], &[0.0; 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.dims(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn he_init_is_seeded() {
        let shape = Shape::new([4, 5]).unwrap();
        let a = he_init(shape.clone(), 10, 3).unwrap();
        let b = he_init(shape.clone(), 10, 3).unwrap();
        let c = he_init(shape, 10, 4).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn he_init_variance() {
        let x = he_init(Shape::new([10_000]).unwrap(), 1_000_000, 11).unwrap();
        let n = x.numel() as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 2e-6).abs() / 2e-6 < 0.1, "variance {var}");
        assert!(matches!(he_init(Shape::new([2]).unwrap(), 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn stack_and_slice() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.dims(), &[2, 2]);
        assert_eq!(s.slice_batch(0, 1).unwrap().data(), a.data());
        assert!(s.slice_batch(1, 3).is_err());
    }
}
