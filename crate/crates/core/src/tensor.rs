// SPDX-License-Identifier: Apache-2.0

//! Dense row-major tensors of `f64`.
//!
//! Images and feature maps use the `channels × height × width` layout. A flat
//! offset `k` and a `(c, row, col)` triple are related by
//! `k = c·H·W + row·W + col`.
//!
//! Random tensors come from [`Tensor::seeded_gaussian`]: a ChaCha8 stream
//! seeded with `ChaCha8Rng::seed_from_u64(seed)` feeding the ziggurat
//! standard-normal sampler of `rand_distr`, one draw per element in flat order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor shape must have at least one extent");
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return shape_err(format!("extent {pos} of shape {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Unit impulse: 1 at flat offset `k`, 0 elsewhere.
    pub fn delta(shape: &[usize], k: usize) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let len = t.len();
        *t.data.get_mut(k).ok_or(Error::Index { index: k, len })? = 1.0;
        Ok(t)
    }

    /// I.i.d. standard normal samples, bit-identical for identical `(shape, seed)`.
    pub fn seeded_gaussian(shape: &[usize], seed: u64) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        self.data.get(k).copied().ok_or(Error::Index {
            index: k,
            len: self.data.len(),
        })
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    /// `a·x + y`.
    pub fn axpy(a: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        x.same_shape(y, "axpy")?;
        let data = x.data.iter().zip(&y.data).map(|(xi, yi)| a * xi + yi).collect();
        Ok(Tensor {
            shape: x.shape.clone(),
            data,
        })
    }

    pub fn inner(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm2(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of the first maximum (smallest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Interprets the shape as an image: `[C,H,W]`, `[H,W]` → `C=1`,
    /// `[N]` → `1×1×N`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        image_dims(&self.shape)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        [n] => Ok((1, 1, n)),
        _ => shape_err(format!("shape {shape:?} is not an image layout")),
    }
}

/// Flat offset of `(c, row, col)` within `shape` (see [`image_dims`]).
pub fn flat_index(shape: &[usize], c: usize, row: usize, col: usize) -> Result<usize> {
    let (cc, h, w) = image_dims(shape)?;
    let len = cc * h * w;
    if c >= cc || row >= h || col >= w {
        return Err(Error::Shape(format!(
            "pixel ({c}, {row}, {col}) outside {cc}×{h}×{w} ({len} elements)"
        )));
    }
    Ok(c * h * w + row * w + col)
}

/// Inverse of [`flat_index`].
pub fn unflat_index(shape: &[usize], k: usize) -> Result<(usize, usize, usize)> {
    let (cc, h, w) = image_dims(shape)?;
    if k >= cc * h * w {
        return Err(Error::Index {
            index: k,
            len: cc * h * w,
        });
    }
    Ok((k / (h * w), (k / w) % h, k % w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_and_delta() {
        let z = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert!(Tensor::zeros(&[1, 0, 2]).is_err());
        assert!(Tensor::zeros(&[]).is_err());

        let d = Tensor::delta(&[1, 1, 3], 1).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            Tensor::delta(&[1, 1, 3], 3),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn delta_partition_of_unity_and_sifting() {
        let shape = [2, 2, 3];
        let t = Tensor::seeded_gaussian(&shape, 5).unwrap();
        let mut acc = Tensor::zeros(&shape).unwrap();
        for k in 0..12 {
            let d = Tensor::delta(&shape, k).unwrap();
            assert_eq!(d.inner(&t).unwrap(), t.data()[k]);
            acc.add_assign(&d).unwrap();
        }
        assert_eq!(acc, Tensor::ones(&shape).unwrap());
        let z = Tensor::zeros(&shape).unwrap();
        assert_eq!(z.add(&t).unwrap(), t);
        assert_eq!(z.inner(&t).unwrap(), 0.0);
    }

    #[test]
    fn vector_space_ops() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(Tensor::axpy(2.0, &x, &y).unwrap().data(), &[5.0, 8.0]);
        assert_eq!(x.inner(&y).unwrap(), 11.0);
        assert_eq!(y.norm2(), 5.0);
        let bad = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(x.inner(&bad), Err(Error::Shape(_))));
        assert!(Tensor::axpy(1.0, &x, &bad).is_err());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = Tensor::seeded_gaussian(&[3, 4, 5], 42).unwrap();
        let b = Tensor::seeded_gaussian(&[3, 4, 5], 42).unwrap();
        assert_eq!(a, b);
        let c = Tensor::seeded_gaussian(&[3, 4, 5], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let t = Tensor::seeded_gaussian(&[n], 7).unwrap();
        let mean = t.sum() / n as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // 3σ bounds: mean 3/sqrt(n) = 0.003, variance 3·sqrt(2/n) ≈ 0.0042
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.99..1.01).contains(&var), "variance {var}");
    }

    #[test]
    fn index_bijection() {
        let shape = [3, 4, 5];
        for k in 0..60 {
            let (c, r, col) = unflat_index(&shape, k).unwrap();
            assert_eq!(flat_index(&shape, c, r, col).unwrap(), k);
        }
        assert_eq!(flat_index(&shape, 1, 2, 3).unwrap(), 20 + 10 + 3);
        assert!(flat_index(&shape, 0, 4, 0).is_err());
        assert!(unflat_index(&shape, 60).is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0..100.0f64, n),
                prop::collection::vec(-100.0..100.0f64, n),
                prop::collection::vec(-100.0..100.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn inner_symmetric_bilinear((a, b, c) in vec_pair(), s in -10.0..10.0f64) {
            let n = a.len();
            let x = Tensor::new(&[n], a).unwrap();
            let y = Tensor::new(&[n], b).unwrap();
            let z = Tensor::new(&[n], c).unwrap();
            let xy = x.inner(&y).unwrap();
            prop_assert_eq!(xy, y.inner(&x).unwrap());

            let lhs = Tensor::axpy(s, &x, &z).unwrap().inner(&y).unwrap();
            let rhs = s * xy + z.inner(&y).unwrap();
            let scale = (s.abs() * x.norm2() + z.norm2()) * y.norm2();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1e-300));
        }

        #[test]
        fn norm_is_absolutely_homogeneous((a, _, _) in vec_pair(), s in -10.0..10.0f64) {
            let x = Tensor::new(&[a.len()], a).unwrap();
            let lhs = x.scale(s).norm2();
            let rhs = s.abs() * x.norm2();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }
    }
}
