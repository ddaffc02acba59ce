// SPDX-License-Identifier: Apache-2.0

use super::UnitState;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel normalization with optional affine `γ`, `β`.
///
/// Statistics use the biased variance; `σ = sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl InstanceNorm2d {
    pub fn new(channels: usize, eps: f64, gamma: Option<Vec<f64>>, beta: Option<Vec<f64>>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("instance norm needs at least one channel".into()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("instance norm eps must be ≥ 0, got {eps}")));
        }
        for (name, p) in [("gamma", &gamma), ("beta", &beta)] {
            if let Some(v) = p {
                if v.len() != channels {
                    return shape_err(format!(
                        "instance norm {name} needs {channels} elements, got {}",
                        v.len()
                    ));
                }
            }
        }
        Ok(Self {
            channels,
            eps,
            gamma,
            beta,
        })
    }

    fn gamma(&self, c: usize) -> f64 {
        self.gamma.as_ref().map_or(1.0, |g| g[c])
    }

    fn beta(&self, c: usize) -> f64 {
        self.beta.as_ref().map_or(0.0, |b| b[c])
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [c, _, _] if c == self.channels => Ok(input.to_vec()),
            _ => shape_err(format!(
                "instance norm over {} channels got input {input:?}",
                self.channels
            )),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let state = self.capture(x)?;
        state.frozen(x)
    }

    /// Freezes `μ_c`, `σ_c` of `x0`; the unit becomes `x ↦ (γ/σ)·x + (β − γμ/σ)`.
    pub fn capture(&self, x0: &Tensor) -> Result<UnitState> {
        self.output_shape(x0.shape())?;
        let per = x0.len() / self.channels;
        let mut mean = Vec::with_capacity(self.channels);
        let mut std = Vec::with_capacity(self.channels);
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for (c, ch) in x0.data().chunks(per).enumerate() {
            let mu = ch.iter().sum::<f64>() / per as f64;
            let var = ch.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / per as f64;
            let sigma = (var + self.eps).sqrt();
            if sigma <= 0.0 || !sigma.is_finite() {
                return Err(Error::State(format!(
                    "instance norm channel {c} has zero deviation; use eps > 0"
                )));
            }
            let s = self.gamma(c) / sigma;
            mean.push(mu);
            std.push(sigma);
            scale.push(s);
            shift.push(self.beta(c) - s * mu);
        }
        Ok(UnitState::NormStats {
            shape: x0.shape().to_vec(),
            mean,
            std,
            scale,
            shift,
        })
    }
}

pub fn instnorm_frozen(x1: &Tensor, state: &UnitState) -> Result<Tensor> {
    let (scale, shift) = norm_parts(x1, state)?;
    Ok(channel_affine(x1, scale, Some(shift)))
}

pub fn instnorm_frozen_adjoint(y2: &Tensor, state: &UnitState) -> Result<Tensor> {
    let (scale, _) = norm_parts(y2, state)?;
    Ok(channel_affine(y2, scale, None))
}

pub(crate) fn instnorm_linear(x1: &Tensor, state: &UnitState) -> Result<Tensor> {
    instnorm_frozen_adjoint(x1, state)
}

fn norm_parts<'a>(x: &Tensor, state: &'a UnitState) -> Result<(&'a [f64], &'a [f64])> {
    match state {
        UnitState::NormStats {
            shape, scale, shift, ..
        } => {
            if x.shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "normalization captured for {shape:?}, got {:?}",
                    x.shape()
                )));
            }
            Ok((scale, shift))
        }
        other => Err(other.mismatch("instance norm")),
    }
}

fn channel_affine(x: &Tensor, scale: &[f64], shift: Option<&[f64]>) -> Tensor {
    let per = x.len() / scale.len();
    let mut out = x.clone();
    for (c, ch) in out.data_mut().chunks_mut(per).enumerate() {
        let b = shift.map_or(0.0, |s| s[c]);
        for v in ch {
            *v = scale[c] * *v + b;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_statistics() {
        let norm = InstanceNorm2d::new(1, 0.0, None, None).unwrap();
        let x0 = Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let s = norm.capture(&x0).unwrap();
        let x1 = Tensor::new(&[1, 1, 2], vec![5.0, 7.0]).unwrap();
        assert_eq!(instnorm_frozen(&x1, &s).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(instnorm_frozen(&x0, &s).unwrap().data(), &[-1.0, 1.0]);
        assert_eq!(norm.forward(&x0).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn adjoint_is_diagonal_scale() {
        let norm = InstanceNorm2d::new(1, 0.0, Some(vec![2.0]), Some(vec![7.0])).unwrap();
        let s = norm.capture(&Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let y = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(instnorm_frozen_adjoint(&y, &s).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn errors() {
        let norm = InstanceNorm2d::new(2, 1e-5, None, None).unwrap();
        assert!(norm.capture(&Tensor::zeros(&[3, 2, 2]).unwrap()).is_err());
        let s = norm.capture(&Tensor::seeded_gaussian(&[2, 2, 2], 0).unwrap()).unwrap();
        assert!(matches!(
            instnorm_frozen(&Tensor::zeros(&[2, 1, 4]).unwrap(), &s),
            Err(Error::State(_))
        ));
        let flat = InstanceNorm2d::new(1, 0.0, None, None).unwrap();
        assert!(flat.capture(&Tensor::ones(&[1, 2, 2]).unwrap()).is_err());
        assert!(InstanceNorm2d::new(1, -1.0, None, None).is_err());
    }
}
