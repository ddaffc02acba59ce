// SPDX-License-Identifier: Apache-2.0

//! Elementwise units and their frozen interpreters.

use std::fmt;
use std::str::FromStr;

use super::UnitState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|x0|` the sigmoid mask `σ(x0)/x0` is replaced by the Taylor
/// interpreter, since `σ(0) = 1/2` cannot be written as `m·0`.
pub const SIGMOID_MASK_EPS: f64 = 1e-6;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_slope(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 - s)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Mask `[x0 > 0]`; exactly zero maps to 0.
pub fn relu_capture(x0: &Tensor) -> UnitState {
    UnitState::ReluMask(x0.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

pub fn relu_frozen(x1: &Tensor, state: &UnitState) -> Result<Tensor> {
    match state {
        UnitState::ReluMask(m) => masked(x1, m),
        other => Err(other.mismatch("relu")),
    }
}

/// The mask is diagonal, so the adjoint applies it unchanged.
pub fn relu_frozen_adjoint(y2: &Tensor, state: &UnitState) -> Result<Tensor> {
    relu_frozen(y2, state)
}

fn masked(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    if x.shape() != m.shape() {
        return Err(Error::State(format!(
            "frozen mask has shape {:?}, input has {:?}",
            m.shape(),
            x.shape()
        )));
    }
    x.hadamard(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmoidMode {
    /// Switch reading `σ(x0)/x0`, falling back to Taylor near zero.
    #[default]
    Mask,
    /// First-order expansion `σ′(x0)·x1 + σ(x0) − σ′(x0)·x0`.
    Taylor,
}

impl fmt::Display for SigmoidMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmoidMode::Mask => "mask",
            SigmoidMode::Taylor => "taylor",
        })
    }
}

impl FromStr for SigmoidMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(SigmoidMode::Mask),
            "taylor" => Ok(SigmoidMode::Taylor),
            other => Err(Error::Config(format!("unknown sigmoid mode '{other}'"))),
        }
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

pub fn sigmoid_capture(x0: &Tensor, mode: SigmoidMode) -> UnitState {
    let n = x0.len();
    let mut slope = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    let mut taylor = Vec::with_capacity(n);
    for &v in x0.data() {
        if mode == SigmoidMode::Mask && v.abs() >= SIGMOID_MASK_EPS {
            slope.push(sigmoid(v) / v);
            offset.push(0.0);
            taylor.push(false);
        } else {
            let d = sigmoid_slope(v);
            slope.push(d);
            offset.push(sigmoid(v) - d * v);
            taylor.push(true);
        }
    }
    let shape = x0.shape();
    UnitState::Sigmoid {
        slope: Tensor::new(shape, slope).expect("shape preserved"),
        offset: Tensor::new(shape, offset).expect("shape preserved"),
        taylor,
    }
}

/// Full frozen affine value `A ⊙ x1 + c`.
pub fn sigmoid_frozen(x1: &Tensor, state: &UnitState) -> Result<Tensor> {
    match state {
        UnitState::Sigmoid { slope, offset, .. } => masked(x1, slope)?.add(offset),
        other => Err(other.mismatch("sigmoid")),
    }
}

pub fn sigmoid_frozen_adjoint(y2: &Tensor, state: &UnitState) -> Result<Tensor> {
    match state {
        UnitState::Sigmoid { slope, .. } => masked(y2, slope),
        other => Err(other.mismatch("sigmoid")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_examples() {
        let s = relu_capture(&t(&[1.0, -2.0, 3.0]));
        assert_eq!(relu_frozen(&t(&[4.0, 5.0, 6.0]), &s).unwrap().data(), &[4.0, 0.0, 6.0]);
        assert_eq!(relu_frozen(&t(&[1.0, -2.0, 3.0]), &s).unwrap().data(), &[1.0, 0.0, 3.0]);
        let s0 = relu_capture(&t(&[0.0, -1.0]));
        assert_eq!(relu_frozen(&t(&[9.0, 9.0]), &s0).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(relu_frozen(&t(&[1.0]), &s), Err(Error::State(_))));
        assert!(relu_frozen(&t(&[1.0]), &UnitState::Empty).is_err());
    }

    #[test]
    fn sigmoid_mask_mode() {
        let x0 = t(&[2.0, -2.0]);
        let s = sigmoid_capture(&x0, SigmoidMode::Mask);
        let y = sigmoid_frozen(&x0, &s).unwrap();
        assert!((y.data()[0] - 0.880_797_077_977_882_4).abs() < 1e-12);
        assert!((y.data()[1] - 0.119_202_922_022_117_6).abs() < 1e-12);

        let s = sigmoid_capture(&t(&[2.0]), SigmoidMode::Mask);
        let y = sigmoid_frozen(&t(&[4.0]), &s).unwrap();
        assert!((y.data()[0] - 2.0 * sigmoid(2.0)).abs() < 1e-15);
        assert!((y.data()[0] - 1.7616).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_taylor_at_zero() {
        let s = sigmoid_capture(&t(&[0.0]), SigmoidMode::Taylor);
        let y = sigmoid_frozen(&t(&[4.0]), &s).unwrap();
        assert_eq!(y.data(), &[1.5]);
        assert_eq!(sigmoid_frozen_adjoint(&t(&[4.0]), &s).unwrap().data(), &[1.0]);

        // mask mode falls back to Taylor at zero and stays consistent
        let s = sigmoid_capture(&t(&[0.0, 1e-9]), SigmoidMode::Mask);
        if let UnitState::Sigmoid { taylor, .. } = &s {
            assert_eq!(taylor, &vec![true, true]);
        }
        let y = sigmoid_frozen(&t(&[0.0, 1e-9]), &s).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - sigmoid(1e-9)).abs() < 1e-15);
    }

    #[test]
    fn unknown_mode_is_config_error() {
        assert!(matches!("hard".parse::<SigmoidMode>(), Err(Error::Config(_))));
        assert_eq!("taylor".parse::<SigmoidMode>().unwrap(), SigmoidMode::Taylor);
    }
}
