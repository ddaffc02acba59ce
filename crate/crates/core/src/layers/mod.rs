// SPDX-License-Identifier: Apache-2.0

//! Layer zoo.
//!
//! Every layer offers three evaluations: the true `forward`, the frozen
//! affine replay given a [`UnitState`] captured from a reference input, and
//! the adjoint of the frozen linear part. Affine layers need no state; their
//! frozen replay is their forward and their linear part drops the bias.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
pub mod shuffle;

use std::fmt;

pub use activation::{
    relu_capture, relu_forward, relu_frozen, relu_frozen_adjoint, sigmoid, sigmoid_capture,
    sigmoid_forward, sigmoid_frozen, sigmoid_frozen_adjoint, SigmoidMode, SIGMOID_MASK_EPS,
};
pub use conv::{Conv2d, ConvGeometry, ConvTranspose2d};
pub use dense::{
    flatten_adjoint, flatten_forward, globalavgpool_adjoint, globalavgpool_forward, FullyConnected,
};
pub use norm::{instnorm_frozen, instnorm_frozen_adjoint, InstanceNorm2d, DEFAULT_INSTANCE_NORM_EPS};
pub use pool::{avgpool_adjoint, avgpool_forward, maxpool_forward, maxpool_select, Pool2d};
pub use shuffle::{pixelshuffle_adjoint, pixelshuffle_forward, pixelshuffle_output_shape};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    FullyConnected(FullyConnected),
    Relu,
    Sigmoid(SigmoidMode),
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    InstanceNorm2d(InstanceNorm2d),
    PixelShuffle(usize),
    Flatten,
    /// Sums the running activation with activation `source` of the model,
    /// where activation 0 is the model input and activation `i + 1` is the
    /// output of layer `i`.
    Add { source: usize },
    GlobalAvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    FullyConnected,
    Relu,
    Sigmoid,
    MaxPool2d,
    AvgPool2d,
    InstanceNorm2d,
    PixelShuffle,
    Flatten,
    Add,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::ConvTranspose2d => "conv_transpose2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::AvgPool2d => "avgpool2d",
            LayerKind::InstanceNorm2d => "instance_norm2d",
            LayerKind::PixelShuffle => "pixel_shuffle",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::GlobalAvgPool => "global_avg_pool",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Decisions of one unit, captured from the reference input.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitState {
    /// Affine layers carry nothing.
    Empty,
    ReluMask(Tensor),
    /// `A = slope`, `c = offset`; `taylor[k]` marks elements using the
    /// first-order expansion.
    Sigmoid {
        slope: Tensor,
        offset: Tensor,
        taylor: Vec<bool>,
    },
    /// Flat input offset selected for every pooled output.
    PoolSelect {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        indices: Vec<usize>,
    },
    /// Frozen per-channel statistics and the resulting affine coefficients
    /// `scale = γ/σ`, `shift = β − γμ/σ`.
    NormStats {
        shape: Vec<usize>,
        mean: Vec<f64>,
        std: Vec<f64>,
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
}

impl UnitState {
    fn name(&self) -> &'static str {
        match self {
            UnitState::Empty => "empty",
            UnitState::ReluMask(_) => "relu mask",
            UnitState::Sigmoid { .. } => "sigmoid",
            UnitState::PoolSelect { .. } => "pool selection",
            UnitState::NormStats { .. } => "normalization statistics",
        }
    }

    pub(crate) fn mismatch(&self, unit: &str) -> Error {
        Error::State(format!("{unit} cannot use captured {}", self.name()))
    }

    /// Linear part `A·x`.
    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            UnitState::Empty => Err(Error::State("affine layers have no unit state".into())),
            UnitState::ReluMask(_) => relu_frozen(x, self),
            UnitState::Sigmoid { .. } => sigmoid_frozen_adjoint(x, self),
            UnitState::PoolSelect { .. } => maxpool_frozen(x, self),
            UnitState::NormStats { .. } => norm::instnorm_linear(x, self),
        }
    }

    /// Affine replay `A·x + c`.
    pub fn frozen(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            UnitState::Sigmoid { .. } => sigmoid_frozen(x, self),
            UnitState::NormStats { .. } => instnorm_frozen(x, self),
            _ => self.linear(x),
        }
    }

    /// `Aᵀ·y`.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            UnitState::PoolSelect { .. } => maxpool_frozen_adjoint(y, self),
            _ => self.linear(y),
        }
    }

    /// Constant part `c`, if the unit has one.
    pub fn constant(&self) -> Option<Tensor> {
        match self {
            UnitState::Sigmoid { offset, .. } => Some(offset.clone()),
            UnitState::NormStats { shape, shift, .. } => {
                let per = shape.iter().product::<usize>() / shift.len();
                let data = shift.iter().flat_map(|&s| std::iter::repeat_n(s, per)).collect();
                Some(Tensor::new(shape, data).expect("captured shape"))
            }
            _ => None,
        }
    }
}

pub fn maxpool_capture(x0: &Tensor, pool: &Pool2d) -> Result<UnitState> {
    Ok(UnitState::PoolSelect {
        input_shape: x0.shape().to_vec(),
        output_shape: pool.output_shape(x0.shape())?,
        indices: maxpool_select(x0, pool)?,
    })
}

/// Gathers `x1` at the positions selected by `x0`.
pub fn maxpool_frozen(x1: &Tensor, state: &UnitState) -> Result<Tensor> {
    let UnitState::PoolSelect {
        input_shape,
        output_shape,
        indices,
    } = state
    else {
        return Err(state.mismatch("max pool"));
    };
    if x1.shape() != input_shape.as_slice() {
        return Err(Error::State(format!(
            "pool selection captured for {input_shape:?}, got {:?}",
            x1.shape()
        )));
    }
    let xd = x1.data();
    Tensor::new(output_shape, indices.iter().map(|&i| xd[i]).collect())
}

/// Scatters `y2` back to the selected positions, summing on overlap.
pub fn maxpool_frozen_adjoint(y2: &Tensor, state: &UnitState) -> Result<Tensor> {
    let UnitState::PoolSelect {
        input_shape,
        output_shape,
        indices,
    } = state
    else {
        return Err(state.mismatch("max pool"));
    };
    if y2.shape() != output_shape.as_slice() {
        return Err(Error::State(format!(
            "pool selection produces {output_shape:?}, got {:?}",
            y2.shape()
        )));
    }
    let mut out = Tensor::zeros(input_shape)?;
    let od = out.data_mut();
    for (&i, &g) in indices.iter().zip(y2.data()) {
        od[i] += g;
    }
    Ok(out)
}

pub fn add_forward(x: &Tensor, skip: &Tensor) -> Result<Tensor> {
    x.add(skip)
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::ConvTranspose2d(_) => LayerKind::ConvTranspose2d,
            Layer::FullyConnected(_) => LayerKind::FullyConnected,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid(_) => LayerKind::Sigmoid,
            Layer::MaxPool2d(_) => LayerKind::MaxPool2d,
            Layer::AvgPool2d(_) => LayerKind::AvgPool2d,
            Layer::InstanceNorm2d(_) => LayerKind::InstanceNorm2d,
            Layer::PixelShuffle(_) => LayerKind::PixelShuffle,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Add { .. } => LayerKind::Add,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    /// Units whose behaviour depends on the input and must be frozen.
    pub fn needs_capture(&self) -> bool {
        matches!(
            self,
            Layer::Relu | Layer::Sigmoid(_) | Layer::MaxPool2d(_) | Layer::InstanceNorm2d(_)
        )
    }

    /// Layers with a trainable bias term (the `W x + b` stages).
    pub fn has_bias_parameter(&self) -> bool {
        matches!(
            self,
            Layer::Conv2d(_) | Layer::ConvTranspose2d(_) | Layer::FullyConnected(_)
        )
    }

    /// Units whose frozen adjoint is not the gradient of the true unit.
    pub fn is_smooth_unit(&self) -> bool {
        matches!(self, Layer::Sigmoid(_) | Layer::InstanceNorm2d(_))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::ConvTranspose2d(c) => c.output_shape(input),
            Layer::FullyConnected(f) => f.output_shape(input),
            Layer::Relu | Layer::Sigmoid(_) | Layer::Add { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => p.output_shape(input),
            Layer::InstanceNorm2d(n) => n.output_shape(input),
            Layer::PixelShuffle(r) => pixelshuffle_output_shape(input, *r),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::GlobalAvgPool => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => shape_err(format!("global_avg_pool expects C×H×W, got {input:?}")),
            },
        }
    }

    /// True forward of a unary layer.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::ConvTranspose2d(c) => c.forward(x),
            Layer::FullyConnected(f) => f.forward(x),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::Sigmoid(_) => Ok(sigmoid_forward(x)),
            Layer::MaxPool2d(p) => maxpool_forward(x, p),
            Layer::AvgPool2d(p) => avgpool_forward(x, p),
            Layer::InstanceNorm2d(n) => n.forward(x),
            Layer::PixelShuffle(r) => pixelshuffle_forward(x, *r),
            Layer::Flatten => flatten_forward(x),
            Layer::GlobalAvgPool => globalavgpool_forward(x),
            Layer::Add { .. } => Err(Error::Config("add needs its skip operand".into())),
        }
    }

    pub fn capture(&self, x0: &Tensor) -> Result<UnitState> {
        match self {
            Layer::Relu => Ok(relu_capture(x0)),
            Layer::Sigmoid(mode) => Ok(sigmoid_capture(x0, *mode)),
            Layer::MaxPool2d(p) => maxpool_capture(x0, p),
            Layer::InstanceNorm2d(n) => n.capture(x0),
            _ => Ok(UnitState::Empty),
        }
    }

    /// Affine replay of a unary layer under `state`.
    pub fn frozen(&self, x1: &Tensor, state: &UnitState) -> Result<Tensor> {
        if self.needs_capture() {
            self.check_state(state)?;
            state.frozen(x1)
        } else {
            self.forward(x1)
        }
    }

    /// Linear part of [`Layer::frozen`] (biases and unit constants dropped).
    pub fn frozen_linear(&self, x1: &Tensor, state: &UnitState) -> Result<Tensor> {
        match self {
            _ if self.needs_capture() => {
                self.check_state(state)?;
                state.linear(x1)
            }
            Layer::Conv2d(c) => c.linear(x1),
            Layer::ConvTranspose2d(c) => c.linear(x1),
            Layer::FullyConnected(f) => f.linear(x1),
            _ => self.forward(x1),
        }
    }

    /// Adjoint of [`Layer::frozen_linear`].
    pub fn frozen_adjoint(&self, y2: &Tensor, state: &UnitState, input_shape: &[usize]) -> Result<Tensor> {
        match self {
            _ if self.needs_capture() => {
                self.check_state(state)?;
                state.adjoint(y2)
            }
            Layer::Conv2d(c) => c.adjoint(y2, input_shape),
            Layer::ConvTranspose2d(c) => c.adjoint(y2, input_shape),
            Layer::FullyConnected(f) => f.adjoint(y2, input_shape),
            Layer::AvgPool2d(p) => avgpool_adjoint(y2, p, input_shape),
            Layer::PixelShuffle(r) => pixelshuffle_adjoint(y2, *r, input_shape),
            Layer::Flatten => flatten_adjoint(y2, input_shape),
            Layer::GlobalAvgPool => globalavgpool_adjoint(y2, input_shape),
            Layer::Add { .. } => Ok(y2.clone()),
            Layer::Relu | Layer::Sigmoid(_) | Layer::MaxPool2d(_) | Layer::InstanceNorm2d(_) => {
                unreachable!("handled above")
            }
        }
    }

    fn check_state(&self, state: &UnitState) -> Result<()> {
        let ok = matches!(
            (self, state),
            (Layer::Relu, UnitState::ReluMask(_))
                | (Layer::Sigmoid(_), UnitState::Sigmoid { .. })
                | (Layer::MaxPool2d(_), UnitState::PoolSelect { .. })
                | (Layer::InstanceNorm2d(_), UnitState::NormStats { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(state.mismatch(self.kind().name()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_frozen_selection() {
        let pool = Pool2d::new(2, 2).unwrap();
        let x0 = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let s = maxpool_capture(&x0, &pool).unwrap();
        let x1 = Tensor::new(&[1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(maxpool_frozen(&x1, &s).unwrap().data(), &[20.0]);
        assert_eq!(maxpool_frozen(&x0, &s).unwrap(), maxpool_forward(&x0, &pool).unwrap());

        let tie = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = maxpool_capture(&tie, &pool).unwrap();
        assert_eq!(maxpool_frozen(&x1, &s).unwrap().data(), &[10.0]);

        let g = maxpool_frozen_adjoint(&Tensor::ones(&[1, 1, 1]).unwrap(), &s).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_selection_matrix_is_binary() {
        let pool = Pool2d::new(2, 2).unwrap();
        let x0 = Tensor::seeded_gaussian(&[2, 4, 4], 3).unwrap();
        let s = maxpool_capture(&x0, &pool).unwrap();
        let UnitState::PoolSelect { indices, .. } = &s else { unreachable!() };
        for k in 0..x0.len() {
            let d = Tensor::delta(x0.shape(), k).unwrap();
            let back = maxpool_frozen_adjoint(&maxpool_frozen(&d, &s).unwrap(), &s).unwrap();
            let mut expect = vec![0.0; x0.len()];
            if indices.contains(&k) {
                expect[k] = 1.0;
            }
            assert_eq!(back.data(), expect.as_slice());
        }
    }

    #[test]
    fn state_mismatch_is_reported() {
        let x = Tensor::ones(&[1, 2, 2]).unwrap();
        let err = Layer::Relu.frozen(&x, &UnitState::Empty).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let s = Layer::Sigmoid(SigmoidMode::Mask).capture(&x).unwrap();
        assert!(Layer::Relu.frozen_adjoint(&x, &s, &[1, 2, 2]).is_err());
    }

    #[test]
    fn add_fans_out_in_adjoint() {
        let y = Tensor::seeded_gaussian(&[3], 1).unwrap();
        let l = Layer::Add { source: 0 };
        assert_eq!(l.frozen_adjoint(&y, &UnitState::Empty, &[3]).unwrap(), y);
        assert!(l.forward(&y).is_err());
        assert_eq!(add_forward(&y, &y).unwrap(), y.scale(2.0));
    }
}
