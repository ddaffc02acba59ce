// SPDX-License-Identifier: Apache-2.0

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Tensor};

/// `y = W·vec(x) + b` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullyConnected {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl FullyConnected {
    pub fn new(
        in_features: usize,
        out_features: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config("feature counts must be positive".into()));
        }
        if weight.len() != in_features * out_features {
            return shape_err(format!(
                "fully_connected weight needs {} elements, got {}",
                in_features * out_features,
                weight.len()
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_features {
                return shape_err(format!(
                    "fully_connected bias needs {out_features} elements, got {}",
                    b.len()
                ));
            }
        }
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        if n != self.in_features {
            return shape_err(format!(
                "fully_connected expects {} inputs, got {input:?}",
                self.in_features
            ));
        }
        Ok(vec![self.out_features])
    }

    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(x.shape())?;
        let out = self
            .weight
            .chunks(self.in_features)
            .map(|row| dot(row, x.data()))
            .collect();
        Tensor::new(&shape, out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.linear(x)?;
        match &self.bias {
            Some(b) => {
                let bt = Tensor::new(&[b.len()], b.clone())?;
                y.add(&bt)
            }
            None => Ok(y),
        }
    }

    pub fn adjoint(&self, y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let out_shape = self.output_shape(input_shape)?;
        if y.shape() != out_shape.as_slice() {
            return shape_err(format!(
                "fully_connected adjoint expects {out_shape:?}, got {:?}",
                y.shape()
            ));
        }
        let mut out = vec![0.0; self.in_features];
        for (row, &g) in self.weight.chunks(self.in_features).zip(y.data()) {
            if g == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * g;
            }
        }
        Tensor::new(input_shape, out)
    }
}

pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    let n = x.len();
    x.clone().reshape(&[n])
}

pub fn flatten_adjoint(y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    y.clone().reshape(input_shape)
}

/// Per-channel spatial mean: `[C,H,W] → [C]`.
pub fn globalavgpool_forward(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return shape_err(format!("global_avg_pool expects C×H×W, got {:?}", x.shape()));
    };
    let area = (h * w) as f64;
    let out = x.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / area).collect();
    Tensor::new(&[c], out)
}

pub fn globalavgpool_adjoint(y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [c, h, w] = *input_shape else {
        return shape_err(format!("global_avg_pool expects C×H×W, got {input_shape:?}"));
    };
    if y.shape() != [c] {
        return shape_err(format!("global_avg_pool adjoint expects [{c}], got {:?}", y.shape()));
    }
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    for &g in y.data() {
        out.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape, out)
}
