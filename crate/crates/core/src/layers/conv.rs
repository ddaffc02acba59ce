// SPDX-License-Identifier: Apache-2.0

//! Strided, zero-padded 2-D cross-correlation and its transpose.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Geometry shared by both convolution flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// `floor((n + 2p − k)/s) + 1`.
    fn conv_out(&self, n: usize, k: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < k {
            return Err(Error::Config(format!(
                "kernel {k} larger than padded input {padded}"
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    /// `(n − 1)·s − 2p + k`.
    fn transpose_out(&self, n: usize, k: usize) -> Result<usize> {
        let full = (n - 1) * self.stride + k;
        if full <= 2 * self.padding {
            return Err(Error::Config(format!(
                "transposed convolution output would be empty (padding {})",
                self.padding
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!("{what} expects a C×H×W tensor, got {:?}", t.shape())),
    }
}

/// Cross-correlation with weight layout `[out, in, kh, kw]` (no kernel flip).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        geometry.validate()?;
        let expect = out_channels * in_channels * geometry.kernel_h * geometry.kernel_w;
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if weight.len() != expect {
            return shape_err(format!(
                "conv2d weight needs {expect} elements, got {}",
                weight.len()
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return shape_err(format!(
                    "conv2d bias needs {out_channels} elements, got {}",
                    b.len()
                ));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return shape_err(format!("conv2d expects C×H×W input, got {input:?}"));
        };
        if c != self.in_channels {
            return shape_err(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let g = &self.geometry;
        Ok(vec![
            self.out_channels,
            g.conv_out(h, g.kernel_h)?,
            g.conv_out(w, g.kernel_w)?,
        ])
    }

    /// Linear part `W·x`.
    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let (ci, h, w) = chw(x, "conv2d")?;
        let (co, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
        let ConvGeometry {
            kernel_h: kh,
            kernel_w: kw,
            stride: s,
            padding: p,
        } = self.geometry;
        let xd = x.data();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wv = self.weight[((o * ci + i) * kh + ky) * kw + kx];
                                acc += wv * xd[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(&out_shape, out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.linear(x)?;
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b);
        }
        Ok(y)
    }

    /// `Wᵀ·y` onto an input of shape `input_shape`.
    pub fn adjoint(&self, y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let out_shape = self.output_shape(input_shape)?;
        if y.shape() != out_shape.as_slice() {
            return shape_err(format!(
                "conv2d adjoint expects {out_shape:?}, got {:?}",
                y.shape()
            ));
        }
        let (ci, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (co, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
        let ConvGeometry {
            kernel_h: kh,
            kernel_w: kw,
            stride: s,
            padding: p,
        } = self.geometry;
        let yd = y.data();
        let mut out = vec![0.0; ci * h * w];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = yd[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wv = self.weight[((o * ci + i) * kh + ky) * kw + kx];
                                out[(i * h + iy as usize) * w + ix as usize] += wv * g;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(input_shape, out)
    }
}

/// Transposed convolution with weight layout `[in, out, kh, kw]`.
///
/// Output extent is `(n − 1)·s − 2p + k`; the linear part is exactly the
/// adjoint of a [`Conv2d`] with the same weights and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        geometry.validate()?;
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let expect = out_channels * in_channels * geometry.kernel_h * geometry.kernel_w;
        if weight.len() != expect {
            return shape_err(format!(
                "conv_transpose2d weight needs {expect} elements, got {}",
                weight.len()
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return shape_err(format!(
                    "conv_transpose2d bias needs {out_channels} elements, got {}",
                    b.len()
                ));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return shape_err(format!(
                "conv_transpose2d expects C×H×W input, got {input:?}"
            ));
        };
        if c != self.in_channels {
            return shape_err(format!(
                "conv_transpose2d expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let g = &self.geometry;
        Ok(vec![
            self.out_channels,
            g.transpose_out(h, g.kernel_h)?,
            g.transpose_out(w, g.kernel_w)?,
        ])
    }

    fn as_conv(&self) -> Conv2d {
        Conv2d {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            geometry: self.geometry,
            weight: self.weight.clone(),
            bias: None,
        }
    }

    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        // The scatter of the transpose is the gather-adjoint of the matching
        // convolution; the bounds in conv_out reproduce the input extent.
        let conv = self.as_conv();
        let back = conv.output_shape(&out_shape)?;
        if back.as_slice() != x.shape() {
            return shape_err(format!(
                "conv_transpose2d geometry does not invert for input {:?}",
                x.shape()
            ));
        }
        conv.adjoint(x, &out_shape)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.linear(x)?;
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b);
        }
        Ok(y)
    }

    pub fn adjoint(&self, y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let out_shape = self.output_shape(input_shape)?;
        if y.shape() != out_shape.as_slice() {
            return shape_err(format!(
                "conv_transpose2d adjoint expects {out_shape:?}, got {:?}",
                y.shape()
            ));
        }
        self.as_conv().linear(y)
    }
}

pub(crate) fn add_channel_bias(y: &mut Tensor, bias: &[f64]) {
    let per = y.len() / bias.len();
    for (chunk, b) in y.data_mut().chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}
