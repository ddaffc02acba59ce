// SPDX-License-Identifier: Apache-2.0

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Square pooling window without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub window: usize,
    pub stride: usize,
}

impl Pool2d {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be at least 1".into()));
        }
        Ok(Self { window, stride })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return shape_err(format!("pooling expects C×H×W input, got {input:?}"));
        };
        if h < self.window || w < self.window {
            return Err(Error::Config(format!(
                "pool window {} larger than input {h}×{w}",
                self.window
            )));
        }
        Ok(vec![
            c,
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ])
    }

    /// Calls `f(out_offset, in_offset)` for every window member, output-major,
    /// window members in row-major order.
    fn for_each_window(&self, input: &[usize], mut f: impl FnMut(usize, usize)) -> Result<Vec<usize>> {
        let out = self.output_shape(input)?;
        let (h, w) = (input[1], input[2]);
        let (c, oh, ow) = (out[0], out[1], out[2]);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (ch * oh + oy) * ow + ox;
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let iy = oy * self.stride + dy;
                            let ix = ox * self.stride + dx;
                            f(o, (ch * h + iy) * w + ix);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn maxpool_forward(x: &Tensor, pool: &Pool2d) -> Result<Tensor> {
    let sel = maxpool_select(x, pool)?;
    let out = sel.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&pool.output_shape(x.shape())?, out)
}

/// Flat input offset of each window's maximum; ties go to the smallest offset.
pub fn maxpool_select(x: &Tensor, pool: &Pool2d) -> Result<Vec<usize>> {
    let out_len: usize = pool.output_shape(x.shape())?.iter().product();
    let mut sel: Vec<Option<usize>> = vec![None; out_len];
    let xd = x.data();
    pool.for_each_window(x.shape(), |o, i| match sel[o] {
        Some(best) if xd[i] <= xd[best] => {}
        _ => sel[o] = Some(i),
    })?;
    Ok(sel.into_iter().map(|s| s.expect("window is non-empty")).collect())
}

pub fn avgpool_forward(x: &Tensor, pool: &Pool2d) -> Result<Tensor> {
    let out_shape = pool.output_shape(x.shape())?;
    let mut out = vec![0.0; out_shape.iter().product()];
    let xd = x.data();
    pool.for_each_window(x.shape(), |o, i| out[o] += xd[i])?;
    let area = (pool.window * pool.window) as f64;
    for v in &mut out {
        *v /= area;
    }
    Tensor::new(&out_shape, out)
}

pub fn avgpool_adjoint(y: &Tensor, pool: &Pool2d, input_shape: &[usize]) -> Result<Tensor> {
    let out_shape = pool.output_shape(input_shape)?;
    if y.shape() != out_shape.as_slice() {
        return shape_err(format!("avg_pool adjoint expects {out_shape:?}, got {:?}", y.shape()));
    }
    let area = (pool.window * pool.window) as f64;
    let yd = y.data();
    let mut out = vec![0.0; input_shape.iter().product()];
    pool.for_each_window(input_shape, |o, i| out[i] += yd[o] / area)?;
    Tensor::new(input_shape, out)
}
