// SPDX-License-Identifier: Apache-2.0

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn pixelshuffle_output_shape(input: &[usize], r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(Error::Config("pixel shuffle factor must be at least 1".into()));
    }
    let [c, h, w] = *input else {
        return shape_err(format!("pixel shuffle expects C×H×W, got {input:?}"));
    };
    if c % (r * r) != 0 {
        return Err(Error::Config(format!(
            "pixel shuffle factor {r} needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    Ok(vec![c / (r * r), h * r, w * r])
}

/// Depth to space: `out[c, h·r + i, w·r + j] = in[c·r² + i·r + j, h, w]`.
pub fn pixelshuffle_forward(x: &Tensor, r: usize) -> Result<Tensor> {
    let out_shape = pixelshuffle_output_shape(x.shape(), r)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for c in 0..out_shape[0] {
        for i in 0..r {
            for j in 0..r {
                let src_c = c * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        out[(c * oh + y * r + i) * ow + xx * r + j] = xd[(src_c * h + y) * w + xx];
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// Space to depth; the inverse permutation of [`pixelshuffle_forward`].
pub fn pixelshuffle_adjoint(y: &Tensor, r: usize, input_shape: &[usize]) -> Result<Tensor> {
    let out_shape = pixelshuffle_output_shape(input_shape, r)?;
    if y.shape() != out_shape.as_slice() {
        return shape_err(format!("pixel shuffle adjoint expects {out_shape:?}, got {:?}", y.shape()));
    }
    let (h, w) = (input_shape[1], input_shape[2]);
    let (oh, ow) = (h * r, w * r);
    let yd = y.data();
    let mut out = vec![0.0; y.len()];
    for c in 0..out_shape[0] {
        for i in 0..r {
            for j in 0..r {
                let dst_c = c * r * r + i * r + j;
                for yy in 0..h {
                    for xx in 0..w {
                        out[(dst_c * h + yy) * w + xx] = yd[(c * oh + yy * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::new(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixelshuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn adjoint_inverts_and_preserves_norm() {
        let x = Tensor::seeded_gaussian(&[8, 3, 5], 9).unwrap();
        let y = pixelshuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!((y.norm2() - x.norm2()).abs() <= 1e-14 * x.norm2());
        assert_eq!(pixelshuffle_adjoint(&y, 2, x.shape()).unwrap(), x);
    }

    #[test]
    fn divisibility() {
        assert!(matches!(
            pixelshuffle_output_shape(&[3, 2, 2], 2),
            Err(Error::Config(_))
        ));
    }
}
