// SPDX-License-Identifier: Apache-2.0

//! Seeded fixture models and inputs.
//!
//! Weights are drawn from a seeded ChaCha8 stream and rounded to `f32`, so
//! the files written by [`write_fixtures`] reload to identical models.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::io::{encode_8bit, save_model};
use crate::layers::{
    Conv2d, ConvGeometry, ConvTranspose2d, FullyConnected, InstanceNorm2d, Layer, Pool2d, SigmoidMode,
    DEFAULT_INSTANCE_NORM_EPS,
};
use crate::model::{LayerSpec, ModelSpec};
use crate::tensor::Tensor;

pub const FIXTURE_NAMES: [&str; 3] = ["tiny-classifier", "tiny-sr", "tiny-i2i"];

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32 as f64
            })
            .collect()
    }

    /// He-scaled weights.
    fn weights(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        self.normal(n, (2.0 / fan_in as f64).sqrt())
    }

    fn bias(&mut self, n: usize) -> Vec<f64> {
        self.normal(n, 0.1)
    }

    fn conv(&mut self, ci: usize, co: usize, k: usize, padding: usize, bias: bool) -> Layer {
        let g = ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding,
        };
        let w = self.weights(co * ci * k * k, ci * k * k);
        let b = bias.then(|| self.bias(co));
        Layer::Conv2d(Conv2d::new(ci, co, g, w, b).expect("valid conv"))
    }

    fn fc(&mut self, i: usize, o: usize, bias: bool) -> Layer {
        let w = self.weights(o * i, i);
        let b = bias.then(|| self.bias(o));
        Layer::FullyConnected(FullyConnected::new(i, o, w, b).expect("valid fc"))
    }
}

/// `1×8×8 → 3`: conv, ReLU, max-pool, two fully connected layers.
pub fn tiny_classifier() -> ModelSpec {
    let mut init = Init::new(0x00C1_A551);
    ModelSpec::new(
        "tiny-classifier",
        &[1, 8, 8],
        vec![
            LayerSpec::new("conv1", init.conv(1, 4, 3, 1, true)),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new("pool1", Layer::MaxPool2d(Pool2d::new(2, 2).expect("valid pool"))),
            LayerSpec::new("flatten", Layer::Flatten),
            LayerSpec::new("fc1", init.fc(64, 16, true)),
            LayerSpec::new("relu2", Layer::Relu),
            LayerSpec::new("fc2", init.fc(16, 3, true)),
        ],
    )
    .expect("valid tiny-classifier")
}

/// `1×8×8 → 1×16×16`: conv, ReLU, conv, pixel shuffle ×2.
pub fn tiny_sr() -> ModelSpec {
    let mut init = Init::new(0x5_2000);
    ModelSpec::new(
        "tiny-sr",
        &[1, 8, 8],
        vec![
            LayerSpec::new("conv1", init.conv(1, 8, 3, 1, true)),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new("conv2", init.conv(8, 4, 3, 1, true)),
            LayerSpec::new("shuffle", Layer::PixelShuffle(2)),
        ],
    )
    .expect("valid tiny-sr")
}

/// `1×8×8 → 1×8×8`: conv, instance norm, ReLU, conv.
pub fn tiny_i2i() -> ModelSpec {
    let mut init = Init::new(0x1_2100);
    let gamma = init.normal(4, 0.2).into_iter().map(|g| (1.0 + g) as f32 as f64).collect();
    let beta = init.bias(4);
    ModelSpec::new(
        "tiny-i2i",
        &[1, 8, 8],
        vec![
            LayerSpec::new("conv1", init.conv(1, 4, 3, 1, true)),
            LayerSpec::new(
                "norm1",
                Layer::InstanceNorm2d(
                    InstanceNorm2d::new(4, DEFAULT_INSTANCE_NORM_EPS, Some(gamma), Some(beta)).expect("valid norm"),
                ),
            ),
            LayerSpec::new("relu1", Layer::Relu),
            LayerSpec::new("conv2", init.conv(4, 1, 3, 1, true)),
        ],
    )
    .expect("valid tiny-i2i")
}

pub fn fixture(name: &str) -> Option<ModelSpec> {
    match name {
        "tiny-classifier" => Some(tiny_classifier()),
        "tiny-sr" => Some(tiny_sr()),
        "tiny-i2i" => Some(tiny_i2i()),
        "hand" => Some(hand_model()),
        _ => None,
    }
}

/// Scalar chain `fc(1→2, w=[1,−1], b=½) → ReLU → fc(2→1, w=[2,3], b=¼)`.
///
/// At `x0 = 1`: `F = [[2]]`, `r = [1.25]`, output `3.25`.
pub fn hand_model() -> ModelSpec {
    let fc1 = FullyConnected::new(1, 2, vec![1.0, -1.0], Some(vec![0.5, 0.5])).expect("valid fc");
    let fc2 = FullyConnected::new(2, 1, vec![2.0, 3.0], Some(vec![0.25])).expect("valid fc");
    ModelSpec::new(
        "hand",
        &[1],
        vec![
            LayerSpec::new("fc1", Layer::FullyConnected(fc1)),
            LayerSpec::new("relu", Layer::Relu),
            LayerSpec::new("fc2", Layer::FullyConnected(fc2)),
        ],
    )
    .expect("valid hand model")
}

/// 8×8 grayscale ring on a soft gradient; every value is a multiple of 1/255.
pub fn sample_image() -> Tensor {
    let mut data = Vec::with_capacity(64);
    for y in 0..8 {
        for x in 0..8 {
            let (dy, dx) = (y as f64 - 3.5, x as f64 - 3.5);
            let d2 = dy * dy + dx * dx;
            let ring = if (4.0..=10.0).contains(&d2) { 160 } else { 0 };
            let v: u32 = ring + 8 * (x + y) as u32;
            data.push(v.min(255) as f64 / 255.0);
        }
    }
    Tensor::new(&[1, 8, 8], data).expect("8×8 image")
}

/// Shipped models (`name.json` + `name.bin`) and `sample.pgm`.
pub fn write_fixtures(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for name in FIXTURE_NAMES.iter().copied().chain(["hand"]) {
        let model = fixture(name).expect("known fixture");
        save_model(&model, &dir.join(format!("{name}.json")), &dir.join(format!("{name}.bin")))?;
    }
    fs::write(dir.join("sample.pgm"), encode_8bit(&sample_image())?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomModelOptions {
    pub max_layers: usize,
    pub allow_skips: bool,
    pub allow_smooth: bool,
    /// Cap on the element count of every activation.
    pub max_elems: usize,
}

impl Default for RandomModelOptions {
    fn default() -> Self {
        Self {
            max_layers: 6,
            allow_skips: true,
            allow_smooth: true,
            max_elems: 256,
        }
    }
}

#[derive(Clone, Copy)]
enum Pick {
    Conv,
    ConvT,
    Relu,
    Sigmoid,
    MaxPool,
    AvgPool,
    Norm,
    Shuffle,
    Skip,
    Head,
}

/// Seeded random model with at most `opts.max_layers` layers on an input of
/// at most `1×16×16`.
pub fn random_model(seed: u64, opts: RandomModelOptions) -> ModelSpec {
    let mut init = Init::new(seed ^ 0x9E37_79B9_7F4A_7C15);
    let side = [4, 6, 8, 16][init.rng.random_range(0..4)];
    let input = vec![1, side, side];
    let target = init.rng.random_range(2..=opts.max_layers.max(2));
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut shapes = vec![input.clone()];
    while layers.len() < target {
        let cur = shapes.last().expect("input shape").clone();
        let elems: usize = cur.iter().product();
        let spatial = cur.len() == 3;
        let (c, h, w) = if spatial { (cur[0], cur[1], cur[2]) } else { (0, 0, 0) };
        let mut options = vec![Pick::Relu];
        if spatial {
            options.push(Pick::Conv);
            if h % 2 == 0 && w % 2 == 0 && h >= 2 {
                options.extend([Pick::MaxPool, Pick::AvgPool]);
            }
            if 4 * h * w <= opts.max_elems {
                options.push(Pick::ConvT);
            }
            if c % 4 == 0 {
                options.push(Pick::Shuffle);
            }
            if opts.allow_smooth && h * w >= 4 {
                options.push(Pick::Norm);
            }
            if layers.len() + 1 == target || layers.len() + 2 == target {
                options.push(Pick::Head);
            }
        } else {
            options.push(Pick::Head);
        }
        if opts.allow_smooth {
            options.push(Pick::Sigmoid);
        }
        let skip_sources: Vec<usize> = (0..shapes.len() - 1).filter(|&s| shapes[s] == cur).collect();
        if opts.allow_skips && !skip_sources.is_empty() {
            options.push(Pick::Skip);
        }
        let i = layers.len();
        let bias = init.rng.random_bool(0.8);
        let layer = match options[init.rng.random_range(0..options.len())] {
            Pick::Conv => {
                let max_co = (opts.max_elems / (h * w)).clamp(1, 4);
                let co = init.rng.random_range(1..=max_co);
                let k = if init.rng.random_bool(0.5) { 3 } else { 1 };
                init.conv(c, co, k, k / 2, bias)
            }
            Pick::ConvT => {
                let max_co = (opts.max_elems / (4 * h * w)).min(2);
                let co = init.rng.random_range(1..=max_co);
                let g = ConvGeometry {
                    kernel_h: 2,
                    kernel_w: 2,
                    stride: 2,
                    padding: 0,
                };
                let w = init.weights(c * co * 4, c * 4);
                let b = bias.then(|| init.bias(co));
                Layer::ConvTranspose2d(ConvTranspose2d::new(c, co, g, w, b).expect("valid transpose conv"))
            }
            Pick::Relu => Layer::Relu,
            Pick::Sigmoid => Layer::Sigmoid(if init.rng.random_bool(0.5) {
                SigmoidMode::Mask
            } else {
                SigmoidMode::Taylor
            }),
            Pick::MaxPool => Layer::MaxPool2d(Pool2d::new(2, 2).expect("valid pool")),
            Pick::AvgPool => Layer::AvgPool2d(Pool2d::new(2, 2).expect("valid pool")),
            Pick::Norm => Layer::InstanceNorm2d(
                InstanceNorm2d::new(c, DEFAULT_INSTANCE_NORM_EPS, Some(init.normal(c, 1.0)), Some(init.bias(c)))
                    .expect("valid norm"),
            ),
            Pick::Shuffle => Layer::PixelShuffle(2),
            Pick::Skip => Layer::Add {
                source: skip_sources[init.rng.random_range(0..skip_sources.len())],
            },
            Pick::Head => {
                if spatial {
                    Layer::Flatten
                } else {
                    let o = init.rng.random_range(1..=5);
                    init.fc(elems, o, bias)
                }
            }
        };
        let out = layer.output_shape(&cur).expect("generator keeps shapes valid");
        shapes.push(out);
        layers.push(LayerSpec::new(format!("l{i}_{}", layer.kind().name()), layer));
    }
    ModelSpec::new(format!("random-{seed}"), &input, layers).expect("generator builds valid models")
}

/// Seeded input for a model, uniform in `[0, 1)`.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_image, load_model};

    #[test]
    fn shipped_shapes() {
        assert_eq!(tiny_classifier().output_shape(), &[3]);
        assert_eq!(tiny_sr().output_shape(), &[1, 16, 16]);
        assert_eq!(tiny_i2i().output_shape(), &[1, 8, 8]);
        assert_eq!(tiny_sr(), tiny_sr());
    }

    #[test]
    fn written_fixtures_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        write_fixtures(dir.path()).unwrap();
        for name in FIXTURE_NAMES {
            let m = load_model(
                &dir.path().join(format!("{name}.json")),
                &dir.path().join(format!("{name}.bin")),
            )
            .unwrap();
            assert_eq!(m, fixture(name).unwrap());
        }
        assert_eq!(load_image(&dir.path().join("sample.pgm")).unwrap(), sample_image());
    }

    #[test]
    fn random_models_respect_limits() {
        let mut skips = 0;
        for seed in 0..200 {
            let m = random_model(seed, RandomModelOptions::default());
            assert!(m.len() <= 6 && m.len() >= 2);
            assert!(m.input_shape().iter().product::<usize>() <= 256);
            assert!(m.activation_shapes().iter().all(|s| s.iter().product::<usize>() <= 256));
            skips += usize::from(!m.is_sequential());
            assert_eq!(m, random_model(seed, RandomModelOptions::default()));
        }
        assert!(skips > 10);
        let chain = RandomModelOptions {
            allow_skips: false,
            ..Default::default()
        };
        assert!((0..50).all(|s| random_model(s, chain).is_sequential()));
    }
}
