// SPDX-License-Identifier: Apache-2.0

use linterp::fixtures::{random_input, random_model, RandomModelOptions};
use linterp::layers::{Conv2d, ConvGeometry, Layer};
use linterp::{capture, InterpreterHandle, LayerSpec, ModelSpec, Tensor};
use proptest::prelude::*;

fn chain(seed: u64) -> InterpreterHandle {
    let opts = RandomModelOptions {
        allow_skips: false,
        ..Default::default()
    };
    let m = random_model(seed, opts);
    let x0 = random_input(m.input_shape(), seed + 77);
    capture(m, &x0).unwrap()
}

fn any_model(seed: u64) -> InterpreterHandle {
    let m = random_model(seed, RandomModelOptions::default());
    let x0 = random_input(m.input_shape(), seed + 77);
    capture(m, &x0).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Stride-1 same-padded convolutions with ReLUs between them.
fn conv_stack(kernels: &[usize], channels: usize, side: usize, seed: u64) -> ModelSpec {
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, &k) in kernels.iter().enumerate() {
        let geo = ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: k / 2,
        };
        let w = Tensor::seeded_gaussian(&[channels * c_in * k * k], seed + i as u64).unwrap();
        let b = Tensor::seeded_gaussian(&[channels], seed + 100 + i as u64).unwrap();
        let conv = Conv2d::new(c_in, channels, geo, w.into_data(), Some(b.into_data())).unwrap();
        layers.push(LayerSpec::new(format!("conv{i}"), Layer::Conv2d(conv)));
        layers.push(LayerSpec::new(format!("relu{i}"), Layer::Relu));
        c_in = channels;
    }
    ModelSpec::new("stack", &[1, side, side], layers).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prefix_then_suffix_equals_full(seed in 0u64..5_000, frac in 0.0f64..1.0, probe in 0u64..1_000) {
        let h = chain(seed);
        let n = h.model().len();
        let cut = 1 + ((n - 1) as f64 * frac) as usize;
        prop_assume!(cut < n);
        let (pre, suf) = (h.subnetwork(0, cut).unwrap(), h.subnetwork(cut, n).unwrap());
        let x = random_input(h.input_shape(), probe);
        let full = h.apply(&x).unwrap();
        let composed = suf.apply(&pre.apply(&x).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&full, &composed) <= 1e-12 * (1.0 + full.norm2()));
    }

    #[test]
    fn suffix_reproduces_reference_output(seed in 0u64..5_000, frac in 0.0f64..1.0) {
        let h = any_model(seed);
        let n = h.model().len();
        let cut = ((n - 1) as f64 * frac) as usize;
        let acts = h.model().activations(h.reference_input()).unwrap();
        let y = h.subnetwork(cut, n).unwrap().apply(&acts[cut]).unwrap();
        let y0 = h.reference_output();
        prop_assert!(max_abs_diff(&y, y0) <= 1e-12 * (1.0 + y0.norm2()));
    }

    #[test]
    fn materialize_matches_probes(seed in 0u64..5_000) {
        let h = any_model(seed);
        prop_assume!(h.input_len() * h.output_len() <= 1 << 14);
        let (f, r) = h.materialize(1 << 14).unwrap();
        prop_assert_eq!(&r, h.residual().unwrap());
        for j in (0..h.input_len()).step_by(7) {
            let col = h.column(j).unwrap();
            for (i, &v) in col.data().iter().enumerate() {
                prop_assert_eq!(v.to_bits(), f.get(i, j).to_bits());
            }
        }
        let x = random_input(h.input_shape(), seed);
        let fx = Tensor::new(h.output_shape(), f.matvec(x.data())).unwrap();
        let y = h.apply_linear(&x).unwrap();
        prop_assert!(max_abs_diff(&fx, &y) <= 1e-12 * (1.0 + y.norm2()));
        let u = random_input(h.output_shape(), seed + 1);
        let ftu = f.matvec_t(u.data());
        let adj = h.apply_adjoint(&u).unwrap();
        let gap = ftu.iter().zip(adj.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-12 * (1.0 + adj.norm2()));
    }

    #[test]
    fn conv_rows_vanish_outside_receptive_field(
        kernels in proptest::collection::vec(prop_oneof![Just(1usize), Just(3), Just(5)], 1..4),
        seed in 0u64..5_000,
        k in 0usize..100,
    ) {
        let side = 10;
        let m = conv_stack(&kernels, 2, side, seed);
        let x0 = random_input(m.input_shape(), seed + 1);
        let h = capture(m, &x0).unwrap();
        let k = k % h.output_len();
        let (ky, kx) = (k / side % side, k % side);
        let radius: usize = kernels.iter().map(|k| k / 2).sum();
        let row = h.row(k).unwrap();
        for (j, &v) in row.data().iter().enumerate() {
            let (jy, jx) = (j / side, j % side);
            if jy.abs_diff(ky) > radius || jx.abs_diff(kx) > radius {
                prop_assert_eq!(v, 0.0, "row {} has weight at pixel {}", k, j);
            }
        }
    }

    #[test]
    fn concurrent_probes_match_serial(seed in 0u64..5_000) {
        let h = any_model(seed);
        let ks: Vec<usize> = (0..h.output_len()).step_by(3).collect();
        let serial: Vec<Tensor> = ks.iter().map(|&k| h.row(k).unwrap()).collect();
        let threaded: Vec<Tensor> = std::thread::scope(|s| {
            let hs: Vec<_> = ks.iter().map(|&k| { let h = &h; s.spawn(move || h.row(k).unwrap()) }).collect();
            hs.into_iter().map(|t| t.join().unwrap()).collect()
        });
        prop_assert_eq!(serial, threaded);
    }
}
