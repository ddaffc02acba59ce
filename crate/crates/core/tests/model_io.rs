// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use linterp::fixtures::{fixture, random_input, random_model, sample_image, write_fixtures, RandomModelOptions};
use linterp::io::{decode_image, encode_pfm, load_image, load_model, model_to_parts, save_model};
use linterp::{capture, Error};
use proptest::prelude::*;

fn shipped_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
fn committed_fixtures_match_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        let fresh = fs::read(dir.path().join(&name)).unwrap();
        let committed = fs::read(shipped_dir().join(&name)).unwrap();
        assert!(fresh == committed, "{name:?} differs from the generator output");
    }
}

#[test]
fn shipped_models_load_to_the_generated_specs() {
    for name in ["tiny-classifier", "tiny-sr", "tiny-i2i", "hand"] {
        let d = shipped_dir();
        let loaded = load_model(&d.join(format!("{name}.json")), &d.join(format!("{name}.bin"))).unwrap();
        assert_eq!(loaded, fixture(name).unwrap(), "{name}");
    }
    assert_eq!(load_image(&shipped_dir().join("sample.pgm")).unwrap(), sample_image());
}

#[test]
fn fixture_shapes() {
    let shapes = |n: &str| {
        let m = fixture(n).unwrap();
        (m.input_shape().to_vec(), m.output_shape().to_vec())
    };
    assert_eq!(shapes("tiny-classifier"), (vec![1, 8, 8], vec![3]));
    assert_eq!(shapes("tiny-sr"), (vec![1, 8, 8], vec![1, 16, 16]));
    assert_eq!(shapes("tiny-i2i"), (vec![1, 8, 8], vec![1, 8, 8]));
}

#[test]
fn load_then_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["tiny-classifier", "tiny-sr", "tiny-i2i", "hand"] {
        let d = shipped_dir();
        let (json, bin) = (d.join(format!("{name}.json")), d.join(format!("{name}.bin")));
        let m = load_model(&json, &bin).unwrap();
        let (json2, bin2) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&m, &json2, &bin2).unwrap();
        assert_eq!(fs::read(&json).unwrap(), fs::read(&json2).unwrap());
        assert_eq!(fs::read(&bin).unwrap(), fs::read(&bin2).unwrap());
    }
}

#[test]
fn damaged_blobs_are_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = shipped_dir();
    let json = d.join("tiny-sr.json");
    let blob = fs::read(d.join("tiny-sr.bin")).unwrap();

    let short = dir.path().join("short.bin");
    fs::write(&short, &blob[..blob.len() - 4]).unwrap();
    let Err(Error::Load(msg)) = load_model(&json, &short) else { panic!("truncated blob loaded") };
    assert!(msg.contains("conv2.bias"), "{msg}");

    let mut flipped = blob.clone();
    flipped[10] ^= 0x40;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &flipped).unwrap();
    let Err(Error::Load(msg)) = load_model(&json, &bad) else { panic!("corrupt blob loaded") };
    assert!(msg.to_lowercase().contains("checksum"), "{msg}");

    assert!(matches!(load_model(&json, &dir.path().join("missing.bin")), Err(Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_models_round_trip(seed in 0u64..10_000) {
        let m = random_model(seed, RandomModelOptions::default());
        let dir = tempfile::tempdir().unwrap();
        let (json, bin) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&m, &json, &bin).unwrap();
        let back = load_model(&json, &bin).unwrap();
        // weights pass through f32 on disk, so compare the re-saved parts
        prop_assert_eq!(model_to_parts(&back), model_to_parts(&m));
        let x0 = random_input(m.input_shape(), seed);
        let (a, b) = (capture(m, &x0).unwrap(), capture(back, &x0).unwrap());
        prop_assert_eq!(a.reference_output(), b.reference_output());
    }

    #[test]
    fn pfm_round_trips_f32_maps(c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in 0u64..10_000) {
        let t = linterp::Tensor::seeded_gaussian(&[c, h, w], seed).unwrap().map(|v| v as f32 as f64);
        let back = decode_image(&encode_pfm(&t).unwrap()).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }
}
