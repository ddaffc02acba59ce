// SPDX-License-Identifier: Apache-2.0

//! Self-checks of a captured interpreter.
//!
//! * consistency: the frozen replay of `x0` reproduces the network output;
//! * affinity: the replay is affine in its input;
//! * adjoint: `⟨F·x, y⟩ = ⟨x, Fᵀ·y⟩`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::InterpreterHandle;
use crate::error::Result;
use crate::spectral::{top_singular, SvdConfig};
use crate::tensor::Tensor;

pub const DEFAULT_VERIFY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst normalized error seen.
    pub error: f64,
    pub tol: f64,
    pub samples: usize,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &'static str, error: f64, tol: f64, samples: usize) -> Self {
        Self {
            name,
            error,
            tol,
            samples,
            pass: error <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub model: String,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

/// `max_i |apply(x0)_i − f(x0)_i| / (1 + |f(x0)_i|)`.
pub fn consistency(handle: &InterpreterHandle, tol: f64) -> Result<CheckResult> {
    let replay = handle.apply(handle.reference_input())?;
    let err = replay
        .data()
        .iter()
        .zip(handle.reference_output().data())
        .map(|(a, f)| (a - f).abs() / (1.0 + f.abs()))
        .fold(0.0, f64::max);
    Ok(CheckResult::new("consistency", err, tol, 1))
}

fn gaussian_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::seeded_gaussian(shape, rng.random())
}

/// `apply(a·u + b·w)` against `a·apply(u) + b·apply(w) + (1 − a − b)·r`,
/// relative to the norms of the summed terms.
pub fn affinity(handle: &InterpreterHandle, probes: usize, seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = handle.residual()?.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let u = gaussian_like(handle.input_shape(), &mut rng)?;
        let w = gaussian_like(handle.input_shape(), &mut rng)?;
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(-2.0..2.0);
        let lhs = handle.apply(&Tensor::axpy(a, &u, &w.scale(b))?)?;
        let gu = handle.apply(&u)?.scale(a);
        let gw = handle.apply(&w)?.scale(b);
        let rc = r.scale(1.0 - a - b);
        let rhs = gu.add(&gw)?.add(&rc)?;
        let scale = 1.0 + gu.norm2() + gw.norm2() + rc.norm2();
        worst = worst.max(lhs.sub(&rhs)?.norm2() / scale);
    }
    Ok(CheckResult::new("affinity", worst, tol, probes))
}

/// Top singular value estimate used to scale the adjoint check.
pub fn sigma_estimate(handle: &InterpreterHandle, seed: u64) -> Result<f64> {
    let cfg = SvdConfig {
        steps: 100,
        tol: 1e-6,
        seed,
        ..SvdConfig::default()
    };
    Ok(top_singular(handle, &cfg)?.sigma)
}

/// `|⟨F·x, y⟩ − ⟨x, Fᵀ·y⟩| / (‖x‖·‖y‖·σ̂)` over random pairs.
pub fn adjoint(handle: &InterpreterHandle, pairs: usize, seed: u64, tol: f64) -> Result<CheckResult> {
    let sigma = sigma_estimate(handle, seed)?.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = gaussian_like(handle.input_shape(), &mut rng)?;
        let y = gaussian_like(handle.output_shape(), &mut rng)?;
        let lhs = handle.apply_linear(&x)?.inner(&y)?;
        let rhs = x.inner(&handle.apply_adjoint(&y)?)?;
        worst = worst.max((lhs - rhs).abs() / (x.norm2() * y.norm2() * sigma));
    }
    Ok(CheckResult::new("adjoint", worst, tol, pairs))
}

/// All three suites with one tolerance.
pub fn verify(handle: &InterpreterHandle, tol: f64, seed: u64) -> Result<VerifyReport> {
    let checks = vec![
        consistency(handle, tol)?,
        affinity(handle, 100, seed, tol)?,
        adjoint(handle, 100, seed, tol)?,
    ];
    Ok(VerifyReport {
        model: handle.model().name().to_string(),
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::capture;
    use crate::fixtures::{hand_model, tiny_classifier};
    use crate::layers::UnitState;

    #[test]
    fn hand_fixture_passes() {
        let h = capture(hand_model(), &Tensor::ones(&[1]).unwrap()).unwrap();
        let rep = verify(&h, DEFAULT_VERIFY_TOL, 0).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.checks[0].error, 0.0);
    }

    #[test]
    fn corrupted_mask_fails_consistency() {
        let m = tiny_classifier();
        let x0 = crate::fixtures::sample_image();
        let h = capture(m, &x0).unwrap();
        let UnitState::ReluMask(mask) = &h.frozen().states[1] else {
            panic!("relu state expected")
        };
        let flipped = mask.map(|v| 1.0 - v);
        let bad = h.with_unit_state(1, UnitState::ReluMask(flipped)).unwrap();
        let rep = verify(&bad, DEFAULT_VERIFY_TOL, 0).unwrap();
        assert!(!rep.pass);
        assert!(!rep.checks[0].pass);
        assert!(rep.checks[2].pass);
    }
}
