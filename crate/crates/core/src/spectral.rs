// SPDX-License-Identifier: Apache-2.0

//! Matrix-free singular triplets of a linear interpreter.
//!
//! The top triplet comes from a power iteration on `FᵀF` with an optional
//! heavy-ball momentum term:
//!
//! ```text
//! u      ← F·v_curr
//! v_next ← Fᵀ·u − m·v_prev
//! σ²     ← ⟨v_curr, v_next⟩
//! v_prev ← v_curr / ‖v_next‖
//! v_curr ← v_next / ‖v_next‖
//! ```
//!
//! Both iterates are divided by the same norm so the two-term recurrence is
//! preserved. Further triplets are found on the deflated operator
//! `F − Σ σ_j u_j v_jᵀ`.

use crate::engine::{DenseMatrix, InterpreterHandle};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// A linear map between two tensor domains with an explicit adjoint.
pub trait LinearOperator {
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn input_shape(&self) -> &[usize] {
        (**self).input_shape()
    }
    fn output_shape(&self) -> &[usize] {
        (**self).output_shape()
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        (**self).apply(x)
    }
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        (**self).apply_adjoint(y)
    }
}

/// The filter matrix `F(x0)`; the residual is not part of the operator.
impl LinearOperator for InterpreterHandle {
    fn input_shape(&self) -> &[usize] {
        InterpreterHandle::input_shape(self)
    }
    fn output_shape(&self) -> &[usize] {
        InterpreterHandle::output_shape(self)
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_linear(x)
    }
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        InterpreterHandle::apply_adjoint(self, y)
    }
}

/// A dense matrix viewed as an operator between shaped domains.
#[derive(Debug, Clone)]
pub struct MatrixOperator {
    pub matrix: DenseMatrix,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl MatrixOperator {
    pub fn new(matrix: DenseMatrix, input_shape: &[usize], output_shape: &[usize]) -> Result<Self> {
        if input_shape.iter().product::<usize>() != matrix.cols
            || output_shape.iter().product::<usize>() != matrix.rows
        {
            return shape_err(format!(
                "{}×{} matrix does not map {input_shape:?} to {output_shape:?}",
                matrix.rows, matrix.cols
            ));
        }
        Ok(Self {
            matrix,
            input_shape: input_shape.to_vec(),
            output_shape: output_shape.to_vec(),
        })
    }
}

impl LinearOperator for MatrixOperator {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return shape_err(format!("operator expects {:?}, got {:?}", self.input_shape, x.shape()));
        }
        Tensor::new(&self.output_shape, self.matrix.matvec(x.data()))
    }
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        if y.shape() != self.output_shape.as_slice() {
            return shape_err(format!("adjoint expects {:?}, got {:?}", self.output_shape, y.shape()));
        }
        Tensor::new(&self.input_shape, self.matrix.matvec_t(y.data()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdConfig {
    /// Maximum power steps per triplet.
    pub steps: usize,
    /// Heavy-ball coefficient; `0` is the classical power method.
    pub momentum: f64,
    /// Number of triplets.
    pub k: usize,
    /// Seed of the starting vector; stage `j` uses `seed + j`.
    pub seed: u64,
    /// Stop once `|σ²_t − σ²_{t−1}| / σ²_t` drops below this.
    pub tol: f64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            momentum: 0.0,
            k: 1,
            seed: 0,
            tol: 1e-9,
        }
    }
}

impl SvdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("svd needs at least one step".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("svd needs k ≥ 1".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::Config(format!("momentum must be ≥ 0, got {}", self.momentum)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config(format!("tolerance must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// `F·v ≈ σ·u` with unit `v` (eigen-input) and unit `u` (eigen-output).
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub v: Tensor,
    pub u: Tensor,
    pub iterations: usize,
    pub converged: bool,
    /// The operator vanished on every iterate; `sigma` is 0 and `u` is zero.
    pub degenerate: bool,
    /// `‖F·v − σ·u‖`.
    pub residual: f64,
    /// `‖Fᵀ·u − σ·v‖`.
    pub adjoint_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub triplets: Vec<SingularTriplet>,
}

impl SvdResult {
    pub fn sigmas(&self) -> Vec<f64> {
        self.triplets.iter().map(|t| t.sigma).collect()
    }
}

/// One power-iteration run, exposed step by step.
pub struct PowerIteration<'a, O: LinearOperator + ?Sized> {
    op: &'a O,
    momentum: f64,
    v_prev: Tensor,
    v_curr: Tensor,
    sigma2: f64,
    steps: usize,
    vanished: bool,
}

impl<'a, O: LinearOperator + ?Sized> PowerIteration<'a, O> {
    pub fn new(op: &'a O, momentum: f64, seed: u64) -> Result<Self> {
        let start = Tensor::seeded_gaussian(op.input_shape(), seed)?;
        let n = start.norm2();
        Ok(Self {
            op,
            momentum,
            v_prev: Tensor::zeros(op.input_shape())?,
            v_curr: start.scale(1.0 / n),
            sigma2: 0.0,
            steps: 0,
            vanished: false,
        })
    }

    /// Advances one step and returns the new `σ²` estimate.
    pub fn step(&mut self) -> Result<f64> {
        let u = self.op.apply(&self.v_curr)?;
        let back = self.op.apply_adjoint(&u)?;
        let v_next = Tensor::axpy(-self.momentum, &self.v_prev, &back)?;
        self.sigma2 = self.v_curr.inner(&v_next)?;
        let norm = v_next.norm2();
        self.steps += 1;
        if norm.is_nan() || norm <= f64::MIN_POSITIVE {
            self.vanished = true;
            return Ok(0.0);
        }
        self.v_prev = self.v_curr.scale(1.0 / norm);
        self.v_curr = v_next.scale(1.0 / norm);
        Ok(self.sigma2)
    }

    pub fn current(&self) -> &Tensor {
        &self.v_curr
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn vanished(&self) -> bool {
        self.vanished
    }
}

/// Flip so the largest-magnitude entry of `v` (first on ties) is positive.
fn fix_sign(v: &mut Tensor, u: &mut Tensor) {
    let mut best = 0;
    for (i, x) in v.data().iter().enumerate() {
        if x.abs() > v.data()[best].abs() {
            best = i;
        }
    }
    if v.data()[best] < 0.0 {
        *v = v.scale(-1.0);
        *u = u.scale(-1.0);
    }
}

/// Top singular triplet of `op`.
pub fn top_singular<O: LinearOperator + ?Sized>(op: &O, cfg: &SvdConfig) -> Result<SingularTriplet> {
    cfg.validate()?;
    let mut it = PowerIteration::new(op, cfg.momentum, cfg.seed)?;
    let mut prev = 0.0;
    let mut converged = false;
    while it.steps() < cfg.steps {
        let s2 = it.step()?;
        if it.vanished() {
            break;
        }
        if s2 > 0.0 && ((s2 - prev) / s2).abs() < cfg.tol {
            converged = true;
            break;
        }
        prev = s2;
    }
    let v = it.current().clone();
    finish_triplet(op, v, it.steps(), converged)
}

fn finish_triplet<O: LinearOperator + ?Sized>(
    op: &O,
    mut v: Tensor,
    iterations: usize,
    converged: bool,
) -> Result<SingularTriplet> {
    let fv = op.apply(&v)?;
    let sigma = fv.norm2();
    let degenerate = sigma.is_nan() || sigma <= f64::MIN_POSITIVE;
    let mut u = if degenerate {
        Tensor::zeros(op.output_shape())?
    } else {
        fv.scale(1.0 / sigma)
    };
    let sigma = if degenerate { 0.0 } else { sigma };
    fix_sign(&mut v, &mut u);
    let (residual, adjoint_residual) = triplet_residuals(op, sigma, &v, &u)?;
    Ok(SingularTriplet {
        sigma,
        v,
        u,
        iterations,
        converged,
        degenerate,
        residual,
        adjoint_residual,
    })
}

fn triplet_residuals<O: LinearOperator + ?Sized>(op: &O, sigma: f64, v: &Tensor, u: &Tensor) -> Result<(f64, f64)> {
    let r1 = Tensor::axpy(-sigma, u, &op.apply(v)?)?.norm2();
    let r2 = Tensor::axpy(-sigma, v, &op.apply_adjoint(u)?)?.norm2();
    Ok((r1, r2))
}

/// `F − Σ σ_j u_j v_jᵀ` as an operator view.
pub struct Deflated<'a, O: LinearOperator + ?Sized> {
    inner: &'a O,
    triplets: &'a [SingularTriplet],
}

const NORMALIZED_TOL: f64 = 1e-8;

pub fn deflate<'a, O: LinearOperator + ?Sized>(
    op: &'a O,
    triplets: &'a [SingularTriplet],
) -> Result<Deflated<'a, O>> {
    for (j, t) in triplets.iter().enumerate() {
        if t.v.shape() != op.input_shape() || t.u.shape() != op.output_shape() {
            return Err(Error::Contract(format!("triplet {j} does not match the operator domains")));
        }
        let unit_u = t.degenerate || (t.u.norm2() - 1.0).abs() <= NORMALIZED_TOL;
        if (t.v.norm2() - 1.0).abs() > NORMALIZED_TOL || !unit_u {
            return Err(Error::Contract(format!("triplet {j} is not normalized")));
        }
    }
    Ok(Deflated { inner: op, triplets })
}

impl<O: LinearOperator + ?Sized> LinearOperator for Deflated<'_, O> {
    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }
    fn output_shape(&self) -> &[usize] {
        self.inner.output_shape()
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.inner.apply(x)?;
        for t in self.triplets {
            y = Tensor::axpy(-t.sigma * t.v.inner(x)?, &t.u, &y)?;
        }
        Ok(y)
    }
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let mut x = self.inner.apply_adjoint(y)?;
        for t in self.triplets {
            x = Tensor::axpy(-t.sigma * t.u.inner(y)?, &t.v, &x)?;
        }
        Ok(x)
    }
}

/// Gram-Schmidt (two passes) of `x` against `basis`, then normalization.
fn orthonormalize<'b>(x: &Tensor, basis: impl Iterator<Item = &'b Tensor> + Clone) -> Result<Option<Tensor>> {
    let mut x = x.clone();
    for _ in 0..2 {
        for b in basis.clone() {
            x = Tensor::axpy(-b.inner(&x)?, b, &x)?;
        }
    }
    let n = x.norm2();
    Ok((n > f64::MIN_POSITIVE).then(|| x.scale(1.0 / n)))
}

/// Top-`k` triplets in decreasing order of `σ` via repeated deflation.
///
/// Within a cluster of equal singular values any orthonormal basis of the
/// cluster's span is returned.
pub fn svd_topk<O: LinearOperator + ?Sized>(op: &O, cfg: &SvdConfig) -> Result<SvdResult> {
    cfg.validate()?;
    let n: usize = op.input_shape().iter().product();
    let m: usize = op.output_shape().iter().product();
    if cfg.k > n.min(m) {
        return Err(Error::Config(format!(
            "k = {} exceeds min(input, output) = {}",
            cfg.k,
            n.min(m)
        )));
    }
    let mut found: Vec<SingularTriplet> = Vec::with_capacity(cfg.k);
    for j in 0..cfg.k {
        let stage_cfg = SvdConfig {
            seed: cfg.seed.wrapping_add(j as u64),
            ..*cfg
        };
        let raw = {
            let view = deflate(op, &found)?;
            top_singular(&view, &stage_cfg)?
        };
        let v = match orthonormalize(&raw.v, found.iter().map(|t| &t.v))? {
            Some(v) => v,
            None => raw.v.clone(),
        };
        let fv = op.apply(&v)?;
        let mut t = match orthonormalize(&fv, found.iter().filter(|t| !t.degenerate).map(|t| &t.u))? {
            Some(u) if !raw.degenerate => {
                let sigma = u.inner(&fv)?.max(0.0);
                let (residual, adjoint_residual) = triplet_residuals(op, sigma, &v, &u)?;
                SingularTriplet {
                    sigma,
                    v,
                    u,
                    residual,
                    adjoint_residual,
                    ..raw
                }
            }
            _ => finish_triplet(op, v, raw.iterations, raw.converged).map(|mut t| {
                t.degenerate = true;
                t.sigma = 0.0;
                t.u = Tensor::zeros(op.output_shape()).expect("valid shape");
                t
            })?,
        };
        let (mut v, mut u) = (t.v.clone(), t.u.clone());
        fix_sign(&mut v, &mut u);
        t.v = v;
        t.u = u;
        found.push(t);
    }
    Ok(SvdResult { triplets: found })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: usize, cols: usize, data: Vec<f64>) -> MatrixOperator {
        MatrixOperator::new(DenseMatrix { rows, cols, data }, &[cols], &[rows]).unwrap()
    }

    #[test]
    fn scalar_and_identity() {
        let op = dense(1, 1, vec![2.0]);
        let t = top_singular(&op, &SvdConfig::default()).unwrap();
        assert!((t.sigma - 2.0).abs() < 1e-15);
        assert_eq!(t.u, t.v);

        let id = dense(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        let t = top_singular(&id, &SvdConfig::default()).unwrap();
        assert!((t.sigma - 1.0).abs() < 1e-14);
        assert!(t.residual < 1e-14);
    }

    #[test]
    fn averaging_operator() {
        let op = dense(1, 4, vec![0.25; 4]);
        let t = top_singular(&op, &SvdConfig::default()).unwrap();
        assert!((t.sigma - 0.5).abs() < 1e-14);
        for &x in t.v.data() {
            assert!((x - 0.5).abs() < 1e-12);
        }
        assert!((t.u.data()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_operator_is_degenerate() {
        let op = dense(2, 3, vec![0.0; 6]);
        let t = top_singular(&op, &SvdConfig::default()).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.sigma, 0.0);
        assert!((t.v.norm2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deflation_examples() {
        let id = dense(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let e1 = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let t = SingularTriplet {
            sigma: 1.0,
            v: e1.clone(),
            u: e1.clone(),
            iterations: 0,
            converged: true,
            degenerate: false,
            residual: 0.0,
            adjoint_residual: 0.0,
        };
        let ts = [t];
        let d = deflate(&id, &ts).unwrap();
        assert_eq!(d.apply(&e1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(d.apply(&e2).unwrap(), e2);
        assert_eq!(d.apply_adjoint(&e1).unwrap().data(), &[0.0, 0.0]);

        let mut bad = ts[0].clone();
        bad.v = e1.scale(2.0);
        assert!(matches!(deflate(&id, &[bad]), Err(Error::Contract(_))));
    }

    #[test]
    fn rank_one_annihilation() {
        // u vᵀ·3 with unit u, v
        let u = [0.6, 0.8];
        let v = [0.0, 0.6, 0.8];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| 3.0 * a * b)).collect();
        let op = dense(2, 3, data);
        let t = top_singular(&op, &SvdConfig::default()).unwrap();
        assert!((t.sigma - 3.0).abs() < 1e-12);
        let ts = [t];
        let d = deflate(&op, &ts).unwrap();
        for k in 0..3 {
            let col = d.apply(&Tensor::delta(&[3], k).unwrap()).unwrap();
            assert!(col.norm2() <= 1e-8 * 3.0);
        }
    }

    #[test]
    fn momentum_zero_is_classical_power_method() {
        let op = dense(3, 3, vec![4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let mut it = PowerIteration::new(&op, 0.0, 11).unwrap();
        let mut v = Tensor::seeded_gaussian(&[3], 11).unwrap();
        v = v.scale(1.0 / v.norm2());
        for _ in 0..25 {
            it.step().unwrap();
            let w = op.apply_adjoint(&op.apply(&v).unwrap()).unwrap();
            v = w.scale(1.0 / w.norm2());
            assert_eq!(it.current(), &v);
        }
    }

    #[test]
    fn config_validation() {
        let op = dense(1, 1, vec![1.0]);
        for cfg in [
            SvdConfig { steps: 0, ..Default::default() },
            SvdConfig { k: 0, ..Default::default() },
            SvdConfig { tol: 0.0, ..Default::default() },
            SvdConfig { momentum: -1.0, ..Default::default() },
        ] {
            assert!(matches!(top_singular(&op, &cfg), Err(Error::Config(_))));
        }
        let cfg = SvdConfig { k: 2, ..Default::default() };
        assert!(matches!(svd_topk(&op, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identity_topk_is_orthonormal() {
        let id = dense(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let res = svd_topk(&id, &SvdConfig { k: 3, ..Default::default() }).unwrap();
        for (i, a) in res.triplets.iter().enumerate() {
            assert!((a.sigma - 1.0).abs() < 1e-12);
            assert!(a.u.sub(&a.v).unwrap().norm2() < 1e-12);
            for b in &res.triplets[i + 1..] {
                assert!(a.v.inner(&b.v).unwrap().abs() < 1e-12);
                assert!(a.u.inner(&b.u).unwrap().abs() < 1e-12);
            }
        }
    }
}
