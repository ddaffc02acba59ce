// SPDX-License-Identifier: Apache-2.0

//! Frozen-decision replay of a whole network.
//!
//! [`capture`] runs the network once on a reference input `x0`, recording
//! every unit's decision. The resulting [`InterpreterHandle`] evaluates the
//! affine system `y = F·x + r` for arbitrary probes, and its transpose,
//! without ever forming `F`.

use std::sync::{Arc, OnceLock};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, UnitState};
use crate::model::ModelSpec;
use crate::tensor::Tensor;

pub const DEFAULT_CHUNK_SIZE: usize = 64;
pub const DEFAULT_MAX_ELEMS: usize = 1 << 22;

/// Decisions captured from one reference input.
#[derive(Debug, Clone)]
pub struct FrozenState {
    pub x0: Tensor,
    /// One entry per layer; `UnitState::Empty` for affine layers.
    pub states: Vec<UnitState>,
    /// True activations of `x0`, input first.
    pub activations: Vec<Tensor>,
}

impl FrozenState {
    pub fn y0(&self) -> &Tensor {
        self.activations.last().expect("input activation")
    }
}

/// Row-major dense matrix, used only for small-model oracles and exports.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.cols).map(|row| crate::tensor::dot(row, x)).collect()
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &g) in self.data.chunks(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * g;
            }
        }
        out
    }
}

/// Immutable linear interpreter of the layer range `[from, to)` of a model.
#[derive(Debug, Clone)]
pub struct InterpreterHandle {
    model: Arc<ModelSpec>,
    frozen: Arc<FrozenState>,
    from: usize,
    to: usize,
    chunk_size: usize,
    residual: OnceLock<Tensor>,
}

/// Runs the network on `x0` and freezes every unit's decision.
pub fn capture(model: impl Into<Arc<ModelSpec>>, x0: &Tensor) -> Result<InterpreterHandle> {
    let model = model.into();
    let mut states = Vec::with_capacity(model.len());
    let mut acts = Vec::with_capacity(model.len() + 1);
    if x0.shape() != model.input_shape() {
        return shape_err(format!(
            "model '{}' expects input {:?}, got {:?}",
            model.name(),
            model.input_shape(),
            x0.shape()
        ));
    }
    if !x0.is_finite() {
        return Err(Error::Numeric {
            layer: 0,
            kind: "input".into(),
        });
    }
    acts.push(x0.clone());
    for (i, spec) in model.layers().iter().enumerate() {
        let cur = &acts[i];
        let (state, next) = match spec.layer {
            Layer::Add { source } => (UnitState::Empty, cur.add(&acts[source])?),
            ref layer => (layer.capture(cur)?, layer.forward(cur)?),
        };
        if !next.is_finite() {
            return Err(Error::Numeric {
                layer: i,
                kind: spec.kind().name().to_string(),
            });
        }
        states.push(state);
        acts.push(next);
    }
    let frozen = FrozenState {
        x0: x0.clone(),
        states,
        activations: acts,
    };
    let to = model.len();
    Ok(InterpreterHandle {
        model,
        frozen: Arc::new(frozen),
        from: 0,
        to,
        chunk_size: DEFAULT_CHUNK_SIZE,
        residual: OnceLock::new(),
    })
}

/// Interpreter of layers `[from, to)` sharing the capture of `x0`.
pub fn subnetwork_handle(
    model: impl Into<Arc<ModelSpec>>,
    x0: &Tensor,
    from: usize,
    to: usize,
) -> Result<InterpreterHandle> {
    capture(model, x0)?.subnetwork(from, to)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Affine,
    Linear,
}

impl InterpreterHandle {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn frozen(&self) -> &FrozenState {
        &self.frozen
    }

    /// Layer range `[from, to)` this handle interprets.
    pub fn range(&self) -> (usize, usize) {
        (self.from, self.to)
    }

    pub fn input_shape(&self) -> &[usize] {
        self.model.activation_shape(self.from)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.model.activation_shape(self.to)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Reference input of this range (activation `from` of `x0`).
    pub fn reference_input(&self) -> &Tensor {
        &self.frozen.activations[self.from]
    }

    /// True output of this range on `x0`.
    pub fn reference_output(&self) -> &Tensor {
        &self.frozen.activations[self.to]
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk_size = chunk.max(1);
        self
    }

    pub fn subnetwork(&self, from: usize, to: usize) -> Result<InterpreterHandle> {
        if from >= to || to > self.model.len() {
            return Err(Error::Config(format!(
                "layer range [{from}, {to}) invalid for {} layers",
                self.model.len()
            )));
        }
        Ok(InterpreterHandle {
            model: Arc::clone(&self.model),
            frozen: Arc::clone(&self.frozen),
            from,
            to,
            chunk_size: self.chunk_size,
            residual: OnceLock::new(),
        })
    }

    /// Copy of this handle with the decision of `layer` replaced.
    pub fn with_unit_state(&self, layer: usize, state: UnitState) -> Result<InterpreterHandle> {
        if layer >= self.model.len() {
            return Err(Error::Index {
                index: layer,
                len: self.model.len(),
            });
        }
        let mut frozen = (*self.frozen).clone();
        frozen.states[layer] = state;
        Ok(InterpreterHandle {
            model: Arc::clone(&self.model),
            frozen: Arc::new(frozen),
            from: self.from,
            to: self.to,
            chunk_size: self.chunk_size,
            residual: OnceLock::new(),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return shape_err(format!(
                "interpreter expects input {:?}, got {:?}",
                self.input_shape(),
                x.shape()
            ));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.to - self.from + 1);
        acts.push(x.clone());
        for i in self.from..self.to {
            let spec = &self.model.layers()[i];
            let state = &self.frozen.states[i];
            let cur = acts.last().expect("non-empty");
            let next = match spec.layer {
                Layer::Add { source } if source >= self.from => cur.add(&acts[source - self.from])?,
                // skip sources before the range are constants of this sub-system
                Layer::Add { .. } if mode == Mode::Linear => cur.clone(),
                Layer::Add { source } => cur.add(&self.frozen.activations[source])?,
                ref layer => match mode {
                    Mode::Affine => layer.frozen(cur, state)?,
                    Mode::Linear => layer.frozen_linear(cur, state)?,
                },
            };
            if !next.is_finite() {
                return Err(Error::Numeric {
                    layer: i,
                    kind: spec.kind().name().to_string(),
                });
            }
            acts.push(next);
        }
        Ok(acts.pop().expect("non-empty"))
    }

    /// `F·x1 + r`.
    pub fn apply(&self, x1: &Tensor) -> Result<Tensor> {
        self.run(x1, Mode::Affine)
    }

    /// `F·x`, the frozen system with every bias and unit constant removed.
    pub fn apply_linear(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, Mode::Linear)
    }

    /// `Fᵀ·y2`, composing per-layer adjoints in reverse; skip joins sum their fan-ins.
    pub fn apply_adjoint(&self, y2: &Tensor) -> Result<Tensor> {
        if y2.shape() != self.output_shape() {
            return shape_err(format!(
                "interpreter adjoint expects {:?}, got {:?}",
                self.output_shape(),
                y2.shape()
            ));
        }
        let base = self.from;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.to - self.from + 1];
        grads[self.to - base] = Some(y2.clone());
        for i in (self.from..self.to).rev() {
            let Some(g) = grads[i + 1 - base].take() else {
                continue;
            };
            let spec = &self.model.layers()[i];
            let contrib = match spec.layer {
                Layer::Add { source } => {
                    if source >= self.from {
                        accumulate(&mut grads[source - base], &g)?;
                    }
                    g
                }
                ref layer => layer.frozen_adjoint(&g, &self.frozen.states[i], self.model.activation_shape(i))?,
            };
            if !contrib.is_finite() {
                return Err(Error::Numeric {
                    layer: i,
                    kind: spec.kind().name().to_string(),
                });
            }
            accumulate(&mut grads[i - base], &contrib)?;
        }
        match grads[0].take() {
            Some(g) => Ok(g),
            None => Tensor::zeros(self.input_shape()),
        }
    }

    /// `r = apply(0)`, computed once.
    pub fn residual(&self) -> Result<&Tensor> {
        if let Some(r) = self.residual.get() {
            return Ok(r);
        }
        let r = self.apply(&Tensor::zeros(self.input_shape())?)?;
        Ok(self.residual.get_or_init(|| r))
    }

    /// Column `k` of `F`: the response to an input impulse at `k`.
    pub fn column(&self, k: usize) -> Result<Tensor> {
        self.apply_linear(&Tensor::delta(self.input_shape(), k)?)
    }

    /// Row `k` of `F` (input-shaped): `Fᵀ·δ_k`.
    pub fn row(&self, k: usize) -> Result<Tensor> {
        self.apply_adjoint(&Tensor::delta(self.output_shape(), k)?)
    }

    pub fn columns(&self, ks: &[usize]) -> Result<Vec<Tensor>> {
        self.batched(ks, |k| self.column(k))
    }

    pub fn rows(&self, ks: &[usize]) -> Result<Vec<Tensor>> {
        self.batched(ks, |k| self.row(k))
    }

    /// Independent probes, chunked across worker threads; results keep input order.
    fn batched(&self, ks: &[usize], probe: impl Fn(usize) -> Result<Tensor> + Sync) -> Result<Vec<Tensor>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        if ks.len() <= self.chunk_size || workers == 1 {
            return ks.iter().map(|&k| probe(k)).collect();
        }
        let chunks: Vec<&[usize]> = ks.chunks(self.chunk_size).collect();
        let mut results: Vec<Option<Result<Vec<Tensor>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (group, slots) in chunks
                .chunks(chunks.len().div_ceil(workers))
                .zip(results.chunks_mut(chunks.len().div_ceil(workers)))
            {
                let probe = &probe;
                scope.spawn(move || {
                    for (chunk, slot) in group.iter().zip(slots.iter_mut()) {
                        *slot = Some(chunk.iter().map(|&k| probe(k)).collect());
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(ks.len());
        for r in results {
            out.extend(r.expect("every chunk ran")?);
        }
        Ok(out)
    }

    /// Dense `F` (output × input, row-major) and `r`, assembled column by column.
    pub fn materialize(&self, max_elems: usize) -> Result<(DenseMatrix, Tensor)> {
        let (n, m) = (self.input_len(), self.output_len());
        if n.saturating_mul(m) > max_elems {
            return Err(Error::Refused(format!(
                "filter matrix {m}×{n} exceeds the {max_elems}-element guard"
            )));
        }
        let cols = self.columns(&(0..n).collect::<Vec<_>>())?;
        let mut data = vec![0.0; n * m];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.data().iter().enumerate() {
                data[i * n + j] = v;
            }
        }
        Ok((
            DenseMatrix {
                rows: m,
                cols: n,
                data,
            },
            self.residual()?.clone(),
        ))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, ConvGeometry, FullyConnected, InstanceNorm2d, Pool2d};
    use crate::model::LayerSpec;

    /// `x ↦ W2·relu(W1·x + b1) + b2` with `W1 = [1, −1]ᵀ`, `b1 = [.5, .5]`,
    /// `W2 = [2, 3]`, `b2 = .25`.
    fn fixture() -> ModelSpec {
        ModelSpec::new(
            "fixture",
            &[1],
            vec![
                LayerSpec::new(
                    "fc1",
                    Layer::FullyConnected(FullyConnected::new(1, 2, vec![1.0, -1.0], Some(vec![0.5, 0.5])).unwrap()),
                ),
                LayerSpec::new("relu", Layer::Relu),
                LayerSpec::new(
                    "fc2",
                    Layer::FullyConnected(FullyConnected::new(2, 1, vec![2.0, 3.0], Some(vec![0.25])).unwrap()),
                ),
            ],
        )
        .unwrap()
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn identity_model(shape: &[usize]) -> ModelSpec {
        let g = ConvGeometry {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        ModelSpec::new(
            "identity",
            shape,
            vec![LayerSpec::new(
                "id",
                Layer::Conv2d(Conv2d::new(1, 1, g, vec![1.0], Some(vec![0.0])).unwrap()),
            )],
        )
        .unwrap()
    }

    #[test]
    fn hand_fixture() {
        let h = capture(fixture(), &scalar(1.0)).unwrap();
        assert_eq!(h.frozen().y0().data(), &[3.25]);
        assert_eq!(h.apply(&scalar(1.0)).unwrap().data(), &[3.25]);
        assert_eq!(h.apply(&scalar(2.0)).unwrap().data(), &[5.25]);
        assert_eq!(h.residual().unwrap().data(), &[1.25]);
        assert_eq!(h.column(0).unwrap().data(), &[2.0]);
        assert_eq!(h.apply_adjoint(&scalar(1.0)).unwrap().data(), &[2.0]);
        let (f, r) = h.materialize(DEFAULT_MAX_ELEMS).unwrap();
        assert_eq!(f.data, vec![2.0]);
        assert_eq!(r.data(), &[1.25]);
    }

    #[test]
    fn identity_network() {
        let h = capture(identity_model(&[1, 2, 2]), &Tensor::seeded_gaussian(&[1, 2, 2], 1).unwrap()).unwrap();
        let x = Tensor::seeded_gaussian(&[1, 2, 2], 2).unwrap();
        assert_eq!(h.apply(&x).unwrap(), x);
        assert_eq!(h.apply_adjoint(&x).unwrap(), x);
        for k in 0..4 {
            let d = Tensor::delta(&[1, 2, 2], k).unwrap();
            assert_eq!(h.column(k).unwrap(), d);
            assert_eq!(h.row(k).unwrap(), d);
        }
        let (f, r) = h.materialize(16).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(f.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(r.max_abs(), 0.0);
        assert!(matches!(h.materialize(15), Err(Error::Refused(_))));
    }

    #[test]
    fn instance_norm_residual() {
        let m = ModelSpec::new(
            "norm",
            &[1, 1, 2],
            vec![LayerSpec::new(
                "n",
                Layer::InstanceNorm2d(InstanceNorm2d::new(1, 1e-5, None, None).unwrap()),
            )],
        )
        .unwrap();
        let h = capture(m, &Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let sigma = (1.0f64 + 1e-5).sqrt();
        let r = h.residual().unwrap();
        for &v in r.data() {
            assert!((v + 2.0 / sigma).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_free_relu_residual_is_zero() {
        let g = ConvGeometry {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let w = Tensor::seeded_gaussian(&[18], 4).unwrap().into_data();
        let m = ModelSpec::new(
            "nobias",
            &[1, 4, 4],
            vec![
                LayerSpec::new("c", Layer::Conv2d(Conv2d::new(1, 2, g, w, None).unwrap())),
                LayerSpec::new("r", Layer::Relu),
                LayerSpec::new("p", Layer::MaxPool2d(Pool2d::new(2, 2).unwrap())),
            ],
        )
        .unwrap();
        let h = capture(m, &Tensor::seeded_gaussian(&[1, 4, 4], 5).unwrap()).unwrap();
        assert_eq!(h.residual().unwrap().max_abs(), 0.0);
    }

    #[test]
    fn avgpool_row_is_window_average() {
        let m = ModelSpec::new(
            "avg",
            &[1, 4, 4],
            vec![LayerSpec::new("p", Layer::AvgPool2d(Pool2d::new(2, 2).unwrap()))],
        )
        .unwrap();
        let h = capture(m, &Tensor::zeros(&[1, 4, 4]).unwrap()).unwrap();
        let row = h.row(1).unwrap();
        let mut expect = vec![0.0; 16];
        for k in [2, 3, 6, 7] {
            expect[k] = 0.25;
        }
        assert_eq!(row.data(), expect.as_slice());
    }

    #[test]
    fn errors() {
        let h = capture(fixture(), &scalar(1.0)).unwrap();
        assert!(matches!(h.apply(&Tensor::zeros(&[2]).unwrap()), Err(Error::Shape(_))));
        assert!(matches!(h.column(1), Err(Error::Index { .. })));
        assert!(matches!(h.row(1), Err(Error::Index { .. })));
        assert!(matches!(h.subnetwork(2, 2), Err(Error::Config(_))));
        assert!(matches!(h.subnetwork(0, 4), Err(Error::Config(_))));
        assert!(capture(fixture(), &Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn subnetworks_compose() {
        let h = capture(fixture(), &scalar(1.0)).unwrap();
        let x = scalar(-0.7);
        for cut in 1..3 {
            let pre = h.subnetwork(0, cut).unwrap();
            let post = h.subnetwork(cut, 3).unwrap();
            let y = post.apply(&pre.apply(&x).unwrap()).unwrap();
            assert!((y.data()[0] - h.apply(&x).unwrap().data()[0]).abs() <= 1e-12);
            assert_eq!(post.apply(post.reference_input()).unwrap(), *h.frozen().y0());
        }
    }

    #[test]
    fn corrupted_state_breaks_consistency() {
        let h = capture(fixture(), &scalar(1.0)).unwrap();
        let bad = h
            .with_unit_state(1, UnitState::ReluMask(Tensor::new(&[2], vec![1.0, 1.0]).unwrap()))
            .unwrap();
        assert_ne!(bad.apply(&scalar(1.0)).unwrap(), *h.frozen().y0());
        assert!(h.with_unit_state(5, UnitState::Empty).is_err());
    }

    #[test]
    fn batched_probes_keep_order() {
        let h = capture(identity_model(&[1, 10, 10]), &Tensor::zeros(&[1, 10, 10]).unwrap())
            .unwrap()
            .with_chunk_size(7);
        let ks: Vec<usize> = (0..100).rev().collect();
        let cols = h.columns(&ks).unwrap();
        for (c, &k) in cols.iter().zip(&ks) {
            assert_eq!(c.data()[k], 1.0);
        }
    }
}
