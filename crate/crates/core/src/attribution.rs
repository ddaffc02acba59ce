// SPDX-License-Identifier: Apache-2.0

//! Bias decomposition and pixel-wise attribution for sequential networks.
//!
//! A chain is cut into stages, each a biased affine layer (`conv`, `conv_t`,
//! `fc`) followed by the parameter-free layers and units up to the next one.
//! Under the frozen decisions of `x0` stage `i` is the affine map
//! `x ↦ Ŵ_i·x + b̂_i`, so with `Q_i = Ŵ_n⋯Ŵ_{i+1}` (forward projection) and
//! `P_i = Ŵ_1ᵀ⋯Ŵ_iᵀ` (back projection):
//!
//! ```text
//! F = Ŵ_n⋯Ŵ_1        r = Σ_i Q_i·b̂_i
//! ```
//!
//! Each `(Q_i·b̂_i)[c]` is the contribution of stage `i`'s masked bias to
//! score `c`; together with `(F·x0)[c]` they sum to the score.

use crate::engine::InterpreterHandle;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::ModelSpec;
use crate::spectral::LinearOperator;
use crate::tensor::Tensor;

/// True iff the model is a pure chain (vacuously true when empty).
pub fn sequential_check(model: &ModelSpec) -> bool {
    model.is_sequential()
}

/// Layer range `[from, to)` forming one stage, with its masked bias `b̂`.
#[derive(Debug, Clone)]
pub struct Stage {
    pub from: usize,
    pub to: usize,
    pub layer_ids: Vec<String>,
    /// The stage's constant term in the domain of activation `to`.
    pub bias_hat: Tensor,
}

impl Stage {
    pub fn label(&self) -> String {
        self.layer_ids.join("+")
    }
}

/// Per-stage operator views `Ŵ_i` and masked biases `b̂_i`.
#[derive(Debug, Clone)]
pub struct MaskedParams {
    handle: InterpreterHandle,
    stages: Vec<Stage>,
    views: Vec<InterpreterHandle>,
}

fn stage_bounds(model: &ModelSpec) -> Vec<(usize, usize)> {
    let mut starts: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.layer.has_bias_parameter())
        .map(|(i, _)| i)
        .collect();
    if !model.is_empty() && starts.first() != Some(&0) {
        starts.insert(0, 0);
    }
    let mut bounds = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let e = starts.get(k + 1).copied().unwrap_or(model.len());
        bounds.push((s, e));
    }
    bounds
}

impl MaskedParams {
    pub fn new(handle: &InterpreterHandle) -> Result<Self> {
        let model = handle.model();
        if !sequential_check(model) {
            return Err(Error::Contract(format!(
                "model '{}' has skip joins; the stage decomposition needs a chain",
                model.name()
            )));
        }
        if handle.range() != (0, model.len()) {
            return Err(Error::Contract("stage decomposition needs the full-range interpreter".into()));
        }
        let mut stages = Vec::new();
        let mut views = Vec::new();
        for (from, to) in stage_bounds(model) {
            let view = handle.subnetwork(from, to)?;
            let bias_hat = view.residual()?.clone();
            stages.push(Stage {
                from,
                to,
                layer_ids: model.layers()[from..to].iter().map(|l| l.id.clone()).collect(),
                bias_hat,
            });
            views.push(view);
        }
        Ok(Self {
            handle: handle.clone(),
            stages,
            views,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn handle(&self) -> &InterpreterHandle {
        &self.handle
    }

    /// `Ŵ_i·x`.
    pub fn stage_linear(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.views[i].apply_linear(x)
    }

    pub fn stage_adjoint(&self, i: usize, y: &Tensor) -> Result<Tensor> {
        self.views[i].apply_adjoint(y)
    }

    /// `Q_i·t`: `t` lives after stage `i` and is carried to the output.
    pub fn forward_project(&self, i: usize, t: &Tensor) -> Result<Tensor> {
        let mut cur = t.clone();
        for j in i + 1..self.stages.len() {
            cur = self.stage_linear(j, &cur)?;
        }
        Ok(cur)
    }

    /// `P_i·t`: `t` lives after stage `i` and is carried back to the input.
    pub fn back_project(&self, i: usize, t: &Tensor) -> Result<Tensor> {
        let mut cur = t.clone();
        for j in (0..=i).rev() {
            cur = self.stage_adjoint(j, &cur)?;
        }
        Ok(cur)
    }
}

/// `F` assembled as the product of stage operators.
pub struct StageProduct<'a> {
    params: &'a MaskedParams,
}

impl LinearOperator for StageProduct<'_> {
    fn input_shape(&self) -> &[usize] {
        self.params.handle.input_shape()
    }
    fn output_shape(&self) -> &[usize] {
        self.params.handle.output_shape()
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for i in 0..self.params.stages.len() {
            cur = self.params.stage_linear(i, &cur)?;
        }
        Ok(cur)
    }
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        match self.params.stages.len() {
            0 => Ok(y.clone()),
            n => self.params.back_project(n - 1, y),
        }
    }
}

impl MaskedParams {
    pub fn filter(&self) -> StageProduct<'_> {
        StageProduct { params: self }
    }

    /// `Q_i·b̂_i` for every stage, output-shaped.
    pub fn projected_biases(&self) -> Result<Vec<Tensor>> {
        (0..self.stages.len())
            .map(|i| self.forward_project(i, &self.stages[i].bias_hat))
            .collect()
    }

    /// `Σ_i Q_i·b̂_i`.
    pub fn residual(&self) -> Result<Tensor> {
        let mut r = Tensor::zeros(self.handle.output_shape())?;
        for q in self.projected_biases()? {
            r.add_assign(&q)?;
        }
        Ok(r)
    }
}

/// Filter view and residual rebuilt stage by stage.
pub fn theorem1_filter_residual(handle: &InterpreterHandle) -> Result<(MaskedParams, Tensor)> {
    let params = MaskedParams::new(handle)?;
    let r = params.residual()?;
    Ok((params, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTerm {
    pub stage: usize,
    pub label: String,
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub score_index: usize,
    /// True network output `f(x0)[c]`.
    pub score: f64,
    /// `(F·x0)[c]`.
    pub input_term: f64,
    pub stages: Vec<StageTerm>,
    /// `|input_term + Σ terms − score|` relative to the larger of `|score|`
    /// and the summed magnitudes of the parts.
    pub conservation_error: f64,
    /// `Σ terms / score`; `None` when the score is zero.
    pub residual_share: Option<f64>,
}

impl ContributionReport {
    pub fn residual(&self) -> f64 {
        self.stages.iter().map(|s| s.term).sum()
    }
}

fn check_score_index(handle: &InterpreterHandle, c: usize) -> Result<()> {
    if c >= handle.output_len() {
        return Err(Error::Index {
            index: c,
            len: handle.output_len(),
        });
    }
    Ok(())
}

/// `|a − b| / max(|b|, scale)`, zero when both vanish.
pub fn relative_gap(a: f64, b: f64, scale: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs().max(scale)
    }
}

/// Precomputed pieces shared by every per-class query.
pub struct Attribution {
    params: MaskedParams,
    fx0: Tensor,
    projected: Vec<Tensor>,
    back_projected: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PdNormalization {
    /// Each back-projected bias map is rescaled to its own forward contribution.
    #[default]
    PerStage,
    /// The summed bias map is rescaled once to the total residual.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDiscussion {
    pub class: usize,
    pub map: Tensor,
    /// Stages whose back-projection summed to zero while their contribution
    /// did not; their share is spread uniformly.
    pub uniform_stages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteMap {
    /// Input-shaped winning class per element.
    pub labels: Vec<usize>,
    pub shape: Vec<usize>,
    pub classes: usize,
}

impl VoteMap {
    /// `x0` kept where the element voted for `label`, zero elsewhere.
    pub fn masked_input(&self, x0: &Tensor, label: usize) -> Result<Tensor> {
        let data = x0
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&v, &l)| if l == label { v } else { 0.0 })
            .collect();
        Tensor::new(&self.shape, data)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Per-element argmax across `maps`; ties go to the smaller class index.
pub fn votes_from_maps(maps: &[Tensor]) -> Result<VoteMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("voting needs at least one class map".into()))?;
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::Shape("class maps must share one shape".into()));
        }
    }
    let labels = (0..first.len())
        .map(|p| {
            let mut best = 0;
            for (c, m) in maps.iter().enumerate() {
                if m.data()[p] > maps[best].data()[p] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(VoteMap {
        labels,
        shape: first.shape().to_vec(),
        classes: maps.len(),
    })
}

const RESCALE_REL_EPS: f64 = 1e-12;

/// `map·(target / Σ map)`, or `target` spread evenly when `Σ map` vanishes.
fn rescale_to(map: &Tensor, target: f64) -> (Tensor, bool) {
    let s = map.sum();
    let l1: f64 = map.data().iter().map(|v| v.abs()).sum();
    if target == 0.0 {
        return (map.scale(0.0), false);
    }
    if s.abs() > RESCALE_REL_EPS * l1 && s != 0.0 {
        (map.scale(target / s), false)
    } else {
        (map.map(|_| target / map.len() as f64), true)
    }
}

impl Attribution {
    pub fn new(handle: &InterpreterHandle) -> Result<Self> {
        let params = MaskedParams::new(handle)?;
        let fx0 = handle.apply_linear(handle.reference_input())?;
        let projected = params.projected_biases()?;
        let back_projected = (0..params.stages().len())
            .map(|i| params.back_project(i, &params.stages()[i].bias_hat))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            fx0,
            projected,
            back_projected,
        })
    }

    pub fn params(&self) -> &MaskedParams {
        &self.params
    }

    /// `P_i·b̂_i` for every stage, input-shaped.
    pub fn back_projected_biases(&self) -> &[Tensor] {
        &self.back_projected
    }

    pub fn classes(&self) -> usize {
        self.fx0.len()
    }

    pub fn contributions(&self, c: usize) -> Result<ContributionReport> {
        let handle = self.params.handle();
        check_score_index(handle, c)?;
        let score = handle.reference_output().data()[c];
        let input_term = self.fx0.data()[c];
        let stages: Vec<StageTerm> = self
            .params
            .stages()
            .iter()
            .zip(&self.projected)
            .enumerate()
            .map(|(i, (s, q))| StageTerm {
                stage: i,
                label: s.label(),
                term: q.data()[c],
            })
            .collect();
        let residual: f64 = stages.iter().map(|s| s.term).sum();
        let magnitude = input_term.abs() + stages.iter().map(|s| s.term.abs()).sum::<f64>();
        let conservation_error = relative_gap(input_term + residual, score, magnitude);
        Ok(ContributionReport {
            score_index: c,
            score,
            input_term,
            stages,
            conservation_error,
            residual_share: (score != 0.0).then(|| residual / score),
        })
    }

    pub fn pixel_discussion(&self, c: usize, norm: PdNormalization) -> Result<PixelDiscussion> {
        let handle = self.params.handle();
        let report = self.contributions(c)?;
        let row = handle.row(c)?;
        let mut map = handle.reference_input().hadamard(&row)?;
        let mut uniform_stages = Vec::new();
        match norm {
            PdNormalization::PerStage => {
                for (i, (bp, t)) in self.back_projected.iter().zip(&report.stages).enumerate() {
                    let (scaled, uniform) = rescale_to(bp, t.term);
                    if uniform {
                        uniform_stages.push(i);
                    }
                    map.add_assign(&scaled)?;
                }
            }
            PdNormalization::Global => {
                let mut total = Tensor::zeros(handle.input_shape())?;
                for bp in &self.back_projected {
                    total.add_assign(bp)?;
                }
                let (scaled, uniform) = rescale_to(&total, report.residual());
                if uniform {
                    uniform_stages = (0..self.back_projected.len()).collect();
                }
                map.add_assign(&scaled)?;
            }
        }
        Ok(PixelDiscussion {
            class: c,
            map,
            uniform_stages,
        })
    }

    pub fn discussions(&self, norm: PdNormalization) -> Result<Vec<PixelDiscussion>> {
        (0..self.classes()).map(|c| self.pixel_discussion(c, norm)).collect()
    }

    pub fn votes(&self, norm: PdNormalization) -> Result<VoteMap> {
        if self.params.handle().output_shape().len() != 1 {
            return Err(Error::Contract("pixel votes need a vector of class scores".into()));
        }
        let maps: Vec<Tensor> = self.discussions(norm)?.into_iter().map(|d| d.map).collect();
        votes_from_maps(&maps)
    }
}

pub fn layer_contributions(handle: &InterpreterHandle, score_index: usize) -> Result<ContributionReport> {
    check_score_index(handle, score_index)?;
    Attribution::new(handle)?.contributions(score_index)
}

/// `P_i·t` for a tensor shaped like activation `layer` (layer-granular, any
/// layer boundary); `layer = 0` is the identity.
pub fn backproject(handle: &InterpreterHandle, layer: usize, t: &Tensor) -> Result<Tensor> {
    let n = handle.model().len();
    if layer > n {
        return Err(Error::Config(format!("activation {layer} out of range for {n} layers")));
    }
    if t.shape() != handle.model().activation_shape(layer) {
        return Err(Error::Shape(format!(
            "activation {layer} has shape {:?}, got {:?}",
            handle.model().activation_shape(layer),
            t.shape()
        )));
    }
    if layer == 0 {
        return Ok(t.clone());
    }
    handle.subnetwork(0, layer)?.apply_adjoint(t)
}

pub fn pixel_discussion(handle: &InterpreterHandle, class: usize) -> Result<PixelDiscussion> {
    check_score_index(handle, class)?;
    Attribution::new(handle)?.pixel_discussion(class, PdNormalization::PerStage)
}

pub fn pixel_votes(handle: &InterpreterHandle) -> Result<VoteMap> {
    Attribution::new(handle)?.votes(PdNormalization::PerStage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionHistogram {
    /// `input` first, then one row per stage.
    pub rows: Vec<HistogramRow>,
    pub used: usize,
    /// Reports skipped because their score was (numerically) zero.
    pub excluded: usize,
}

const SCORE_EPS: f64 = 1e-12;

/// Mean and population standard deviation of every term divided by its score.
pub fn contribution_histogram(reports: &[ContributionReport]) -> Result<ContributionHistogram> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("histogram needs at least one report".into()))?;
    let labels: Vec<String> = std::iter::once("input".to_string())
        .chain(first.stages.iter().map(|s| s.label.clone()))
        .collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    let mut excluded = 0;
    for r in reports {
        if r.stages.len() + 1 != labels.len() {
            return Err(Error::Contract("reports come from different stage layouts".into()));
        }
        if r.score.abs() < SCORE_EPS {
            excluded += 1;
            continue;
        }
        samples[0].push(r.input_term / r.score);
        for (s, t) in samples[1..].iter_mut().zip(&r.stages) {
            s.push(t.term / r.score);
        }
    }
    let used = reports.len() - excluded;
    if used == 0 {
        return Err(Error::Contract("every report has a zero score".into()));
    }
    let rows = labels
        .into_iter()
        .zip(samples)
        .map(|(label, xs)| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            HistogramRow {
                label,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(ContributionHistogram { rows, used, excluded })
}

/// Gradient of the loss `−score_label` with respect to the input.
///
/// Only piecewise-linear networks qualify: there the frozen adjoint is the
/// true input gradient.
pub fn fgsm_gradient(handle: &InterpreterHandle, label: usize) -> Result<Tensor> {
    check_score_index(handle, label)?;
    if let Some(l) = handle
        .model()
        .layers()
        .iter()
        .find(|l| l.layer.is_smooth_unit())
    {
        return Err(Error::Refused(format!(
            "layer '{}' ({}) is smooth: its frozen adjoint is not the input gradient",
            l.id,
            l.kind()
        )));
    }
    Ok(handle.row(label)?.scale(-1.0))
}

/// `clip(x0 + eps·sign(g), range)` with `g` from [`fgsm_gradient`].
pub fn fgsm_perturb(handle: &InterpreterHandle, label: usize, eps: f64, range: (f64, f64)) -> Result<Tensor> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be ≥ 0, got {eps}")));
    }
    let g = fgsm_gradient(handle, label)?;
    let x0 = handle.reference_input();
    x0.zip_with(&g, "fgsm", |x, gi| {
        let step = if gi > 0.0 {
            eps
        } else if gi < 0.0 {
            -eps
        } else {
            0.0
        };
        (x + step).clamp(range.0, range.1)
    })
}

/// Models whose frozen units include anything besides ReLU and max pooling.
pub fn has_smooth_units(model: &ModelSpec) -> bool {
    model.layers().iter().any(|l| matches!(l.layer, Layer::Sigmoid(_) | Layer::InstanceNorm2d(_)))
}
