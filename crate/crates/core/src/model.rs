// SPDX-License-Identifier: Apache-2.0

//! Sequential-with-skips network descriptions.

use std::collections::HashSet;

use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, LayerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub layer: Layer,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, layer: Layer) -> Self {
        Self { id: id.into(), layer }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

/// An ordered list of layers with validated activation shapes.
///
/// Activation `0` is the input; activation `i + 1` is the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return shape_err(format!("invalid input shape {input_shape:?}"));
        }
        let mut seen = HashSet::new();
        let mut shapes = vec![input_shape.to_vec()];
        for (i, spec) in layers.iter().enumerate() {
            if !seen.insert(spec.id.as_str()) {
                return Err(Error::Config(format!("duplicate layer id '{}'", spec.id)));
            }
            let input = &shapes[i];
            if let Layer::Add { source } = spec.layer {
                if source > i {
                    return Err(Error::Config(format!(
                        "layer {i} ('{}') adds activation {source}, which is not computed yet",
                        spec.id
                    )));
                }
                if shapes[source] != *input {
                    return shape_err(format!(
                        "layer {i} ('{}') adds {:?} to {input:?}",
                        spec.id, shapes[source]
                    ));
                }
            }
            let out = spec.layer.output_shape(input).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i} ('{}'): {m}", spec.id)),
                Error::Config(m) => Error::Config(format!("layer {i} ('{}'): {m}", spec.id)),
                other => other,
            })?;
            shapes.push(out);
        }
        Ok(Self {
            name: name.into(),
            layers,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least the input shape")
    }

    /// Shape of activation `i` (`0` = input).
    pub fn activation_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn activation_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// True for a pure chain (no skip joins).
    pub fn is_sequential(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l.layer, Layer::Add { .. }))
    }

    /// Every activation of the true network, input included.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.shape() != self.input_shape() {
            return shape_err(format!(
                "model '{}' expects input {:?}, got {:?}",
                self.name,
                self.input_shape(),
                x.shape()
            ));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, spec) in self.layers.iter().enumerate() {
            let cur = &acts[i];
            let next = match spec.layer {
                Layer::Add { source } => cur.add(&acts[source])?,
                ref layer => layer.forward(cur)?,
            };
            if !next.is_finite() {
                return Err(Error::Numeric {
                    layer: i,
                    kind: spec.kind().name().to_string(),
                });
            }
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.activations(x)?.pop().expect("input activation"))
    }

    /// Number of elements of the input and output domains.
    pub fn dims(&self) -> (usize, usize) {
        (
            self.input_shape().iter().product(),
            self.output_shape().iter().product(),
        )
    }
}
