// SPDX-License-Identifier: Apache-2.0

pub mod error;
pub mod layers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod engine;
pub mod model;

pub use engine::{capture, subnetwork_handle, DenseMatrix, FrozenState, InterpreterHandle};
pub use model::{LayerSpec, ModelSpec};
pub mod spectral;
pub mod attribution;
pub mod io;
pub mod fixtures;
pub mod checks;
pub mod cli;
pub mod service;
