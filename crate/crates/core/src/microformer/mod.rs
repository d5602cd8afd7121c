//! A desk-scale post-norm transformer encoder for sequence classification,
//! with hand-written reverse-mode gradients, Adam, and a synthetic task.
//!
//! All parameters live in one flat list ([`MicroModel::params`]) whose order
//! is fixed by the [`Geometry`]; gradients and optimizer state share that
//! layout.

mod data;
mod forward;
mod gradcheck;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

pub use data::{
    majority_token, make_synthetic_task, read_examples, write_examples, Dataset, Example,
};
pub use forward::{forward, logits_for, loss_and_grads, ForwardOptions};
pub use gradcheck::{check_gradients, check_ste_gradients, GradCheckReport, GradMismatch};
pub use optim::Adam;
pub use train::{evaluate, train_dense, EvalStats, TrainOptions};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Model dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Task vocabulary; the embedding table has one extra row for `[CLS]`.
    pub vocab: usize,
    /// Task sequence length, excluding the prepended `[CLS]` position.
    pub seq_len: usize,
    pub classes: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 32,
            heads: 2,
            ffn_dim: 128,
            vocab: 16,
            seq_len: 12,
            classes: 2,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad(format!("degenerate geometry {self:?}"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.vocab < 2 || self.seq_len == 0 || self.classes < 2 {
            return bad(format!("vocab, seq_len and classes too small in {self:?}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn cls_token(&self) -> usize {
        self.vocab
    }

    /// Number of positions seen by the encoder (`seq_len + 1`).
    pub fn positions(&self) -> usize {
        self.seq_len + 1
    }

    pub fn num_params(&self) -> usize {
        GLOBAL_PARAMS + self.layers * LayerParam::ALL.len()
    }

    /// Shape of a compressible component's weight (rows = outputs).
    pub fn component_shape(&self, c: Component) -> (usize, usize) {
        let d = self.model_dim;
        match c {
            Component::Ffn1 => (self.ffn_dim, d),
            Component::Ffn2 => (d, self.ffn_dim),
            _ => (d, d),
        }
    }
}

/// The six compressible sub-layers of every encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Query,
    Key,
    Value,
    AttnOutput,
    Ffn1,
    Ffn2,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Query,
        Component::Key,
        Component::Value,
        Component::AttnOutput,
        Component::Ffn1,
        Component::Ffn2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Query => "query",
            Component::Key => "key",
            Component::Value => "value",
            Component::AttnOutput => "attn_output",
            Component::Ffn1 => "ffn1",
            Component::Ffn2 => "ffn2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Size in units of `d²` parameters (FFN matrices are `4d × d`).
    pub fn relative_size(self) -> u64 {
        match self {
            Component::Ffn1 | Component::Ffn2 => 4,
            _ => 1,
        }
    }

    fn layer_param(self) -> LayerParam {
        match self {
            Component::Query => LayerParam::Query,
            Component::Key => LayerParam::Key,
            Component::Value => LayerParam::Value,
            Component::AttnOutput => LayerParam::AttnOutput,
            Component::Ffn1 => LayerParam::Ffn1,
            Component::Ffn2 => LayerParam::Ffn2,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component '{s}'")))
    }
}

const GLOBAL_PARAMS: usize = 4;
const TOKEN_EMBED: usize = 0;
const POS_EMBED: usize = 1;

/// Per-layer parameters in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LayerParam {
    Query,
    QueryBias,
    Key,
    KeyBias,
    Value,
    ValueBias,
    AttnOutput,
    AttnOutputBias,
    AttnNormGamma,
    AttnNormBeta,
    Ffn1,
    Ffn1Bias,
    Ffn2,
    Ffn2Bias,
    FfnNormGamma,
    FfnNormBeta,
}

impl LayerParam {
    pub(crate) const ALL: [LayerParam; 16] = [
        LayerParam::Query,
        LayerParam::QueryBias,
        LayerParam::Key,
        LayerParam::KeyBias,
        LayerParam::Value,
        LayerParam::ValueBias,
        LayerParam::AttnOutput,
        LayerParam::AttnOutputBias,
        LayerParam::AttnNormGamma,
        LayerParam::AttnNormBeta,
        LayerParam::Ffn1,
        LayerParam::Ffn1Bias,
        LayerParam::Ffn2,
        LayerParam::Ffn2Bias,
        LayerParam::FfnNormGamma,
        LayerParam::FfnNormBeta,
    ];

    fn suffix(self) -> &'static str {
        match self {
            LayerParam::Query => "query",
            LayerParam::QueryBias => "query.bias",
            LayerParam::Key => "key",
            LayerParam::KeyBias => "key.bias",
            LayerParam::Value => "value",
            LayerParam::ValueBias => "value.bias",
            LayerParam::AttnOutput => "attn_output",
            LayerParam::AttnOutputBias => "attn_output.bias",
            LayerParam::AttnNormGamma => "attn_norm.gamma",
            LayerParam::AttnNormBeta => "attn_norm.beta",
            LayerParam::Ffn1 => "ffn1",
            LayerParam::Ffn1Bias => "ffn1.bias",
            LayerParam::Ffn2 => "ffn2",
            LayerParam::Ffn2Bias => "ffn2.bias",
            LayerParam::FfnNormGamma => "ffn_norm.gamma",
            LayerParam::FfnNormBeta => "ffn_norm.beta",
        }
    }
}

/// Index of a per-layer parameter in the flat list.
pub(crate) fn layer_index(layer: usize, p: LayerParam) -> usize {
    GLOBAL_PARAMS + layer * LayerParam::ALL.len() + p as usize
}

pub(crate) const fn classifier_index() -> usize {
    2
}

pub(crate) const fn classifier_bias_index() -> usize {
    3
}

/// Encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroModel<T> {
    geometry: Geometry,
    params: Vec<Matrix<T>>,
}

impl<T: Scalar> MicroModel<T> {
    /// Random initialization: `N(0, 1/fan_in)` linear weights, `N(0, 1)`
    /// embeddings, zero biases, unit norm gains.
    pub fn init(geometry: Geometry, rng: &mut Rng) -> Result<Self> {
        geometry.validate()?;
        let mut params = Vec::with_capacity(geometry.num_params());
        for (rows, cols, kind) in Self::layout(&geometry) {
            let m = match kind {
                Init::Normal(std) => {
                    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.normal() * std))
                }
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, T::one()),
            };
            params.push(m);
        }
        Ok(Self { geometry, params })
    }

    /// Rebuilds a model from parameters in storage order, checking shapes.
    pub fn from_params(geometry: Geometry, params: Vec<Matrix<T>>) -> Result<Self> {
        geometry.validate()?;
        let layout = Self::layout(&geometry);
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((rows, cols, _), p) in layout.iter().zip(&params) {
            if p.shape() != (*rows, *cols) {
                return Err(Error::ShapeMismatch {
                    expected: (*rows, *cols),
                    actual: p.shape(),
                });
            }
        }
        Ok(Self { geometry, params })
    }

    fn layout(g: &Geometry) -> Vec<(usize, usize, Init)> {
        let d = g.model_dim;
        let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let mut out = vec![
            (g.vocab + 1, d, Init::Normal(1.0)),
            (g.positions(), d, Init::Normal(1.0)),
            (g.classes, d, lin(d)),
            (1, g.classes, Init::Zeros),
        ];
        for _ in 0..g.layers {
            for p in LayerParam::ALL {
                out.push(match p {
                    LayerParam::Query
                    | LayerParam::Key
                    | LayerParam::Value
                    | LayerParam::AttnOutput => (d, d, lin(d)),
                    LayerParam::Ffn1 => (g.ffn_dim, d, lin(d)),
                    LayerParam::Ffn2 => (d, g.ffn_dim, lin(g.ffn_dim)),
                    LayerParam::Ffn1Bias => (1, g.ffn_dim, Init::Zeros),
                    LayerParam::AttnNormGamma | LayerParam::FfnNormGamma => (1, d, Init::Ones),
                    _ => (1, d, Init::Zeros),
                });
            }
        }
        out
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Matrix<T>> {
        self.params
    }

    /// Parameter names in storage order.
    pub fn names(&self) -> Vec<String> {
        param_names(&self.geometry)
    }

    /// Flat index of a compressible weight.
    pub fn component_index(&self, layer: usize, c: Component) -> usize {
        layer_index(layer, c.layer_param())
    }

    pub fn component(&self, layer: usize, c: Component) -> &Matrix<T> {
        &self.params[self.component_index(layer, c)]
    }

    pub fn component_mut(&mut self, layer: usize, c: Component) -> &mut Matrix<T> {
        let i = self.component_index(layer, c);
        &mut self.params[i]
    }

    /// Flat indices of all compressible weights, `(layer, component, index)`.
    pub fn targets(&self) -> Vec<(usize, Component, usize)> {
        (0..self.geometry.layers)
            .flat_map(|l| Component::ALL.into_iter().map(move |c| (l, c)))
            .map(|(l, c)| (l, c, self.component_index(l, c)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> MicroModel<U> {
        MicroModel {
            geometry: self.geometry,
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Parameter names for a geometry, in storage order.
pub fn param_names(g: &Geometry) -> Vec<String> {
    let mut names: Vec<String> = [
        "embed.token",
        "embed.position",
        "classifier",
        "classifier.bias",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in 0..g.layers {
        for p in LayerParam::ALL {
            names.push(format!("layer{l}.{}", p.suffix()));
        }
    }
    names
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}
