use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::init_uniform;
use crate::rethink::head_param_count;
use crate::tensor::{Scalar, Shape, Tensor};

use super::spec::{LayerSpec, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Excluded from weight decay.
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Resolved execution step with indices into the parameter list.
#[derive(Clone, Debug)]
pub(crate) enum Step {
    Conv { weight: usize, bias: usize, stride: usize, padding: usize },
    Pool { window: usize, stride: usize },
    Dense { weight: usize, bias: usize },
    Relu { slope: f64 },
    Emphasis { head: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct HeadSlot {
    pub weight: usize,
    pub bias: usize,
    pub channels: usize,
}

/// A network description together with one shared parameter set used by
/// every rethinking iteration.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    pub(crate) steps: Vec<Step>,
    pub(crate) heads: Vec<HeadSlot>,
}

impl<T: PartialEq> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Expected `(name, kind, shape)` of every parameter, in canonical order:
/// layer parameters front to back, then feedback heads.
pub fn param_layout(spec: &NetworkSpec) -> Result<Vec<(String, ParamKind, Shape)>> {
    let shapes = spec.resolve()?;
    let mut layout = Vec::new();
    let mut prev = spec.input;
    for (layer, &out) in spec.layers.iter().zip(&shapes.outputs) {
        match layer {
            LayerSpec::Conv { name, out_channels, kernel, .. } => {
                layout.push((format!("{name}.weight"), ParamKind::Weight, Shape::new(*out_channels, prev.0, kernel.0, kernel.1)?));
                layout.push((format!("{name}.bias"), ParamKind::Bias, Shape::new(*out_channels, 1, 1, 1)?));
            }
            LayerSpec::Dense { name, out_dim } => {
                let fan_in = prev.0 * prev.1 * prev.2;
                layout.push((format!("{name}.weight"), ParamKind::Weight, Shape::new(*out_dim, fan_in, 1, 1)?));
                layout.push((format!("{name}.bias"), ParamKind::Bias, Shape::new(*out_dim, 1, 1, 1)?));
            }
            _ => {}
        }
        prev = out;
    }
    for (head, &channels) in spec.heads.iter().zip(&shapes.head_channels) {
        layout.push((format!("{}.weight", head.name), ParamKind::Weight, Shape::new(channels, spec.classes, 1, 1)?));
        layout.push((format!("{}.bias", head.name), ParamKind::Bias, Shape::new(channels, 1, 1, 1)?));
    }
    Ok(layout)
}

impl<T: Scalar> Model<T> {
    /// Fresh model: uniform `±1/sqrt(fan_in)` weights, zero biases, and
    /// all-zero feedback heads (so emphasis starts at exactly 1).
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_names: Vec<String> = spec.heads.iter().map(|h| format!("{}.", h.name)).collect();
        let params = param_layout(&spec)?
            .into_iter()
            .map(|(name, kind, shape)| {
                let is_head = head_names.iter().any(|h| name.starts_with(h.as_str()));
                let value = if kind == ParamKind::Bias || is_head {
                    Tensor::zeros(shape)
                } else {
                    init_uniform(shape, shape.sample_len(), &mut rng)
                };
                Param { name, kind, value }
            })
            .collect();
        Self::from_params(spec, params)
    }

    /// Assembles a model from named parameters; names, order and shapes must
    /// match [`param_layout`].
    pub fn from_params(spec: NetworkSpec, params: Vec<Param<T>>) -> Result<Self> {
        let layout = param_layout(&spec)?;
        if layout.len() != params.len() {
            return Err(Error::shape(format!(
                "network expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, kind, shape), p) in layout.iter().zip(&params) {
            if &p.name != name || p.kind != *kind || p.value.shape() != *shape {
                return Err(Error::shape(format!(
                    "parameter {} {:?} {} does not match expected {name} {kind:?} {shape}",
                    p.name,
                    p.kind,
                    p.value.shape()
                )));
            }
        }
        let index = |name: String| -> usize {
            params.iter().position(|p| p.name == name).expect("layout checked")
        };
        let mut steps = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            steps.push(match layer {
                LayerSpec::Conv { name, stride, padding, .. } => Step::Conv {
                    weight: index(format!("{name}.weight")),
                    bias: index(format!("{name}.bias")),
                    stride: *stride,
                    padding: *padding,
                },
                LayerSpec::MaxPool { window, stride } => Step::Pool { window: *window, stride: *stride },
                LayerSpec::Dense { name, .. } => Step::Dense {
                    weight: index(format!("{name}.weight")),
                    bias: index(format!("{name}.bias")),
                },
                LayerSpec::Relu { negative_slope } => Step::Relu { slope: *negative_slope },
                LayerSpec::Emphasis { head } => Step::Emphasis {
                    head: spec.heads.iter().position(|h| &h.name == head).expect("resolved"),
                },
            });
        }
        let heads = spec
            .heads
            .iter()
            .map(|h| {
                let weight = index(format!("{}.weight", h.name));
                HeadSlot {
                    weight,
                    bias: index(format!("{}.bias", h.name)),
                    channels: params[weight].value.shape().n,
                }
            })
            .collect();
        Ok(Model { spec, params, steps, heads })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn into_params(self) -> Vec<Param<T>> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameters contributed by feedback heads.
    pub fn head_param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| head_param_count(h.channels, self.spec.classes))
            .sum()
    }

    pub fn iterations(&self) -> usize {
        self.spec.iterations
    }

    /// Changes `T` without touching parameters.
    pub fn set_iterations(&mut self, iterations: usize) -> Result<()> {
        if iterations == 0 {
            return Err(Error::Config("rethinking iterations T must be ≥ 1".into()));
        }
        self.spec.iterations = iterations;
        Ok(())
    }

    /// Rebuilds the model for `spec`, keeping every parameter whose name and
    /// shape match. New parameters follow [`Model::new`] initialization
    /// (heads start at zero). Used to warm-start a rethinking network from a
    /// trained baseline and vice versa.
    pub fn transplant(&self, spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut fresh = Model::new(spec, seed)?;
        for p in fresh.params.iter_mut() {
            if let Some(old) = self.param(&p.name) {
                if old.value.shape() == p.value.shape() {
                    p.value = old.value.clone();
                }
            }
        }
        Ok(fresh)
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            steps: self.steps.clone(),
            heads: self.heads.clone(),
        }
    }
}
