//! The two-branch fusion classifier: an image CNN and a static-feature
//! branch concatenated into a single-logit head.

mod spec;

pub use spec::{HeadSpec, Layer, Layout, ModelSpec, ParamShape, StandardCnnConfig, STATIC_DIM};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::transfer::{kaiming_init, param_seed};

/// Tape handles for a model's parameters.
#[derive(Clone, Debug, Default)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Fresh model: Kaiming-normal weights, zero biases. Each weight tensor
    /// draws from its own stream derived from `seed` and its name.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let mut params = BTreeMap::new();
        for p in &layout.params {
            let t = if p.name.ends_with(".weight") {
                kaiming_init(&p.shape, param_seed(seed, &p.name))?
            } else {
                Tensor::zeros(&p.shape)
            };
            params.insert(p.name.clone(), t);
        }
        Ok(Model { spec, layout, params })
    }

    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let layout = spec.layout()?;
        let params = layout
            .params
            .iter()
            .map(|p| (p.name.clone(), Tensor::zeros(&p.shape)))
            .collect();
        Ok(Model { spec, layout, params })
    }

    /// Model from explicit parameters; every tensor the spec implies must be
    /// present with exactly the implied shape, and nothing else.
    pub fn from_params(spec: ModelSpec, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        let layout = spec.layout()?;
        let mut missing = Vec::new();
        for p in &layout.params {
            match params.get(&p.name) {
                None => missing.push(p.name.clone()),
                Some(t) if t.shape() != p.shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        name: p.name.clone(),
                        archive: t.shape().to_vec(),
                        expected: p.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingLayers(missing));
        }
        params.retain(|k, _| layout.params.iter().any(|p| &p.name == k));
        Ok(Model { spec, layout, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Mutable access to one parameter tensor; its shape cannot change.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params.get_mut(name).map(Tensor::data_mut)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters in layout order (branch order, weight before bias).
    pub fn ordered_params(&self) -> impl Iterator<Item = (&ParamShape, &Tensor)> {
        self.layout.params.iter().map(|p| (p, &self.params[&p.name]))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.bind_selective(tape, |_| trainable)
    }

    /// Binds parameters, marking as grad-enabled those `trainable` accepts.
    pub fn bind_selective(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
                .collect(),
        )
    }

    pub(crate) fn params_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Records the forward pass on `tape` and returns the logit.
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: Var,
        static_features: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.value(image).shape();
        if shape != self.spec.input_shape {
            return Err(Error::dim(
                "forward",
                format!("image shape {shape:?} does not match model input {:?}", self.spec.input_shape),
            ));
        }
        let s_shape = tape.value(static_features).shape();
        if s_shape != [self.spec.static_dim] {
            return Err(Error::dim(
                "forward",
                format!("static features {s_shape:?}, expected [{}]", self.spec.static_dim),
            ));
        }
        let img = run_branch(tape, bound, &self.spec.image_branch, image, train, rng)?;
        let fused = match &self.spec.static_branch {
            Some(layers) => {
                let s = run_branch(tape, bound, layers, static_features, train, rng)?;
                tape.concat(img, s)?
            }
            None => img,
        };
        let head = &self.spec.head.name;
        tape.linear(fused, bound.get(&format!("{head}.weight")), bound.get(&format!("{head}.bias")))
    }

    /// Single forward pass returning the logit. Dropout is active only in
    /// `train` mode, drawing from `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor, static_features: &[f64], train: bool, rng: &mut R) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let s = tape.constant(Tensor::from_vec(static_features.to_vec()));
        let out = self.forward_on(&mut tape, &bound, x, s, train, rng)?;
        Ok(tape.value(out).data()[0])
    }

    /// Eval-mode logit.
    pub fn logit(&self, image: &Tensor, static_features: &[f64]) -> Result<f64> {
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        self.forward(image, static_features, false, &mut unused)
    }
}

fn run_branch<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &BoundParams,
    layers: &[Layer],
    mut x: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv {
                name, stride, padding, ..
            } => tape.conv2d(
                x,
                bound.get(&format!("{name}.weight")),
                bound.get(&format!("{name}.bias")),
                *stride,
                *padding,
            )?,
            Layer::MaxPool { window } => tape.max_pool2d(x, *window)?,
            Layer::Relu => tape.relu(x)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::Dropout { rate } => tape.dropout(x, *rate, train, rng)?,
            Layer::Dense { name, .. } => tape.linear(
                x,
                bound.get(&format!("{name}.weight")),
                bound.get(&format!("{name}.bias")),
            )?,
        };
    }
    Ok(x)
}

/// Eval-mode probabilities, in input order.
pub fn predict_proba(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.logit(&s.image, &s.static_features).map(kernels::sigmoid))
        .collect()
}
