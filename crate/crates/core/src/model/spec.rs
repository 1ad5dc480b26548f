//! Declarative model descriptions and their shape walk.
//!
//! A spec file is TOML:
//!
//! ```toml
//! input_shape = [3, 32, 32]
//! static_dim = 3
//!
//! [head]
//! name = "head"
//! in_features = 80
//!
//! [[image_branch]]
//! kind = "conv"
//! name = "conv1"
//! filters = 11
//! kernel = 4
//! padding = 2
//!
//! [[image_branch]]
//! kind = "relu"
//! ```
//!
//! `static_branch` is an optional array of layers in the same form. When it
//! is absent the static features do not reach the head; when it is an empty
//! array they are concatenated unprocessed.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeometry;

pub const STATIC_DIM: usize = 3;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    Relu,
    Flatten,
    Dropout {
        rate: f64,
    },
    Dense {
        name: String,
        units: usize,
    },
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. } | Layer::Dense { name, .. } => Some(name),
            _ => None,
        }
    }
}

/// Final fully-connected layer producing the single logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub in_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub static_dim: usize,
    pub head: HeadSpec,
    pub image_branch: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_branch: Option<Vec<Layer>>,
}

/// A named parameter tensor implied by a spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    /// Layer the tensor belongs to.
    pub layer: String,
    /// `<layer>.weight` or `<layer>.bias`.
    pub name: String,
    pub shape: Vec<usize>,
}

/// Result of walking a spec's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub params: Vec<ParamShape>,
    pub image_width: usize,
    pub static_width: usize,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

fn weight_and_bias(layer: &str, weight: Vec<usize>, out: usize) -> [ParamShape; 2] {
    [
        ParamShape {
            layer: layer.to_string(),
            name: format!("{layer}.weight"),
            shape: weight,
        },
        ParamShape {
            layer: layer.to_string(),
            name: format!("{layer}.bias"),
            shape: vec![out],
        },
    ]
}

fn walk_branch(branch: &str, layers: &[Layer], mut shape: Vec<usize>, params: &mut Vec<ParamShape>) -> Result<usize> {
    for layer in layers {
        match layer {
            Layer::Conv {
                name,
                filters,
                kernel,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(Error::Spec(format!("{branch} branch: conv `{name}` needs a [C,H,W] input, got {shape:?}")));
                }
                if *filters == 0 || *kernel == 0 {
                    return Err(Error::Spec(format!("conv `{name}` has zero filters or kernel size")));
                }
                let w = vec![*filters, shape[0], *kernel, *kernel];
                let g = ConvGeometry::new(&shape, &w, *stride, *padding)
                    .map_err(|e| Error::Spec(format!("{branch} branch, layer `{name}`: {e}")))?;
                params.extend(weight_and_bias(name, w, *filters));
                shape = g.output_shape().to_vec();
            }
            Layer::MaxPool { window } => {
                if shape.len() != 3 || *window == 0 || *window > shape[1] || *window > shape[2] {
                    return Err(Error::Spec(format!(
                        "{branch} branch: max-pool window {window} does not fit {shape:?}"
                    )));
                }
                shape = vec![shape[0], shape[1] / window, shape[2] / window];
            }
            Layer::Relu => {}
            Layer::Flatten => shape = vec![shape.iter().product()],
            Layer::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Spec(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            Layer::Dense { name, units } => {
                if shape.len() != 1 {
                    return Err(Error::Spec(format!(
                        "{branch} branch: dense `{name}` needs a flat input, got {shape:?} (add a flatten layer)"
                    )));
                }
                if *units == 0 {
                    return Err(Error::Spec(format!("dense `{name}` has zero units")));
                }
                params.extend(weight_and_bias(name, vec![*units, shape[0]], *units));
                shape = vec![*units];
            }
        }
    }
    if shape.len() != 1 {
        return Err(Error::Spec(format!("{branch} branch ends with non-flat shape {shape:?}")));
    }
    Ok(shape[0])
}

impl ModelSpec {
    /// Checks every structural invariant and returns the parameter layout.
    pub fn layout(&self) -> Result<Layout> {
        if self.static_dim != STATIC_DIM {
            return Err(Error::Spec(format!(
                "static_dim must be {STATIC_DIM} (age, sex, site), got {}",
                self.static_dim
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        let mut seen = HashSet::new();
        let names = self
            .image_branch
            .iter()
            .chain(self.static_branch.iter().flatten())
            .filter_map(Layer::name)
            .chain(std::iter::once(self.head.name.as_str()));
        for name in names {
            if !seen.insert(name) {
                return Err(Error::Spec(format!("layer name `{name}` appears more than once")));
            }
        }

        let mut params = Vec::new();
        let image_width = walk_branch("image", &self.image_branch, self.input_shape.to_vec(), &mut params)?;
        let static_width = match &self.static_branch {
            Some(layers) => walk_branch("static", layers, vec![self.static_dim], &mut params)?,
            None => 0,
        };
        let fused = image_width + static_width;
        if fused != self.head.in_features {
            return Err(Error::Spec(format!(
                "head `{}` expects {} input features but the branches produce {fused} ({image_width} image + {static_width} static)",
                self.head.name, self.head.in_features
            )));
        }
        params.extend(weight_and_bias(&self.head.name, vec![1, fused], 1));
        Ok(Layout {
            params,
            image_width,
            static_width,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.layout()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// The standard CNN: `[conv → relu] × layers` with max-pooling after the
    /// first two conv blocks, then flatten → dropout → dense(64) → relu, fused
    /// with a 3→16 relu static branch into a one-logit head.
    pub fn standard(config: &StandardCnnConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let mut image_branch = Vec::new();
        for i in 1..=config.num_conv_layers {
            image_branch.push(Layer::Conv {
                name: format!("conv{i}"),
                filters: config.filters_per_layer,
                kernel: config.kernel_size,
                stride: 1,
                padding: config.padding,
            });
            image_branch.push(Layer::Relu);
            if i <= 2 {
                image_branch.push(Layer::MaxPool {
                    window: config.pool_size,
                });
            }
        }
        image_branch.push(Layer::Flatten);
        image_branch.push(Layer::Dropout { rate: config.dropout });
        image_branch.push(Layer::Dense {
            name: "fc_image".into(),
            units: config.image_features,
        });
        image_branch.push(Layer::Relu);
        let static_branch = vec![
            Layer::Dense {
                name: "fc_static".into(),
                units: config.static_features,
            },
            Layer::Relu,
        ];
        let spec = ModelSpec {
            input_shape: [3, height, width],
            static_dim: STATIC_DIM,
            head: HeadSpec {
                name: "head".into(),
                in_features: config.image_features + config.static_features,
            },
            image_branch,
            static_branch: Some(static_branch),
        };
        spec.layout()?;
        Ok(spec)
    }
}

/// Hyperparameters of the standard CNN. Defaults are the tuned values; the
/// bounds checked by [`StandardCnnConfig::validate`] are the search ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardCnnConfig {
    pub num_conv_layers: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub filters_per_layer: usize,
    pub dropout: f64,
    /// Zero padding on every conv layer. 0 reproduces the full-resolution
    /// layout; small inputs need `kernel_size / 2` to keep spatial dims valid.
    pub padding: usize,
    pub image_features: usize,
    pub static_features: usize,
}

impl Default for StandardCnnConfig {
    fn default() -> Self {
        StandardCnnConfig {
            num_conv_layers: 5,
            kernel_size: 4,
            pool_size: 3,
            filters_per_layer: 11,
            dropout: 0.4,
            padding: 0,
            image_features: 64,
            static_features: 16,
        }
    }
}

impl StandardCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("num_conv_layers", (5..=10).contains(&self.num_conv_layers)),
            ("kernel_size", (2..=5).contains(&self.kernel_size)),
            ("pool_size", (3..=4).contains(&self.pool_size)),
            ("filters_per_layer", (6..=12).contains(&self.filters_per_layer)),
            ("dropout", (0.0..=0.5).contains(&self.dropout)),
            ("image_features", self.image_features > 0),
            ("static_features", self.static_features > 0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(Error::Config(format!("standard CNN {field} out of range: {self:?}"))),
            None => Ok(()),
        }
    }
}
