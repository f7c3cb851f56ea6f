//! SqueezeNet backbone with a two-layer dense classifier head.
//!
//! Topology (variant `v1.1`): `conv1` 3x3/2 -> max-pool 3/2 -> fires, with a
//! 3/2 max-pool after the second and fourth fire module -> global average
//! pool -> `fc1` + relu -> dropout -> `fc2` -> softmax.
//!
//! Parameters are named `<layer>/weight` and `<layer>/bias`. Fire modules
//! own three convolutions, named `fireK.squeeze1x1`, `fireK.expand1x1` and
//! `fireK.expand3x3`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvSpec};
use crate::rng::mix_seed;
use crate::tensor::{he_init, Shape, Tensor};

pub const VARIANT_V1_1: &str = "v1.1";
const INPUT_CHANNELS: usize = 3;
const POOL_KERNEL: usize = 3;
const POOL_STRIDE: usize = 2;
/// Fire indices (0-based) followed by a max-pool in the v1.1 layout.
const POOL_AFTER_FIRE: [usize; 2] = [1, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireSpec {
    pub squeeze_1x1: usize,
    pub expand_1x1: usize,
    pub expand_3x3: usize,
}

impl FireSpec {
    pub fn new(squeeze_1x1: usize, expand_1x1: usize, expand_3x3: usize) -> Result<Self> {
        let spec = FireSpec {
            squeeze_1x1,
            expand_1x1,
            expand_3x3,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.squeeze_1x1 == 0 || self.expand_1x1 == 0 || self.expand_3x3 == 0 {
            return Err(Error::Config(format!("fire widths must be >= 1: {self:?}")));
        }
        if self.squeeze_1x1 > self.expand_1x1 + self.expand_3x3 {
            return Err(Error::Config(format!(
                "fire squeeze width {} exceeds expand width {}",
                self.squeeze_1x1,
                self.out_channels()
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.expand_1x1 + self.expand_3x3
    }

    pub fn squeeze_conv(&self, in_channels: usize) -> ConvSpec {
        ConvSpec::square(in_channels, self.squeeze_1x1, 1, 1, 0)
    }

    pub fn expand1x1_conv(&self) -> ConvSpec {
        ConvSpec::square(self.squeeze_1x1, self.expand_1x1, 1, 1, 0)
    }

    pub fn expand3x3_conv(&self) -> ConvSpec {
        ConvSpec::square(self.squeeze_1x1, self.expand_3x3, 3, 1, 1)
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        self.squeeze_conv(in_channels).param_count()
            + self.expand1x1_conv().param_count()
            + self.expand3x3_conv().param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side of the square input image.
    pub input_size: usize,
    pub stem_channels: usize,
    pub fire_specs: Vec<FireSpec>,
    pub head_hidden: usize,
    pub dropout_rate: f32,
    pub variant: String,
}

impl ModelConfig {
    /// SqueezeNet v1.1 backbone at 244x244 input with a 512-wide head.
    pub fn squeezenet_v1_1(num_classes: usize) -> Self {
        let f = |s, e1, e3| FireSpec {
            squeeze_1x1: s,
            expand_1x1: e1,
            expand_3x3: e3,
        };
        ModelConfig {
            num_classes,
            input_size: 244,
            stem_channels: 64,
            fire_specs: vec![
                f(16, 64, 64),
                f(16, 64, 64),
                f(32, 128, 128),
                f(32, 128, 128),
                f(48, 192, 192),
                f(48, 192, 192),
                f(64, 256, 256),
                f(64, 256, 256),
            ],
            head_hidden: 512,
            dropout_rate: 0.5,
            variant: VARIANT_V1_1.to_string(),
        }
    }

    /// A small model for tests and smoke runs: 32x32 input, two (2, 2, 2)
    /// fire modules, a 16-channel stem and a 32-wide head.
    pub fn tiny(num_classes: usize) -> Self {
        let fire = FireSpec {
            squeeze_1x1: 2,
            expand_1x1: 2,
            expand_3x3: 2,
        };
        ModelConfig {
            num_classes,
            input_size: 32,
            stem_channels: 16,
            fire_specs: vec![fire, fire],
            head_hidden: 32,
            dropout_rate: 0.5,
            variant: VARIANT_V1_1.to_string(),
        }
    }

    /// Checks field ranges and that every stage keeps a non-empty feature map.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.variant != VARIANT_V1_1 {
            return Err(Error::Config(format!("unsupported variant {:?}", self.variant)));
        }
        if self.fire_specs.is_empty() {
            return Err(Error::Config("at least one fire module is required".into()));
        }
        for spec in &self.fire_specs {
            spec.validate()?;
        }
        if self.stem_channels == 0 || self.head_hidden == 0 {
            return Err(Error::Config("stem and head widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.layers().map(|_| ())
    }

    fn layers(&self) -> Result<Vec<Layer>> {
        let too_small = |e: Error| {
            Error::Config(format!(
                "input size {} is too small for the pooling stack ({e})",
                self.input_size
            ))
        };
        let mut layers = Vec::new();
        let stem = ConvSpec::square(INPUT_CHANNELS, self.stem_channels, 3, 2, 0);
        let (mut side, _) = stem.output_hw(self.input_size, self.input_size).map_err(too_small)?;
        let mut channels = self.stem_channels;
        layers.push(Layer::Conv {
            name: "conv1".into(),
            spec: stem,
        });
        layers.push(Layer::Relu {
            name: "conv1_relu".into(),
        });

        let mut pools = 0;
        let mut push_pool = |layers: &mut Vec<Layer>, side: &mut usize| -> Result<()> {
            pools += 1;
            *side = ops::window_count(*side, POOL_KERNEL, POOL_STRIDE, 0)
                .ok_or_else(|| too_small(shape_err!("max-pool {pools} sees a {side}x{side} map")))?;
            layers.push(Layer::MaxPool {
                name: format!("maxpool{pools}"),
            });
            Ok(())
        };
        push_pool(&mut layers, &mut side)?;
        for (i, spec) in self.fire_specs.iter().enumerate() {
            layers.push(Layer::Fire {
                name: format!("fire{}", i + 2),
                spec: *spec,
                in_channels: channels,
            });
            channels = spec.out_channels();
            if POOL_AFTER_FIRE.contains(&i) {
                push_pool(&mut layers, &mut side)?;
            }
        }
        layers.push(Layer::GlobalAvgPool { name: "avgpool".into() });
        layers.push(Layer::Dense {
            name: "fc1".into(),
            in_features: channels,
            units: self.head_hidden,
        });
        layers.push(Layer::Relu {
            name: "fc1_relu".into(),
        });
        layers.push(Layer::Dropout { name: "dropout".into() });
        layers.push(Layer::Dense {
            name: "fc2".into(),
            in_features: self.head_hidden,
            units: self.num_classes,
        });
        layers.push(Layer::Softmax { name: "softmax".into() });
        Ok(layers)
    }

    /// Per-layer output shapes (without the batch axis) and parameter counts.
    pub fn architecture(&self) -> Result<Vec<LayerInfo>> {
        self.validate()?;
        let mut dims = vec![INPUT_CHANNELS, self.input_size, self.input_size];
        let mut out = Vec::new();
        for layer in self.layers()? {
            let (kind, params) = match &layer {
                Layer::Conv { spec, .. } => {
                    let (h, w) = spec.output_hw(dims[1], dims[2])?;
                    dims = vec![spec.out_channels, h, w];
                    ("conv", spec.param_count())
                }
                Layer::Relu { .. } => ("relu", 0),
                Layer::MaxPool { .. } => {
                    let side = ops::window_count(dims[1], POOL_KERNEL, POOL_STRIDE, 0)
                        .ok_or_else(|| shape_err!("pool does not fit {dims:?}"))?;
                    dims = vec![dims[0], side, side];
                    ("maxpool", 0)
                }
                Layer::Fire { spec, in_channels, .. } => {
                    dims[0] = spec.out_channels();
                    ("fire", spec.param_count(*in_channels))
                }
                Layer::GlobalAvgPool { .. } => {
                    dims = vec![dims[0]];
                    ("global_avg_pool", 0)
                }
                Layer::Dense { in_features, units, .. } => {
                    dims = vec![*units];
                    ("dense", in_features * units + units)
                }
                Layer::Dropout { .. } => ("dropout", 0),
                Layer::Softmax { .. } => ("softmax", 0),
            };
            out.push(LayerInfo {
                name: layer.name().to_string(),
                kind: kind.to_string(),
                output_shape: dims.clone(),
                params,
            });
        }
        Ok(out)
    }
}

/// One row of an architecture summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    /// Output shape of one sample (no batch axis).
    pub output_shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        name: String,
        spec: ConvSpec,
    },
    Relu {
        name: String,
    },
    MaxPool {
        name: String,
    },
    Fire {
        name: String,
        spec: FireSpec,
        in_channels: usize,
    },
    GlobalAvgPool {
        name: String,
    },
    Dense {
        name: String,
        in_features: usize,
        units: usize,
    },
    Dropout {
        name: String,
    },
    Softmax {
        name: String,
    },
}

impl Layer {
    fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. }
            | Layer::Relu { name }
            | Layer::MaxPool { name }
            | Layer::Fire { name, .. }
            | Layer::GlobalAvgPool { name }
            | Layer::Dense { name, .. }
            | Layer::Dropout { name }
            | Layer::Softmax { name } => name,
        }
    }

    /// `(name, dims, fan_in)` of every parameter, weights before biases.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let conv = |prefix: &str, spec: &ConvSpec| {
            vec![
                (format!("{prefix}/weight"), spec.weight_dims().to_vec(), spec.fan_in()),
                (format!("{prefix}/bias"), vec![spec.out_channels], spec.fan_in()),
            ]
        };
        match self {
            Layer::Conv { name, spec } => conv(name, spec),
            Layer::Fire {
                name,
                spec,
                in_channels,
            } => {
                let mut v = conv(&format!("{name}.squeeze1x1"), &spec.squeeze_conv(*in_channels));
                v.extend(conv(&format!("{name}.expand1x1"), &spec.expand1x1_conv()));
                v.extend(conv(&format!("{name}.expand3x3"), &spec.expand3x3_conv()));
                v
            }
            Layer::Dense {
                name,
                in_features,
                units,
            } => vec![
                (format!("{name}/weight"), vec![*in_features, *units], *in_features),
                (format!("{name}/bias"), vec![*units], *in_features),
            ],
            _ => Vec::new(),
        }
    }
}

/// Borrowed parameters of one fire module.
#[derive(Clone, Copy, Debug)]
pub struct FireParams<'a> {
    pub squeeze_weight: &'a Tensor,
    pub squeeze_bias: &'a Tensor,
    pub expand1x1_weight: &'a Tensor,
    pub expand1x1_bias: &'a Tensor,
    pub expand3x3_weight: &'a Tensor,
    pub expand3x3_bias: &'a Tensor,
}

impl FireParams<'_> {
    fn check(&self, spec: &FireSpec, in_channels: usize) -> Result<()> {
        let pairs = [
            (self.squeeze_weight, self.squeeze_bias, spec.squeeze_conv(in_channels)),
            (self.expand1x1_weight, self.expand1x1_bias, spec.expand1x1_conv()),
            (self.expand3x3_weight, self.expand3x3_bias, spec.expand3x3_conv()),
        ];
        for (w, b, conv) in pairs {
            if w.dims() != conv.weight_dims() || b.dims() != [conv.out_channels] {
                return Err(Error::Model(format!(
                    "fire parameters {:?}/{:?} do not match {spec:?} with {in_channels} input channels",
                    w.dims(),
                    b.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients of a fire module's six parameters, in [`FireParams`] order.
#[derive(Clone, Debug)]
pub struct FireGrads {
    pub d_input: Tensor,
    pub d_params: [Tensor; 6],
}

#[derive(Clone, Debug)]
struct FireActivations {
    input: Tensor,
    squeezed: Tensor,
    expanded_1x1: Tensor,
    expanded_3x3: Tensor,
}

fn fire_forward_retained(x: &Tensor, spec: &FireSpec, p: &FireParams) -> Result<(Tensor, FireActivations)> {
    let (_, c, _, _) = x.shape().nchw()?;
    p.check(spec, c)?;
    let squeezed = ops::relu(&ops::conv2d_forward(
        x,
        p.squeeze_weight,
        p.squeeze_bias,
        &spec.squeeze_conv(c),
    )?);
    let expanded_1x1 = ops::relu(&ops::conv2d_forward(
        &squeezed,
        p.expand1x1_weight,
        p.expand1x1_bias,
        &spec.expand1x1_conv(),
    )?);
    let expanded_3x3 = ops::relu(&ops::conv2d_forward(
        &squeezed,
        p.expand3x3_weight,
        p.expand3x3_bias,
        &spec.expand3x3_conv(),
    )?);
    let out = ops::channel_concat(&expanded_1x1, &expanded_3x3)?;
    Ok((
        out,
        FireActivations {
            input: x.clone(),
            squeezed,
            expanded_1x1,
            expanded_3x3,
        },
    ))
}

/// Fire module: relu(squeeze 1x1) feeding parallel relu(expand 1x1) and
/// relu(expand 3x3, pad 1), concatenated along channels.
pub fn fire_forward(x: &Tensor, spec: &FireSpec, params: &FireParams) -> Result<Tensor> {
    fire_forward_retained(x, spec, params).map(|(out, _)| out)
}

fn fire_backward_retained(
    acts: &FireActivations,
    spec: &FireSpec,
    p: &FireParams,
    d_out: &Tensor,
) -> Result<FireGrads> {
    let (_, c, _, _) = acts.input.shape().nchw()?;
    let (d_e1, d_e3) = ops::channel_split(d_out, spec.expand_1x1)?;
    let d_e1 = ops::relu_backward(&acts.expanded_1x1, &d_e1)?;
    let d_e3 = ops::relu_backward(&acts.expanded_3x3, &d_e3)?;
    let g1 = ops::conv2d_backward(&acts.squeezed, p.expand1x1_weight, &spec.expand1x1_conv(), &d_e1)?;
    let g3 = ops::conv2d_backward(&acts.squeezed, p.expand3x3_weight, &spec.expand3x3_conv(), &d_e3)?;
    let d_squeezed = ops::relu_backward(&acts.squeezed, &g1.d_input.add(&g3.d_input)?)?;
    let g0 = ops::conv2d_backward(&acts.input, p.squeeze_weight, &spec.squeeze_conv(c), &d_squeezed)?;
    let take = |g: ops::LayerGrads| -> (Tensor, Tensor) {
        (
            g.d_weight.expect("conv backward yields weight grads"),
            g.d_bias.expect("conv backward yields bias grads"),
        )
    };
    let d_input = g0.d_input.clone();
    let (w0, b0) = take(g0);
    let (w1, b1) = take(g1);
    let (w3, b3) = take(g3);
    Ok(FireGrads {
        d_input,
        d_params: [w0, b0, w1, b1, w3, b3],
    })
}

/// Backward pass of [`fire_forward`] at input `x`.
pub fn fire_backward(x: &Tensor, spec: &FireSpec, params: &FireParams, d_out: &Tensor) -> Result<FireGrads> {
    let (_, acts) = fire_forward_retained(x, spec, params)?;
    fire_backward_retained(&acts, spec, params, d_out)
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Momentum buffer, zero on construction.
    pub velocity: Tensor,
}

/// Named gradients, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug)]
enum Saved {
    Input(Tensor),
    Output(Tensor),
    Fire(FireActivations),
    Dims(Vec<usize>),
    Dropout { rate: f32, seed: u64 },
    Nothing,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
    cache: Option<Vec<Saved>>,
}

impl Model {
    /// Builds a model with He-normal weights and zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        Model::construct(config, |i, dims, fan_in, is_bias| {
            let shape = Shape::new(dims)?;
            if is_bias {
                Ok(Tensor::new(shape, 0.0))
            } else {
                he_init(shape, fan_in, mix_seed(seed, i as u64))
            }
        })
    }

    /// A model whose parameters are all zero, to be filled by a loader.
    pub fn zeroed(config: ModelConfig) -> Result<Model> {
        Model::construct(config, |_, dims, _, _| Ok(Tensor::new(Shape::new(dims)?, 0.0)))
    }

    fn construct(
        config: ModelConfig,
        mut init: impl FnMut(usize, &[usize], usize, bool) -> Result<Tensor>,
    ) -> Result<Model> {
        config.validate()?;
        let layers = config.layers()?;
        let mut params = Vec::new();
        for layer in &layers {
            for (name, dims, fan_in) in layer.param_specs() {
                let value = init(params.len(), &dims, fan_in, name.ends_with("/bias"))?;
                let velocity = Tensor::zeros_like(&value);
                params.push(Parameter { name, value, velocity });
            }
        }
        Ok(Model {
            config,
            layers,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces a parameter's value; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Model(format!("no parameter named {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Model(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                p.value.dims(),
                value.dims()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn architecture(&self) -> Result<Vec<LayerInfo>> {
        self.config.architecture()
    }

    fn fire_params(&self, name: &str) -> Result<FireParams<'_>> {
        let get = |suffix: &str| {
            let full = format!("{name}.{suffix}");
            self.param(&full)
                .ok_or_else(|| Error::Model(format!("missing parameter {full:?}")))
        };
        Ok(FireParams {
            squeeze_weight: get("squeeze1x1/weight")?,
            squeeze_bias: get("squeeze1x1/bias")?,
            expand1x1_weight: get("expand1x1/weight")?,
            expand1x1_bias: get("expand1x1/bias")?,
            expand3x3_weight: get("expand3x3/weight")?,
            expand3x3_bias: get("expand3x3/bias")?,
        })
    }

    fn weight_bias(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        let get = |suffix: &str| {
            let full = format!("{name}/{suffix}");
            self.param(&full)
                .ok_or_else(|| Error::Model(format!("missing parameter {full:?}")))
        };
        Ok((get("weight")?, get("bias")?))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch.shape().nchw()?;
        let s = self.config.input_size;
        if (c, h, w) != (INPUT_CHANNELS, s, s) {
            return Err(shape_err!(
                "model expects [N, {INPUT_CHANNELS}, {s}, {s}] input, got {:?}",
                batch.dims()
            ));
        }
        Ok(())
    }

    /// Runs every layer up to (not including) softmax.
    fn run(&self, batch: &Tensor, retain: bool, dropout_seed: Option<u64>) -> Result<(Tensor, Vec<Saved>)> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut saved = Vec::new();
        for layer in &self.layers {
            let (y, keep) = match layer {
                Layer::Conv { name, spec } => {
                    let (w, b) = self.weight_bias(name)?;
                    (ops::conv2d_forward(&x, w, b, spec)?, Saved::Input(x))
                }
                Layer::Relu { .. } => {
                    let y = ops::relu(&x);
                    (y.clone(), Saved::Output(y))
                }
                Layer::MaxPool { .. } => (ops::maxpool2d(&x, POOL_KERNEL, POOL_STRIDE)?, Saved::Input(x)),
                Layer::Fire { name, spec, .. } => {
                    let (y, acts) =
                        fire_forward_retained(&x, spec, &self.fire_params(name)?).map_err(|e| e.context(name))?;
                    (y, Saved::Fire(acts))
                }
                Layer::GlobalAvgPool { .. } => (ops::global_avg_pool(&x)?, Saved::Dims(x.dims().to_vec())),
                Layer::Dense { name, .. } => {
                    let (w, b) = self.weight_bias(name)?;
                    (ops::dense_forward(&x, w, b)?, Saved::Input(x))
                }
                Layer::Dropout { .. } => match dropout_seed {
                    Some(seed) if self.config.dropout_rate > 0.0 => {
                        let rate = self.config.dropout_rate;
                        (ops::dropout(&x, rate, seed, true)?, Saved::Dropout { rate, seed })
                    }
                    _ => (x, Saved::Nothing),
                },
                Layer::Softmax { .. } => break,
            };
            x = y;
            if retain {
                saved.push(keep);
            }
        }
        Ok((x, saved))
    }

    /// Inference-mode forward pass: class probabilities `[N, m]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.run(batch, false, None)?;
        ops::softmax(&logits)
    }

    /// Pre-softmax scores `[N, m]`, inference mode.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, false, None).map(|(logits, _)| logits)
    }

    /// Training-mode forward pass. Retains activations for [`Model::backward`].
    /// Dropout is active only when `dropout_seed` is given.
    pub fn forward_train(&mut self, batch: &Tensor, dropout_seed: Option<u64>) -> Result<Tensor> {
        self.cache = None;
        let (logits, saved) = self.run(batch, true, dropout_seed)?;
        self.cache = Some(saved);
        ops::softmax(&logits)
    }

    /// Backpropagates the gradient with respect to the logits through the
    /// activations retained by the last [`Model::forward_train`].
    pub fn backward(&mut self, d_logits: &Tensor) -> Result<Gradients> {
        let saved = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a retained training forward pass".into()))?;
        let mut grads = Gradients::default();
        let mut d = d_logits.clone();
        // The softmax layer is not retained, so layers and saved entries line
        // up after dropping it.
        let layers = &self.layers[..saved.len()];
        for (layer, keep) in layers.iter().zip(&saved).rev() {
            d = match (layer, keep) {
                (Layer::Conv { name, spec }, Saved::Input(x)) => {
                    let (w, _) = self.weight_bias(name)?;
                    let g = ops::conv2d_backward(x, w, spec, &d)?;
                    grads.insert(format!("{name}/weight"), g.d_weight.expect("conv weight grad"));
                    grads.insert(format!("{name}/bias"), g.d_bias.expect("conv bias grad"));
                    g.d_input
                }
                (Layer::Relu { .. }, Saved::Output(y)) => ops::relu_backward(y, &d)?,
                (Layer::MaxPool { .. }, Saved::Input(x)) => ops::maxpool2d_backward(x, POOL_KERNEL, POOL_STRIDE, &d)?,
                (Layer::Fire { name, spec, .. }, Saved::Fire(acts)) => {
                    let g = fire_backward_retained(acts, spec, &self.fire_params(name)?, &d)
                        .map_err(|e| e.context(name))?;
                    let names = [
                        "squeeze1x1/weight",
                        "squeeze1x1/bias",
                        "expand1x1/weight",
                        "expand1x1/bias",
                        "expand3x3/weight",
                        "expand3x3/bias",
                    ];
                    for (suffix, grad) in names.iter().zip(g.d_params) {
                        grads.insert(format!("{name}.{suffix}"), grad);
                    }
                    g.d_input
                }
                (Layer::GlobalAvgPool { .. }, Saved::Dims(dims)) => ops::global_avg_pool_backward(dims, &d)?,
                (Layer::Dense { name, .. }, Saved::Input(x)) => {
                    let (w, _) = self.weight_bias(name)?;
                    let g = ops::dense_backward(x, w, &d)?;
                    grads.insert(format!("{name}/weight"), g.d_weight.expect("dense weight grad"));
                    grads.insert(format!("{name}/bias"), g.d_bias.expect("dense bias grad"));
                    g.d_input
                }
                (Layer::Dropout { .. }, Saved::Dropout { rate, seed }) => ops::dropout_backward(&d, *rate, *seed)?,
                (Layer::Dropout { .. }, Saved::Nothing) => d,
                (layer, _) => {
                    return Err(Error::State(format!(
                        "retained activations do not match layer {}",
                        layer.name()
                    )))
                }
            };
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fire_spec_validation() {
        assert!(FireSpec::new(1, 1, 1).is_ok());
        assert!(matches!(FireSpec::new(0, 1, 1), Err(Error::Config(_))));
        assert!(matches!(FireSpec::new(5, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_fire_gives_zero_output() {
        let spec = FireSpec::new(1, 1, 1).unwrap();
        let z = |d: &[usize]| Tensor::zeros(d).unwrap();
        let (sw, sb, ew, eb, e3w, e3b) = (
            z(&[1, 3, 1, 1]),
            z(&[1]),
            z(&[1, 1, 1, 1]),
            z(&[1]),
            z(&[1, 1, 3, 3]),
            z(&[1]),
        );
        let p = FireParams {
            squeeze_weight: &sw,
            squeeze_bias: &sb,
            expand1x1_weight: &ew,
            expand1x1_bias: &eb,
            expand3x3_weight: &e3w,
            expand3x3_bias: &e3b,
        };
        let x = Tensor::new(Shape::new([2, 3, 4, 5]).unwrap(), 1.0);
        let y = fire_forward(&x, &spec, &p).unwrap();
        assert_eq!(y.dims(), &[2, 2, 4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let bad = z(&[1, 2, 1, 1]);
        let p_bad = FireParams {
            squeeze_weight: &bad,
            ..p
        };
        assert!(matches!(fire_forward(&x, &spec, &p_bad), Err(Error::Model(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::squeezenet_v1_1(24).validate().is_ok());
        assert!(ModelConfig::tiny(3).validate().is_ok());
        let mut c = ModelConfig::tiny(3);
        c.num_classes = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::squeezenet_v1_1(24);
        c.input_size = 16;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny(3);
        c.fire_specs.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny(3);
        c.variant = "v1.0".into();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_architecture_shapes() {
        let arch = ModelConfig::squeezenet_v1_1(24).architecture().unwrap();
        let find = |n: &str| arch.iter().find(|l| l.name == n).unwrap();
        assert_eq!(find("conv1").output_shape, vec![64, 121, 121]);
        assert_eq!(find("maxpool1").output_shape, vec![64, 60, 60]);
        assert_eq!(find("fire3").output_shape, vec![128, 60, 60]);
        assert_eq!(find("maxpool2").output_shape, vec![128, 29, 29]);
        assert_eq!(find("maxpool3").output_shape, vec![256, 14, 14]);
        assert_eq!(find("fire9").output_shape, vec![512, 14, 14]);
        assert_eq!(find("avgpool").output_shape, vec![512]);
        assert_eq!(find("softmax").output_shape, vec![24]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::build(ModelConfig::tiny(3), 0).unwrap();
        let mut names: Vec<_> = m.parameters().iter().map(|p| p.name.clone()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        assert!(names.iter().all(|n| n.ends_with("/weight") || n.ends_with("/bias")));
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = Model::build(ModelConfig::tiny(3), 0).unwrap();
        let d = Tensor::zeros(&[1, 3]).unwrap();
        assert!(matches!(m.backward(&d), Err(Error::State(_))));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = Model::build(ModelConfig::tiny(3), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 33, 33]).unwrap();
        assert!(matches!(m.predict(&x), Err(Error::Shape(_))));
    }
}
