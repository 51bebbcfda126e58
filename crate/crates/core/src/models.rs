//! Desk-scale classifiers, parameter initialization and the SGD update.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::ops::{self, ConvGeometry, Primitive};
use crate::tape::{GradPair, Tape, Var};
use crate::tensor::Tensor;

/// Objective a recorded tape ends in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    CarliniWagner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Max-pool window (and stride) applied after the activation.
    pub pool: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Dense ReLU layers of the given widths, then a linear head. No hidden
    /// layers gives a linear model.
    Mlp { hidden: Vec<usize> },
    /// Conv/ReLU(/pool) stack, flatten, dense ReLU layers, linear head.
    ConvNet { convs: Vec<ConvLayer>, hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Per-example input shape, e.g. `[1, 28, 28]` or `[784]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Fixed affine scale applied to inputs before the first layer, so that
    /// perturbation budgets stay in raw pixel units.
    pub input_scale: f32,
}

#[derive(Debug, Clone)]
enum Layer {
    Scale(f32),
    Flatten,
    Dense { name: String, fan_in: usize, width: usize, relu: bool },
    Conv { name: String, geo: ConvGeometry, pool: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for biases.
    pub fan_in: Option<usize>,
}

/// A validated model: a fixed layer sequence derived from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

/// Validates `spec` and returns the model that records its forward pass.
pub fn build_model(spec: ModelSpec) -> Result<Model> {
    Model::new(spec)
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", spec.classes)));
        }
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid input shape {:?}", spec.input_shape)));
        }
        if !(spec.input_scale.is_finite() && spec.input_scale != 0.0) {
            return Err(Error::InvalidArgument("input scale must be finite and non-zero".into()));
        }
        let mut layers = Vec::new();
        if spec.input_scale != 1.0 {
            layers.push(Layer::Scale(spec.input_scale));
        }
        let hidden = match &spec.arch {
            Architecture::Mlp { hidden } => hidden,
            Architecture::ConvNet { convs, hidden } => {
                if spec.input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "convnet needs [C, H, W] inputs, got {:?}",
                        spec.input_shape
                    )));
                }
                let mut shape = spec.input_shape.clone();
                for (i, conv) in convs.iter().enumerate() {
                    if conv.channels == 0 {
                        return Err(Error::InvalidArgument(format!("conv{} has zero channels", i + 1)));
                    }
                    let geo = ConvGeometry::new(
                        &[1, shape[0], shape[1], shape[2]],
                        &[conv.channels, shape[0], conv.kernel, conv.kernel],
                        conv.stride,
                        conv.padding,
                    )?;
                    shape = vec![conv.channels, geo.out_h, geo.out_w];
                    if let Some(p) = conv.pool {
                        let (h, w) = ops::pool_output(shape[1], shape[2], p, p)?;
                        shape = vec![conv.channels, h, w];
                    }
                    layers.push(Layer::Conv {
                        name: format!("conv{}", i + 1),
                        geo,
                        pool: conv.pool,
                    });
                }
                hidden
            }
        };
        layers.push(Layer::Flatten);
        let mut width = match layers.iter().rev().find_map(|l| match l {
            Layer::Conv { geo, pool, .. } => Some((geo, pool)),
            _ => None,
        }) {
            Some((geo, Some(p))) => {
                let (h, w) = ops::pool_output(geo.out_h, geo.out_w, *p, *p)?;
                geo.out_c * h * w
            }
            Some((geo, None)) => geo.out_c * geo.out_h * geo.out_w,
            None => spec.input_shape.iter().product(),
        };
        for (i, &h) in hidden.iter().enumerate() {
            if h == 0 {
                return Err(Error::InvalidArgument(format!("fc{} has zero width", i + 1)));
            }
            layers.push(Layer::Dense {
                name: format!("fc{}", i + 1),
                fan_in: width,
                width: h,
                relu: true,
            });
            width = h;
        }
        layers.push(Layer::Dense {
            name: "head".into(),
            fan_in: width,
            width: spec.classes,
            relu: false,
        });
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Parameter names and shapes in a fixed order.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, fan_in, width, .. } => {
                    out.push(ParamShape {
                        name: format!("{name}.weight"),
                        shape: vec![*fan_in, *width],
                        fan_in: Some(*fan_in),
                    });
                    out.push(ParamShape {
                        name: format!("{name}.bias"),
                        shape: vec![*width],
                        fan_in: None,
                    });
                }
                Layer::Conv { name, geo, .. } => {
                    out.push(ParamShape {
                        name: format!("{name}.weight"),
                        shape: vec![geo.out_c, geo.in_c, geo.kh, geo.kw],
                        fan_in: Some(geo.in_c * geo.kh * geo.kw),
                    });
                    out.push(ParamShape {
                        name: format!("{name}.bias"),
                        shape: vec![geo.out_c],
                        fan_in: None,
                    });
                }
                Layer::Scale(_) | Layer::Flatten => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                "model input",
                format!("[B, {:?}]", self.spec.input_shape),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Records the network on `tape` starting from node `x`, registering each
    /// parameter as a tape parameter. Returns the logits node and the
    /// parameter nodes by name.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &ParamSet) -> Result<(Var, Vec<(String, Var)>)> {
        self.check_input(tape.value(x))?;
        let mut param_vars = Vec::new();
        let mut register = |tape: &mut Tape, name: String| -> Result<Var> {
            let value = params
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?
                .clone();
            let v = tape.param(name.clone(), value);
            param_vars.push((name, v));
            Ok(v)
        };
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Scale(s) => tape.apply(Primitive::ScalarMul(*s), &[h])?,
                Layer::Flatten => {
                    if tape.value(h).rank() > 2 {
                        tape.apply(Primitive::Flatten, &[h])?
                    } else {
                        h
                    }
                }
                Layer::Dense { name, relu, .. } => {
                    let w = register(tape, format!("{name}.weight"))?;
                    let b = register(tape, format!("{name}.bias"))?;
                    let z = tape.apply(Primitive::MatMul, &[h, w])?;
                    let z = tape.apply(Primitive::AddBias, &[z, b])?;
                    if *relu {
                        tape.apply(Primitive::Relu, &[z])?
                    } else {
                        z
                    }
                }
                Layer::Conv { name, geo, pool } => {
                    let w = register(tape, format!("{name}.weight"))?;
                    let b = register(tape, format!("{name}.bias"))?;
                    let z = tape.apply(
                        Primitive::Conv2d {
                            stride: geo.stride,
                            padding: geo.padding,
                        },
                        &[h, w, b],
                    )?;
                    let z = tape.apply(Primitive::Relu, &[z])?;
                    match pool {
                        Some(p) => tape.apply(Primitive::MaxPool2d { size: *p, stride: *p }, &[z])?,
                        None => z,
                    }
                }
            };
        }
        Ok((h, param_vars))
    }

    /// Records one full forward pass ending in the mean loss over the batch.
    pub fn record(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        loss: LossKind,
        ledger: &CostLedger,
    ) -> Result<Recording> {
        let mut tape = Tape::new();
        let input = tape.input(x.clone());
        let (logits, params) = self.forward(&mut tape, input, params)?;
        let per_example = match loss {
            LossKind::CrossEntropy => Primitive::SoftmaxCrossEntropy { labels: labels.to_vec() },
            LossKind::CarliniWagner => Primitive::CwMargin { labels: labels.to_vec() },
        };
        let l = tape.apply(per_example, &[logits])?;
        let loss = tape.apply(Primitive::MeanBatch, &[l])?;
        tape.set_loss(loss)?;
        ledger.record_forward();
        Ok(Recording {
            tape,
            input,
            logits,
            loss,
            params,
        })
    }

    /// Forward pass without a loss; records one forward in the ledger.
    pub fn logits(&self, params: &ParamSet, x: &Tensor, ledger: &CostLedger) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let (logits, _) = self.forward(&mut tape, input, params)?;
        ledger.record_forward();
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, params: &ParamSet, x: &Tensor, ledger: &CostLedger) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(params, x, ledger)?))
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.row_len();
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// A recorded forward pass of a model on one batch.
#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub input: Var,
    pub logits: Var,
    pub loss: Var,
    params: Vec<(String, Var)>,
}

/// Named view of a [`GradPair`] for a model recording.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub input: Tensor,
}

impl Recording {
    pub fn loss_value(&self) -> f32 {
        self.tape.value(self.loss).item()
    }

    pub fn logits_value(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Runs the dual backward pass and names the results.
    pub fn backward(&self, ledger: &CostLedger) -> Result<Gradients> {
        let pair = self.tape.backward_dual(ledger)?;
        Ok(self.name_gradients(pair))
    }

    pub fn name_gradients(&self, mut pair: GradPair) -> Gradients {
        let params = self
            .params
            .iter()
            .map(|(name, v)| (name.clone(), pair.g_theta.remove(v).expect("param gradient")))
            .collect();
        let input = pair.g_adv.remove(&self.input).expect("input gradient");
        Gradients { params, input }
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Momentum buffer, same shape as `value`.
    pub velocity: Tensor,
}

/// Named model parameters with their momentum buffers, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with a zeroed momentum buffer.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        value.check_finite(&format!("parameter `{name}`"))?;
        let velocity = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, velocity });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.velocity)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Same values with every parameter replaced by `f(name, value)`.
    pub fn map_values(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: f(&p.name, &p.value),
                    velocity: p.velocity.clone(),
                })
                .collect(),
        }
    }

    /// Checks names and shapes against a model's parameter layout.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let shapes = model.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} parameters, set has {}",
                shapes.len(),
                self.params.len()
            )));
        }
        for s in shapes {
            let t = self
                .get(&s.name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape("parameter", format!("{:?}", s.shape), format!("{:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases, a pure
/// function of `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    let model = Model::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for p in model.param_shapes() {
        let numel: usize = p.shape.iter().product();
        let data = match p.fan_in {
            Some(fan_in) => {
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
            None => vec![0.0; numel],
        };
        set.insert(p.name, Tensor::new(p.shape, data)?)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// `v <- mu*v + g + lambda*theta; theta <- theta - lr*v` for every parameter.
///
/// Either every parameter is updated or none is.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    cfg: &SgdConfig,
    ledger: &CostLedger,
) -> Result<()> {
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need lr > 0, 0 <= momentum < 1, weight_decay >= 0; got {cfg:?}"
        )));
    }
    let mut updates = Vec::with_capacity(params.len());
    for p in &params.params {
        let g = grads.get(&p.name).ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        p.value.expect_same_shape("sgd_step", g)?;
        let mut velocity = p.velocity.clone();
        let mut value = p.value.clone();
        for ((v, t), &gi) in velocity.data_mut().iter_mut().zip(value.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + gi + cfg.weight_decay * *t;
            *t -= cfg.lr * *v;
        }
        if !value.is_finite() || !velocity.is_finite() {
            return Err(Error::NonFinite(format!("sgd update of `{}`", p.name)));
        }
        updates.push((value, velocity));
    }
    for (p, (value, velocity)) in params.params.iter_mut().zip(updates) {
        p.value = value;
        p.velocity = velocity;
    }
    ledger.record_sgd_update();
    Ok(())
}
