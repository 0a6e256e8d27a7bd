use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};

use super::layers::{self, BatchNorm2d, BiLstm, BiLstmCache, BnCache, Conv2d, Linear, LstmDir, Param};
use super::spec::{Axis, LayerSpec, ModelSpec, Shape};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Relu,
    Sigmoid,
    BatchNorm(BatchNorm2d),
    MaxPool { kernel: [usize; 2], stride: [usize; 2] },
    Collapse,
    BiLstm(BiLstm),
    AxisLstm(Axis, BiLstm),
    Dropout(f32),
    Linear(Linear),
    LogSoftmax,
}

enum Cache {
    Input(Tensor),
    Output(Tensor),
    Bn(BnCache),
    Pool { in_shape: Vec<usize>, argmax: Vec<u32> },
    Shape(Vec<usize>),
    Lstm { input: Tensor, cache: BiLstmCache },
    Mask(Vec<f32>),
}

/// What a training forward pass keeps for the backward pass.
pub struct Tape {
    caches: Vec<Cache>,
}

/// A runnable network: a [`ModelSpec`] plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Fresh parameters: weights uniform in `±1/√fan_in`, LSTM forget-gate
    /// bias `+1`, batch-norm scale 1 and shift 0.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.shapes(spec.input_height.unwrap_or(64), 4096)?;
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    stride,
                } => {
                    let bound = 1.0 / ((in_channels * kernel[0] * kernel[1]) as f32).sqrt();
                    Layer::Conv(Conv2d {
                        weight: Param::uniform(
                            vec![out_channels, in_channels, kernel[0], kernel[1]],
                            bound,
                            rng,
                        ),
                        bias: Param::uniform(vec![out_channels], bound, rng),
                        kernel,
                        padding,
                        stride,
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm(BatchNorm2d::new(channels)),
                LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool { kernel, stride },
                LayerSpec::CollapseHeight => Layer::Collapse,
                LayerSpec::BiLstm { input, hidden } => Layer::BiLstm(BiLstm {
                    fwd: LstmDir::init(input, hidden, rng),
                    bwd: LstmDir::init(input, hidden, rng),
                }),
                LayerSpec::AxisLstm {
                    axis,
                    input,
                    hidden,
                } => Layer::AxisLstm(
                    axis,
                    BiLstm {
                        fwd: LstmDir::init(input, hidden, rng),
                        bwd: LstmDir::init(input, hidden, rng),
                    },
                ),
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::Linear { input, output } => {
                    let bound = 1.0 / (input as f32).sqrt();
                    Layer::Linear(Linear {
                        weight: Param::uniform(vec![output, input], bound, rng),
                        bias: Param::uniform(vec![output], bound, rng),
                    })
                }
                LayerSpec::LogSoftmax => Layer::LogSoftmax,
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    /// Builds a model from named tensors; every parameter must be present
    /// with its exact shape.
    pub fn from_tensors(spec: &ModelSpec, tensors: &BTreeMap<String, Tensor>) -> Result<Self, NnError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(spec, &mut rng)?;
        for (name, mut slot) in model.named_tensors_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| NnError::MissingTensor(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(NnError::TensorShape {
                    name,
                    expected: slot.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// All stored tensors (parameters and batch-norm running statistics)
    /// under their canonical names.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut put = |name: &str, t: &Tensor| {
                out.insert(format!("{i}.{name}"), t.clone());
            };
            match layer {
                Layer::Conv(c) => {
                    put("weight", &c.weight.value);
                    put("bias", &c.bias.value);
                }
                Layer::BatchNorm(bn) => {
                    put("weight", &bn.gamma.value);
                    put("bias", &bn.beta.value);
                    let n = bn.running_mean.len();
                    put("running_mean", &Tensor::new(vec![n], bn.running_mean.clone()).expect("len"));
                    put("running_var", &Tensor::new(vec![n], bn.running_var.clone()).expect("len"));
                }
                Layer::BiLstm(l) | Layer::AxisLstm(_, l) => {
                    for (d, dir) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
                        put(&format!("{d}.w_ih"), &dir.w_ih.value);
                        put(&format!("{d}.w_hh"), &dir.w_hh.value);
                        put(&format!("{d}.bias"), &dir.bias.value);
                    }
                }
                Layer::Linear(l) => {
                    put("weight", &l.weight.value);
                    put("bias", &l.bias.value);
                }
                _ => {}
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, TensorSlot<'_>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{i}.weight"), TensorSlot::T(&mut c.weight.value)));
                    out.push((format!("{i}.bias"), TensorSlot::T(&mut c.bias.value)));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.weight"), TensorSlot::T(&mut bn.gamma.value)));
                    out.push((format!("{i}.bias"), TensorSlot::T(&mut bn.beta.value)));
                    out.push((format!("{i}.running_mean"), TensorSlot::V(&mut bn.running_mean)));
                    out.push((format!("{i}.running_var"), TensorSlot::V(&mut bn.running_var)));
                }
                Layer::BiLstm(l) | Layer::AxisLstm(_, l) => {
                    for (d, dir) in [("fwd", &mut l.fwd), ("bwd", &mut l.bwd)] {
                        out.push((format!("{i}.{d}.w_ih"), TensorSlot::T(&mut dir.w_ih.value)));
                        out.push((format!("{i}.{d}.w_hh"), TensorSlot::T(&mut dir.w_hh.value)));
                        out.push((format!("{i}.{d}.bias"), TensorSlot::T(&mut dir.bias.value)));
                    }
                }
                Layer::Linear(l) => {
                    out.push((format!("{i}.weight"), TensorSlot::T(&mut l.weight.value)));
                    out.push((format!("{i}.bias"), TensorSlot::T(&mut l.bias.value)));
                }
                _ => {}
            }
        }
        out
    }

    /// Trainable parameters in a fixed order.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::BatchNorm(bn) => out.extend([&mut bn.gamma, &mut bn.beta]),
                Layer::BiLstm(l) | Layer::AxisLstm(_, l) => out.extend([
                    &mut l.fwd.w_ih,
                    &mut l.fwd.w_hh,
                    &mut l.fwd.bias,
                    &mut l.bwd.w_ih,
                    &mut l.bwd.w_hh,
                    &mut l.bwd.bias,
                ]),
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.input_channels {
            return Err(NnError::Shape(format!(
                "model {} expects [B, {}, H, W] input, got {s:?}",
                self.spec.name, self.spec.input_channels
            )));
        }
        self.spec.shapes(s[2], s[3])?;
        Ok(())
    }

    fn finite(&self, i: usize, t: &Tensor) -> Result<(), NnError> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(NnError::NonFinite(format!("output of layer {i}")))
        }
    }

    /// Inference pass: dropout off, batch norm on running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::Relu => layers::relu(&cur),
                Layer::Sigmoid => layers::sigmoid_tensor(&cur),
                Layer::BatchNorm(bn) => bn.forward(&cur),
                Layer::MaxPool { kernel, stride } => layers::max_pool(&cur, *kernel, *stride, false).0,
                Layer::Collapse => layers::collapse_height(&cur),
                Layer::BiLstm(l) => l.forward(&cur),
                Layer::AxisLstm(axis, l) => {
                    let s = cur.shape().to_vec();
                    let seq = layers::map_to_sequences(&cur, *axis);
                    layers::sequences_to_map(&l.forward(&seq), *axis, s[0], s[2], s[3])
                }
                Layer::Dropout(_) => cur,
                Layer::Linear(l) => l.forward(&cur),
                Layer::LogSoftmax => layers::log_softmax(&cur),
            };
            self.finite(i, &cur)?;
        }
        Ok(cur)
    }

    /// Training pass: batch statistics (running averages updated), dropout
    /// sampled from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Result<(Tensor, Tape), NnError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (next, cache) = match &mut self.layers[i] {
                Layer::Conv(c) => (c.forward(&cur), Cache::Input(cur)),
                Layer::Relu => {
                    let y = layers::relu(&cur);
                    (y.clone(), Cache::Output(y))
                }
                Layer::Sigmoid => {
                    let y = layers::sigmoid_tensor(&cur);
                    (y.clone(), Cache::Output(y))
                }
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward_train(&cur);
                    (y, Cache::Bn(c))
                }
                Layer::MaxPool { kernel, stride } => {
                    let (y, argmax) = layers::max_pool(&cur, *kernel, *stride, true);
                    (
                        y,
                        Cache::Pool {
                            in_shape: cur.shape().to_vec(),
                            argmax,
                        },
                    )
                }
                Layer::Collapse => (layers::collapse_height(&cur), Cache::Shape(cur.shape().to_vec())),
                Layer::BiLstm(l) => {
                    let (y, cache) = l.forward_train(&cur);
                    (y, Cache::Lstm { input: cur, cache })
                }
                Layer::AxisLstm(axis, l) => {
                    let s = cur.shape().to_vec();
                    let seq = layers::map_to_sequences(&cur, *axis);
                    let (y, cache) = l.forward_train(&seq);
                    (
                        layers::sequences_to_map(&y, *axis, s[0], s[2], s[3]),
                        Cache::Lstm { input: seq, cache },
                    )
                }
                Layer::Dropout(p) => {
                    let mask = layers::dropout_mask(cur.len(), *p, rng);
                    (layers::mul_mask(&cur, &mask), Cache::Mask(mask))
                }
                Layer::Linear(l) => (l.forward(&cur), Cache::Input(cur)),
                Layer::LogSoftmax => {
                    let y = layers::log_softmax(&cur);
                    (y.clone(), Cache::Output(y))
                }
            };
            self.finite(i, &next)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Tape { caches }))
    }

    /// Accumulates parameter gradients for the output gradient `dy`.
    pub fn backward(&mut self, tape: Tape, dy: Tensor) {
        let mut grad = dy;
        let n = self.layers.len();
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            // the input gradient of the first layer is never needed
            let need_dx = i > 0;
            let layer = &mut self.layers[i];
            let next = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(x)) => c.backward(&x, &grad, need_dx),
                (Layer::Relu, Cache::Output(y)) => Some(layers::relu_backward(&y, &grad)),
                (Layer::Sigmoid, Cache::Output(y)) => Some(layers::sigmoid_backward(&y, &grad)),
                (Layer::BatchNorm(bn), Cache::Bn(c)) => Some(bn.backward(&c, &grad)),
                (Layer::MaxPool { .. }, Cache::Pool { in_shape, argmax }) => {
                    Some(layers::max_pool_backward(&in_shape, &argmax, &grad))
                }
                (Layer::Collapse, Cache::Shape(s)) => Some(layers::collapse_height_backward(&s, &grad)),
                (Layer::BiLstm(l), Cache::Lstm { input, cache }) => l.backward(&input, &cache, &grad, need_dx),
                (Layer::AxisLstm(axis, l), Cache::Lstm { input, cache }) => {
                    let s = grad.shape().to_vec();
                    let gseq = layers::map_to_sequences(&grad, *axis);
                    l.backward(&input, &cache, &gseq, need_dx).map(|dx| {
                        layers::sequences_to_map(&dx, *axis, s[0], s[2], s[3])
                    })
                }
                (Layer::Dropout(_), Cache::Mask(m)) => Some(layers::mul_mask(&grad, &m)),
                (Layer::Linear(l), Cache::Input(x)) => l.backward(&x, &grad, need_dx),
                (Layer::LogSoftmax, Cache::Output(y)) => Some(layers::log_softmax_backward(&y, &grad)),
                _ => unreachable!("tape does not match layer {i} of {n}"),
            };
            match next {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    /// Output shape (without batch) for one input.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<Shape, NnError> {
        self.spec.output_shape(height, width)
    }
}

enum TensorSlot<'a> {
    T(&'a mut Tensor),
    V(&'a mut Vec<f32>),
}

impl TensorSlot<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            TensorSlot::T(t) => t.shape().to_vec(),
            TensorSlot::V(v) => vec![v.len()],
        }
    }

    fn data_mut(&mut self) -> &mut [f32] {
        match self {
            TensorSlot::T(t) => t.data_mut(),
            TensorSlot::V(v) => v,
        }
    }
}
