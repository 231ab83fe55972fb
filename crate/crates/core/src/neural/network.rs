//! Layer stacks assembled from declarative specs, batched forward and
//! backward passes, and the per-epoch training loop.
//!
//! A network is a trunk of layers plus an optional domain-classification
//! head (gradient reversal -> fully connected -> softmax) that branches off
//! at the flatten boundary. Shape consistency across the stack is validated
//! once at construction; forward passes then trust it.
//!
//! Batch layout: spatial activations are `[B, C, H, W]`, flat activations
//! `[B, D]`. Everything except batch normalization processes samples
//! independently.

use super::layers::{
    avgpool_forward, batchnorm_backward, batchnorm_forward, conv_backward_into, conv_forward_into,
    fc_forward_into, grad_reversal_backward, maxpool_forward, relu_backward, softmax,
    softmax_backward, BatchNorm, BnCache, BnMode, BnStats, ConvLayer, FcLayer,
};
use super::loss::{
    ce_classification_grad, loss_ce_classification, loss_combined, loss_mse, mse_grad, LossReport,
};
use super::optim::OptimState;
use super::NeuralError;
use crate::rng::Rng;
use crate::tensor::{conv_output_shape, Shape2D, Tensor};

fn default_stride() -> usize {
    1
}

fn default_lambda() -> f64 {
    1.0
}

/// Declarative layer description, the unit of network configuration files.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
    Fc {
        out: usize,
    },
    BatchNorm,
    GradReversal {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    SoftmaxHead,
    LinearHead,
}

/// Default regression stack: three conv blocks (conv-batchnorm-relu-pool)
/// widening 8 -> 16 -> 32, then fc(64) -> relu -> fc(3) behind a linear
/// head. Spatial input dims must be divisible by 8.
pub fn default_regression_network() -> Vec<LayerSpec> {
    let conv_block = |out_channels: usize| {
        vec![
            LayerSpec::Conv {
                out_channels,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool,
        ]
    };
    let mut specs = Vec::new();
    specs.extend(conv_block(8));
    specs.extend(conv_block(16));
    specs.extend(conv_block(32));
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Fc { out: 64 });
    specs.push(LayerSpec::Relu);
    specs.push(LayerSpec::Fc { out: 3 });
    specs.push(LayerSpec::LinearHead);
    specs
}

/// Shape of one sample at a layer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        features: usize,
    },
}

impl FeatureShape {
    pub fn sample_len(&self) -> usize {
        match *self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            FeatureShape::Flat { features } => features,
        }
    }

    fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => vec![batch, channels, height, width],
            FeatureShape::Flat { features } => vec![batch, features],
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
    Fc(FcLayer),
    BatchNorm(BatchNorm),
    GradReversal { lambda: f64 },
    SoftmaxHead,
    LinearHead,
}

impl Layer {
    fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::AvgPool => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Fc(_) => "fc",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::GradReversal { .. } => "grad_reversal",
            Layer::SoftmaxHead => "softmax_head",
            Layer::LinearHead => "linear_head",
        }
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                out_channels: c.out_channels(),
                kernel: c.kernel_size(),
                stride: c.stride,
                pad: c.pad,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::AvgPool => LayerSpec::AvgPool,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Fc(f) => LayerSpec::Fc { out: f.d_out() },
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::GradReversal { lambda } => LayerSpec::GradReversal { lambda: *lambda },
            Layer::SoftmaxHead => LayerSpec::SoftmaxHead,
            Layer::LinearHead => LayerSpec::LinearHead,
        }
    }
}

enum LayerCache {
    None,
    Pool(Vec<usize>),
    Bn(BnCache),
    Probs(Tensor),
}

struct StackPass {
    activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
    bn_updates: Vec<(usize, BnStats)>,
}

/// Saved state of one training forward pass.
pub struct ForwardPass {
    trunk: StackPass,
    domain: Option<StackPass>,
    pub bn_updates: Vec<(usize, BnStats)>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.trunk.activations.last().expect("non-empty boundaries")
    }

    pub fn domain_output(&self) -> Option<&Tensor> {
        self.domain
            .as_ref()
            .map(|d| d.activations.last().expect("domain head has boundaries"))
    }
}

/// Parameter gradients aligned with [`Network::param_tensors`].
pub struct Gradients {
    pub by_param: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct DomainHead {
    /// Boundary index in the trunk where the head branches off.
    branch: usize,
    layers: Vec<Layer>,
    shapes: Vec<FeatureShape>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    shapes: Vec<FeatureShape>,
    domain: Option<DomainHead>,
}

fn infer_shape(
    index: usize,
    spec: &LayerSpec,
    input: FeatureShape,
) -> Result<FeatureShape, NeuralError> {
    let err = |msg: String| NeuralError::Config(format!("layer {index}: {msg}"));
    match *spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => match input {
            FeatureShape::Spatial { height, width, .. } => {
                let out = conv_output_shape(Shape2D::new(height, width), kernel, stride, pad)
                    .map_err(|e| err(e.to_string()))?;
                Ok(FeatureShape::Spatial {
                    channels: out_channels,
                    height: out.height,
                    width: out.width,
                })
            }
            _ => Err(err("conv needs spatial input".into())),
        },
        LayerSpec::MaxPool | LayerSpec::AvgPool => match input {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(NeuralError::Geometry(format!(
                        "layer {index}: pooling needs even spatial dims, got {height}x{width}"
                    )));
                }
                Ok(FeatureShape::Spatial {
                    channels,
                    height: height / 2,
                    width: width / 2,
                })
            }
            _ => Err(err("pooling needs spatial input".into())),
        },
        LayerSpec::Flatten => match input {
            FeatureShape::Spatial { .. } => Ok(FeatureShape::Flat {
                features: input.sample_len(),
            }),
            _ => Err(err("flatten applied to already-flat features".into())),
        },
        LayerSpec::Fc { out } => match input {
            FeatureShape::Flat { .. } => Ok(FeatureShape::Flat { features: out }),
            _ => Err(err("fc needs flat input (insert flatten)".into())),
        },
        LayerSpec::Relu
        | LayerSpec::BatchNorm
        | LayerSpec::GradReversal { .. }
        | LayerSpec::LinearHead => Ok(input),
        LayerSpec::SoftmaxHead => match input {
            FeatureShape::Flat { .. } => Ok(input),
            _ => Err(err("softmax head needs flat input".into())),
        },
    }
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| std * rng.next_normal()).collect())
        .expect("valid init shape")
}

fn build_layers(
    specs: &[LayerSpec],
    input: FeatureShape,
    seed: u64,
    stream_base: u64,
) -> Result<(Vec<Layer>, Vec<FeatureShape>), NeuralError> {
    // The last parameterized layer is the output projection; it starts with
    // deliberately small weights so early training adjusts the prediction
    // scale without thrashing the feature layers.
    let last_param_idx = specs
        .iter()
        .rposition(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Fc { .. }));
    let mut layers = Vec::with_capacity(specs.len());
    let mut shapes = vec![input];
    for (i, spec) in specs.iter().enumerate() {
        let cur = *shapes.last().expect("at least the input shape");
        let next = infer_shape(i, spec, cur)?;
        let mut rng = Rng::from_seed_and_stream(seed, stream_base + i as u64);
        let head_gain = if Some(i) == last_param_idx { 0.1 } else { 1.0 };
        let layer = match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let in_channels = match cur {
                    FeatureShape::Spatial { channels, .. } => channels,
                    _ => unreachable!("checked by infer_shape"),
                };
                let fan_in = in_channels * kernel * kernel;
                Layer::Conv(ConvLayer::new(
                    he_tensor(
                        &[out_channels, in_channels, kernel, kernel],
                        fan_in,
                        &mut rng,
                    )
                    .scale(head_gain),
                    Tensor::zeros(&[out_channels]),
                    stride,
                    pad,
                )?)
            }
            LayerSpec::Fc { out } => {
                let d_in = cur.sample_len();
                Layer::Fc(FcLayer::new(
                    he_tensor(&[out, d_in], d_in, &mut rng).scale(head_gain),
                    Tensor::zeros(&[out]),
                )?)
            }
            LayerSpec::BatchNorm => {
                let channels = match cur {
                    FeatureShape::Spatial { channels, .. } => channels,
                    FeatureShape::Flat { features } => features,
                };
                Layer::BatchNorm(BatchNorm::new(channels))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::AvgPool => Layer::AvgPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::GradReversal { lambda } => Layer::GradReversal { lambda },
            LayerSpec::SoftmaxHead => Layer::SoftmaxHead,
            LayerSpec::LinearHead => Layer::LinearHead,
        };
        layers.push(layer);
        shapes.push(next);
    }
    Ok((layers, shapes))
}

impl Network {
    /// Assemble and initialize a network. Weight init is He-normal, seeded
    /// per layer, so construction is bit-reproducible from (specs, seed).
    pub fn build(specs: &[LayerSpec], input: FeatureShape, seed: u64) -> Result<Self, NeuralError> {
        let (layers, shapes) = build_layers(specs, input, seed, 0)?;
        Ok(Network {
            layers,
            shapes,
            domain: None,
        })
    }

    /// Attach the binary domain-classification head at the flatten boundary:
    /// gradient reversal (unit strength) -> fc to 2 logits -> softmax. The
    /// adversarial weighting comes from the combined loss's lambda, applied
    /// once in the backward pass.
    pub fn with_domain_head(mut self, seed: u64) -> Result<Self, NeuralError> {
        let flatten_at = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .ok_or_else(|| {
                NeuralError::Config("domain head needs a flatten layer to branch at".into())
            })?;
        let branch = flatten_at + 1;
        let specs = [
            LayerSpec::GradReversal { lambda: 1.0 },
            LayerSpec::Fc { out: 2 },
            LayerSpec::SoftmaxHead,
        ];
        let (layers, shapes) = build_layers(&specs, self.shapes[branch], seed, 1_000)?;
        self.domain = Some(DomainHead {
            branch,
            layers,
            shapes,
        });
        Ok(self)
    }

    pub fn has_domain_head(&self) -> bool {
        self.domain.is_some()
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> FeatureShape {
        *self.shapes.last().expect("boundaries non-empty")
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    /// Trainable parameter tensors in a fixed order (trunk first, then the
    /// domain head).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self
            .layers
            .iter()
            .chain(self.domain.iter().flat_map(|d| d.layers.iter()))
        {
            match l {
                Layer::Conv(c) => {
                    out.push(&c.kernels);
                    out.push(&c.bias);
                }
                Layer::Fc(f) => {
                    out.push(&f.weights);
                    out.push(&f.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let domain_layers = self.domain.iter_mut().flat_map(|d| d.layers.iter_mut());
        for l in self.layers.iter_mut().chain(domain_layers) {
            match l {
                Layer::Conv(c) => {
                    out.push(&mut c.kernels);
                    out.push(&mut c.bias);
                }
                Layer::Fc(f) => {
                    out.push(&mut f.weights);
                    out.push(&mut f.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.param_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect()
    }

    /// Human-readable parameter names aligned with [`Self::param_tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, i: usize, l: &Layer| match l {
            Layer::Conv(_) => {
                out.push(format!("{prefix}{i}.kernels"));
                out.push(format!("{prefix}{i}.bias"));
            }
            Layer::Fc(_) => {
                out.push(format!("{prefix}{i}.weights"));
                out.push(format!("{prefix}{i}.bias"));
            }
            Layer::BatchNorm(_) => {
                out.push(format!("{prefix}{i}.gamma"));
                out.push(format!("{prefix}{i}.beta"));
            }
            _ => {}
        };
        for (i, l) in self.layers.iter().enumerate() {
            push("layer", i, l);
        }
        if let Some(d) = &self.domain {
            for (i, l) in d.layers.iter().enumerate() {
                push("domain", i, l);
            }
        }
        out
    }

    /// All persistent tensors: trainable parameters plus batchnorm running
    /// statistics, with stable names. This is the checkpoint payload order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let trunk = self.layers.iter().enumerate().map(|(i, l)| ("layer", i, l));
        let domain = self
            .domain
            .iter()
            .flat_map(|d| d.layers.iter().enumerate().map(|(i, l)| ("domain", i, l)));
        for (prefix, i, l) in trunk.chain(domain) {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("{prefix}{i}.kernels"), &c.kernels));
                    out.push((format!("{prefix}{i}.bias"), &c.bias));
                }
                Layer::Fc(f) => {
                    out.push((format!("{prefix}{i}.weights"), &f.weights));
                    out.push((format!("{prefix}{i}.bias"), &f.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{prefix}{i}.gamma"), &b.gamma));
                    out.push((format!("{prefix}{i}.beta"), &b.beta));
                    out.push((format!("{prefix}{i}.running_mean"), &b.running_mean));
                    out.push((format!("{prefix}{i}.running_var"), &b.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub(super) fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let domain_layers = self.domain.iter_mut().flat_map(|d| {
            d.layers
                .iter_mut()
                .enumerate()
                .map(|(i, l)| ("domain", i, l))
        });
        for (prefix, i, l) in self
            .layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| ("layer", i, l))
            .chain(domain_layers)
        {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("{prefix}{i}.kernels"), &mut c.kernels));
                    out.push((format!("{prefix}{i}.bias"), &mut c.bias));
                }
                Layer::Fc(f) => {
                    out.push((format!("{prefix}{i}.weights"), &mut f.weights));
                    out.push((format!("{prefix}{i}.bias"), &mut f.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{prefix}{i}.gamma"), &mut b.gamma));
                    out.push((format!("{prefix}{i}.beta"), &mut b.beta));
                    out.push((format!("{prefix}{i}.running_mean"), &mut b.running_mean));
                    out.push((format!("{prefix}{i}.running_var"), &mut b.running_var));
                }
                _ => {}
            }
        }
        out
    }

    fn check_batch_input(&self, x: &Tensor) -> Result<usize, NeuralError> {
        let expected = self.shapes[0];
        let xs = x.shape();
        let ok = match expected {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => xs.len() == 4 && xs[1] == channels && xs[2] == height && xs[3] == width,
            FeatureShape::Flat { features } => xs.len() == 2 && xs[1] == features,
        };
        if !ok {
            return Err(NeuralError::Shape(format!(
                "batch input {xs:?} does not match network input {expected:?}"
            )));
        }
        Ok(xs[0])
    }

    /// Inference-mode forward over a batch: batchnorm uses running stats,
    /// and the domain head is not evaluated. A zero-layer network is the
    /// identity map.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NeuralError> {
        self.check_batch_input(x)?;
        let pass = stack_forward(&self.layers, &self.shapes, x, BnMode::Eval)?;
        Ok(pass.activations.into_iter().last().expect("output"))
    }

    /// Training-mode forward: batchnorm uses batch statistics, every
    /// intermediate is cached for the backward pass, and the domain head (if
    /// attached) runs from the flatten boundary. Running-statistic updates
    /// are reported in the pass, not applied; the caller decides when to
    /// fold them in.
    pub fn forward_train(&self, x: &Tensor) -> Result<ForwardPass, NeuralError> {
        self.check_batch_input(x)?;
        let trunk = stack_forward(&self.layers, &self.shapes, x, BnMode::Train)?;
        let domain = match &self.domain {
            Some(head) => Some(stack_forward(
                &head.layers,
                &head.shapes,
                &trunk.activations[head.branch],
                BnMode::Train,
            )?),
            None => None,
        };
        let bn_updates = trunk.bn_updates.clone();
        Ok(ForwardPass {
            trunk,
            domain,
            bn_updates,
        })
    }

    /// Backpropagate through the stack. `grad_out` is the loss gradient at
    /// the trunk output; `domain_grad`, when given, is the loss gradient at
    /// the domain head output and must come with a pass that ran the head.
    /// Returns parameter gradients aligned with [`Self::param_tensors`].
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_out: &Tensor,
        domain_grad: Option<&Tensor>,
    ) -> Result<Gradients, NeuralError> {
        let mut trunk_grads: Vec<Tensor> = Vec::new();
        let mut domain_grads: Vec<Tensor> = Vec::new();

        // Domain head first: its input gradient joins the trunk at the
        // branch boundary. Without a domain gradient the head's parameters
        // still get (zero) gradient slots so the parameter alignment with
        // `param_tensors` holds.
        let mut inject: Option<(usize, Tensor)> = None;
        match (domain_grad, &self.domain) {
            (Some(dg), Some(head)) => {
                let dpass = pass.domain.as_ref().ok_or_else(|| {
                    NeuralError::Config("forward pass did not run the domain head".into())
                })?;
                let (grads, grad_in) = stack_backward(&head.layers, &head.shapes, dpass, dg)?;
                domain_grads = grads;
                inject = Some((head.branch, grad_in));
            }
            (Some(_), None) => {
                return Err(NeuralError::Config(
                    "domain gradient supplied but no domain head attached".into(),
                ));
            }
            (None, Some(head)) => {
                for l in &head.layers {
                    match l {
                        Layer::Conv(c) => {
                            domain_grads.push(Tensor::zeros(c.kernels.shape()));
                            domain_grads.push(Tensor::zeros(c.bias.shape()));
                        }
                        Layer::Fc(f) => {
                            domain_grads.push(Tensor::zeros(f.weights.shape()));
                            domain_grads.push(Tensor::zeros(f.bias.shape()));
                        }
                        Layer::BatchNorm(b) => {
                            domain_grads.push(Tensor::zeros(b.gamma.shape()));
                            domain_grads.push(Tensor::zeros(b.beta.shape()));
                        }
                        _ => {}
                    }
                }
            }
            (None, None) => {}
        }

        let mut grad = grad_out.clone();
        if let Some((branch, g)) = &inject {
            if *branch == self.layers.len() {
                grad = grad.add(g)?;
                inject = None;
            }
        }
        let mut rev_grads: Vec<Tensor> = Vec::new();
        for i in (0..self.layers.len()).rev() {
            if let Some((branch, g)) = &inject {
                if *branch == i + 1 {
                    grad = grad.add(g)?;
                }
            }
            let (grad_in, mut param_grads) = layer_backward(
                &self.layers[i],
                self.trunk_boundary(pass, i),
                &pass.trunk.caches[i],
                &grad,
                self.shapes[i],
            )?;
            param_grads.reverse();
            rev_grads.extend(param_grads);
            grad = grad_in;
        }
        rev_grads.reverse();
        trunk_grads.extend(rev_grads);
        trunk_grads.extend(domain_grads);
        Ok(Gradients {
            by_param: trunk_grads,
        })
    }

    fn trunk_boundary<'a>(&self, pass: &'a ForwardPass, i: usize) -> &'a Tensor {
        // Borrow helper so backward reads the layer input naturally.
        &pass.trunk.activations[i]
    }

    /// Fold reported batch statistics into the running averages:
    /// running = (1 - momentum) * running + momentum * batch_stat.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BnStats)]) {
        for (idx, stats) in updates {
            if let Layer::BatchNorm(bn) = &mut self.layers[*idx] {
                let mom = bn.momentum;
                bn.running_mean = bn
                    .running_mean
                    .zip_map(
                        &Tensor::new(bn.running_mean.shape(), stats.mean.clone()).expect("shape"),
                        |r, b| (1.0 - mom) * r + mom * b,
                    )
                    .expect("same shape");
                bn.running_var = bn
                    .running_var
                    .zip_map(
                        &Tensor::new(bn.running_var.shape(), stats.var.clone()).expect("shape"),
                        |r, b| (1.0 - mom) * r + mom * b,
                    )
                    .expect("same shape");
            }
        }
    }

    /// Distance of the forward pass from the nearest non-differentiable
    /// kink: the smallest |input| over every ReLU and the smallest winning
    /// margin over every maxpool window (infinity when the network has
    /// neither). Finite-difference checks should resample inputs whose
    /// margin is below the probe step.
    ///
    /// Maxpool windows whose maximum is exactly 0 are skipped: after a ReLU
    /// they are all-dead plateaus where the function is locally constant,
    /// and the ReLU margin already guarantees no element can cross back
    /// above zero under a small perturbation.
    pub fn kink_margin(&self, x: &Tensor) -> Result<f64, NeuralError> {
        let pass = self.forward_train(x)?;
        let mut margin = f64::INFINITY;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &pass.trunk.activations[i];
            match layer {
                Layer::Relu => {
                    for &v in input.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Layer::MaxPool => {
                    let FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } = self.shapes[i]
                    else {
                        continue;
                    };
                    let batch = input.shape()[0];
                    let sample = channels * height * width;
                    for b in 0..batch {
                        let row = &input.data()[b * sample..(b + 1) * sample];
                        for c in 0..channels {
                            for oy in 0..height / 2 {
                                for ox in 0..width / 2 {
                                    let mut vals = [0.0f64; 4];
                                    for wy in 0..2 {
                                        for wx in 0..2 {
                                            vals[wy * 2 + wx] = row
                                                [(c * height + oy * 2 + wy) * width + ox * 2 + wx];
                                        }
                                    }
                                    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                                    if vals[0] != 0.0 {
                                        margin = margin.min(vals[0] - vals[1]);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(margin)
    }

    /// Name of the first trunk layer whose output contains a non-finite
    /// value in the given pass, for numeric-failure diagnostics.
    fn first_non_finite_layer(&self, pass: &ForwardPass) -> Option<String> {
        for (i, act) in pass.trunk.activations.iter().enumerate().skip(1) {
            if act.data().iter().any(|v| !v.is_finite()) {
                return Some(format!(
                    "layer {} ({})",
                    i - 1,
                    self.layers[i - 1].kind_name()
                ));
            }
        }
        None
    }
}

fn stack_forward(
    layers: &[Layer],
    shapes: &[FeatureShape],
    x: &Tensor,
    mode: BnMode,
) -> Result<StackPass, NeuralError> {
    let batch = x.shape()[0];
    let mut activations = vec![x.clone()];
    let mut caches = Vec::with_capacity(layers.len());
    let mut bn_updates = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let input = activations.last().expect("input activation");
        let out_shape = shapes[i + 1];
        let (out, cache) = match layer {
            Layer::Conv(conv) => {
                let (cin, h, w) = match shapes[i] {
                    FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } => (channels, height, width),
                    _ => unreachable!("validated at build"),
                };
                let (cout, oh, ow) = match out_shape {
                    FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } => (channels, height, width),
                    _ => unreachable!("validated at build"),
                };
                let in_len = cin * h * w;
                let out_len = cout * oh * ow;
                let mut data = vec![0.0; batch * out_len];
                for b in 0..batch {
                    conv_forward_into(
                        &input.data()[b * in_len..(b + 1) * in_len],
                        (cin, h, w),
                        conv.kernels.data(),
                        conv.bias.data(),
                        (cout, conv.kernel_size(), conv.stride, conv.pad),
                        (oh, ow),
                        &mut data[b * out_len..(b + 1) * out_len],
                    );
                }
                (
                    Tensor::new(&out_shape.batch_shape(batch), data)?,
                    LayerCache::None,
                )
            }
            Layer::Relu => (
                input.map(|v| if v > 0.0 { v } else { 0.0 }),
                LayerCache::None,
            ),
            Layer::MaxPool => {
                let in_len = shapes[i].sample_len();
                let sample_shape = match shapes[i] {
                    FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } => [channels, height, width],
                    _ => unreachable!("validated at build"),
                };
                let mut data = Vec::with_capacity(batch * out_shape.sample_len());
                let mut indices = Vec::with_capacity(batch * out_shape.sample_len());
                for b in 0..batch {
                    let row = Tensor::new(
                        &sample_shape,
                        input.data()[b * in_len..(b + 1) * in_len].to_vec(),
                    )?;
                    let (out, argmax) = maxpool_forward(&row)?;
                    data.extend_from_slice(out.data());
                    indices.extend(argmax.into_iter().map(|idx| idx + b * in_len));
                }
                (
                    Tensor::new(&out_shape.batch_shape(batch), data)?,
                    LayerCache::Pool(indices),
                )
            }
            Layer::AvgPool => {
                let in_len = shapes[i].sample_len();
                let sample_shape = match shapes[i] {
                    FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } => [channels, height, width],
                    _ => unreachable!("validated at build"),
                };
                let mut data = Vec::with_capacity(batch * out_shape.sample_len());
                for b in 0..batch {
                    let row = Tensor::new(
                        &sample_shape,
                        input.data()[b * in_len..(b + 1) * in_len].to_vec(),
                    )?;
                    data.extend_from_slice(avgpool_forward(&row)?.data());
                }
                (
                    Tensor::new(&out_shape.batch_shape(batch), data)?,
                    LayerCache::None,
                )
            }
            Layer::Flatten => (
                input.reshape(&out_shape.batch_shape(batch))?,
                LayerCache::None,
            ),
            Layer::Fc(fc) => {
                let (d_in, d_out) = (fc.d_in(), fc.d_out());
                let mut data = vec![0.0; batch * d_out];
                for b in 0..batch {
                    fc_forward_into(
                        &input.data()[b * d_in..(b + 1) * d_in],
                        fc.weights.data(),
                        fc.bias.data(),
                        d_out,
                        d_in,
                        &mut data[b * d_out..(b + 1) * d_out],
                    );
                }
                (
                    Tensor::new(&out_shape.batch_shape(batch), data)?,
                    LayerCache::None,
                )
            }
            Layer::BatchNorm(bn) => {
                let (out, cache, stats) = batchnorm_forward(input, bn, mode)?;
                if let Some(stats) = stats {
                    bn_updates.push((i, stats));
                }
                (out, cache.map(LayerCache::Bn).unwrap_or(LayerCache::None))
            }
            Layer::GradReversal { .. } => (input.clone(), LayerCache::None),
            Layer::SoftmaxHead => {
                let features = out_shape.sample_len();
                let mut data = Vec::with_capacity(batch * features);
                for b in 0..batch {
                    let row = Tensor::new(
                        &[features],
                        input.data()[b * features..(b + 1) * features].to_vec(),
                    )?;
                    data.extend_from_slice(softmax(&row)?.data());
                }
                let out = Tensor::new(&out_shape.batch_shape(batch), data)?;
                (out.clone(), LayerCache::Probs(out))
            }
            Layer::LinearHead => (input.clone(), LayerCache::None),
        };
        activations.push(out);
        caches.push(cache);
    }
    Ok(StackPass {
        activations,
        caches,
        bn_updates,
    })
}

fn layer_backward(
    layer: &Layer,
    input: &Tensor,
    cache: &LayerCache,
    grad: &Tensor,
    in_shape: FeatureShape,
) -> Result<(Tensor, Vec<Tensor>), NeuralError> {
    let batch = input.shape()[0];
    match layer {
        Layer::Conv(conv) => {
            let (cin, h, w) = match in_shape {
                FeatureShape::Spatial {
                    channels,
                    height,
                    width,
                } => (channels, height, width),
                _ => unreachable!("validated at build"),
            };
            let in_len = cin * h * w;
            let gs = grad.shape();
            let (cout, oh, ow) = (gs[1], gs[2], gs[3]);
            let out_len = cout * oh * ow;
            let mut grad_x = vec![0.0; input.len()];
            let mut grad_k = vec![0.0; conv.kernels.len()];
            let mut grad_b = vec![0.0; conv.bias.len()];
            for b in 0..batch {
                conv_backward_into(
                    &input.data()[b * in_len..(b + 1) * in_len],
                    (cin, h, w),
                    conv.kernels.data(),
                    (cout, conv.kernel_size(), conv.stride, conv.pad),
                    (oh, ow),
                    &grad.data()[b * out_len..(b + 1) * out_len],
                    &mut grad_x[b * in_len..(b + 1) * in_len],
                    &mut grad_k,
                    &mut grad_b,
                );
            }
            Ok((
                Tensor::new(input.shape(), grad_x)?,
                vec![
                    Tensor::new(conv.kernels.shape(), grad_k)?,
                    Tensor::new(conv.bias.shape(), grad_b)?,
                ],
            ))
        }
        Layer::Relu => Ok((relu_backward(input, grad)?, vec![])),
        Layer::MaxPool => {
            let LayerCache::Pool(indices) = cache else {
                return Err(NeuralError::Config("maxpool cache missing".into()));
            };
            let mut grad_x = vec![0.0; input.len()];
            for (&idx, &g) in indices.iter().zip(grad.data()) {
                grad_x[idx] += g;
            }
            Ok((Tensor::new(input.shape(), grad_x)?, vec![]))
        }
        Layer::AvgPool => {
            let mut grad_x = vec![0.0; input.len()];
            let gs = grad.shape();
            let (c, oh, ow) = (gs[1], gs[2], gs[3]);
            let (h, w) = (oh * 2, ow * 2);
            for b in 0..batch {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad.get(&[b, ci, oy, ox]) * 0.25;
                            let base = ((b * c + ci) * h + oy * 2) * w + ox * 2;
                            grad_x[base] += g;
                            grad_x[base + 1] += g;
                            grad_x[base + w] += g;
                            grad_x[base + w + 1] += g;
                        }
                    }
                }
            }
            Ok((Tensor::new(input.shape(), grad_x)?, vec![]))
        }
        Layer::Flatten => Ok((grad.reshape(input.shape())?, vec![])),
        Layer::Fc(fc) => {
            let (d_in, d_out) = (fc.d_in(), fc.d_out());
            let mut grad_x = vec![0.0; batch * d_in];
            let mut grad_w = vec![0.0; d_out * d_in];
            let mut grad_b = vec![0.0; d_out];
            for b in 0..batch {
                let xrow = &input.data()[b * d_in..(b + 1) * d_in];
                let grow = &grad.data()[b * d_out..(b + 1) * d_out];
                for o in 0..d_out {
                    let g = grow[o];
                    if g == 0.0 {
                        continue;
                    }
                    grad_b[o] += g;
                    let wrow = &fc.weights.data()[o * d_in..(o + 1) * d_in];
                    let gxrow = &mut grad_x[b * d_in..(b + 1) * d_in];
                    let gwrow = &mut grad_w[o * d_in..(o + 1) * d_in];
                    for i in 0..d_in {
                        gxrow[i] += g * wrow[i];
                        gwrow[i] += g * xrow[i];
                    }
                }
            }
            Ok((
                Tensor::new(input.shape(), grad_x)?,
                vec![
                    Tensor::new(fc.weights.shape(), grad_w)?,
                    Tensor::new(fc.bias.shape(), grad_b)?,
                ],
            ))
        }
        Layer::BatchNorm(bn) => {
            let LayerCache::Bn(bncache) = cache else {
                return Err(NeuralError::Config("batchnorm cache missing".into()));
            };
            let (gx, gg, gb) = batchnorm_backward(bn, input.shape(), bncache, grad)?;
            Ok((gx, vec![gg, gb]))
        }
        Layer::GradReversal { lambda } => Ok((grad_reversal_backward(grad, *lambda), vec![])),
        Layer::SoftmaxHead => {
            let LayerCache::Probs(probs) = cache else {
                return Err(NeuralError::Config("softmax cache missing".into()));
            };
            let features = probs.shape()[1];
            let mut grad_x = Vec::with_capacity(probs.len());
            for b in 0..batch {
                let p = Tensor::new(
                    &[features],
                    probs.data()[b * features..(b + 1) * features].to_vec(),
                )?;
                let g = Tensor::new(
                    &[features],
                    grad.data()[b * features..(b + 1) * features].to_vec(),
                )?;
                grad_x.extend_from_slice(softmax_backward(&p, &g)?.data());
            }
            Ok((Tensor::new(input.shape(), grad_x)?, vec![]))
        }
        Layer::LinearHead => Ok((grad.clone(), vec![])),
    }
}

fn stack_backward(
    layers: &[Layer],
    shapes: &[FeatureShape],
    pass: &StackPass,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, Tensor), NeuralError> {
    let mut grad = grad_out.clone();
    let mut rev: Vec<Tensor> = Vec::new();
    for i in (0..layers.len()).rev() {
        let (grad_in, mut params) = layer_backward(
            &layers[i],
            &pass.activations[i],
            &pass.caches[i],
            &grad,
            shapes[i],
        )?;
        params.reverse();
        rev.extend(params);
        grad = grad_in;
    }
    rev.reverse();
    Ok((rev, grad))
}

// ---------------------------------------------------------------------------
// Batches and the training loop
// ---------------------------------------------------------------------------

/// One training batch: inputs `[B, C, H, W]`, regression targets `[B, k]`
/// scaled into [0, 1], and optionally a domain label per sample (0 =
/// labeled pool, 1 = unlabeled pool; rows from the unlabeled pool carry
/// zero targets and are excluded from the task loss).
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub domain_labels: Option<Tensor>,
}

impl Batch {
    pub fn new(
        inputs: Tensor,
        targets: Tensor,
        domain_labels: Option<Tensor>,
    ) -> Result<Self, NeuralError> {
        if inputs.rank() != 4 {
            return Err(NeuralError::Shape(format!(
                "batch inputs must be [B, C, H, W], got {:?}",
                inputs.shape()
            )));
        }
        let b = inputs.shape()[0];
        if targets.rank() != 2 || targets.shape()[0] != b {
            return Err(NeuralError::Shape(format!(
                "batch targets must be [{b}, k], got {:?}",
                targets.shape()
            )));
        }
        if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(NeuralError::Config(
                "batch targets must lie in [0, 1]".into(),
            ));
        }
        if let Some(d) = &domain_labels {
            if d.rank() != 1 || d.shape()[0] != b {
                return Err(NeuralError::Shape(format!(
                    "domain labels must be [{b}], got {:?}",
                    d.shape()
                )));
            }
            if d.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(NeuralError::Config("domain labels must be 0 or 1".into()));
            }
        }
        Ok(Batch {
            inputs,
            targets,
            domain_labels,
        })
    }

    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Task loss (MSE over labeled rows) and its gradient at the trunk output.
fn task_loss_and_grad(
    output: &Tensor,
    targets: &Tensor,
    domain_labels: Option<&Tensor>,
) -> Result<(f64, Tensor), NeuralError> {
    if output.shape() != targets.shape() {
        return Err(NeuralError::Shape(format!(
            "network output {:?} does not match targets {:?}",
            output.shape(),
            targets.shape()
        )));
    }
    match domain_labels {
        None => Ok((loss_mse(targets, output)?, mse_grad(targets, output)?)),
        Some(labels) => {
            let (b, k) = (output.shape()[0], output.shape()[1]);
            let labeled: Vec<usize> = (0..b).filter(|&i| labels.data()[i] == 0.0).collect();
            if labeled.is_empty() {
                return Ok((0.0, Tensor::zeros(output.shape())));
            }
            let n = (labeled.len() * k) as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; output.len()];
            for &row in &labeled {
                for j in 0..k {
                    let idx = row * k + j;
                    let d = output.data()[idx] - targets.data()[idx];
                    loss += d * d;
                    grad[idx] = 2.0 * d / n;
                }
            }
            Ok((loss / n, Tensor::new(output.shape(), grad)?))
        }
    }
}

/// Domain loss (mean binary cross-entropy over the softmax head output) and
/// its gradient at the head output, already scaled by lambda.
fn domain_loss_and_grad(
    probs: &Tensor,
    labels: &Tensor,
    lambda: f64,
) -> Result<(f64, Tensor), NeuralError> {
    let b = probs.shape()[0];
    let classes = probs.shape()[1];
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for row in 0..b {
        let mut one_hot = vec![0.0; classes];
        one_hot[labels.data()[row] as usize] = 1.0;
        let y = Tensor::new(&[classes], one_hot)?;
        let p = Tensor::new(
            &[classes],
            probs.data()[row * classes..(row + 1) * classes].to_vec(),
        )?;
        loss += loss_ce_classification(&p, &y)?;
        let g = ce_classification_grad(&p, &y)?;
        for (j, &gv) in g.data().iter().enumerate() {
            grad[row * classes + j] = lambda * gv / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(probs.shape(), grad)?))
}

/// Run one epoch: for every batch, forward, loss, backpropagation, and a
/// parameter update at learning rate `lr`. Returns the epoch-mean losses.
/// `lambda` weights the domain loss; it only takes effect when the network
/// has a domain head and the batches carry domain labels.
pub fn train_epoch(
    net: &mut Network,
    batches: &[Batch],
    optim: &mut OptimState,
    lr: f64,
    lambda: f64,
) -> Result<LossReport, NeuralError> {
    if batches.is_empty() {
        return Err(NeuralError::Config(
            "train_epoch got an empty batch set".into(),
        ));
    }
    let mut task_sum = 0.0;
    let mut domain_sum = 0.0;
    for batch in batches {
        let pass = net.forward_train(&batch.inputs)?;
        let (task, task_grad) =
            task_loss_and_grad(pass.output(), &batch.targets, batch.domain_labels.as_ref())?;

        let mut domain = 0.0;
        let mut domain_grad: Option<Tensor> = None;
        if lambda > 0.0 && net.has_domain_head() {
            if let (Some(labels), Some(probs)) = (&batch.domain_labels, pass.domain_output()) {
                let (d, g) = domain_loss_and_grad(probs, labels, lambda)?;
                domain = d;
                domain_grad = Some(g);
            }
        }

        let combined = task + lambda * domain;
        if !combined.is_finite() {
            let location = net
                .first_non_finite_layer(&pass)
                .unwrap_or_else(|| "loss".into());
            return Err(NeuralError::Numeric {
                location,
                detail: format!("loss became non-finite (task {task}, domain {domain})"),
            });
        }

        let grads = net.backward(&pass, &task_grad, domain_grad.as_ref())?;
        let updates = pass.bn_updates;
        let mut params = net.param_tensors_mut();
        optim.apply(&mut params, &grads.by_param, lr)?;
        net.apply_bn_updates(&updates);

        task_sum += task;
        domain_sum += domain;
    }
    let n = batches.len() as f64;
    Ok(loss_combined(task_sum / n, domain_sum / n, lambda))
}
