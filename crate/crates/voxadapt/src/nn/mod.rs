//! Network construction and forward passes.
//!
//! Architectures are written in a compact layer notation: `C(k,s)` is a
//! stride-2 convolution with k kernels of size s, `DC(k,s)` its transposed
//! counterpart, `FC(k)` a dense layer of width k, and a `3D` marker selects
//! the rank-3 kinds. A parsed layer list plus input/output shapes builds a
//! [`NetworkPlan`] whose shapes are validated end to end, initialized into
//! a [`ParameterSet`], and executed on a [`Tape`] through [`NetSession`].
//!
//! Every hidden layer is batch-normalized and leaky-relu activated; the
//! output layer skips batch norm and squashes through a sigmoid so images
//! and voxel grids live in [0, 1].

pub mod checkpoint;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::rng;
use crate::tensor::params::{GradientMap, ParameterSet};
use crate::tensor::tape::{Gradients, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

use rand::Rng;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot parse layer token {token:?}: {reason}")]
    Parse { token: String, reason: String },
    #[error("layer {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One layer of the notation. Convolutions carry kernel size and stride;
/// dense layers only a width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        width: usize,
        size: usize,
        stride: usize,
        rank3: bool,
    },
    Deconv {
        width: usize,
        size: usize,
        stride: usize,
        rank3: bool,
    },
    Dense {
        width: usize,
    },
}

impl LayerSpec {
    pub fn conv(width: usize, size: usize) -> Self {
        LayerSpec::Conv {
            width,
            size,
            stride: 2,
            rank3: false,
        }
    }

    pub fn deconv(width: usize, size: usize) -> Self {
        LayerSpec::Deconv {
            width,
            size,
            stride: 2,
            rank3: false,
        }
    }

    pub fn conv3d(width: usize, size: usize) -> Self {
        LayerSpec::Conv {
            width,
            size,
            stride: 2,
            rank3: true,
        }
    }

    pub fn deconv3d(width: usize, size: usize) -> Self {
        LayerSpec::Deconv {
            width,
            size,
            stride: 2,
            rank3: true,
        }
    }

    pub fn dense(width: usize) -> Self {
        LayerSpec::Dense { width }
    }

    pub fn width(&self) -> usize {
        match self {
            LayerSpec::Conv { width, .. }
            | LayerSpec::Deconv { width, .. }
            | LayerSpec::Dense { width } => *width,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                width,
                size,
                rank3,
                ..
            } => write!(f, "C{}({width},{size})", if *rank3 { "3D" } else { "" }),
            LayerSpec::Deconv {
                width,
                size,
                rank3,
                ..
            } => write!(f, "DC{}({width},{size})", if *rank3 { "3D" } else { "" }),
            LayerSpec::Dense { width } => write!(f, "FC({width})"),
        }
    }
}

/// Renders a layer list back to its dash-joined textual form.
pub fn format_layer_specs(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Parses dash-separated layer tokens. Layer indices after C/DC/FC are
/// accepted and ignored; `^{3D}`, `^3D`, `_3D`, and a bare `3D` suffix all
/// mark rank-3 kinds. Strides default to 2.
pub fn parse_layer_specs(text: &str) -> Result<Vec<LayerSpec>, NetError> {
    let mut specs = Vec::new();
    for raw in text.split('-') {
        let token: String = raw.chars().filter(|c| !c.is_whitespace() && *c != '$').collect();
        if token.is_empty() {
            return Err(NetError::Parse {
                token: raw.to_string(),
                reason: "empty token".into(),
            });
        }
        specs.push(parse_token(&token)?);
    }
    Ok(specs)
}

fn parse_token(token: &str) -> Result<LayerSpec, NetError> {
    let err = |reason: &str| NetError::Parse {
        token: token.to_string(),
        reason: reason.into(),
    };
    let open = token.find('(').ok_or_else(|| err("missing '('"))?;
    if !token.ends_with(')') {
        return Err(err("missing ')'"));
    }
    let head = &token[..open];
    let args: Vec<&str> = token[open + 1..token.len() - 1].split(',').collect();
    let (kind, mut rest) = if let Some(r) = head.strip_prefix("DC") {
        ("DC", r)
    } else if let Some(r) = head.strip_prefix("FC") {
        ("FC", r)
    } else if let Some(r) = head.strip_prefix('C') {
        ("C", r)
    } else {
        return Err(err("expected C, DC, or FC"));
    };
    let mut rank3 = false;
    for marker in ["^{3D}", "^3D", "_3D", "3D"] {
        if let Some(r) = rest.strip_suffix(marker) {
            rank3 = true;
            rest = r;
            break;
        }
    }
    if !rest.is_empty() && !rest.chars().all(|c| c.is_ascii_digit()) {
        return Err(err("unrecognized text between kind and '('"));
    }
    let parse_arg = |s: &str| -> Result<usize, NetError> {
        let v: usize = s.parse().map_err(|_| err("argument is not an integer"))?;
        if v == 0 {
            return Err(err("argument must be positive"));
        }
        Ok(v)
    };
    match kind {
        "FC" => {
            if rank3 {
                return Err(err("dense layers have no 3D form"));
            }
            if args.len() != 1 {
                return Err(err("dense layers take exactly one argument (width)"));
            }
            Ok(LayerSpec::dense(parse_arg(args[0])?))
        }
        _ => {
            if args.len() != 2 {
                return Err(err("conv layers take exactly (kernels, size)"));
            }
            let width = parse_arg(args[0])?;
            let size = parse_arg(args[1])?;
            Ok(match (kind, rank3) {
                ("C", false) => LayerSpec::conv(width, size),
                ("C", true) => LayerSpec::conv3d(width, size),
                ("DC", false) => LayerSpec::deconv(width, size),
                (_, true) => LayerSpec::deconv3d(width, size),
                _ => LayerSpec::deconv(width, size),
            })
        }
    }
}

/// Full description of one network: layer lists plus the shapes and
/// hyperparameters needed to build and run it. Shapes are per item,
/// without the batch axis.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub latent: usize,
    pub output_shape: Vec<usize>,
    pub slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl NetworkConfig {
    fn new(
        name: &str,
        input_shape: Vec<usize>,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
        latent: usize,
        output_shape: Vec<usize>,
    ) -> Self {
        NetworkConfig {
            name: name.to_string(),
            input_shape,
            encoder,
            decoder,
            latent,
            output_shape,
            slope: 0.2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

/// A shape-checked layer ready to execute.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub name: String,
    pub spec: LayerSpec,
    /// Per-item shape fed to the layer op, after any reshape.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Per-item shape to reshape the incoming tensor to first.
    pub reshape_to: Option<Vec<usize>>,
    pub batch_norm: bool,
    pub sigmoid_out: bool,
}

impl LayerPlan {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let width = self.spec.width();
        match &self.spec {
            LayerSpec::Dense { .. } => {
                out.push((
                    format!("{}.weights", self.name),
                    vec![self.in_shape[0], width],
                    true,
                ));
            }
            LayerSpec::Conv { size, rank3, .. } => {
                let mut shape = vec![*size; if *rank3 { 3 } else { 2 }];
                shape.push(*self.in_shape.last().unwrap());
                shape.push(width);
                out.push((format!("{}.kernels", self.name), shape, true));
            }
            LayerSpec::Deconv { size, rank3, .. } => {
                let mut shape = vec![*size; if *rank3 { 3 } else { 2 }];
                shape.push(width);
                shape.push(*self.in_shape.last().unwrap());
                out.push((format!("{}.kernels", self.name), shape, true));
            }
        }
        out.push((format!("{}.bias", self.name), vec![width], true));
        if self.batch_norm {
            out.push((format!("{}.bn.scale", self.name), vec![width], true));
            out.push((format!("{}.bn.shift", self.name), vec![width], true));
            out.push((format!("{}.bn.mean", self.name), vec![width], false));
            out.push((format!("{}.bn.var", self.name), vec![width], false));
        }
        out
    }

    fn fans(&self) -> (usize, usize) {
        match &self.spec {
            LayerSpec::Dense { width } => (self.in_shape[0], *width),
            LayerSpec::Conv {
                width, size, rank3, ..
            }
            | LayerSpec::Deconv {
                width, size, rank3, ..
            } => {
                let field = size.pow(if *rank3 { 3 } else { 2 });
                (field * self.in_shape.last().unwrap(), field * width)
            }
        }
    }
}

/// Shape-validated network: encoder layers, then decoder layers.
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub config: NetworkConfig,
    pub layers: Vec<LayerPlan>,
    /// Number of encoder layers; `layers[..split]` encode, the rest decode.
    split: usize,
}

impl NetworkPlan {
    /// Validates the whole chain and records every layer's shapes.
    /// Errors name the offending layer.
    pub fn build(config: NetworkConfig) -> Result<Self, NetError> {
        let mut layers = Vec::new();
        let mut cur = config.input_shape.clone();
        let n_enc = config.encoder.len();
        let n_dec = config.decoder.len();
        if n_dec == 0 {
            return Err(NetError::Shape {
                layer: "decoder".into(),
                detail: "at least one decoder layer is required".into(),
            });
        }
        for (i, spec) in config.encoder.iter().enumerate() {
            let name = format!("enc{i}");
            let lp = plan_layer(spec, &name, &cur, false, None)?;
            cur = lp.out_shape.clone();
            layers.push(lp);
        }
        if n_enc > 0 {
            if cur != [config.latent] {
                return Err(NetError::Shape {
                    layer: format!("enc{}", n_enc - 1),
                    detail: format!(
                        "encoder must end in a dense layer of latent width {}, got shape {cur:?}",
                        config.latent
                    ),
                });
            }
        } else if cur != [config.latent] {
            return Err(NetError::Shape {
                layer: "input".into(),
                detail: format!(
                    "a decoder-only network must take the latent shape [{}], got {cur:?}",
                    config.latent
                ),
            });
        }
        let deconv_base = decoder_base_shape(&config)?;
        for (i, spec) in config.decoder.iter().enumerate() {
            let name = format!("dec{i}");
            let reshape = match spec {
                LayerSpec::Deconv { .. }
                    if matches!(
                        config.decoder.get(i.wrapping_sub(1)),
                        Some(LayerSpec::Dense { .. })
                    ) || i == 0 =>
                {
                    Some(deconv_base.clone())
                }
                _ => None,
            };
            let sigmoid_out = i == n_dec - 1;
            let lp = plan_layer(spec, &name, &cur, sigmoid_out, reshape)?;
            cur = lp.out_shape.clone();
            layers.push(lp);
        }
        if cur != config.output_shape {
            return Err(NetError::Shape {
                layer: format!("dec{}", n_dec - 1),
                detail: format!(
                    "decoder produces {cur:?}, config declares output {:?}",
                    config.output_shape
                ),
            });
        }
        Ok(NetworkPlan {
            split: n_enc,
            config,
            layers,
        })
    }

    pub fn encoder_layers(&self) -> &[LayerPlan] {
        &self.layers[..self.split]
    }

    pub fn decoder_layers(&self) -> &[LayerPlan] {
        &self.layers[self.split..]
    }

    /// Glorot-uniform kernels/weights, zero biases, identity batch norm.
    /// Identical seeds produce identical sets.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = rng::derive_rng(seed, 0, 0);
        let mut params = ParameterSet::new();
        for lp in &self.layers {
            let (fan_in, fan_out) = lp.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for (name, shape, trainable) in lp.param_shapes() {
                let tensor = if name.ends_with(".kernels") || name.ends_with(".weights") {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    Tensor::new(shape, data).expect("finite init")
                } else if name.ends_with(".bn.scale") || name.ends_with(".bn.var") {
                    Tensor::filled(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                params
                    .push(name, tensor, trainable)
                    .expect("plan names are unique");
            }
        }
        params
    }

    /// Trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|lp| lp.param_shapes())
            .filter(|(_, _, trainable)| *trainable)
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

/// Per-item shape entering the first transposed layer of the decoder.
fn decoder_base_shape(config: &NetworkConfig) -> Result<Vec<usize>, NetError> {
    let first_deconv = config
        .decoder
        .iter()
        .position(|s| matches!(s, LayerSpec::Deconv { .. }));
    let Some(start) = first_deconv else {
        return Ok(Vec::new());
    };
    let mut upsample = 1usize;
    for (i, spec) in config.decoder[start..].iter().enumerate() {
        match spec {
            LayerSpec::Deconv { stride, .. } => upsample *= stride,
            _ => {
                return Err(NetError::Shape {
                    layer: format!("dec{}", start + i),
                    detail: "only transposed layers may follow the first transposed layer".into(),
                })
            }
        }
    }
    let spatial: Vec<usize> = config.output_shape[..config.output_shape.len() - 1]
        .iter()
        .enumerate()
        .map(|(d, &extent)| {
            if extent % upsample == 0 {
                Ok(extent / upsample)
            } else {
                Err(NetError::Shape {
                    layer: format!("dec{start}"),
                    detail: format!(
                        "output extent {extent} (axis {d}) is not divisible by total upsampling {upsample}"
                    ),
                })
            }
        })
        .collect::<Result<_, _>>()?;
    let width_before: usize = if start == 0 {
        config.latent
    } else {
        config.decoder[start - 1].width()
    };
    let base: usize = spatial.iter().product();
    if base == 0 || !width_before.is_multiple_of(base) {
        return Err(NetError::Shape {
            layer: format!("dec{start}"),
            detail: format!(
                "cannot fold width {width_before} into base spatial shape {spatial:?}"
            ),
        });
    }
    let mut shape = spatial;
    shape.push(width_before / shape.iter().product::<usize>());
    Ok(shape)
}

fn plan_layer(
    spec: &LayerSpec,
    name: &str,
    incoming: &[usize],
    sigmoid_out: bool,
    reshape_to: Option<Vec<usize>>,
) -> Result<LayerPlan, NetError> {
    let mut in_shape = incoming.to_vec();
    let mut reshape = reshape_to;
    match spec {
        LayerSpec::Dense { width } => {
            if in_shape.len() > 1 {
                let n: usize = in_shape.iter().product();
                reshape = Some(vec![n]);
                in_shape = vec![n];
            }
            Ok(LayerPlan {
                name: name.to_string(),
                spec: spec.clone(),
                in_shape,
                out_shape: vec![*width],
                reshape_to: reshape,
                batch_norm: !sigmoid_out,
                sigmoid_out,
            })
        }
        LayerSpec::Conv {
            width,
            stride,
            rank3,
            ..
        }
        | LayerSpec::Deconv {
            width,
            stride,
            rank3,
            ..
        } => {
            if let Some(r) = &reshape {
                if r.iter().product::<usize>() != in_shape.iter().product::<usize>() {
                    return Err(NetError::Shape {
                        layer: name.to_string(),
                        detail: format!("cannot reshape {in_shape:?} to {r:?}"),
                    });
                }
                in_shape = r.clone();
            }
            let rank = if *rank3 { 3 } else { 2 };
            if in_shape.len() != rank + 1 {
                return Err(NetError::Shape {
                    layer: name.to_string(),
                    detail: format!(
                        "{spec} needs a rank-{} input (plus channels), got {in_shape:?}",
                        rank
                    ),
                });
            }
            let transposed = matches!(spec, LayerSpec::Deconv { .. });
            let out_spatial: Vec<usize> = in_shape[..rank]
                .iter()
                .map(|&d| {
                    if transposed {
                        d * stride
                    } else {
                        d.div_ceil(*stride)
                    }
                })
                .collect();
            let mut out_shape = out_spatial;
            out_shape.push(*width);
            Ok(LayerPlan {
                name: name.to_string(),
                spec: spec.clone(),
                in_shape,
                out_shape,
                reshape_to: reshape,
                batch_norm: !sigmoid_out,
                sigmoid_out,
            })
        }
    }
}

/// Forward-pass mode: `Train` normalizes with batch statistics, `Infer`
/// with stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Binds one network's parameters to one tape for one or more forward
/// passes. Parameters become tape leaves on first use, so repeated passes
/// share nodes and gradients accumulate across them. Running statistics
/// are written back only for a trainable session in [`Mode::Train`];
/// read-only and inference sessions never mutate the set.
pub struct NetSession<'p> {
    pub plan: &'p NetworkPlan,
    params: &'p mut ParameterSet,
    mode: Mode,
    trainable: bool,
    bound: HashMap<String, NodeId>,
}

impl<'p> NetSession<'p> {
    pub fn new(
        plan: &'p NetworkPlan,
        params: &'p mut ParameterSet,
        mode: Mode,
        trainable: bool,
    ) -> Self {
        NetSession {
            plan,
            params,
            mode,
            trainable,
            bound: HashMap::new(),
        }
    }

    fn param_node(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId, NetError> {
        if let Some(id) = self.bound.get(name) {
            return Ok(*id);
        }
        let entry = self.params.entry(name).ok_or_else(|| NetError::Shape {
            layer: name.to_string(),
            detail: "parameter missing from set".into(),
        })?;
        let value = entry.tensor.clone();
        let id = if self.trainable && entry.trainable {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn run_layer(
        &mut self,
        tape: &mut Tape,
        lp: &LayerPlan,
        mut x: NodeId,
    ) -> Result<NodeId, NetError> {
        let batch = tape.value(x).shape()[0];
        if let Some(shape) = &lp.reshape_to {
            let mut full = vec![batch];
            full.extend_from_slice(shape);
            x = tape.reshape(x, &full)?;
        }
        let expected: Vec<usize> = std::iter::once(batch)
            .chain(lp.in_shape.iter().copied())
            .collect();
        if tape.value(x).shape() != expected.as_slice() {
            return Err(NetError::Shape {
                layer: lp.name.clone(),
                detail: format!(
                    "expected input {expected:?}, got {:?}",
                    tape.value(x).shape()
                ),
            });
        }
        let bias = self.param_node(tape, &format!("{}.bias", lp.name))?;
        let mut out = match &lp.spec {
            LayerSpec::Dense { .. } => {
                let w = self.param_node(tape, &format!("{}.weights", lp.name))?;
                tape.dense(x, w, bias)?
            }
            LayerSpec::Conv { stride, .. } => {
                let k = self.param_node(tape, &format!("{}.kernels", lp.name))?;
                tape.conv(x, k, bias, *stride, false)?
            }
            LayerSpec::Deconv { stride, .. } => {
                let k = self.param_node(tape, &format!("{}.kernels", lp.name))?;
                tape.conv(x, k, bias, *stride, true)?
            }
        };
        if lp.batch_norm {
            let scale = self.param_node(tape, &format!("{}.bn.scale", lp.name))?;
            let shift = self.param_node(tape, &format!("{}.bn.shift", lp.name))?;
            let mean_name = format!("{}.bn.mean", lp.name);
            let var_name = format!("{}.bn.var", lp.name);
            let rm = self.params.get(&mean_name).cloned().unwrap();
            let rv = self.params.get(&var_name).cloned().unwrap();
            let bn = tape.batch_norm(
                out,
                scale,
                shift,
                &rm,
                &rv,
                self.plan.config.bn_momentum,
                self.plan.config.bn_eps,
                self.mode == Mode::Train,
            )?;
            if self.mode == Mode::Train && self.trainable {
                self.params.set(&mean_name, bn.running_mean)?;
                self.params.set(&var_name, bn.running_var)?;
            }
            out = bn.node;
        }
        out = if lp.sigmoid_out {
            tape.sigmoid(out)?
        } else {
            tape.leaky_relu(out, self.plan.config.slope)?
        };
        Ok(out)
    }

    /// Runs the encoder layers. Errors for decoder-only networks.
    pub fn encode(&mut self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NetError> {
        if self.plan.split == 0 {
            return Err(NetError::Shape {
                layer: self.plan.config.name.clone(),
                detail: "network has no encoder".into(),
            });
        }
        let mut x = input;
        for i in 0..self.plan.split {
            let lp = self.plan.layers[i].clone();
            x = self.run_layer(tape, &lp, x)?;
        }
        Ok(x)
    }

    /// Runs the decoder layers on a latent node.
    pub fn decode(&mut self, tape: &mut Tape, latent: NodeId) -> Result<NodeId, NetError> {
        let v = tape.value(latent);
        if v.rank() != 2 || v.shape()[1] != self.plan.config.latent {
            return Err(NetError::Shape {
                layer: self.plan.config.name.clone(),
                detail: format!(
                    "decoder expects latent of width {}, got {:?}",
                    self.plan.config.latent,
                    v.shape()
                ),
            });
        }
        let mut x = latent;
        for i in self.plan.split..self.plan.layers.len() {
            let lp = self.plan.layers[i].clone();
            x = self.run_layer(tape, &lp, x)?;
        }
        Ok(x)
    }

    /// encode then decode.
    pub fn autoencode(&mut self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NetError> {
        let latent = self.encode(tape, input)?;
        self.decode(tape, latent)
    }

    /// Extracts a gradient per trainable parameter of this network.
    /// Parameters the loss never reached get explicit zeros.
    pub fn gradient_map(&self, grads: &Gradients) -> GradientMap {
        let mut out = GradientMap::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            let g = self
                .bound
                .get(&p.name)
                .and_then(|id| grads.get(*id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
            out.insert(p.name.clone(), g);
        }
        out
    }
}

fn check_batched_input(
    plan: &NetworkPlan,
    input: &Tensor,
    what: &'static str,
    expected_item: &[usize],
) -> Result<usize, NetError> {
    if input.rank() != expected_item.len() + 1
        || &input.shape()[1..] != expected_item
        || input.shape()[0] == 0
    {
        return Err(NetError::Shape {
            layer: plan.config.name.clone(),
            detail: format!(
                "{what} must be shaped (batch, {expected_item:?}), got {:?}",
                input.shape()
            ),
        });
    }
    Ok(input.shape()[0])
}

/// Encodes an image batch (b, H, W, 1) to latents (b, n).
pub fn encode2d(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    images: &Tensor,
    mode: Mode,
) -> Result<Tensor, NetError> {
    check_batched_input(plan, images, "image batch", &plan.config.input_shape)?;
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let mut session = NetSession::new(plan, params, mode, mode == Mode::Train);
    let latent = session.encode(&mut tape, x)?;
    Ok(tape.value(latent).clone())
}

/// Decodes latents (b, n) to images (b, H, W, 1) in [0, 1].
pub fn decode2d(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    latent: &Tensor,
    mode: Mode,
) -> Result<Tensor, NetError> {
    check_batched_input(plan, latent, "latent batch", &[plan.config.latent])?;
    let mut tape = Tape::new();
    let x = tape.constant(latent.clone());
    let mut session = NetSession::new(plan, params, mode, mode == Mode::Train);
    let out = session.decode(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Decodes latents (b, n) to voxel batches (b, D, D, D) in [0, 1].
pub fn generate3d(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    latent: &Tensor,
    mode: Mode,
) -> Result<Tensor, NetError> {
    let out = decode2d(plan, params, latent, mode)?;
    let s = out.shape();
    let squeezed: Vec<usize> = s[..s.len() - 1].to_vec();
    Ok(out.reshaped(&squeezed)?)
}

/// Runs an autoencoder discriminator: returns its reconstruction of `x`
/// and the score, the mean L1 distance between `x` and the reconstruction.
pub fn discriminate(
    plan: &NetworkPlan,
    params: &mut ParameterSet,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, f64), NetError> {
    check_batched_input(plan, x, "discriminator input", &plan.config.input_shape)?;
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let mut session = NetSession::new(plan, params, mode, mode == Mode::Train);
    let recon = session.autoencode(&mut tape, input)?;
    let score = tape.value(recon).mean_abs_diff(x)?;
    Ok((tape.value(recon).clone(), score))
}

/// Which scale to build the four networks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetPreset {
    /// 16x16 images, 16^3 voxels, latent 32; trains on a CPU in minutes.
    Desk,
    /// 64x64 images, 32^3 voxels, latent 200.
    Full,
}

impl NetPreset {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "desk" => Some(NetPreset::Desk),
            "full" => Some(NetPreset::Full),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NetPreset::Desk => "desk",
            NetPreset::Full => "full",
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            NetPreset::Desk => 16,
            NetPreset::Full => 64,
        }
    }

    pub fn voxel_resolution(&self) -> usize {
        match self {
            NetPreset::Desk => 16,
            NetPreset::Full => 32,
        }
    }

    pub fn latent(&self) -> usize {
        match self {
            NetPreset::Desk => 32,
            NetPreset::Full => 200,
        }
    }
}

/// The four network plans of one preset.
pub struct Topology {
    pub g2: NetworkPlan,
    pub d2: NetworkPlan,
    pub g3: NetworkPlan,
    pub d3: NetworkPlan,
}

/// Builds the image autoencoder (G2), its discriminator (D2), the voxel
/// generator (G3), and the voxel discriminator (D3) for a preset.
pub fn topology(preset: NetPreset) -> Topology {
    let (enc2d, dec2d, enc3d, dec3d) = match preset {
        NetPreset::Desk => (
            "C(8,4)-C(16,4)-C(32,4)-FC(64)-FC(32)",
            "FC(64)-FC(128)-DC(16,4)-DC(8,4)-DC(1,4)",
            "C3D(8,4)-C3D(16,4)-C3D(32,4)-FC(64)-FC(32)",
            "FC(64)-FC(256)-DC3D(16,4)-DC3D(8,4)-DC3D(1,4)",
        ),
        NetPreset::Full => (
            "C(32,4)-C(64,4)-C(128,4)-FC(512)-FC(200)",
            "FC(512)-FC(8192)-DC(64,4)-DC(32,4)-DC(1,4)",
            "C3D(32,4)-C3D(64,4)-C3D(128,4)-FC(512)-FC(200)",
            "FC(512)-FC(8192)-DC3D(64,4)-DC3D(32,4)-DC3D(1,4)",
        ),
    };
    let img = preset.image_size();
    let vox = preset.voxel_resolution();
    let latent = preset.latent();
    let image_shape = vec![img, img, 1];
    let voxel_shape = vec![vox, vox, vox, 1];
    let parse = |s: &str| parse_layer_specs(s).expect("preset specs parse");
    let build = |cfg: NetworkConfig| NetworkPlan::build(cfg).expect("preset configs are closed");
    Topology {
        g2: build(NetworkConfig::new(
            "g2",
            image_shape.clone(),
            parse(enc2d),
            parse(dec2d),
            latent,
            image_shape.clone(),
        )),
        d2: build(NetworkConfig::new(
            "d2",
            image_shape.clone(),
            parse(enc2d),
            parse(dec2d),
            latent,
            image_shape,
        )),
        g3: build(NetworkConfig::new(
            "g3",
            vec![latent],
            Vec::new(),
            parse(dec3d),
            latent,
            voxel_shape.clone(),
        )),
        d3: build(NetworkConfig::new(
            "d3",
            voxel_shape.clone(),
            parse(enc3d),
            parse(dec3d),
            latent,
            voxel_shape,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_tokens() {
        assert_eq!(
            parse_layer_specs("C1(32,4)").unwrap(),
            vec![LayerSpec::conv(32, 4)]
        );
        assert_eq!(
            parse_layer_specs("FC2(200)").unwrap(),
            vec![LayerSpec::dense(200)]
        );
        assert_eq!(
            parse_layer_specs("DC1(128,4)-DC2(64,4)").unwrap(),
            vec![LayerSpec::deconv(128, 4), LayerSpec::deconv(64, 4)]
        );
    }

    #[test]
    fn parses_rank3_markers() {
        for text in ["DC1^{3D}(128,4)", "DC1^3D(128,4)", "DC1_3D(128,4)", "DC3D(128,4)"] {
            assert_eq!(
                parse_layer_specs(text).unwrap(),
                vec![LayerSpec::deconv3d(128, 4)],
                "{text}"
            );
        }
        assert_eq!(
            parse_layer_specs("C3(128,4)").unwrap(),
            vec![LayerSpec::conv(128, 4)]
        );
    }

    #[test]
    fn rejects_malformed_tokens() {
        for text in [
            "FC(512,3)",
            "Z(3)",
            "C(32)",
            "C(0,4)",
            "C(32,4",
            "FC3D(64)",
            "C!(32,4)",
            "",
        ] {
            assert!(parse_layer_specs(text).is_err(), "{text:?} should fail");
        }
    }

    #[test]
    fn round_trips_published_architecture_strings() {
        let cases = [
            (
                "C1(32,4)-C2(64,4)-C3(128,4)-FC1(512)-FC2(200)-FC3(512)-DC1(128,4)-DC2(64,4)-DC3(32,4)",
                "C(32,4)-C(64,4)-C(128,4)-FC(512)-FC(200)-FC(512)-DC(128,4)-DC(64,4)-DC(32,4)",
            ),
            (
                "C1(32,4)-C2(64,4)-C3(128,4)-FC1(512)-FC2(200)-FC3(512)-DC1^{3D}(128,4)-DC2^{3D}(64,4)-DC3^{3D}(32,4)",
                "C(32,4)-C(64,4)-C(128,4)-FC(512)-FC(200)-FC(512)-DC3D(128,4)-DC3D(64,4)-DC3D(32,4)",
            ),
            (
                "C1^{3D}(32,4)-C2^{3D}(64,4)-C3^{3D}(128,4)-FC1(512)-FC2(200)-FC3(512)-DC1^{3D}(128,4)-DC2^{3D}(64,4)-DC3^{3D}(32,4)",
                "C3D(32,4)-C3D(64,4)-C3D(128,4)-FC(512)-FC(200)-FC(512)-DC3D(128,4)-DC3D(64,4)-DC3D(32,4)",
            ),
        ];
        for (input, canonical) in cases {
            let specs = parse_layer_specs(input).unwrap();
            let rendered = format_layer_specs(&specs);
            assert_eq!(rendered, canonical, "{input}");
            assert_eq!(parse_layer_specs(&rendered).unwrap(), specs);
        }
    }

    #[test]
    fn desk_topology_shapes_close() {
        let topo = topology(NetPreset::Desk);
        assert_eq!(topo.g2.layers.last().unwrap().out_shape, vec![16, 16, 1]);
        assert_eq!(topo.g2.encoder_layers().last().unwrap().out_shape, vec![32]);
        assert_eq!(
            topo.g3.layers.last().unwrap().out_shape,
            vec![16, 16, 16, 1]
        );
        assert_eq!(topo.d3.encoder_layers().last().unwrap().out_shape, vec![32]);
    }

    #[test]
    fn full_topology_shapes_close() {
        let topo = topology(NetPreset::Full);
        assert_eq!(topo.g2.layers.last().unwrap().out_shape, vec![64, 64, 1]);
        assert_eq!(
            topo.g3.layers.last().unwrap().out_shape,
            vec![32, 32, 32, 1]
        );
        let dec0 = &topo.g3.decoder_layers()[2];
        assert_eq!(dec0.reshape_to, Some(vec![4, 4, 4, 128]));
    }

    #[test]
    fn desk_parameter_count_matches_layer_arithmetic() {
        let topo = topology(NetPreset::Desk);
        let conv = |k: usize, ci: usize, co: usize| k * k * ci * co + co + 2 * co;
        let conv_out = |k: usize, ci: usize, co: usize| k * k * ci * co + co;
        let dense = |i: usize, o: usize| i * o + o + 2 * o;
        let expected_g2 = conv(4, 1, 8)
            + conv(4, 8, 16)
            + conv(4, 16, 32)
            + dense(128, 64)
            + dense(64, 32)
            + dense(32, 64)
            + dense(64, 128)
            + conv(4, 32, 16)
            + conv(4, 16, 8)
            + conv_out(4, 8, 1);
        assert_eq!(topo.g2.scalar_count(), expected_g2);
        let params = topo.g2.init_params(7);
        assert_eq!(params.scalar_count(), expected_g2);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let topo = topology(NetPreset::Desk);
        let a = topo.g2.init_params(3);
        let b = topo.g2.init_params(3);
        assert_eq!(a.bits_digest(), b.bits_digest());
        let c = topo.g2.init_params(4);
        assert_ne!(a.bits_digest(), c.bits_digest());
    }

    #[test]
    fn build_errors_name_the_offending_layer() {
        let cfg = NetworkConfig::new(
            "bad",
            vec![16, 16, 1],
            parse_layer_specs("C(8,4)-FC(64)-FC(32)").unwrap(),
            parse_layer_specs("FC(500)-DC(1,4)").unwrap(),
            32,
            vec![16, 16, 1],
        );
        let err = NetworkPlan::build(cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dec"), "{msg}");

        let cfg = NetworkConfig::new(
            "bad latent",
            vec![16, 16, 1],
            parse_layer_specs("C(8,4)-FC(64)").unwrap(),
            parse_layer_specs("FC(256)-DC(1,4)").unwrap(),
            32,
            vec![16, 16, 1],
        );
        let err = NetworkPlan::build(cfg).unwrap_err();
        assert!(err.to_string().contains("enc1"), "{err}");
    }

    #[test]
    fn encode_decode_shapes_for_all_batch_sizes() {
        let topo = topology(NetPreset::Desk);
        let mut g2 = topo.g2.init_params(0);
        let mut g3 = topo.g3.init_params(1);
        for batch in 1..=8 {
            let images = Tensor::zeros(&[batch, 16, 16, 1]);
            let latent = encode2d(&topo.g2, &mut g2, &images, Mode::Infer).unwrap();
            assert_eq!(latent.shape(), &[batch, 32]);
            let decoded = decode2d(&topo.g2, &mut g2, &latent, Mode::Infer).unwrap();
            assert_eq!(decoded.shape(), &[batch, 16, 16, 1]);
            assert!(decoded.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let voxels = generate3d(&topo.g3, &mut g3, &latent, Mode::Infer).unwrap();
            assert_eq!(voxels.shape(), &[batch, 16, 16, 16]);
            assert!(voxels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identical_inputs_yield_identical_latent_rows() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.g2.init_params(5);
        let one = Tensor::new(
            vec![1, 16, 16, 1],
            (0..256).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let images = Tensor::new(vec![2, 16, 16, 1], both).unwrap();
        let latent = encode2d(&topo.g2, &mut params, &images, Mode::Infer).unwrap();
        let (a, b) = latent.data().split_at(32);
        assert_eq!(a, b);
        assert!(latent.all_finite());
    }

    #[test]
    fn discriminate_scores_are_nonnegative_and_deterministic() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.d2.init_params(9);
        let x = Tensor::new(
            vec![2, 16, 16, 1],
            (0..512).map(|i| ((i * 13) % 11) as f64 / 11.0).collect(),
        )
        .unwrap();
        let (recon, score) = discriminate(&topo.d2, &mut params, &x, Mode::Infer).unwrap();
        assert_eq!(recon.shape(), x.shape());
        assert!(score > 0.0);
        let (_, score2) = discriminate(&topo.d2, &mut params, &x, Mode::Infer).unwrap();
        assert_eq!(score.to_bits(), score2.to_bits());
    }

    #[test]
    fn inference_passes_are_pure() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.g2.init_params(2);
        let before = params.bits_digest();
        let images = Tensor::filled(&[3, 16, 16, 1], 0.4);
        encode2d(&topo.g2, &mut params, &images, Mode::Infer).unwrap();
        let latent = Tensor::filled(&[3, 32], 0.1);
        decode2d(&topo.g2, &mut params, &latent, Mode::Infer).unwrap();
        assert_eq!(params.bits_digest(), before);
    }

    #[test]
    fn train_mode_touches_only_running_statistics() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.g2.init_params(2);
        let snapshot = params.clone();
        let images = Tensor::new(
            vec![4, 16, 16, 1],
            (0..1024).map(|i| (i % 5) as f64 / 5.0).collect(),
        )
        .unwrap();
        encode2d(&topo.g2, &mut params, &images, Mode::Train).unwrap();
        let mut stats_changed = 0;
        for p in snapshot.iter() {
            let now = params.get(&p.name).unwrap();
            if p.name.ends_with(".bn.mean") || p.name.ends_with(".bn.var") {
                if now.bits_digest() != p.tensor.bits_digest() {
                    stats_changed += 1;
                }
            } else {
                assert_eq!(
                    now.bits_digest(),
                    p.tensor.bits_digest(),
                    "{} moved in a forward pass",
                    p.name
                );
            }
        }
        assert!(stats_changed > 0);
    }

    #[test]
    fn gradient_map_zero_fills_unreached_parameters() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.g2.init_params(0);
        let mut tape = Tape::new();
        let images = Tensor::new(
            vec![2, 16, 16, 1],
            (0..512).map(|i| ((i * 31 + 7) % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let x = tape.constant(images.clone());
        let mut session = NetSession::new(&topo.g2, &mut params, Mode::Train, true);
        let latent = session.encode(&mut tape, x).unwrap();
        let target = tape.constant(Tensor::zeros(&[2, 32]));
        let loss = tape.l1(latent, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let map = session.gradient_map(&grads);
        assert_eq!(map.len(), params.iter().filter(|p| p.trainable).count());
        let dec_grad = &map["dec0.weights"];
        assert!(dec_grad.data().iter().all(|&v| v == 0.0));
        let enc_grad = &map["enc0.kernels"];
        assert!(enc_grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn decoder_only_networks_reject_encode() {
        let topo = topology(NetPreset::Desk);
        let mut params = topo.g3.init_params(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 32]));
        let mut session = NetSession::new(&topo.g3, &mut params, Mode::Infer, false);
        assert!(session.encode(&mut tape, x).is_err());
        assert!(session.decode(&mut tape, x).is_ok());
    }
}
