//! Layers with explicit forward/backward passes, the MLP and CNN builders,
//! cross-entropy loss, Xavier initialization and the L2 penalty.
//!
//! Models emit logits; softmax lives inside [`cross_entropy`]. Parameters are
//! flattened in layer order with weights before biases, which is the order used
//! by checkpoints and every weight-vector comparison.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, ConvGeometry, Layout, Tensor};

/// Probabilities are clipped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    Relu,
    MaxPool,
    Flatten,
}

/// Serializable description of a layer stack; two models with equal
/// architectures have congruent parameter lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

impl Architecture {
    /// `dense(input_dim→hidden) · relu · dense(hidden→classes)`.
    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            name: "mlp".into(),
            input_shape: vec![input_dim],
            classes,
            layers: vec![
                LayerKind::Dense { inputs: input_dim, outputs: hidden },
                LayerKind::Relu,
                LayerKind::Dense { inputs: hidden, outputs: classes },
            ],
        }
    }

    /// LeNet-style stack: three 5×5 "same" convolutions with 16/32/64 filters,
    /// max pooling after the first two, then dense(→84) · relu · dense(84→classes).
    pub fn cnn(input_channels: usize, input_hw: usize, classes: usize) -> Self {
        let flat = 64 * (input_hw / 4) * (input_hw / 4);
        let conv = |i, o| LayerKind::Conv { in_channels: i, out_channels: o, kernel: 5, pad: 2 };
        Self {
            name: "cnn".into(),
            input_shape: vec![input_channels, input_hw, input_hw],
            classes,
            layers: vec![
                conv(input_channels, 16),
                LayerKind::Relu,
                LayerKind::MaxPool,
                conv(16, 32),
                LayerKind::Relu,
                LayerKind::MaxPool,
                conv(32, 64),
                LayerKind::Relu,
                LayerKind::Flatten,
                LayerKind::Dense { inputs: flat, outputs: 84 },
                LayerKind::Relu,
                LayerKind::Dense { inputs: 84, outputs: classes },
            ],
        }
    }
}

pub fn build_mlp(input_dim: usize, hidden: usize, classes: usize) -> Result<Model> {
    Model::new(Architecture::mlp(input_dim, hidden, classes))
}

pub fn build_cnn(input_channels: usize, input_hw: usize, classes: usize) -> Result<Model> {
    if input_hw == 0 || !input_hw.is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "cnn input side {input_hw} must be a positive multiple of 4"
        )));
    }
    Model::new(Architecture::cnn(input_channels, input_hw, classes))
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Vec<f64>),
    Pool { argmax: Vec<usize>, in_len: usize },
    Flatten,
}

#[derive(Clone, Debug)]
pub struct Layer {
    kind: LayerKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    cache: Option<(usize, Cache)>,
}

impl Layer {
    fn new(kind: LayerKind, in_shape: &[usize]) -> Result<Self> {
        let mismatch = |what: &str| {
            Error::Shape(format!("{what} layer cannot accept per-sample shape {in_shape:?}"))
        };
        let (out_shape, params) = match &kind {
            LayerKind::Dense { inputs, outputs } => {
                if in_shape != [*inputs] {
                    return Err(mismatch("dense"));
                }
                (
                    vec![*outputs],
                    vec![Tensor::zeros(&[*inputs, *outputs]), Tensor::zeros(&[*outputs])],
                )
            }
            LayerKind::Conv { in_channels, out_channels, kernel, pad } => {
                if in_shape.len() != 3 || in_shape[0] != *in_channels {
                    return Err(mismatch("conv"));
                }
                let g = ConvGeometry {
                    in_channels: *in_channels,
                    height: in_shape[1],
                    width: in_shape[2],
                    out_channels: *out_channels,
                    kh: *kernel,
                    kw: *kernel,
                    pad: *pad,
                };
                g.validate()?;
                (
                    vec![*out_channels, g.out_height(), g.out_width()],
                    vec![
                        Tensor::zeros(&[*out_channels, *in_channels, *kernel, *kernel]),
                        Tensor::zeros(&[*out_channels]),
                    ],
                )
            }
            LayerKind::Relu => (in_shape.to_vec(), vec![]),
            LayerKind::MaxPool => {
                if in_shape.len() != 3 || !in_shape[1].is_multiple_of(2) || !in_shape[2].is_multiple_of(2) || in_shape[1] < 2 {
                    return Err(mismatch("maxpool"));
                }
                (vec![in_shape[0], in_shape[1] / 2, in_shape[2] / 2], vec![])
            }
            LayerKind::Flatten => (vec![in_shape.iter().product()], vec![]),
        };
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            kind,
            in_shape: in_shape.to_vec(),
            out_shape,
            params,
            grads,
            cache: None,
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn gradients(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn geometry(&self) -> ConvGeometry {
        match self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, pad } => ConvGeometry {
                in_channels,
                height: self.in_shape[1],
                width: self.in_shape[2],
                out_channels,
                kh: kernel,
                kw: kernel,
                pad,
            },
            _ => unreachable!("geometry of a non-conv layer"),
        }
    }

    fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, Cache) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let mut y = Vec::with_capacity(batch * outputs);
                for _ in 0..batch {
                    y.extend_from_slice(self.params[1].data());
                }
                gemm(
                    1.0,
                    x,
                    Layout::row_major(batch, inputs),
                    self.params[0].data(),
                    Layout::row_major(inputs, outputs),
                    1.0,
                    &mut y,
                    Layout::row_major(batch, outputs),
                );
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::Conv { .. } => {
                let y = tensor::conv2d_batch(
                    &self.geometry(),
                    x,
                    self.params[0].data(),
                    self.params[1].data(),
                    batch,
                );
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::Relu => {
                let mut y = x.to_vec();
                crate::par::map_inplace(&mut y, |v| if v > 0.0 { v } else { 0.0 });
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::MaxPool => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (y, argmax) = tensor::maxpool2_batch(x, batch * c, h, w);
                (y, Cache::Pool { argmax, in_len: batch * c * h * w })
            }
            LayerKind::Flatten => (x.to_vec(), Cache::Flatten),
        }
    }

    /// Fills this layer's gradients and returns the gradient w.r.t. its input
    /// (skipped when `need_input` is false).
    fn backward(&mut self, up: &[f64], batch: usize, cache: &Cache, need_input: bool) -> Option<Vec<f64>> {
        match (&self.kind, cache) {
            (&LayerKind::Dense { inputs, outputs }, Cache::Input(x)) => {
                gemm(
                    1.0,
                    x,
                    Layout::row_major(batch, inputs).t(),
                    up,
                    Layout::row_major(batch, outputs),
                    0.0,
                    self.grads[0].data_mut(),
                    Layout::row_major(inputs, outputs),
                );
                let db = self.grads[1].data_mut();
                db.fill(0.0);
                for row in up.chunks(outputs) {
                    for (d, u) in db.iter_mut().zip(row) {
                        *d += u;
                    }
                }
                need_input.then(|| {
                    let mut dx = vec![0.0; batch * inputs];
                    gemm(
                        1.0,
                        up,
                        Layout::row_major(batch, outputs),
                        self.params[0].data(),
                        Layout::row_major(inputs, outputs).t(),
                        0.0,
                        &mut dx,
                        Layout::row_major(batch, inputs),
                    );
                    dx
                })
            }
            (LayerKind::Conv { .. }, Cache::Input(x)) => {
                let (dx, dk, db) = tensor::conv2d_backward_batch(
                    &self.geometry(),
                    x,
                    self.params[0].data(),
                    up,
                    batch,
                    need_input,
                );
                self.grads[0].data_mut().copy_from_slice(&dk);
                self.grads[1].data_mut().copy_from_slice(&db);
                dx
            }
            (LayerKind::Relu, Cache::Input(x)) => Some(
                up.iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            (LayerKind::MaxPool, Cache::Pool { argmax, in_len }) => {
                Some(tensor::maxpool2_backward(up, argmax, *in_len))
            }
            (LayerKind::Flatten, Cache::Flatten) => Some(up.to_vec()),
            _ => unreachable!("cache does not match layer kind"),
        }
    }
}

/// An ordered layer stack producing `[batch × classes]` logits.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
    has_grads: bool,
}

impl Model {
    /// Builds a zero-initialized model, inferring every layer's shapes.
    pub fn new(arch: Architecture) -> Result<Self> {
        if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {:?}", arch.input_shape)));
        }
        let mut shape = arch.input_shape.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for kind in &arch.layers {
            let layer = Layer::new(kind.clone(), &shape)?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        if shape != [arch.classes] {
            return Err(Error::Shape(format!(
                "stack ends in shape {shape:?}, expected [{}]",
                arch.classes
            )));
        }
        Ok(Self { arch, layers, has_grads: false })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(Tensor::len).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn gradients(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.grads.iter())
    }

    /// Parameter/gradient pairs in flatten order.
    pub fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().zip(l.grads.iter()))
    }

    /// True once `backward` has populated the gradients for the current parameters.
    pub fn has_gradients(&self) -> bool {
        self.has_grads
    }

    /// All parameters concatenated in layer order, weights before biases.
    pub fn flatten_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for p in self.parameters() {
            out.extend_from_slice(p.data());
        }
        out
    }

    pub fn flatten_gradients(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for g in self.gradients() {
            out.extend_from_slice(g.data());
        }
        out
    }

    /// Overwrites all parameters from a flat vector in `flatten_parameters` order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in &mut layer.params {
                let n = p.len();
                p.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        self.has_grads = false;
        Ok(())
    }

    fn batch_size(&self, batch: &Tensor) -> Result<usize> {
        let per: usize = batch.shape()[1..].iter().product();
        if batch.rank() < 2 || per != self.input_len() {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.arch.input_shape
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Forward pass caching the activations needed by [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let b = self.batch_size(batch)?;
        let mut x = batch.data().to_vec();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, b);
            layer.cache = Some((b, cache));
            x = y;
        }
        Tensor::new(vec![b, self.arch.classes], x)
    }

    /// Forward pass without caching; leaves the model untouched.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.batch_size(batch)?;
        let mut x = batch.data().to_vec();
        for layer in &self.layers {
            x = layer.forward(&x, b).0;
        }
        Tensor::new(vec![b, self.arch.classes], x)
    }

    /// Inference that also returns the switching pattern of every ReLU (sign
    /// of its input) and max pool (winning index). Two parameter vectors with
    /// equal patterns lie on the same smooth piece of the loss.
    pub(crate) fn infer_with_pattern(&self, batch: &Tensor) -> Result<(Tensor, Vec<u64>)> {
        let b = self.batch_size(batch)?;
        let mut x = batch.data().to_vec();
        let mut pattern = Vec::new();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, b);
            match (&layer.kind, &cache) {
                (LayerKind::Relu, Cache::Input(v)) => {
                    pattern.extend(v.chunks(64).map(|c| c.iter().fold(0u64, |acc, &z| (acc << 1) | u64::from(z > 0.0))));
                }
                (LayerKind::MaxPool, Cache::Pool { argmax, .. }) => pattern.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
            x = y;
        }
        Ok((Tensor::new(vec![b, self.arch.classes], x)?, pattern))
    }

    /// Backpropagates `logit_grad` (∂loss/∂logits) through the cached forward
    /// pass, overwriting every gradient. Caches are consumed.
    pub fn backward(&mut self, logit_grad: &Tensor) -> Result<()> {
        let b = match self.layers.last().and_then(|l| l.cache.as_ref()) {
            Some((b, _)) => *b,
            None => return Err(Error::State("backward called before forward".into())),
        };
        if logit_grad.shape() != [b, self.arch.classes] {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match forward batch [{b}, {}]",
                logit_grad.shape(),
                self.arch.classes
            )));
        }
        let mut up = logit_grad.data().to_vec();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let layer = &mut self.layers[i];
            let (_, cache) = layer
                .cache
                .take()
                .ok_or_else(|| Error::State("missing cached activation".into()))?;
            debug_assert_eq!(up.len(), b * layer.out_len());
            match layer.backward(&up, b, &cache, i > 0) {
                Some(dx) => {
                    debug_assert_eq!(dx.len(), b * layer.in_len());
                    up = dx;
                }
                None => break,
            }
        }
        self.has_grads = true;
        Ok(())
    }

    pub(crate) fn weight_tensors_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &mut Tensor)> {
        self.layers
            .iter_mut()
            .filter(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Conv { .. }))
            .map(|l| {
                let (p, g) = (&mut l.params[0], &mut l.grads[0]);
                (p, g)
            })
    }

    fn weight_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Conv { .. }))
            .map(|l| &l.params[0])
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }
}

/// Mean cross-entropy of a batch and its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub mean_loss: f64,
    pub logit_gradient: Tensor,
}

/// Mean over the batch of `−ln softmax(logits)[label]` (probabilities clipped
/// at [`PROB_FLOOR`]), with gradient `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = tensor::softmax(logits);
    let mut total = 0.0;
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        total -= row[y].max(PROB_FLOOR).ln();
        row[y] -= 1.0;
        for g in row.iter_mut() {
            *g /= b as f64;
        }
    }
    Ok(LossValue {
        mean_loss: total / b as f64,
        logit_gradient: grad,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Validation(format!("l2 lambda must be a non-negative number, got {lambda}")));
    }
    Ok(())
}

/// `λ·Σ‖W‖²` over dense weight matrices and conv kernels; biases excluded.
pub fn l2_penalty(model: &Model, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda
        * model
            .weight_tensors()
            .map(|w| w.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>())
}

/// Adds `2λW` to each weight gradient in place.
pub fn add_l2_gradients(model: &mut Model, lambda: f64) -> Result<()> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(());
    }
    for (w, g) in model.weight_tensors_mut() {
        for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
            *gi += 2.0 * lambda * wi;
        }
    }
    Ok(())
}

/// Half-width of the Xavier uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples every weight tensor from `U[−a, a]`, `a = √(6/(fan_in+fan_out))`,
/// in flatten order; zeroes all biases.
pub fn init_xavier_uniform(model: &mut Model, rng: &mut impl Rng) {
    for layer in &mut model.layers {
        let bound = match layer.kind {
            LayerKind::Dense { inputs, outputs } => xavier_bound(inputs, outputs),
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                xavier_bound(in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => continue,
        };
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in layer.params[0].data_mut() {
            *w = dist.sample(rng);
        }
        layer.params[1].data_mut().fill(0.0);
    }
    model.has_grads = false;
}
