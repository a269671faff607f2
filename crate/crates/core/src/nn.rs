//! Dense feedforward networks with exact reverse-mode gradients.
//!
//! Everything runs on row-major batches: a batch of `B` inputs is a `B x in`
//! matrix and each layer computes `act(X W^T + b)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// activation output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => Zip::from(grad).and(y).for_each(|g, &y| *g *= y * (1.0 - y)),
            Activation::Identity => {}
        }
    }

    fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            Activation::Relu | Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_cached`]. `outputs[0]` is the input
/// batch; `outputs[l + 1]` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds the input at least")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.layers {
            g.weights *= k;
            g.bias *= k;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (g, o) in self.layers.iter_mut().zip(&other.layers) {
            g.weights += &o.weights;
            g.bias += &o.bias;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&g| g == 0.0)
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[k]`; hidden layers use
    /// `hidden`, the last layer uses `output`. Weights are Glorot-uniform,
    /// biases zero.
    pub fn xavier(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {dims:?}")));
        }
        let mut rng = rng::rng_from(seed, 0);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.gen_range(-limit..=limit)
                });
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if k == last { output } else { hidden },
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        let mut net = Mlp::xavier(dims, hidden, output, 0)?;
        for l in &mut net.layers {
            l.weights.fill(0.0);
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters in layer order, weights (row-major) before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|w| w.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in &self.layers {
            a = affine(&a, l);
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x);
        for l in &self.layers {
            let next = affine(outputs.last().expect("non-empty"), l);
            outputs.push(next);
        }
        Ok(ForwardCache { outputs })
    }

    /// Reverse pass for a cached batch. `out_grad` is the gradient of the loss
    /// with respect to the network output; the returned parameter gradients
    /// are summed over the batch rows. Also returns the gradient with respect
    /// to the input batch.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        out_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let out = cache.output();
        if out_grad.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.ncols(),
                got: out_grad.ncols(),
            });
        }
        let mut grad = out_grad.to_owned();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate().rev() {
            l.activation.backprop(&cache.outputs[k + 1], &mut grad);
            let weights = grad.t().dot(&cache.outputs[k]);
            let bias = grad.sum_axis(Axis(0));
            layer_grads.push(LayerGrad { weights, bias });
            grad = grad.dot(&l.weights);
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
            },
            grad,
        ))
    }

    /// Parameter gradients of `loss_grad . net(x)` at a single input.
    pub fn backward(&self, x: &[f64], loss_grad: &[f64]) -> Result<Gradients> {
        self.check_input(x.len())?;
        if loss_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: loss_grad.len(),
            });
        }
        let cache =
            self.forward_cached(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"))?;
        let g = ArrayView2::from_shape((1, loss_grad.len()), loss_grad).expect("row");
        Ok(self.backward_cached(&cache, g)?.0)
    }

    /// Largest singular value of each weight matrix.
    pub fn spectral_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.weights))
            .collect()
    }

    /// Product of layer spectral norms and activation Lipschitz constants.
    /// An upper bound on the network's L2 Lipschitz constant.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.weights) * l.activation.lipschitz())
            .product()
    }
}

fn affine(x: &Array2<f64>, l: &Layer) -> Array2<f64> {
    let mut z = x.dot(&l.weights.t());
    z += &l.bias;
    l.activation.apply(&mut z);
    z
}

/// Power iteration on `W^T W`. The Rayleigh quotient converges from below, so
/// the residual norm is added back: for a symmetric matrix some eigenvalue lies
/// within `||G v - rq v||` of `rq`, which makes the result an upper estimate.
pub fn spectral_norm(w: &Array2<f64>) -> f64 {
    let gram = w.t().dot(w);
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    v /= v.dot(&v).sqrt();
    let mut rq = 0.0;
    let mut slack = f64::INFINITY;
    for _ in 0..20_000 {
        let gv = gram.dot(&v);
        rq = v.dot(&gv);
        let residual = &gv - &(&v * rq);
        slack = residual.dot(&residual).sqrt();
        let norm = gv.dot(&gv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        if slack <= 1e-13 * rq {
            break;
        }
        v = gv / norm;
    }
    (rq + slack).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            iterations: 1000,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::invalid(
                    "Adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer state for one network.
#[derive(Debug, Clone)]
pub struct OptState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: usize,
    first: Option<Gradients>,
    second: Option<Gradients>,
}

impl OptState {
    pub fn new(cfg: &TrainConfig) -> Self {
        OptState {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            step: 0,
            first: None,
            second: None,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Applies one update with gradient `g` and fails if any parameter turns
    /// non-finite.
    pub fn apply(&mut self, net: &mut Mlp, g: &Gradients) -> Result<()> {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, gl) in net.layers.iter_mut().zip(&g.layers) {
                    l.weights.scaled_add(-lr, &gl.weights);
                    l.bias.scaled_add(-lr, &gl.bias);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self.first.get_or_insert_with(|| Gradients::zeros_like(net));
                let v = self
                    .second
                    .get_or_insert_with(|| Gradients::zeros_like(net));
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                for (((l, gl), ml), vl) in net
                    .layers
                    .iter_mut()
                    .zip(&g.layers)
                    .zip(&mut m.layers)
                    .zip(&mut v.layers)
                {
                    Zip::from(&mut l.weights)
                        .and(&gl.weights)
                        .and(&mut ml.weights)
                        .and(&mut vl.weights)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                    Zip::from(&mut l.bias)
                        .and(&gl.bias)
                        .and(&mut ml.bias)
                        .and(&mut vl.bias)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::TrainingDiverged { step: self.step });
        }
        Ok(())
    }
}

/// One optimizer step on the batch-averaged gradient. Each batch entry pairs
/// an input with the gradient of the loss with respect to the output.
pub fn train_step(net: &mut Mlp, batch: &[(Vec<f64>, Vec<f64>)], opt: &mut OptState) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (din, dout) = (net.input_dim(), net.output_dim());
    let mut x = Array2::zeros((batch.len(), din));
    let mut g = Array2::zeros((batch.len(), dout));
    for (r, (xi, gi)) in batch.iter().enumerate() {
        if xi.len() != din {
            return Err(Error::DimensionMismatch {
                expected: din,
                got: xi.len(),
            });
        }
        if gi.len() != dout {
            return Err(Error::DimensionMismatch {
                expected: dout,
                got: gi.len(),
            });
        }
        x.row_mut(r).assign(&Array1::from(xi.clone()));
        g.row_mut(r).assign(&Array1::from(gi.clone()));
    }
    g /= batch.len() as f64;
    let cache = net.forward_cached(x)?;
    let (grads, _) = net.backward_cached(&cache, g.view())?;
    opt.apply(net, &grads)
}

const CHECKPOINT_FORMAT: &str = "gemnas-mlp-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub param_count: usize,
}

/// Writes a JSON header line followed by every parameter as a little-endian
/// `f64`, in layer order.
pub fn save_checkpoint(path: &Path, net: &Mlp, seed: u64, config: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        dims: net.dims(),
        activations: net.activations(),
        seed,
        config,
        param_count: net.param_count(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!("unknown format `{}`", header.format),
        ));
    }
    if header.activations.len() + 1 != header.dims.len() {
        return Err(Error::format(
            path,
            "activation count does not match layer count",
        ));
    }
    let mut layers = Vec::with_capacity(header.activations.len());
    for (w, &act) in header.dims.windows(2).zip(&header.activations) {
        layers.push(Layer {
            weights: Array2::zeros((w[1], w[0])),
            bias: Array1::zeros(w[1]),
            activation: act,
        });
    }
    let mut net = Mlp::new(layers).map_err(|e| Error::format(path, e.to_string()))?;
    if net.param_count() != header.param_count {
        return Err(Error::format(path, "parameter count does not match dims"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.param_count {
        return Err(Error::format(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                8 * header.param_count,
                bytes.len()
            ),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    net.set_params(&flat)?;
    Ok((net, header))
}
