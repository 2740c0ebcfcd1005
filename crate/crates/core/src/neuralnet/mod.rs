//! A small neural stack: stacked LSTM layers followed by dense layers.
//!
//! Parameters live in one flat `Vec<f64>` so optimizers, checksums and
//! serialization treat them uniformly. Per layer the layout is:
//!
//! * LSTM: input weights `W` (`4H x in`), recurrent weights `R` (`4H x H`),
//!   bias `b` (`4H`); gate blocks in the order input, forget, cell, output.
//! * Dense: weights (`out x in`), bias (`out`).
//!
//! Dropout is inverted and variational: one mask per sequence, applied to the
//! input of every layer after the first. Recurrent dropout masks the hidden
//! state entering the recurrent weights, again with one mask per sequence.

mod lstm;
pub mod optim;
pub mod train;

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};
use crate::rng::{derive_seed, substream};

pub use optim::{adam_step, rmsprop_step, sgd_step, AdamState, Optimizer, OptimizerState, RmsPropState};
pub use train::{train, SeqDataset, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Lstm { units: usize },
    Dense { units: usize, activation: Activation },
}

impl LayerSpec {
    pub fn units(&self) -> usize {
        match *self {
            LayerSpec::Lstm { units } | LayerSpec::Dense { units, .. } => units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Features per time step.
    pub input_dim: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerSpec>,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
}

/// Width of the LSTM layers of a default embedder.
pub const DEFAULT_HIDDEN: usize = 200;

impl NetworkSpec {
    /// Stacked LSTM layers of `hidden` cells followed by one dense output layer.
    pub fn lstm_stack(
        seq_len: usize,
        hidden: &[usize],
        output: usize,
        output_activation: Activation,
        dropout_rate: f64,
        recurrent_dropout_rate: f64,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&units| LayerSpec::Lstm { units }).collect();
        layers.push(LayerSpec::Dense {
            units: output,
            activation: output_activation,
        });
        NetworkSpec {
            input_dim: 1,
            seq_len,
            layers,
            dropout_rate,
            recurrent_dropout_rate,
        }
    }

    /// Two LSTM layers of 200 cells reading a 60-minute window.
    pub fn default_embedder(output: usize, output_activation: Activation) -> Self {
        Self::lstm_stack(
            crate::dataprep::N_TIME,
            &[DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            output,
            output_activation,
            0.5,
            0.5,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.seq_len == 0 {
            return Err(PhaseError::config("network.input", "input_dim and seq_len must be positive"));
        }
        if self.layers.len() < 2 {
            return Err(PhaseError::config("network.layers", "need at least a hidden and an output layer"));
        }
        let mut seen_dense = false;
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.units() == 0 {
                return Err(PhaseError::config(format!("network.layers[{k}]"), "units must be positive"));
            }
            match layer {
                LayerSpec::Lstm { .. } if seen_dense => {
                    return Err(PhaseError::config(
                        format!("network.layers[{k}]"),
                        "LSTM layers must precede dense layers",
                    ))
                }
                LayerSpec::Dense { .. } => seen_dense = true,
                LayerSpec::Lstm { .. } => {}
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(PhaseError::config("network.layers", "the output layer must be dense"));
        }
        for (name, p) in [("dropout_rate", self.dropout_rate), ("recurrent_dropout_rate", self.recurrent_dropout_rate)] {
            if !(0.0..1.0).contains(&p) {
                return Err(PhaseError::config(format!("network.{name}"), "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::units)
    }

    /// Width of the activations feeding the output layer (the embedding).
    pub fn penultimate_dim(&self) -> usize {
        self.layers[self.layers.len() - 2].units()
    }

    pub fn output_activation(&self) -> Activation {
        match self.layers.last() {
            Some(LayerSpec::Dense { activation, .. }) => *activation,
            _ => Activation::Linear,
        }
    }

    fn layer_input_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut prev = self.input_dim;
        for (k, layer) in self.layers.iter().enumerate() {
            let first_dense_reads_sequence = k == 0 && matches!(layer, LayerSpec::Dense { .. });
            dims.push(if first_dense_reads_sequence { prev * self.seq_len } else { prev });
            prev = layer.units();
        }
        dims
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layers
            .iter()
            .zip(self.layer_input_dims())
            .map(|(layer, input)| {
                let l = match *layer {
                    LayerSpec::Lstm { units } => LayerLayout {
                        input,
                        units,
                        w: offset,
                        r: Some(offset + 4 * units * input),
                        b: offset + 4 * units * input + 4 * units * units,
                        end: offset + 4 * units * (input + units + 1),
                    },
                    LayerSpec::Dense { units, .. } => LayerLayout {
                        input,
                        units,
                        w: offset,
                        r: None,
                        b: offset + units * input,
                        end: offset + units * (input + 1),
                    },
                };
                offset = l.end;
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |l| l.end)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    input: usize,
    units: usize,
    w: usize,
    r: Option<usize>,
    b: usize,
    end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode with dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Bce,
}

/// Gradient of the loss handed to [`Network::backward`].
#[derive(Debug, Clone)]
pub enum OutputGrad {
    /// With respect to the output activations.
    Activation(Array2<f64>),
    /// With respect to the output pre-activations (fused sigmoid + BCE).
    PreActivation(Array2<f64>),
}

#[derive(Debug)]
enum LayerCache {
    Lstm(lstm::LstmCache),
    Dense {
        input: Array2<f64>,
        z: Array2<f64>,
        a: Array2<f64>,
        input_mask: Option<Array2<f64>>,
    },
}

/// Activations kept by a forward pass for exact backpropagation.
#[derive(Debug)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub output: Array2<f64>,
    /// Output-layer pre-activations.
    pub logits: Array2<f64>,
    /// Activations feeding the output layer.
    pub penultimate: Array2<f64>,
    pub cache: Option<ForwardCache>,
}

/// Parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
    /// Bumped on every parameter change; caches record it.
    #[serde(skip)]
    version: u64,
}

/// Representation flowing between layers.
enum Flow {
    Seq(Vec<Array2<f64>>),
    Flat(Array2<f64>),
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64, label: &str, layer: usize) -> Array2<f64> {
    let mut rng = substream(seed, label, layer as u64);
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < keep { scale } else { 0.0 })
}

impl Network {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, forget-gate
    /// biases 1, other biases 0.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; spec.param_count()];
        for (k, l) in layout.iter().enumerate() {
            let mut rng = substream(seed, "init", k as u64);
            let bound_in = 1.0 / (l.input as f64).sqrt();
            for p in &mut params[l.w..l.r.unwrap_or(l.b)] {
                *p = rng.random_range(-bound_in..bound_in);
            }
            if let Some(r) = l.r {
                let bound_rec = 1.0 / (l.units as f64).sqrt();
                for p in &mut params[r..l.b] {
                    *p = rng.random_range(-bound_rec..bound_rec);
                }
                for p in &mut params[l.b + l.units..l.b + 2 * l.units] {
                    *p = 1.0;
                }
            }
        }
        Ok(Network { spec, params, version: 0 })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(PhaseError::shape("network parameters", spec.param_count(), params.len()));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(PhaseError::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Network { spec, params, version: 0 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<()> {
        let (_, t, f) = x.dim();
        if t != self.spec.seq_len || f != self.spec.input_dim {
            return Err(PhaseError::shape(
                "network input",
                format!("[batch, {}, {}]", self.spec.seq_len, self.spec.input_dim),
                format!("[{}, {t}, {f}]", x.dim().0),
            ));
        }
        Ok(())
    }

    /// Runs the network over a batch `[batch, seq_len, input_dim]`.
    pub fn forward(&self, x: ArrayView3<f64>, mode: Mode, keep_cache: bool) -> Result<ForwardPass> {
        self.check_input(&x)?;
        let batch = x.dim().0;
        let layout = self.spec.layout();
        let n_layers = self.spec.layers.len();
        let mut caches = Vec::with_capacity(if keep_cache { n_layers } else { 0 });
        let mut flow = Flow::Seq((0..self.spec.seq_len).map(|t| x.index_axis(Axis(1), t).to_owned()).collect());
        let mut penultimate = None;
        let mut logits = None;

        for (k, (layer, l)) in self.spec.layers.iter().zip(&layout).enumerate() {
            let dropout = match mode {
                Mode::Train { dropout_seed } if k > 0 && self.spec.dropout_rate > 0.0 => {
                    Some(dropout_mask(batch, l.input, self.spec.dropout_rate, dropout_seed, "dropout", k))
                }
                _ => None,
            };
            if k == n_layers - 1 {
                penultimate = Some(match &flow {
                    Flow::Flat(a) => a.clone(),
                    Flow::Seq(_) => unreachable!("validated: output layer is dense"),
                });
            }
            flow = match *layer {
                LayerSpec::Lstm { units } => {
                    let Flow::Seq(inputs) = flow else {
                        unreachable!("validated: LSTM layers precede dense layers")
                    };
                    let rec_mask = match mode {
                        Mode::Train { dropout_seed } if self.spec.recurrent_dropout_rate > 0.0 => Some(dropout_mask(
                            batch,
                            units,
                            self.spec.recurrent_dropout_rate,
                            dropout_seed,
                            "recurrent",
                            k,
                        )),
                        _ => None,
                    };
                    let params = self.lstm_params(l);
                    let return_sequences = matches!(self.spec.layers.get(k + 1), Some(LayerSpec::Lstm { .. }));
                    let (out, cache) = lstm::forward(&params, inputs, dropout, rec_mask, keep_cache);
                    if let Some(c) = cache {
                        caches.push(LayerCache::Lstm(c));
                    }
                    if return_sequences {
                        Flow::Seq(out)
                    } else {
                        Flow::Flat(out.into_iter().last().expect("nonempty sequence"))
                    }
                }
                LayerSpec::Dense { units, activation } => {
                    let mut input = match flow {
                        Flow::Flat(a) => a,
                        Flow::Seq(steps) => {
                            let views: Vec<ArrayView2<f64>> = steps.iter().map(|s| s.view()).collect();
                            ndarray::concatenate(Axis(1), &views).expect("equal batch sizes")
                        }
                    };
                    if let Some(mask) = &dropout {
                        input *= mask;
                    }
                    let w = ArrayView2::from_shape((units, l.input), &self.params[l.w..l.b]).expect("layout");
                    let b = &self.params[l.b..l.end];
                    let mut z = input.dot(&w.t());
                    for mut row in z.rows_mut() {
                        for (zj, bj) in row.iter_mut().zip(b) {
                            *zj += bj;
                        }
                    }
                    let a = z.mapv(|v| activation.apply(v));
                    if k == n_layers - 1 {
                        logits = Some(z.clone());
                    }
                    if keep_cache {
                        caches.push(LayerCache::Dense {
                            input,
                            z,
                            a: a.clone(),
                            input_mask: dropout,
                        });
                    }
                    Flow::Flat(a)
                }
            };
        }
        let Flow::Flat(output) = flow else {
            unreachable!("validated: output layer is dense")
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(PhaseError::Numeric("non-finite network output".into()));
        }
        Ok(ForwardPass {
            output,
            logits: logits.expect("output layer is dense"),
            penultimate: penultimate.expect("at least two layers"),
            cache: keep_cache.then_some(ForwardCache {
                version: self.version,
                batch,
                layers: caches,
            }),
        })
    }

    fn lstm_params(&self, l: &LayerLayout) -> lstm::LstmParams<'_> {
        let r = l.r.expect("lstm layout");
        lstm::LstmParams {
            units: l.units,
            input: l.input,
            w: ArrayView2::from_shape((4 * l.units, l.input), &self.params[l.w..r]).expect("layout"),
            r: ArrayView2::from_shape((4 * l.units, l.units), &self.params[r..l.b]).expect("layout"),
            b: &self.params[l.b..l.end],
        }
    }

    /// Backpropagates `grad` through the cached activations. Returns the
    /// gradient with respect to every parameter in the flat layout.
    pub fn backward(&self, cache: &ForwardCache, grad: &OutputGrad) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(PhaseError::StaleCache {
                cache: cache.version,
                network: self.version,
            });
        }
        let layout = self.spec.layout();
        if cache.layers.len() != layout.len() {
            return Err(PhaseError::data("activation cache does not match the network"));
        }
        let out_dim = self.spec.output_dim();
        let g = match grad {
            OutputGrad::Activation(g) | OutputGrad::PreActivation(g) => g,
        };
        if g.dim() != (cache.batch, out_dim) {
            return Err(PhaseError::shape(
                "loss gradient",
                format!("[{}, {out_dim}]", cache.batch),
                format!("[{}, {}]", g.nrows(), g.ncols()),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut upstream: Flow = Flow::Flat(g.clone());
        let last = layout.len() - 1;
        for k in (0..layout.len()).rev() {
            let l = &layout[k];
            upstream = match (&cache.layers[k], self.spec.layers[k]) {
                (LayerCache::Dense { input, z, a, input_mask }, LayerSpec::Dense { units, activation }) => {
                    let Flow::Flat(da) = upstream else {
                        unreachable!("dense layers receive flat gradients")
                    };
                    let fused = k == last && matches!(grad, OutputGrad::PreActivation(_));
                    let dz = if fused {
                        da
                    } else {
                        let mut dz = da;
                        ndarray::Zip::from(&mut dz)
                            .and(z)
                            .and(a)
                            .for_each(|d, &zv, &av| *d *= activation.derivative(zv, av));
                        dz
                    };
                    let (gw, gb) = grads[l.w..l.end].split_at_mut(units * l.input);
                    let mut gw = ArrayViewMut2::from_shape((units, l.input), gw).expect("layout");
                    ndarray::linalg::general_mat_mul(1.0, &dz.t(), input, 1.0, &mut gw);
                    for row in dz.rows() {
                        for (gbj, d) in gb.iter_mut().zip(row) {
                            *gbj += d;
                        }
                    }
                    if k == 0 {
                        break;
                    }
                    let w = ArrayView2::from_shape((units, l.input), &self.params[l.w..l.b]).expect("layout");
                    let mut dx = dz.dot(&w);
                    if let Some(m) = input_mask {
                        dx *= m;
                    }
                    match self.spec.layers[k - 1] {
                        LayerSpec::Dense { .. } => Flow::Flat(dx),
                        LayerSpec::Lstm { .. } => Flow::Flat(dx),
                    }
                }
                (LayerCache::Lstm(c), LayerSpec::Lstm { .. }) => {
                    let params = self.lstm_params(l);
                    let dh = match upstream {
                        Flow::Flat(last_step) => lstm::HiddenGrad::Last(last_step),
                        Flow::Seq(steps) => lstm::HiddenGrad::Sequence(steps),
                    };
                    let dx = lstm::backward(&params, c, dh, &mut grads[l.w..l.end], k > 0);
                    if k == 0 {
                        break;
                    }
                    Flow::Seq(dx.expect("input gradient requested"))
                }
                _ => unreachable!("cache kinds follow the spec"),
            };
        }
        Ok(grads)
    }

    /// Eval-mode outputs for many rows, processed in chunks.
    pub fn predict(&self, x: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.map_chunks(x, |p| p.output)
    }

    /// Eval-mode penultimate activations (the embedding) for many rows.
    pub fn penultimate(&self, x: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.map_chunks(x, |p| p.penultimate)
    }

    fn map_chunks(&self, x: ArrayView3<f64>, pick: impl Fn(ForwardPass) -> Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        const CHUNK: usize = 512;
        let n = x.dim().0;
        let mut parts = Vec::with_capacity(n.div_ceil(CHUNK));
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let pass = self.forward(x.slice(ndarray::s![start..end, .., ..]), Mode::Eval, false)?;
            parts.push(pick(pass));
        }
        if parts.is_empty() {
            let width = pick(self.forward(x.slice(ndarray::s![0..0, .., ..]), Mode::Eval, false)?).ncols();
            return Ok(Array2::zeros((0, width)));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }
}

/// Mean loss of `pass` against `targets` and its gradient at the output.
pub fn loss_and_grad(loss: Loss, activation: Activation, pass: &ForwardPass, targets: ArrayView2<f64>) -> Result<(f64, OutputGrad)> {
    let out = &pass.output;
    if out.dim() != targets.dim() {
        return Err(PhaseError::shape(
            "loss targets",
            format!("{:?}", out.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    let (b, k) = out.dim();
    match loss {
        Loss::Mse => {
            let n = (b * k) as f64;
            let diff = out - &targets;
            let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
            Ok((value, OutputGrad::Activation(diff * (2.0 / n))))
        }
        Loss::Bce => {
            if activation != Activation::Sigmoid {
                return Err(PhaseError::config("loss", "binary cross-entropy needs a sigmoid output"));
            }
            let n = (b * k) as f64;
            let mut value = 0.0;
            let mut grad = Array2::zeros((b, k));
            for ((g, &z), &y) in grad.iter_mut().zip(&pass.logits).zip(&targets) {
                value += bce_from_logit(z, y);
                *g = (sigmoid(z) - y) / n;
            }
            Ok((value / n, OutputGrad::PreActivation(grad)))
        }
    }
}

/// `-[y log s(z) + (1 - y) log(1 - s(z))]` computed without overflow.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Per-batch dropout seed derived from a run seed.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(seed, &format!("batch/{epoch}/{batch}"))
}

#[cfg(test)]
mod tests;
