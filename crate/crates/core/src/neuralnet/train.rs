use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerState};
use super::{batch_seed, loss_and_grad, Loss, Mode, Network};
use crate::error::{PhaseError, Result};
use crate::rng::substream;

/// Sequences `[n, seq_len, input_dim]` with targets `[n, outputs]`.
#[derive(Debug, Clone)]
pub struct SeqDataset {
    pub inputs: Array3<f64>,
    pub targets: Array2<f64>,
}

impl SeqDataset {
    pub fn new(inputs: Array3<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.dim().0 != targets.nrows() {
            return Err(PhaseError::shape("dataset rows", inputs.dim().0, targets.nrows()));
        }
        Ok(SeqDataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> SeqDataset {
        SeqDataset {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub loss: Loss,
    pub epochs: usize,
    pub batch_size: usize,
    pub balanced_upsampling: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// MSE with Adam at learning rate 0.001.
    pub fn regression(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            loss: Loss::Mse,
            epochs,
            batch_size: 256,
            balanced_upsampling: false,
            seed,
        }
    }

    /// BCE with RMSProp at learning rate 0.001 and balanced batches.
    pub fn classification(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: Optimizer::RmsProp,
            learning_rate: 1e-3,
            loss: Loss::Bce,
            epochs,
            batch_size: 256,
            balanced_upsampling: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PhaseError::config("train.learning_rate", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(PhaseError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 || (self.balanced_upsampling && self.batch_size < 2) {
            return Err(PhaseError::config("train.batch_size", "too small"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub selected_epoch: usize,
}

pub(crate) fn epoch_batches(config: &TrainConfig, data: &SeqDataset, positives: &[usize], negatives: &[usize], epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = substream(config.seed, "shuffle", epoch as u64);
    if config.balanced_upsampling {
        let half = config.batch_size / 2;
        let mut neg = negatives.to_vec();
        neg.shuffle(&mut rng);
        let mut up = substream(config.seed, "upsample", epoch as u64);
        neg.chunks(half)
            .map(|chunk| {
                let mut batch = chunk.to_vec();
                batch.extend((0..chunk.len()).map(|_| positives[up.random_range(0..positives.len())]));
                batch
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Mean eval-mode loss over a whole dataset.
pub fn dataset_loss(net: &Network, loss: Loss, data: &SeqDataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let act = net.spec().output_activation();
    let mut total = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let pass = net.forward(data.inputs.slice(s![start..end, .., ..]), Mode::Eval, false)?;
        let (value, _) = loss_and_grad(loss, act, &pass, data.targets.slice(s![start..end, ..]))?;
        total += value * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains from `init` and returns the parameters of the epoch with the lowest
/// validation loss (earliest on ties).
pub fn train(init: &Network, config: &TrainConfig, train: &SeqDataset, valid: &SeqDataset) -> Result<(Network, TrainHistory)> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(PhaseError::data("training and validation data must be nonempty"));
    }
    let out = init.spec().output_dim();
    for (name, d) in [("train", train), ("valid", valid)] {
        if d.targets.ncols() != out {
            return Err(PhaseError::shape(format!("{name} targets"), out, d.targets.ncols()));
        }
    }
    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    if config.balanced_upsampling {
        if out != 1 {
            return Err(PhaseError::config("train.balanced_upsampling", "needs a single binary output"));
        }
        for (i, &y) in train.targets.column(0).iter().enumerate() {
            if y >= 0.5 {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            return Err(PhaseError::data(format!(
                "balanced upsampling needs both classes (positives {}, negatives {})",
                positives.len(),
                negatives.len()
            )));
        }
    }

    let act = init.spec().output_activation();
    let mut net = init.clone();
    let mut state = OptimizerState::new(config.optimizer);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(config.epochs),
        valid_loss: Vec::with_capacity(config.epochs),
        selected_epoch: 0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        let (mut sum, mut rows) = (0.0, 0usize);
        for (b, idx) in epoch_batches(config, train, &positives, &negatives, epoch).into_iter().enumerate() {
            let batch = train.select(&idx);
            let mode = Mode::Train {
                dropout_seed: batch_seed(config.seed, epoch, b),
            };
            let pass = net.forward(batch.inputs.view(), mode, true)?;
            let (value, grad) = loss_and_grad(config.loss, act, &pass, batch.targets.view())?;
            if !value.is_finite() {
                return Err(PhaseError::Numeric(format!("training loss diverged at epoch {epoch}, batch {b}")));
            }
            let grads = net.backward(pass.cache.as_ref().expect("cache requested"), &grad)?;
            state
                .step(net.params_mut(), &grads, config.learning_rate)
                .map_err(|e| PhaseError::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            sum += value * idx.len() as f64;
            rows += idx.len();
        }
        let train_loss = sum / rows as f64;
        let valid_loss = dataset_loss(&net, config.loss, valid)?;
        if !valid_loss.is_finite() {
            return Err(PhaseError::Numeric(format!("validation loss is not finite at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        history.train_loss.push(train_loss);
        history.valid_loss.push(valid_loss);
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, net.params().to_vec()));
            history.selected_epoch = epoch;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    let selected = Network::from_params(net.spec().clone(), params)?;
    Ok((selected, history))
}
