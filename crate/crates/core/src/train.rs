//! Categorical cross-entropy, SGD with momentum, the epoch loop and the
//! evaluation metrics.

use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, preprocess, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::rng::{mix_seed, rng_from_seed};
use crate::tensor::Tensor;

/// Probabilities are clamped to at least this inside the log.
pub const LOG_CLAMP: f32 = 1e-12;
/// Batches prepared ahead of the training step when prefetching.
pub const PREFETCH_DEPTH: usize = 2;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_on: bool,
    pub val_fraction: f32,
    pub augment: AugmentConfig,
    /// Sequential batch preparation and zeroed wall-clock fields, so that
    /// repeated runs produce identical output.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            dropout_on: false,
            val_fraction: 0.1,
            augment: AugmentConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        self.augment.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    #[serde(rename = "seconds")]
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History(Vec<EpochMetrics>);

impl History {
    pub fn new() -> Self {
        History::default()
    }

    pub fn from_epochs(epochs: Vec<EpochMetrics>) -> Result<Self> {
        let mut h = History::new();
        for e in epochs {
            h.push(e)?;
        }
        Ok(h)
    }

    /// Appends an epoch; indices must start at 1 and strictly increase.
    pub fn push(&mut self, metrics: EpochMetrics) -> Result<()> {
        let min = self.0.last().map_or(1, |m| m.epoch + 1);
        if metrics.epoch < min {
            return Err(Error::State(format!(
                "epoch index {} must be at least {min}",
                metrics.epoch
            )));
        }
        self.0.push(metrics);
        Ok(())
    }

    pub fn epochs(&self) -> &[EpochMetrics] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.0.last()
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.0.iter().map(|m| m.val_accuracy).reduce(f64::max)
    }
}

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to the pre-softmax logits, `(p - y) / N`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, m) = probs.shape().matrix()?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} probability rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Data(format!("label {bad} out of range for {m} classes")));
    }
    let mut loss = 0.0f64;
    let mut grad = probs.data().to_vec();
    let inv_n = 1.0 / n as f32;
    for (i, &label) in labels.iter().enumerate() {
        let row = &mut grad[i * m..(i + 1) * m];
        loss -= (row[label].clamp(LOG_CLAMP, 1.0) as f64).ln();
        row[label] -= 1.0;
        for g in row.iter_mut() {
            *g *= inv_n;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, m], grad)?))
}

/// `v <- momentum * v + g; theta <- theta - lr * v` for every parameter.
/// Nothing is updated unless every parameter has a matching gradient.
pub fn sgd_step(model: &mut Model, grads: &Gradients, config: &TrainConfig) -> Result<()> {
    for p in model.parameters() {
        match grads.get(&p.name) {
            None => return Err(Error::State(format!("no gradient for parameter {:?}", p.name))),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::State(format!(
                    "gradient for {:?} has shape {:?}, parameter has {:?}",
                    p.name,
                    g.dims(),
                    p.value.dims()
                )))
            }
            Some(_) => {}
        }
    }
    let (lr, mu) = (config.learning_rate, config.momentum);
    for p in model.parameters_mut() {
        let g = grads.get(&p.name).expect("checked above");
        for ((theta, v), &g) in p.value.data_mut().iter_mut().zip(p.velocity.data_mut()).zip(g.data()) {
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `produce(0..count)` ahead of `consume` through a bounded FIFO queue
/// of `depth` items on a helper thread. With `depth == 0` both run inline,
/// alternating. Consumption order is always `0, 1, ..., count - 1`.
pub fn for_each_prefetched<T, P, C>(count: usize, depth: usize, produce: P, mut consume: C) -> Result<()>
where
    T: Send,
    P: Fn(usize) -> Result<T> + Sync,
    C: FnMut(usize, T) -> Result<()>,
{
    if depth == 0 {
        for i in 0..count {
            consume(i, produce(i)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel(depth);
        let produce = &produce;
        scope.spawn(move || {
            for i in 0..count {
                let item = produce(i);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        for i in 0..count {
            let item = rx
                .recv()
                .map_err(|_| Error::State("batch producer stopped early".into()))??;
            consume(i, item)?;
        }
        Ok(())
    })
}

/// Normalized input batch and labels for `indices` of `dataset`.
/// `augment_seed`, when given, seeds per-sample augmentation as
/// `mix_seed(augment_seed, index)`.
pub fn prepare_batch(
    dataset: &Dataset,
    indices: &[usize],
    input_size: usize,
    augmentation: Option<(&AugmentConfig, u64)>,
) -> Result<(Tensor, Vec<usize>)> {
    let mut items = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &dataset.samples[i];
        let t = match augmentation {
            Some((cfg, seed)) if cfg.enabled => {
                let img = augment(&sample.image, cfg, mix_seed(seed, i as u64))?;
                preprocess(&img, input_size, dataset.channel_means)?
            }
            _ => preprocess(&sample.image, input_size, dataset.channel_means)?,
        };
        items.push(t);
        labels.push(sample.label);
    }
    Ok((Tensor::stack(&items)?, labels))
}

/// One pass over `train` in shuffled mini-batches (the last partial batch
/// included), then validation accuracy on `val` with dropout off.
pub fn train_epoch(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let epoch_seed = config.seed ^ epoch as u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_from_seed(epoch_seed));
    let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();

    let input_size = model.config().input_size;
    let augment_seed = mix_seed(epoch_seed, 0);
    let dropout_seed = mix_seed(epoch_seed, 1);
    let depth = if config.deterministic { 0 } else { PREFETCH_DEPTH };

    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for_each_prefetched(
        batches.len(),
        depth,
        |b| prepare_batch(train, batches[b], input_size, Some((&config.augment, augment_seed))),
        |b, (x, labels)| {
            let seed = config.dropout_on.then(|| mix_seed(dropout_seed, b as u64));
            let probs = model.forward_train(&x, seed)?;
            let (loss, d_logits) = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in batch {b}")));
            }
            let grads = model.backward(&d_logits)?;
            sgd_step(model, &grads, config)?;
            loss_sum += loss * labels.len() as f64;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(probs.row(i)) == l)
                .count();
            Ok(())
        },
    )
    .map_err(|e| e.context(format!("epoch {epoch}")))?;

    let val_accuracy = evaluate(model, val)?.accuracy();
    let wall_time = if config.deterministic {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
    Ok(EpochMetrics {
        epoch,
        train_loss: loss_sum / train.len() as f64,
        train_accuracy: correct as f64 / train.len() as f64,
        val_accuracy,
        wall_time,
    })
}

/// Runs `config.epochs` epochs numbered after the last entry of `history`,
/// calling `on_epoch` after each.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    history: &mut History,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &History) -> Result<()>,
) -> Result<()> {
    let first = history.last().map_or(1, |m| m.epoch + 1);
    for epoch in first..first + config.epochs {
        let metrics = train_epoch(model, train, val, config, epoch)?;
        history.push(metrics.clone())?;
        on_epoch(&metrics, model, history)?;
    }
    Ok(())
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// CSV with a header row and first column of class names.
    pub fn to_csv(&self, label_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for name in label_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in label_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Inference-mode accuracy and confusion matrix over `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<ConfusionMatrix> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let m = model.config().num_classes;
    if dataset.num_classes() > m {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {m}",
            dataset.num_classes()
        )));
    }
    let mut confusion = ConfusionMatrix::new(m);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = prepare_batch(dataset, chunk, model.config().input_size, None)?;
        let probs = model.predict(&x)?;
        for (i, &label) in labels.iter().enumerate() {
            confusion.record(label, argmax(probs.row(i)));
        }
    }
    Ok(confusion)
}

/// Pearson correlation coefficient of two equally long series.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data(format!(
            "correlation needs two series of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Numeric("correlation is undefined for a constant series".into()));
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}
