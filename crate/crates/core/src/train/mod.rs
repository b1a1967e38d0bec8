//! Optimization loop, evaluation metrics and the experiment harness.

pub mod config;
pub mod harness;
pub mod metrics;
pub mod optim;

pub use config::{ExperimentConfig, SweepGrid, SweepRow, TrainConfig};
pub use harness::{export_embeddings, run_ablations, run_experiment, sweep, Experiment, EMBEDDING_PREFIX};
pub use metrics::{evaluate, macro_scores, MetricsReport, Scores, StepPrediction};
pub use optim::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::exec;
use crate::graph::{ExtractedSample, NormStats};
use crate::model::{Model, SequenceInput};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sequences whose gradients are held in memory at once.
const GRAD_CHUNK: usize = 16;

/// Deterministic shuffled split: items are ordered by id, shuffled with
/// `seed`, and the first `round(fraction · n)` go to the training side.
/// Both sides come back sorted by id.
pub fn split_dataset<T: Clone>(items: &[T], id: impl Fn(&T) -> &str, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| id(&items[a]).cmp(id(&items[b])));
    if order.windows(2).any(|w| id(&items[w[0]]) == id(&items[w[1]])) {
        return Err(Error::Contract("duplicate sample ids in dataset".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((items.len() as f64 * fraction).round() as usize).min(items.len());
    let (a, b) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut v: Vec<usize> = idx.to_vec();
        v.sort_by(|&x, &y| id(&items[x]).cmp(id(&items[y])));
        v.into_iter().map(|i| items[i].clone()).collect::<Vec<T>>()
    };
    Ok((pick(a), pick(b)))
}

/// Applies `norm` (if any) to raw samples and prepares model inputs.
pub fn prepare_inputs(samples: &[ExtractedSample], norm: Option<&NormStats>, parallel: bool) -> Result<Vec<SequenceInput>> {
    exec::try_map(samples, parallel, |s| {
        let mut s = s.clone();
        if let Some(n) = norm {
            n.apply(&mut s)?;
        }
        SequenceInput::from_sample(&s)
    })
}

/// Normalized training and test inputs with the statistics fitted on the
/// training side.
pub struct PreparedSplit {
    pub train: Vec<SequenceInput>,
    pub test: Vec<SequenceInput>,
    pub norm: NormStats,
}

pub fn prepare_split(samples: &[ExtractedSample], cfg: &TrainConfig) -> Result<PreparedSplit> {
    let (train, test) = split_dataset(samples, |s| s.id.as_str(), cfg.split, cfg.seed)?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let norm = NormStats::fit(&train)?;
    Ok(PreparedSplit {
        train: prepare_inputs(&train, Some(&norm), cfg.parallel)?,
        test: prepare_inputs(&test, Some(&norm), cfg.parallel)?,
        norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters at the lowest test loss (training loss without a test set).
    pub best: Model,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
}

/// Mean evaluation-mode loss over `inputs`.
pub fn mean_loss(model: &Model, inputs: &[SequenceInput], parallel: bool) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Contract("mean loss over an empty set".into()));
    }
    let losses = exec::try_map(inputs, parallel, |i| model.loss(i))?;
    Ok(losses.iter().sum::<f64>() / inputs.len() as f64)
}

fn dropout_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Mean loss and gradient over the sequences `batch` of `data`.  Per-chunk
/// results are summed in batch order, so the sum does not depend on the
/// worker count.
fn batch_gradient(model: &Model, data: &[SequenceInput], batch: &[usize], epoch: usize, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for chunk in batch.chunks(GRAD_CHUNK) {
        let parts = exec::try_map(chunk, cfg.parallel, |&i| {
            let mut rng = dropout_rng(cfg.seed, epoch, i);
            model.loss_and_grads(&data[i], Some(&mut rng))
        })?;
        for (l, g) in parts {
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x /= n);
    Ok((loss / n, grads))
}

/// Adam on shuffled mini-batches of whole sequences.  `on_epoch` sees each
/// epoch's losses and parameters, e.g. to write checkpoints.
pub fn train(
    mut model: Model,
    train: &[SequenceInput],
    test: &[SequenceInput],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("cannot train on an empty set".into()));
    }
    if let Some(s) = train.iter().chain(test).find(|s| s.steps > model.config.t_max) {
        return Err(Error::Contract(format!(
            "sequence {} has {} steps, more than t_max {}",
            s.id, s.steps, model.config.t_max
        )));
    }
    let mut opt = Adam::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let diverged = |epoch, step, loss| Error::Divergence { epoch, step, loss };
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch_gradient(&model, train, batch, epoch, cfg)?;
            let step = opt.steps() as usize + 1;
            if !loss.is_finite() {
                return Err(diverged(epoch, step, loss));
            }
            if let Some(c) = cfg.clip_norm {
                optim::clip_global_norm(&mut grads, c);
            }
            opt.step(&mut model.params, &grads)?;
        }
        let step = opt.steps() as usize;
        let train_loss = mean_loss(&model, train, cfg.parallel)?;
        if !train_loss.is_finite() {
            return Err(diverged(epoch, step, train_loss));
        }
        let test_loss = if test.is_empty() {
            None
        } else {
            let l = mean_loss(&model, test, cfg.parallel)?;
            if !l.is_finite() {
                return Err(diverged(epoch, step, l));
            }
            Some(l)
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            test_loss,
        };
        let score = test_loss.unwrap_or(train_loss);
        if score < best_loss {
            best_loss = score;
            best_epoch = epoch;
            best = model.clone();
        }
        on_epoch(&rec, &model)?;
        curve.push(rec);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        curve,
    })
}
