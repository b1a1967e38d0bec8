//! Whole runs: train-and-evaluate, hyperparameter sweeps, ablations and
//! embedding export.

use serde::Serialize;

use crate::exec;
use crate::graph::{ExtractedSample, NormStats};
use crate::model::{EncoderKind, Mode, Model, SequenceInput, SequenceKind};
use crate::{Error, Result};

use super::config::{ExperimentConfig, SweepGrid};
use super::metrics::{evaluate, MetricsReport, StepPrediction};
use super::{prepare_split, train, EpochRecord, TrainOutcome};

/// Column prefix of embedding components in exported tables.
pub const EMBEDDING_PREFIX: &str = "g";

pub struct Experiment {
    pub config: ExperimentConfig,
    pub norm: NormStats,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub outcome: TrainOutcome,
    /// Metrics of the final parameters on each split.
    pub train_report: MetricsReport,
    pub test_report: Option<MetricsReport>,
    pub test_predictions: Vec<StepPrediction>,
}

/// Splits, normalizes, trains from a seeded initialization and scores the
/// final parameters on both splits.
pub fn run_experiment(
    samples: &[ExtractedSample],
    exp: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model, &NormStats) -> Result<()>,
) -> Result<Experiment> {
    exp.validate()?;
    let cfg = &exp.train;
    let data = prepare_split(samples, cfg)?;
    let model = Model::new(exp.model.clone(), cfg.seed)?;
    let norm = &data.norm;
    let outcome = train(model, &data.train, &data.test, cfg, &mut |r, m| on_epoch(r, m, norm))?;
    let (train_report, _) = evaluate(&outcome.model, &data.train, cfg.eval_mode, cfg.parallel)?;
    let (test_report, test_predictions) = if data.test.is_empty() {
        (None, Vec::new())
    } else {
        let (r, p) = evaluate(&outcome.model, &data.test, cfg.eval_mode, cfg.parallel)?;
        (Some(r), p)
    };
    Ok(Experiment {
        config: exp.clone(),
        norm: data.norm,
        train_ids: data.train.iter().map(|s| s.id.clone()).collect(),
        test_ids: data.test.iter().map(|s| s.id.clone()).collect(),
        outcome,
        train_report,
        test_report,
        test_predictions,
    })
}

/// One experiment per grid row, all on the same data and seed.
pub fn sweep(
    samples: &[ExtractedSample],
    grid: &SweepGrid,
    on_run: &mut dyn FnMut(&str, &Experiment) -> Result<()>,
) -> Result<Vec<(String, Experiment)>> {
    let base = grid.base();
    let mut out = Vec::with_capacity(grid.run.len());
    for row in &grid.run {
        let label = row.label();
        let exp = run_experiment(samples, &row.apply(&base), &mut |_, _, _| Ok(()))?;
        on_run(&label, &exp)?;
        out.push((label, exp));
    }
    Ok(out)
}

/// Variant labels of [`run_ablations`], in run order.
pub const ABLATIONS: [&str; 3] = ["nn_based", "encoder_based", "full"];

/// The per-node encoder variant, the unmasked sequence variant and the full
/// model under identical data and seed.
pub fn run_ablations(
    samples: &[ExtractedSample],
    base: &ExperimentConfig,
    on_run: &mut dyn FnMut(&str, &Experiment) -> Result<()>,
) -> Result<Vec<(String, Experiment)>> {
    let mut out = Vec::with_capacity(ABLATIONS.len());
    for name in ABLATIONS {
        let mut cfg = base.clone();
        let (encoder, sequence) = match name {
            "nn_based" => (EncoderKind::Nn, SequenceKind::Decoder),
            "encoder_based" => (EncoderKind::Gat, SequenceKind::Encoder),
            _ => (EncoderKind::Gat, SequenceKind::Decoder),
        };
        cfg.model.encoder = encoder;
        cfg.model.sequence = sequence;
        let exp = run_experiment(samples, &cfg, &mut |_, _, _| Ok(()))?;
        on_run(name, &exp)?;
        out.push((name.to_string(), exp));
    }
    Ok(out)
}

/// Decoder representation of one step with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub t: usize,
    pub main: usize,
    pub sub: usize,
    pub values: Vec<f64>,
}

/// Teacher-forced step embeddings of every sequence.
pub fn export_embeddings(model: &Model, inputs: &[SequenceInput], parallel: bool) -> Result<Vec<EmbeddingRow>> {
    let per_seq = exec::try_map(inputs, parallel, |input| {
        let p = model.forward(input, Mode::TeacherForced)?;
        Ok::<_, Error>(
            input
                .labels
                .iter()
                .enumerate()
                .map(|(t, l)| EmbeddingRow {
                    id: input.id.clone(),
                    t: t + 1,
                    main: l.main.index(),
                    sub: l.sub.index(),
                    values: p.step_embeddings.row_slice(t).to_vec(),
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_seq.into_iter().flatten().collect())
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Serializes `rows` with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> Result<String> {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "t".into(), "main".into(), "sub".into()];
    header.extend((0..width).map(|j| format!("{EMBEDDING_PREFIX}{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.t.to_string(), r.main.to_string(), r.sub.to_string()];
        rec.extend(r.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
}
