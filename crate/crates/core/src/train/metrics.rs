use std::collections::BTreeSet;

use serde::Serialize;

use crate::exec;
use crate::model::{Mode, Model, SequenceInput};
use crate::Result;

/// Accuracy plus macro-averaged F1, precision and recall.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Scores of `pred` against `truth`.  Macro averages run over the classes
/// that occur in `truth`; a class never predicted has precision 0.
pub fn macro_scores(truth: &[usize], pred: &[usize]) -> Scores {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    if truth.is_empty() {
        return Scores::default();
    }
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    let (mut f1, mut p, mut r) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|&(&a, &b)| a == c && b == c).count() as f64;
        let predicted = pred.iter().filter(|&&b| b == c).count() as f64;
        let actual = truth.iter().filter(|&&a| a == c).count() as f64;
        let pc = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let rc = tp / actual;
        p += pc;
        r += rc;
        f1 += if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
    }
    let k = classes.len() as f64;
    Scores {
        accuracy: correct as f64 / truth.len() as f64,
        f1: f1 / k,
        precision: p / k,
        recall: r / k,
    }
}

/// One decoded step, for audit dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepPrediction {
    pub id: String,
    pub t: usize,
    pub true_main: usize,
    pub true_sub: usize,
    pub pred_main: usize,
    pub pred_sub: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub steps: usize,
    pub main: Scores,
    pub sub: Scores,
    pub joint: Scores,
}

/// One CSV row of a report.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub config: String,
    pub split: String,
    pub mode: String,
    pub head: String,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricsReport {
    pub fn from_predictions(mode: Mode, preds: &[StepPrediction], n_sub: usize) -> Self {
        let tm: Vec<usize> = preds.iter().map(|p| p.true_main).collect();
        let pm: Vec<usize> = preds.iter().map(|p| p.pred_main).collect();
        let ts: Vec<usize> = preds.iter().map(|p| p.true_sub).collect();
        let ps: Vec<usize> = preds.iter().map(|p| p.pred_sub).collect();
        let tj: Vec<usize> = preds.iter().map(|p| p.true_main * n_sub + p.true_sub).collect();
        let pj: Vec<usize> = preds.iter().map(|p| p.pred_main * n_sub + p.pred_sub).collect();
        Self {
            mode,
            steps: preds.len(),
            main: macro_scores(&tm, &pm),
            sub: macro_scores(&ts, &ps),
            joint: macro_scores(&tj, &pj),
        }
    }

    pub fn heads(&self) -> [(&'static str, Scores); 3] {
        [("main", self.main), ("sub", self.sub), ("joint", self.joint)]
    }

    pub fn rows(&self, config: &str, split: &str) -> Vec<MetricsRow> {
        self.heads()
            .into_iter()
            .map(|(head, s)| MetricsRow {
                config: config.to_string(),
                split: split.to_string(),
                mode: self.mode.tag().to_string(),
                head: head.to_string(),
                accuracy: s.accuracy,
                f1: s.f1,
                precision: s.precision,
                recall: s.recall,
            })
            .collect()
    }
}

/// Decodes every sequence and scores all steps.
pub fn evaluate(model: &Model, inputs: &[SequenceInput], mode: Mode, parallel: bool) -> Result<(MetricsReport, Vec<StepPrediction>)> {
    let per_seq = exec::try_map(inputs, parallel, |input| {
        let p = model.forward(input, mode)?;
        Ok::<_, crate::Error>(
            input
                .labels
                .iter()
                .enumerate()
                .map(|(t, l)| StepPrediction {
                    id: input.id.clone(),
                    t: t + 1,
                    true_main: l.main.index(),
                    true_sub: l.sub.index(),
                    pred_main: p.main[t],
                    pred_sub: p.sub[t],
                })
                .collect::<Vec<_>>(),
        )
    })?;
    let preds: Vec<StepPrediction> = per_seq.into_iter().flatten().collect();
    Ok((MetricsReport::from_predictions(mode, &preds, model.config.n_sub_classes), preds))
}

/// Human-readable table of labelled reports.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:<5}  {:>4}", "config", "head", "mode");
    for h in ["acc", "f1", "prec", "rec"] {
        out.push_str(&format!("  {h:>6}"));
    }
    out.push('\n');
    for (label, r) in rows {
        for (head, s) in r.heads() {
            out.push_str(&format!(
                "{label:<width$}  {head:<5}  {:>4}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}\n",
                r.mode.tag(),
                s.accuracy,
                s.f1,
                s.precision,
                s.recall
            ));
        }
    }
    out
}
