//! Sequence model over process and design graphs.

pub mod config;
pub mod input;
pub mod net;
pub mod params;

pub use config::{EncoderKind, ModelConfig, SequenceKind};
pub use input::{PreparedGraph, SequenceInput};
pub use net::{AttentionRecord, AttentionSite, Bound, Context, Net, Trace};
pub use params::{Checkpoint, ParameterStore};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{MainOp, OperationLabel, SubOp};
use crate::tensor::{Axis, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    /// Ground-truth label history.
    #[default]
    #[serde(rename = "tf")]
    TeacherForced,
    /// Greedy decoding on the model's own predictions.
    #[serde(rename = "ar")]
    Autoregressive,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tf" | "teacher_forced" => Ok(Mode::TeacherForced),
            "ar" | "autoregressive" => Ok(Mode::Autoregressive),
            other => Err(Error::Config(format!("unknown mode `{other}`, expected tf or ar"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Mode::TeacherForced => "tf",
            Mode::Autoregressive => "ar",
        }
    }
}

/// Per-step outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub main_logits: Tensor,
    pub sub_logits: Tensor,
    /// Decoder output row per step.
    pub step_embeddings: Tensor,
    /// Pooled graph embeddings before positional encoding.
    pub graph_embeddings: Tensor,
    pub main: Vec<usize>,
    pub sub: Vec<usize>,
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|i| argmax(t.row_slice(i))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, input: &SequenceInput, mode: Mode) -> Result<Prediction> {
        match mode {
            Mode::TeacherForced => self.forward_traced(input, &mut Context::eval()),
            Mode::Autoregressive => self.autoregressive(input),
        }
    }

    /// Teacher-forced forward with a caller-supplied context (trace, dropout).
    pub fn forward_traced(&self, input: &SequenceInput, ctx: &mut Context) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params, false);
        let net = Net {
            config: &self.config,
            p: &bound,
        };
        let l = net.teacher_forced(&mut tape, input, ctx)?;
        let main = tape.value(l.main).clone();
        let sub = tape.value(l.sub).clone();
        Ok(Prediction {
            main: argmax_rows(&main),
            sub: argmax_rows(&sub),
            main_logits: main,
            sub_logits: sub,
            step_embeddings: tape.value(l.out).clone(),
            graph_embeddings: tape.value(l.enc.pooled).clone(),
        })
    }

    fn autoregressive(&self, input: &SequenceInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params, false);
        let net = Net {
            config: &self.config,
            p: &bound,
        };
        let mut ctx = Context::eval();
        let enc = net.encode(&mut tape, input, &mut ctx)?;
        let steps = input.steps;
        let mut history: Vec<OperationLabel> = Vec::with_capacity(steps);
        let (mut mains, mut subs, mut outs) = (Vec::new(), Vec::new(), Vec::new());
        let (mut main, mut sub) = (Vec::new(), Vec::new());
        for t in 1..=steps {
            let labels = net.embed_labels(&mut tape, &history)?;
            let graphs = tape.slice(enc.sequence, Axis::Rows, 0, t)?;
            let out = net.decode(&mut tape, labels, graphs, &mut ctx)?;
            let last = tape.slice(out, Axis::Rows, t - 1, 1)?;
            let (lm, ls) = net.classify(&mut tape, last)?;
            let (m, s) = (argmax(&tape.value(lm).data), argmax(&tape.value(ls).data));
            main.push(m);
            sub.push(s);
            mains.extend_from_slice(&tape.value(lm).data);
            subs.extend_from_slice(&tape.value(ls).data);
            outs.extend_from_slice(&tape.value(last).data);
            // The history keeps the raw head outputs even if they disagree on
            // the main group of the predicted sub operation.
            let sub_op = SubOp::from_index(s).expect("sub head width");
            history.push(OperationLabel {
                main: MainOp::from_index(m).expect("main head width"),
                sub: sub_op,
            });
        }
        Ok(Prediction {
            main_logits: Tensor::matrix(steps, self.config.n_main_classes, mains)?,
            sub_logits: Tensor::matrix(steps, self.config.n_sub_classes, subs)?,
            step_embeddings: Tensor::matrix(steps, self.config.d_latent, outs)?,
            graph_embeddings: tape.value(enc.pooled).clone(),
            main,
            sub,
        })
    }

    /// Teacher-forced loss and parameter gradients for one sequence.
    pub fn loss_and_grads(&self, input: &SequenceInput, dropout: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params, true);
        let net = Net {
            config: &self.config,
            p: &bound,
        };
        let mut ctx = Context { dropout, trace: None };
        let logits = net.teacher_forced(&mut tape, input, &mut ctx)?;
        let loss = net.sequence_loss(&mut tape, &logits, input)?;
        tape.backward(loss)?;
        let grads = bound.iter().map(|(_, v)| tape.grad(v)).collect();
        Ok((tape.value(loss).data[0], grads))
    }

    /// Teacher-forced loss without gradients.
    pub fn loss(&self, input: &SequenceInput) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params, false);
        let net = Net {
            config: &self.config,
            p: &bound,
        };
        let logits = net.teacher_forced(&mut tape, input, &mut Context::eval())?;
        let loss = net.sequence_loss(&mut tape, &logits, input)?;
        Ok(tape.value(loss).data[0])
    }

    /// All attention matrices of one teacher-forced evaluation pass.
    pub fn attention_trace(&self, input: &SequenceInput) -> Result<Trace> {
        let mut ctx = Context {
            dropout: None,
            trace: Some(Trace::default()),
        };
        self.forward_traced(input, &mut ctx)?;
        Ok(ctx.trace.unwrap_or_default())
    }
}
