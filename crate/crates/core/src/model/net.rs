//! The network on a [`Tape`]: graph encoders, design fusion, pooling,
//! the sequence decoder and the two classification heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderKind, ModelConfig, SequenceKind};
use super::input::{PreparedGraph, SequenceInput};
use super::params::ParameterStore;
use crate::geometry::OperationLabel;
use crate::tensor::{Axis, Tape, Tensor, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PE_BASE: f64 = 10000.0;

/// Parameters registered on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, track: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| {
                let v = if track { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    /// Binds already-registered leaves, e.g. from a gradient check.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSite {
    /// Weights over each node's neighbourhood (one column per head).
    Neighbourhood,
    /// Process nodes attending to design nodes.
    DesignFusion,
    /// Node weights of graph-level pooling.
    Pooling,
    LabelSelf,
    GraphSelf,
    Cross,
}

/// One recorded attention matrix.  Rows (or, with `segments`, groups of
/// rows per column) are the distributions that must sum to one.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub weights: Tensor,
    pub segments: Option<Vec<usize>>,
    pub causal: bool,
}

#[derive(Debug, Default)]
pub struct Trace {
    pub records: Vec<AttentionRecord>,
}

/// Per-forward context: dropout source and optional attention trace.
pub struct Context<'r> {
    pub dropout: Option<&'r mut ChaCha8Rng>,
    pub trace: Option<Trace>,
}

impl<'r> Context<'r> {
    pub fn eval() -> Self {
        Self {
            dropout: None,
            trace: None,
        }
    }

    fn record(&mut self, tape: &Tape, site: AttentionSite, w: Var, segments: Option<&[usize]>, causal: bool) {
        if let Some(t) = &mut self.trace {
            t.records.push(AttentionRecord {
                site,
                weights: tape.value(w).clone(),
                segments: segments.map(<[usize]>::to_vec),
                causal,
            });
        }
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout.as_deref_mut() else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Output of the graph encoder for one sequence.
pub struct Encoded {
    /// Node embeddings after fusion, all steps.
    pub nodes: Var,
    /// Pooled graph embeddings `T × d′`, before positional encoding.
    pub pooled: Var,
    /// Pooled embeddings plus positional encoding.
    pub sequence: Var,
}

pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub p: &'a Bound,
}

/// Sinusoidal encoding of `pos`: even columns `sin`, odd columns `cos`.
pub fn positional_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let freq = PE_BASE.powf(-((j / 2 * 2) as f64) / width as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn causal_mask(rows: usize, cols: usize) -> Vec<bool> {
    (0..rows * cols).map(|k| k % cols > k / cols).collect()
}

impl<'a> Net<'a> {
    fn w(&self, name: &str) -> Result<Var> {
        self.p.get(name)
    }

    fn affine(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.w(w)?)?;
        tape.add_row(y, self.w(b)?)
    }

    /// Edge-aware multi-head graph attention, heads averaged, ELU output.
    ///
    /// Per head `m`, `s_ij = LeakyReLU(a_dᵀ z_i + a_sᵀ z_j + a_eᵀ e_ij)` with
    /// `z = h W_n`, `e = r W_e`; weights are softmax-normalized over the
    /// incoming edges of `i` and the output is
    /// `ELU((1/M) Σ_m Σ_j α_ij (z_j + e_ij))`.  Projection and aggregation
    /// commute, so inputs are aggregated first and projected once.
    pub fn gat_layer(&self, tape: &mut Tape, prefix: &str, h: Var, g: &PreparedGraph, edges: Var, ctx: &mut Context) -> Result<Var> {
        let heads = self.config.n_heads;
        let d = self.config.d_latent;
        let n = g.node_count();
        let mut covered = vec![false; n];
        g.dst.iter().for_each(|&i| covered[i] = true);
        if covered.contains(&false) {
            return Err(Error::Contract("node with an empty neighbourhood".into()));
        }
        let w_node = self.w(&format!("{prefix}.w_node"))?;
        let w_edge = self.w(&format!("{prefix}.w_edge"))?;
        let a_dst = self.w(&format!("{prefix}.a_dst"))?;
        let a_src = self.w(&format!("{prefix}.a_src"))?;
        let a_edge = self.w(&format!("{prefix}.a_edge"))?;
        // Per-head blocks of the projections, stacked by rows, and the
        // projected score vectors W^(m) a^(m), one column per head.
        let mut node_blocks = Vec::with_capacity(heads);
        let mut edge_blocks = Vec::with_capacity(heads);
        let (mut u_dst, mut u_src, mut u_edge) = (Vec::new(), Vec::new(), Vec::new());
        for m in 0..heads {
            let wn = tape.slice(w_node, Axis::Cols, m * d, d)?;
            let we = tape.slice(w_edge, Axis::Cols, m * d, d)?;
            let ad = tape.slice(a_dst, Axis::Cols, m, 1)?;
            let asrc = tape.slice(a_src, Axis::Cols, m, 1)?;
            let ae = tape.slice(a_edge, Axis::Cols, m, 1)?;
            u_dst.push(tape.matmul(wn, ad)?);
            u_src.push(tape.matmul(wn, asrc)?);
            u_edge.push(tape.matmul(we, ae)?);
            node_blocks.push(wn);
            edge_blocks.push(we);
        }
        let u_dst = tape.concat(&u_dst, Axis::Cols)?;
        let u_src = tape.concat(&u_src, Axis::Cols)?;
        let u_edge = tape.concat(&u_edge, Axis::Cols)?;
        let s_dst = tape.matmul(h, u_dst)?;
        let s_src = tape.matmul(h, u_src)?;
        let s_edge = tape.matmul(edges, u_edge)?;
        let s_dst = tape.gather_rows(s_dst, &g.dst)?;
        let s_src = tape.gather_rows(s_src, &g.src)?;
        let s = tape.add(s_dst, s_src)?;
        let s = tape.add(s, s_edge)?;
        let s = tape.leaky_relu(s, self.config.leaky_slope)?;
        let alpha = tape.segment_softmax(s, &g.dst, n)?;
        ctx.record(tape, AttentionSite::Neighbourhood, alpha, Some(&g.dst), false);
        let edge_ids: Vec<usize> = (0..g.src.len()).collect();
        let agg_h = tape.aggregate_heads(alpha, h, &g.src, &g.dst, n)?;
        let agg_r = tape.aggregate_heads(alpha, edges, &edge_ids, &g.dst, n)?;
        let wn = tape.concat(&node_blocks, Axis::Rows)?;
        let we = tape.concat(&edge_blocks, Axis::Rows)?;
        let zh = tape.matmul(agg_h, wn)?;
        let zr = tape.matmul(agg_r, we)?;
        let sum = tape.add(zh, zr)?;
        let mean = tape.scale(sum, 1.0 / heads as f64)?;
        tape.elu(mean)
    }

    /// Two-layer per-node network that ignores adjacency.
    pub fn nn_encoder(&self, tape: &mut Tape, prefix: &str, h: Var) -> Result<Var> {
        let x = self.affine(tape, h, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let x = tape.elu(x)?;
        let x = self.affine(tape, x, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        tape.elu(x)
    }

    fn encode_nodes(&self, tape: &mut Tape, graph: &str, g: &PreparedGraph, ctx: &mut Context) -> Result<Var> {
        let mut h = tape.constant(g.nodes.clone());
        match self.config.encoder {
            EncoderKind::Gat => {
                let edges = tape.constant(g.edges.clone());
                for l in 0..self.config.n_gat_layers {
                    h = self.gat_layer(tape, &format!("enc.{graph}.gat{l}"), h, g, edges, ctx)?;
                }
                Ok(h)
            }
            EncoderKind::Nn => self.nn_encoder(tape, &format!("enc.{graph}.nn"), h),
        }
    }

    /// Rows `t − 1` of the time table for 1-based steps `t`.
    pub fn time_encode(&self, tape: &mut Tape, steps: &[usize]) -> Result<Var> {
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.config.t_max) {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={} (t_max)",
                self.config.t_max
            )));
        }
        let idx: Vec<usize> = steps.iter().map(|t| t - 1).collect();
        tape.embedding(self.w("enc.time.w_t")?, &idx)
    }

    /// Scaled dot-product attention per head; `mask[i·k + j]` hides key `j`
    /// from query `i`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
        site: AttentionSite,
        ctx: &mut Context,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dk = self.config.head_width();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, Axis::Cols, h * dk, dk)?;
            let kh = tape.slice(k, Axis::Cols, h * dk, dk)?;
            let vh = tape.slice(v, Axis::Cols, h * dk, dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let mut s = tape.scale(s, scale)?;
            if let Some(m) = mask {
                s = tape.masked_fill(s, m, f64::NEG_INFINITY)?;
            }
            let a = tape.softmax(s, Axis::Cols)?;
            ctx.record(tape, site, a, None, mask.is_some());
            outs.push(tape.matmul(a, vh)?);
        }
        tape.concat(&outs, Axis::Cols)
    }

    /// Process nodes `h` (queries) attend to design nodes (keys, values).
    pub fn fuse_design(&self, tape: &mut Tape, h: Var, design: Var, ctx: &mut Context) -> Result<Var> {
        if tape.value(design).rows() == 0 {
            return Err(Error::Contract("empty design graph".into()));
        }
        let q = tape.matmul(h, self.w("enc.fuse.w_q")?)?;
        let k = tape.matmul(design, self.w("enc.fuse.w_k")?)?;
        let v = tape.matmul(design, self.w("enc.fuse.w_v")?)?;
        self.attend(tape, q, k, v, None, AttentionSite::DesignFusion, ctx)
    }

    /// `φ([H̃ ‖ H′ ‖ h_time])` per node.
    pub fn fuse_features(&self, tape: &mut Tape, fused: Var, h: Var, time: Var, ctx: &mut Context) -> Result<Var> {
        let x = tape.concat(&[fused, h, time], Axis::Cols)?;
        let x = self.affine(tape, x, "enc.phi.w1", "enc.phi.b1")?;
        let x = tape.elu(x)?;
        let x = ctx.dropout(tape, x, self.config.dropout)?;
        self.affine(tape, x, "enc.phi.w2", "enc.phi.b2")
    }

    /// Softmax-weighted sum of node rows per graph; `graph_of` assigns each
    /// node to one of `graphs` outputs.
    pub fn attention_pool(&self, tape: &mut Tape, f: Var, graph_of: &[usize], graphs: usize, ctx: &mut Context) -> Result<Var> {
        let u = self.affine(tape, f, "enc.pool.w_p", "enc.pool.b_p")?;
        let u = tape.tanh(u)?;
        let s = tape.matmul(u, self.w("enc.pool.w")?)?;
        let beta = tape.segment_softmax(s, graph_of, graphs)?;
        ctx.record(tape, AttentionSite::Pooling, beta, Some(graph_of), false);
        let nodes: Vec<usize> = (0..graph_of.len()).collect();
        tape.aggregate_heads(beta, f, &nodes, graph_of, graphs)
    }

    pub fn encode(&self, tape: &mut Tape, input: &SequenceInput, ctx: &mut Context) -> Result<Encoded> {
        let steps = input.steps;
        if steps > self.config.t_max {
            return Err(Error::Contract(format!(
                "sequence {} has {steps} steps, more than t_max {}",
                input.id, self.config.t_max
            )));
        }
        let design = self.encode_nodes(tape, "design", &input.design, ctx)?;
        let h = self.encode_nodes(tape, "process", &input.process, ctx)?;
        let fused = self.fuse_design(tape, h, design, ctx)?;
        let node_t: Vec<usize> = input.node_step.iter().map(|s| s + 1).collect();
        let time = self.time_encode(tape, &node_t)?;
        let f = self.fuse_features(tape, fused, h, time, ctx)?;
        let pooled = self.attention_pool(tape, f, &input.node_step, steps, ctx)?;
        let d = self.config.d_latent;
        let pe: Vec<f64> = (1..=steps).flat_map(|t| positional_encoding(t, d)).collect();
        let pe = tape.constant(Tensor::matrix(steps, d, pe)?);
        let sequence = tape.add(pooled, pe)?;
        Ok(Encoded {
            nodes: f,
            pooled,
            sequence,
        })
    }

    /// BOS row followed by `Em_main[m] + Em_sub[s]` per history label.
    pub fn embed_labels(&self, tape: &mut Tape, history: &[OperationLabel]) -> Result<Var> {
        let bos = self.w("dec.bos")?;
        if history.is_empty() {
            return Ok(bos);
        }
        let main: Vec<usize> = history.iter().map(|l| l.main.index()).collect();
        let sub: Vec<usize> = history.iter().map(|l| l.sub.index()).collect();
        let m = tape.embedding(self.w("dec.em_main")?, &main)?;
        let s = tape.embedding(self.w("dec.em_sub")?, &sub)?;
        let rows = tape.add(m, s)?;
        tape.concat(&[bos, rows], Axis::Rows)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
        let mu = tape.mean(x, Axis::Cols)?;
        let mu = tape.expand(mu, r, c)?;
        let xc = tape.sub(x, mu)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.mean(sq, Axis::Cols)?;
        let var = tape.shift(var, LAYER_NORM_EPS)?;
        let sd = tape.sqrt(var)?;
        let sd = tape.expand(sd, r, c)?;
        let xn = tape.div(xc, sd)?;
        let gain = tape.expand(self.w(&format!("{prefix}.ln_gain"))?, r, c)?;
        let y = tape.mul(xn, gain)?;
        tape.add_row(y, self.w(&format!("{prefix}.ln_bias"))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn sublayer(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        kv: Var,
        masked: bool,
        site: AttentionSite,
        ctx: &mut Context,
    ) -> Result<Var> {
        let (tq, tk) = (tape.value(x).rows(), tape.value(kv).rows());
        let q = tape.matmul(x, self.w(&format!("{prefix}.w_q"))?)?;
        let k = tape.matmul(kv, self.w(&format!("{prefix}.w_k"))?)?;
        let v = tape.matmul(kv, self.w(&format!("{prefix}.w_v"))?)?;
        let mask = masked.then(|| causal_mask(tq, tk));
        let a = self.attend(tape, q, k, v, mask.as_deref(), site, ctx)?;
        let a = ctx.dropout(tape, a, self.config.dropout)?;
        let r = tape.add(x, a)?;
        self.layer_norm(tape, r, prefix)
    }

    /// Runs the sequence stack over label rows and graph rows of equal
    /// length; row `t` of the result is the representation for step `t`.
    pub fn decode(&self, tape: &mut Tape, labels: Var, graphs: Var, ctx: &mut Context) -> Result<Var> {
        let (tl, tg) = (tape.value(labels).rows(), tape.value(graphs).rows());
        if tl != tg {
            return Err(Error::Contract(format!(
                "label history has {tl} rows but the graph prefix has {tg}"
            )));
        }
        let masked = self.config.sequence == SequenceKind::Decoder;
        let (mut x, mut s) = (labels, graphs);
        for l in 0..self.config.n_decoder_layers {
            let p = format!("dec.layer{l}");
            x = self.sublayer(tape, &format!("{p}.label"), x, x, masked, AttentionSite::LabelSelf, ctx)?;
            s = self.sublayer(tape, &format!("{p}.graph"), s, s, masked, AttentionSite::GraphSelf, ctx)?;
            x = self.sublayer(tape, &format!("{p}.cross"), x, s, masked, AttentionSite::Cross, ctx)?;
        }
        Ok(x)
    }

    /// Main and sub logits for every row of `h`.
    pub fn classify(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        Ok((
            self.affine(tape, h, "head.main.w", "head.main.b")?,
            self.affine(tape, h, "head.sub.w", "head.sub.b")?,
        ))
    }

    /// Teacher-forced logits for the whole sequence.
    pub fn teacher_forced(&self, tape: &mut Tape, input: &SequenceInput, ctx: &mut Context) -> Result<Logits> {
        let enc = self.encode(tape, input, ctx)?;
        let labels = self.embed_labels(tape, &input.labels[..input.steps - 1])?;
        let out = self.decode(tape, labels, enc.sequence, ctx)?;
        let (main, sub) = self.classify(tape, out)?;
        Ok(Logits { enc, out, main, sub })
    }

    /// `(1/T) Σ_t [CE_main(t) + CE_sub(t)]` as a `1 × 1` tensor.
    pub fn sequence_loss(&self, tape: &mut Tape, logits: &Logits, input: &SequenceInput) -> Result<Var> {
        sequence_loss(tape, logits.main, logits.sub, &input.main_targets(), &input.sub_targets())
    }
}

pub struct Logits {
    pub enc: Encoded,
    pub out: Var,
    pub main: Var,
    pub sub: Var,
}

/// Mean over rows of the summed cross-entropies of both heads.
pub fn sequence_loss(tape: &mut Tape, main: Var, sub: Var, y_main: &[usize], y_sub: &[usize]) -> Result<Var> {
    let t = y_main.len();
    if t == 0 || y_sub.len() != t {
        return Err(Error::Contract("loss needs one main and one sub target per step".into()));
    }
    let lm = tape.log_softmax(main)?;
    let ls = tape.log_softmax(sub)?;
    let pm = tape.pick(lm, y_main)?;
    let ps = tape.pick(ls, y_sub)?;
    let both = tape.add(pm, ps)?;
    let total = tape.sum_all(both)?;
    tape.scale(total, -1.0 / t as f64)
}
