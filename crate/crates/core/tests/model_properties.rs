//! Whole-model properties on small generated sequences.

use machplan::geometry::synth::{generate_dataset, GridSpec};
use machplan::geometry::{OperationLabel, SubOp};
use machplan::graph::{extract_sequence, ExtractedSample, Graph, Matrix, NormStats};
use machplan::model::{Bound, Checkpoint, Context, Mode, Model, ModelConfig, Net, SequenceInput};
use machplan::tensor::{grad_check, Tape, Tensor};
use machplan::train::prepare_inputs;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_GRID: &str = r#"
segments = 8
jitter = 1.0

[[family]]
family = "simple"
length = [40.0, 48.0]
width = [30.0]
height = [12.0]
face_reduction = [0.0, 1.0]

[[family.feature]]
kind = "rect_pocket"
u = [0.3]
v = [0.5]
dims = [[10.0, 6.0], [8.0, 8.0]]
depth = [3.0]

[[family.feature]]
kind = "circ_hole"
u = [0.75]
v = [0.5]
dims = [[4.0]]
depth = [5.0, 20.0]
countersink = [0.0, 7.0]
optional = true
"#;

fn toy_samples() -> Vec<ExtractedSample> {
    let grid = GridSpec::from_toml(TOY_GRID).unwrap();
    let raw: Vec<ExtractedSample> = generate_dataset(5, &grid)
        .unwrap()
        .iter()
        .map(|s| extract_sequence(s).unwrap())
        .collect();
    let norm = NormStats::fit(&raw).unwrap();
    raw.into_iter()
        .map(|mut s| {
            norm.apply(&mut s).unwrap();
            s
        })
        .collect()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_latent: 8,
        n_heads: 2,
        ffn_width: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// A model whose classifier heads are random instead of zero, so every
/// parameter influences the logits.
fn live_model(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for name in ["head.main.w", "head.main.b", "head.sub.w", "head.sub.b"] {
        let t = m.params.get_mut(name).unwrap();
        t.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    m
}

fn input(s: &ExtractedSample) -> SequenceInput {
    SequenceInput::from_sample(s).unwrap()
}

fn bits(t: &Tensor, rows: usize) -> Vec<u64> {
    t.data[..rows * t.cols()].iter().map(|x| x.to_bits()).collect()
}

#[test]
fn toy_grid_has_varied_lengths() {
    let s = toy_samples();
    let lens: std::collections::BTreeSet<usize> = s.iter().map(|x| x.labels.len()).collect();
    assert!(s.len() >= 8, "{}", s.len());
    assert!(lens.len() >= 3, "{lens:?}");
}

#[test]
fn zero_heads_predict_class_zero() {
    let samples = toy_samples();
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    for s in samples.iter().take(3) {
        for mode in [Mode::TeacherForced, Mode::Autoregressive] {
            let p = model.forward(&input(s), mode).unwrap();
            assert!(p.main.iter().all(|&m| m == 0));
            assert!(p.sub.iter().all(|&m| m == 0));
            assert!(p.main_logits.data.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn one_hot_bias_fixes_the_prediction() {
    let samples = toy_samples();
    let mut model = Model::new(small_config(), 1).unwrap();
    model.params.get_mut("head.main.b").unwrap().data = vec![0.0, 0.0, 1.0];
    let p = model.forward(&input(&samples[0]), Mode::TeacherForced).unwrap();
    assert!(p.main.iter().all(|&m| m == 2));
}

fn perturb_graph(g: &mut Graph, rng: &mut ChaCha8Rng) {
    g.node_features.data.iter_mut().for_each(|x| *x += rng.gen_range(-3.0..3.0));
    g.edge_features.data.iter_mut().for_each(|x| *x *= rng.gen_range(0.5..2.0));
}

#[test]
fn future_graphs_and_labels_do_not_reach_earlier_steps() {
    let samples = toy_samples();
    let model = live_model(small_config(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in samples.iter().filter(|s| s.labels.len() >= 3) {
        let base = model.forward(&input(s), Mode::TeacherForced).unwrap();
        for t in 1..s.labels.len() {
            let mut changed = s.clone();
            for p in &mut changed.process[t..] {
                perturb_graph(&mut p.graph, &mut rng);
            }
            for l in &mut changed.labels[t..] {
                *l = OperationLabel::new(SubOp::CurveDrive);
            }
            let p = model.forward(&input(&changed), Mode::TeacherForced).unwrap();
            assert_eq!(bits(&p.main_logits, t), bits(&base.main_logits, t));
            assert_eq!(bits(&p.sub_logits, t), bits(&base.sub_logits, t));
            assert_eq!(bits(&p.step_embeddings, t), bits(&base.step_embeddings, t));
        }
    }
}

#[test]
fn unmasked_sequence_variant_does_see_the_future() {
    let samples = toy_samples();
    let mut cfg = small_config();
    cfg.sequence = machplan::model::SequenceKind::Encoder;
    let model = live_model(cfg, 2);
    let s = samples.iter().find(|s| s.labels.len() >= 3).unwrap();
    let base = model.forward(&input(s), Mode::TeacherForced).unwrap();
    let mut changed = s.clone();
    changed.labels[1] = OperationLabel::new(SubOp::CurveDrive);
    let p = model.forward(&input(&changed), Mode::TeacherForced).unwrap();
    assert_ne!(bits(&p.main_logits, 1), bits(&base.main_logits, 1));
}

#[test]
fn every_attention_distribution_sums_to_one() {
    let samples = toy_samples();
    let mut sites = std::collections::BTreeSet::new();
    for (k, s) in samples.iter().enumerate().take(6) {
        let model = live_model(small_config(), k as u64);
        let trace = model.attention_trace(&input(s)).unwrap();
        for rec in &trace.records {
            sites.insert(format!("{:?}", rec.site));
            let w = &rec.weights;
            match &rec.segments {
                Some(seg) => {
                    let groups = seg.iter().max().unwrap() + 1;
                    let mut sums = vec![0.0; groups * w.cols()];
                    for (i, &g) in seg.iter().enumerate() {
                        for c in 0..w.cols() {
                            sums[g * w.cols() + c] += w.at(i, c);
                        }
                    }
                    assert!(sums.iter().all(|x| (x - 1.0).abs() < 1e-10), "{:?}", rec.site);
                }
                None => {
                    for i in 0..w.rows() {
                        let sum: f64 = w.row_slice(i).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-10, "{:?}", rec.site);
                        if rec.causal {
                            assert!(w.row_slice(i)[i + 1..].iter().all(|&x| x == 0.0));
                        }
                    }
                }
            }
        }
    }
    assert_eq!(sites.len(), 6, "{sites:?}");
}

fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    // Row `i` of the result is row `perm[i]` of the input.
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let cols = g.node_features.cols;
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| g.node_features.row(p).to_vec()).collect();
    Graph {
        node_features: Matrix::from_rows(cols, &rows).unwrap(),
        edge_index: g.edge_index.iter().map(|[a, b]| [inv[*a], inv[*b]]).collect(),
        edge_features: g.edge_features.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn node_order_does_not_change_pooled_embeddings(pick in 0usize..64, seed in 0u64..1000) {
        let samples = toy_samples();
        let s = &samples[pick % samples.len()];
        let model = live_model(small_config(), seed);
        let base = model.forward(&input(s), Mode::TeacherForced).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut changed = s.clone();
        for p in &mut changed.process {
            let mut perm: Vec<usize> = (0..p.graph.node_count()).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            p.graph = permute_graph(&p.graph, &perm);
        }
        let mut perm: Vec<usize> = (0..changed.design.graph.node_count()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        changed.design.graph = permute_graph(&changed.design.graph, &perm);
        let p = model.forward(&input(&changed), Mode::TeacherForced).unwrap();
        for (a, b) in p.graph_embeddings.data.iter().zip(&base.graph_embeddings.data) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn pooled_step_depends_only_on_its_own_graph(pick in 0usize..64, seed in 0u64..1000) {
        let samples = toy_samples();
        let s = &samples[pick % samples.len()];
        prop_assume!(s.labels.len() >= 2);
        let model = live_model(small_config(), seed);
        let base = model.forward(&input(s), Mode::TeacherForced).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(0..s.labels.len());
        let mut changed = s.clone();
        perturb_graph(&mut changed.process[k].graph, &mut rng);
        let p = model.forward(&input(&changed), Mode::TeacherForced).unwrap();
        let d = p.graph_embeddings.cols();
        for t in (0..s.labels.len()).filter(|&t| t != k) {
            prop_assert_eq!(&p.graph_embeddings.data[t * d..(t + 1) * d], &base.graph_embeddings.data[t * d..(t + 1) * d]);
        }
        prop_assert_ne!(&p.graph_embeddings.data[k * d..(k + 1) * d], &base.graph_embeddings.data[k * d..(k + 1) * d]);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bit_exactly() {
    let samples = toy_samples();
    let model = live_model(small_config(), 4);
    let norm = NormStats::fit(&samples).unwrap();
    let ckpt = Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        norm: Some(norm.clone()),
    };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ckpt);
    let restored = Model {
        config: back.config,
        params: back.params,
    };
    for s in samples.iter().take(4) {
        for mode in [Mode::TeacherForced, Mode::Autoregressive] {
            let (a, b) = (model.forward(&input(s), mode).unwrap(), restored.forward(&input(s), mode).unwrap());
            assert_eq!(bits(&a.main_logits, a.main_logits.rows()), bits(&b.main_logits, b.main_logits.rows()));
            assert_eq!(bits(&a.sub_logits, a.sub_logits.rows()), bits(&b.sub_logits, b.sub_logits.rows()));
        }
    }
}

/// Loss summed over `inputs` with parameters taken from tape leaves.
fn loss_on_tape(tape: &mut Tape, vars: &[machplan::tensor::Var], names: &[String], cfg: &ModelConfig, inputs: &[SequenceInput]) -> machplan::Result<machplan::tensor::Var> {
    let bound = Bound::from_vars(names.iter().cloned(), vars);
    let net = Net { config: cfg, p: &bound };
    let mut total = None;
    for i in inputs {
        let logits = net.teacher_forced(tape, i, &mut Context::eval())?;
        let l = net.sequence_loss(tape, &logits, i)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least one sequence"))
}

fn two_step_inputs() -> Vec<SequenceInput> {
    let samples = toy_samples();
    let picked: Vec<ExtractedSample> = samples.into_iter().filter(|s| s.labels.len() == 2).take(2).collect();
    assert_eq!(picked.len(), 2);
    prepare_inputs(&picked, None, false).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let inputs = two_step_inputs();
    let cfg = small_config();
    let model = live_model(cfg.clone(), 6);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let err = grad_check(|tape, vars| loss_on_tape(tape, vars, &names, &cfg, &inputs), &params, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn time_table_gradient_touches_only_observed_steps() {
    let inputs = two_step_inputs();
    let cfg = small_config();
    let model = live_model(cfg.clone(), 7);
    let (_, grads) = model.loss_and_grads(&inputs[0], None).unwrap();
    let k = model.params.names().position(|n| n == "enc.time.w_t").unwrap();
    let g = &grads[k];
    for t in 0..cfg.t_max {
        let row_norm: f64 = g.row_slice(t).iter().map(|x| x.abs()).sum();
        if t < inputs[0].steps {
            assert!(row_norm > 0.0, "row {t} should receive gradient");
        } else {
            assert_eq!(row_norm, 0.0, "row {t} is never used");
        }
    }
    // The nonzero rows agree with central differences.
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let fixed = model.params.clone();
    let single = &inputs[..1];
    let err = grad_check(
        |tape, vars| {
            let all: Vec<machplan::tensor::Var> = names
                .iter()
                .map(|n| if n == "enc.time.w_t" { vars[0] } else { tape.constant(fixed.get(n).unwrap().clone()) })
                .collect();
            loss_on_tape(tape, &all, &names, &cfg, single)
        },
        &[fixed.get("enc.time.w_t").unwrap().clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn horizon_beyond_t_max_is_a_contract_error() {
    let samples = toy_samples();
    let s = samples.iter().find(|s| s.labels.len() >= 3).unwrap();
    let cfg = ModelConfig {
        t_max: 2,
        ..small_config()
    };
    let model = Model::new(cfg, 0).unwrap();
    let err = model.forward(&input(s), Mode::TeacherForced).unwrap_err();
    assert!(err.to_string().contains("t_max"), "{err}");
}
