//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mgts_core::config::{ModelConfig, RunConfig, TrainConfig};
use mgts_core::graph::{HeteroGraph, NodeId, Relation, RelationLayer};
use mgts_core::nn::Linear;
use mgts_core::params::{ParamBuilder, ParamStore};
use mgts_core::predictor::{AdaptiveWeights, ScaleHead};
use mgts_core::temporal::{Expert, Ftc, MoeBlock};
use mgts_core::graph::build_graph_with;
use mgts_core::graph::GraphOptions;
use mgts_core::tensor::{grad_check, grad_check_params, Tape, Tensor, Var};
use mgts_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(v * R)` for a fixed pseudo-random `R`, so every output coordinate
/// gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = tape.constant(uniform(&shape, 4242));
    let p = tape.mul(v, r)?;
    Ok(tape.sum(p))
}

/// Small enough for exhaustive central differences.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_len: 16,
        horizon: 7,
        d_model: 6,
        patch_len: 4,
        patch_stride: 4,
        n_experts: 3,
        top_k: 2,
        n_blocks: 1,
        ffn_mult: 2,
        chart_height: 4,
        image_depth: 1,
        graph_layers: 1,
        past_window: 1,
        future_window: 1,
        head_scales: vec![2, 3, 5],
        weight_hidden: 5,
        ..ModelConfig::default()
    }
}

/// The learnability setting: two sine-plus-trend variables, L = H = 96,
/// d = 32, two blocks of four experts with top-2 routing.
pub fn synthetic_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            input_len: 96,
            horizon: 96,
            d_model: 32,
            n_blocks: 2,
            n_experts: 4,
            top_k: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            initial_lr: 3e-3,
            max_steps: Some(200),
            eval_stride: 4,
            ..TrainConfig::default()
        },
    }
}

/// A fast configuration for end-to-end pipeline checks.
pub fn quick_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            input_len: 32,
            horizon: 8,
            d_model: 8,
            patch_len: 8,
            patch_stride: 8,
            n_experts: 3,
            top_k: 2,
            n_blocks: 1,
            chart_height: 8,
            image_depth: 1,
            graph_layers: 1,
            head_scales: vec![3, 5],
            weight_hidden: 4,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            initial_lr: 3e-3,
            train_stride: 4,
            eval_stride: 4,
            seed: 5,
            ..TrainConfig::default()
        },
    }
}

/// Worst relative gradient error of one module, over its input and its
/// parameters.
pub struct GradResult {
    pub module: &'static str,
    pub input_error: f64,
    pub param_error: f64,
    pub worst_param: String,
}

impl GradResult {
    pub fn max(&self) -> f64 {
        self.input_error.max(self.param_error)
    }
}

fn check<F>(module: &'static str, store: &ParamStore, input: &Tensor, eps: f64, f: F) -> Result<GradResult>
where
    F: Fn(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let input_error = grad_check(|tape, x| f(tape, store, x), input, eps)?;
    let report = grad_check_params(
        store,
        |tape, s| {
            let x = tape.constant(input.clone());
            f(tape, s, x)
        },
        eps,
        64,
    )?;
    Ok(GradResult {
        module,
        input_error,
        param_error: report.max_rel_error,
        worst_param: report.worst_param,
    })
}

/// Gradient checks for every differentiable building block.
pub fn module_grad_checks(eps: f64, seed: u64) -> Result<Vec<GradResult>> {
    let cfg = tiny_model_config();
    let d = cfg.d_model;
    let tokens = 4;
    let x = uniform(&[tokens, d], seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let ftc = Ftc::new(&mut ParamBuilder::new(&mut store, seed), "ftc", d, 3)?;
    out.push(check("ftc", &store, &x, eps, |t, s, x| {
        let y = ftc.forward(t, s, x)?;
        probe(t, y)
    })?);

    let mut store = ParamStore::new();
    let expert = Expert::new(&mut ParamBuilder::new(&mut store, seed + 1), "expert", &cfg, true)?;
    out.push(check("expert_blend", &store, &x, eps, |t, s, x| {
        let y = expert.forward(t, s, x)?;
        probe(t, y)
    })?);

    let mut store = ParamStore::new();
    let block = MoeBlock::new(&mut ParamBuilder::new(&mut store, seed + 2), "block", &cfg, 0)?;
    out.push(check("moe_block", &store, &x, eps, |t, s, x| {
        let y = block.forward(t, s, x)?;
        probe(t, y)
    })?);

    let graph = build_graph_with(3, 2, 1, 1, GraphOptions { cross_symmetric: true, text_bidirectional: true });
    let mut store = ParamStore::new();
    let layer = RelationLayer::new(&mut ParamBuilder::new(&mut store, seed + 3), "rel", d)?;
    let feats = uniform(&[graph.num_nodes(), d], seed + 30);
    out.push(check("relational_layer", &store, &feats, eps, |t, s, x| {
        let y = layer.forward(t, s, &graph, x)?;
        probe(t, y)
    })?);

    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, seed + 4);
    let heads: Vec<ScaleHead> = [2, 3, 5]
        .iter()
        .enumerate()
        .map(|(m, &p)| ScaleHead::new(&mut pb, &format!("head{m}"), d, p, 7, 2))
        .collect::<Result<_>>()?;
    out.push(check("scale_heads", &store, &x, eps, |t, s, x| {
        let mut total = None;
        for h in &heads {
            let y = h.forward(t, s, x)?;
            let p = probe(t, y)?;
            total = Some(match total {
                Some(a) => t.add(a, p)?,
                None => p,
            });
        }
        Ok(total.unwrap())
    })?);

    let mut store = ParamStore::new();
    let weights = AdaptiveWeights::new(&mut ParamBuilder::new(&mut store, seed + 5), d, 5, 3)?;
    out.push(check("weight_mlp", &store, &x, eps, |t, s, x| {
        let y = weights.forward(t, s, x)?;
        probe(t, y)
    })?);

    Ok(out)
}

/// Every directed edge the set-builder definitions admit, found by testing
/// each relation against every ordered node pair.
pub fn brute_force_edges(t: usize, n: usize, wp: usize, wf: usize) -> BTreeSet<(Relation, NodeId, NodeId)> {
    let mut nodes = Vec::new();
    nodes.extend((0..t).map(NodeId::series));
    nodes.extend((0..t).map(NodeId::image));
    nodes.extend((0..n).map(NodeId::text));
    use mgts_core::graph::Modality::*;
    let mut set = BTreeSet::new();
    for &src in &nodes {
        for &dst in &nodes {
            let (j, i) = (src.index as i64, dst.index as i64);
            let (wp, wf) = (wp as i64, wf as i64);
            let mut admit = |rel| {
                set.insert((rel, src, dst));
            };
            match (src.modality, dst.modality) {
                (Series, Image) | (Image, Series) if i == j => admit(Relation::CrossTi),
                (Text, Series) => admit(Relation::TextSeries),
                (Text, Image) => admit(Relation::TextImage),
                _ => {}
            }
            if src.modality == dst.modality && src.modality != Text {
                let (past, future) = match src.modality {
                    Series => (Relation::PastSeries, Relation::FutureSeries),
                    _ => (Relation::PastImage, Relation::FutureImage),
                };
                if i - wp <= j && j < i {
                    admit(past);
                }
                if i < j && j <= i + wf {
                    admit(future);
                }
            }
        }
    }
    set
}

pub fn graph_edge_set(g: &HeteroGraph) -> BTreeSet<(Relation, NodeId, NodeId)> {
    Relation::ALL
        .iter()
        .flat_map(|&r| g.edges(r).iter().map(move |&(s, d)| (r, s, d)))
        .collect()
}

fn row_times(row: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (k, &x) in row.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += x * w.at(k, c);
        }
    }
    out
}

fn weight_of(store: &ParamStore, lin: &Linear) -> Tensor {
    store.get(lin.weight).clone()
}

/// Per-edge message passing: for each node, the self term plus, per
/// relation, the mean of transformed neighbor features, then ReLU.
pub fn naive_relational_layer(store: &ParamStore, layer: &RelationLayer, graph: &HeteroGraph, feats: &Tensor) -> Tensor {
    let n = graph.num_nodes();
    let d = feats.cols();
    let mut out = Vec::with_capacity(n * d);
    let mut nodes = Vec::new();
    nodes.extend((0..graph.patches).map(NodeId::series));
    nodes.extend((0..graph.patches).map(NodeId::image));
    nodes.extend((0..graph.texts).map(NodeId::text));
    for &node in &nodes {
        let row = feats.row(graph.position(node));
        let mut acc = row_times(row, &weight_of(store, &layer.self_weight));
        for rel in Relation::ALL {
            let sources: Vec<NodeId> = graph.edges(rel).iter().filter(|(_, dst)| *dst == node).map(|(s, _)| *s).collect();
            if sources.is_empty() {
                continue;
            }
            let w = weight_of(store, layer.weight(rel));
            for src in &sources {
                let msg = row_times(feats.row(graph.position(*src)), &w);
                for (a, m) in acc.iter_mut().zip(msg) {
                    *a += m / sources.len() as f64;
                }
            }
        }
        out.extend(acc.into_iter().map(|v| v.max(0.0)));
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// Repeats the last input row across the horizon.
pub fn last_value_forecast(x_enc: &Tensor, horizon: usize) -> Tensor {
    let last = x_enc.row(x_enc.rows() - 1).to_vec();
    Tensor::new(vec![horizon, last.len()], last.repeat(horizon)).unwrap()
}
