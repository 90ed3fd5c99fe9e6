//! The assembled forecaster: temporal, image and text encoders, fusion,
//! and multi-scale prediction, with ablation switches applied at build time.

use crate::config::{Ablation, ModelConfig};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::graph::{build_graph_with, GraphFusion, GraphOptions, HeteroGraph};
use crate::image::ImageEncoder;
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::predictor::Predictor;
use crate::temporal::TemporalEncoder;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{build_text_set, TextEmbeddingStore, TextItem, Trend};

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum Fusion {
    Graph(GraphFusion),
    /// Each temporal feature concatenated with mean-pooled image and text
    /// features, then projected back to `d`.
    Concat(Linear),
}

/// Per-head predictions, head weights and the fused forecast for one window.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub per_head: Vec<Tensor>,
    pub weights: Tensor,
    pub fused: Tensor,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub temporal: Var,
    pub image: Var,
    pub text: Var,
    /// Final `[series; image; text]` node features when graph fusion is on.
    pub nodes: Option<Var>,
    pub h_t: Var,
    pub per_head: Vec<Var>,
    pub weights: Var,
    pub fused: Var,
    pub texts: Vec<TextItem>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variable_names: Vec<String>,
    pub params: ParamStore,
    pub temporal: TemporalEncoder,
    pub image: ImageEncoder,
    pub texts: TextEmbeddingStore,
    pub fusion: Fusion,
    pub predictor: Predictor,
}

impl Model {
    /// Builds and initializes every parameter from `seed`. Text vectors are
    /// registered for the four trends, every variable, every known event,
    /// and every imported embedding row.
    pub fn new(
        config: &ModelConfig,
        variable_names: &[String],
        events: &[String],
        imported: &[(String, Vec<f64>)],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if variable_names.is_empty() {
            return Err(Error::Config("model needs at least one variable".into()));
        }
        let vars = variable_names.len();
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, seed);

        let temporal = TemporalEncoder::new(&mut pb, config, vars)?;
        let image = ImageEncoder::new(&mut pb, config)?;

        let mut texts = TextEmbeddingStore::new(d);
        let probe = Tensor::zeros(&[config.input_len, vars]);
        let mut ids: Vec<String> = Trend::ALL.iter().map(|t| t.item().stable_id).collect();
        ids.extend(build_text_set(&probe, variable_names, events).into_iter().skip(1).map(|i| i.stable_id));
        ids.extend(imported.iter().map(|(id, _)| id.clone()));
        for id in ids {
            let init = imported.iter().find(|(k, _)| *k == id).map(|(_, v)| v.as_slice());
            texts.register(&mut pb, &id, init)?;
        }

        let fusion = if config.has(Ablation::NoMff) {
            Fusion::Concat(Linear::new(&mut pb, "fusion.concat", 3 * d, d)?)
        } else {
            Fusion::Graph(GraphFusion::new(&mut pb, d, config.graph_layers)?)
        };
        let predictor = if config.has(Ablation::NoMsp) {
            Predictor::single(&mut pb, d, config.horizon, vars)?
        } else {
            Predictor::multi_scale(&mut pb, d, config.weight_hidden, &config.head_scales, config.horizon, vars)?
        };

        Ok(Self {
            config: config.clone(),
            variable_names: variable_names.to_vec(),
            params,
            temporal,
            image,
            texts,
            fusion,
            predictor,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn graph(&self, texts: usize) -> HeteroGraph {
        build_graph_with(
            self.config.patch_count(),
            texts,
            self.config.past_window,
            self.config.future_window,
            GraphOptions {
                cross_symmetric: self.config.cross_symmetric,
                text_bidirectional: self.config.text_bidirectional,
            },
        )
    }

    fn check_window(&self, window: &WindowSample) -> Result<()> {
        let expect = [self.config.input_len, self.num_vars()];
        if window.x_enc.shape() != expect {
            return Err(Error::Contract(format!(
                "window input {:?}, model expects {expect:?}",
                window.x_enc.shape()
            )));
        }
        if window.target.shape() != [self.config.horizon, self.num_vars()] {
            return Err(Error::Contract(format!(
                "window target {:?}, model horizon is {}",
                window.target.shape(),
                self.config.horizon
            )));
        }
        Ok(())
    }

    /// Per-variable (mean, std) of the input window, or identity when
    /// instance normalization is off.
    fn window_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (len, vars) = (x.shape()[0], x.shape()[1]);
        if !self.config.instance_norm {
            return (vec![0.0; vars], vec![1.0; vars]);
        }
        let mut mean = vec![0.0; vars];
        for r in 0..len {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / len as f64;
            }
        }
        let mut std = vec![0.0; vars];
        for r in 0..len {
            for ((s, v), m) in std.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / len as f64;
            }
        }
        std.iter_mut().for_each(|s| *s = (*s + INSTANCE_NORM_EPS).sqrt());
        (mean, std)
    }

    pub fn forward(&self, tape: &mut Tape, window: &WindowSample, events: &[String]) -> Result<ForwardVars> {
        self.check_window(window)?;
        let store = &self.params;
        let (mean, std) = self.window_stats(&window.x_enc);
        let normalized = {
            let vars = mean.len();
            let data = window
                .x_enc
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % vars]) / std[i % vars])
                .collect();
            Tensor::new(window.x_enc.shape().to_vec(), data)?
        };

        let temporal = self.temporal.forward(tape, store, &normalized)?;
        let image = self.image.forward(tape, store, &window.chart)?;
        let items = build_text_set(&window.x_enc, &self.variable_names, events);
        let text = self.texts.embed(tape, store, &items)?;

        let (nodes, h_t) = match &self.fusion {
            Fusion::Graph(g) => {
                let graph = self.graph(items.len());
                let nodes = g.propagate(tape, store, &graph, temporal, image, text)?;
                (Some(nodes), tape.narrow(nodes, 0, 0, graph.patches)?)
            }
            Fusion::Concat(proj) => {
                let t = tape.shape(temporal)[0];
                let d = tape.shape(temporal)[1];
                let ones = tape.constant(Tensor::ones(&[t, 1]));
                let mut parts = vec![temporal];
                for src in [image, text] {
                    let pooled = tape.mean_axis(src, 0)?;
                    let pooled = tape.reshape(pooled, vec![1, d])?;
                    parts.push(tape.matmul(ones, pooled)?);
                }
                let joined = tape.concat(&parts, 1)?;
                (None, proj.forward(tape, store, joined)?)
            }
        };

        let pred = self.predictor.forward(tape, store, h_t)?;
        let h = self.config.horizon;
        let scale = tape.constant(tile_rows(&std, h)?);
        let shift = tape.constant(tile_rows(&mean, h)?);
        let mut denorm = |v: Var| -> Result<Var> {
            let s = tape.mul(v, scale)?;
            tape.add(s, shift)
        };
        let per_head = pred.per_head.iter().map(|&v| denorm(v)).collect::<Result<Vec<_>>>()?;
        let fused = denorm(pred.fused)?;
        Ok(ForwardVars {
            temporal,
            image,
            text,
            nodes,
            h_t,
            per_head,
            weights: pred.weights,
            fused,
            texts: items,
        })
    }

    pub fn predict(&self, window: &WindowSample, events: &[String]) -> Result<ForecastResult> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, window, events)?;
        let fused = tape.value(out.fused).clone();
        if !fused.is_finite() {
            return Err(Error::Numeric("forecast contains non-finite values".into()));
        }
        Ok(ForecastResult {
            per_head: out.per_head.iter().map(|&v| tape.value(v).clone()).collect(),
            weights: tape.value(out.weights).clone(),
            fused,
        })
    }

    /// Mean squared error of the fused forecast and its parameter gradients.
    pub fn loss_and_grads(&self, window: &WindowSample, events: &[String]) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, window, events)?;
        let target = tape.constant(window.target.clone());
        let loss = tape.mse(out.fused, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {value}")));
        }
        tape.backward(loss)?;
        Ok((value, tape.param_grads()))
    }

    /// Node features for export: series, image and text rows in that order.
    pub fn node_embeddings(&self, window: &WindowSample, events: &[String]) -> Result<Vec<(crate::graph::Modality, usize, Vec<f64>)>> {
        use crate::graph::Modality;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, window, events)?;
        let t = self.config.patch_count();
        let n = out.texts.len();
        let (series, image, text) = match out.nodes {
            Some(nodes) => {
                let v = tape.value(nodes).clone();
                let rows = |start: usize, count: usize| (start..start + count).map(|r| v.row(r).to_vec()).collect::<Vec<_>>();
                (rows(0, t), rows(t, t), rows(2 * t, n))
            }
            None => {
                let rows = |var: Var| {
                    let v = tape.value(var);
                    (0..v.rows()).map(|r| v.row(r).to_vec()).collect::<Vec<_>>()
                };
                (rows(out.h_t), rows(out.image), rows(out.text))
            }
        };
        let mut result = Vec::with_capacity(2 * t + n);
        for (modality, rows) in [(Modality::Series, series), (Modality::Image, image), (Modality::Text, text)] {
            result.extend(rows.into_iter().enumerate().map(|(i, r)| (modality, i, r)));
        }
        Ok(result)
    }
}

/// `[rows x len]` tensor with `values` repeated on every row.
fn tile_rows(values: &[f64], rows: usize) -> Result<Tensor> {
    Tensor::new(vec![rows, values.len()], values.repeat(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_chart;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_len: 16,
            horizon: 6,
            d_model: 8,
            patch_len: 4,
            patch_stride: 4,
            n_experts: 3,
            top_k: 2,
            n_blocks: 1,
            chart_height: 4,
            image_depth: 1,
            graph_layers: 1,
            past_window: 1,
            future_window: 1,
            head_scales: vec![2, 4, 5],
            weight_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn window(cfg: &ModelConfig, vars: usize, phase: f64) -> WindowSample {
        let x = Tensor::new(
            vec![cfg.input_len, vars],
            (0..cfg.input_len * vars).map(|i| (i as f64 * 0.37 + phase).sin()).collect(),
        )
        .unwrap();
        let y = Tensor::new(
            vec![cfg.horizon, vars],
            (0..cfg.horizon * vars).map(|i| (i as f64 * 0.21 + phase).cos()).collect(),
        )
        .unwrap();
        WindowSample {
            chart: render_chart(&x, cfg.chart_height, cfg.patch_count()).unwrap(),
            x_enc: x,
            target: y,
            start_index: 0,
            series_index: 0,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn forecast_shapes_and_weights() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, &names(2), &[], &[], 1).unwrap();
        let r = model.predict(&window(&cfg, 2, 0.0), &[]).unwrap();
        assert_eq!(r.per_head.len(), 3);
        assert_eq!(r.fused.shape(), &[6, 2]);
        assert!((r.weights.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn events_add_text_nodes() {
        let cfg = tiny_config();
        let events = vec!["storm".to_string()];
        let model = Model::new(&cfg, &names(2), &events, &[], 1).unwrap();
        let emb = model.node_embeddings(&window(&cfg, 2, 0.0), &events).unwrap();
        assert_eq!(emb.len(), 4 + 4 + 4);
        let emb = model.node_embeddings(&window(&cfg, 2, 0.0), &[]).unwrap();
        assert_eq!(emb.len(), 4 + 4 + 3);
    }

    #[test]
    fn ablations_change_structure() {
        let cfg = tiny_config();
        let full = Model::new(&cfg, &names(2), &[], &[], 1).unwrap();
        for a in Ablation::ALL {
            let mut c = cfg.clone();
            c.ablations.insert(a);
            let m = Model::new(&c, &names(2), &[], &[], 1).unwrap();
            assert_ne!(m.num_parameters(), full.num_parameters(), "{a:?}");
        }
        let mut c = cfg.clone();
        c.ablations.insert(Ablation::NoFtc);
        assert!(Model::new(&c, &names(2), &[], &[], 1).unwrap().num_parameters() < full.num_parameters());

        let mut c = cfg.clone();
        c.ablations.insert(Ablation::NoMsp);
        let m = Model::new(&c, &names(2), &[], &[], 1).unwrap();
        let r = m.predict(&window(&c, 2, 0.3), &[]).unwrap();
        assert_eq!(r.per_head.len(), 1);
        assert_eq!(r.weights.data(), &[1.0]);
        assert_eq!(r.per_head[0], r.fused);
    }

    #[test]
    fn no_mff_ignores_graph_windows() {
        let mut cfg = tiny_config();
        cfg.ablations.insert(Ablation::NoMff);
        let w = window(&cfg, 2, 0.7);
        let a = Model::new(&cfg, &names(2), &[], &[], 5).unwrap().predict(&w, &[]).unwrap();
        cfg.past_window = 3;
        cfg.future_window = 0;
        let b = Model::new(&cfg, &names(2), &[], &[], 5).unwrap().predict(&w, &[]).unwrap();
        assert_eq!(a.fused, b.fused);
    }

    #[test]
    fn imported_embedding_sets_initial_vector() {
        let cfg = tiny_config();
        let v = vec![0.5; 8];
        let imported = vec![("trend:rising".to_string(), v.clone())];
        let model = Model::new(&cfg, &names(1), &[], &imported, 1).unwrap();
        let id = model.texts.param_id("trend:rising").unwrap();
        assert_eq!(model.params.get(id).data(), v.as_slice());
    }

    #[test]
    fn gradient_reaches_every_used_parameter_family() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, &names(2), &[], &[], 3).unwrap();
        let (loss, grads) = model.loss_and_grads(&window(&cfg, 2, 0.1), &[]).unwrap();
        assert!(loss > 0.0);
        let named: Vec<&str> = grads.iter().map(|(id, _)| model.params.name(*id)).collect();
        for prefix in ["temporal.patch", "image.proj", "fusion.layer0", "predictor.head0", "predictor.weights", "text.trend"] {
            assert!(named.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
    }
}
