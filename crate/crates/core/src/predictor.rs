//! Multi-scale prediction: iterative per-scale heads truncated to the target
//! horizon, fused with softmax weights from a two-layer MLP.

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Iterations a head of per-step horizon `scale` needs to cover `horizon`.
pub fn iterations(horizon: usize, scale: usize) -> usize {
    horizon.div_ceil(scale)
}

/// Emits `scale * D` values per iteration from the last hidden state plus a
/// learned iteration embedding, then keeps the first `horizon` steps.
#[derive(Debug, Clone)]
pub struct ScaleHead {
    pub scale: usize,
    pub iters: usize,
    pub horizon: usize,
    pub vars: usize,
    pub proj: Linear,
    pub iter_embed: ParamId,
}

impl ScaleHead {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, scale: usize, horizon: usize, vars: usize) -> Result<Self> {
        let iters = iterations(horizon, scale);
        Ok(Self {
            scale,
            iters,
            horizon,
            vars,
            proj: Linear::no_bias(pb, &format!("{name}.proj"), width, scale * vars)?,
            iter_embed: pb.glorot_shaped(&format!("{name}.iter_embed"), &[iters, width], iters, width)?,
        })
    }

    /// Un-truncated output, `[iters * scale x D]`.
    pub fn full(&self, tape: &mut Tape, store: &ParamStore, h_t: Var) -> Result<Var> {
        let t = tape.shape(h_t)[0];
        let last = tape.narrow(h_t, 0, t - 1, 1)?;
        let ones = tape.constant(Tensor::ones(&[self.iters, 1]));
        let repeated = tape.matmul(ones, last)?;
        let emb = tape.param(store, self.iter_embed);
        let states = tape.add(repeated, emb)?;
        let steps = self.proj.forward(tape, store, states)?;
        tape.reshape(steps, vec![self.iters * self.scale, self.vars])
    }

    /// `[H x D]` prediction.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_t: Var) -> Result<Var> {
        let full = self.full(tape, store, h_t)?;
        tape.narrow(full, 0, 0, self.horizon)
    }
}

/// `softmax(Linear(ReLU(Linear(mean_T h_t))))`, one weight per head.
#[derive(Debug, Clone)]
pub struct AdaptiveWeights {
    pub mlp: FeedForward,
}

impl AdaptiveWeights {
    pub fn new(pb: &mut ParamBuilder, width: usize, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            mlp: FeedForward::new(pb, "predictor.weights", width, hidden, heads)?,
        })
    }

    /// `[1 x M]` weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_t: Var) -> Result<Var> {
        let width = tape.shape(h_t)[1];
        let pooled = tape.mean_axis(h_t, 0)?;
        let pooled = tape.reshape(pooled, vec![1, width])?;
        let logits = self.mlp.forward(tape, store, pooled)?;
        tape.softmax(logits, 1)
    }
}

/// `sum_m w[m] * heads[m]`.
pub fn fuse_forecast(tape: &mut Tape, heads: &[Var], weights: Var) -> Result<Var> {
    if heads.is_empty() || tape.value(weights).numel() != heads.len() {
        return Err(Error::Contract(format!(
            "{} head outputs with weights of shape {:?}",
            heads.len(),
            tape.shape(weights)
        )));
    }
    let shape = tape.shape(heads[0]).to_vec();
    if heads.iter().any(|&h| tape.shape(h) != shape.as_slice()) {
        return Err(Error::Contract("head outputs differ in shape".into()));
    }
    let flat = tape.reshape(weights, vec![heads.len()])?;
    let mut total = None;
    for (m, &head) in heads.iter().enumerate() {
        let w = tape.narrow(flat, 0, m, 1)?;
        let term = tape.mul_scalar(head, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}

#[derive(Debug, Clone)]
pub enum Predictor {
    MultiScale {
        heads: Vec<ScaleHead>,
        weights: AdaptiveWeights,
    },
    /// One linear map from the last hidden state to the whole horizon.
    Single { proj: Linear, horizon: usize, vars: usize },
}

/// Tape handles of one prediction.
#[derive(Debug, Clone)]
pub struct PredictionVars {
    pub per_head: Vec<Var>,
    pub weights: Var,
    pub fused: Var,
}

impl Predictor {
    pub fn multi_scale(
        pb: &mut ParamBuilder,
        width: usize,
        hidden: usize,
        scales: &[usize],
        horizon: usize,
        vars: usize,
    ) -> Result<Self> {
        let heads = scales
            .iter()
            .enumerate()
            .map(|(m, &s)| ScaleHead::new(pb, &format!("predictor.head{m}"), width, s, horizon, vars))
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictor::MultiScale {
            weights: AdaptiveWeights::new(pb, width, hidden, heads.len())?,
            heads,
        })
    }

    pub fn single(pb: &mut ParamBuilder, width: usize, horizon: usize, vars: usize) -> Result<Self> {
        Ok(Predictor::Single {
            proj: Linear::new(pb, "predictor.single", width, horizon * vars)?,
            horizon,
            vars,
        })
    }

    pub fn num_heads(&self) -> usize {
        match self {
            Predictor::MultiScale { heads, .. } => heads.len(),
            Predictor::Single { .. } => 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_t: Var) -> Result<PredictionVars> {
        match self {
            Predictor::MultiScale { heads, weights } => {
                let per_head = heads
                    .iter()
                    .map(|h| h.forward(tape, store, h_t))
                    .collect::<Result<Vec<_>>>()?;
                let w = weights.forward(tape, store, h_t)?;
                let fused = fuse_forecast(tape, &per_head, w)?;
                Ok(PredictionVars {
                    per_head,
                    weights: w,
                    fused,
                })
            }
            Predictor::Single { proj, horizon, vars } => {
                let t = tape.shape(h_t)[0];
                let last = tape.narrow(h_t, 0, t - 1, 1)?;
                let out = proj.forward(tape, store, last)?;
                let out = tape.reshape(out, vec![*horizon, *vars])?;
                let w = tape.constant(Tensor::ones(&[1, 1]));
                Ok(PredictionVars {
                    per_head: vec![out],
                    weights: w,
                    fused: out,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hidden(t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|i| (i as f64 * 0.41).cos()).collect()).unwrap()
    }

    #[test]
    fn head_iteration_examples() {
        for (h, p, iters, raw) in [(96, 30, 4, 120), (100, 50, 2, 100), (96, 100, 1, 100)] {
            let mut store = ParamStore::new();
            let head = ScaleHead::new(&mut ParamBuilder::new(&mut store, 1), "h", 4, p, h, 2).unwrap();
            assert_eq!(head.iters, iters);
            let mut tape = Tape::new();
            let x = tape.constant(hidden(3, 4));
            let full = head.full(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(full), &[raw, 2]);
            let out = head.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(out), &[h, 2]);
            assert_eq!(tape.value(out).data(), &tape.value(full).data()[..h * 2]);
        }
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let w = AdaptiveWeights::new(&mut ParamBuilder::new(&mut store, 2), 4, 6, 3).unwrap();
        *store.get_mut(w.mlp.down.weight) = Tensor::zeros(&[6, 3]);
        let mut tape = Tape::new();
        let x = tape.constant(hidden(5, 4));
        let out = w.forward(&mut tape, &store, x).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_match_direct_two_layer_formula() {
        let mut store = ParamStore::new();
        let w = AdaptiveWeights::new(&mut ParamBuilder::new(&mut store, 8), 4, 5, 3).unwrap();
        *store.get_mut(w.mlp.up.bias.unwrap()) = Tensor::new(vec![5], vec![0.1, -0.2, 0.3, 0.0, 0.05]).unwrap();
        *store.get_mut(w.mlp.down.bias.unwrap()) = Tensor::new(vec![3], vec![0.2, -0.1, 0.0]).unwrap();
        let h = hidden(6, 4);
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let out = w.forward(&mut tape, &store, x).unwrap();

        let pooled: Vec<f64> = (0..4).map(|c| (0..6).map(|r| h.at(r, c)).sum::<f64>() / 6.0).collect();
        let (w1, b1) = (store.get(w.mlp.up.weight), store.get(w.mlp.up.bias.unwrap()));
        let (w2, b2) = (store.get(w.mlp.down.weight), store.get(w.mlp.down.bias.unwrap()));
        let hid: Vec<f64> = (0..5)
            .map(|j| ((0..4).map(|i| pooled[i] * w1.at(i, j)).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..3)
            .map(|k| (0..5).map(|j| hid[j] * w2.at(j, k)).sum::<f64>() + b2.data()[k])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            assert!((tape.value(out).data()[k] - logits[k].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_forecast_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, -2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2, 1], vec![7.0, 7.0]).unwrap());
        let one_hot = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let f = fuse_forecast(&mut tape, &[a, b, c], one_hot).unwrap();
        assert_eq!(tape.value(f), tape.value(a));
        let half = tape.constant(Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap());
        let f = fuse_forecast(&mut tape, &[a, b, c], half).unwrap();
        assert_eq!(tape.value(f).data(), &[2.0, 0.0]);
        let w = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let f = fuse_forecast(&mut tape, &[c, c, c], w).unwrap();
        assert!(tape.value(f).data().iter().all(|v| (v - 7.0).abs() < 1e-12));
        assert!(fuse_forecast(&mut tape, &[a, b], w).is_err());
    }

    #[test]
    fn single_iteration_head_is_linear_in_weights() {
        let mut store = ParamStore::new();
        let head = ScaleHead::new(&mut ParamBuilder::new(&mut store, 3), "h", 4, 100, 96, 2).unwrap();
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(hidden(3, 4));
            let y = head.forward(&mut tape, s, x).unwrap();
            tape.value(y).clone()
        };
        let base = run(&store);
        let mut doubled = store.clone();
        let w = doubled.get(head.proj.weight).map(|v| 2.0 * v);
        *doubled.get_mut(head.proj.weight) = w;
        let twice = run(&doubled);
        for (a, b) in base.data().iter().zip(twice.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
