//! Small layer building blocks shared by the encoders. All forward passes
//! operate on one sample: token matrices are `[tokens x width]`.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.glorot(&format!("{name}.weight"), fan_in, fan_out)?,
            bias: Some(pb.zeros(&format!("{name}.bias"), &[fan_out])?),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.glorot(&format!("{name}.weight"), fan_in, fan_out)?,
            bias: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(pb, &format!("{name}.up"), width, hidden)?,
            down: Linear::new(pb, &format!("{name}.down"), hidden, out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: pb.constant(&format!("{name}.gain"), &[width], 1.0)?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        tape.rms_norm(x, g, self.eps)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize, causal: bool) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::no_bias(pb, &format!("{name}.query"), width, width)?,
            key: Linear::no_bias(pb, &format!("{name}.key"), width, width)?,
            value: Linear::no_bias(pb, &format!("{name}.value"), width, width)?,
            output: Linear::new(pb, &format!("{name}.output"), width, width)?,
            heads,
            causal,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (tokens, width) = (tape.shape(x)[0], tape.shape(x)[1]);
        let head_width = width / self.heads;
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mask = self.causal.then(|| tape.constant(causal_mask(tokens)));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * head_width, head_width)?;
            let kh = tape.narrow(k, 1, h * head_width, head_width)?;
            let vh = tape.narrow(v, 1, h * head_width, head_width)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (head_width as f64).sqrt());
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        self.output.forward(tape, store, merged)
    }
}

/// Additive mask: 0 where key index <= query index, -inf elsewhere.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Pre-norm transformer encoder block: attention and feed-forward sublayers,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: RmsNorm,
    pub attn: SelfAttention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: RmsNorm::new(pb, &format!("{name}.attn_norm"), width, eps)?,
            attn: SelfAttention::new(pb, &format!("{name}.attn"), width, heads, false)?,
            ffn_norm: RmsNorm::new(pb, &format!("{name}.ffn_norm"), width, eps)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), width, hidden, width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.attn_norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n)?;
        let u = tape.add(a, x)?;
        let n = self.ffn_norm.forward(tape, store, u)?;
        let f = self.ffn.forward(tape, store, n)?;
        tape.add(f, u)
    }
}
