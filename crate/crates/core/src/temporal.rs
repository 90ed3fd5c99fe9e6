//! Temporal encoder: overlapping patch embedding followed by causal
//! mixture-of-experts transformer blocks whose experts blend a
//! frequency-time cell with a feed-forward path.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, RmsNorm, SelfAttention};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Stacks overlapping patches of `x_enc` (`[L x D]`) into `[T x pl*D]`.
/// Patch `p` covers time steps `[p*st, p*st + pl)`, flattened time-major.
pub fn patchify(x_enc: &Tensor, patch_len: usize, stride: usize) -> Result<Tensor> {
    let (len, vars) = (x_enc.shape()[0], x_enc.cols());
    if patch_len == 0 || stride == 0 || patch_len > len || !(len - patch_len).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "cannot patch length {len} with patch_len {patch_len} and stride {stride}"
        )));
    }
    let count = (len - patch_len) / stride + 1;
    let width = patch_len * vars;
    let mut data = Vec::with_capacity(count * width);
    for p in 0..count {
        let start = p * stride * vars;
        data.extend_from_slice(&x_enc.data()[start..start + width]);
    }
    Tensor::new(vec![count, width], data)
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, vars: usize) -> Result<Self> {
        let t = cfg.patch_count();
        Ok(Self {
            proj: Linear::new(pb, &format!("{name}.proj"), cfg.patch_len * vars, cfg.d_model)?,
            pos: pb.glorot_shaped(&format!("{name}.pos"), &[t, cfg.d_model], t, cfg.d_model)?,
            patch_len: cfg.patch_len,
            stride: cfg.patch_stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_enc: &Tensor) -> Result<Var> {
        let patches = tape.constant(patchify(x_enc, self.patch_len, self.stride)?);
        let h = self.proj.forward(tape, store, patches)?;
        let pos = tape.param(store, self.pos);
        if tape.shape(pos) != tape.shape(h) {
            return Err(Error::shape(
                "patch_embed",
                format!("positional table {:?} vs patches {:?}", tape.shape(pos), tape.shape(h)),
            ));
        }
        tape.add(h, pos)
    }
}

/// Frequency-time cell: `Linear([x, cos(x W_f), sin(x W_f)])`.
///
/// The complex harmonic `exp(j * x W_f)` is carried as its real pair
/// `(cos, sin)`, doubling the frequency branch width.
#[derive(Debug, Clone)]
pub struct Ftc {
    pub freq: Linear,
    pub out: Linear,
}

impl Ftc {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, freq_width: usize) -> Result<Self> {
        Ok(Self {
            freq: Linear::no_bias(pb, &format!("{name}.freq"), width, freq_width)?,
            out: Linear::new(pb, &format!("{name}.out"), width + 2 * freq_width, width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let xf = self.freq.forward(tape, store, x)?;
        let re = tape.cos(xf);
        let im = tape.sin(xf);
        let joined = tape.concat(&[x, re, im], 1)?;
        self.out.forward(tape, store, joined)
    }
}

/// `alpha * FTC(x) + (1 - alpha) * FFN(x)` with `alpha = sigmoid(a)`, or a
/// plain FFN when the block carries no frequency-time cell.
#[derive(Debug, Clone)]
pub struct Expert {
    pub ftc: Option<(Ftc, ParamId)>,
    pub ffn: FeedForward,
}

impl Expert {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, with_ftc: bool) -> Result<Self> {
        let d = cfg.d_model;
        let ftc = if with_ftc {
            let cell = Ftc::new(pb, &format!("{name}.ftc"), d, cfg.freq_width())?;
            let logit = (cfg.alpha_init / (1.0 - cfg.alpha_init)).ln();
            let alpha = pb.constant(&format!("{name}.alpha_logit"), &[1], logit)?;
            Some((cell, alpha))
        } else {
            None
        };
        Ok(Self {
            ftc,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d, cfg.ffn_mult * d, d)?,
        })
    }

    /// Current fusion coefficient, if the expert has a frequency path.
    pub fn alpha(&self, store: &ParamStore) -> Option<f64> {
        self.ftc
            .as_ref()
            .map(|(_, a)| crate::tensor::sigmoid_value(store.get(*a).item()))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let ffn = self.ffn.forward(tape, store, x)?;
        let Some((cell, logit)) = &self.ftc else {
            return Ok(ffn);
        };
        let freq = cell.forward(tape, store, x)?;
        let a = tape.param(store, *logit);
        let alpha = tape.sigmoid(a);
        let neg = tape.neg(alpha);
        let beta = tape.add_scalar(neg, 1.0);
        let left = tape.mul_scalar(freq, alpha)?;
        let right = tape.mul_scalar(ffn, beta)?;
        tape.add(left, right)
    }
}

/// Keep-or-zero mask over `[tokens x experts]` scores: 1 for each row's `k`
/// largest entries, ties going to the lower expert index.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Tensor {
    let (rows, experts) = (scores.rows(), scores.cols());
    let mut mask = vec![0.0; rows * experts];
    for r in 0..rows {
        let row = scores.row(r);
        let mut order: Vec<usize> = (0..experts).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &e in order.iter().take(k) {
            mask[r * experts + e] = 1.0;
        }
    }
    Tensor::new(vec![rows, experts], mask).expect("mask matches score shape")
}

#[derive(Debug, Clone)]
pub enum RouterFtc {
    None,
    Own(Ftc),
    /// Reuse the first expert's cell.
    SharedWithExpert0,
}

#[derive(Debug, Clone)]
pub struct Router {
    pub ftc: RouterFtc,
    pub linear: Linear,
}

/// Router scores and the sparse gates derived from them.
#[derive(Debug, Clone, Copy)]
pub struct Routing {
    pub scores: Var,
    pub gates: Var,
}

#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub attn_norm: RmsNorm,
    pub attn: SelfAttention,
    pub moe_norm: RmsNorm,
    pub router: Router,
    pub experts: Vec<Expert>,
    pub top_k: usize,
}

impl MoeBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let d = cfg.d_model;
        let with_ftc = cfg.block_has_ftc(layer);
        let experts = (0..cfg.n_experts)
            .map(|i| Expert::new(pb, &format!("{name}.expert{i}"), cfg, with_ftc))
            .collect::<Result<Vec<_>>>()?;
        let ftc = match (with_ftc, cfg.router_shares_ftc) {
            (false, _) => RouterFtc::None,
            (true, true) => RouterFtc::SharedWithExpert0,
            (true, false) => RouterFtc::Own(Ftc::new(pb, &format!("{name}.router.ftc"), d, cfg.freq_width())?),
        };
        Ok(Self {
            attn_norm: RmsNorm::new(pb, &format!("{name}.attn_norm"), d, cfg.rms_eps)?,
            attn: SelfAttention::new(pb, &format!("{name}.attn"), d, cfg.attn_heads, true)?,
            moe_norm: RmsNorm::new(pb, &format!("{name}.moe_norm"), d, cfg.rms_eps)?,
            router: Router {
                ftc,
                linear: Linear::new(pb, &format!("{name}.router.linear"), d, cfg.n_experts)?,
            },
            experts,
            top_k: cfg.top_k,
        })
    }

    /// `s = softmax(Linear(FTC(x) + x))`, gates keep the top-k scores
    /// unchanged and zero the rest.
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Routing> {
        let cell = match &self.router.ftc {
            RouterFtc::None => None,
            RouterFtc::Own(f) => Some(f),
            RouterFtc::SharedWithExpert0 => self.experts[0].ftc.as_ref().map(|(f, _)| f),
        };
        let input = match cell {
            Some(f) => {
                let fx = f.forward(tape, store, x)?;
                tape.add(fx, x)?
            }
            None => x,
        };
        let logits = self.router.linear.forward(tape, store, input)?;
        let scores = tape.softmax(logits, 1)?;
        let mask = tape.constant(top_k_mask(tape.value(scores), self.top_k));
        let gates = tape.mul(scores, mask)?;
        Ok(Routing { scores, gates })
    }

    /// Gate-weighted sum of expert outputs per token. Experts no token
    /// selected are skipped; their contribution is exactly zero.
    pub fn mixture(&self, tape: &mut Tape, store: &ParamStore, x: Var, gates: Var) -> Result<Var> {
        let (tokens, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let ones = tape.constant(Tensor::ones(&[1, d]));
        let mut total: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let used = (0..tokens).any(|t| tape.value(gates).at(t, i) != 0.0);
            if !used {
                continue;
            }
            let y = expert.forward(tape, store, x)?;
            let g = tape.narrow(gates, 1, i, 1)?;
            let g = tape.matmul(g, ones)?;
            let weighted = tape.mul(g, y)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok(match total {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[tokens, d])),
        })
    }

    /// `u = SA(RMSNorm(h)) + h`, then `MoE(RMSNorm(u)) + u`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let n = self.attn_norm.forward(tape, store, h)?;
        let a = self.attn.forward(tape, store, n)?;
        let u = tape.add(a, h)?;
        let ubar = self.moe_norm.forward(tape, store, u)?;
        let routing = self.route(tape, store, ubar)?;
        let mixed = self.mixture(tape, store, ubar, routing.gates)?;
        tape.add(mixed, u)
    }
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub patch: PatchEmbed,
    pub blocks: Vec<MoeBlock>,
}

impl TemporalEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, vars: usize) -> Result<Self> {
        Ok(Self {
            patch: PatchEmbed::new(pb, "temporal.patch", cfg, vars)?,
            blocks: (0..cfg.n_blocks)
                .map(|l| MoeBlock::new(pb, &format!("temporal.block{l}"), cfg, l))
                .collect::<Result<_>>()?,
        })
    }

    /// `[L x D]` window to `[T x d]` patch representations.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_enc: &Tensor) -> Result<Var> {
        let mut h = self.patch.forward(tape, store, x_enc)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h)?;
        }
        Ok(h)
    }
}
