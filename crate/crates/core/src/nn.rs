//! Transformer sub-layers: multi-head attention with masking, the
//! position-wise feed-forward network, sinusoidal positions and the
//! residual + layer-norm wrapper.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Causal,
    Padding,
    CausalPadding,
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    mode: MaskMode,
    batch: usize,
    len_q: usize,
    len_k: usize,
    key_lengths: Vec<usize>,
}

impl AttentionMask {
    /// `key_lengths` gives the number of real (non-pad) keys per batch row and
    /// is required for the padding modes.
    pub fn new(
        mode: MaskMode,
        batch: usize,
        len_q: usize,
        len_k: usize,
        key_lengths: Option<Vec<usize>>,
    ) -> Result<Self> {
        let needs_padding = matches!(mode, MaskMode::Padding | MaskMode::CausalPadding);
        let key_lengths = match (needs_padding, key_lengths) {
            (true, Some(lens)) => {
                if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > len_k) {
                    return Err(Error::InvalidArgument(format!(
                        "key lengths {lens:?} invalid for batch {batch}, len_k {len_k}"
                    )));
                }
                lens
            }
            (true, None) => {
                return Err(Error::InvalidArgument("padding mask needs key lengths".into()));
            }
            (false, _) => vec![len_k; batch],
        };
        if matches!(mode, MaskMode::Causal | MaskMode::CausalPadding) && len_q != len_k {
            return Err(Error::InvalidArgument(format!(
                "causal mask needs square attention, got {len_q}x{len_k}"
            )));
        }
        Ok(AttentionMask {
            mode,
            batch,
            len_q,
            len_k,
            key_lengths,
        })
    }

    pub fn none(batch: usize, len_q: usize, len_k: usize) -> Self {
        Self::new(MaskMode::None, batch, len_q, len_k, None).expect("unmasked is always valid")
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.len_q, self.len_k)
    }

    /// Flattened `[batch, len_q, len_k]` permission grid.
    pub fn allowed(&self) -> Vec<bool> {
        let causal = matches!(self.mode, MaskMode::Causal | MaskMode::CausalPadding);
        let mut out = Vec::with_capacity(self.batch * self.len_q * self.len_k);
        for b in 0..self.batch {
            for q in 0..self.len_q {
                for k in 0..self.len_k {
                    out.push(k < self.key_lengths[b] && !(causal && k > q));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Glorot/Xavier uniform matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-limit..limit))
}

impl MhaParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut w = |n: &str| store.insert(format!("{prefix}.{n}"), xavier(d_model, d_model, rng));
        Ok(MhaParams {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(MhaParams {
            wq: lookup(store, prefix, "wq")?,
            wk: lookup(store, prefix, "wk")?,
            wv: lookup(store, prefix, "wv")?,
            wo: lookup(store, prefix, "wo")?,
        })
    }
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FfnParams {
            w1: store.insert(format!("{prefix}.w1"), xavier(d_model, d_ff, rng))?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: store.insert(format!("{prefix}.w2"), xavier(d_ff, d_model, rng))?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d_model]))?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(FfnParams {
            w1: lookup(store, prefix, "w1")?,
            b1: lookup(store, prefix, "b1")?,
            w2: lookup(store, prefix, "w2")?,
            b2: lookup(store, prefix, "b2")?,
        })
    }
}

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize) -> Result<Self> {
        Ok(NormParams {
            gain: store.insert(format!("{prefix}.gain"), Tensor::from_fn(&[d_model], |_| 1.0))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_model]))?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: lookup(store, prefix, "gain")?,
            bias: lookup(store, prefix, "bias")?,
        })
    }
}

fn lookup(store: &ParamStore, prefix: &str, name: &str) -> Result<ParamId> {
    let full = format!("{prefix}.{name}");
    store
        .id(&full)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{full}`")))
}

/// `[max_len, d_model]` table with `sin` on even and `cos` on odd columns,
/// column pair `i` using rate `10000^(-2i/d_model)`.
pub fn sinusoidal_positions(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even model dimension, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    Ok(Tensor::from_fn(&[max_len, d_model], |idx| {
        let pos = (idx / d_model) as f64;
        let col = idx % d_model;
        let pair = (col / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * pair / d_model as f64);
        if col.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Multi-head attention returning the output and the post-softmax weights
/// (`[batch, heads, len_q, len_k]`).
pub fn attention_with_weights(
    g: &mut Graph<'_>,
    q_in: Var,
    kv_in: Var,
    params: &MhaParams,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Var, Var)> {
    let sq = g.shape(q_in).to_vec();
    let sk = g.shape(kv_in).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: sq,
            right: sk,
        });
    }
    if mask.dims() != (sq[0], sq[1], sk[1]) {
        return Err(Error::InvalidArgument(format!(
            "mask dims {:?} do not match attention (batch {}, len_q {}, len_k {})",
            mask.dims(),
            sq[0],
            sq[1],
            sk[1]
        )));
    }
    let (wq, wk, wv, wo) = (g.param(params.wq), g.param(params.wk), g.param(params.wv), g.param(params.wo));
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let scores = g.head_scores(q, k, heads)?;
    let scores = match mask.mode() {
        MaskMode::None => scores,
        _ => g.mask_logits(scores, &mask.allowed())?,
    };
    let weights = g.softmax(scores, 3)?;
    let ctx = g.head_context(weights, v)?;
    Ok((g.matmul(ctx, wo)?, weights))
}

/// Self-attention when `q_in == kv_in`, cross-attention otherwise.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q_in: Var,
    kv_in: Var,
    params: &MhaParams,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Var> {
    attention_with_weights(g, q_in, kv_in, params, mask, heads).map(|(out, _)| out)
}

/// `max(0, x·W1 + b1)·W2 + b2` applied independently at every position.
pub fn positionwise_ffn(g: &mut Graph<'_>, x: Var, params: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(params.w1), g.param(params.b1), g.param(params.w2), g.param(params.b2));
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

pub fn layer_norm(g: &mut Graph<'_>, x: Var, norm: &NormParams) -> Result<Var> {
    let (gain, bias) = (g.param(norm.gain), g.param(norm.bias));
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Post-norm residual wrapper: `layer_norm(x + dropout(f(x)))`.
pub fn sublayer<F>(g: &mut Graph<'_>, x: Var, norm: &NormParams, dropout: f64, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
{
    let y = f(g, x)?;
    let y = g.dropout(y, dropout)?;
    let sum = g.add(x, y)?;
    layer_norm(g, sum, norm)
}
