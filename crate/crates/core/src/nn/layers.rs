//! Parameter bundles and the attention / feed-forward building blocks.
//!
//! Bundles hold [`ParamId`]s only, so one definition serves both the f32
//! training stack and the f64 checking stack.

use std::rc::Rc;

use super::array::Elem;
use super::params::{Init, ParamId, ParamStore};
use super::tape::{NnError, Tape, TensorId};

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), vec![in_dim, out_dim], Init::XavierNormal, true);
        let b = ps.add(&format!("{name}.b"), vec![out_dim], Init::Zeros, true);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId, NnError> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Learned gain/bias for per-row normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<E: Elem>(ps: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        let gain = ps.add(&format!("{name}.gain"), vec![dim], Init::Ones, true);
        let bias = ps.add(&format!("{name}.bias"), vec![dim], Init::Zeros, true);
        Self { gain, bias, dim }
    }

    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId, NnError> {
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Projections for one attention block. For self-attention the key/value
/// input dim equals `dim`; for cross-attention it is the context dim.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self, NnError> {
        if dim % heads != 0 {
            return Err(NnError::BadHeadCount { dim, heads });
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(ps, &format!("{name}.wk"), kv_dim, dim),
            wv: Linear::new(ps, &format!("{name}.wv"), kv_dim, dim),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention of `queries` over `keys_values`,
    /// without the residual. `key_mask` marks which key rows may receive
    /// attention weight.
    pub fn attend<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        queries: TensorId,
        keys_values: TensorId,
        key_mask: Option<Rc<Vec<bool>>>,
    ) -> Result<TensorId, NnError> {
        let q = self.wq.forward(tape, ps, queries)?;
        let k = self.wk.forward(tape, ps, keys_values)?;
        let v = self.wv.forward(tape, ps, keys_values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, kh, false, true)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled, key_mask.clone())?;
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        self.wo.forward(tape, ps, merged)
    }
}

/// Two linear layers around a smooth nonlinearity, hidden width 4x.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn new<E: Elem>(ps: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        Self::with_hidden(ps, name, dim, 4 * dim)
    }

    pub fn with_hidden<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(ps, &format!("{name}.lin1"), dim, hidden),
            lin2: Linear::new(ps, &format!("{name}.lin2"), hidden, dim),
        }
    }

    /// The inner map without the residual.
    pub fn apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId, NnError> {
        let h = self.lin1.forward(tape, ps, x)?;
        let a = tape.gelu(h);
        self.lin2.forward(tape, ps, a)
    }
}

/// Self-attention over all token pairs with residual connection. Masked
/// tokens receive no attention weight and contribute nothing; their output
/// rows carry only the residual.
pub fn multi_head_self_attention<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    attn: &Attention,
    tokens: TensorId,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<TensorId, NnError> {
    if let Some(m) = &mask {
        let t = tape.value(tokens).rows();
        if m.len() != t {
            return Err(NnError::Invalid {
                op: "multi_head_self_attention",
                what: format!("mask length {} != {t} tokens", m.len()),
            });
        }
    }
    let mut out = attn.attend(tape, ps, tokens, tokens, mask.clone())?;
    if let Some(m) = &mask {
        if m.iter().any(|v| !v) {
            out = zero_masked_rows(tape, out, m)?;
        }
    }
    tape.add(tokens, out)
}

/// Cross-attention of `queries` over `context`, with residual on the
/// query side. The context may live in a different embedding dim.
pub fn cross_attention<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    attn: &Attention,
    queries: TensorId,
    context: TensorId,
) -> Result<TensorId, NnError> {
    if tape.value(context).rows() == 0 || tape.value(context).is_empty() {
        return Err(NnError::EmptyContext);
    }
    let out = attn.attend(tape, ps, queries, context, None)?;
    tape.add(queries, out)
}

/// Position-wise feed-forward with residual connection.
pub fn ffn<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    f: &Ffn,
    x: TensorId,
) -> Result<TensorId, NnError> {
    let y = f.apply(tape, ps, x)?;
    tape.add(x, y)
}

/// Multiply masked rows by zero so padding carries no values downstream.
pub fn zero_masked_rows<E: Elem>(
    tape: &mut Tape<E>,
    x: TensorId,
    mask: &[bool],
) -> Result<TensorId, NnError> {
    let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
    debug_assert_eq!(mask.len(), r);
    let mut m = super::array::NdArray::<E>::zeros(vec![r, c]);
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            for v in &mut m.data_mut()[i * c..(i + 1) * c] {
                *v = E::one();
            }
        }
    }
    let mleaf = tape.leaf(m);
    tape.mul(x, mleaf)
}
