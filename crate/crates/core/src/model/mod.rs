//! Llama-shaped decoder: RMS pre-norm, rotary embeddings, grouped-query
//! attention and a SiLU-gated MLP.
//!
//! Tensor naming scheme (shared by trimming and checkpoints), all matrices
//! stored `[out, in]`:
//!
//! | name | shape |
//! |---|---|
//! | `embed.tok` | `[vocab, hidden]` |
//! | `layer.{i}.attn.q` | `[query_heads * head_dim, hidden]` |
//! | `layer.{i}.attn.{k,v}` | `[attention_groups * head_dim, hidden]` |
//! | `layer.{i}.attn.o` | `[hidden, query_heads * head_dim]` |
//! | `layer.{i}.mlp.{gate,up}` | `[mlp_hidden, hidden]` |
//! | `layer.{i}.mlp.down` | `[hidden, mlp_hidden]` |
//! | `layer.{i}.norm.{attn,mlp}`, `final.norm` | `[hidden]` |
//! | `head.out` (untied only) | `[vocab, hidden]` |

pub mod config;
pub mod engine;
pub mod loss;
pub mod params;
pub mod scalar;

pub use config::ModelConfig;
pub use engine::{
    Capture, ForwardOptions, ForwardOutput, ForwardTrace, LossSpec, NormMode, NormTap, TapMode, TapSpec, WideParams,
};
pub use loss::{forward_kl, lm_loss};
pub use params::{GradSet, ParamSet, Tensor};

use crate::error::{Error, Result};

/// Forward pass over `tokens` laid out `(batch, seq)`; logits are `(batch, seq, vocab)`.
pub fn forward(
    params: &ParamSet,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<f32>> {
    engine::forward_with::<f32, _>(params, tokens, batch, seq, opts)
}

/// Loss and gradients w.r.t. every parameter.
pub fn backward(
    params: &ParamSet,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    loss: LossSpec<'_>,
) -> Result<(f64, GradSet)> {
    backward_with(params, tokens, batch, seq, loss, &ForwardOptions::default())
}

pub fn backward_with(
    params: &ParamSet,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    loss: LossSpec<'_>,
    opts: &ForwardOptions,
) -> Result<(f64, GradSet)> {
    let (value, g) = engine::loss_and_grads::<f32, _>(params, tokens, batch, seq, loss, opts)?;
    if !value.is_finite() {
        return Err(Error::Divergence { step: 0, loss: value });
    }
    let named = g
        .into_named()
        .into_iter()
        .map(|(name, data)| {
            let shape = params.tensors[&name].shape.clone();
            (name, Tensor { shape, data })
        })
        .collect();
    Ok((value, named))
}

/// Total log-likelihood (nats) of `continuation` given `prefix`.
pub fn score_continuation(params: &ParamSet, prefix: &[u32], continuation: &[u32]) -> Result<f64> {
    score_continuation_with(params, prefix, continuation, &ForwardOptions::default())
}

pub fn score_continuation_with(
    params: &ParamSet,
    prefix: &[u32],
    continuation: &[u32],
    opts: &ForwardOptions,
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    if prefix.is_empty() {
        return Err(Error::InvalidArgument("scoring needs a non-empty prefix".into()));
    }
    let total = prefix.len() + continuation.len();
    if total > params.config.context {
        return Err(Error::SequenceTooLong { len: total, context: params.config.context });
    }
    // The final continuation token is only ever a target.
    let mut seq: Vec<u32> = prefix.to_vec();
    seq.extend_from_slice(&continuation[..continuation.len() - 1]);
    let opts = ForwardOptions { taps: TapSpec::none(), ..opts.clone() };
    let out = forward(params, &seq, 1, seq.len(), &opts)?;
    let v = params.config.vocab;
    let mut ll = 0.0;
    for (j, &tok) in continuation.iter().enumerate() {
        if tok as usize >= v {
            return Err(Error::TokenOutOfRange { id: tok, vocab: v });
        }
        let pos = prefix.len() - 1 + j;
        let row = &out.logits[pos * v..(pos + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
        ll += row[tok as usize] as f64 - lse;
    }
    Ok(ll)
}
