//! Evaluation and scripted experiment presets.

pub mod presets;

use crate::data::{ClozeItem, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{forward, lm_loss, ForwardOptions, ParamSet};



/// Mean next-token loss over fixed evaluation batches, weighted by tokens.
pub fn eval_val_loss(params: &ParamSet, batches: &[TokenBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("evaluation batches".into()));
    }
    let v = params.config.vocab;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let out = forward(params, &b.inputs, b.batch, b.seq, &ForwardOptions::default())?;
        total += lm_loss(&out.logits, &b.targets, v)? * b.targets.len() as f64;
        count += b.targets.len();
    }
    Ok(total / count as f64)
}

/// Fraction of cloze items won by the labeled candidate; ties lose.
pub fn eval_cloze(params: &ParamSet, items: &[ClozeItem]) -> Result<f64> {
    crate::importance::cloze_accuracy(params, items, &[])
}
pub use presets::{run_preset, Preset, PresetOptions, Scale, Summary};
