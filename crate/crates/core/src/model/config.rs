use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture descriptor of a Llama-shaped decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub query_heads: usize,
    pub attention_groups: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub context: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Rotary embedding base shared by every model.
pub const ROPE_BASE: f64 = 10_000.0;

impl ModelConfig {
    /// Collects every violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.depth < 1 {
            v.push("depth must be >= 1".to_string());
        }
        if self.hidden < 1 {
            v.push("hidden must be >= 1".to_string());
        }
        if self.mlp_hidden < 1 {
            v.push("mlp_hidden must be >= 1".to_string());
        }
        if self.vocab < 2 {
            v.push("vocab must be >= 2".to_string());
        }
        if self.query_heads < 1 {
            v.push("query_heads must be >= 1".to_string());
        }
        if self.attention_groups < 1 {
            v.push("attention_groups must be >= 1".to_string());
        } else if !self.query_heads.is_multiple_of(self.attention_groups) {
            v.push(format!(
                "query_heads mod groups: {} mod {} != 0",
                self.query_heads, self.attention_groups
            ));
        }
        if self.head_dim < 1 {
            v.push("head_dim must be >= 1".to_string());
        } else if !self.head_dim.is_multiple_of(2) {
            v.push(format!("head_dim must be even for rotary embedding, got {}", self.head_dim));
        }
        if self.context < 1 {
            v.push("context must be >= 1".to_string());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            v.push(format!("norm_eps must be a small positive scalar, got {}", self.norm_eps));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn attn_width(&self) -> usize {
        self.query_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.attention_groups * self.head_dim
    }

    pub fn heads_per_group(&self) -> usize {
        self.query_heads / self.attention_groups
    }

    /// Every tensor name and shape this config implies, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embed.tok".to_string(), vec![self.vocab, self.hidden])];
        for i in 0..self.depth {
            out.push((format!("layer.{i}.attn.q"), vec![self.attn_width(), self.hidden]));
            out.push((format!("layer.{i}.attn.k"), vec![self.kv_width(), self.hidden]));
            out.push((format!("layer.{i}.attn.v"), vec![self.kv_width(), self.hidden]));
            out.push((format!("layer.{i}.attn.o"), vec![self.hidden, self.attn_width()]));
            out.push((format!("layer.{i}.mlp.gate"), vec![self.mlp_hidden, self.hidden]));
            out.push((format!("layer.{i}.mlp.up"), vec![self.mlp_hidden, self.hidden]));
            out.push((format!("layer.{i}.mlp.down"), vec![self.hidden, self.mlp_hidden]));
            out.push((format!("layer.{i}.norm.attn"), vec![self.hidden]));
            out.push((format!("layer.{i}.norm.mlp"), vec![self.hidden]));
        }
        out.push(("final.norm".to_string(), vec![self.hidden]));
        if !self.tie_embeddings {
            out.push(("head.out".to_string(), vec![self.vocab, self.hidden]));
        }
        out
    }

    /// Returns `(total, non_embedding)` parameter counts. Non-embedding
    /// excludes the token embedding and the output head.
    pub fn count_params(&self) -> (usize, usize) {
        let mut total = 0;
        let mut non_emb = 0;
        for (name, shape) in self.tensor_shapes() {
            let n: usize = shape.iter().product();
            total += n;
            if name != "embed.tok" && name != "head.out" {
                non_emb += n;
            }
        }
        (total, non_emb)
    }
}
