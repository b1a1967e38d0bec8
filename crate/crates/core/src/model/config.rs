use serde::{Deserialize, Serialize};

use crate::graph::layout::{D_BREP, D_STL, E_BREP, E_STL};
use crate::{Error, Result};

/// Node encoder applied to process and design graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Edge-aware multi-head graph attention.
    Gat,
    /// Per-node feed-forward network that ignores adjacency.
    Nn,
}

/// Attention masking in the sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// Causal decoder: step `t` sees labels and graphs up to `t` only.
    Decoder,
    /// Unmasked encoder over the whole sequence; leaks future labels.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_latent: usize,
    pub n_heads: usize,
    pub n_gat_layers: usize,
    pub n_decoder_layers: usize,
    pub t_max: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub n_main_classes: usize,
    pub n_sub_classes: usize,
    pub encoder: EncoderKind,
    pub sequence: SequenceKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_latent: 64,
            n_heads: 4,
            n_gat_layers: 2,
            n_decoder_layers: 2,
            t_max: 16,
            ffn_width: 128,
            dropout: 0.1,
            leaky_slope: 0.2,
            n_main_classes: 3,
            n_sub_classes: 12,
            encoder: EncoderKind::Gat,
            sequence: SequenceKind::Decoder,
        }
    }
}

impl ModelConfig {
    pub const D_STL: usize = D_STL;
    pub const E_STL: usize = E_STL;
    pub const D_BREP: usize = D_BREP;
    pub const E_BREP: usize = E_BREP;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_latent == 0 || self.n_heads == 0 || self.d_latent % self.n_heads != 0 {
            return bad(format!(
                "d_latent {} must be a positive multiple of n_heads {}",
                self.d_latent, self.n_heads
            ));
        }
        if self.n_gat_layers == 0 || self.n_decoder_layers == 0 || self.t_max == 0 || self.ffn_width == 0 {
            return bad("layer counts, t_max and ffn_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        if self.n_main_classes != 3 || self.n_sub_classes != 12 {
            return bad("the label vocabulary has 3 main and 12 sub classes".into());
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_latent / self.n_heads
    }
}
