use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a BERT-style encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab_size: usize,
    pub num_labels: usize,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// `L{layers}_H{hidden}` with 4·H intermediate size and 64-wide heads
    /// where the width allows it (16-wide below 64).
    pub fn new(num_layers: usize, hidden_size: usize, vocab_size: usize, max_position: usize) -> Self {
        let head_dim = if hidden_size >= 64 { 64 } else { 16.min(hidden_size) };
        Self {
            num_layers,
            hidden_size,
            num_heads: (hidden_size / head_dim).max(1),
            intermediate_size: 4 * hidden_size,
            vocab_size,
            max_position,
            type_vocab_size: 2,
            num_labels: 2,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn with_heads(mut self, num_heads: usize) -> Self {
        self.num_heads = num_heads;
        self
    }

    pub fn with_intermediate(mut self, intermediate_size: usize) -> Self {
        self.intermediate_size = intermediate_size;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn name(&self) -> String {
        format!("L{}_H{}", self.num_layers, self.hidden_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
            ("type_vocab_size", self.type_vocab_size),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Contract(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return Err(Error::Contract("layer_norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_counts() {
        assert_eq!(EncoderConfig::new(12, 768, 30522, 512).num_heads, 12);
        assert_eq!(EncoderConfig::new(6, 768, 30522, 512).num_heads, 12);
        assert_eq!(EncoderConfig::new(3, 384, 30522, 512).num_heads, 6);
        assert_eq!(EncoderConfig::new(4, 64, 100, 32).num_heads, 1);
        assert_eq!(EncoderConfig::new(2, 32, 100, 32).num_heads, 2);
        assert_eq!(EncoderConfig::new(2, 8, 100, 32).num_heads, 1);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig::new(2, 10, 50, 16).with_heads(3);
        assert!(cfg.validate().is_err());
    }
}
