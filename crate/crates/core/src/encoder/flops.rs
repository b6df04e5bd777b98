use super::EncoderConfig;

/// Multiply-accumulate count of one forward pass over `seq_len` tokens.
///
/// Per layer: Q/K/V projections `3·n·H²`, attention output `n·H²`, score
/// and context products `2·n²·H`, feed-forward `2·n·H·I`. Embeddings, layer
/// norm, softmax and activations are not counted.
pub fn estimate_macs(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    let n = seq_len as u64;
    let h = cfg.hidden_size as u64;
    let i = cfg.intermediate_size as u64;
    let per_layer = 4 * n * h * h + 2 * n * n * h + 2 * n * h * i;
    cfg.num_layers as u64 * per_layer
}

/// `reference / cfg` in MACs.
pub fn speedup(cfg: &EncoderConfig, reference: &EncoderConfig, seq_len: usize) -> f64 {
    estimate_macs(reference, seq_len) as f64 / estimate_macs(cfg, seq_len) as f64
}

/// `22.95G`-style rendering.
pub fn format_giga(macs: u64) -> String {
    format!("{:.2}G", macs as f64 / 1e9)
}
