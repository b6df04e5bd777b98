//! The graph-built forward pass against a direct loop implementation.

use distilrank::encoder::{Encoder, EncoderConfig, EncoderInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mat(t: &distilrank::autodiff::Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Returns logits and the pre-softmax scores of every layer and head.
fn reference(enc: &Encoder, input: &EncoderInput) -> (Vec<f64>, Vec<Vec<Mat>>) {
    let cfg = &enc.config;
    let p = &enc.params;
    let (word, pos, seg) = (
        mat(&p.word_embeddings),
        mat(&p.position_embeddings),
        mat(&p.segment_embeddings),
    );
    let n = input.len();
    let emb: Mat = (0..n)
        .map(|i| {
            (0..cfg.hidden_size)
                .map(|j| word[input.token_ids[i]][j] + pos[i][j] + seg[input.segment_ids[i]][j])
                .collect()
        })
        .collect();
    let mut x = norm(
        &emb,
        p.embedding_norm_gain.data(),
        p.embedding_norm_bias.data(),
        cfg.layer_norm_eps,
    );
    let d = cfg.head_dim();
    let mut all_scores = Vec::new();
    for l in &p.layers {
        let q = affine(&x, &mat(&l.query_weight), l.query_bias.data());
        let k = affine(&x, &mat(&l.key_weight), l.key_bias.data());
        let v = affine(&x, &mat(&l.value_weight), l.value_bias.data());
        let mut ctx = vec![vec![0.0; cfg.hidden_size]; n];
        let mut layer_scores = Vec::new();
        for h in 0..cfg.num_heads {
            let cols = h * d..(h + 1) * d;
            let mut scores = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    scores[i][j] = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt();
                }
                let live: Vec<f64> = (0..n)
                    .map(|j| if input.token_ids[j] == 0 { f64::NEG_INFINITY } else { scores[i][j] })
                    .collect();
                let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = live.iter().map(|s| (s - max).exp()).sum();
                for j in 0..n {
                    let a = (live[j] - max).exp() / z;
                    for c in cols.clone() {
                        ctx[i][c] += a * v[j][c];
                    }
                }
            }
            layer_scores.push(scores);
        }
        all_scores.push(layer_scores);
        let attn = affine(&ctx, &mat(&l.output_weight), l.output_bias.data());
        let h1 = norm(
            &add(&x, &attn),
            l.attention_norm_gain.data(),
            l.attention_norm_bias.data(),
            cfg.layer_norm_eps,
        );
        let inner: Mat = affine(&h1, &mat(&l.ffn_in_weight), l.ffn_in_bias.data())
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ffn = affine(&inner, &mat(&l.ffn_out_weight), l.ffn_out_bias.data());
        x = norm(&add(&h1, &ffn), l.ffn_norm_gain.data(), l.ffn_norm_bias.data(), cfg.layer_norm_eps);
    }
    let pooled: Mat = affine(&x[..1].to_vec(), &mat(&p.pooler_weight), p.pooler_bias.data())
        .into_iter()
        .map(|r| r.into_iter().map(f64::tanh).collect())
        .collect();
    let logits = affine(&pooled, &mat(&p.classifier_weight), p.classifier_bias.data());
    (logits[0].clone(), all_scores)
}

fn random_input(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> EncoderInput {
    let n = rng.random_range(3..=max_len);
    let split = rng.random_range(1..n);
    let pad_from = if rng.random_bool(0.5) { rng.random_range(split + 1..=n) } else { n };
    let token_ids = (0..n)
        .map(|i| if i >= pad_from { 0 } else { rng.random_range(1..vocab) })
        .collect();
    let segment_ids = (0..n).map(|i| usize::from(i >= split)).collect();
    EncoderInput::new(token_ids, segment_ids)
}

#[test]
fn graph_forward_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (seed, cfg) in [
        (1, EncoderConfig::new(2, 8, 30, 16)),
        (2, EncoderConfig::new(3, 32, 40, 16)),
        (3, EncoderConfig::new(1, 16, 20, 16).with_heads(4)),
    ] {
        let mut enc = Encoder::new(cfg, seed).unwrap();
        // non-trivial biases and gains so every term is exercised
        for t in enc.params.values_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for _ in 0..10 {
            let input = random_input(&mut rng, enc.config.vocab_size, 16);
            let trace = enc.encode(&input).unwrap();
            let (logits, scores) = reference(&enc, &input);
            for (a, b) in trace.logits.data().iter().zip(&logits) {
                assert!((a - b).abs() < 1e-10, "logit {a} vs {b}");
            }
            for (layer, want) in trace.attention_scores.iter().zip(&scores) {
                let got: Vec<f64> = layer.data().to_vec();
                let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
                assert_eq!(got.len(), flat.len());
                for (a, b) in got.iter().zip(&flat) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}
