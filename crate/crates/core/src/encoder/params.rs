use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::autodiff::{Graph, Tensor, Var};

/// Per-layer weights. Generic so the same layout carries tensors at rest and
/// graph handles during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub query_weight: T,
    pub query_bias: T,
    pub key_weight: T,
    pub key_bias: T,
    pub value_weight: T,
    pub value_bias: T,
    pub output_weight: T,
    pub output_bias: T,
    pub attention_norm_gain: T,
    pub attention_norm_bias: T,
    pub ffn_in_weight: T,
    pub ffn_in_bias: T,
    pub ffn_out_weight: T,
    pub ffn_out_bias: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub word_embeddings: T,
    pub position_embeddings: T,
    pub segment_embeddings: T,
    pub embedding_norm_gain: T,
    pub embedding_norm_bias: T,
    pub layers: Vec<LayerParams<T>>,
    pub pooler_weight: T,
    pub pooler_bias: T,
    pub classifier_weight: T,
    pub classifier_bias: T,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 16] = [
        "attention.query.weight",
        "attention.query.bias",
        "attention.key.weight",
        "attention.key.bias",
        "attention.value.weight",
        "attention.value.bias",
        "attention.output.weight",
        "attention.output.bias",
        "attention.norm.gain",
        "attention.norm.bias",
        "ffn.in.weight",
        "ffn.in.bias",
        "ffn.out.weight",
        "ffn.out.bias",
        "ffn.norm.gain",
        "ffn.norm.bias",
    ];

    fn fields(&self) -> [&T; 16] {
        [
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.key_bias,
            &self.value_weight,
            &self.value_bias,
            &self.output_weight,
            &self.output_bias,
            &self.attention_norm_gain,
            &self.attention_norm_bias,
            &self.ffn_in_weight,
            &self.ffn_in_bias,
            &self.ffn_out_weight,
            &self.ffn_out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.key_bias,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.output_weight,
            &mut self.output_bias,
            &mut self.attention_norm_gain,
            &mut self.attention_norm_bias,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }

    fn try_from_fn<E>(mut f: impl FnMut(&str) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            query_weight: f(Self::NAMES[0])?,
            query_bias: f(Self::NAMES[1])?,
            key_weight: f(Self::NAMES[2])?,
            key_bias: f(Self::NAMES[3])?,
            value_weight: f(Self::NAMES[4])?,
            value_bias: f(Self::NAMES[5])?,
            output_weight: f(Self::NAMES[6])?,
            output_bias: f(Self::NAMES[7])?,
            attention_norm_gain: f(Self::NAMES[8])?,
            attention_norm_bias: f(Self::NAMES[9])?,
            ffn_in_weight: f(Self::NAMES[10])?,
            ffn_in_bias: f(Self::NAMES[11])?,
            ffn_out_weight: f(Self::NAMES[12])?,
            ffn_out_bias: f(Self::NAMES[13])?,
            ffn_norm_gain: f(Self::NAMES[14])?,
            ffn_norm_bias: f(Self::NAMES[15])?,
        })
    }
}

impl<T> EncoderParams<T> {
    /// Fixed-order `(name, value)` listing; the order is the checkpoint and
    /// optimizer order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embeddings.word".to_string(), &self.word_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
            ("embeddings.segment".to_string(), &self.segment_embeddings),
            ("embeddings.norm.gain".to_string(), &self.embedding_norm_gain),
            ("embeddings.norm.bias".to_string(), &self.embedding_norm_bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, field) in LayerParams::<T>::NAMES.iter().zip(layer.fields()) {
                out.push((format!("layer.{i}.{name}"), field));
            }
        }
        out.push(("pooler.weight".to_string(), &self.pooler_weight));
        out.push(("pooler.bias".to_string(), &self.pooler_bias));
        out.push(("classifier.weight".to_string(), &self.classifier_weight));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    /// Same order as [`EncoderParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.word_embeddings,
            &mut self.position_embeddings,
            &mut self.segment_embeddings,
            &mut self.embedding_norm_gain,
            &mut self.embedding_norm_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.pooler_weight);
        out.push(&mut self.pooler_bias);
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Builds a parameter set by name, in [`EncoderParams::named`] order.
    pub fn try_from_fn<E>(num_layers: usize, mut f: impl FnMut(&str) -> Result<T, E>) -> Result<Self, E> {
        let word_embeddings = f("embeddings.word")?;
        let position_embeddings = f("embeddings.position")?;
        let segment_embeddings = f("embeddings.segment")?;
        let embedding_norm_gain = f("embeddings.norm.gain")?;
        let embedding_norm_bias = f("embeddings.norm.bias")?;
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push(LayerParams::try_from_fn(|name| f(&format!("layer.{i}.{name}")))?);
        }
        Ok(Self {
            word_embeddings,
            position_embeddings,
            segment_embeddings,
            embedding_norm_gain,
            embedding_norm_bias,
            layers,
            pooler_weight: f("pooler.weight")?,
            pooler_bias: f("pooler.bias")?,
            classifier_weight: f("classifier.weight")?,
            classifier_bias: f("classifier.bias")?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        let named = self.named();
        let mut iter = named.into_iter();
        EncoderParams::try_from_fn::<std::convert::Infallible>(self.layers.len(), |name| {
            let (n, v) = iter.next().expect("layout is fixed");
            debug_assert_eq!(n, name);
            Ok(f(name, v))
        })
        .unwrap_or_else(|e| match e {})
    }
}

/// Expected shape of every named parameter.
pub fn param_shape(cfg: &EncoderConfig, name: &str) -> Vec<usize> {
    let h = cfg.hidden_size;
    let i = cfg.intermediate_size;
    let tail = name.splitn(3, '.').nth(2).unwrap_or("");
    match name {
        "embeddings.word" => vec![cfg.vocab_size, h],
        "embeddings.position" => vec![cfg.max_position, h],
        "embeddings.segment" => vec![cfg.type_vocab_size, h],
        "pooler.weight" => vec![h, h],
        "classifier.weight" => vec![h, cfg.num_labels],
        "classifier.bias" => vec![cfg.num_labels],
        _ if name.starts_with("layer.") => match tail {
            "ffn.in.weight" => vec![h, i],
            "ffn.in.bias" => vec![i],
            "ffn.out.weight" => vec![i, h],
            t if t.ends_with(".weight") => vec![h, h],
            _ => vec![h],
        },
        _ => vec![h],
    }
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm.gain")
}

impl EncoderParams<Tensor> {
    /// BERT-style initialization: N(0, 0.02) weights and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        EncoderParams::try_from_fn::<std::convert::Infallible>(cfg.num_layers, |name| {
            let shape = param_shape(cfg, name);
            let numel = shape.iter().product();
            let data = if is_norm_gain(name) {
                vec![1.0; numel]
            } else if shape.len() == 1 {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            Ok(Tensor::new(shape, data).expect("shape matches").with_grad())
        })
        .unwrap_or_else(|e| match e {})
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams::try_from_fn::<std::convert::Infallible>(cfg.num_layers, |name| {
            Ok(Tensor::zeros(&param_shape(cfg, name)).with_grad())
        })
        .unwrap_or_else(|e| match e {})
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderParams<Var> {
        self.map(|_, t| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named(), other.named());
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}
