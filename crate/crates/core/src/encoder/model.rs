use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{EncoderParams, LayerParams};
use super::EncoderConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};

/// Index of the relevant class in the classification head.
pub const RELEVANT_CLASS: usize = 1;

const MASK_VALUE: f64 = -1e9;

/// Token and segment ids for one `[CLS] query [SEP] passage [SEP]` input.
/// Positions holding `[PAD]` are excluded as attention keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl EncoderInput {
    pub fn new(token_ids: Vec<usize>, segment_ids: Vec<usize>) -> Self {
        Self {
            token_ids,
            segment_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// 1 for real tokens, 0 for `[PAD]`.
    pub fn real_mask(&self) -> Vec<f64> {
        self.token_ids
            .iter()
            .map(|&t| if t == PAD_ID { 0.0 } else { 1.0 })
            .collect()
    }

    fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::Contract("empty encoder input".into()));
        }
        if self.token_ids.len() > cfg.max_position {
            return Err(Error::InputLength {
                len: self.token_ids.len(),
                max: cfg.max_position,
            });
        }
        if self.segment_ids.len() != self.token_ids.len() {
            return Err(Error::Contract(format!(
                "{} segment ids for {} tokens",
                self.segment_ids.len(),
                self.token_ids.len()
            )));
        }
        if let Some(t) = self.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {t} outside vocab of {}", cfg.vocab_size)));
        }
        if let Some(s) = self.segment_ids.iter().find(|&&s| s >= cfg.type_vocab_size) {
            return Err(Error::Contract(format!("segment id {s} is not in {{0,1}}")));
        }
        Ok(())
    }
}

/// Graph handles for every internal the distillation losses consume.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub embedding_output: Var,
    /// `[layer][head]`, each `seq×seq`, pre-softmax scaled dot products.
    pub attention_scores: Vec<Vec<Var>>,
    pub hidden_states: Vec<Var>,
    pub logits: Var,
}

/// Materialized internals of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    pub embedding_output: Tensor,
    /// One `[heads × seq × seq]` tensor per layer, before softmax.
    pub attention_scores: Vec<Tensor>,
    pub hidden_states: Vec<Tensor>,
    pub logits: Tensor,
}

impl EncoderTrace {
    fn from_vars(g: &Graph, vars: &TraceVars) -> Self {
        let attention_scores = vars
            .attention_scores
            .iter()
            .map(|heads| {
                let n = g.value(heads[0]).rows();
                let data: Vec<f64> = heads.iter().flat_map(|&h| g.value(h).data().iter().copied()).collect();
                Tensor::new(vec![heads.len(), n, n], data).expect("square heads")
            })
            .collect();
        Self {
            embedding_output: g.value(vars.embedding_output).clone(),
            attention_scores,
            hidden_states: vars.hidden_states.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(vars.logits).clone(),
        }
    }

    /// Probability of the relevant class.
    pub fn score(&self) -> f64 {
        relevance_score(self.logits.data())
    }
}

pub fn relevance_score(logits: &[f64]) -> f64 {
    let t = Tensor::new(vec![logits.len()], logits.to_vec()).expect("non-empty logits");
    t.softmax(0).expect("axis 0").data()[RELEVANT_CLASS]
}

/// Records one encoder forward pass on `g`.
pub fn forward(g: &mut Graph, cfg: &EncoderConfig, p: &EncoderParams<Var>, input: &EncoderInput) -> Result<TraceVars> {
    input.validate(cfg)?;
    let n = input.len();
    let positions: Vec<usize> = (0..n).collect();

    let word = g.gather(p.word_embeddings, &input.token_ids)?;
    let pos = g.gather(p.position_embeddings, &positions)?;
    let seg = g.gather(p.segment_embeddings, &input.segment_ids)?;
    let sum = g.add(word, pos)?;
    let sum = g.add(sum, seg)?;
    let embedding_output = g.layer_norm(sum, p.embedding_norm_gain, p.embedding_norm_bias, cfg.layer_norm_eps)?;

    let real = input.real_mask();
    let mask = if real.iter().any(|&r| r == 0.0) {
        let mut m = vec![0.0; n * n];
        for row in m.chunks_mut(n) {
            for (j, r) in real.iter().enumerate() {
                if *r == 0.0 {
                    row[j] = MASK_VALUE;
                }
            }
        }
        Some(g.constant(Tensor::new(vec![n, n], m)?))
    } else {
        None
    };

    let mut x = embedding_output;
    let mut attention_scores = Vec::with_capacity(cfg.num_layers);
    let mut hidden_states = Vec::with_capacity(cfg.num_layers);
    for layer in &p.layers {
        let (out, scores) = encoder_layer(g, cfg, layer, x, mask)?;
        attention_scores.push(scores);
        hidden_states.push(out);
        x = out;
    }

    let cls = g.select_row(x, 0)?;
    let pooled = g.matmul(cls, p.pooler_weight)?;
    let pooled = g.add_row(pooled, p.pooler_bias)?;
    let pooled = g.tanh(pooled);
    let logits = g.matmul(pooled, p.classifier_weight)?;
    let logits = g.add_row(logits, p.classifier_bias)?;
    let logits = g.reshape(logits, vec![cfg.num_labels])?;

    Ok(TraceVars {
        embedding_output,
        attention_scores,
        hidden_states,
        logits,
    })
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn encoder_layer(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &LayerParams<Var>,
    x: Var,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.head_dim();
    let q = linear(g, x, p.query_weight, p.query_bias)?;
    let k = linear(g, x, p.key_weight, p.key_bias)?;
    let v = linear(g, x, p.value_weight, p.value_bias)?;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut scores = Vec::with_capacity(cfg.num_heads);
    let mut contexts = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * d, d)?,
                g.slice_cols(k, h * d, d)?,
                g.slice_cols(v, h * d, d)?,
            )
        };
        let raw = g.matmul_bt(qh, kh)?;
        let s = g.scale(raw, inv_sqrt_d);
        let masked = match mask {
            Some(m) => g.add(s, m)?,
            None => s,
        };
        let probs = g.softmax(masked, 1)?;
        contexts.push(g.matmul(probs, vh)?);
        scores.push(s);
    }
    let context = if contexts.len() == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    let attn = linear(g, context, p.output_weight, p.output_bias)?;
    let res = g.add(x, attn)?;
    let h1 = g.layer_norm(res, p.attention_norm_gain, p.attention_norm_bias, cfg.layer_norm_eps)?;

    let inner = linear(g, h1, p.ffn_in_weight, p.ffn_in_bias)?;
    let inner = g.gelu(inner);
    let ffn = linear(g, inner, p.ffn_out_weight, p.ffn_out_bias)?;
    let res = g.add(h1, ffn)?;
    let out = g.layer_norm(res, p.ffn_norm_gain, p.ffn_norm_bias, cfg.layer_norm_eps)?;
    Ok((out, scores))
}

/// A BERT-style cross-encoder with a two-way relevance head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams<Tensor>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::zeros(&config);
        Ok(Self { config, params })
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<EncoderTrace> {
        self.session().encode(input)
    }

    pub fn score(&self, input: &EncoderInput) -> Result<f64> {
        self.session().score(input)
    }

    /// Inference context that binds the weights once for many inputs.
    pub fn session(&self) -> Session<'_> {
        let mut graph = Graph::new();
        let vars = self.params.bind(&mut graph, false);
        let mark = graph.len();
        Session {
            encoder: self,
            graph,
            vars,
            mark,
        }
    }

    pub fn bit_eq(&self, other: &Encoder) -> bool {
        self.config == other.config && self.params.bit_eq(&other.params)
    }
}

pub struct Session<'a> {
    encoder: &'a Encoder,
    graph: Graph,
    vars: EncoderParams<Var>,
    mark: usize,
}

impl Session<'_> {
    pub fn encode(&mut self, input: &EncoderInput) -> Result<EncoderTrace> {
        let vars = forward(&mut self.graph, &self.encoder.config, &self.vars, input);
        let out = vars.map(|v| EncoderTrace::from_vars(&self.graph, &v));
        self.graph.truncate(self.mark);
        out
    }

    pub fn logits(&mut self, input: &EncoderInput) -> Result<Vec<f64>> {
        let vars = forward(&mut self.graph, &self.encoder.config, &self.vars, input);
        let out = vars.map(|v| self.graph.value(v.logits).data().to_vec());
        self.graph.truncate(self.mark);
        out
    }

    pub fn score(&mut self, input: &EncoderInput) -> Result<f64> {
        Ok(relevance_score(&self.logits(input)?))
    }
}

/// Seeds a student with the teacher's embeddings, its first
/// `student.num_layers` layers and its pooler. The classifier is freshly
/// drawn from `seed`.
pub fn init_student_from_teacher(teacher: &Encoder, student: &EncoderConfig, seed: u64) -> Result<Encoder> {
    student.validate()?;
    check_copy_compatible(&teacher.config, student)?;
    let mut params = teacher.params.clone();
    params.layers.truncate(student.num_layers);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.classifier_weight.data_mut() {
        *v = normal.sample(&mut rng);
    }
    params.classifier_bias.data_mut().fill(0.0);
    Ok(Encoder {
        config: student.clone(),
        params,
    })
}

/// Checks that a student of `student` shape can take copied teacher layers.
pub fn check_copy_compatible(teacher: &EncoderConfig, student: &EncoderConfig) -> Result<()> {
    let same = teacher.hidden_size == student.hidden_size
        && teacher.num_heads == student.num_heads
        && teacher.intermediate_size == student.intermediate_size
        && teacher.vocab_size == student.vocab_size
        && teacher.max_position == student.max_position
        && teacher.type_vocab_size == student.type_vocab_size;
    if !same {
        return Err(Error::IncompatibleShapes(format!(
            "student {} cannot copy layers from teacher {}: widths differ, run general distillation instead",
            student.name(),
            teacher.name()
        )));
    }
    if student.num_layers > teacher.num_layers {
        return Err(Error::IncompatibleShapes(format!(
            "student has {} layers but the teacher only {}",
            student.num_layers, teacher.num_layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig::new(2, 8, 30, 16)
    }

    fn input(tokens: &[usize]) -> EncoderInput {
        let segs = tokens.iter().enumerate().map(|(i, _)| usize::from(i >= 3)).collect();
        EncoderInput::new(tokens.to_vec(), segs)
    }

    #[test]
    fn zero_network_scores_one_half() {
        let enc = Encoder::zeros(tiny()).unwrap();
        let trace = enc.encode(&input(&[2, 7, 3, 9, 3])).unwrap();
        assert_eq!(trace.logits.data(), &[0.0, 0.0]);
        assert_eq!(trace.score(), 0.5);
    }

    #[test]
    fn trace_shapes() {
        let cfg = EncoderConfig::new(3, 16, 30, 16).with_heads(4);
        let enc = Encoder::new(cfg, 3).unwrap();
        let t = enc.encode(&input(&[2, 7, 3, 9, 11, 3])).unwrap();
        assert_eq!(t.embedding_output.shape(), &[6, 16]);
        assert_eq!(t.attention_scores.len(), 3);
        assert_eq!(t.attention_scores[0].shape(), &[4, 6, 6]);
        assert_eq!(t.hidden_states.len(), 3);
        assert_eq!(t.logits.shape(), &[2]);
        assert!(t.logits.is_finite());
    }

    #[test]
    fn pad_positions_are_masked() {
        let enc = Encoder::new(tiny(), 5).unwrap();
        let mut a = input(&[2, 7, 3, 0, 9, 0, 3]);
        let la = enc.encode(&a).unwrap().logits;
        a.token_ids.swap(3, 5);
        a.segment_ids.swap(3, 5);
        let lb = enc.encode(&a).unwrap().logits;
        for (x, y) in la.data().iter().zip(lb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_scores_are_pre_softmax() {
        let enc = Encoder::new(tiny(), 9).unwrap();
        let t = enc.encode(&input(&[2, 5, 3, 8, 8, 3])).unwrap();
        let s = &t.attention_scores[0];
        // pre-softmax rows do not sum to one; their softmax does
        let row_sum: f64 = s.data()[..6].iter().sum();
        assert!((row_sum - 1.0).abs() > 1e-6);
        let probs = s.softmax(2).unwrap();
        for row in probs.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn rejects_overlong_and_bad_inputs() {
        let enc = Encoder::new(tiny(), 1).unwrap();
        let long = input(&[4; 17]);
        assert!(matches!(enc.encode(&long), Err(Error::InputLength { len: 17, max: 16 })));
        assert!(enc.encode(&input(&[31])).is_err());
        assert!(enc.encode(&EncoderInput::new(vec![2, 3], vec![0, 2])).is_err());
    }

    #[test]
    fn session_matches_one_shot_encode() {
        let enc = Encoder::new(tiny(), 2).unwrap();
        let mut s = enc.session();
        for toks in [&[2usize, 4, 3, 5, 3][..], &[2, 9, 9, 3, 1, 1, 3]] {
            let a = s.encode(&input(toks)).unwrap();
            let b = enc.encode(&input(toks)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_copy_keeps_representations() {
        let teacher = Encoder::new(tiny(), 21).unwrap();
        let student = init_student_from_teacher(&teacher, &tiny(), 99).unwrap();
        let x = input(&[2, 4, 3, 5, 6, 3]);
        let (a, b) = (teacher.encode(&x).unwrap(), student.encode(&x).unwrap());
        assert_eq!(a.hidden_states, b.hidden_states);
        assert_eq!(a.attention_scores, b.attention_scores);
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn partial_copy_is_bitwise() {
        let cfg = EncoderConfig::new(12, 8, 20, 8);
        let teacher = Encoder::new(cfg, 4).unwrap();
        let six = EncoderConfig { num_layers: 6, ..teacher.config.clone() };
        let student = init_student_from_teacher(&teacher, &six, 0).unwrap();
        assert_eq!(student.config.num_layers, 6);
        let (t3, s3) = (&teacher.params.layers[2], &student.params.layers[2]);
        assert!(t3.query_weight.bit_eq(&s3.query_weight));
        assert!(t3.ffn_out_weight.bit_eq(&s3.ffn_out_weight));
        assert!(teacher.params.word_embeddings.bit_eq(&student.params.word_embeddings));
        let thirteen = EncoderConfig { num_layers: 13, ..teacher.config.clone() };
        assert!(init_student_from_teacher(&teacher, &thirteen, 0).is_err());
    }

    #[test]
    fn width_mismatch_points_to_general_distillation() {
        let t = EncoderConfig::new(4, 64, 20, 8);
        let s = EncoderConfig::new(2, 32, 20, 8);
        let err = check_copy_compatible(&t, &s).unwrap_err().to_string();
        assert!(err.contains("general distillation"), "{err}");
    }
}
