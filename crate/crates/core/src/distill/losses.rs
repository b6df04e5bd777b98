//! The loss family in plain `f64` form. The training graph builds the same
//! quantities from graph ops; tests tie the two together.

use serde::{Deserialize, Serialize};

use super::layer_map::LayerMap;
use crate::autodiff::Tensor;
use crate::autodiff::kernels::log_softmax;
use crate::encoder::EncoderTrace;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDHyper {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for KDHyper {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha: 0.5,
        }
    }
}

impl KDHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Contract(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// T ∈ {1, 5, 10} × α ∈ {0.2, 0.5, 0.7}, in tie-break order.
    pub fn standard_grid() -> Vec<KDHyper> {
        let mut out = Vec::new();
        for temperature in [1.0, 5.0, 10.0] {
            for alpha in [0.2, 0.5, 0.7] {
                out.push(KDHyper { temperature, alpha });
            }
        }
        out
    }
}

fn check_logits(student: &[f64], other_len: usize) -> Result<()> {
    if student.len() != other_len {
        return Err(Error::Contract(format!(
            "logit lengths differ ({} vs {other_len})",
            student.len()
        )));
    }
    if student.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("student logits".into()));
    }
    Ok(())
}

/// Temperature-softened teacher distribution, the soft-loss target.
pub fn soft_targets(teacher: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

/// `T² · CE(softmax(t/T), softmax(s/T))`.
pub fn soft_loss(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    check_logits(student, teacher.len())?;
    if teacher.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let target = soft_targets(teacher, temperature);
    let scaled: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let logp = log_softmax(&scaled);
    let ce: f64 = target.iter().zip(&logp).map(|(t, l)| -t * l).sum();
    Ok(temperature * temperature * ce)
}

/// `−log softmax(s)[label]`.
pub fn hard_loss(student: &[f64], label: usize) -> Result<f64> {
    if label >= student.len() {
        return Err(Error::Contract(format!(
            "label {label} is not a class of a {}-way head",
            student.len()
        )));
    }
    check_logits(student, student.len())?;
    Ok(-log_softmax(student)[label])
}

/// 1 where both positions are real tokens.
pub fn pair_mask(real: &[f64]) -> Vec<f64> {
    real.iter().flat_map(|a| real.iter().map(move |b| a * b)).collect()
}

/// Row mask repeated across `width` columns.
pub fn row_mask(real: &[f64], width: usize) -> Vec<f64> {
    real.iter().flat_map(|r| std::iter::repeat_n(*r, width)).collect()
}

fn masked_mse(a: &[f64], b: &[f64], mask: &[f64]) -> f64 {
    let (mut acc, mut count) = (0.0, 0.0);
    for ((x, y), w) in a.iter().zip(b).zip(mask) {
        acc += w * (x - y) * (x - y);
        count += w;
    }
    if count > 0.0 {
        acc / count
    } else {
        0.0
    }
}

/// `[heads × n × n]` → per-head matrices, or their mean when the two models
/// have different head counts.
pub fn attention_targets(scores: &Tensor, average: bool) -> Vec<Vec<f64>> {
    let heads = scores.shape()[0];
    let per = scores.numel() / heads;
    let chunks: Vec<&[f64]> = scores.data().chunks(per).collect();
    if !average {
        return chunks.into_iter().map(<[f64]>::to_vec).collect();
    }
    let mut mean = vec![0.0; per];
    for c in chunks {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / heads as f64;
        }
    }
    vec![mean]
}

/// Learned maps from student width to teacher width. Identity and frozen
/// when the widths match.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub hidden: Tensor,
    pub embedding: Tensor,
    pub trainable: bool,
}

impl ProjectionSet {
    pub fn new(student_hidden: usize, teacher_hidden: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        if student_hidden == teacher_hidden {
            let mut eye = Tensor::zeros(&[student_hidden, teacher_hidden]);
            for i in 0..student_hidden {
                eye.data_mut()[i * teacher_hidden + i] = 1.0;
            }
            return Self {
                hidden: eye.clone(),
                embedding: eye,
                trainable: false,
            };
        }
        let bound = 1.0 / (student_hidden as f64).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let data = (0..student_hidden * teacher_hidden)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new(vec![student_hidden, teacher_hidden], data)
                .expect("positive widths")
                .with_grad()
        };
        let hidden = draw();
        let embedding = draw();
        Self {
            hidden,
            embedding,
            trainable: true,
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.hidden, &mut self.embedding]
    }
}

/// `(l_attn, l_hidn, l_emb)` from two materialized traces of the same input.
/// `real` marks non-PAD positions.
pub fn intermediate_losses(
    student: &EncoderTrace,
    teacher: &EncoderTrace,
    map: &LayerMap,
    projections: &ProjectionSet,
    real: &[f64],
) -> Result<(f64, f64, f64)> {
    if student.hidden_states.len() != map.student_layers || teacher.hidden_states.len() != map.teacher_layers {
        return Err(Error::Contract(format!(
            "traces with {} and {} layers do not fit a {}→{} map",
            student.hidden_states.len(),
            teacher.hidden_states.len(),
            map.student_layers,
            map.teacher_layers
        )));
    }
    let n = real.len();
    if student.embedding_output.rows() != n || teacher.embedding_output.rows() != n {
        return Err(Error::Contract("traces come from inputs of different lengths".into()));
    }
    let hs = student.embedding_output.cols();
    let ht = teacher.embedding_output.cols();
    if projections.hidden.shape() != [hs, ht] || projections.embedding.shape() != [hs, ht] {
        return Err(Error::Contract(format!(
            "projections have shape {:?}, traces need [{hs}, {ht}]",
            projections.hidden.shape()
        )));
    }
    let average = student.attention_scores[0].shape()[0] != teacher.attention_scores[0].shape()[0];
    let amask = pair_mask(real);
    let hmask = row_mask(real, ht);

    let mut l_attn = 0.0;
    let mut l_hidn = 0.0;
    for m in 0..map.student_layers {
        let t = map.teacher_index(m);
        let s_att = attention_targets(&student.attention_scores[m], average);
        let t_att = attention_targets(&teacher.attention_scores[t], average);
        let per_head: f64 = s_att
            .iter()
            .zip(&t_att)
            .map(|(a, b)| masked_mse(a, b, &amask))
            .sum::<f64>()
            / s_att.len() as f64;
        l_attn += per_head;
        let proj = student.hidden_states[m].matmul(&projections.hidden)?;
        l_hidn += masked_mse(proj.data(), teacher.hidden_states[t].data(), &hmask);
    }
    let k = map.student_layers as f64;
    let emb = student.embedding_output.matmul(&projections.embedding)?;
    let l_emb = masked_mse(emb.data(), teacher.embedding_output.data(), &hmask);
    Ok((l_attn / k, l_hidn / k, l_emb))
}

/// What a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Fine-tuning on labels alone.
    Hard,
    /// `l_attn + l_hidn + l_emb`.
    Intermediate,
    /// `l_soft`.
    Prediction,
    /// `l_soft + l_hard`.
    PredictionWithHard,
    /// `l_attn + l_hidn + l_emb + l_soft`.
    Combined,
    /// `l_attn + l_hidn + l_emb + l_soft + l_hard`.
    CombinedWithHard,
    /// `α·l_soft + (1−α)·l_hard`.
    StandardKd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Attn,
    Hidn,
    Emb,
    Soft,
    Hard,
}

impl Objective {
    /// Weight of each active component, in summation order.
    pub fn weights(self, hyper: &KDHyper) -> Vec<(Component, f64)> {
        use Component::*;
        match self {
            Objective::Hard => vec![(Hard, 1.0)],
            Objective::Intermediate => vec![(Attn, 1.0), (Hidn, 1.0), (Emb, 1.0)],
            Objective::Prediction => vec![(Soft, 1.0)],
            Objective::PredictionWithHard => vec![(Soft, 1.0), (Hard, 1.0)],
            Objective::Combined => vec![(Attn, 1.0), (Hidn, 1.0), (Emb, 1.0), (Soft, 1.0)],
            Objective::CombinedWithHard => vec![(Attn, 1.0), (Hidn, 1.0), (Emb, 1.0), (Soft, 1.0), (Hard, 1.0)],
            Objective::StandardKd => vec![(Soft, hyper.alpha), (Hard, 1.0 - hyper.alpha)],
        }
    }

    pub fn needs(self, c: Component) -> bool {
        self.weights(&KDHyper::default()).iter().any(|(x, _)| *x == c)
    }

    pub fn needs_teacher_internals(self) -> bool {
        self.needs(Component::Attn)
    }
}

/// Component values; absent ones are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub l_attn: Option<f64>,
    pub l_hidn: Option<f64>,
    pub l_emb: Option<f64>,
    pub l_soft: Option<f64>,
    pub l_hard: Option<f64>,
}

impl LossInputs {
    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::Attn => self.l_attn,
            Component::Hidn => self.l_hidn,
            Component::Emb => self.l_emb,
            Component::Soft => self.l_soft,
            Component::Hard => self.l_hard,
        }
    }
}

/// Components (0 where inactive) and the objective's total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_attn: f64,
    pub l_hidn: f64,
    pub l_emb: f64,
    pub l_soft: f64,
    pub l_hard: f64,
    pub total: f64,
}

pub fn combine_loss(inputs: &LossInputs, objective: Objective, hyper: &KDHyper) -> Result<LossBreakdown> {
    hyper.validate()?;
    let mut out = LossBreakdown::default();
    let mut total = 0.0;
    for (c, w) in objective.weights(hyper) {
        let v = inputs
            .get(c)
            .ok_or_else(|| Error::Contract(format!("{objective:?} needs {c:?}, which is missing")))?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{c:?} loss")));
        }
        match c {
            Component::Attn => out.l_attn = v,
            Component::Hidn => out.l_hidn = v,
            Component::Emb => out.l_emb = v,
            Component::Soft => out.l_soft = v,
            Component::Hard => out.l_hard = v,
        }
        total += w * v;
    }
    out.total = total;
    Ok(out)
}
