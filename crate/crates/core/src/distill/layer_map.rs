use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Student layer `m` (1-based) is matched to teacher layer `g(m)`; the
/// embedding output is always matched to the teacher's embedding output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub student_layers: usize,
    pub teacher_layers: usize,
    /// `mapping[m - 1] = g(m)`, 1-based teacher layers.
    pub mapping: Vec<usize>,
}

impl LayerMap {
    /// 0-based teacher layer for 0-based student layer `m`.
    pub fn teacher_index(&self, m: usize) -> usize {
        self.mapping[m] - 1
    }
}

/// `g(m) = m · M / N`.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> Result<LayerMap> {
    if student_layers == 0 || teacher_layers == 0 || !teacher_layers.is_multiple_of(student_layers) {
        return Err(Error::UnsupportedMap {
            student: student_layers,
            teacher: teacher_layers,
        });
    }
    let step = teacher_layers / student_layers;
    Ok(LayerMap {
        student_layers,
        teacher_layers,
        mapping: (1..=student_layers).map(|m| m * step).collect(),
    })
}
