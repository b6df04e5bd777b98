//! Mini-BERT cross-encoder exposing the internals distillation needs.

mod checkpoint;
mod config;
mod flops;
mod model;
mod params;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::EncoderConfig;
pub use flops::{estimate_macs, format_giga, speedup};
pub use model::{
    check_copy_compatible, forward, init_student_from_teacher, relevance_score, Encoder, EncoderInput,
    EncoderTrace, Session, TraceVars, RELEVANT_CLASS,
};
pub use params::{param_shape, EncoderParams, LayerParams};
