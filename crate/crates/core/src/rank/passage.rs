use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};

/// `[CLS]` plus two `[SEP]`.
pub const SPECIAL_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageSplitConfig {
    pub window: usize,
    pub stride: usize,
    pub max_query_tokens: usize,
    pub max_input_tokens: usize,
}

impl Default for PassageSplitConfig {
    fn default() -> Self {
        Self {
            window: 200,
            stride: 100,
            max_query_tokens: 32,
            max_input_tokens: 256,
        }
    }
}

impl PassageSplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Contract(format!(
                "stride must satisfy 0 < stride <= window (stride {}, window {})",
                self.stride, self.window
            )));
        }
        if self.max_query_tokens == 0 {
            return Err(Error::Contract("max_query_tokens must be positive".into()));
        }
        if self.window + self.max_query_tokens + SPECIAL_TOKENS > self.max_input_tokens {
            return Err(Error::Contract(format!(
                "window {} + query {} + {SPECIAL_TOKENS} special tokens exceeds the input budget {}",
                self.window, self.max_query_tokens, self.max_input_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Passage<'a> {
    pub offset: usize,
    pub tokens: &'a [usize],
}

/// Passages start at 0, stride, 2·stride, … and cover up to `window`
/// tokens each; splitting stops at the first passage that reaches the end of
/// the document, so no passage is contained in its predecessor.
pub fn split_passages<'a>(doc: &'a [usize], cfg: &PassageSplitConfig) -> Vec<Passage<'a>> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < doc.len() {
        let end = (offset + cfg.window).min(doc.len());
        out.push(Passage {
            offset,
            tokens: &doc[offset..end],
        });
        if end == doc.len() {
            break;
        }
        offset += cfg.stride.max(1);
    }
    out
}

/// Title and body joined by `[SEP]`; a missing title contributes nothing.
pub fn document_tokens(vocab: &Vocab, title: &str, body: &str) -> Vec<usize> {
    let mut out = vocab.tokenize(title);
    if !out.is_empty() {
        out.push(vocab.sep_id());
    }
    out.extend(vocab.tokenize(body));
    out
}

/// `[CLS] query [SEP] passage [SEP]` with the query cut to
/// `max_query_tokens` and the passage cut to `window`.
pub fn pair_input(vocab: &Vocab, query: &[usize], passage: &[usize], cfg: &PassageSplitConfig) -> EncoderInput {
    let q = &query[..query.len().min(cfg.max_query_tokens)];
    let p = &passage[..passage.len().min(cfg.window)];
    let mut ids = Vec::with_capacity(q.len() + p.len() + SPECIAL_TOKENS);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(q);
    ids.push(vocab.sep_id());
    let first = ids.len();
    ids.extend_from_slice(p);
    ids.push(vocab.sep_id());
    let segments = (0..ids.len()).map(|i| usize::from(i >= first)).collect();
    EncoderInput::new(ids, segments)
}
