//! WordPiece vocabulary and tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    cls: usize,
    sep: usize,
}

impl Vocab {
    /// `[PAD]` must come first; `[UNK]`, `[CLS]` and `[SEP]` must be present.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocab entry `{t}`")));
            }
        }
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Contract(format!("vocab must start with {PAD}")));
        }
        let get = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Contract(format!("vocab lacks reserved token {t}")))
        };
        let (unk, cls, sep) = (get(UNK)?, get(CLS)?, get(SEP)?);
        Ok(Self {
            tokens,
            index,
            unk,
            cls,
            sep,
        })
    }

    /// Reserved tokens, then the `max_words` most frequent words (ties broken
    /// alphabetically), then every seen character alone and as a
    /// continuation piece so any seen word can be segmented.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for word in basic_split(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut by_freq: Vec<(&String, &usize)> = counts.iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for (w, _) in by_freq.iter().take(max_words) {
            push((*w).clone(), &mut tokens);
        }
        let chars: std::collections::BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
        for c in &chars {
            push(c.to_string(), &mut tokens);
        }
        for c in &chars {
            push(format!("{CONTINUATION}{c}"), &mut tokens);
        }
        Self::from_tokens(tokens).expect("reserved tokens inserted first")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    /// Lowercase, split on whitespace and punctuation, then greedy
    /// longest-match-first subword segmentation. A word that cannot be fully
    /// segmented becomes a single `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in basic_split(text) {
            self.wordpiece(&word, &mut out);
        }
        out
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Joins pieces back into text; continuation pieces attach to the
    /// previous piece.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercased words and single punctuation characters.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
