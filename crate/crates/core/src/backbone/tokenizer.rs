use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::{char::is_combining_mark, UnicodeNormalization};

use super::BackboneError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialTokens {
    pub fn all(&self) -> [u32; 5] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    fn special(&self) -> SpecialTokens;
    fn max_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn token_to_id(&self, token: &str) -> Option<u32>;
    fn id_to_token(&self, id: u32) -> Option<&str>;
}

const SPECIAL_STRINGS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65 | 0x00A1..=0x00BF)
}

/// Whitespace / punctuation / CJK-character splitting in the style of BERT's
/// basic tokenizer. Literal special-token strings such as `[MASK]` pass
/// through intact.
pub fn basic_split(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(sp) = SPECIAL_STRINGS.iter().find(|s| rest.starts_with(**s)) {
                flush(&mut word, &mut out);
                out.push(sp.to_string());
                rest = &rest[sp.len()..];
                continue;
            }
        }
        rest = &rest[c.len_utf8()..];
        if c.is_whitespace() || c.is_control() {
            flush(&mut word, &mut out);
        } else if is_punct(c) || is_cjk(c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else if lowercase {
            for l in c.to_lowercase() {
                word.extend(l.to_string().nfd().filter(|m| !is_combining_mark(*m)));
            }
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Closed-vocabulary word tokenizer; out-of-vocabulary words map to `[UNK]`.
#[derive(Debug, Clone)]
pub struct WordLevelTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    special: SpecialTokens,
    max_len: usize,
}

impl WordLevelTokenizer {
    /// `words` must start with the five special tokens in the order
    /// `[PAD] [UNK] [CLS] [SEP] [MASK]`.
    pub fn new(words: &[&str], max_len: usize) -> Result<Self, BackboneError> {
        if words.len() < 5 || words[..5] != SPECIAL_STRINGS {
            return Err(BackboneError::Config(
                "word vocabulary must begin with [PAD] [UNK] [CLS] [SEP] [MASK]".into(),
            ));
        }
        let vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let ids: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        if ids.len() != vocab.len() {
            return Err(BackboneError::Config("duplicate word in vocabulary".into()));
        }
        Ok(Self {
            vocab,
            ids,
            special: SpecialTokens {
                pad: 0,
                unk: 1,
                cls: 2,
                sep: 3,
                mask: 4,
            },
            max_len,
        })
    }
}

impl Tokenizer for WordLevelTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        basic_split(text, true)
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(self.special.unk))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|i| self.id_to_token(*i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn special(&self) -> SpecialTokens {
        self.special
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }
}

/// Greedy longest-match-first WordPiece over a BERT `vocab.txt`.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    special: SpecialTokens,
    lowercase: bool,
    max_len: usize,
}

impl WordPieceTokenizer {
    pub fn from_vocab(tokens: Vec<String>, lowercase: bool, max_len: usize) -> Result<Self, BackboneError> {
        let ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let find = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| BackboneError::Config(format!("vocabulary lacks {s}")))
        };
        let special = SpecialTokens {
            pad: find("[PAD]")?,
            unk: find("[UNK]")?,
            cls: find("[CLS]")?,
            sep: find("[SEP]")?,
            mask: find("[MASK]")?,
        };
        Ok(Self {
            vocab: tokens,
            ids,
            special,
            lowercase,
            max_len,
        })
    }

    pub fn from_file(path: &Path, lowercase: bool, max_len: usize) -> Result<Self, BackboneError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackboneError::Load {
            spec: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_vocab(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect(), lowercase, max_len)
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(&id) = self.ids.get(word) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > 100 {
            out.push(self.special.unk);
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
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.ids.get(&piece) {
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
                    out.push(self.special.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in basic_split(text, self.lowercase) {
            self.word_pieces(&word, &mut out);
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for id in ids {
            let tok = self.id_to_token(*id).unwrap_or("[UNK]");
            if let Some(rest) = tok.strip_prefix("##") {
                s.push_str(rest);
            } else {
                if !s.is_empty() {
                    s.push(' ');
                }
                s.push_str(tok);
            }
        }
        s
    }

    fn special(&self) -> SpecialTokens {
        self.special
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }
}
