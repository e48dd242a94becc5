//! Language-model backbones: a small transformer on a reverse-mode tape,
//! tokenizers, deep-prompt prefixes and checkpoint loading.

mod checkpoint;
pub mod params;
pub mod prefix;
pub mod tape;
pub mod tokenizer;
pub mod transformer;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{export_bert_dir, load_bert_dir};
pub use params::{ParamId, ParamStore};
pub use prefix::{PrefixConfig, PrefixInit, PrefixParams};
pub use tape::{Gradients, Matrix, Tape, Var};
pub use tokenizer::{basic_split, SpecialTokens, Tokenizer, WordLevelTokenizer, WordPieceTokenizer};
pub use transformer::{Transformer, TransformerConfig};

use crate::templates::RenderedPrompt;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone configuration: {0}")]
    Config(String),
    #[error("cannot load backbone `{spec}`: {message}")]
    Load { spec: String, message: String },
    #[error("backbone capability: {0}")]
    Capability(String),
    #[error("sequence of length {needed} exceeds maximum {max}")]
    Length { needed: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("backbone fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },
}

/// Environment variable naming the directory searched for relative
/// checkpoint specs.
pub const CACHE_DIR_ENV: &str = "RECID_CACHE_DIR";

pub const TINY_DEFAULT_SEED: u64 = 7;
pub const TINY_INIT_STD: f64 = 0.5;

/// The 64-entry closed vocabulary of the tiny backbone.
pub const TINY_VOCAB: [&str; 64] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "0", "1", ":", ";", ".", "?", ",", "user",
    "system", "dialogue", "should", "the", "assistant", "make", "a", "recommendation", "now", "no",
    "yes", "answer", "hello", "hi", "i", "you", "like", "want", "to", "see", "what", "is", "good",
    "today", "weather", "music", "movie", "song", "food", "eat", "watch", "listen", "thanks", "bye",
    "how", "are", "fine", "do", "know", "star", "play", "it", "that", "nice", "great", "okay",
    "tell", "me", "about", "suggest", "something",
];

pub fn tiny_config(causal: bool) -> TransformerConfig {
    TransformerConfig {
        vocab_size: TINY_VOCAB.len(),
        hidden_size: 32,
        num_layers: 2,
        num_heads: 2,
        intermediate_size: 128,
        max_position: 256,
        type_vocab_size: 2,
        layer_norm_eps: 1e-12,
        causal,
    }
}

pub fn tiny_tokenizer() -> WordLevelTokenizer {
    WordLevelTokenizer::new(&TINY_VOCAB, tiny_config(false).max_position).expect("static vocabulary")
}

fn fingerprint_of(net: &Transformer, tokenizer: &dyn Tokenizer) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&net.config).expect("config serializes"));
    for id in 0..tokenizer.vocab_size() as u32 {
        h.update(tokenizer.id_to_token(id).unwrap_or("").as_bytes());
        h.update([0]);
    }
    h.update(net.params.digest().as_bytes());
    hex::encode(h.finalize())
}

/// A masked-LM encoder plus its tokenizer. Cheap to clone.
#[derive(Clone)]
pub struct EncoderBackbone {
    spec: String,
    net: Arc<Transformer>,
    tokenizer: Arc<dyn Tokenizer>,
    fingerprint: String,
}

impl std::fmt::Debug for EncoderBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderBackbone")
            .field("spec", &self.spec)
            .field("layers", &self.num_layers())
            .field("hidden", &self.hidden_size())
            .finish()
    }
}

impl EncoderBackbone {
    pub fn new(spec: &str, net: Transformer, tokenizer: Arc<dyn Tokenizer>) -> Result<Self, BackboneError> {
        if net.config.causal {
            return Err(BackboneError::Capability(format!("`{spec}` is a causal model, not an encoder")));
        }
        if tokenizer.vocab_size() != net.config.vocab_size {
            return Err(BackboneError::Capability(format!(
                "tokenizer has {} entries, model vocabulary is {}",
                tokenizer.vocab_size(),
                net.config.vocab_size
            )));
        }
        let fingerprint = fingerprint_of(&net, tokenizer.as_ref());
        Ok(Self {
            spec: spec.to_string(),
            net: Arc::new(net),
            tokenizer,
            fingerprint,
        })
    }

    /// Same tokenizer and fingerprint, different weights (a fine-tuned copy
    /// of this backbone).
    pub fn with_weights(&self, net: Transformer) -> Result<Self, BackboneError> {
        if net.config != self.net.config {
            return Err(BackboneError::Capability("replacement weights use a different configuration".into()));
        }
        Ok(Self {
            spec: self.spec.clone(),
            net: Arc::new(net),
            tokenizer: self.tokenizer.clone(),
            fingerprint: self.fingerprint.clone(),
        })
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    /// Digest of the weights this backbone was loaded with.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn tokenizer_arc(&self) -> Arc<dyn Tokenizer> {
        self.tokenizer.clone()
    }

    pub fn num_layers(&self) -> usize {
        self.net.num_layers()
    }

    pub fn hidden_size(&self) -> usize {
        self.net.hidden_size()
    }

    pub fn max_len(&self) -> usize {
        self.net.config.max_position
    }

    pub fn vocab_size(&self) -> usize {
        self.net.config.vocab_size
    }

    pub fn word_embeddings(&self) -> &Matrix {
        self.net
            .params
            .by_name(transformer::names::WORD)
            .expect("validated at construction")
    }

    pub fn forward_plain(&self, ids: &[u32]) -> Result<Matrix, BackboneError> {
        let mut tape = Tape::frozen(&self.net.params);
        let h = self.net.forward_plain(&mut tape, ids)?;
        Ok(tape.value(h).clone())
    }

    pub fn forward_with_prefix(&self, ids: &[u32], prefix: &PrefixParams) -> Result<Matrix, BackboneError> {
        prefix.validate(self.num_layers(), self.hidden_size())?;
        let mut tape = Tape::frozen(&self.net.params);
        let (slots, _) = prefix.on_tape(&mut tape, self.num_layers(), false);
        let h = self.net.forward_with_prefix(&mut tape, ids, &slots)?;
        Ok(tape.value(h).clone())
    }

    /// Vocabulary logits at the prompt's mask position.
    pub fn mask_logits(&self, rendered: &RenderedPrompt, prefix: Option<&PrefixParams>) -> Result<Vec<f64>, BackboneError> {
        let mut tape = Tape::frozen(&self.net.params);
        let hidden = match prefix {
            None => self.net.forward_plain(&mut tape, &rendered.token_ids)?,
            Some(p) => {
                p.validate(self.num_layers(), self.hidden_size())?;
                let (slots, _) = p.on_tape(&mut tape, self.num_layers(), false);
                self.net.forward_with_prefix(&mut tape, &rendered.token_ids, &slots)?
            }
        };
        let row = tape.rows(hidden, rendered.mask_position, 1);
        let logits = self.net.vocab_logits(&mut tape, row)?;
        Ok(tape.value(logits).iter().copied().collect())
    }

    pub fn pooled_representation(&self, ids: &[u32]) -> Result<Vec<f64>, BackboneError> {
        let mut tape = Tape::frozen(&self.net.params);
        let h = self.net.forward_plain(&mut tape, ids)?;
        let pooled = self.net.pooled(&mut tape, h);
        Ok(tape.value(pooled).iter().copied().collect())
    }
}

/// A decoder-only language model used for zero-shot scoring.
#[derive(Clone)]
pub struct CausalBackbone {
    spec: String,
    net: Arc<Transformer>,
    tokenizer: Arc<dyn Tokenizer>,
    fingerprint: String,
}

impl std::fmt::Debug for CausalBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CausalBackbone").field("spec", &self.spec).finish()
    }
}

impl CausalBackbone {
    pub fn new(spec: &str, net: Transformer, tokenizer: Arc<dyn Tokenizer>) -> Result<Self, BackboneError> {
        if !net.config.causal {
            return Err(BackboneError::Capability(format!("`{spec}` is not a causal model")));
        }
        if !net.has_mlm_head() {
            return Err(BackboneError::Capability("causal model lacks an output head".into()));
        }
        let fingerprint = fingerprint_of(&net, tokenizer.as_ref());
        Ok(Self {
            spec: spec.to_string(),
            net: Arc::new(net),
            tokenizer,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn max_len(&self) -> usize {
        self.net.config.max_position
    }

    /// Distribution logits for the token following `ids`.
    pub fn next_token_logits(&self, ids: &[u32]) -> Result<Vec<f64>, BackboneError> {
        if ids.is_empty() {
            return Err(BackboneError::Config("next-token scoring needs a non-empty prefix".into()));
        }
        let mut tape = Tape::frozen(&self.net.params);
        let h = self.net.forward_plain(&mut tape, ids)?;
        let last = tape.rows(h, ids.len() - 1, 1);
        let logits = self.net.vocab_logits(&mut tape, last)?;
        Ok(tape.value(logits).iter().copied().collect())
    }
}

#[derive(Debug, Clone)]
pub enum AnyBackbone {
    Encoder(EncoderBackbone),
    Causal(CausalBackbone),
}

impl AnyBackbone {
    pub fn spec(&self) -> &str {
        match self {
            AnyBackbone::Encoder(b) => b.spec(),
            AnyBackbone::Causal(b) => b.spec(),
        }
    }

    pub fn fingerprint(&self) -> &str {
        match self {
            AnyBackbone::Encoder(b) => b.fingerprint(),
            AnyBackbone::Causal(b) => b.fingerprint(),
        }
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        match self {
            AnyBackbone::Encoder(b) => b.tokenizer(),
            AnyBackbone::Causal(b) => b.tokenizer(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            AnyBackbone::Encoder(b) => b.max_len(),
            AnyBackbone::Causal(b) => b.max_len(),
        }
    }

    pub fn encoder(&self) -> Result<&EncoderBackbone, BackboneError> {
        match self {
            AnyBackbone::Encoder(b) => Ok(b),
            AnyBackbone::Causal(b) => Err(BackboneError::Capability(format!(
                "`{}` is a causal model; this operation needs an encoder",
                b.spec()
            ))),
        }
    }
}

pub fn tiny_backbone(seed: u64) -> EncoderBackbone {
    let net = Transformer::random(tiny_config(false), seed, TINY_INIT_STD).expect("static config");
    EncoderBackbone::new(&format!("tiny:{seed}"), net, Arc::new(tiny_tokenizer())).expect("consistent")
}

pub fn tiny_causal_backbone(seed: u64) -> CausalBackbone {
    let net = Transformer::random(tiny_config(true), seed, TINY_INIT_STD).expect("static config");
    CausalBackbone::new(&format!("tiny-causal:{seed}"), net, Arc::new(tiny_tokenizer())).expect("consistent")
}

fn parse_tiny(spec: &str, name: &str) -> Option<Result<u64, BackboneError>> {
    if spec == name {
        return Some(Ok(TINY_DEFAULT_SEED));
    }
    let seed = spec.strip_prefix(name)?.strip_prefix(':')?;
    Some(seed.parse().map_err(|_| BackboneError::Load {
        spec: spec.to_string(),
        message: format!("seed `{seed}` is not an unsigned integer"),
    }))
}

fn resolve_path(spec: &str) -> Option<PathBuf> {
    let direct = Path::new(spec);
    if direct.exists() {
        return Some(direct.to_path_buf());
    }
    if direct.is_relative() {
        if let Ok(cache) = std::env::var(CACHE_DIR_ENV) {
            let p = Path::new(&cache).join(spec);
            if p.exists() {
                return Some(p);
            }
        }
    }
    None
}

/// Resolves `tiny[:SEED]`, `tiny-causal[:SEED]`, or a checkpoint directory
/// (absolute, relative to the working directory, or relative to
/// `$RECID_CACHE_DIR`).
pub fn load_backbone(spec: &str) -> Result<AnyBackbone, BackboneError> {
    if let Some(seed) = parse_tiny(spec, "tiny") {
        return Ok(AnyBackbone::Encoder(tiny_backbone(seed?)));
    }
    if let Some(seed) = parse_tiny(spec, "tiny-causal") {
        return Ok(AnyBackbone::Causal(tiny_causal_backbone(seed?)));
    }
    let path = resolve_path(spec).ok_or_else(|| BackboneError::Load {
        spec: spec.to_string(),
        message: "no such built-in model or checkpoint directory".into(),
    })?;
    let (net, tok) = load_bert_dir(&path)?;
    Ok(AnyBackbone::Encoder(EncoderBackbone::new(spec, net, Arc::new(tok))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_deterministic_and_sized() {
        let a = tiny_backbone(7);
        let b = tiny_backbone(7);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), tiny_backbone(8).fingerprint());
        assert_eq!((a.num_layers(), a.hidden_size(), a.vocab_size()), (2, 32, 64));
        assert_eq!(a.net().params.to_bytes(), b.net().params.to_bytes());
    }

    #[test]
    fn spec_resolution() {
        assert!(matches!(load_backbone("tiny").unwrap(), AnyBackbone::Encoder(_)));
        assert!(matches!(load_backbone("tiny-causal:3").unwrap(), AnyBackbone::Causal(_)));
        assert!(matches!(load_backbone("tiny:x"), Err(BackboneError::Load { .. })));
        assert!(matches!(load_backbone("/no/such/model"), Err(BackboneError::Load { .. })));
        assert!(load_backbone("tiny-causal").unwrap().encoder().is_err());
    }

    #[test]
    fn forward_is_pure() {
        let b = tiny_backbone(7);
        let before = b.net().params.to_bytes();
        let x = b.forward_plain(&[2, 25, 12, 3]).unwrap();
        let y = b.forward_plain(&[2, 25, 12, 3]).unwrap();
        assert_eq!(x, y);
        assert_eq!(before, b.net().params.to_bytes());
    }

    #[test]
    fn causal_next_token() {
        let c = tiny_causal_backbone(1);
        let l = c.next_token_logits(&[2, 25]).unwrap();
        assert_eq!(l.len(), 64);
        assert_eq!(l, c.next_token_logits(&[2, 25]).unwrap());
    }
}
