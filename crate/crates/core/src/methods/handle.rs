use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::forward::{head_logits, prompt_logits};
use super::loss::{class_probs_from_logits, class_probs_from_mask, ClassProbs};
use super::train::TrainConfig;
use super::{MethodError, Result};
use crate::archive::{Archive, ArchiveError};
use crate::backbone::{load_backbone, AnyBackbone, BackboneError, EncoderBackbone, Matrix, PrefixParams, Tape};
use crate::corpus::RecExample;
use crate::templates::{
    bind_verbalizer, render, render_causal, render_concat, HardTemplate, RenderedPrompt, Verbalizer, VerbalizerBinding,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    ZeroShot,
    HardPrompt,
    SoftPrefix,
    Baseline,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::ZeroShot => "ZERO_SHOT",
            ModelKind::HardPrompt => "HARD_PROMPT",
            ModelKind::SoftPrefix => "SOFT_PREFIX",
            ModelKind::Baseline => "BASELINE",
        }
    }

    pub fn uses_template(&self) -> bool {
        !matches!(self, ModelKind::Baseline)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = MethodError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" => Ok(ModelKind::ZeroShot),
            "hard_prompt" => Ok(ModelKind::HardPrompt),
            "soft_prefix" => Ok(ModelKind::SoftPrefix),
            "baseline" => Ok(ModelKind::Baseline),
            _ => Err(MethodError::Config(format!(
                "unknown method `{s}` (expected zero-shot, hard-prompt, soft-prefix or baseline)"
            ))),
        }
    }
}

/// `d × 2` weights and a `1 × 2` bias over the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearHead {
    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Matrix::zeros((d, 2)),
            bias: Matrix::zeros((1, 2)),
        }
    }
}

/// A backbone plus everything needed to score examples with one method.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub kind: ModelKind,
    /// For HARD_PROMPT and BASELINE these are the fine-tuned weights; the
    /// fingerprint still names the base checkpoint.
    pub backbone: AnyBackbone,
    pub template: Option<HardTemplate>,
    pub verbalizer: Option<Verbalizer>,
    pub binding: Option<VerbalizerBinding>,
    pub prefix: Option<PrefixParams>,
    pub head: Option<LinearHead>,
    pub train_config: Option<TrainConfig>,
    pub max_len: usize,
}

const FORMAT: &str = "recid-model-v1";

impl ModelHandle {
    pub fn zero_shot(backbone: AnyBackbone, template: HardTemplate, verbalizer: Verbalizer, max_len: usize) -> Result<Self> {
        let binding = bind_verbalizer(&verbalizer, backbone.tokenizer())?;
        let h = Self {
            kind: ModelKind::ZeroShot,
            max_len: max_len.min(backbone.max_len()),
            backbone,
            template: Some(template),
            verbalizer: Some(verbalizer),
            binding: Some(binding),
            prefix: None,
            head: None,
            train_config: None,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MethodError::Handle(format!("{} handle {m}", self.kind)));
        let prompt = self.template.is_some() && self.verbalizer.is_some() && self.binding.is_some();
        match self.kind {
            ModelKind::ZeroShot | ModelKind::HardPrompt if !prompt => bad("needs a template and a bound verbalizer"),
            ModelKind::SoftPrefix if !prompt || self.prefix.is_none() => bad("needs a template, verbalizer and prefix"),
            ModelKind::Baseline if self.head.is_none() => bad("needs a linear head"),
            k if k != ModelKind::SoftPrefix && self.prefix.is_some() => bad("must not carry a prefix"),
            k if k != ModelKind::Baseline && self.head.is_some() => bad("must not carry a linear head"),
            k if k != ModelKind::ZeroShot && matches!(self.backbone, AnyBackbone::Causal(_)) => {
                bad("needs an encoder backbone")
            }
            _ => Ok(()),
        }
    }

    fn encoder(&self) -> Result<&EncoderBackbone> {
        Ok(self.backbone.encoder()?)
    }

    fn template(&self) -> Result<&HardTemplate> {
        self.template
            .as_ref()
            .ok_or_else(|| MethodError::Handle("handle has no template".into()))
    }

    fn binding(&self) -> Result<&VerbalizerBinding> {
        self.binding
            .as_ref()
            .ok_or_else(|| MethodError::Handle("handle has no verbalizer binding".into()))
    }

    /// Token budget for rendered prompts, leaving room for any prefix.
    pub fn render_budget(&self) -> usize {
        let p = self.prefix.as_ref().map_or(0, |p| p.length);
        self.max_len.min(self.backbone.max_len().saturating_sub(p))
    }

    pub fn render(&self, example: &RecExample) -> Result<RenderedPrompt> {
        let tok = self.backbone.tokenizer();
        Ok(match &self.backbone {
            AnyBackbone::Causal(_) => render_causal(self.template()?, example, tok, self.render_budget())?,
            AnyBackbone::Encoder(_) => render(self.template()?, example, tok, self.render_budget())?,
        })
    }

    /// Class probabilities for one example.
    pub fn score(&self, example: &RecExample) -> Result<ClassProbs> {
        match self.kind {
            ModelKind::ZeroShot => {
                let rendered = self.render(example)?;
                let logits = match &self.backbone {
                    AnyBackbone::Encoder(b) => b.mask_logits(&rendered, None)?,
                    AnyBackbone::Causal(b) => {
                        if rendered.mask_position == 0 {
                            return Err(MethodError::Contract("causal prompt has no text before the answer slot".into()));
                        }
                        b.next_token_logits(&rendered.token_ids[..rendered.mask_position])?
                    }
                };
                class_probs_from_mask(&logits, self.binding()?)
            }
            ModelKind::HardPrompt | ModelKind::SoftPrefix => {
                let rendered = self.render(example)?;
                let b = self.encoder()?;
                let net = b.net();
                let mut tape = Tape::frozen(&net.params);
                let slots = match &self.prefix {
                    Some(p) => {
                        p.validate(net.num_layers(), net.hidden_size())?;
                        Some(p.on_tape(&mut tape, net.num_layers(), false).0)
                    }
                    None => None,
                };
                let logits = prompt_logits(
                    net,
                    &mut tape,
                    &rendered.token_ids,
                    rendered.mask_position,
                    slots.as_deref(),
                    self.binding()?,
                )?;
                let l = tape.value(logits);
                class_probs_from_logits(l[(0, 0)], l[(0, 1)])
            }
            ModelKind::Baseline => {
                let b = self.encoder()?;
                let head = self.head.as_ref().ok_or_else(|| MethodError::Handle("no linear head".into()))?;
                let (ids, _) = render_concat(example, b.tokenizer(), self.max_len.min(b.max_len()))?;
                let net = b.net();
                let mut tape = Tape::frozen(&net.params);
                let w = tape.constant(head.weight.clone());
                let bias = tape.constant(head.bias.clone());
                let logits = head_logits(net, &mut tape, &ids, w, bias)?;
                let l = tape.value(logits);
                class_probs_from_logits(l[(0, 0)], l[(0, 1)])
            }
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.metadata.insert("format".into(), FORMAT.into());
        a.metadata.insert("kind".into(), self.kind.as_str().into());
        a.metadata.insert("backbone_spec".into(), self.backbone.spec().into());
        a.metadata.insert("backbone_fingerprint".into(), self.backbone.fingerprint().into());
        a.metadata.insert("max_len".into(), self.max_len.to_string());
        if let Some(t) = &self.template {
            a.metadata.insert("template".into(), json(t));
        }
        if let Some(v) = &self.verbalizer {
            a.metadata.insert("verbalizer".into(), json(v));
        }
        if let Some(b) = &self.binding {
            a.metadata.insert("binding".into(), json(b));
        }
        if let Some(c) = &self.train_config {
            a.metadata.insert("train_config".into(), json(c));
        }
        if let Some(p) = &self.prefix {
            let pa = p.to_archive(self.backbone.fingerprint());
            a.metadata.insert("prefix_config".into(), pa.metadata["prefix_config"].clone());
            a.tensors.extend(pa.tensors);
        }
        if let Some(h) = &self.head {
            a.tensors.insert("head.weight".into(), h.weight.clone());
            a.tensors.insert("head.bias".into(), h.bias.clone());
        }
        if matches!(self.kind, ModelKind::HardPrompt | ModelKind::Baseline) {
            for (name, m) in self.encoder()?.net().params.iter() {
                a.tensors.insert(format!("backbone.{name}"), m.clone());
            }
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path).map_err(archive_err)
    }

    /// Rebuilds a handle. Without `backbone`, the recorded spec is loaded;
    /// either way the base fingerprint must match.
    pub fn from_archive(a: &Archive, backbone: Option<AnyBackbone>) -> Result<Self> {
        if a.meta("format").map_err(archive_err)? != FORMAT {
            return Err(MethodError::Handle("not a model archive".into()));
        }
        let kind: ModelKind = a.meta("kind").map_err(archive_err)?.parse()?;
        let backbone = match backbone {
            Some(b) => b,
            None => load_backbone(a.meta("backbone_spec").map_err(archive_err)?)?,
        };
        let expected = a.meta("backbone_fingerprint").map_err(archive_err)?;
        if backbone.fingerprint() != expected {
            return Err(BackboneError::Fingerprint {
                expected: expected.to_string(),
                found: backbone.fingerprint().to_string(),
            }
            .into());
        }
        fn opt<T: serde::de::DeserializeOwned>(a: &Archive, key: &str) -> Result<Option<T>> {
            a.metadata
                .get(key)
                .map(|s| serde_json::from_str(s).map_err(|e| MethodError::Handle(format!("metadata `{key}`: {e}"))))
                .transpose()
        }
        let max_len = a
            .meta("max_len")
            .map_err(archive_err)?
            .parse()
            .map_err(|_| MethodError::Handle("max_len is not an integer".into()))?;
        let prefix = if kind == ModelKind::SoftPrefix {
            Some(PrefixParams::from_archive(a, expected)?)
        } else {
            None
        };
        let head = if kind == ModelKind::Baseline {
            Some(LinearHead {
                weight: a.tensor("head.weight").map_err(archive_err)?.clone(),
                bias: a.tensor("head.bias").map_err(archive_err)?.clone(),
            })
        } else {
            None
        };
        let backbone = if matches!(kind, ModelKind::HardPrompt | ModelKind::Baseline) {
            let base = backbone.encoder()?;
            let mut net = base.net().clone();
            for (name, m) in net.params.iter_mut() {
                let stored = a.tensor(&format!("backbone.{name}")).map_err(archive_err)?;
                if stored.dim() != m.dim() {
                    return Err(MethodError::Handle(format!("tensor {name} has the wrong shape")));
                }
                m.assign(stored);
            }
            AnyBackbone::Encoder(base.with_weights(net)?)
        } else {
            backbone
        };
        let handle = Self {
            kind,
            backbone,
            template: opt(a, "template")?,
            verbalizer: opt(a, "verbalizer")?,
            binding: opt(a, "binding")?,
            prefix,
            head,
            train_config: opt(a, "train_config")?,
            max_len,
        };
        if let (Some(v), Some(b)) = (&handle.verbalizer, &handle.binding) {
            if bind_verbalizer(v, handle.backbone.tokenizer())? != *b {
                return Err(MethodError::Handle("stored verbalizer binding disagrees with the tokenizer".into()));
            }
        }
        if let Some(p) = &handle.prefix {
            let enc = handle.encoder()?;
            p.validate(enc.num_layers(), enc.hidden_size())?;
        }
        handle.validate()?;
        Ok(handle)
    }

    pub fn load(path: &Path, backbone: Option<AnyBackbone>) -> Result<Self> {
        let a = Archive::load(path).map_err(archive_err)?;
        Self::from_archive(&a, backbone)
    }
}

fn archive_err(e: ArchiveError) -> MethodError {
    match e {
        ArchiveError::Io { path, source } => MethodError::Io { path, source },
        other => MethodError::Handle(other.to_string()),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}
