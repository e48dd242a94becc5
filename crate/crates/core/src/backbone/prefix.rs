//! Continuous per-layer prompt vectors for deep prompt tuning.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::normal_matrix;
use super::tape::{Matrix, Tape, Var};
use super::{BackboneError, EncoderBackbone};
use crate::archive::Archive;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PrefixInit {
    Gaussian { sigma: f64 },
    /// Rows copied from randomly chosen word embeddings.
    VocabEmbedSample,
}

impl Default for PrefixInit {
    fn default() -> Self {
        PrefixInit::Gaussian { sigma: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    /// Number of prefix vectors per injected layer.
    pub length: usize,
    /// Layers receiving a prefix; `None` means every layer. Layer 0 is
    /// always added.
    #[serde(default)]
    pub inject_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub init: PrefixInit,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            length: 16,
            inject_layers: None,
            init: PrefixInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixParams {
    pub length: usize,
    /// Sorted, contains 0.
    pub inject_layers: Vec<usize>,
    /// One `length × d` matrix per entry of `inject_layers`.
    pub vectors: Vec<Matrix>,
    pub init: PrefixInit,
}

impl PrefixParams {
    pub fn new(cfg: &PrefixConfig, backbone: &EncoderBackbone, seed: u64) -> Result<Self, BackboneError> {
        let num_layers = backbone.num_layers();
        let d = backbone.hidden_size();
        let layers = resolve_layers(cfg.inject_layers.as_deref(), num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = layers
            .iter()
            .map(|_| match cfg.init {
                PrefixInit::Gaussian { sigma } => {
                    if sigma > 0.0 {
                        normal_matrix(&mut rng, cfg.length, d, sigma)
                    } else {
                        Matrix::zeros((cfg.length, d))
                    }
                }
                PrefixInit::VocabEmbedSample => {
                    let table = backbone.word_embeddings();
                    let mut m = Matrix::zeros((cfg.length, d));
                    for mut row in m.rows_mut() {
                        let pick = rng.random_range(0..table.nrows());
                        row.assign(&table.row(pick));
                    }
                    m
                }
            })
            .collect();
        Ok(Self {
            length: cfg.length,
            inject_layers: layers,
            vectors,
            init: cfg.init,
        })
    }

    pub fn config(&self) -> PrefixConfig {
        PrefixConfig {
            length: self.length,
            inject_layers: Some(self.inject_layers.clone()),
            init: self.init,
        }
    }

    pub fn validate(&self, num_layers: usize, d: usize) -> Result<(), BackboneError> {
        let layers = resolve_layers(Some(&self.inject_layers), num_layers)?;
        if layers != self.inject_layers {
            return Err(BackboneError::Config("inject_layers must be sorted and unique".into()));
        }
        if self.vectors.len() != self.inject_layers.len() {
            return Err(BackboneError::Config("one prefix matrix per injected layer".into()));
        }
        for m in &self.vectors {
            if m.dim() != (self.length, d) {
                return Err(BackboneError::Config(format!(
                    "prefix matrix has shape {:?}, expected ({}, {d})",
                    m.dim(),
                    self.length
                )));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.vectors.iter().map(Matrix::len).sum()
    }

    /// Places each matrix on the tape and returns one slot per backbone layer.
    pub fn on_tape(&self, tape: &mut Tape, num_layers: usize, requires_grad: bool) -> (Vec<Option<Var>>, Vec<Var>) {
        let mut slots = vec![None; num_layers];
        let mut vars = Vec::with_capacity(self.vectors.len());
        for (layer, m) in self.inject_layers.iter().zip(&self.vectors) {
            let v = tape.leaf(m.clone(), requires_grad);
            slots[*layer] = Some(v);
            vars.push(v);
        }
        (slots, vars)
    }

    pub fn to_archive(&self, fingerprint: &str) -> Archive {
        let mut a = Archive::default();
        a.metadata.insert("format".into(), "recid-prefix-v1".into());
        a.metadata.insert(
            "prefix_config".into(),
            serde_json::to_string(&self.config()).expect("config serializes"),
        );
        a.metadata.insert("backbone_fingerprint".into(), fingerprint.into());
        for (layer, m) in self.inject_layers.iter().zip(&self.vectors) {
            a.tensors.insert(format!("prefix.layer.{layer}"), m.clone());
        }
        a
    }

    /// Reads prefix tensors from an archive, refusing a fingerprint other
    /// than `expected_fingerprint`.
    pub fn from_archive(a: &Archive, expected_fingerprint: &str) -> Result<Self, BackboneError> {
        let fmt = |e: crate::archive::ArchiveError| BackboneError::Checkpoint(e.to_string());
        let found = a.meta("backbone_fingerprint").map_err(fmt)?;
        if found != expected_fingerprint {
            return Err(BackboneError::Fingerprint {
                expected: expected_fingerprint.to_string(),
                found: found.to_string(),
            });
        }
        let cfg: PrefixConfig = serde_json::from_str(a.meta("prefix_config").map_err(fmt)?)
            .map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        let layers = cfg
            .inject_layers
            .clone()
            .ok_or_else(|| BackboneError::Checkpoint("prefix archive lacks inject_layers".into()))?;
        let vectors = layers
            .iter()
            .map(|l| a.tensor(&format!("prefix.layer.{l}")).cloned().map_err(fmt))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            length: cfg.length,
            inject_layers: layers,
            vectors,
            init: cfg.init,
        })
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<(), BackboneError> {
        self.to_archive(fingerprint)
            .save(path)
            .map_err(|e| BackboneError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path, backbone: &EncoderBackbone) -> Result<Self, BackboneError> {
        let a = Archive::load(path).map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        let p = Self::from_archive(&a, backbone.fingerprint())?;
        p.validate(backbone.num_layers(), backbone.hidden_size())?;
        Ok(p)
    }
}

fn resolve_layers(requested: Option<&[usize]>, num_layers: usize) -> Result<Vec<usize>, BackboneError> {
    let mut layers: Vec<usize> = match requested {
        None => (0..num_layers).collect(),
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|l| **l >= num_layers) {
                return Err(BackboneError::Config(format!(
                    "inject layer {bad} outside 0..{num_layers}"
                )));
            }
            ls.to_vec()
        }
    };
    layers.push(0);
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}
