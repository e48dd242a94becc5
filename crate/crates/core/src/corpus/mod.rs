//! Conversation data model, corpus adapters and the label-derivation /
//! filtering steps that turn conversations into per-turn examples.

mod format;
mod pipeline;
mod preprocess;
mod rules;
mod split;
mod stats;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    load_corpus, load_corpus_with, parse_canonical, parse_durecdial, parse_jddcrec, read_examples,
    write_canonical, write_examples, CorpusFormat, DurecdialOptions, LoadOptions,
};
pub use pipeline::{parse_chain, run_pipeline, CorpusInput, PipelineConfig, PipelineOutput, PreprocessStep};
pub use preprocess::{
    collapse_consecutive_negatives, derive_label_from_topic, derive_label_with_keyword,
    make_examples, make_examples_with, retain_first_positive_per_topic, LabelSource,
    DEFAULT_ZH_KEYWORD,
};
pub use rules::{rule_based_filter, FilterReport, FilterRule, MatchScope, RuleKind, RuleSet};
pub use split::{split_by_conversation, SplitRatios};
pub use stats::{compute_stats, CorpusStats};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: field `{field}`: {message}")]
    Parse {
        record: usize,
        field: String,
        message: String,
    },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("conversation `{conversation}` turn {turn}: {message}")]
    Labeling {
        conversation: String,
        turn: usize,
        message: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::User => "USER",
            Speaker::System => "SYSTEM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "en" | "english" => Some(Language::En),
            "zh" | "chinese" | "cn" => Some(Language::Zh),
            _ => None,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::En => "EN",
            Language::Zh => "ZH",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_label: Option<u8>,
}

/// One dialogue. `profile` and `context` are carried through preprocessing
/// untouched; no method consumes them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub language: Language,
    pub domain_tag: String,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<BTreeMap<String, String>>,
}

impl Conversation {
    /// Checks the structural invariants every loader guarantees.
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(CorpusError::Labeling {
                conversation: self.id.clone(),
                turn: 0,
                message: "conversation has no utterances".into(),
            });
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.turn_index != i {
                return Err(CorpusError::Labeling {
                    conversation: self.id.clone(),
                    turn: i,
                    message: format!("turn_index {} is not consecutive", u.turn_index),
                });
            }
            if u.text.trim().is_empty() {
                return Err(CorpusError::Labeling {
                    conversation: self.id.clone(),
                    turn: i,
                    message: "empty utterance text".into(),
                });
            }
            if let Some(l) = u.raw_label {
                if l > 1 {
                    return Err(CorpusError::Labeling {
                        conversation: self.id.clone(),
                        turn: i,
                        message: format!("raw_label {l} outside {{0,1}}"),
                    });
                }
            }
        }
        if !self.utterances.iter().any(|u| u.speaker == Speaker::System) {
            return Err(CorpusError::Labeling {
                conversation: self.id.clone(),
                turn: 0,
                message: "conversation has no SYSTEM utterance".into(),
            });
        }
        Ok(())
    }

    pub fn system_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::System)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// The unit of training and evaluation: the dialogue prefix before a system
/// turn and whether recommending at that turn is appropriate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecExample {
    pub conversation_id: String,
    pub target_index: usize,
    pub history: Vec<HistoryTurn>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    pub language: Language,
}

impl RecExample {
    pub fn key(&self) -> (&str, usize) {
        (&self.conversation_id, self.target_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<RecExample>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, examples: Vec<RecExample>) -> Self {
        Self { name, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }

    /// No duplicate `(conversation_id, target_index)` pairs and every label in {0,1}.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for ex in &self.examples {
            if ex.label > 1 {
                return Err(CorpusError::Split(format!(
                    "{}: label {} outside {{0,1}} for {}#{}",
                    self.name, ex.label, ex.conversation_id, ex.target_index
                )));
            }
            if ex.history.len() != ex.target_index {
                return Err(CorpusError::Split(format!(
                    "{}: history length {} != target_index {} for {}",
                    self.name,
                    ex.history.len(),
                    ex.target_index,
                    ex.conversation_id
                )));
            }
            if !seen.insert(ex.key()) {
                return Err(CorpusError::Split(format!(
                    "{}: duplicate example {}#{}",
                    self.name, ex.conversation_id, ex.target_index
                )));
            }
        }
        Ok(())
    }
}

/// Splits must not share conversation ids.
pub fn check_disjoint(splits: &[DatasetSplit]) -> Result<()> {
    let mut owner: std::collections::HashMap<&str, SplitName> = Default::default();
    for split in splits {
        for ex in &split.examples {
            match owner.get(ex.conversation_id.as_str()) {
                Some(&other) if other != split.name => {
                    return Err(CorpusError::Split(format!(
                        "conversation `{}` appears in both {} and {}",
                        ex.conversation_id, other, split.name
                    )))
                }
                _ => {
                    owner.insert(&ex.conversation_id, split.name);
                }
            }
        }
    }
    Ok(())
}
