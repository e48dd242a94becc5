use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    check_disjoint, collapse_consecutive_negatives, make_examples_with, retain_first_positive_per_topic,
    rule_based_filter, split_by_conversation, Conversation, CorpusError, DatasetSplit, FilterReport, LabelSource,
    Result, RuleSet, SplitName, SplitRatios, DEFAULT_ZH_KEYWORD,
};

/// One stage of the preprocessing chain. `rule-filter` acts on whole
/// conversations and must precede labeling; the two retention filters act on
/// labeled examples and must follow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessStep {
    RuleFilter,
    DeriveLabels,
    RawLabels,
    CollapseNegatives,
    FirstPositive,
}

impl PreprocessStep {
    pub const ALL: [PreprocessStep; 5] = [
        PreprocessStep::RuleFilter,
        PreprocessStep::DeriveLabels,
        PreprocessStep::RawLabels,
        PreprocessStep::CollapseNegatives,
        PreprocessStep::FirstPositive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PreprocessStep::RuleFilter => "rule-filter",
            PreprocessStep::DeriveLabels => "derive-labels",
            PreprocessStep::RawLabels => "raw-labels",
            PreprocessStep::CollapseNegatives => "collapse-negatives",
            PreprocessStep::FirstPositive => "first-positive",
        }
    }

    fn is_labeling(&self) -> bool {
        matches!(self, PreprocessStep::DeriveLabels | PreprocessStep::RawLabels)
    }
}

impl fmt::Display for PreprocessStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PreprocessStep {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|step| step.as_str() == s.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|s| s.as_str()).collect();
                CorpusError::Config(format!("unknown preprocessing step `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Parses a comma-separated chain; the empty string is the empty chain.
pub fn parse_chain(s: &str) -> Result<Vec<PreprocessStep>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(PreprocessStep::from_str)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub steps: Vec<PreprocessStep>,
    pub rules: RuleSet,
    pub zh_keyword: String,
    pub ratios: SplitRatios,
    pub split_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steps: vec![],
            rules: RuleSet::default_after_sales(),
            zh_keyword: DEFAULT_ZH_KEYWORD.into(),
            ratios: SplitRatios::default(),
            split_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let labeling: Vec<usize> = (0..self.steps.len()).filter(|i| self.steps[*i].is_labeling()).collect();
        if labeling.len() > 1 {
            return Err(CorpusError::Config("the chain may contain only one labeling step".into()));
        }
        let label_at = labeling.first().copied();
        let mut seen = std::collections::HashSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            if !seen.insert(*step) {
                return Err(CorpusError::Config(format!("step `{step}` appears twice")));
            }
            match step {
                PreprocessStep::RuleFilter if label_at.is_some_and(|l| i > l) => {
                    return Err(CorpusError::Config("rule-filter must come before labeling".into()))
                }
                PreprocessStep::CollapseNegatives | PreprocessStep::FirstPositive
                    if label_at.is_none_or(|l| i < l) =>
                {
                    return Err(CorpusError::Config(format!("`{step}` needs a labeling step before it")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn label_source(&self) -> Option<LabelSource> {
        self.steps.iter().find_map(|s| match s {
            PreprocessStep::DeriveLabels => Some(LabelSource::Topic),
            PreprocessStep::RawLabels => Some(LabelSource::Raw),
            _ => None,
        })
    }
}

/// Conversations either arrive pre-split (official train/dev/test files) or
/// as one pool to be split by ratio.
#[derive(Debug, Clone)]
pub enum CorpusInput {
    Pool(Vec<Conversation>),
    Presplit([Vec<Conversation>; 3]),
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Conversations per split after conversation-level steps.
    pub conversations: [Vec<Conversation>; 3],
    /// Present when the chain contains a labeling step.
    pub splits: Option<[DatasetSplit; 3]>,
    pub filter_report: Option<FilterReport>,
}

pub fn run_pipeline(input: CorpusInput, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let filter = |convs: Vec<Conversation>| -> Result<(Vec<Conversation>, Option<FilterReport>)> {
        if cfg.steps.contains(&PreprocessStep::RuleFilter) {
            let (kept, report) = rule_based_filter(convs, &cfg.rules)?;
            Ok((kept, Some(report)))
        } else {
            Ok((convs, None))
        }
    };
    let (conversations, filter_report) = match input {
        CorpusInput::Pool(convs) => {
            let (kept, report) = filter(convs)?;
            (split_by_conversation(kept, cfg.ratios, cfg.split_seed), report)
        }
        CorpusInput::Presplit(parts) => {
            let mut out: [Vec<Conversation>; 3] = Default::default();
            let mut merged: Option<FilterReport> = None;
            for (slot, part) in out.iter_mut().zip(parts) {
                let (kept, report) = filter(part)?;
                *slot = kept;
                if let Some(r) = report {
                    merged = Some(match merged {
                        None => r,
                        Some(m) => m.merge(&r),
                    });
                }
            }
            (out, merged)
        }
    };
    let splits = match cfg.label_source() {
        None => None,
        Some(source) => {
            let mut splits: Vec<DatasetSplit> = Vec::with_capacity(3);
            for (name, convs) in SplitName::ALL.into_iter().zip(&conversations) {
                let mut examples = Vec::new();
                for conv in convs {
                    let mut exs = make_examples_with(conv, source, &cfg.zh_keyword)?;
                    for step in &cfg.steps {
                        match step {
                            PreprocessStep::CollapseNegatives => exs = collapse_consecutive_negatives(&exs),
                            PreprocessStep::FirstPositive => exs = retain_first_positive_per_topic(&exs)?,
                            _ => {}
                        }
                    }
                    examples.extend(exs);
                }
                let split = DatasetSplit::new(name, examples);
                split.validate()?;
                splits.push(split);
            }
            check_disjoint(&splits)?;
            Some(splits.try_into().expect("three splits"))
        }
    };
    Ok(PipelineOutput {
        conversations,
        splits,
        filter_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Speaker, Utterance};

    fn conv(id: &str, topics: &[&str]) -> Conversation {
        Conversation {
            id: id.into(),
            language: Language::En,
            domain_tag: "t".into(),
            utterances: topics
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance {
                    speaker: if i % 2 == 0 { Speaker::User } else { Speaker::System },
                    text: format!("u{i}"),
                    turn_index: i,
                    topic: Some(t.to_string()),
                    raw_label: None,
                })
                .collect(),
            profile: None,
            context: None,
        }
    }

    #[test]
    fn chain_parsing_and_validation() {
        assert_eq!(
            parse_chain("derive-labels, first-positive").unwrap(),
            vec![PreprocessStep::DeriveLabels, PreprocessStep::FirstPositive]
        );
        assert!(parse_chain("").unwrap().is_empty());
        assert!(parse_chain("derive").is_err());
        let bad = |steps: Vec<PreprocessStep>| PipelineConfig { steps, ..Default::default() }.validate().is_err();
        use PreprocessStep::*;
        assert!(bad(vec![FirstPositive, DeriveLabels]));
        assert!(bad(vec![DeriveLabels, RuleFilter]));
        assert!(bad(vec![DeriveLabels, RawLabels]));
        assert!(bad(vec![DeriveLabels, CollapseNegatives, CollapseNegatives]));
        assert!(!bad(vec![RuleFilter, RawLabels, CollapseNegatives]));
    }

    #[test]
    fn presplit_topic_chain() {
        let rec = "Movie recommendation";
        let parts = [
            vec![conv("a", &["chat", rec, rec, rec, "chat", "chat"])],
            vec![conv("b", &["chat", "chat"])],
            vec![conv("c", &["chat", rec])],
        ];
        let cfg = PipelineConfig {
            steps: vec![PreprocessStep::DeriveLabels, PreprocessStep::FirstPositive],
            ..Default::default()
        };
        let out = run_pipeline(CorpusInput::Presplit(parts), &cfg).unwrap();
        let [train, dev, test] = out.splits.unwrap();
        // System turns 1, 3, 5 of `a`: rec, rec (dropped as a repeat), chat.
        assert_eq!(train.examples.iter().map(|e| (e.target_index, e.label)).collect::<Vec<_>>(), vec![(1, 1), (5, 0)]);
        assert_eq!((dev.len(), dev.positives()), (1, 0));
        assert_eq!((test.len(), test.positives()), (1, 1));
        assert!(out.filter_report.is_none());
    }

    #[test]
    fn empty_chain_is_identity_on_conversations() {
        let pool: Vec<Conversation> = (0..10).map(|i| conv(&format!("c{i}"), &["x", "y"])).collect();
        let cfg = PipelineConfig {
            ratios: SplitRatios { train: 1.0, dev: 0.0, test: 0.0 },
            ..Default::default()
        };
        let out = run_pipeline(CorpusInput::Pool(pool.clone()), &cfg).unwrap();
        assert!(out.splits.is_none());
        let mut got = out.conversations[0].clone();
        got.sort_by(|a, b| a.id.cmp(&b.id));
        let mut want = pool;
        want.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(got, want);
    }
}
