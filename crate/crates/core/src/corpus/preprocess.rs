use super::{Conversation, CorpusError, HistoryTurn, Language, RecExample, Result, Speaker};

pub const DEFAULT_ZH_KEYWORD: &str = "推荐";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Label 1 iff the system turn's topic contains the recommendation keyword.
    Topic,
    /// Pre-annotated `raw_label` on each system turn.
    Raw,
}

/// 1 iff `topic` contains the language's recommendation keyword
/// ("recommendation", case-insensitive, for English; 推荐 for Chinese).
pub fn derive_label_from_topic(topic: &str, language: Language) -> u8 {
    derive_label_with_keyword(topic, language, DEFAULT_ZH_KEYWORD)
}

pub fn derive_label_with_keyword(topic: &str, language: Language, zh_keyword: &str) -> u8 {
    let hit = match language {
        Language::En => topic.to_lowercase().contains("recommendation"),
        Language::Zh => !zh_keyword.is_empty() && topic.contains(zh_keyword),
    };
    hit as u8
}

pub fn make_examples(conv: &Conversation, source: LabelSource) -> Result<Vec<RecExample>> {
    make_examples_with(conv, source, DEFAULT_ZH_KEYWORD)
}

/// One example per SYSTEM utterance; user turns are not prediction points.
pub fn make_examples_with(
    conv: &Conversation,
    source: LabelSource,
    zh_keyword: &str,
) -> Result<Vec<RecExample>> {
    let mut out = Vec::with_capacity(conv.system_turns());
    for (i, utt) in conv.utterances.iter().enumerate() {
        if utt.speaker != Speaker::System {
            continue;
        }
        let label = match source {
            LabelSource::Topic => {
                let topic = utt.topic.as_deref().ok_or_else(|| CorpusError::Labeling {
                    conversation: conv.id.clone(),
                    turn: i,
                    message: "system turn has no topic annotation".into(),
                })?;
                derive_label_with_keyword(topic, conv.language, zh_keyword)
            }
            LabelSource::Raw => utt.raw_label.ok_or_else(|| CorpusError::Labeling {
                conversation: conv.id.clone(),
                turn: i,
                message: "system turn has no raw_label".into(),
            })?,
        };
        let history = conv.utterances[..i]
            .iter()
            .map(|u| HistoryTurn {
                speaker: u.speaker,
                text: u.text.clone(),
            })
            .collect();
        out.push(RecExample {
            conversation_id: conv.id.clone(),
            target_index: i,
            history,
            label,
            topic: utt.topic.clone(),
            language: conv.language,
        });
    }
    Ok(out)
}

/// Replaces every maximal run of consecutive negatives by its last element.
/// Positives are never dropped and order is preserved.
pub fn collapse_consecutive_negatives(examples: &[RecExample]) -> Vec<RecExample> {
    let mut out = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let next_is_negative = examples
            .get(i + 1)
            .is_some_and(|n| n.label == 0 && n.conversation_id == ex.conversation_id);
        if ex.label == 1 || !next_is_negative {
            out.push(ex.clone());
        }
    }
    out
}

/// Within each maximal run of consecutive examples sharing an identical topic
/// string, keeps only the first positive. Negatives are all kept.
pub fn retain_first_positive_per_topic(examples: &[RecExample]) -> Result<Vec<RecExample>> {
    let mut out = Vec::with_capacity(examples.len());
    let mut run: Option<(&str, &str)> = None;
    let mut positive_seen = false;
    for ex in examples {
        let topic = ex.topic.as_deref().ok_or_else(|| {
            CorpusError::Config(format!(
                "example {}#{} has no topic; first-positive retention needs topics",
                ex.conversation_id, ex.target_index
            ))
        })?;
        let key = (ex.conversation_id.as_str(), topic);
        if run != Some(key) {
            run = Some(key);
            positive_seen = false;
        }
        if ex.label == 1 {
            if positive_seen {
                continue;
            }
            positive_seen = true;
        }
        out.push(ex.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn ex(idx: usize, label: u8, topic: Option<&str>) -> RecExample {
        RecExample {
            conversation_id: "c".into(),
            target_index: idx,
            history: vec![],
            label,
            topic: topic.map(String::from),
            language: Language::En,
        }
    }

    fn labels(xs: &[RecExample]) -> Vec<(usize, u8)> {
        xs.iter().map(|e| (e.target_index, e.label)).collect()
    }

    #[test]
    fn topic_labels() {
        assert_eq!(derive_label_from_topic("Movie recommendation", Language::En), 1);
        assert_eq!(derive_label_from_topic("MUSIC RECOMMENDATION", Language::En), 1);
        assert_eq!(derive_label_from_topic("Weather", Language::En), 0);
        assert_eq!(derive_label_from_topic("", Language::En), 0);
        assert_eq!(derive_label_from_topic("音乐推荐", Language::Zh), 1);
        assert_eq!(derive_label_from_topic("天气信息推送", Language::Zh), 0);
        assert_eq!(derive_label_with_keyword("美食安利", Language::Zh, "安利"), 1);
    }

    fn conv(speakers: &[Speaker], topics: &[&str]) -> Conversation {
        Conversation {
            id: "c".into(),
            language: Language::En,
            domain_tag: String::new(),
            utterances: speakers
                .iter()
                .zip(topics)
                .enumerate()
                .map(|(i, (s, t))| Utterance {
                    speaker: *s,
                    text: format!("turn {i}"),
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
    fn one_example_per_system_turn() {
        use Speaker::*;
        let c = conv(
            &[User, System, User, System],
            &["Greetings", "Greetings", "Chat", "Food recommendation"],
        );
        let xs = make_examples(&c, LabelSource::Topic).unwrap();
        assert_eq!(labels(&xs), vec![(1, 0), (3, 1)]);
        assert_eq!(xs[1].history.len(), 3);
        assert_eq!(xs[1].history[2].speaker, User);
    }

    #[test]
    fn raw_mode_requires_labels() {
        use Speaker::*;
        let c = conv(&[User, System], &["a", "b"]);
        let err = make_examples(&c, LabelSource::Raw).unwrap_err();
        assert!(matches!(err, CorpusError::Labeling { turn: 1, .. }));
    }

    #[test]
    fn collapse_negative_runs() {
        let xs: Vec<_> = [0, 0, 1, 0, 0]
            .iter()
            .enumerate()
            .map(|(i, &l)| ex(i, l, None))
            .collect();
        assert_eq!(labels(&collapse_consecutive_negatives(&xs)), vec![(1, 0), (2, 1), (4, 0)]);

        let ones: Vec<_> = (0..3).map(|i| ex(i, 1, None)).collect();
        assert_eq!(collapse_consecutive_negatives(&ones), ones);

        let zeros: Vec<_> = (0..3).map(|i| ex(i, 0, None)).collect();
        assert_eq!(labels(&collapse_consecutive_negatives(&zeros)), vec![(2, 0)]);
    }

    #[test]
    fn first_positive_per_topic_run() {
        let xs = vec![ex(0, 1, Some("A")), ex(1, 1, Some("A")), ex(2, 0, Some("A")), ex(3, 1, Some("B"))];
        assert_eq!(
            labels(&retain_first_positive_per_topic(&xs).unwrap()),
            vec![(0, 1), (2, 0), (3, 1)]
        );

        let restart = vec![ex(0, 1, Some("A")), ex(1, 1, Some("B")), ex(2, 1, Some("A"))];
        assert_eq!(retain_first_positive_per_topic(&restart).unwrap(), restart);

        let negs = vec![ex(0, 0, Some("A")), ex(1, 0, Some("A"))];
        assert_eq!(retain_first_positive_per_topic(&negs).unwrap(), negs);

        assert!(matches!(
            retain_first_positive_per_topic(&[ex(0, 1, None)]),
            Err(CorpusError::Config(_))
        ));
    }
}
