use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CorpusError, DatasetSplit, Result, SplitName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dataset: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub positives: usize,
    /// Positives over all examples in all splits.
    pub positive_ratio: f64,
    pub conversations: usize,
}

impl CorpusStats {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>8} {:>8} {:>15}",
            "Dataset", "Train", "Dev", "Test", "Positive ratio"
        )?;
        writeln!(
            f,
            "{:<16} {:>8} {:>8} {:>8} {:>14.1}%",
            self.dataset,
            self.train,
            self.dev,
            self.test,
            100.0 * self.positive_ratio
        )
    }
}

pub fn compute_stats(dataset: &str, splits: &[DatasetSplit]) -> Result<CorpusStats> {
    let count = |name: SplitName| -> usize {
        splits
            .iter()
            .filter(|s| s.name == name)
            .map(DatasetSplit::len)
            .sum()
    };
    let total: usize = splits.iter().map(DatasetSplit::len).sum();
    if total == 0 {
        return Err(CorpusError::EmptyCorpus(
            "no examples; positive ratio undefined".into(),
        ));
    }
    let positives: usize = splits.iter().map(DatasetSplit::positives).sum();
    let conversations: std::collections::HashSet<&str> = splits
        .iter()
        .flat_map(|s| s.examples.iter().map(|e| e.conversation_id.as_str()))
        .collect();
    Ok(CorpusStats {
        dataset: dataset.to_string(),
        train: count(SplitName::Train),
        dev: count(SplitName::Dev),
        test: count(SplitName::Test),
        positives,
        positive_ratio: positives as f64 / total as f64,
        conversations: conversations.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, RecExample};

    fn split(name: SplitName, n: usize, pos: usize, prefix: &str) -> DatasetSplit {
        DatasetSplit::new(
            name,
            (0..n)
                .map(|i| RecExample {
                    conversation_id: format!("{prefix}{i}"),
                    target_index: 0,
                    history: vec![],
                    label: (i < pos) as u8,
                    topic: None,
                    language: Language::Zh,
                })
                .collect(),
        )
    }

    #[test]
    fn ten_with_three_positives() {
        let s = compute_stats("x", &[split(SplitName::Train, 10, 3, "a")]).unwrap();
        assert!((s.positive_ratio - 0.3).abs() < 1e-15);
        assert_eq!(s.train, 10);
    }

    #[test]
    fn jddcrec_shaped_counts() {
        let splits = [
            split(SplitName::Train, 1300, 390, "tr"),
            split(SplitName::Dev, 136, 40, "dv"),
            split(SplitName::Test, 159, 41, "te"),
        ];
        let s = compute_stats("JDDCRec", &splits).unwrap();
        assert_eq!((s.train, s.dev, s.test), (1300, 136, 159));
        assert_eq!(s.positives, 471);
        assert!(s.to_string().contains("JDDCRec"));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(
            compute_stats("x", &[split(SplitName::Train, 0, 0, "a")]),
            Err(CorpusError::EmptyCorpus(_))
        ));
    }
}
