use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Conversation, CorpusError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 8:1:1 by conversation.
    fn default() -> Self {
        Self {
            train: 8.0,
            dev: 1.0,
            test: 1.0,
        }
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = CorpusError;

    /// Parses `"8:1:1"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CorpusError::Config(format!("split ratios `{s}`: {e}")))?;
        match parts.as_slice() {
            [train, dev, test] if parts.iter().all(|x| *x >= 0.0) && train + dev + test > 0.0 => {
                Ok(Self {
                    train: *train,
                    dev: *dev,
                    test: *test,
                })
            }
            _ => Err(CorpusError::Config(format!(
                "split ratios `{s}`: expected three non-negative numbers like 8:1:1"
            ))),
        }
    }
}

/// Shuffles conversations with a seeded RNG and partitions them by the
/// given ratios. Dev and test sizes are rounded; train takes the remainder.
pub fn split_by_conversation(
    mut convs: Vec<Conversation>,
    ratios: SplitRatios,
    seed: u64,
) -> [Vec<Conversation>; 3] {
    let total = ratios.train + ratios.dev + ratios.test;
    let n = convs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    convs.shuffle(&mut rng);
    let n_dev = ((n as f64) * ratios.dev / total).round() as usize;
    let n_test = (((n as f64) * ratios.test / total).round() as usize).min(n - n_dev.min(n));
    let n_dev = n_dev.min(n);
    let n_train = n - n_dev - n_test;
    let test = convs.split_off(n_train + n_dev);
    let dev = convs.split_off(n_train);
    [convs, dev, test]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Speaker, Utterance};

    fn convs(n: usize) -> Vec<Conversation> {
        (0..n)
            .map(|i| Conversation {
                id: format!("c{i}"),
                language: Language::Zh,
                domain_tag: String::new(),
                utterances: vec![Utterance {
                    speaker: Speaker::System,
                    text: "x".into(),
                    turn_index: 0,
                    topic: None,
                    raw_label: Some(0),
                }],
                profile: None,
                context: None,
            })
            .collect()
    }

    #[test]
    fn eight_one_one() {
        let [tr, dv, te] = split_by_conversation(convs(1000), SplitRatios::default(), 3);
        assert_eq!((tr.len(), dv.len(), te.len()), (800, 100, 100));
        let [tr2, _, _] = split_by_conversation(convs(1000), SplitRatios::default(), 3);
        assert_eq!(tr, tr2);
    }

    #[test]
    fn parse_ratios() {
        let r: SplitRatios = "8:1:1".parse().unwrap();
        assert_eq!(r, SplitRatios::default());
        assert!("8:1".parse::<SplitRatios>().is_err());
    }
}
