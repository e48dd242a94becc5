use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DatasetSplit, HistoryTurn, Language, RecExample, Speaker, SplitName};

/// The planted token; an example is positive iff its history contains it.
pub const SENTINEL_TOKEN: &str = "suggest";

const FILLER: &[&str] = &["hello", "hi", "i", "you", "like", "want", "to", "see"];

/// One user turn of two to four filler words. Positives have one word
/// replaced by the sentinel, so length carries no signal.
fn example(rng: &mut ChaCha8Rng, id: String, label: u8) -> RecExample {
    let n = rng.random_range(2..=4);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).expect("filler")).collect();
    if label == 1 {
        let at = rng.random_range(0..n);
        words[at] = SENTINEL_TOKEN;
    }
    RecExample {
        conversation_id: id,
        target_index: 1,
        history: vec![HistoryTurn {
            speaker: Speaker::User,
            text: words.join(" "),
        }],
        label,
        topic: None,
        language: Language::En,
    }
}

/// Balanced synthetic train/dev/test splits over the tiny vocabulary whose
/// label is the presence of [`SENTINEL_TOKEN`]. Each example is its own
/// conversation, so the splits are disjoint.
pub fn sentinel_splits(n_train: usize, n_dev: usize, n_test: usize, seed: u64) -> [DatasetSplit; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |name: SplitName, n: usize| -> DatasetSplit {
        let prefix = format!("sentinel-{}", name.as_str());
        let examples = (0..n)
            .map(|i| example(&mut rng, format!("{prefix}-{i:04}"), (i % 2) as u8))
            .collect();
        DatasetSplit::new(name, examples)
    };
    [make(SplitName::Train, n_train), make(SplitName::Dev, n_dev), make(SplitName::Test, n_test)]
}

/// Train and dev splits of [`sentinel_splits`].
pub fn sentinel_fixture(n_train: usize, n_dev: usize, seed: u64) -> (DatasetSplit, DatasetSplit) {
    let [train, dev, _] = sentinel_splits(n_train, n_dev, 0, seed);
    (train, dev)
}
