use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::DatasetSplit;

/// Epoch budget is scaled so that `n × multiplier ≈ 3000` example visits per
/// base epoch: 30 shots train 100× as long, 300 shots 10×.
pub const FEW_SHOT_REFERENCE_SIZE: usize = 3000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub n: usize,
    #[serde(default)]
    pub balanced: bool,
    #[serde(default)]
    pub seed: u64,
    /// Overrides [`FewShotSpec::default_multiplier`].
    #[serde(default)]
    pub epoch_multiplier: Option<usize>,
}

impl FewShotSpec {
    pub fn default_multiplier(n: usize) -> usize {
        (FEW_SHOT_REFERENCE_SIZE / n.max(1)).max(1)
    }

    pub fn multiplier(&self) -> usize {
        self.epoch_multiplier.unwrap_or_else(|| Self::default_multiplier(self.n))
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n == 0 {
            return Err(EvalError::Sampling("n must be positive".into()));
        }
        if self.balanced && !self.n.is_multiple_of(2) {
            return Err(EvalError::Sampling(format!("balanced sampling needs an even n, got {}", self.n)));
        }
        if self.epoch_multiplier == Some(0) {
            return Err(EvalError::Sampling("epoch_multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded sampling without replacement. Selected examples keep their pool
/// order.
pub fn sample_few_shot(pool: &DatasetSplit, spec: &FewShotSpec) -> Result<DatasetSplit, EvalError> {
    spec.validate()?;
    if spec.n > pool.len() {
        return Err(EvalError::Sampling(format!("n = {} exceeds pool of {}", spec.n, pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked: Vec<usize> = if spec.balanced {
        let half = spec.n / 2;
        let mut out = Vec::with_capacity(spec.n);
        for class in [1u8, 0u8] {
            let members: Vec<usize> = (0..pool.len()).filter(|i| pool.examples[*i].label == class).collect();
            if members.len() < half {
                return Err(EvalError::Sampling(format!(
                    "balanced n = {} needs {half} examples of class {class}, pool has {}",
                    spec.n,
                    members.len()
                )));
            }
            out.extend(index::sample(&mut rng, members.len(), half).into_iter().map(|j| members[j]));
        }
        out
    } else {
        index::sample(&mut rng, pool.len(), spec.n).into_vec()
    };
    picked.sort_unstable();
    Ok(DatasetSplit::new(
        pool.name,
        picked.into_iter().map(|i| pool.examples[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, RecExample, SplitName};

    pub(crate) fn pool(pos: usize, neg: usize) -> DatasetSplit {
        let examples = (0..pos + neg)
            .map(|i| RecExample {
                conversation_id: format!("c{i}"),
                target_index: 0,
                history: vec![],
                label: u8::from(i < pos),
                topic: None,
                language: Language::En,
            })
            .collect();
        DatasetSplit::new(SplitName::Train, examples)
    }

    #[test]
    fn balanced_counts_and_errors() {
        let spec = |n, balanced| FewShotSpec { n, balanced, seed: 3, epoch_multiplier: None };
        let s = sample_few_shot(&pool(20, 80), &spec(30, true)).unwrap();
        assert_eq!((s.positives(), s.len()), (15, 30));
        let s = sample_few_shot(&pool(2, 2), &spec(4, true)).unwrap();
        assert_eq!(s.positives(), 2);
        assert!(sample_few_shot(&pool(20, 80), &spec(3, true)).is_err());
        assert!(sample_few_shot(&pool(1, 80), &spec(4, true)).is_err());
        assert!(sample_few_shot(&pool(1, 2), &spec(4, false)).is_err());
    }

    #[test]
    fn deterministic_and_multiplier() {
        let spec = FewShotSpec { n: 30, balanced: false, seed: 11, epoch_multiplier: None };
        let a = sample_few_shot(&pool(15, 85), &spec).unwrap();
        let b = sample_few_shot(&pool(15, 85), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(spec.multiplier(), 100);
        assert_eq!(FewShotSpec::default_multiplier(300), 10);
        assert_eq!(FewShotSpec::default_multiplier(33079), 1);
    }
}
