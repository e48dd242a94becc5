use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::handle::{ModelHandle, ModelKind};
use super::loss::ClassProbs;
use super::{MethodError, Result};
use crate::corpus::RecExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub conversation_id: String,
    pub target_index: usize,
    pub label: u8,
    pub p1: f64,
    /// Gold label when the example carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<u8>,
}

impl Prediction {
    pub fn probs(&self) -> ClassProbs {
        ClassProbs {
            p0: 1.0 - self.p1,
            p1: self.p1,
        }
    }
}

/// An example that could not be scored. The rest of the batch is unaffected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictFailure {
    pub index: usize,
    pub conversation_id: String,
    pub target_index: usize,
    pub message: String,
}

impl std::fmt::Display for PredictFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "example {} ({}#{}): {}",
            self.index, self.conversation_id, self.target_index, self.message
        )
    }
}

/// Scores every example with `handle`, in parallel, preserving input order.
pub fn predict(handle: &ModelHandle, examples: &[RecExample]) -> Vec<std::result::Result<Prediction, PredictFailure>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(index, ex)| match handle.score(ex) {
            Ok(p) => Ok(Prediction {
                conversation_id: ex.conversation_id.clone(),
                target_index: ex.target_index,
                label: p.label(),
                p1: p.p1,
                gold: Some(ex.label),
            }),
            Err(e) => Err(PredictFailure {
                index,
                conversation_id: ex.conversation_id.clone(),
                target_index: ex.target_index,
                message: e.to_string(),
            }),
        })
        .collect()
}

/// Cloze scoring with no parameter updates.
pub fn zero_shot_predict(
    handle: &ModelHandle,
    examples: &[RecExample],
) -> Result<Vec<std::result::Result<Prediction, PredictFailure>>> {
    if handle.kind != ModelKind::ZeroShot {
        return Err(MethodError::Handle(format!("expected a ZERO_SHOT handle, got {}", handle.kind)));
    }
    Ok(predict(handle, examples))
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let io = |source| MethodError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in predictions {
        let line = serde_json::to_string(p).expect("serializable");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let io = |source| MethodError::Io {
        path: path.display().to_string(),
        source,
    };
    let r = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line)
            .map_err(|e| MethodError::Contract(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{tiny_backbone, AnyBackbone};
    use crate::corpus::{HistoryTurn, Language, Speaker};
    use crate::evaluation::sentinel_fixture;
    use crate::templates::{TemplateRegistry, Verbalizer};

    fn zero_shot() -> ModelHandle {
        let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
        ModelHandle::zero_shot(AnyBackbone::Encoder(tiny_backbone(7)), t, Verbalizer::default(), 16).unwrap()
    }

    #[test]
    fn predictions_round_trip_and_keep_order() {
        let (train, _) = sentinel_fixture(6, 2, 0);
        let preds: Vec<Prediction> = zero_shot_predict(&zero_shot(), &train.examples)
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        let ids: Vec<&str> = preds.iter().map(|p| p.conversation_id.as_str()).collect();
        let want: Vec<&str> = train.examples.iter().map(|e| e.conversation_id.as_str()).collect();
        assert_eq!(ids, want);
        assert!(preds.iter().all(|p| p.label == p.probs().label()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    #[test]
    fn failures_are_per_example() {
        let (mut train, _) = sentinel_fixture(3, 1, 0);
        // A Chinese example cannot render through an English template.
        train.examples[1].language = Language::Zh;
        train.examples[1].history = vec![HistoryTurn { speaker: Speaker::User, text: "你好".into() }];
        let out = predict(&zero_shot(), &train.examples);
        assert!(out[0].is_ok() && out[2].is_ok());
        let f = out[1].as_ref().unwrap_err();
        assert_eq!(f.index, 1);
        let mut h = zero_shot();
        h.kind = ModelKind::HardPrompt;
        assert!(zero_shot_predict(&h, &train.examples).is_err());
    }

    #[test]
    fn causal_zero_shot_scores_next_token() {
        use crate::backbone::tiny_causal_backbone;
        let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
        let h = ModelHandle::zero_shot(AnyBackbone::Causal(tiny_causal_backbone(3)), t, Verbalizer::default(), 32).unwrap();
        let (train, _) = sentinel_fixture(4, 1, 0);
        let a = zero_shot_predict(&h, &train.examples).unwrap();
        let b = zero_shot_predict(&h, &train.examples).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let x = x.as_ref().unwrap();
            assert_eq!(x, y.as_ref().unwrap());
            assert!(x.p1 > 0.0 && x.p1 < 1.0);
        }
        for e in &train.examples {
            // The prompt stops at the answer slot.
            let r = h.render(e).unwrap();
            assert_eq!(r.mask_position + 1, r.token_ids.len());
        }
    }
}
