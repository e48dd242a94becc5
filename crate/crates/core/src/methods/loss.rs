use serde::{Deserialize, Serialize};

use super::MethodError;
use crate::templates::VerbalizerBinding;

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub p0: f64,
    pub p1: f64,
}

impl ClassProbs {
    /// Argmax with ties going to 0.
    pub fn label(&self) -> u8 {
        u8::from(self.p1 > self.p0)
    }

    pub fn of(&self, class: u8) -> f64 {
        if class == 1 {
            self.p1
        } else {
            self.p0
        }
    }
}

fn check_logit(x: f64) -> Result<(), MethodError> {
    if x.is_nan() || x == f64::INFINITY {
        return Err(MethodError::Numeric(format!("verbalizer logit is {x}")));
    }
    Ok(())
}

/// Two-way softmax over the class-0 and class-1 logits. `-inf` is allowed
/// on one side; NaN and `+inf` are rejected.
pub fn class_probs_from_logits(l0: f64, l1: f64) -> Result<ClassProbs, MethodError> {
    check_logit(l0)?;
    check_logit(l1)?;
    if l0 == f64::NEG_INFINITY && l1 == f64::NEG_INFINITY {
        return Err(MethodError::Numeric("both verbalizer logits are -inf".into()));
    }
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    Ok(ClassProbs { p0: e0 / z, p1: e1 / z })
}

pub fn class_probs_from_mask(vocab_logits: &[f64], binding: &VerbalizerBinding) -> Result<ClassProbs, MethodError> {
    let get = |id: u32| {
        vocab_logits.get(id as usize).copied().ok_or_else(|| {
            MethodError::Contract(format!(
                "verbalizer token {id} outside logits of length {}",
                vocab_logits.len()
            ))
        })
    };
    class_probs_from_logits(get(binding.token_ids[0])?, get(binding.token_ids[1])?)
}

/// Mean binary cross-entropy `−(1/N) Σ ln max(p_{y_i}, ε)`.
pub fn bce_loss(probs: &[ClassProbs], labels: &[u8]) -> Result<f64, MethodError> {
    if probs.len() != labels.len() {
        return Err(MethodError::Contract(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(MethodError::Contract("loss over zero examples".into()));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        if *y > 1 {
            return Err(MethodError::Contract(format!("label {y} is not 0 or 1")));
        }
        total -= p.of(*y).max(PROB_EPS).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Gradient of the single-example loss `−ln max(p_y, ε)` with respect to
/// the two logits: `p_c − [c = y]`, or zero where the clamp is active.
pub fn bce_grad_logits(l0: f64, l1: f64, label: u8) -> Result<[f64; 2], MethodError> {
    let p = class_probs_from_logits(l0, l1)?;
    if p.of(label) < PROB_EPS {
        return Ok([0.0, 0.0]);
    }
    let y1 = f64::from(label);
    Ok([p.p0 - (1.0 - y1), p.p1 - y1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_examples() {
        let p = class_probs_from_logits(1.0, 2.0).unwrap();
        assert!((p.p1 - 0.7310585786300049).abs() < 1e-15);
        let p = class_probs_from_logits(0.3, 0.3).unwrap();
        assert_eq!((p.p0, p.p1, p.label()), (0.5, 0.5, 0));
        let p = class_probs_from_logits(0.0, f64::NEG_INFINITY).unwrap();
        assert_eq!(p.p1, 0.0);
        assert!(class_probs_from_logits(f64::NAN, 0.0).is_err());
        assert!(class_probs_from_logits(f64::INFINITY, 0.0).is_err());
        let b = VerbalizerBinding { token_ids: [1, 0] };
        let p = class_probs_from_mask(&[2.0, 1.0], &b).unwrap();
        assert!(p.p1 > 0.73);
        assert!(class_probs_from_mask(&[2.0], &b).is_err());
    }

    #[test]
    fn loss_examples() {
        let half = ClassProbs { p0: 0.5, p1: 0.5 };
        assert!((bce_loss(&[half], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(bce_loss(&[ClassProbs { p0: 0.0, p1: 1.0 }], &[1]).unwrap(), 0.0);
        let rows = [ClassProbs { p0: 0.2, p1: 0.8 }, ClassProbs { p0: 0.6, p1: 0.4 }];
        let l = bce_loss(&rows, &[1, 0]).unwrap();
        assert!((l - 0.366_984_587_540_100_2).abs() < 1e-12, "{l}");
        assert!(bce_loss(&rows, &[1]).is_err());
        let clamped = bce_loss(&[ClassProbs { p0: 1.0, p1: 0.0 }], &[1]).unwrap();
        assert!((clamped - 27.631_021_115_928_547).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_matches_differences() {
        for (l0, l1, y) in [(0.3, -1.2, 1u8), (2.0, 1.0, 0), (-4.0, 5.5, 1), (0.0, 0.0, 0)] {
            let g = bce_grad_logits(l0, l1, y).unwrap();
            let f = |a: f64, b: f64| bce_loss(&[class_probs_from_logits(a, b).unwrap()], &[y]).unwrap();
            let h = 1e-5;
            let n0 = (f(l0 + h, l1) - f(l0 - h, l1)) / (2.0 * h);
            let n1 = (f(l0, l1 + h) - f(l0, l1 - h)) / (2.0 * h);
            assert!((g[0] - n0).abs() <= 1e-6 * (1.0 + n0.abs()));
            assert!((g[1] - n1).abs() <= 1e-6 * (1.0 + n1.abs()));
        }
    }
}
