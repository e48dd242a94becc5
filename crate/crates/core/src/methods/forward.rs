//! Forward graphs shared by training and inference, so both see identical
//! arithmetic.

use crate::backbone::{BackboneError, Tape, Transformer, Var};
use crate::templates::VerbalizerBinding;

/// `1 × 2` logits of the two verbalizer tokens at the mask position.
/// `prefix` holds one slot per layer when deep prompts are used.
pub(crate) fn prompt_logits(
    net: &Transformer,
    tape: &mut Tape,
    ids: &[u32],
    mask_position: usize,
    prefix: Option<&[Option<Var>]>,
    binding: &VerbalizerBinding,
) -> Result<Var, BackboneError> {
    let hidden = match prefix {
        None => net.forward_plain(tape, ids)?,
        Some(slots) => net.forward_with_prefix(tape, ids, slots)?,
    };
    let row = tape.rows(hidden, mask_position, 1);
    net.token_logits(tape, row, &binding.token_ids)
}

/// `1 × 2` logits of a linear head over the pooled representation.
pub(crate) fn head_logits(net: &Transformer, tape: &mut Tape, ids: &[u32], weight: Var, bias: Var) -> Result<Var, BackboneError> {
    let hidden = net.forward_plain(tape, ids)?;
    let pooled = net.pooled(tape, hidden);
    let y = tape.matmul(pooled, weight);
    Ok(tape.add(y, bias))
}
