//! Patch-wise cross-entropy: each patch prediction is scored against all `K`
//! ground-truth tokens of the patch it predicts, normalised by token count.

use crate::error::{NppError, Result};
use crate::tensor::{Float, Var};

/// `-(1/N) Σ_i Σ_k log softmax(logits_i)[label_{i,k}]`.
///
/// `target_groups` holds one group of `K` labels per logits row.
pub fn patch_ce_loss<'g, T: Float>(
    logits: Var<'g, T>,
    target_groups: &[Vec<usize>],
    token_count: usize,
) -> Result<Var<'g, T>> {
    let k = target_groups.first().map_or(0, Vec::len);
    if let Some(bad) = target_groups.iter().find(|g| g.len() != k) {
        return Err(NppError::Contract(format!(
            "patch group of size {} among groups of size {k}",
            bad.len()
        )));
    }
    let flat: Vec<usize> = target_groups.iter().flatten().copied().collect();
    patch_ce_loss_flat(logits, &flat, k, token_count)
}

/// [`patch_ce_loss`] over labels already flattened group by group.
pub fn patch_ce_loss_flat<'g, T: Float>(
    logits: Var<'g, T>,
    labels: &[usize],
    group_size: usize,
    token_count: usize,
) -> Result<Var<'g, T>> {
    let rows = logits.shape().first().copied().unwrap_or(0);
    if group_size == 0 || labels.len() != rows * group_size {
        return Err(NppError::Contract(format!(
            "{} labels for {rows} rows with group size {group_size}",
            labels.len()
        )));
    }
    logits.patch_cross_entropy(labels, group_size, token_count)
}

/// Plain next-token cross-entropy, the `K = 1` case.
pub fn ntp_loss<'g, T: Float>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    patch_ce_loss_flat(logits, labels, 1, labels.len())
}
