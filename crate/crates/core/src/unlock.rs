//! Unlock-rule feedback validation.
//!
//! A slate page lays its items out in rows (3 rows of 3 on the production
//! page). The next row only becomes purchasable once every item of the
//! current row has been sold, so the feasible feedback patterns over a page
//! are heavily constrained: for the 3x3 page exactly 22 of the 512 bit
//! patterns are reachable.

use thiserror::Error;

/// Items per page in the production slate layout.
pub const PAGE_SIZE: usize = 9;
/// Items per row in the production slate layout.
pub const ROW_LEN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("feedback must have exactly {expected} flags, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("feedback flag at position {position} is {value}, expected 0 or 1")]
    NonBinary { position: usize, value: u8 },
    #[error("purchase in row {row} before row {blocking_row} sold out: {pattern:?}")]
    Locked { row: usize, blocking_row: usize, pattern: Vec<u8> },
}

/// Validate a production 9-flag feedback pattern against the unlock rule.
pub fn validate_feedback(flags: &[u8]) -> Result<(), FeedbackError> {
    if flags.len() != PAGE_SIZE {
        return Err(FeedbackError::WrongLength { expected: PAGE_SIZE, got: flags.len() });
    }
    validate_pattern(flags, ROW_LEN)
}

/// Validate a feedback pattern for an arbitrary row length. `flags.len()`
/// must be a multiple of `row_len`.
pub fn validate_pattern(flags: &[u8], row_len: usize) -> Result<(), FeedbackError> {
    assert!(row_len > 0 && flags.len().is_multiple_of(row_len), "page size must be a multiple of row length");
    for (i, &f) in flags.iter().enumerate() {
        if f > 1 {
            return Err(FeedbackError::NonBinary { position: i, value: f });
        }
    }
    let mut first_incomplete_row = None;
    for (row, chunk) in flags.chunks(row_len).enumerate() {
        if let Some(blocking_row) = first_incomplete_row {
            if chunk.contains(&1) {
                return Err(FeedbackError::Locked { row, blocking_row, pattern: flags.to_vec() });
            }
        } else if chunk.contains(&0) {
            first_incomplete_row = Some(row);
        }
    }
    Ok(())
}

pub fn is_unlock_valid(flags: &[u8], row_len: usize) -> bool {
    validate_pattern(flags, row_len).is_ok()
}

/// Distribution over unlock-valid patterns implied by per-item purchase
/// probabilities under row-conditional independence: rows are drawn in
/// order with independent per-item Bernoullis, and a row is only drawn once
/// every earlier row came out fully purchased. The result is renormalized
/// so the masses sum to 1 exactly.
pub fn pattern_distribution(item_probs: &[f64], row_len: usize) -> Vec<(Vec<u8>, f64)> {
    let patterns = valid_patterns(item_probs.len(), row_len);
    let mut out = Vec::with_capacity(patterns.len());
    let mut total = 0.0;
    for pattern in patterns {
        // rows up to and including the first incomplete one are drawn
        let mut weight = 1.0;
        for (row_flags, row_probs) in pattern.chunks(row_len).zip(item_probs.chunks(row_len)) {
            for (&f, &q) in row_flags.iter().zip(row_probs) {
                weight *= if f == 1 { q } else { 1.0 - q };
            }
            if row_flags.contains(&0) {
                break;
            }
        }
        total += weight;
        out.push((pattern, weight));
    }
    if total > 0.0 {
        for (_, w) in &mut out {
            *w /= total;
        }
    }
    out
}

/// Marginal purchase probability of each slot under a pattern distribution.
pub fn pattern_marginals(dist: &[(Vec<u8>, f64)]) -> Vec<f64> {
    let Some((first, _)) = dist.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for (pattern, p) in dist {
        for (slot, &f) in out.iter_mut().zip(pattern) {
            *slot += p * f as f64;
        }
    }
    out
}

/// Enumerate every unlock-valid pattern for a page of `page_size` items in
/// rows of `row_len`, in ascending bit order (flag 0 = lowest bit).
pub fn valid_patterns(page_size: usize, row_len: usize) -> Vec<Vec<u8>> {
    assert!(page_size <= 16, "pattern enumeration limited to 16 items per page");
    assert!(row_len > 0 && page_size.is_multiple_of(row_len), "page size must be a multiple of row length");
    let mut out = Vec::new();
    for bits in 0u32..(1 << page_size) {
        let flags: Vec<u8> = (0..page_size).map(|i| ((bits >> i) & 1) as u8).collect();
        if is_unlock_valid(&flags, row_len) {
            out.push(flags);
        }
    }
    out
}
