//! Sent/unsent flags for the feature sequence of one image.

use crate::error::{Error, Result};

/// One flag per feature: `true` means the feature is sent (a feature of
/// interest), `false` means it was masked and the receiver substitutes the
/// learned mask token. At least one feature is always sent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskBitmap {
    bits: Vec<bool>,
}

impl MaskBitmap {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidArgument("bitmap must keep at least one feature".into()));
        }
        Ok(Self { bits })
    }

    pub fn all_ones(len: usize) -> Self {
        assert!(len > 0, "empty bitmap");
        Self { bits: vec![true; len] }
    }

    /// Bitmap of length `len` keeping exactly `kept`.
    pub fn from_indices(len: usize, kept: &[usize]) -> Result<Self> {
        let mut bits = vec![false; len];
        for &i in kept {
            if i >= len {
                return Err(Error::InvalidArgument(format!("index {i} outside bitmap of length {len}")));
            }
            bits[i] = true;
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of sent features in ascending order (payload order).
    pub fn kept(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn is_subset_of(&self, other: &MaskBitmap) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Decoder slot map: `Some(j)` when slot `i` holds the `j`-th received
    /// feature, `None` when it holds the mask token. `offset` is added to
    /// every `j` so several images can share one received-row buffer.
    pub fn slots(&self, offset: usize) -> Vec<Option<usize>> {
        let mut next = offset;
        self.bits
            .iter()
            .map(|&b| {
                if b {
                    next += 1;
                    Some(next - 1)
                } else {
                    None
                }
            })
            .collect()
    }
}

impl std::fmt::Display for MaskBitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
