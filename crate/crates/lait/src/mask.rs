//! Attention masks over a concatenated token sequence.

use crate::error::{LaitError, Result};
use crate::tensor::BoolMatrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Tokens attend only within their own segment.
    BlockDiagonal(Vec<usize>),
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    allowed: BoolMatrix,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn full(side: usize) -> Self {
        Self {
            allowed: BoolMatrix::filled(side, side, true),
            kind: MaskKind::Full,
        }
    }

    /// Block-diagonal mask for consecutive segments of the given lengths.
    pub fn block_diagonal(lengths: &[usize]) -> Result<Self> {
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(LaitError::EmptySegment(i));
        }
        let side: usize = lengths.iter().sum();
        let mut allowed = BoolMatrix::filled(side, side, false);
        let mut start = 0;
        for &len in lengths {
            for r in start..start + len {
                allowed.row_mut(r)[start..start + len].fill(true);
            }
            start += len;
        }
        Ok(Self {
            allowed,
            kind: MaskKind::BlockDiagonal(lengths.to_vec()),
        })
    }

    /// Builds an arbitrary mask. Every token must at least see itself.
    pub fn custom(allowed: BoolMatrix) -> Result<Self> {
        if allowed.rows() != allowed.cols() {
            return Err(LaitError::shape("AttentionMask::custom", "mask must be square"));
        }
        if (0..allowed.rows()).any(|i| !allowed.get(i, i)) {
            return Err(LaitError::shape("AttentionMask::custom", "diagonal must be allowed"));
        }
        let kind = if allowed.data().iter().all(|&b| b) {
            MaskKind::Full
        } else {
            MaskKind::BlockDiagonal(Vec::new())
        };
        Ok(Self { allowed, kind })
    }

    pub fn side(&self) -> usize {
        self.allowed.rows()
    }

    pub fn allowed(&self) -> &BoolMatrix {
        &self.allowed
    }

    pub fn kind(&self) -> &MaskKind {
        &self.kind
    }

    pub fn allowed_pairs(&self) -> u64 {
        self.allowed.data().iter().filter(|&&b| b).count() as u64
    }
}

/// Block mask for segments of the given lengths; one segment gives a full mask.
pub fn build_block_mask(lengths: &[usize]) -> Result<AttentionMask> {
    AttentionMask::block_diagonal(lengths)
}
