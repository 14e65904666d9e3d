//! Mini-batches of registered source pairs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` aligned source pairs as `[n, 1, h, w]` tensors, plus an optional
/// binary target mask for the segmentation surrogate task.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub a: Tensor,
    pub b: Tensor,
    pub mask: Option<Tensor>,
}

impl PairBatch {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (_, c, _, _) = a.dims4()?;
        if a.shape() != b.shape() || c != 1 {
            return Err(Error::Shape(format!(
                "pair batch needs equal single-channel tensors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, mask: None })
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.a.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} vs sources {:?}",
                mask.shape(),
                self.a.shape()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)` of every image in the batch.
    pub fn size(&self) -> (usize, usize) {
        (self.a.shape()[2], self.a.shape()[3])
    }
}
