//! Fixed-capacity FIFO store of detached feature rows, used as extra
//! negatives by the contrastive alignment loss.

use std::collections::VecDeque;

use crate::error::{Result, SentinelError};
use crate::tensor::Tensor;

/// Ring buffer of feature rows. The first push fixes the row width; the
/// oldest rows are evicted first once `capacity` is reached. Stored rows
/// are plain values with no gradient linkage.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    width: Option<usize>,
    rows: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            width: None,
            rows: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }

    /// FIFO append of every row of `batch`, evicting at capacity.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rows() == 0 {
            return Ok(());
        }
        let w = batch.cols();
        match self.width {
            None => self.width = Some(w),
            Some(expected) if expected != w => {
                return Err(SentinelError::dim("memory bank row width", expected, w));
            }
            _ => {}
        }
        for i in 0..batch.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(batch.row(i).to_vec());
        }
        Ok(())
    }
}
