use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::field::InterfaceVector;

/// Matched residual / value increment columns of one completed time step,
/// newest column first.
#[derive(Debug, Clone, Default)]
pub struct HistoryBlock {
    v: Vec<InterfaceVector>,
    w: Vec<InterfaceVector>,
}

impl HistoryBlock {
    pub fn new(v: Vec<InterfaceVector>, w: Vec<InterfaceVector>) -> Result<Self> {
        if v.len() != w.len() {
            return Err(Error::Config(format!(
                "history block needs paired columns, got {} residual and {} value increments",
                v.len(),
                w.len()
            )));
        }
        Ok(Self { v, w })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn residual_increments(&self) -> &[InterfaceVector] {
        &self.v
    }

    pub fn value_increments(&self) -> &[InterfaceVector] {
        &self.w
    }

    fn remove(&mut self, column: usize) {
        self.v.remove(column);
        self.w.remove(column);
    }
}

/// Ring buffer of the last `capacity` time-step blocks, newest first.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    capacity: usize,
    blocks: VecDeque<HistoryBlock>,
}

impl HistoryStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            blocks: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `block` as the newest one, evicting the oldest beyond capacity.
    /// Empty blocks are not stored.
    pub fn push(&mut self, block: HistoryBlock) {
        if self.capacity == 0 || block.is_empty() {
            return;
        }
        self.blocks.push_front(block);
        self.blocks.truncate(self.capacity);
    }

    pub fn blocks(&self) -> impl Iterator<Item = &HistoryBlock> {
        self.blocks.iter()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn column_count(&self) -> usize {
        self.blocks.iter().map(HistoryBlock::len).sum()
    }

    /// Removes column `column` of block `block` from both V and W. A block
    /// left empty is discarded.
    pub fn remove_column(&mut self, block: usize, column: usize) {
        self.blocks[block].remove(column);
        if self.blocks[block].is_empty() {
            self.blocks.remove(block);
        }
    }

    pub fn clear(&mut self) {
        self.blocks.clear();
    }
}
