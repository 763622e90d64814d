//! Dice-gated FIFO store of past predictions used as extra long-term
//! references at inference.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CAPACITY: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// One remembered frame: its backbone pyramid, predicted mask and quality.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T: Real = f32> {
    pub frame: usize,
    pub features: Vec<Tensor<T>>,
    pub mask: Tensor<T>,
    pub dice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemoryEvent {
    Admitted { frame: usize, dice: f64 },
    Rejected { frame: usize, dice: f64 },
    Evicted { frame: usize, dice: f64 },
}

impl MemoryEvent {
    pub fn frame(&self) -> usize {
        match *self {
            MemoryEvent::Admitted { frame, .. }
            | MemoryEvent::Rejected { frame, .. }
            | MemoryEvent::Evicted { frame, .. } => frame,
        }
    }

    pub fn dice(&self) -> f64 {
        match *self {
            MemoryEvent::Admitted { dice, .. }
            | MemoryEvent::Rejected { dice, .. }
            | MemoryEvent::Evicted { dice, .. } => dice,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MemoryEvent::Admitted { .. } => "admitted",
            MemoryEvent::Rejected { .. } => "rejected",
            MemoryEvent::Evicted { .. } => "evicted",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceMemory<T: Real = f32> {
    capacity: usize,
    threshold: f64,
    entries: VecDeque<MemoryEntry<T>>,
    trace: Vec<MemoryEvent>,
}

impl<T: Real> ReferenceMemory<T> {
    pub fn new(capacity: usize, threshold: f64) -> Result<Self> {
        if capacity == 0 || !(0.0..=1.0).contains(&threshold) {
            return Err(Error::contract(format!(
                "memory capacity {capacity} / threshold {threshold} invalid"
            )));
        }
        Ok(ReferenceMemory {
            capacity,
            threshold,
            entries: VecDeque::with_capacity(capacity),
            trace: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    pub fn latest(&self) -> Option<&MemoryEntry<T>> {
        self.entries.back()
    }

    pub fn trace(&self) -> &[MemoryEvent] {
        &self.trace
    }

    /// Admits the entry iff `dice >= threshold`, evicting the oldest entry
    /// when full. Returns whether it was admitted.
    pub fn update(&mut self, entry: MemoryEntry<T>) -> Result<bool> {
        let (frame, dice) = (entry.frame, entry.dice);
        if !(0.0..=1.0).contains(&dice) {
            return Err(Error::contract(format!("dice {dice} for frame {frame} outside [0, 1]")));
        }
        if dice < self.threshold {
            self.trace.push(MemoryEvent::Rejected { frame, dice });
            return Ok(false);
        }
        if self.entries.len() == self.capacity {
            let old = self.entries.pop_front().expect("full memory is non-empty");
            self.trace.push(MemoryEvent::Evicted {
                frame: old.frame,
                dice: old.dice,
            });
        }
        self.entries.push_back(entry);
        self.trace.push(MemoryEvent::Admitted { frame, dice });
        Ok(true)
    }
}

/// Soft Dice of a probability map against its own binarization at 0.5: a
/// ground-truth-free confidence score in `[0, 1]`.
pub fn self_dice<T: Real>(prob: &Tensor<T>) -> f64 {
    let half = T::lit(0.5);
    let (mut inter, mut sp, mut sb) = (0.0, 0.0, 0.0);
    for &p in prob.data() {
        let p64 = p.as_f64();
        let b = if p >= half { 1.0 } else { 0.0 };
        inter += p64 * b;
        sp += p64;
        sb += b;
    }
    if sp + sb == 0.0 {
        return 1.0;
    }
    (2.0 * inter / (sp + sb)).clamp(0.0, 1.0)
}
