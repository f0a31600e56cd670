//! Long- and short-term memory of past frames.

use crate::tensor::Var;

/// One stored frame: per-block visual key sources and the identity map of
/// its mask.
#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub frame: usize,
    pub keys: Vec<Var>,
    pub ids: Var,
}

/// Every `interval`-th frame enters long-term memory; when more than
/// `capacity` are held the oldest one other than frame 0 is evicted. The
/// most recent frame is always the short-term entry.
#[derive(Clone, Debug)]
pub struct Memory {
    interval: usize,
    capacity: usize,
    long_term: Vec<MemoryEntry>,
    short_term: Option<MemoryEntry>,
}

impl Memory {
    pub fn new(interval: usize, capacity: usize) -> Self {
        Memory {
            interval: interval.max(1),
            capacity: capacity.max(1),
            long_term: Vec::new(),
            short_term: None,
        }
    }

    pub fn commit(&mut self, frame: usize, keys: Vec<Var>, ids: Var) {
        let entry = MemoryEntry { frame, keys, ids };
        if frame.is_multiple_of(self.interval) {
            self.long_term.push(entry.clone());
            if self.long_term.len() > self.capacity {
                let victim = self.long_term.iter().position(|e| e.frame != 0).unwrap_or(0);
                self.long_term.remove(victim);
            }
        }
        self.short_term = Some(entry);
    }

    pub fn long_term_frames(&self) -> Vec<usize> {
        self.long_term.iter().map(|e| e.frame).collect()
    }

    pub fn short_term_frame(&self) -> Option<usize> {
        self.short_term.as_ref().map(|e| e.frame)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.short_term_frame()
    }

    pub fn long_term_sources(&self, block: usize) -> Vec<(Var, Var)> {
        self.long_term.iter().map(|e| (e.keys[block], e.ids)).collect()
    }

    pub fn short_term_source(&self, block: usize) -> Option<(Var, Var)> {
        self.short_term.as_ref().map(|e| (e.keys[block], e.ids))
    }

    pub fn is_empty(&self) -> bool {
        self.short_term.is_none()
    }
}
