//! Per-pixel object id masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `h×w` map of object ids, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IdMask {
    h: usize,
    w: usize,
    ids: Vec<u8>,
}

impl IdMask {
    pub fn new(h: usize, w: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::shape("id mask", &[ids.len()], &[h, w]));
        }
        Ok(IdMask { h, w, ids })
    }

    pub fn background(h: usize, w: usize) -> Self {
        IdMask {
            h,
            w,
            ids: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let ids = (0..h * w).map(|i| f(i / w, i % w)).collect();
        IdMask { h, w, ids }
    }

    /// Argmax over the last axis of an `H×W×N` logit map; ties go to the
    /// lowest channel.
    pub fn argmax(logits: &Tensor) -> Result<Self> {
        let &[h, w, n] = logits.shape() else {
            return Err(Error::shape("argmax logits", logits.shape(), &[0, 0, 0]));
        };
        if n > 256 {
            return Err(Error::shape("argmax logits", logits.shape(), &[h, w, 256]));
        }
        let ids = logits
            .data()
            .chunks(n)
            .map(|px| {
                let mut best = 0;
                for (i, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Ok(IdMask { h, w, ids })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.w + x]
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Binary support of object `obj`.
    pub fn binary(&self, obj: u8) -> Vec<bool> {
        self.ids.iter().map(|&v| v == obj).collect()
    }

    pub fn count(&self, obj: u8) -> usize {
        self.ids.iter().filter(|&&v| v == obj).count()
    }
}
