//! Run-length encoded binary image masks.
//!
//! A mask over a `width × height` image is stored as a list of `(start,
//! length)` runs over row-major pixel indices (`index = v * width + u`).
//! Runs must be sorted by start, have nonzero length, must not overlap, and
//! must end at or before `width * height`. Adjacent runs are accepted on
//! input; [`RunMask::from_pixels`] always emits maximal runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sets::PixelSet;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MaskError {
    #[error("run {index} has zero length")]
    EmptyRun { index: usize },
    #[error("run {index} starts at {start}, before the end of the previous run ({prev_end})")]
    Unsorted {
        index: usize,
        start: u64,
        prev_end: u64,
    },
    #[error("run {index} ends at {end}, beyond the {limit} pixels of the image")]
    OutOfBounds { index: usize, end: u64, limit: u64 },
    #[error("mask has zero area")]
    ZeroArea,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMask {
    width: u32,
    height: u32,
    runs: Vec<(u32, u32)>,
}

impl RunMask {
    pub fn from_runs(width: u32, height: u32, runs: Vec<(u32, u32)>) -> Result<Self, MaskError> {
        let limit = width as u64 * height as u64;
        let mut prev_end = 0u64;
        for (index, &(start, len)) in runs.iter().enumerate() {
            if len == 0 {
                return Err(MaskError::EmptyRun { index });
            }
            let (start, end) = (start as u64, start as u64 + len as u64);
            if index > 0 && start < prev_end {
                return Err(MaskError::Unsorted {
                    index,
                    start,
                    prev_end,
                });
            }
            if end > limit {
                return Err(MaskError::OutOfBounds { index, end, limit });
            }
            prev_end = end;
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &PixelSet) -> Self {
        assert_eq!(pixels.width(), width as usize * height as usize);
        Self {
            width,
            height,
            runs: pixels.runs(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|&(_, len)| len as usize).sum()
    }

    pub fn contains(&self, pixel: usize) -> bool {
        let pixel = pixel as u64;
        let idx = self.runs.partition_point(|&(start, _)| (start as u64) <= pixel);
        idx > 0 && {
            let (start, len) = self.runs[idx - 1];
            pixel < start as u64 + len as u64
        }
    }

    pub fn to_pixels(&self) -> PixelSet {
        let n = self.width as usize * self.height as usize;
        let mut set = PixelSet::empty(n);
        for &(start, len) in &self.runs {
            for p in start..start + len {
                set.insert(p as usize);
            }
        }
        set
    }
}
