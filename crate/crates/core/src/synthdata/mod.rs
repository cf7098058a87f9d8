//! Seeded synthetic audio-visual classification data.
//!
//! Each clip shows one class-textured sprite moving on a random walk over a
//! noisy background; the paired waveform is a class-specific carrier whose
//! amplitude follows the sprite's speed. The sprite box per frame is recorded
//! so localization quality can be measured against ground truth.

mod batches;
pub mod container;
mod generate;

pub use batches::{make_batches, BatchPair, BatchStream};
pub use container::{read_bundle, write_bundle};
pub use generate::{generate_dataset, texture_value, GenConfig};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Frame stack in `[T, H, W, C]` row-major order, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(frames >= 1, InvalidArgument, "clip needs at least one frame");
        ensure!(
            data.len() == frames * height * width * channels,
            Shape,
            "clip data length {} does not match [{frames}, {height}, {width}, {channels}]",
            data.len()
        );
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Frames `[start, start + len)` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        ensure!(
            len >= 1 && start + len <= self.frames,
            InvalidArgument,
            "window [{start}, {}) outside {} frames",
            start + len,
            self.frames
        );
        let n = self.frame_len();
        Self::new(len, self.height, self.width, self.channels, self.data[start * n..(start + len) * n].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Pixel box `(x0, y0, x1, y1)`, half-open on the right and bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxPx {
    pub fn area(&self) -> u32 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x) && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    /// Overlap area with the cell `[cx0, cx1) × [cy0, cy1)`.
    pub fn overlap(&self, cx0: usize, cy0: usize, cx1: usize, cy1: usize) -> usize {
        let w = (self.x1 as usize).min(cx1).saturating_sub((self.x0 as usize).max(cx0));
        let h = (self.y1 as usize).min(cy1).saturating_sub((self.y0 as usize).max(cy0));
        w * h
    }
}

/// Ground-truth sound-source box for every frame of a clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRegion {
    pub frame_boxes: Vec<BoxPx>,
}

impl SourceRegion {
    pub fn is_valid(&self, width: usize, height: usize) -> bool {
        self.frame_boxes.iter().all(|b| {
            b.x0 < b.x1 && b.y0 < b.y1 && b.x1 as usize <= width && b.y1 as usize <= height
        })
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            frame_boxes: self.frame_boxes[start..start + len].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: VideoClip,
    pub waveform: Waveform,
    pub label: Option<usize>,
    pub source: SourceRegion,
    /// True class of an unlabeled sample. Only diagnostics read this.
    pub(crate) hidden_label: Option<usize>,
}

impl Sample {
    /// Ground-truth class for evaluation and pseudo-label precision logging.
    pub fn diagnostic_label(&self) -> Option<usize> {
        self.label.or(self.hidden_label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub num_classes: usize,
    pub seed: u64,
    pub config: GenConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub metadata: BundleMetadata,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.metadata.num_classes
    }
}
