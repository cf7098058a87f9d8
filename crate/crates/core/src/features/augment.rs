//! Video augmentation. Sampling an augmentation and applying it are split so
//! that the same plan can be replayed on the ground-truth source boxes.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::synthdata::{BoxPx, SourceRegion, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Flip,
    Translate,
    Brightness,
    Contrast,
    Grayscale,
    Cutout,
}

impl OpKind {
    pub const STRONG_SET: [OpKind; 6] = [
        OpKind::Flip,
        OpKind::Translate,
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Grayscale,
        OpKind::Cutout,
    ];
}

/// One concrete, fully parameterized video operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VideoOp {
    Flip,
    /// Content moves by `(dx, dy)` pixels; vacated pixels are zero.
    Translate { dx: i32, dy: i32 },
    Brightness(f32),
    /// Scales deviations from the clip mean.
    Contrast(f32),
    Grayscale,
    /// Square of side `size` at `(x, y)` filled with 0.5.
    Cutout { x: usize, y: usize, size: usize },
}

impl VideoOp {
    pub fn kind(&self) -> OpKind {
        match self {
            VideoOp::Flip => OpKind::Flip,
            VideoOp::Translate { .. } => OpKind::Translate,
            VideoOp::Brightness(_) => OpKind::Brightness,
            VideoOp::Contrast(_) => OpKind::Contrast,
            VideoOp::Grayscale => OpKind::Grayscale,
            VideoOp::Cutout { .. } => OpKind::Cutout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    /// Largest translation as a fraction of the frame side.
    pub max_shift_frac: f64,
    pub flip_prob: f64,
    pub ops: Vec<OpKind>,
    pub ops_per_clip: usize,
    pub brightness: f64,
    pub contrast_range: (f64, f64),
    pub cutout_frac: f64,
    /// Per-frame keep probability for temporal warping.
    pub twaug_keep_prob: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self::weak()
    }
}

impl AugPolicy {
    pub fn weak() -> Self {
        Self {
            kind: AugKind::Weak,
            max_shift_frac: 0.1,
            flip_prob: 0.5,
            ops: vec![OpKind::Flip, OpKind::Translate],
            ops_per_clip: 2,
            brightness: 0.0,
            contrast_range: (1.0, 1.0),
            cutout_frac: 0.0,
            twaug_keep_prob: 1.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            kind: AugKind::Strong,
            max_shift_frac: 0.1,
            flip_prob: 0.5,
            ops: OpKind::STRONG_SET.to_vec(),
            ops_per_clip: 2,
            brightness: 0.3,
            contrast_range: (0.6, 1.4),
            cutout_frac: 0.25,
            twaug_keep_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AugKind::Weak {
            ensure!(
                self.ops.iter().all(|o| matches!(o, OpKind::Flip | OpKind::Translate)),
                Config,
                "weak policy may only flip and translate"
            );
        }
        ensure!(
            self.ops_per_clip <= self.ops.len(),
            Config,
            "ops_per_clip {} exceeds {} available ops",
            self.ops_per_clip,
            self.ops.len()
        );
        ensure!(
            (0.0..=0.5).contains(&self.max_shift_frac),
            Config,
            "max_shift_frac out of range"
        );
        Ok(())
    }

    /// Draws a concrete plan for a clip of the given geometry.
    pub fn sample(&self, frames: usize, height: usize, width: usize, rng: &mut impl Rng) -> AugPlan {
        match self.kind {
            AugKind::Weak => {
                let mut ops = Vec::new();
                if self.ops.contains(&OpKind::Flip) && rng.random_bool(self.flip_prob) {
                    ops.push(VideoOp::Flip);
                }
                if self.ops.contains(&OpKind::Translate) {
                    let (dx, dy) = self.shift(height, width, rng);
                    if dx != 0 || dy != 0 {
                        ops.push(VideoOp::Translate { dx, dy });
                    }
                }
                AugPlan { ops, twaug: None }
            }
            AugKind::Strong => {
                let chosen = index::sample(rng, self.ops.len(), self.ops_per_clip);
                let ops = chosen
                    .iter()
                    .map(|i| self.concrete(self.ops[i], height, width, rng))
                    .collect();
                let mut keep: Vec<usize> = (0..frames)
                    .filter(|_| rng.random_bool(self.twaug_keep_prob))
                    .collect();
                if keep.is_empty() {
                    keep.push(rng.random_range(0..frames));
                }
                AugPlan { ops, twaug: Some(keep) }
            }
        }
    }

    fn shift(&self, height: usize, width: usize, rng: &mut impl Rng) -> (i32, i32) {
        let mx = (self.max_shift_frac * width as f64).floor() as i32;
        let my = (self.max_shift_frac * height as f64).floor() as i32;
        (rng.random_range(-mx..=mx), rng.random_range(-my..=my))
    }

    fn concrete(&self, kind: OpKind, height: usize, width: usize, rng: &mut impl Rng) -> VideoOp {
        match kind {
            OpKind::Flip => VideoOp::Flip,
            OpKind::Translate => {
                let (dx, dy) = self.shift(height, width, rng);
                VideoOp::Translate { dx, dy }
            }
            OpKind::Brightness => {
                let b = self.brightness;
                VideoOp::Brightness(if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 } as f32)
            }
            OpKind::Contrast => {
                let (lo, hi) = self.contrast_range;
                VideoOp::Contrast(if hi > lo { rng.random_range(lo..=hi) } else { lo } as f32)
            }
            OpKind::Grayscale => VideoOp::Grayscale,
            OpKind::Cutout => {
                let size = ((self.cutout_frac * width.min(height) as f64).floor() as usize).max(1);
                VideoOp::Cutout {
                    x: rng.random_range(0..=width - size),
                    y: rng.random_range(0..=height - size),
                    size,
                }
            }
        }
    }
}

/// A sampled augmentation: pixel ops in order, then optional temporal warping.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPlan {
    pub ops: Vec<VideoOp>,
    pub twaug: Option<Vec<usize>>,
}

impl AugPlan {
    pub fn identity() -> Self {
        Self {
            ops: Vec::new(),
            twaug: None,
        }
    }

    pub fn apply(&self, clip: &VideoClip) -> Result<VideoClip> {
        let mut out = clip.clone();
        for op in &self.ops {
            out = apply_op(&out, op);
        }
        if let Some(sel) = &self.twaug {
            out = twaug(&out, sel)?;
        }
        Ok(out)
    }

    /// Moves source boxes the way [`AugPlan::apply`] moves pixels.
    pub fn map_region(&self, region: &SourceRegion, width: usize, height: usize) -> Result<SourceRegion> {
        let mut boxes = region.frame_boxes.clone();
        for op in &self.ops {
            match *op {
                VideoOp::Flip => {
                    for b in &mut boxes {
                        let (x0, x1) = (width as u32 - b.x1, width as u32 - b.x0);
                        b.x0 = x0;
                        b.x1 = x1;
                    }
                }
                VideoOp::Translate { dx, dy } => {
                    for b in &mut boxes {
                        *b = shift_box(*b, dx, dy, width, height);
                    }
                }
                _ => {}
            }
        }
        if let Some(sel) = &self.twaug {
            let map = twaug_source_frames(boxes.len(), sel)?;
            boxes = map.iter().map(|&s| boxes[s]).collect();
        }
        Ok(SourceRegion { frame_boxes: boxes })
    }
}

fn shift_box(b: BoxPx, dx: i32, dy: i32, width: usize, height: usize) -> BoxPx {
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64) as u32;
    let mut x0 = clampi(b.x0 as i64 + dx as i64, width);
    let mut x1 = clampi(b.x1 as i64 + dx as i64, width);
    let mut y0 = clampi(b.y0 as i64 + dy as i64, height);
    let mut y1 = clampi(b.y1 as i64 + dy as i64, height);
    // keep at least one pixel when a box is pushed off the frame
    if x0 == x1 {
        if x1 as usize == width {
            x0 = x1 - 1;
        } else {
            x1 = x0 + 1;
        }
    }
    if y0 == y1 {
        if y1 as usize == height {
            y0 = y1 - 1;
        } else {
            y1 = y0 + 1;
        }
    }
    BoxPx { x0, y0, x1, y1 }
}

pub fn apply_op(clip: &VideoClip, op: &VideoOp) -> VideoClip {
    let (t, h, w, c) = (clip.frames, clip.height, clip.width, clip.channels);
    let mut out = clip.clone();
    match *op {
        VideoOp::Flip => {
            for f in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            out.data[clip.index(f, y, x, ch)] = clip.get(f, y, w - 1 - x, ch);
                        }
                    }
                }
            }
        }
        VideoOp::Translate { dx, dy } => {
            for f in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let sx = x as i64 - dx as i64;
                        let sy = y as i64 - dy as i64;
                        let inside = (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy);
                        for ch in 0..c {
                            out.data[clip.index(f, y, x, ch)] = if inside {
                                clip.get(f, sy as usize, sx as usize, ch)
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
        VideoOp::Brightness(delta) => {
            for v in &mut out.data {
                *v = (*v + delta).clamp(0.0, 1.0);
            }
        }
        VideoOp::Contrast(factor) => {
            let mean = clip.data.iter().map(|&v| v as f64).sum::<f64>() / clip.data.len() as f64;
            for v in &mut out.data {
                *v = (mean + factor as f64 * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
            }
        }
        VideoOp::Grayscale => {
            for px in out.data.chunks_mut(c) {
                let lum = if c == 3 {
                    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
                } else {
                    px.iter().map(|&v| v as f64).sum::<f64>() / c as f64
                };
                px.iter_mut().for_each(|v| *v = lum.clamp(0.0, 1.0) as f32);
            }
        }
        VideoOp::Cutout { x, y, size } => {
            for f in 0..t {
                for yy in y..(y + size).min(h) {
                    for xx in x..(x + size).min(w) {
                        for ch in 0..c {
                            out.data[clip.index(f, yy, xx, ch)] = 0.5;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Horizontal flip and integer shift of at most 10% of the frame side,
/// shared by all frames.
pub fn weak_augment(clip: &VideoClip, rng: &mut impl Rng) -> VideoClip {
    AugPolicy::weak()
        .sample(clip.frames, clip.height, clip.width, rng)
        .apply(clip)
        .expect("weak plans carry no temporal selection")
}

/// Two distinct ops from the strong set followed by temporal warping.
pub fn strong_augment(clip: &VideoClip, rng: &mut impl Rng) -> VideoClip {
    AugPolicy::strong()
        .sample(clip.frames, clip.height, clip.width, rng)
        .apply(clip)
        .expect("sampled selections are non-empty and in range")
}

/// Source frame for every output position: the latest selected index at or
/// before it, or the first selected index for leading positions.
pub fn twaug_source_frames(frames: usize, selected: &[usize]) -> Result<Vec<usize>> {
    ensure!(!selected.is_empty(), InvalidArgument, "temporal warping needs at least one selected frame");
    ensure!(
        selected.iter().all(|&s| s < frames),
        InvalidArgument,
        "selected frame out of range 0..{frames}"
    );
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    Ok((0..frames)
        .map(|t| match sel.partition_point(|&s| s <= t) {
            0 => sel[0],
            k => sel[k - 1],
        })
        .collect())
}

/// Temporal warping: unselected positions repeat the nearest earlier
/// selected frame.
pub fn twaug(clip: &VideoClip, selected: &[usize]) -> Result<VideoClip> {
    let map = twaug_source_frames(clip.frames, selected)?;
    let mut out = clip.clone();
    for (t, &s) in map.iter().enumerate() {
        out.frame_mut(t).copy_from_slice(clip.frame(s));
    }
    Ok(out)
}
