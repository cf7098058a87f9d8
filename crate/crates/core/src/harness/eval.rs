use serde::{Deserialize, Serialize};

use super::config::EvalPolicy;
use super::data::{spectrogram, waveform_window};
use crate::aslmask::bilinear_resize;
use crate::error::{ensure, Result};
use crate::features::{patchify, LogMelParams, LogMelSpec, TokenGrid};
use crate::models::{Model, ParamStore};
use crate::synthdata::{DatasetBundle, VideoClip};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
    pub views: usize,
}

/// Evenly spaced window starts; a single window is centred.
pub fn segment_starts(total: usize, len: usize, segments: usize) -> Result<Vec<usize>> {
    ensure!(len <= total, InvalidArgument, "segment of {len} frames exceeds {total} frames");
    ensure!(segments >= 1, InvalidArgument, "need at least one segment");
    let span = (total - len) as f64;
    if segments == 1 {
        return Ok(vec![(span / 2.0).floor() as usize]);
    }
    Ok((0..segments)
        .map(|i| (span * i as f64 / (segments - 1) as f64).round() as usize)
        .collect())
}

/// Left, centre and right crop origins (evenly spaced for other counts).
pub fn crop_origins(extent: usize, size: usize, crops: usize) -> Result<Vec<usize>> {
    ensure!(size >= 1 && size <= extent, InvalidArgument, "crop {size} does not fit extent {extent}");
    ensure!(crops >= 1, InvalidArgument, "need at least one crop");
    let span = (extent - size) as f64;
    if crops == 1 {
        return Ok(vec![(span / 2.0).floor() as usize]);
    }
    Ok((0..crops)
        .map(|i| (span * i as f64 / (crops - 1) as f64).round() as usize)
        .collect())
}

/// Crops `size × size` at `(x0, y0)` from every frame and resizes back to
/// the clip's resolution.
pub fn crop_resize(clip: &VideoClip, x0: usize, y0: usize, size: usize) -> Result<VideoClip> {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    ensure!(x0 + size <= w && y0 + size <= h, InvalidArgument, "crop outside the frame");
    let mut out = VideoClip::filled(clip.frames, h, w, c, 0.0);
    let mut plane = vec![0.0; size * size];
    for t in 0..clip.frames {
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    plane[y * size + x] = clip.get(t, y0 + y, x0 + x, ch) as f64;
                }
            }
            let resized = if size == h && size == w {
                plane.clone()
            } else {
                bilinear_resize(&plane, (size, size), (h, w))
            };
            for y in 0..h {
                for x in 0..w {
                    let i = out.index(t, y, x, ch);
                    out.data[i] = resized[y * w + x].clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Video and audio inputs of every view of one test sample.
pub fn sample_views(
    model: &Model,
    bundle: &DatasetBundle,
    index: usize,
    features: &LogMelParams,
    policy: &EvalPolicy,
) -> Result<(Vec<TokenGrid>, Vec<LogMelSpec>)> {
    let cfg = &model.config;
    let gen = &bundle.metadata.config;
    let sample = &bundle.test[index];
    let clip = &sample.clip;
    let side = clip.height.min(clip.width);
    let size = policy.crop_size.min(side);
    let xs = crop_origins(clip.width, size, policy.crops)?;
    let y0 = (clip.height - size) / 2;
    let mut grids = Vec::with_capacity(policy.views());
    let mut specs = Vec::with_capacity(policy.views());
    for start in segment_starts(clip.frames, cfg.frames, policy.segments)? {
        let window = clip.window(start, cfg.frames)?;
        let spec = spectrogram(&waveform_window(gen, sample, start, cfg.frames)?, features, cfg.steps)?;
        for &x0 in &xs {
            grids.push(patchify(&crop_resize(&window, x0, y0, size)?, cfg.patch)?);
            specs.push(spec.clone());
        }
    }
    Ok((grids, specs))
}

/// Averages softmax outputs over `segments × crops` views per test sample.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    bundle: &DatasetBundle,
    features: &LogMelParams,
    policy: &EvalPolicy,
) -> Result<EvalReport> {
    ensure!(!bundle.test.is_empty(), InvalidArgument, "test split is empty");
    let classes = model.config.classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (i, sample) in bundle.test.iter().enumerate() {
        let label = sample.label.ok_or_else(|| {
            crate::error::Error::InvalidArgument(format!("test sample `{}` has no label", sample.id))
        })?;
        let (grids, specs) = sample_views(model, bundle, i, features, policy)?;
        let n = grids.len();
        let vin = model.video_input(&grids.iter().collect::<Vec<_>>())?;
        let ain = model.audio_input(&specs.iter().collect::<Vec<_>>())?;
        let probs = model.predict(params, vin, ain, n)?;
        let mut avg = vec![0.0; classes];
        for r in 0..n {
            for (a, p) in avg.iter_mut().zip(probs.row(r)) {
                *a += p / n as f64;
            }
        }
        let pred = (0..classes).max_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(b.cmp(&a))).unwrap_or(0);
        confusion[label][pred] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        per_class,
        confusion,
        samples: total,
        views: policy.views(),
    })
}
