//! Audio-source-localization guided token masks and the tube/random baselines.

mod sampling;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use sampling::{inclusion_probabilities, sample_without_replacement};

use crate::autodiff::{matmul, matmul_t, Tensor};
use crate::error::{ensure, Result};

/// Localizer output: per-frame visual features and clip-level audio features
/// sharing the token count `n_loc`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocFeatures {
    pub frames: usize,
    pub n_loc: usize,
    pub dim: usize,
    /// `[T, n_loc, dim]`
    pub f_vid: Vec<f64>,
    /// `[n_loc, dim]`
    pub f_aud: Vec<f64>,
}

impl LocFeatures {
    pub fn new(frames: usize, n_loc: usize, dim: usize, f_vid: Vec<f64>, f_aud: Vec<f64>) -> Result<Self> {
        ensure!(
            f_vid.len() == frames * n_loc * dim,
            Shape,
            "video features hold {} values, expected {frames}x{n_loc}x{dim}",
            f_vid.len()
        );
        ensure!(
            f_aud.len() == n_loc * dim,
            Shape,
            "audio features hold {} values, expected {n_loc}x{dim}",
            f_aud.len()
        );
        Ok(Self { frames, n_loc, dim, f_vid, f_aud })
    }

    pub fn video_frame(&self, t: usize) -> Tensor {
        let sz = self.n_loc * self.dim;
        Tensor::new(vec![self.n_loc, self.dim], self.f_vid[t * sz..(t + 1) * sz].to_vec()).expect("sized by construction")
    }

    pub fn audio(&self) -> Tensor {
        Tensor::new(vec![self.n_loc, self.dim], self.f_aud.clone()).expect("sized by construction")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Frame,
    Clip,
}

/// Raw per-frame maps and the normalized per-token saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub frames: usize,
    pub n_loc: usize,
    /// `[T, n_loc, n_loc]`; empty when built directly from saliency.
    pub raw: Vec<f64>,
    pub tokens: usize,
    /// `[T, N]`, min-max normalized with an epsilon floor.
    pub saliency: Vec<f64>,
}

impl LocalizationMap {
    pub fn compute(
        feats: &LocFeatures,
        grid: (usize, usize),
        norm: Normalization,
        eps: f64,
    ) -> Result<Self> {
        let tokens = grid.0 * grid.1;
        let fa = feats.audio();
        let mut raw = Vec::with_capacity(feats.frames * feats.n_loc * feats.n_loc);
        let mut sal = Vec::with_capacity(feats.frames * tokens);
        for t in 0..feats.frames {
            let map = localization_map(&feats.video_frame(t), &fa)?;
            sal.extend(reduce_and_resize(&map, grid)?);
            raw.extend_from_slice(map.data());
        }
        let saliency = match norm {
            Normalization::Frame => sal.chunks(tokens).flat_map(|row| minmax_floor(row, eps)).collect(),
            Normalization::Clip => minmax_floor(&sal, eps),
        };
        Ok(Self {
            frames: feats.frames,
            n_loc: feats.n_loc,
            raw,
            tokens,
            saliency,
        })
    }

    /// Wraps an already normalized `[T, N]` saliency array.
    pub fn from_saliency(frames: usize, tokens: usize, saliency: Vec<f64>) -> Result<Self> {
        ensure!(saliency.len() == frames * tokens, Shape, "saliency length {} is not {frames}x{tokens}", saliency.len());
        Ok(Self {
            frames,
            n_loc: 0,
            raw: Vec::new(),
            tokens,
            saliency,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.saliency[t * self.tokens..(t + 1) * self.tokens]
    }
}

/// `f · fᵀ`
pub fn self_attention_map(f: &Tensor) -> Tensor {
    matmul_t(f, f).expect("f·fᵀ always conforms")
}

/// `(f_vid·f_vidᵀ)·(f_aud·f_audᵀ)ᵀ`
pub fn localization_map(f_vid: &Tensor, f_aud: &Tensor) -> Result<Tensor> {
    ensure!(
        f_vid.rows() == f_aud.rows(),
        Shape,
        "localizer token counts differ: video {} vs audio {}",
        f_vid.rows(),
        f_aud.rows()
    );
    let va = self_attention_map(f_vid);
    let aa = self_attention_map(f_aud);
    matmul(&va, &aa.transpose2())
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let coords = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let lo = c.floor() as usize;
                (lo, (lo + 1).min(n_src - 1), c - lo as f64)
            })
            .collect()
    };
    let ys = coords(from.0, to.0);
    let xs = coords(from.1, to.1);
    let at = |y: usize, x: usize| src[y * from.1 + x];
    let mut out = Vec::with_capacity(to.0 * to.1);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Row-mean of a square map, laid out on its `√n × √n` grid and resized to
/// `target`. Flattened row-major.
pub fn reduce_and_resize(map: &Tensor, target: (usize, usize)) -> Result<Vec<f64>> {
    let n = map.rows();
    let side = (n as f64).sqrt().round() as usize;
    ensure!(side * side == n && n >= 1, Shape, "localizer token count {n} is not a perfect square");
    ensure!(map.cols() == n, Shape, "map is {}x{}, expected square", n, map.cols());
    let means: Vec<f64> = (0..n).map(|r| map.row(r).iter().sum::<f64>() / n as f64).collect();
    if (side, side) == target {
        return Ok(means);
    }
    Ok(bilinear_resize(&means, (side, side), target))
}

/// `max((w − min) / (max − min), eps)`; a constant input maps to all ones.
pub fn minmax_floor(weights: &[f64], eps: f64) -> Vec<f64> {
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; weights.len()];
    }
    weights.iter().map(|w| ((w - lo) / (hi - lo)).max(eps)).collect()
}

/// `⌊λ·N⌋`, at least 1.
pub fn keep_count(lambda: f64, tokens: usize) -> usize {
    ((lambda * tokens as f64 + 1e-9).floor() as usize).clamp(1, tokens)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Asl,
    Tube,
    Random,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Asl, MaskKind::Tube, MaskKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Asl => "asl",
            MaskKind::Tube => "tube",
            MaskKind::Random => "random",
        }
    }
}

/// `[T, N]` keep mask; 1 selects the token of clip A.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryTokenMask {
    pub frames: usize,
    pub tokens: usize,
    pub keep: usize,
    pub data: Vec<u8>,
}

impl BinaryTokenMask {
    pub fn ones(frames: usize, tokens: usize) -> Self {
        Self {
            frames,
            tokens,
            keep: tokens,
            data: vec![1; frames * tokens],
        }
    }

    fn from_rows(frames: usize, tokens: usize, keep: usize, rows: impl Fn(usize) -> Vec<usize>) -> Self {
        let mut data = vec![0u8; frames * tokens];
        for t in 0..frames {
            for n in rows(t) {
                data[t * tokens + n] = 1;
            }
        }
        Self { frames, tokens, keep, data }
    }

    pub fn get(&self, t: usize, n: usize) -> bool {
        self.data[t * self.tokens + n] == 1
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.tokens..(t + 1) * self.tokens]
    }

    pub fn row_count(&self, t: usize) -> usize {
        self.row(t).iter().filter(|&&v| v == 1).count()
    }

    pub fn is_tube(&self) -> bool {
        (1..self.frames).all(|t| self.row(t) == self.row(0))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    ensure!(lambda > 0.0 && lambda <= 1.0, InvalidArgument, "mix ratio {lambda} outside (0, 1]");
    Ok(())
}

/// Saliency-weighted mask. Frames are grouped in runs of `k_avg`; each group
/// averages its saliency rows and draws one token set shared by the group.
pub fn build_asl_mask(loc: &LocalizationMap, lambda: f64, k_avg: usize, rng: &mut impl Rng) -> Result<BinaryTokenMask> {
    check_lambda(lambda)?;
    ensure!(
        matches!(k_avg, 1 | 2 | 4 | 8) && loc.frames % k_avg == 0,
        InvalidArgument,
        "frames_per_map {k_avg} must be one of 1, 2, 4, 8 and divide {} frames",
        loc.frames
    );
    let n = loc.tokens;
    let keep = keep_count(lambda, n);
    let mut sets = Vec::with_capacity(loc.frames / k_avg);
    for g in 0..loc.frames / k_avg {
        if keep == n {
            sets.push((0..n).collect::<Vec<_>>());
            continue;
        }
        let mut w = vec![0.0; n];
        for t in g * k_avg..(g + 1) * k_avg {
            for (a, b) in w.iter_mut().zip(loc.frame(t)) {
                *a += b / k_avg as f64;
            }
        }
        sets.push(sample_without_replacement(&w, keep, rng)?);
    }
    Ok(BinaryTokenMask::from_rows(loc.frames, n, keep, |t| sets[t / k_avg].clone()))
}

/// One uniform token subset copied to every frame.
pub fn build_tube_mask(tokens: usize, frames: usize, lambda: f64, rng: &mut impl Rng) -> Result<BinaryTokenMask> {
    check_lambda(lambda)?;
    let keep = keep_count(lambda, tokens);
    let set = rand::seq::index::sample(rng, tokens, keep).into_vec();
    Ok(BinaryTokenMask::from_rows(frames, tokens, keep, |_| set.clone()))
}

/// Independent uniform token subset per frame.
pub fn build_random_mask(tokens: usize, frames: usize, lambda: f64, rng: &mut impl Rng) -> Result<BinaryTokenMask> {
    check_lambda(lambda)?;
    let keep = keep_count(lambda, tokens);
    let sets: Vec<Vec<usize>> = (0..frames)
        .map(|_| rand::seq::index::sample(rng, tokens, keep).into_vec())
        .collect();
    Ok(BinaryTokenMask::from_rows(frames, tokens, keep, |t| sets[t].clone()))
}
