//! Browser bindings: generate a clip pair, mix it under a token mask and
//! check the weighted sampler against exact inclusion probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use avmix::aslmask::{
    build_asl_mask, build_random_mask, build_tube_mask, inclusion_probabilities, sample_without_replacement,
    BinaryTokenMask, LocalizationMap, MaskKind, Normalization,
};
use avmix::features::{patchify, unpatchify};
use avmix::mixops::mix_tokens;
use avmix::models::OracleLocalizer;
use avmix::synthdata::{generate_dataset, GenConfig, Sample, VideoClip};

fn js(e: avmix::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Frames laid out left to right as RGBA bytes.
fn strip(clip: &VideoClip) -> Vec<u8> {
    let (t, h, w) = (clip.frames, clip.height, clip.width);
    let mut out = vec![255u8; t * h * w * 4];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let o = (y * t * w + f * w + x) * 4;
                for c in 0..3 {
                    let v = clip.get(f, y, x, c.min(clip.channels - 1));
                    out[o + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

/// Two labeled clips of different classes and their last mixture.
#[wasm_bindgen]
pub struct Demo {
    config: GenConfig,
    a: Sample,
    b: Sample,
    saliency: Vec<f64>,
    mask: Option<BinaryTokenMask>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates one clip of `class_a` and one of `class_b` (out of 4).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, class_a: usize, class_b: usize, max_step: f64) -> Result<Demo, JsError> {
        let config = GenConfig {
            seed,
            per_class_labeled: 1,
            per_class_unlabeled: 10,
            per_class_test: 1,
            max_step,
            ..GenConfig::default()
        };
        let nc = config.num_classes;
        if class_a >= nc || class_b >= nc {
            return Err(JsError::new(&format!("classes must be below {nc}")));
        }
        let bundle = generate_dataset(&config).map_err(js)?;
        Ok(Demo {
            a: bundle.labeled[class_a].clone(),
            b: bundle.labeled[class_b].clone(),
            config,
            saliency: Vec::new(),
            mask: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn patch(&self) -> usize {
        self.config.patch_size
    }

    /// RGBA strip of clip A (`0`) or clip B (anything else).
    pub fn clip_rgba(&self, which: u8) -> Vec<u8> {
        strip(if which == 0 { &self.a.clip } else { &self.b.clip })
    }

    /// Source boxes of clip A as `[x0, y0, x1, y1]` per frame.
    pub fn source_boxes(&self) -> Vec<u32> {
        self.a
            .source
            .frame_boxes
            .iter()
            .flat_map(|b| [b.x0, b.y0, b.x1, b.y1])
            .collect()
    }

    /// Mixes A into B under a `kind` mask (`asl`, `tube` or `random`) that
    /// keeps `⌊λN⌋` tokens of A per frame, and returns the mixed strip.
    pub fn mix(&mut self, kind: &str, lambda: f64, frames_per_map: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        let kind = MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(|| JsError::new(&format!("unknown mask type `{kind}`")))?;
        let p = self.config.patch_size;
        let (t, grid) = (self.config.frames, (self.config.height / p, self.config.width / p));
        let n = grid.0 * grid.1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = OracleLocalizer::default()
            .localize(&self.a.clip, &self.a.source, p, &mut rng)
            .map_err(js)?;
        let loc = LocalizationMap::compute(&feats, grid, Normalization::Frame, 1e-3).map_err(js)?;
        let mask = match kind {
            MaskKind::Asl => build_asl_mask(&loc, lambda, frames_per_map, &mut rng),
            MaskKind::Tube => build_tube_mask(n, t, lambda, &mut rng),
            MaskKind::Random => build_random_mask(n, t, lambda, &mut rng),
        }
        .map_err(js)?;
        let ga = patchify(&self.a.clip, p).map_err(js)?;
        let gb = patchify(&self.b.clip, p).map_err(js)?;
        let mixed = unpatchify(&mix_tokens(&ga, &gb, &mask).map_err(js)?, p, self.config.channels).map_err(js)?;
        self.saliency = loc.saliency;
        self.mask = Some(mask);
        Ok(strip(&mixed))
    }

    /// `[T, N]` mask of the last mixture, 1 where the token came from A.
    pub fn mask(&self) -> Vec<u8> {
        self.mask.as_ref().map(|m| m.data.clone()).unwrap_or_default()
    }

    /// `[T, N]` saliency of clip A from the last mixture.
    pub fn saliency(&self) -> Vec<f64> {
        self.saliency.clone()
    }
}

#[derive(Serialize)]
struct SamplerReport {
    exact: Vec<f64>,
    empirical: Vec<f64>,
    total_variation: f64,
}

/// Draws `k` of `weights.len()` indices without replacement `draws` times
/// and compares the inclusion frequencies with the exact values. Returns
/// JSON with `exact`, `empirical` and `total_variation`.
#[wasm_bindgen]
pub fn sampler_check(weights: Vec<f64>, k: usize, draws: u32, seed: u64) -> Result<String, JsError> {
    let exact = inclusion_probabilities(&weights, k).map_err(js)?;
    let mut counts = vec![0u64; weights.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        for i in sample_without_replacement(&weights, k, &mut rng).map_err(js)? {
            counts[i] += 1;
        }
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect();
    let total_variation = 0.5 * exact.iter().zip(&empirical).map(|(e, p)| (e - p).abs()).sum::<f64>() / k.max(1) as f64;
    let report = SamplerReport {
        exact,
        empirical,
        total_variation,
    };
    serde_json::to_string(&report).map_err(|e| JsError::new(&e.to_string()))
}
