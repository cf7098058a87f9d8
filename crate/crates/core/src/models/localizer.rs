use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::{audio_patches, ModelConfig};
use super::optim::{Sgd, SgdConfig};
use super::params::{Binder, ParamStore};
use crate::aslmask::LocFeatures;
use crate::autodiff::{log_softmax, Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::features::{patchify, LogMelSpec};
use crate::synthdata::{SourceRegion, VideoClip};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizerKind {
    #[default]
    Oracle,
    Learned,
}

/// Builds localizer features from the ground-truth source boxes.
///
/// Every token-grid cell gets `frac·u + noise`, where `frac` is the share of
/// the cell covered by the box and `u` is a random unit direction; noise is
/// orthogonal to `u` with standard deviation `noise/√dim`. Audio rows are
/// `u` plus isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleLocalizer {
    pub dim: usize,
    pub noise: f64,
    /// Fraction of cells, per frame, whose coverage values are shuffled
    /// among themselves.
    pub corruption: f64,
}

impl Default for OracleLocalizer {
    fn default() -> Self {
        Self {
            dim: 16,
            noise: 0.1,
            corruption: 0.0,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl OracleLocalizer {
    pub fn localize(
        &self,
        clip: &VideoClip,
        region: &SourceRegion,
        patch: usize,
        rng: &mut impl Rng,
    ) -> Result<LocFeatures> {
        ensure!(self.dim >= 2, Config, "oracle localizer needs dim >= 2");
        ensure!(
            region.frame_boxes.len() == clip.frames,
            InvalidArgument,
            "{} source boxes for {} frames",
            region.frame_boxes.len(),
            clip.frames
        );
        ensure!(clip.height % patch == 0 && clip.width % patch == 0, Shape, "frame not divisible by patch {patch}");
        let (gh, gw) = (clip.height / patch, clip.width / patch);
        let n = gh * gw;
        let d = self.dim;
        let sd = self.noise / (d as f64).sqrt();
        let u = unit_vector(d, rng);
        let mut f_vid = Vec::with_capacity(clip.frames * n * d);
        for bx in &region.frame_boxes {
            let mut frac: Vec<f64> = (0..n)
                .map(|c| {
                    let (y0, x0) = ((c / gw) * patch, (c % gw) * patch);
                    bx.overlap(x0, y0, x0 + patch, y0 + patch) as f64 / (patch * patch) as f64
                })
                .collect();
            if self.corruption > 0.0 {
                let chosen: Vec<usize> = (0..n).filter(|_| rng.random_bool(self.corruption.min(1.0))).collect();
                let mut vals: Vec<f64> = chosen.iter().map(|&c| frac[c]).collect();
                vals.shuffle(rng);
                for (&c, v) in chosen.iter().zip(vals) {
                    frac[c] = v;
                }
            }
            for f in frac {
                let mut e: Vec<f64> = (0..d).map(|_| sd * normal(rng)).collect();
                let along: f64 = e.iter().zip(&u).map(|(a, b)| a * b).sum();
                for (x, ui) in e.iter_mut().zip(&u) {
                    *x += (f - along) * ui;
                }
                f_vid.extend(e);
            }
        }
        let f_aud = (0..n)
            .flat_map(|_| {
                u.iter()
                    .map(|&ui| ui + sd * normal(rng))
                    .collect::<Vec<_>>()
            })
            .collect();
        LocFeatures::new(clip.frames, n, d, f_vid, f_aud)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedLocalizerConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Softmax temperature of the smooth max over cells.
    pub pool_temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnedLocalizerConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: 32,
            pool_temperature: 0.1,
            steps: 300,
            batch: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Patch-wise visual and audio encoders trained for audio-visual
/// correspondence and then frozen.
///
/// A clip/audio pair scores `τ·logsumexp_i(v_i·â / τ)` over all visual cells
/// `v_i`, with `â` the L2-normalized audio embedding; pairs are contrasted
/// within a batch. At inference each visual row is `â` scaled by the cell's
/// match weight `exp((v_i·â − max_j v_j·â) / τ)` and every audio row is `â`.
#[derive(Clone, Debug)]
pub struct LearnedLocalizer {
    pub config: LearnedLocalizerConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    ids: LearnedIds,
}

#[derive(Clone, Debug)]
struct LearnedIds {
    v1: (usize, usize),
    v2: (usize, usize),
    a1: (usize, usize),
    a2: (usize, usize),
}

/// Symmetric cross-entropy over a square score matrix whose diagonal holds
/// the positives; returns the value and `∂/∂S`.
fn symmetric_nce(s: &Tensor) -> (f64, Tensor) {
    let k = s.rows();
    let st = s.transpose2();
    let scale = 0.5 / k as f64;
    let mut value = 0.0;
    let mut g = Tensor::zeros(&[k, k]);
    for i in 0..k {
        let row = log_softmax(s.row(i));
        let col = log_softmax(st.row(i));
        value -= scale * (row[i] + col[i]);
        for j in 0..k {
            let t = if i == j { 1.0 } else { 0.0 };
            g.data_mut()[i * k + j] += scale * (row[j].exp() - t);
            g.data_mut()[j * k + i] += scale * (col[j].exp() - t);
        }
    }
    (value, g)
}

impl LearnedLocalizer {
    pub fn init(config: LearnedLocalizerConfig, model: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        model.validate()?;
        let mut p = ParamStore::new();
        let (h, d) = (config.hidden, config.dim);
        let dense = |p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut dyn rand::RngCore| {
            let w = p.push_normal(format!("{name}.w"), &[i, o], 1.0 / (i as f64).sqrt(), rng);
            let b = p.push(format!("{name}.b"), Tensor::zeros(&[o]));
            (w, b)
        };
        let ids = LearnedIds {
            v1: dense(&mut p, "loc.video1", model.video_token_dim(), h, rng),
            v2: dense(&mut p, "loc.video2", h, d, rng),
            a1: dense(&mut p, "loc.audio1", model.audio_token_dim(), h, rng),
            a2: dense(&mut p, "loc.audio2", h, d, rng),
        };
        Ok(Self {
            config,
            model,
            params: p,
            ids,
        })
    }

    fn lin(&self, g: &mut Graph, b: Binder, x: Var, ids: (usize, usize)) -> Result<Var> {
        let w = b.var(g, ids.0);
        let bias = b.var(g, ids.1);
        g.linear(x, w, Some(bias))
    }

    /// Visual cell features `[B·T·N, dim]`.
    fn video_cells(&self, g: &mut Graph, b: Binder, pixels: Var) -> Result<Var> {
        let h = self.lin(g, b, pixels, self.ids.v1)?;
        let h = g.gelu(h);
        self.lin(g, b, h, self.ids.v2)
    }

    /// Normalized audio embeddings `[B, dim]`.
    fn audio_embed(&self, g: &mut Graph, b: Binder, patches: Var) -> Result<Var> {
        let h = self.lin(g, b, patches, self.ids.a1)?;
        let h = g.gelu(h);
        let h = g.mean_groups(h, self.model.audio_tokens())?;
        let a = self.lin(g, b, h, self.ids.a2)?;
        g.l2_normalize_rows(a)
    }

    fn inputs(&self, clips: &[&VideoClip], specs: &[&LogMelSpec]) -> Result<(Tensor, Tensor)> {
        let cells = self.model.video_tokens();
        let vd = self.model.video_token_dim();
        let mut v = Vec::with_capacity(clips.len() * cells * vd);
        for c in clips {
            v.extend(patchify(c, self.model.patch)?.data);
        }
        let mut a = Vec::new();
        for s in specs {
            a.extend(audio_patches(s, &self.model)?);
        }
        Ok((
            Tensor::new(vec![clips.len() * cells, vd], v)?,
            Tensor::new(vec![specs.len() * self.model.audio_tokens(), self.model.audio_token_dim()], a)?,
        ))
    }

    /// One contrastive step on a batch of matched pairs; returns the loss.
    pub fn train_step(&mut self, opt: &mut Sgd, clips: &[&VideoClip], specs: &[&LogMelSpec], lr: f64) -> Result<f64> {
        let bsz = clips.len();
        ensure!(bsz >= 2 && specs.len() == bsz, InvalidArgument, "need at least two matched pairs");
        let (vin, ain) = self.inputs(clips, specs)?;
        let mut g = Graph::new();
        let b = Binder::train(&self.params);
        let (vx, ax) = (g.input(vin), g.input(ain));
        let v = self.video_cells(&mut g, b, vx)?;
        let a = self.audio_embed(&mut g, b, ax)?;
        let tau = self.config.pool_temperature;
        // [B_audio, B_video·cells] → [B_audio·B_video, cells]
        let m = g.matmul(a, v, true)?;
        let m = g.scale(m, 1.0 / tau);
        let m = g.reshape(m, vec![bsz * bsz, self.model.video_tokens()])?;
        let lse = g.logsumexp_rows(m);
        let s = g.scale(lse, tau);
        let scores = g.value(s).clone().reshape(vec![bsz, bsz])?;
        let (value, grad) = symmetric_nce(&scores.map(|x| x / tau));
        let loss = g.external(&[s], value, vec![grad.map(|x| x / tau)])?;
        let grads = g.backward(loss);
        opt.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    /// Trains on `(clip, spectrogram)` pairs drawn from `corpus`.
    pub fn pretrain(&mut self, corpus: &[(&VideoClip, &LogMelSpec)], rng: &mut impl Rng) -> Result<Vec<f64>> {
        ensure!(corpus.len() >= self.config.batch, InvalidArgument, "corpus smaller than one batch");
        let mut opt = Sgd::new(
            SgdConfig {
                lr: self.config.lr,
                momentum: 0.9,
                weight_decay: 1e-4,
                clip_norm: 5.0,
            },
            &self.params,
        );
        let mut losses = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let idx = rand::seq::index::sample(rng, corpus.len(), self.config.batch);
            let clips: Vec<&VideoClip> = idx.iter().map(|i| corpus[i].0).collect();
            let specs: Vec<&LogMelSpec> = idx.iter().map(|i| corpus[i].1).collect();
            let lr = super::optim::cosine_lr(self.config.lr, step, self.config.steps);
            losses.push(self.train_step(&mut opt, &clips, &specs, lr)?);
        }
        Ok(losses)
    }

    pub fn localize(&self, clip: &VideoClip, spec: &LogMelSpec) -> Result<LocFeatures> {
        let (vin, ain) = self.inputs(&[clip], &[spec])?;
        let mut g = Graph::new();
        let b = Binder::frozen(&self.params);
        let (vx, ax) = (g.input(vin), g.input(ain));
        let v = self.video_cells(&mut g, b, vx)?;
        let a = self.audio_embed(&mut g, b, ax)?;
        let (vv, av) = (g.value(v), g.value(a));
        let d = self.config.dim;
        let n = self.model.tokens_per_frame();
        let a = av.row(0);
        let tau = self.config.pool_temperature;
        let mut f_vid = Vec::with_capacity(vv.data().len());
        for frame in vv.data().chunks(n * d) {
            let scores: Vec<f64> = frame
                .chunks(d)
                .map(|v| v.iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for s in scores {
                let w = ((s - top) / tau).exp();
                f_vid.extend(a.iter().map(|x| w * x));
            }
        }
        let f_aud = a.repeat(n);
        LocFeatures::new(clip.frames, n, d, f_vid, f_aud)
    }
}

/// Frozen localizer used during semi-supervised training.
#[derive(Clone, Debug)]
pub enum Localizer {
    Oracle(OracleLocalizer),
    Learned(Box<LearnedLocalizer>),
}

impl Localizer {
    pub fn localize(
        &self,
        clip: &VideoClip,
        spec: &LogMelSpec,
        region: Option<&SourceRegion>,
        patch: usize,
        rng: &mut impl Rng,
    ) -> Result<LocFeatures> {
        match self {
            Localizer::Oracle(o) => {
                let region = region.ok_or_else(|| {
                    Error::InvalidArgument("oracle localizer needs the sample's source region".into())
                })?;
                o.localize(clip, region, patch, rng)
            }
            Localizer::Learned(l) => l.localize(clip, spec),
        }
    }

    /// Checksum of any trainable state; constant for the oracle.
    pub fn checksum(&self) -> u64 {
        match self {
            Localizer::Oracle(_) => 0,
            Localizer::Learned(l) => l.params.checksum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::aslmask::{LocalizationMap, Normalization};
    use crate::synthdata::BoxPx;

    fn clip_with_box() -> (VideoClip, SourceRegion) {
        let clip = VideoClip::filled(4, 32, 32, 3, 0.2);
        let boxes = (0..4)
            .map(|t| BoxPx {
                x0: 3 + 5 * t as u32,
                y0: 10,
                x1: 11 + 5 * t as u32,
                y1: 18,
            })
            .collect();
        (clip, SourceRegion { frame_boxes: boxes })
    }

    #[test]
    fn noiseless_oracle_peaks_in_box() {
        let (clip, region) = clip_with_box();
        let o = OracleLocalizer { noise: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = o.localize(&clip, &region, 8, &mut rng).unwrap();
        let loc = LocalizationMap::compute(&f, (4, 4), Normalization::Frame, 1e-3).unwrap();
        for t in 0..4 {
            let row = loc.frame(t);
            let best = (0..16).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let (y0, x0) = ((best / 4) * 8, (best % 4) * 8);
            assert!(region.frame_boxes[t].overlap(x0, y0, x0 + 8, y0 + 8) > 0, "frame {t}");
        }
    }

    #[test]
    fn oracle_requires_region() {
        let (clip, _) = clip_with_box();
        let spec = LogMelSpec {
            mels: 64,
            steps: 60,
            values: vec![0.0; 64 * 60],
            floor: 1e-10,
        };
        let loc = Localizer::Oracle(OracleLocalizer::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(loc.localize(&clip, &spec, None, 8, &mut rng).is_err());
    }

    #[test]
    fn nce_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::new(vec![3, 3], (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (_, g) = symmetric_nce(&s);
        let n = crate::autodiff::numerical_gradient(s.data(), 1e-6, |d| {
            symmetric_nce(&Tensor::new(vec![3, 3], d.to_vec()).unwrap()).0
        });
        assert!(crate::autodiff::max_relative_error(g.data(), &n, 1e-6) < 1e-5);
    }
}
