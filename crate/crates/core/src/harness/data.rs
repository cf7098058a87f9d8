use crate::error::{ensure, Result};
use crate::features::{logmel, LogMelParams, LogMelSpec};
use crate::models::ModelConfig;
use crate::synthdata::{DatasetBundle, GenConfig, Sample, VideoClip, Waveform};

use super::config::RunConfig;

/// Number of spectrogram steps fed to the model for a clip of `frames`
/// frames: the STFT length rounded down to whole audio patches.
pub fn model_steps(gen: &GenConfig, features: &LogMelParams, frames: usize, audio_patch_steps: usize) -> usize {
    let steps = features.steps_for(gen.samples_per_clip(frames));
    steps - steps % audio_patch_steps.max(1)
}

/// Log-mel spectrogram of a waveform, truncated to `steps`.
pub fn spectrogram(w: &Waveform, features: &LogMelParams, steps: usize) -> Result<LogMelSpec> {
    logmel(w, features)?.truncate_steps(steps)
}

/// Audio of frames `[start, start + len)` of a sample.
pub fn waveform_window(gen: &GenConfig, sample: &Sample, start: usize, len: usize) -> Result<Waveform> {
    let rate = gen.sample_rate as f64 / gen.fps;
    let s0 = (start as f64 * rate).round() as usize;
    let n = gen.samples_per_clip(len);
    let w = &sample.waveform;
    ensure!(
        s0 + n <= w.samples.len(),
        InvalidArgument,
        "audio window [{s0}, {}) outside {} samples of `{}`",
        s0 + n,
        w.samples.len(),
        sample.id
    );
    Ok(Waveform {
        samples: w.samples[s0..s0 + n].to_vec(),
        sample_rate: w.sample_rate,
    })
}

/// Training splits with their spectrograms computed once.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub bundle: &'a DatasetBundle,
    pub labeled_specs: Vec<LogMelSpec>,
    pub unlabeled_specs: Vec<LogMelSpec>,
    pub model: ModelConfig,
}

impl<'a> TrainData<'a> {
    /// Computes spectrograms and fills the data-dependent model geometry and
    /// audio scaling into a copy of `cfg.model`.
    pub fn prepare(bundle: &'a DatasetBundle, cfg: &RunConfig) -> Result<Self> {
        ensure!(!bundle.labeled.is_empty(), Config, "labeled split is empty");
        let gen = &bundle.metadata.config;
        let mut model = cfg.model.clone();
        model.classes = bundle.num_classes();
        model.frames = gen.frames;
        model.height = gen.height;
        model.width = gen.width;
        model.channels = gen.channels;
        model.mels = cfg.features.n_mels;
        model.steps = model_steps(gen, &cfg.features, gen.frames, model.audio_patch.1);
        ensure!(model.steps >= 1, Config, "clips are too short for one audio patch");
        let spec = |s: &Sample| spectrogram(&s.waveform, &cfg.features, model.steps);
        let labeled_specs = bundle.labeled.iter().map(spec).collect::<Result<Vec<_>>>()?;
        let unlabeled_specs = bundle.unlabeled.iter().map(spec).collect::<Result<Vec<_>>>()?;
        let (shift, scale) = audio_stats(labeled_specs.iter().chain(&unlabeled_specs));
        model.audio_shift = shift;
        model.audio_scale = scale;
        let (shift, scale) = video_stats(bundle.labeled.iter().chain(&bundle.unlabeled).map(|s| &s.clip));
        model.video_shift = shift;
        model.video_scale = scale;
        model.validate()?;
        Ok(Self {
            bundle,
            labeled_specs,
            unlabeled_specs,
            model,
        })
    }
}

/// Mean and standard deviation over every cell of every spectrogram.
pub fn audio_stats<'s>(specs: impl Iterator<Item = &'s LogMelSpec>) -> (f64, f64) {
    moments(specs.flat_map(|s| s.values.iter().copied()))
}

/// Mean and standard deviation over every pixel of every clip.
pub fn video_stats<'s>(clips: impl Iterator<Item = &'s VideoClip>) -> (f64, f64) {
    moments(clips.flat_map(|c| c.data.iter().map(|&v| v as f64)))
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}
