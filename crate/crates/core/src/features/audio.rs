//! Log mel-filterbank features and SpecAugment.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::synthdata::Waveform;

/// `[M, L]` log-power matrix, mel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpec {
    pub mels: usize,
    pub steps: usize,
    pub values: Vec<f64>,
    /// Power floor applied before the logarithm.
    pub floor: f64,
}

impl LogMelSpec {
    pub fn get(&self, m: usize, l: usize) -> f64 {
        self.values[m * self.steps + l]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Keeps the first `steps` time steps.
    pub fn truncate_steps(&self, steps: usize) -> Result<Self> {
        ensure!(steps >= 1 && steps <= self.steps, InvalidArgument, "cannot keep {steps} of {} steps", self.steps);
        let values = self
            .values
            .chunks(self.steps)
            .flat_map(|row| row[..steps].iter().copied())
            .collect();
        Ok(Self {
            mels: self.mels,
            steps,
            values,
            floor: self.floor,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogMelParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for LogMelParams {
    fn default() -> Self {
        Self {
            n_fft: 256,
            hop: 128,
            n_mels: 64,
            floor: 1e-10,
        }
    }
}

impl LogMelParams {
    pub fn steps_for(&self, samples: usize) -> usize {
        1 + (samples - self.n_fft) / self.hop
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters, HTK scale,
/// spanning 0 to Nyquist.
pub fn mel_centers(n_mels: usize, sample_rate: f64) -> Vec<f64> {
    let top = hz_to_mel(sample_rate / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `[n_mels][n_fft/2 + 1]` triangular filter weights, peak 1 at each centre.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Hann-windowed power STFT, HTK mel filterbank, natural log of
/// `max(power, floor)`. No padding: `L = 1 + ⌊(S − n_fft) / hop⌋`.
pub fn logmel(w: &Waveform, params: &LogMelParams) -> Result<LogMelSpec> {
    let s = w.samples.len();
    ensure!(params.n_fft >= 2 && params.hop >= 1, Config, "n_fft must be >= 2 and hop >= 1");
    ensure!(
        s >= params.n_fft,
        InvalidArgument,
        "waveform has {s} samples, fewer than n_fft = {}",
        params.n_fft
    );
    let steps = params.steps_for(s);
    let bins = params.n_fft / 2 + 1;
    let fb = mel_filterbank(params.n_mels, params.n_fft, w.sample_rate as f64);
    let window = hann(params.n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    let mut values = vec![0.0; params.n_mels * steps];
    let mut power = vec![0.0; bins];
    let log_floor = params.floor.ln();
    for l in 0..steps {
        let off = l * params.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[off + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filt) in fb.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            values[m * steps + l] = if e > params.floor { e.ln() } else { log_floor };
        }
    }
    Ok(LogMelSpec {
        mels: params.n_mels,
        steps,
        values,
        floor: params.floor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugParams {
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    /// Widest time mask, as a fraction of `L`.
    pub max_time_frac: f64,
    /// Widest frequency mask, as a fraction of `M`.
    pub max_freq_frac: f64,
}

impl Default for SpecAugParams {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            n_freq_masks: 2,
            max_time_frac: 0.15,
            max_freq_frac: 0.15,
        }
    }
}

/// Concrete mask bands: `(start, width)` along time and along mel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpecMask {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

impl SpecMask {
    pub fn covers(&self, m: usize, l: usize) -> bool {
        self.time.iter().any(|&(s, w)| (s..s + w).contains(&l)) || self.freq.iter().any(|&(s, w)| (s..s + w).contains(&m))
    }

    pub fn sample(mels: usize, steps: usize, params: &SpecAugParams, rng: &mut impl Rng) -> Self {
        let max_t = ((params.max_time_frac * steps as f64).floor() as usize).min(steps.saturating_sub(1));
        let max_f = ((params.max_freq_frac * mels as f64).floor() as usize).min(mels.saturating_sub(1));
        let band = |dim: usize, max_w: usize, rng: &mut dyn rand::RngCore| {
            let w = rng.random_range(0..=max_w);
            let s = rng.random_range(0..=dim - w);
            (s, w)
        };
        let time = (0..params.n_time_masks).map(|_| band(steps, max_t, rng)).collect();
        let freq = (0..params.n_freq_masks).map(|_| band(mels, max_f, rng)).collect();
        Self { time, freq }
    }

    /// Sets masked cells to the mean of the input spectrogram.
    pub fn apply(&self, spec: &LogMelSpec) -> LogMelSpec {
        let mean = spec.mean();
        let mut out = spec.clone();
        for m in 0..spec.mels {
            for l in 0..spec.steps {
                if self.covers(m, l) {
                    out.values[m * spec.steps + l] = mean;
                }
            }
        }
        out
    }
}

pub fn specaugment(spec: &LogMelSpec, rng: &mut impl Rng, params: &SpecAugParams) -> LogMelSpec {
    SpecMask::sample(spec.mels, spec.steps, params, rng).apply(spec)
}
