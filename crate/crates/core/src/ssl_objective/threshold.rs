use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Fixed,
    #[default]
    Flex,
}

/// Per-class confidence bookkeeping for pseudo-label gating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub tau_base: f64,
    pub mode: ThresholdMode,
    /// Confident predictions per class in the current window.
    pub sigma: Vec<u64>,
    /// Samples seen in the current window whose max probability was at or
    /// below `tau_base`.
    pub unused: u64,
}

impl ThresholdState {
    pub fn new(classes: usize, tau_base: f64, mode: ThresholdMode) -> Result<Self> {
        ensure!(classes >= 1, Config, "need at least one class");
        ensure!(tau_base > 0.0 && tau_base <= 1.0, Config, "tau_base {tau_base} outside (0, 1]");
        Ok(Self {
            tau_base,
            mode,
            sigma: vec![0; classes],
            unused: 0,
        })
    }

    /// Effective per-class thresholds. In flexible mode
    /// `τ_c = τ_base · σ_c / max(max σ, unused)`, or 0 when that denominator is 0.
    pub fn thresholds(&self) -> Vec<f64> {
        match self.mode {
            ThresholdMode::Fixed => vec![self.tau_base; self.sigma.len()],
            ThresholdMode::Flex => {
                let denom = self.sigma.iter().copied().max().unwrap_or(0).max(self.unused);
                if denom == 0 {
                    return vec![0.0; self.sigma.len()];
                }
                self.sigma
                    .iter()
                    .map(|&s| self.tau_base * (s as f64 / denom as f64))
                    .collect()
            }
        }
    }

    /// Accumulates confident-prediction counts from a batch of teacher rows.
    pub fn update(&mut self, teacher_probs: &Tensor) -> Result<()> {
        ensure!(
            teacher_probs.cols() == self.sigma.len(),
            Shape,
            "teacher rows have {} classes, state tracks {}",
            teacher_probs.cols(),
            self.sigma.len()
        );
        for r in 0..teacher_probs.rows() {
            let (c, p) = argmax(teacher_probs.row(r));
            if p > self.tau_base {
                self.sigma[c] += 1;
            } else {
                self.unused += 1;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.sigma.iter_mut().for_each(|s| *s = 0);
        self.unused = 0;
    }

    pub fn seen(&self) -> u64 {
        self.sigma.iter().sum::<u64>() + self.unused
    }
}

pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}
