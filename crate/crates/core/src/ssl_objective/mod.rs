//! Supervised, consistency, mixup-consistency and contrastive losses.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the student-side inputs (logits or embeddings).

mod contrastive;
mod threshold;

use serde::{Deserialize, Serialize};

pub use contrastive::{contrastive_loss, ContrastiveOutput};
pub use threshold::{ThresholdMode, ThresholdState};

use crate::autodiff::{log_softmax, softmax, Tensor};
use crate::error::{ensure, Error, Result};
use threshold::argmax;

/// Default contrastive temperature.
pub const TEMPERATURE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    /// Gradient with respect to the logits.
    pub grad: Tensor,
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn supervised_loss(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let (b, c) = (logits.rows(), logits.cols());
    ensure!(b >= 1 && labels.len() == b, Shape, "{} labels for {b} logit rows", labels.len());
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {y} outside 0..{c}")));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[b, c]);
    for (r, &y) in labels.iter().enumerate() {
        let ls = log_softmax(logits.row(r));
        value -= ls[y];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (ls[j].exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(LossGrad { value: value / b as f64, grad })
}

/// Gated consistency between teacher probabilities and student logits.
/// Rows whose teacher max-probability reaches the threshold of their argmax
/// class contribute `H(target, softmax(logits))`; the mean runs over all rows.
#[derive(Clone, Debug)]
pub struct ConsistencyOutput {
    pub loss: LossGrad,
    pub pass: Vec<bool>,
}

impl ConsistencyOutput {
    pub fn pass_rate(&self) -> f64 {
        self.pass.iter().filter(|&&p| p).count() as f64 / self.pass.len().max(1) as f64
    }
}

pub fn consistency_loss(
    teacher_probs: &Tensor,
    student_logits: &Tensor,
    thresholds: &[f64],
    hard: bool,
) -> Result<ConsistencyOutput> {
    ensure!(
        teacher_probs.shape() == student_logits.shape(),
        Shape,
        "teacher {:?} vs student {:?}",
        teacher_probs.shape(),
        student_logits.shape()
    );
    let (b, c) = (teacher_probs.rows(), teacher_probs.cols());
    ensure!(thresholds.len() == c, Shape, "{} thresholds for {c} classes", thresholds.len());
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[b, c]);
    let mut pass = vec![false; b];
    for r in 0..b {
        let q = teacher_probs.row(r);
        let (cls, top) = argmax(q);
        if top < thresholds[cls] {
            continue;
        }
        pass[r] = true;
        let ls = log_softmax(student_logits.row(r));
        let target: Vec<f64> = if hard {
            (0..c).map(|j| if j == cls { 1.0 } else { 0.0 }).collect()
        } else {
            q.to_vec()
        };
        let tsum: f64 = target.iter().sum();
        for j in 0..c {
            value -= target[j] * ls[j];
            grad.row_mut(r)[j] = (tsum * ls[j].exp() - target[j]) / b as f64;
        }
    }
    Ok(ConsistencyOutput {
        loss: LossGrad { value: value / b as f64, grad },
        pass,
    })
}

/// Mean over rows of `1(max ȳ ≥ τ)·‖ȳ − ŷ‖²` on probabilities.
pub fn mix_consistency_value(y_bar: &Tensor, y_hat: &Tensor, tau: f64) -> Result<f64> {
    ensure!(y_bar.shape() == y_hat.shape(), Shape, "{:?} vs {:?}", y_bar.shape(), y_hat.shape());
    let b = y_bar.rows();
    let mut total = 0.0;
    for r in 0..b {
        if argmax(y_bar.row(r)).1 >= tau {
            total += y_bar.row(r).iter().zip(y_hat.row(r)).map(|(a, p)| (a - p).powi(2)).sum::<f64>();
        }
    }
    Ok(total / b as f64)
}

/// [`mix_consistency_value`] with `ŷ = softmax(logits)`, plus the gradient
/// with respect to the logits.
pub fn mix_consistency_loss(y_bar: &Tensor, student_logits: &Tensor, tau: f64) -> Result<LossGrad> {
    ensure!(
        y_bar.shape() == student_logits.shape(),
        Shape,
        "{:?} vs {:?}",
        y_bar.shape(),
        student_logits.shape()
    );
    let (b, c) = (y_bar.rows(), y_bar.cols());
    let mut probs = Tensor::zeros(&[b, c]);
    let mut grad = Tensor::zeros(&[b, c]);
    for r in 0..b {
        let p = softmax(student_logits.row(r));
        probs.row_mut(r).copy_from_slice(&p);
        if argmax(y_bar.row(r)).1 < tau {
            continue;
        }
        let g: Vec<f64> = (0..c).map(|j| -2.0 * (y_bar.at2(r, j) - p[j]) / b as f64).collect();
        let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        for j in 0..c {
            grad.row_mut(r)[j] = p[j] * (g[j] - dot);
        }
    }
    Ok(LossGrad {
        value: mix_consistency_value(y_bar, &probs, tau)?,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 2.0,
            gamma2: 2.0,
            gamma3: 0.2,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        gamma1: 0.0,
        gamma2: 0.0,
        gamma3: 0.0,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l_mix: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub pass_rate: f64,
    pub thresholds: Vec<f64>,
}

pub fn total_loss(l_s: f64, l_u: f64, l_mix: f64, l_c: f64, w: &LossWeights) -> Result<LossReport> {
    for (component, v) in [("L_s", l_s), ("L_u", l_u), ("L_mix", l_mix), ("L_c", l_c)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component });
        }
    }
    Ok(LossReport {
        l_s,
        l_u,
        l_mix,
        l_c,
        l_total: l_s + w.gamma1 * l_u + w.gamma2 * l_mix + w.gamma3 * l_c,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{max_relative_error, numerical_gradient};

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn rand_probs(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let mut t = rand_tensor(rng, r, c, 3.0);
        for i in 0..r {
            let p = softmax(t.row(i));
            t.row_mut(i).copy_from_slice(&p);
        }
        t
    }

    fn fd(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        numerical_gradient(x.data(), 1e-6, |d| f(&Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap()))
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let l = supervised_loss(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let sat = Tensor::from_rows(&[vec![20.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(supervised_loss(&sat, &[0]).unwrap().value <= 1e-6);
        assert!(supervised_loss(&sat, &[4]).is_err());
    }

    #[test]
    fn ce_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = rand_tensor(&mut rng, 4, 8, 2.0);
        let y = [1, 7, 0, 3];
        let g = supervised_loss(&z, &y).unwrap().grad;
        let n = fd(&z, |t| supervised_loss(t, &y).unwrap().value);
        assert!(max_relative_error(g.data(), &n, 1e-5) < 1e-5);
    }

    #[test]
    fn consistency_cases() {
        let q = Tensor::from_rows(&[vec![0.4, 0.3, 0.3], vec![0.5, 0.25, 0.25]]).unwrap();
        let z = Tensor::zeros(&[2, 3]);
        let out = consistency_loss(&q, &z, &[0.9; 3], true).unwrap();
        assert_eq!((out.loss.value, out.pass_rate()), (0.0, 0.0));

        let one_hot = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![20.0, 0.0, 0.0]]).unwrap();
        assert!(consistency_loss(&one_hot, &z, &[0.5; 3], true).unwrap().loss.value <= 1e-6);

        // row 0 passes with pseudo-label 1; row 1 is gated out
        let q = Tensor::from_rows(&[vec![0.1, 0.8, 0.1], vec![0.4, 0.35, 0.25]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let out = consistency_loss(&q, &z, &[0.5, 0.5, 0.5], true).unwrap();
        let lse = (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
        let want = (lse - (-1.0)) / 2.0;
        assert!((out.loss.value - want).abs() < 1e-9);
        assert_eq!(out.pass, vec![true, false]);
    }

    #[test]
    fn consistency_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_probs(&mut rng, 4, 8);
        let z = rand_tensor(&mut rng, 4, 8, 2.0);
        let th = vec![0.1; 8];
        for hard in [true, false] {
            let g = consistency_loss(&q, &z, &th, hard).unwrap().loss.grad;
            let n = fd(&z, |t| consistency_loss(&q, t, &th, hard).unwrap().loss.value);
            assert!(max_relative_error(g.data(), &n, 1e-5) < 1e-5);
        }
    }

    #[test]
    fn raising_tau_never_passes_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::zeros(&[16, 4]);
        for _ in 0..200 {
            let q = rand_probs(&mut rng, 16, 4);
            let state = ThresholdState {
                tau_base: 0.0,
                mode: ThresholdMode::Flex,
                sigma: (0..4).map(|_| rng.random_range(0..20)).collect(),
                unused: rng.random_range(0..20),
            };
            let mut last = usize::MAX;
            for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let s = ThresholdState { tau_base: tau, ..state.clone() };
                let passed = consistency_loss(&q, &z, &s.thresholds(), true).unwrap().pass.iter().filter(|&&p| p).count();
                assert!(passed <= last);
                last = passed;
            }
        }
    }

    #[test]
    fn mix_consistency_cases() {
        let y = Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap();
        assert_eq!(mix_consistency_value(&y, &y, 0.3).unwrap(), 0.0);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mix_consistency_value(&a, &b, 0.3).unwrap(), 2.0);
        let u = Tensor::full(&[1, 4], 0.25);
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(mix_consistency_value(&u, &p, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn mix_consistency_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_probs(&mut rng, 4, 8);
        let z = rand_tensor(&mut rng, 4, 8, 2.0);
        let g = mix_consistency_loss(&y, &z, 0.0).unwrap().grad;
        let n = fd(&z, |t| mix_consistency_loss(&y, t, 0.0).unwrap().value);
        assert!(max_relative_error(g.data(), &n, 1e-5) < 1e-5);
    }

    #[test]
    fn contrastive_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tensor(&mut rng, 1, 8, 1.0);
        let w = rand_tensor(&mut rng, 1, 8, 1.0);
        assert_eq!(contrastive_loss(&z, &w, TEMPERATURE).unwrap().value, 0.0);
        for k in [2, 4, 8] {
            let same = Tensor::full(&[k, 8], 0.3);
            let v = contrastive_loss(&same, &same, TEMPERATURE).unwrap().value;
            assert!((v - (k as f64).ln()).abs() < 1e-9);
        }
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        match contrastive_loss(&zero, &zero.map(|x| x + 1.0), TEMPERATURE) {
            Err(Error::ZeroNorm { matrix: "video", row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn contrastive_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (v, a) = (rand_tensor(&mut rng, 4, 8, 1.0), rand_tensor(&mut rng, 4, 8, 1.0));
        let base = contrastive_loss(&v, &a, TEMPERATURE).unwrap().value;
        let mut v2 = v.clone();
        v2.row_mut(2).iter_mut().for_each(|x| *x *= 7.5);
        let mut a2 = a.clone();
        a2.row_mut(0).iter_mut().for_each(|x| *x *= 0.01);
        let scaled = contrastive_loss(&v2, &a2, TEMPERATURE).unwrap().value;
        assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        assert!(base >= 0.0);
    }

    #[test]
    fn contrastive_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (v, a) = (rand_tensor(&mut rng, 4, 8, 1.0), rand_tensor(&mut rng, 4, 8, 1.0));
        // larger temperature keeps the finite-difference curvature error small
        let out = contrastive_loss(&v, &a, 0.5).unwrap();
        let nv = fd(&v, |t| contrastive_loss(t, &a, 0.5).unwrap().value);
        let na = fd(&a, |t| contrastive_loss(&v, t, 0.5).unwrap().value);
        assert!(max_relative_error(out.grad_vid.data(), &nv, 1e-5) < 1e-5);
        assert!(max_relative_error(out.grad_aud.data(), &na, 1e-5) < 1e-5);
        let out = contrastive_loss(&v, &a, TEMPERATURE).unwrap();
        let nv = fd(&v, |t| contrastive_loss(t, &a, TEMPERATURE).unwrap().value);
        assert!(max_relative_error(out.grad_vid.data(), &nv, 1e-6) < 1e-4);
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(1.0, 0.5, 0.25, 0.1, &LossWeights::default()).unwrap();
        assert!((r.l_total - 2.52).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights::default()).unwrap().l_total, 0.0);
        assert_eq!(total_loss(0.7, 3.0, 2.0, 1.0, &LossWeights::ZERO).unwrap().l_total, 0.7);
        match total_loss(1.0, f64::NAN, 0.0, 0.0, &LossWeights::default()) {
            Err(Error::NonFinite { component: "L_u" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
