//! Token, audio and pseudo-label mixing.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::aslmask::{keep_count, BinaryTokenMask};
use crate::error::{ensure, Result};
use crate::features::{LogMelSpec, TokenGrid};

/// A mix ratio and the token keep count it implies for a given grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixRatio {
    pub lambda: f64,
    pub alpha: (f64, f64),
}

impl MixRatio {
    pub fn fixed(lambda: f64) -> Self {
        Self { lambda, alpha: (f64::NAN, f64::NAN) }
    }

    pub fn keep_tokens(&self, tokens: usize) -> usize {
        keep_count(self.lambda, tokens)
    }
}

/// `λ ~ Beta(α1, α2)`, kept strictly inside `(0, 1)`.
pub fn sample_lambda(rng: &mut impl Rng, alpha1: f64, alpha2: f64) -> Result<MixRatio> {
    let beta = Beta::new(alpha1, alpha2)
        .map_err(|e| crate::Error::InvalidArgument(format!("Beta({alpha1}, {alpha2}): {e}")))?;
    let lambda = beta.sample(rng).clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    Ok(MixRatio {
        lambda,
        alpha: (alpha1, alpha2),
    })
}

/// A-tokens where the mask is 1, B-tokens elsewhere.
pub fn mix_tokens(a: &TokenGrid, b: &TokenGrid, mask: &BinaryTokenMask) -> Result<TokenGrid> {
    ensure!(a.same_shape(b), Shape, "token grids differ in shape");
    ensure!(
        mask.frames == a.frames && mask.tokens == a.tokens,
        Shape,
        "mask is {}x{}, tokens are {}x{}",
        mask.frames,
        mask.tokens,
        a.frames,
        a.tokens
    );
    let mut out = b.clone();
    let d = a.dim;
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            out.data[i * d..(i + 1) * d].copy_from_slice(&a.data[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

/// Cellwise `λ·a + (1−λ)·b`.
pub fn mix_audio(a: &LogMelSpec, b: &LogMelSpec, lambda: f64) -> Result<LogMelSpec> {
    ensure!(
        a.mels == b.mels && a.steps == b.steps,
        Shape,
        "spectrograms differ: {}x{} vs {}x{}",
        a.mels,
        a.steps,
        b.mels,
        b.steps
    );
    let mut out = a.clone();
    for (o, (x, y)) in out.values.iter_mut().zip(a.values.iter().zip(&b.values)) {
        *o = lambda * x + (1.0 - lambda) * y;
    }
    Ok(out)
}

/// `λ·ŷ_A + (1−λ)·ŷ_B` over two probability vectors.
pub fn mix_pseudo_labels(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    ensure!(a.len() == b.len(), Shape, "class counts differ: {} vs {}", a.len(), b.len());
    for (name, p) in [("first", a), ("second", b)] {
        let s: f64 = p.iter().sum();
        ensure!(
            (s - 1.0).abs() <= 1e-6 && p.iter().all(|&v| v >= 0.0),
            InvalidArgument,
            "{name} pseudo-label is not a distribution (sum {s})"
        );
    }
    Ok(a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::aslmask::build_random_mask;

    fn grid(v: f64) -> TokenGrid {
        TokenGrid {
            frames: 2,
            tokens: 16,
            dim: 3,
            grid: (4, 4),
            data: vec![v; 2 * 16 * 3],
        }
    }

    fn spec(v: f64) -> LogMelSpec {
        LogMelSpec {
            mels: 4,
            steps: 5,
            values: vec![v; 20],
            floor: 1e-10,
        }
    }

    #[test]
    fn beta_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_lambda(&mut rng, 5.0, 10.0).unwrap().lambda).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.005);
        // αβ / ((α+β)²(α+β+1))
        assert!((var - 50.0 / 3600.0).abs() < 0.002);
        assert!(xs.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(sample_lambda(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn keep_tokens_floor() {
        assert_eq!(MixRatio::fixed(0.3).keep_tokens(16), 4);
    }

    #[test]
    fn token_mixing_cases() {
        let (a, b) = (grid(1.0), grid(0.0));
        assert_eq!(mix_tokens(&a, &b, &BinaryTokenMask::ones(2, 16)).unwrap(), a);
        let zeros = BinaryTokenMask { keep: 0, data: vec![0; 32], ..BinaryTokenMask::ones(2, 16) };
        assert_eq!(mix_tokens(&a, &b, &zeros).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = build_random_mask(16, 2, 0.3, &mut rng).unwrap();
        let out = mix_tokens(&a, &b, &m).unwrap();
        for t in 0..2 {
            let mean: f64 = (0..16).map(|n| out.token(t, n)[0]).sum::<f64>() / 16.0;
            assert_eq!(mean, 4.0 / 16.0);
        }
        let mut small = grid(0.0);
        small.tokens = 8;
        assert!(mix_tokens(&a, &small, &m).is_err());
    }

    #[test]
    fn audio_mixing_cases() {
        let (a, b) = (spec(2.0), spec(0.0));
        assert_eq!(mix_audio(&a, &b, 1.0).unwrap(), a);
        assert!(mix_audio(&a, &b, 0.5).unwrap().values.iter().all(|&v| v == 1.0));
        let mut c = spec(0.0);
        c.steps = 4;
        assert!(mix_audio(&a, &c, 0.5).is_err());
    }

    #[test]
    fn pseudo_label_cases() {
        let y = mix_pseudo_labels(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(y, vec![0.5, 0.5, 0.0, 0.0]);
        let p = [0.1, 0.2, 0.7];
        assert_eq!(mix_pseudo_labels(&p, &[0.3, 0.3, 0.4], 1.0).unwrap(), p.to_vec());
        assert!(mix_pseudo_labels(&[0.5, 0.4], &[0.5, 0.5], 0.5).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn mixed_tokens_come_from_a_or_b(seed in any::<u64>(), lambda in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = grid(0.0);
            let mut b = grid(0.0);
            a.data.iter_mut().for_each(|v| *v = rng.random());
            b.data.iter_mut().for_each(|v| *v = rng.random());
            let m = build_random_mask(16, 2, lambda, &mut rng).unwrap();
            let out = mix_tokens(&a, &b, &m).unwrap();
            for i in 0..out.data.len() {
                prop_assert!(out.data[i] == a.data[i] || out.data[i] == b.data[i]);
            }
        }

        #[test]
        fn audio_mix_is_exchangeable(lambda in 0.0f64..=1.0, x in -30.0f64..5.0, y in -30.0f64..5.0) {
            let (a, b) = (spec(x), spec(y));
            let l = mix_audio(&a, &b, lambda).unwrap();
            let r = mix_audio(&b, &a, 1.0 - lambda).unwrap();
            for (p, q) in l.values.iter().zip(&r.values) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn pseudo_labels_stay_on_simplex(a in simplex(4), b in simplex(4), lambda in 0.0f64..=1.0) {
            let y = mix_pseudo_labels(&a, &b, lambda).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            let top = a.iter().chain(&b).copied().fold(0.0, f64::max);
            prop_assert!(y.iter().copied().fold(0.0, f64::max) <= top + 1e-12);
        }
    }
}
