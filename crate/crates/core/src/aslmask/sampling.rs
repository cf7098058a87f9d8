use rand::Rng;

use crate::error::{ensure, Result};

/// Sequential weighted draws without replacement. Each draw picks index `i`
/// with probability `w_i / Σ remaining`. Returns indices in draw order.
pub fn sample_without_replacement(weights: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = weights.len();
    ensure!(k >= 1 && k <= n, InvalidArgument, "cannot draw {k} of {n} items");
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(crate::Error::InvalidArgument(format!(
            "weight {i} is {}, weights must be positive",
            weights[i]
        )));
    }
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            pick = Some(i);
            if r < wi {
                break;
            }
            r -= wi;
        }
        let i = pick.expect("at least one remaining weight");
        out.push(i);
        w[i] = 0.0;
    }
    Ok(out)
}

/// Exact inclusion probabilities of sequential sampling, by dynamic
/// programming over draw-set bitmasks. Practical for `n ≤ 20`.
pub fn inclusion_probabilities(weights: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = weights.len();
    ensure!(n <= 20, InvalidArgument, "exact inclusion limited to 20 items, got {n}");
    ensure!(k <= n, InvalidArgument, "cannot draw {k} of {n} items");
    ensure!(weights.iter().all(|w| *w > 0.0), InvalidArgument, "weights must be positive");
    let total: f64 = weights.iter().sum();
    let mut p = vec![0.0; 1 << n];
    let mut mass = vec![0.0; 1 << n];
    p[0] = 1.0;
    let mut incl = vec![0.0; n];
    for s in 0usize..1 << n {
        let size = s.count_ones() as usize;
        if size > k || p[s] == 0.0 {
            continue;
        }
        if size == k {
            for (i, v) in incl.iter_mut().enumerate() {
                if s >> i & 1 == 1 {
                    *v += p[s];
                }
            }
            continue;
        }
        let remaining = total - mass[s];
        for i in 0..n {
            if s >> i & 1 == 0 {
                let t = s | 1 << i;
                p[t] += p[s] * weights[i] / remaining;
                mass[t] = mass[s] + weights[i];
            }
        }
    }
    Ok(incl)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Brute-force enumeration of ordered draw sequences.
    fn enumerate(weights: &[f64], k: usize) -> Vec<f64> {
        fn go(w: &[f64], k: usize, taken: &mut Vec<usize>, prob: f64, out: &mut [f64]) {
            if taken.len() == k {
                for &i in taken.iter() {
                    out[i] += prob;
                }
                return;
            }
            let rem: f64 = (0..w.len()).filter(|i| !taken.contains(i)).map(|i| w[i]).sum();
            for i in 0..w.len() {
                if !taken.contains(&i) {
                    taken.push(i);
                    go(w, k, taken, prob * w[i] / rem, out);
                    taken.pop();
                }
            }
        }
        let mut out = vec![0.0; weights.len()];
        go(weights, k, &mut Vec::new(), 1.0, &mut out);
        out
    }

    #[test]
    fn full_draw_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut s = sample_without_replacement(&[1.0, 2.0, 3.0], 3, &mut rng).unwrap();
            s.sort();
            assert_eq!(s, vec![0, 1, 2]);
        }
    }

    #[test]
    fn hand_case_exact() {
        let p = inclusion_probabilities(&[1.0, 2.0, 3.0], 2).unwrap();
        for (a, b) in p.iter().zip([5.0 / 12.0, 11.0 / 15.0, 17.0 / 20.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
            for k in 1..=n {
                let a = inclusion_probabilities(&w, k).unwrap();
                let b = enumerate(&w, k);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-12, "n={n} k={k}");
                }
            }
        }
    }

    #[test]
    fn uniform_single_draw_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let trials = 100_000;
        for _ in 0..trials {
            counts[sample_without_replacement(&[1.0; 3], 1, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_without_replacement(&[1.0, 2.0], 3, &mut rng).is_err());
        assert!(sample_without_replacement(&[1.0, 0.0], 1, &mut rng).is_err());
        assert!(sample_without_replacement(&[1.0, -2.0], 1, &mut rng).is_err());
        assert!(sample_without_replacement(&[1.0], 0, &mut rng).is_err());
    }

    #[test]
    fn raising_a_weight_never_lowers_its_inclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..2.0)).collect();
            let i = rng.random_range(0..5);
            let k = rng.random_range(1..=5);
            let mut w2 = w.clone();
            w2[i] *= 1.5;
            let (a, b) = (enumerate(&w, k)[i], enumerate(&w2, k)[i]);
            assert!(b >= a - 1e-12);
        }
    }
}
