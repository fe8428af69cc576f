//! CTC alignment loss: `-log p(x | frames)` marginalized over all valid
//! blank-augmented monotonic alignments, computed by the forward (alpha)
//! dynamic program in log space. The gradient is the standard alpha-beta
//! posterior, so the loss is differentiable through the per-frame
//! log-probabilities.
//!
//! Convention: input is `[T, V+1]` log-probabilities with the blank as the
//! LAST column.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_ZERO: f64 = f64::NEG_INFINITY;

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    log_sum_exp2(log_sum_exp2(a, b), c)
}

/// Minimum number of frames needed to emit `targets`: one per label plus a
/// mandatory blank between equal neighbours.
pub fn min_ctc_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

/// Blank-interleaved expansion `[b, t1, b, t2, ..., b]`.
fn expand(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut l = Vec::with_capacity(2 * targets.len() + 1);
    l.push(blank);
    for &t in targets {
        l.push(t);
        l.push(blank);
    }
    l
}

/// `-log p(targets | log_probs)` via the forward algorithm.
///
/// `log_probs` is `[T, V+1]` (blank last); `targets` are token ids `< V`.
/// Errors when `T` is smaller than the minimum alignable length.
pub fn ctc_loss(log_probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if log_probs.shape().len() != 2 {
        return Err(Error::Invalid {
            op: "ctc_loss",
            msg: format!("log_probs must be [T, V+1], got {:?}", log_probs.shape()),
        });
    }
    let t_len = log_probs.shape()[0];
    let width = log_probs.shape()[1];
    if width < 2 {
        return Err(Error::Invalid {
            op: "ctc_loss",
            msg: "need at least one symbol plus blank".into(),
        });
    }
    let blank = width - 1;
    for (pos, &tok) in targets.iter().enumerate() {
        if tok >= blank {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab: blank,
                pos,
            });
        }
    }
    let min_t = min_ctc_frames(targets);
    if t_len < min_t {
        return Err(Error::TooShort {
            op: "ctc_loss",
            len: t_len,
            min: min_t,
        });
    }

    let lp = log_probs.to_vec();
    let l = expand(targets, blank);
    let s = l.len();

    // Forward variables alpha[t][s]: log-prob of prefixes of l' consuming
    // frames 0..=t, including the emission at t.
    let mut alpha = vec![LOG_ZERO; t_len * s];
    alpha[0] = lp[blank];
    if s > 1 {
        alpha[1] = lp[l[1]];
    }
    for t in 1..t_len {
        for si in 0..s {
            let stay = alpha[(t - 1) * s + si];
            let step = if si >= 1 {
                alpha[(t - 1) * s + si - 1]
            } else {
                LOG_ZERO
            };
            let skip = if si >= 2 && l[si] != blank && l[si] != l[si - 2] {
                alpha[(t - 1) * s + si - 2]
            } else {
                LOG_ZERO
            };
            let acc = log_sum_exp3(stay, step, skip);
            alpha[t * s + si] = if acc == LOG_ZERO {
                LOG_ZERO
            } else {
                acc + lp[t * width + l[si]]
            };
        }
    }
    let mut log_p = alpha[(t_len - 1) * s + s - 1];
    if s > 1 {
        log_p = log_sum_exp2(log_p, alpha[(t_len - 1) * s + s - 2]);
    }
    if log_p == LOG_ZERO {
        return Err(Error::Invalid {
            op: "ctc_loss",
            msg: "no valid alignment has nonzero probability".into(),
        });
    }

    // Backward variables beta[t][s]: completion log-prob from (t, s)
    // excluding the emission at t.
    let mut beta = vec![LOG_ZERO; t_len * s];
    beta[(t_len - 1) * s + s - 1] = 0.0;
    if s > 1 {
        beta[(t_len - 1) * s + s - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for si in 0..s {
            let stay = lp[(t + 1) * width + l[si]] + beta[(t + 1) * s + si];
            let step = if si + 1 < s {
                lp[(t + 1) * width + l[si + 1]] + beta[(t + 1) * s + si + 1]
            } else {
                LOG_ZERO
            };
            let skip = if si + 2 < s && l[si + 2] != blank && l[si + 2] != l[si] {
                lp[(t + 1) * width + l[si + 2]] + beta[(t + 1) * s + si + 2]
            } else {
                LOG_ZERO
            };
            beta[t * s + si] = log_sum_exp3(stay, step, skip);
        }
    }

    // d(-log p)/d lp[t][k] = -sum_{s: l[s]=k} exp(alpha[t][s] + beta[t][s] - log p)
    let mut grad = vec![0.0; t_len * width];
    for t in 0..t_len {
        for (si, &sym) in l.iter().enumerate() {
            let a = alpha[t * s + si];
            let b = beta[t * s + si];
            if a != LOG_ZERO && b != LOG_ZERO {
                grad[t * width + sym] -= (a + b - log_p).exp();
            }
        }
    }

    let parent = log_probs.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![-log_p],
        "ctc_loss",
        vec![parent.clone()],
        Box::new(move |g, sink| {
            if let Some(gp) = sink.slot(&parent) {
                for i in 0..grad.len() {
                    gp[i] += g[0] * grad[i];
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Exhaustive oracle: sum the probability of every frame labelling whose
    /// collapse (merge repeats, drop blanks) equals the target.
    fn brute_force_ctc(log_probs: &[f64], t_len: usize, width: usize, targets: &[usize]) -> f64 {
        let blank = width - 1;
        let mut total = 0.0_f64;
        let n_paths = width.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % width);
                c /= width;
            }
            let mut collapsed: Vec<usize> = Vec::new();
            let mut prev = usize::MAX;
            for &sym in &path {
                if sym != prev {
                    if sym != blank {
                        collapsed.push(sym);
                    }
                    prev = sym;
                }
            }
            if collapsed == targets {
                let logp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &sym)| log_probs[t * width + sym])
                    .sum();
                total += logp.exp();
            }
        }
        -total.ln()
    }

    fn normalized_log_probs(t_len: usize, width: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
        let mut lp = vec![0.0; t_len * width];
        for t in 0..t_len {
            let row: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let logz = z.ln() + mx;
            for (k, v) in row.iter().enumerate() {
                lp[t * width + k] = v - logz;
            }
        }
        lp
    }

    #[test]
    fn single_symbol_two_frames_hand_oracle() {
        // V={a}, T=2, uniform 0.5: alignments {(a,-),(-,a),(a,a)}, p=0.75
        let half = 0.5f64.ln();
        let lp = Tensor::from_vec(&[2, 2], vec![half; 4]).unwrap();
        let loss = ctc_loss(&lp, &[0]).unwrap();
        assert!((loss.item() - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn empty_target_all_blank_certainty() {
        // blank probability 1 at every frame -> loss 0
        let mut lp = vec![-1e9; 3 * 3];
        for t in 0..3 {
            lp[t * 3 + 2] = 0.0;
        }
        let lp = Tensor::from_vec(&[3, 3], lp).unwrap();
        let loss = ctc_loss(&lp, &[]).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn forward_dp_equals_brute_force_on_small_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut cases = 0;
        for v in 1..=3usize {
            for t_len in 1..=5usize {
                for target_len in 0..=2usize {
                    if t_len < target_len {
                        continue;
                    }
                    let targets: Vec<usize> = (0..target_len).map(|_| rng.random_range(0..v)).collect();
                    if t_len < min_ctc_frames(&targets) {
                        continue;
                    }
                    let width = v + 1;
                    let lp = normalized_log_probs(t_len, width, &mut rng);
                    let want = brute_force_ctc(&lp, t_len, width, &targets);
                    let got = ctc_loss(&Tensor::from_vec(&[t_len, width], lp).unwrap(), &targets)
                        .unwrap()
                        .item();
                    assert!(
                        (got - want).abs() < 1e-10,
                        "T={t_len} V={v} targets {targets:?}: {got} vs {want}"
                    );
                    cases += 1;
                }
            }
        }
        assert!(cases > 20, "grid too small: {cases}");
    }

    #[test]
    fn order_matters_counterexample() {
        // reversing the target changes the loss (no accidental symmetry)
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let lp = normalized_log_probs(5, 4, &mut rng);
        let lp = Tensor::from_vec(&[5, 4], lp).unwrap();
        let fwd = ctc_loss(&lp, &[0, 1, 2]).unwrap().item();
        let rev = ctc_loss(&lp, &[2, 1, 0]).unwrap().item();
        assert!((fwd - rev).abs() > 1e-6, "suspiciously symmetric: {fwd} vs {rev}");
    }

    #[test]
    fn too_short_reports_minimum() {
        let lp = Tensor::from_vec(&[2, 3], vec![0.5f64.ln(); 6]).unwrap();
        // target "aa": needs a blank between -> min 3 frames
        match ctc_loss(&lp, &[0, 0]) {
            Err(Error::TooShort { min, .. }) => assert_eq!(min, 3),
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn repeated_symbol_target_vs_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let lp = normalized_log_probs(5, 3, &mut rng);
        let want = brute_force_ctc(&lp, 5, 3, &[0, 0]);
        let got = ctc_loss(&Tensor::from_vec(&[5, 3], lp).unwrap(), &[0, 0])
            .unwrap()
            .item();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn ctc_grad_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let lp = normalized_log_probs(6, 4, &mut rng);
        let x = Tensor::param(&[6, 4], lp).unwrap();
        let report = grad_check(
            &|inp| ctc_loss(&inp[0], &[1, 2, 1]),
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "err {}", report.max_rel_err);
    }

    #[test]
    fn differentiable_through_log_softmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let raw: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::param(&[5, 3], raw).unwrap();
        let report = grad_check(
            &|inp| ctc_loss(&inp[0].log_softmax(1)?, &[0, 1]),
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "err {}", report.max_rel_err);
    }
}
