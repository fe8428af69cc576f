//! Corpus BLEU over token-id sequences: clipped n-gram precisions up to 4,
//! exponential smoothing for zero counts, brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in `[0, 100]`.
///
/// Zero-match orders are smoothed exponentially: the k-th zero order
/// contributes `1 / (2^k * total)`.
pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid {
            op: "bleu",
            msg: "empty corpus".into(),
        });
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid {
            op: "bleu",
            msg: format!(
                "{} hypotheses vs {} references",
                hypotheses.len(),
                references.len()
            ),
        });
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=MAX_N {
            if hyp.len() < n {
                continue;
            }
            total[n - 1] += hyp.len() - n + 1;
            let ref_counts = ngram_counts(re, n);
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Err(Error::Invalid {
            op: "bleu",
            msg: "all hypotheses empty".into(),
        });
    }
    let mut smooth = 1.0_f64;
    let mut log_prec_sum = 0.0_f64;
    for n in 0..MAX_N {
        let p = if matched[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else {
            smooth *= 2.0;
            1.0 / (smooth * total[n].max(1) as f64)
        };
        log_prec_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_prec_sum / MAX_N as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_100() {
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6]];
        assert_eq!(bleu(&corpus, &corpus).unwrap(), 100.0);
    }

    #[test]
    fn four_vs_five_token_hand_oracle() {
        // precisions 4/4, 3/3, 2/2, 1/1; BP = e^{1 - 5/4}
        let hyp = vec![vec![1, 2, 3, 4]];
        let re = vec![vec![1, 2, 3, 4, 5]];
        let want = 100.0 * (1.0 - 5.0 / 4.0f64).exp();
        let got = bleu(&hyp, &re).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 77.880078).abs() < 0.01);
    }

    #[test]
    fn disjoint_unigrams_smoothed_nonzero() {
        let hyp = vec![vec![1, 2, 3, 4]];
        let re = vec![vec![5, 6, 7, 8]];
        let got = bleu(&hyp, &re).unwrap();
        assert!(got > 0.0 && got < 1.0, "{got}");
    }

    #[test]
    fn corpus_permutation_invariance() {
        let hyps = vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![1, 1, 2, 2, 3]];
        let refs = vec![vec![1, 2, 3, 5], vec![5, 6, 7, 8], vec![1, 2, 3]];
        let a = bleu(&hyps, &refs).unwrap();
        let perm = [2, 0, 1];
        let hyps_p: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let b = bleu(&hyps_p, &refs_p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_counts_repeats() {
        // hyp repeats a token more often than the reference has it
        let hyp = vec![vec![1, 1, 1, 1]];
        let re = vec![vec![1, 2, 3, 4]];
        // unigram matches clipped to 1 -> 1/4
        let got = bleu(&hyp, &re).unwrap();
        let p1: f64 = 1.0 / 4.0;
        let p2: f64 = 1.0 / (2.0 * 3.0); // smoothed
        let p3: f64 = 1.0 / (4.0 * 2.0);
        let p4: f64 = 1.0 / (8.0 * 1.0);
        let want = 100.0 * ((p1.ln() + p2.ln() + p3.ln() + p4.ln()) / 4.0).exp();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[vec![1]], &[]).is_err());
    }
}
