//! Evaluation: beam decoding, BLEU, cross-modal retrieval, and the
//! modality-gap report with its 2-D PCA projection.

mod beam;
mod bleu;
mod pca;

pub use beam::{beam_decode, encode_for_decode, sequence_logprob, DecodeConfig, DecodeInput, DecodeResult};
pub use bleu::bleu;
pub use pca::{pca_2d, reconstruction_error};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::nn::{speech_representation, text_representation, ContrastLevel, ModelConfig, ModelParams};

/// Cross-modal top-1 retrieval outcome.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub level: ContrastLevel,
    pub n_queries: usize,
    pub top1_accuracy: f64,
    pub mean_paired_cosine: f64,
    pub mean_unpaired_cosine: f64,
}

impl RetrievalReport {
    /// Paired-minus-unpaired cosine margin: the assertable form of
    /// "representations of the same content sit closer".
    pub fn margin(&self) -> f64 {
        self.mean_paired_cosine - self.mean_unpaired_cosine
    }
}

/// Modality-gap statistics plus a 2-D projection of both point clouds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub level: ContrastLevel,
    pub paired_mean: f64,
    pub paired_std: f64,
    pub unpaired_mean: f64,
    pub unpaired_std: f64,
    /// (modality, x, y) rows; speech first, then text, in split order.
    pub points: Vec<(Modality, f64, f64)>,
    /// Fraction of variance explained by each plotted component.
    pub explained: [f64; 2],
}

impl GapReport {
    pub fn margin(&self) -> f64 {
        self.paired_mean - self.unpaired_mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Speech,
    Text,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

/// Pooled speech/text representation values for every triplet in the split.
pub fn representation_pairs(
    params: &ModelParams,
    config: &ModelConfig,
    split: &[Triplet],
    level: ContrastLevel,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut speech_rows = Vec::with_capacity(split.len());
    let mut text_rows = Vec::with_capacity(split.len());
    for t in split {
        let s = t.speech_tensor(config.feature_dim);
        let u = speech_representation(&s, params, config, level, false, None, &mut rng)?;
        let v = text_representation(&t.src, params, config, level, false, &mut rng)?;
        speech_rows.push(u.to_vec());
        text_rows.push(v.to_vec());
    }
    Ok((speech_rows, text_rows))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn check_norms(rows: &[Vec<f64>], op: &'static str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::ZeroNorm { op, row: i });
        }
    }
    Ok(())
}

/// For each speech item, find the nearest transcript by cosine similarity
/// over the whole split; ties count as misses.
pub fn retrieve(
    params: &ModelParams,
    config: &ModelConfig,
    split: &[Triplet],
    level: ContrastLevel,
) -> Result<RetrievalReport> {
    if split.len() < 2 {
        return Err(Error::Invalid {
            op: "retrieve",
            msg: format!("need at least 2 examples, got {}", split.len()),
        });
    }
    let (speech_rows, text_rows) = representation_pairs(params, config, split, level)?;
    retrieve_from_rows(&speech_rows, &text_rows, level)
}

/// Retrieval over precomputed representation rows.
pub fn retrieve_from_rows(
    speech_rows: &[Vec<f64>],
    text_rows: &[Vec<f64>],
    level: ContrastLevel,
) -> Result<RetrievalReport> {
    let n = speech_rows.len();
    check_norms(speech_rows, "retrieve")?;
    check_norms(text_rows, "retrieve")?;
    let mut hits = 0usize;
    let mut paired_sum = 0.0;
    let mut unpaired_sum = 0.0;
    for i in 0..n {
        let own = cosine(&speech_rows[i], &text_rows[i]);
        paired_sum += own;
        let mut beaten = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            let sim = cosine(&speech_rows[i], &text_rows[j]);
            unpaired_sum += sim;
            if sim >= own {
                beaten = true;
            }
        }
        if !beaten {
            hits += 1;
        }
    }
    Ok(RetrievalReport {
        level,
        n_queries: n,
        top1_accuracy: hits as f64 / n as f64,
        mean_paired_cosine: paired_sum / n as f64,
        mean_unpaired_cosine: unpaired_sum / (n * (n - 1)) as f64,
    })
}

/// Paired/unpaired cosine statistics plus PCA scatter coordinates for both
/// modality clouds.
pub fn gap_report(
    params: &ModelParams,
    config: &ModelConfig,
    split: &[Triplet],
    level: ContrastLevel,
) -> Result<GapReport> {
    if split.len() < 2 {
        return Err(Error::Invalid {
            op: "gap_report",
            msg: format!("need at least 2 examples, got {}", split.len()),
        });
    }
    let (speech_rows, text_rows) = representation_pairs(params, config, split, level)?;
    gap_report_from_rows(&speech_rows, &text_rows, level)
}

/// Gap statistics over precomputed representation rows.
pub fn gap_report_from_rows(
    speech_rows: &[Vec<f64>],
    text_rows: &[Vec<f64>],
    level: ContrastLevel,
) -> Result<GapReport> {
    let n = speech_rows.len();
    check_norms(speech_rows, "gap_report")?;
    check_norms(text_rows, "gap_report")?;
    let mut paired = Vec::with_capacity(n);
    let mut unpaired = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        paired.push(cosine(&speech_rows[i], &text_rows[i]));
        for j in 0..n {
            if j != i {
                unpaired.push(cosine(&speech_rows[i], &text_rows[j]));
            }
        }
    }
    let stats = |v: &[f64]| -> (f64, f64) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (paired_mean, paired_std) = stats(&paired);
    let (unpaired_mean, unpaired_std) = stats(&unpaired);

    let mut union: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    union.extend(speech_rows.iter().cloned());
    union.extend(text_rows.iter().cloned());
    let (coords, explained) = pca_2d(&union);
    let mut points = Vec::with_capacity(2 * n);
    for (idx, &(x, y)) in coords.iter().enumerate() {
        let modality = if idx < n { Modality::Speech } else { Modality::Text };
        points.push((modality, x, y));
    }
    Ok(GapReport {
        level,
        paired_mean,
        paired_std,
        unpaired_mean,
        unpaired_std,
        points,
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_representations_retrieve_perfectly() {
        let rows = random_rows(10, 8, 1);
        let report = retrieve_from_rows(&rows, &rows, ContrastLevel::Low).unwrap();
        assert_eq!(report.top1_accuracy, 1.0);
        assert!((report.mean_paired_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieval_is_scale_invariant() {
        let speech = random_rows(8, 6, 2);
        let text = random_rows(8, 6, 3);
        let a = retrieve_from_rows(&speech, &text, ContrastLevel::Low).unwrap();
        let scaled: Vec<Vec<f64>> = speech
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (1.0 + i as f64)).collect())
            .collect();
        let b = retrieve_from_rows(&scaled, &text, ContrastLevel::Low).unwrap();
        assert_eq!(a.top1_accuracy, b.top1_accuracy);
        assert!((a.mean_paired_cosine - b.mean_paired_cosine).abs() < 1e-12);
    }

    #[test]
    fn permuted_pairs_hit_at_chance() {
        // random pairing: expected accuracy 1/N; check within 3 sigma over seeds
        let n = 16;
        let trials = 60;
        let mut hits_total = 0.0;
        for seed in 0..trials {
            let speech = random_rows(n, 24, 100 + seed);
            let text = random_rows(n, 24, 500 + seed);
            let r = retrieve_from_rows(&speech, &text, ContrastLevel::Low).unwrap();
            hits_total += r.top1_accuracy * n as f64;
        }
        let total_queries = (trials * n as u64) as f64;
        let p = 1.0 / n as f64;
        let expect = total_queries * p;
        let sigma = (total_queries * p * (1.0 - p)).sqrt();
        assert!(
            (hits_total - expect).abs() < 3.0 * sigma,
            "hits {hits_total} vs {expect} +- {sigma}"
        );
    }

    #[test]
    fn exact_tie_counts_as_miss() {
        let speech = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // both transcripts identical: sim(u, v1) == sim(u, v2) exactly
        let text = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let r = retrieve_from_rows(&speech, &text, ContrastLevel::Low).unwrap();
        assert_eq!(r.top1_accuracy, 0.0);
    }

    #[test]
    fn zero_norm_names_example() {
        let mut speech = random_rows(3, 4, 4);
        speech[2] = vec![0.0; 4];
        let text = random_rows(3, 4, 5);
        match retrieve_from_rows(&speech, &text, ContrastLevel::Low) {
            Err(Error::ZeroNorm { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn identical_clouds_coincide_in_pca() {
        let rows = random_rows(12, 6, 6);
        let report = gap_report_from_rows(&rows, &rows, ContrastLevel::Low).unwrap();
        assert!((report.paired_mean - 1.0).abs() < 1e-12);
        let n = rows.len();
        for i in 0..n {
            let (_, sx, sy) = report.points[i];
            let (_, tx, ty) = report.points[n + i];
            assert!((sx - tx).abs() < 1e-9 && (sy - ty).abs() < 1e-9);
        }
    }

    #[test]
    fn random_high_dim_cosines_concentrate_near_zero() {
        let n = 250;
        let speech = random_rows(n, 64, 7);
        let text = random_rows(n, 64, 8);
        let report = gap_report_from_rows(&speech, &text, ContrastLevel::Low).unwrap();
        assert!(report.paired_mean.abs() < 0.1, "paired {}", report.paired_mean);
    }
}
