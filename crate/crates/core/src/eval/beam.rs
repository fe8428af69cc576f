//! Beam search with length-penalty normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{decode_step, embed_text, encode, speech_encode, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::vocab::EOS;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Length penalty exponent: scores are `sum logp / |y|^alpha`.
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            alpha: 0.7,
            max_len: 48,
        }
    }
}

/// What to decode from.
pub enum DecodeInput<'a> {
    /// Speech features at true length `[T, F]`.
    Speech(&'a Tensor),
    /// Token sequence with BOS/EOS.
    Text(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Full sequence including the BOS tag and EOS (when reached).
    pub tokens: Vec<usize>,
    /// Length-normalized score `sum logp / |y|^alpha` (|y| counts generated
    /// tokens, the BOS tag excluded).
    pub score: f64,
    /// Raw log-probability sum.
    pub logprob: f64,
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    finished: bool,
    finished_at: usize,
}

impl Hyp {
    fn gen_len(&self) -> usize {
        self.tokens.len().saturating_sub(1).max(1)
    }

    fn score(&self, alpha: f64) -> f64 {
        self.logp / (self.gen_len() as f64).powf(alpha)
    }
}

fn better(a: &Hyp, b: &Hyp, alpha: f64) -> std::cmp::Ordering {
    // higher score first; ties: earlier completion, then lexicographic tokens
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.finished_at.cmp(&b.finished_at))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Encode the input once (eval mode, no dropout).
pub fn encode_for_decode(
    input: &DecodeInput<'_>,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Tensor, Vec<bool>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let states = match input {
        DecodeInput::Speech(s) => {
            let a = speech_encode(s, params, config, false, None, &mut rng)?;
            let mask = vec![true; a.shape()[0]];
            encode(&a, &mask, params, config, false, &mut rng)?
        }
        DecodeInput::Text(x) => {
            let emb = embed_text(x, params, config)?;
            let mask = vec![true; x.len()];
            encode(&emb, &mask, params, config, false, &mut rng)?
        }
    };
    let mask = vec![true; states.shape()[0]];
    Ok((states, mask))
}

/// Standard beam search. Hypotheses are ranked by length-normalized score;
/// the search stops when every beam entry has emitted EOS or hit `max_len`
/// generated tokens.
pub fn beam_decode(
    params: &ModelParams,
    config: &ModelConfig,
    input: DecodeInput<'_>,
    decode: &DecodeConfig,
    bos: usize,
) -> Result<DecodeResult> {
    if decode.beam_size == 0 {
        return Err(Error::Invalid {
            op: "beam_decode",
            msg: "beam size must be at least 1".into(),
        });
    }
    if decode.alpha < 0.0 {
        return Err(Error::Invalid {
            op: "beam_decode",
            msg: format!("length penalty {} must be nonnegative", decode.alpha),
        });
    }
    let (enc_states, enc_mask) = encode_for_decode(&input, params, config)?;
    let mut beam = vec![Hyp {
        tokens: vec![bos],
        logp: 0.0,
        finished: false,
        finished_at: usize::MAX,
    }];
    for step in 0..decode.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let logits = decode_step(&hyp.tokens, &enc_states, &enc_mask, params, config)?;
            let lp = logits.log_softmax(1)?.to_vec();
            for (tok, &tok_lp) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let finished = tok == EOS;
                candidates.push(Hyp {
                    tokens,
                    logp: hyp.logp + tok_lp,
                    finished,
                    finished_at: if finished { step } else { usize::MAX },
                });
            }
        }
        candidates.sort_by(|a, b| better(a, b, decode.alpha));
        candidates.truncate(decode.beam_size);
        beam = candidates;
    }
    beam.sort_by(|a, b| better(a, b, decode.alpha));
    let best = &beam[0];
    Ok(DecodeResult {
        tokens: best.tokens.clone(),
        score: best.score(decode.alpha),
        logprob: best.logp,
    })
}

/// Teacher-forced log-probability of `tokens` (BOS included) under the
/// model; the self-consistency oracle for beam scores.
pub fn sequence_logprob(
    tokens: &[usize],
    enc_states: &Tensor,
    enc_mask: &[bool],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let prefix = &tokens[..tokens.len() - 1];
    let logits = crate::nn::decode_teacher_forced(
        prefix, enc_states, enc_mask, params, config, false, &mut rng,
    )?;
    let lp = logits.log_softmax(1)?;
    let picked = lp.gather_rows(&tokens[1..])?;
    Ok(picked.to_vec().iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelParams;
    use crate::vocab::BOS_TGT;

    fn tiny() -> (ModelParams, ModelConfig) {
        let config = ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            feature_dim: 4,
            conv_kernel: 3,
            conv_stride: 2,
            max_len: 16,
            ..Default::default()
        };
        let params = ModelParams::init(&config, 31).unwrap();
        (params, config)
    }

    fn speech(t: usize, f: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_vec(&[t, f], (0..t * f).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (params, config) = tiny();
        let s = speech(12, 4, 1);
        let dec = DecodeConfig {
            beam_size: 1,
            alpha: 0.0,
            max_len: 8,
        };
        let got = beam_decode(&params, &config, DecodeInput::Speech(&s), &dec, BOS_TGT).unwrap();
        // independent greedy rollout
        let (enc, mask) = encode_for_decode(&DecodeInput::Speech(&s), &params, &config).unwrap();
        let mut tokens = vec![BOS_TGT];
        for _ in 0..8 {
            let logits = decode_step(&tokens, &enc, &mask, &params, &config).unwrap();
            let lp = logits.log_softmax(1).unwrap().to_vec();
            let argmax = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            tokens.push(argmax);
            if argmax == EOS {
                break;
            }
        }
        assert_eq!(got.tokens, tokens);
    }

    #[test]
    fn alpha_zero_matches_exhaustive_search() {
        // enumerate every hypothesis up to 3 generated tokens and compare
        let (params, config) = tiny();
        let s = speech(8, 4, 2);
        let (enc, mask) = encode_for_decode(&DecodeInput::Speech(&s), &params, &config).unwrap();
        let v = config.vocab_size;
        let mut best: Option<(f64, Vec<usize>)> = None;
        // all sequences: t1 [t2 [t3]] with EOS termination or length cap
        let mut stack: Vec<Vec<usize>> = vec![vec![BOS_TGT]];
        while let Some(prefix) = stack.pop() {
            let done = prefix.len() == 4 || prefix.last() == Some(&EOS);
            if done {
                let lp = sequence_logprob(&prefix, &enc, &mask, &params, &config).unwrap();
                if best.is_none() || lp > best.as_ref().unwrap().0 {
                    best = Some((lp, prefix));
                }
                continue;
            }
            for tok in 0..v {
                let mut next = prefix.clone();
                next.push(tok);
                stack.push(next);
            }
        }
        let (want_lp, want_tokens) = best.unwrap();
        let dec = DecodeConfig {
            beam_size: v * 4, // wide enough to be exhaustive at this depth
            alpha: 0.0,
            max_len: 3,
        };
        let got = beam_decode(&params, &config, DecodeInput::Speech(&s), &dec, BOS_TGT).unwrap();
        assert!((got.logprob - want_lp).abs() < 1e-9, "{} vs {}", got.logprob, want_lp);
        assert_eq!(got.tokens, want_tokens);
    }

    #[test]
    fn returned_score_is_self_consistent() {
        let (params, config) = tiny();
        for seed in [3, 4, 5] {
            let s = speech(10, 4, seed);
            let dec = DecodeConfig {
                beam_size: 3,
                alpha: 0.7,
                max_len: 6,
            };
            let got =
                beam_decode(&params, &config, DecodeInput::Speech(&s), &dec, BOS_TGT).unwrap();
            let (enc, mask) =
                encode_for_decode(&DecodeInput::Speech(&s), &params, &config).unwrap();
            let lp = sequence_logprob(&got.tokens, &enc, &mask, &params, &config).unwrap();
            let gen = (got.tokens.len() - 1) as f64;
            let want = lp / gen.powf(0.7);
            assert!((got.score - want).abs() < 1e-9, "{} vs {}", got.score, want);
        }
    }

    #[test]
    fn wider_beam_never_scores_lower() {
        let (params, config) = tiny();
        for seed in [6, 7, 8, 9] {
            let s = speech(12, 4, seed);
            let mut prev = f64::NEG_INFINITY;
            for beam in [1usize, 2, 4, 8] {
                let dec = DecodeConfig {
                    beam_size: beam,
                    alpha: 0.7,
                    max_len: 8,
                };
                let got =
                    beam_decode(&params, &config, DecodeInput::Speech(&s), &dec, BOS_TGT).unwrap();
                assert!(
                    got.score >= prev - 1e-12,
                    "beam {beam} score {} below {prev}",
                    got.score
                );
                prev = got.score;
            }
        }
    }

    #[test]
    fn beam_zero_is_error() {
        let (params, config) = tiny();
        let s = speech(8, 4, 10);
        let dec = DecodeConfig {
            beam_size: 0,
            alpha: 0.0,
            max_len: 4,
        };
        assert!(beam_decode(&params, &config, DecodeInput::Speech(&s), &dec, BOS_TGT).is_err());
    }

    #[test]
    fn text_input_decodes() {
        let (params, config) = tiny();
        let dec = DecodeConfig::default();
        let x = vec![crate::vocab::BOS_SRC, 4, 5, EOS];
        let got = beam_decode(&params, &config, DecodeInput::Text(&x), &dec, BOS_TGT).unwrap();
        assert_eq!(got.tokens[0], BOS_TGT);
    }
}
