//! Hard-example mining for the contrastive objective: span masking and word
//! repetition at the input, sequence/feature cut-off at the representation.
//!
//! All functions draw from a caller-supplied seeded RNG in a documented
//! order (one draw per position, ascending), so tests can replay the stream.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab;

/// Which axis a cut-off erases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffAxis {
    Sequence,
    Feature,
}

/// Representation-level block erasure applied inside the speech encoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub axis: CutoffAxis,
    pub rate: f64,
}

/// The five contrast-view strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Original,
    SpanMask,
    WordRep,
    SeqCutoff,
    FeatCutoff,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Original,
        Strategy::SpanMask,
        Strategy::WordRep,
        Strategy::SeqCutoff,
        Strategy::FeatCutoff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::SpanMask => "span_mask",
            Strategy::WordRep => "word_rep",
            Strategy::SeqCutoff => "seq_cutoff",
            Strategy::FeatCutoff => "feat_cutoff",
        }
    }

    pub fn parse(name: &str) -> Result<Strategy> {
        match name {
            "original" => Ok(Strategy::Original),
            "span_mask" => Ok(Strategy::SpanMask),
            "word_rep" => Ok(Strategy::WordRep),
            "seq_cutoff" => Ok(Strategy::SeqCutoff),
            "feat_cutoff" => Ok(Strategy::FeatCutoff),
            _ => Err(Error::Config(format!(
                "unknown augment strategy {name:?} (expected original|span_mask|word_rep|seq_cutoff|feat_cutoff)"
            ))),
        }
    }
}

/// One augmentation strategy with its knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub strategy: Strategy,
    /// Span-mask start probability per time index.
    pub mask_start_prob: f64,
    /// Span-mask length in frames.
    pub mask_span: usize,
    /// Poisson mean for extra copies per content token.
    pub repetition_rate: f64,
    /// Cut-off erase probability per row/column.
    pub cutoff_rate: f64,
    /// Seed for standalone use; the training loop threads its own stream.
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            strategy: Strategy::Original,
            mask_start_prob: 0.05,
            mask_span: 4,
            repetition_rate: 1.0,
            cutoff_rate: 0.1,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn with_strategy(strategy: Strategy) -> AugmentSpec {
        AugmentSpec {
            strategy,
            ..Default::default()
        }
    }

    pub fn cutoff_spec(&self) -> Option<CutoffSpec> {
        match self.strategy {
            Strategy::SeqCutoff => Some(CutoffSpec {
                axis: CutoffAxis::Sequence,
                rate: self.cutoff_rate,
            }),
            Strategy::FeatCutoff => Some(CutoffSpec {
                axis: CutoffAxis::Feature,
                rate: self.cutoff_rate,
            }),
            _ => None,
        }
    }
}

/// Zero random spans of a `[T, F]` feature sequence.
///
/// Each time index is independently selected as a span start with
/// probability `p` (one uniform draw per index, in ascending order); each
/// start zeroes the next `span` frames, clipped at the end. Overlaps are
/// allowed. Shape is preserved.
pub fn span_mask(s: &Tensor, p: f64, span: usize, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid {
            op: "span_mask",
            msg: format!("probability {p} outside [0,1]"),
        });
    }
    if span == 0 {
        return Err(Error::Invalid {
            op: "span_mask",
            msg: "span must be at least 1 frame".into(),
        });
    }
    let (t, f) = (s.shape()[0], s.shape()[1]);
    let mut masked = vec![false; t];
    for start in 0..t {
        if rng.random::<f64>() < p {
            for item in masked.iter_mut().skip(start).take(span) {
                *item = true;
            }
        }
    }
    let mut data = s.to_vec();
    for (ti, &dead) in masked.iter().enumerate() {
        if dead {
            for j in 0..f {
                data[ti * f + j] = 0.0;
            }
        }
    }
    Tensor::from_vec(s.shape(), data)
}

/// Duplicate each content token `k` extra times, `k ~ Poisson(mean)`.
///
/// Special tokens (PAD/EOS/BOS tags) are copied through untouched and do
/// not consume a draw. Order is preserved.
pub fn word_repetition(x: &[usize], mean: f64, rng: &mut ChaCha20Rng) -> Result<Vec<usize>> {
    if mean < 0.0 {
        return Err(Error::Invalid {
            op: "word_repetition",
            msg: format!("negative Poisson mean {mean}"),
        });
    }
    let dist = if mean > 0.0 {
        Some(Poisson::new(mean).map_err(|e| Error::Invalid {
            op: "word_repetition",
            msg: e.to_string(),
        })?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(x.len());
    for &tok in x {
        out.push(tok);
        if vocab::is_special(tok) {
            continue;
        }
        let k = match &dist {
            Some(d) => d.sample(rng) as usize,
            None => 0,
        };
        for _ in 0..k {
            out.push(tok);
        }
    }
    Ok(out)
}

/// Block erasure of a `[T, d]` representation: zero whole time rows
/// (sequence axis) or whole feature columns. One uniform draw per row or
/// column, ascending. Survivors are not rescaled. Differentiable through
/// the representation.
pub fn cutoff(rep: &Tensor, axis: CutoffAxis, rate: f64, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid {
            op: "cutoff",
            msg: format!("rate {rate} outside [0,1)"),
        });
    }
    let (t, d) = (rep.shape()[0], rep.shape()[1]);
    let mut mask = vec![1.0; t * d];
    match axis {
        CutoffAxis::Sequence => {
            for ti in 0..t {
                if rng.random::<f64>() < rate {
                    for j in 0..d {
                        mask[ti * d + j] = 0.0;
                    }
                }
            }
        }
        CutoffAxis::Feature => {
            for j in 0..d {
                if rng.random::<f64>() < rate {
                    for ti in 0..t {
                        mask[ti * d + j] = 0.0;
                    }
                }
            }
        }
    }
    let mask = Tensor::from_vec(&[t, d], mask)?;
    rep.dropout_mask_apply(&mask)
}

/// One (speech-view, text-view) pair per example, plus an optional cut-off
/// to be applied to the speech representation inside the encoder.
#[derive(Debug, Clone)]
pub struct ContrastView {
    pub strategy: Strategy,
    /// Per-example speech input at true length (no padding).
    pub speech: Vec<Tensor>,
    /// Per-example transcript with BOS/EOS, possibly expanded.
    pub text: Vec<Vec<usize>>,
    pub cutoff: Option<CutoffSpec>,
}

/// Build one contrast view per augmentation spec. Pairing is preserved:
/// view entry `i` is always contrasted against transcript `i`.
pub fn build_contrast_views(
    batch: &Batch,
    specs: &[AugmentSpec],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<ContrastView>> {
    if specs.is_empty() {
        return Err(Error::Invalid {
            op: "build_contrast_views",
            msg: "no augmentation specs".into(),
        });
    }
    for (i, a) in specs.iter().enumerate() {
        for b in specs.iter().skip(i + 1) {
            if a.strategy == b.strategy {
                return Err(Error::Invalid {
                    op: "build_contrast_views",
                    msg: format!("duplicate strategy {}", a.strategy.name()),
                });
            }
        }
    }
    let cropped_speech: Vec<Tensor> = (0..batch.len)
        .map(|i| {
            let t = batch.speech_mask[i].iter().filter(|&&m| m).count();
            batch.speech[i].slice(0, 0, t).map(|s| s.detach())
        })
        .collect::<Result<_>>()?;
    let cropped_src: Vec<Vec<usize>> = (0..batch.len)
        .map(|i| {
            let n = batch.src_mask[i].iter().filter(|&&m| m).count();
            batch.src[i][..n].to_vec()
        })
        .collect();

    let mut views = Vec::with_capacity(specs.len());
    for spec in specs {
        let view = match spec.strategy {
            Strategy::Original => ContrastView {
                strategy: spec.strategy,
                speech: cropped_speech.clone(),
                text: cropped_src.clone(),
                cutoff: None,
            },
            Strategy::SpanMask => {
                let speech = cropped_speech
                    .iter()
                    .map(|s| span_mask(s, spec.mask_start_prob, spec.mask_span, rng))
                    .collect::<Result<_>>()?;
                ContrastView {
                    strategy: spec.strategy,
                    speech,
                    text: cropped_src.clone(),
                    cutoff: None,
                }
            }
            Strategy::WordRep => {
                let text = cropped_src
                    .iter()
                    .map(|x| word_repetition(x, spec.repetition_rate, rng))
                    .collect::<Result<_>>()?;
                ContrastView {
                    strategy: spec.strategy,
                    speech: cropped_speech.clone(),
                    text,
                    cutoff: None,
                }
            }
            Strategy::SeqCutoff | Strategy::FeatCutoff => ContrastView {
                strategy: spec.strategy,
                speech: cropped_speech.clone(),
                text: cropped_src.clone(),
                cutoff: spec.cutoff_spec(),
            },
        };
        views.push(view);
    }
    Ok(views)
}
