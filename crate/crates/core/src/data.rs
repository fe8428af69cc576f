//! Synthetic speech-translation triplet corpus: generation, batching, disk I/O.
//!
//! Each content token owns a fixed prototype sequence of feature frames.
//! An utterance is the concatenation of its tokens' prototypes, each
//! time-stretched by a random factor and perturbed with Gaussian noise,
//! wrapped in a few frames of lead-in/tail silence. The translation rule is
//! a seeded permutation of content tokens followed by a deterministic swap
//! of adjacent positions, so exact translation is learnable and invertible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{self, BOS_SRC, BOS_TGT, EOS, PAD};

/// Frames of silence prepended and appended to every utterance.
pub const SILENCE_FRAMES: usize = 4;

/// Knobs for the synthetic language; the derived tables live in
/// [`SyntheticLanguage`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticLanguageSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Gaussian noise added to every feature frame.
    pub noise_sigma: f64,
    /// Per-token time-stretch factor range (inclusive low, exclusive high).
    pub stretch: (f64, f64),
    /// Prototype length range in frames (inclusive).
    pub proto_frames: (usize, usize),
    /// Sentence length range in content tokens (inclusive).
    pub sentence_len: (usize, usize),
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        SyntheticLanguageSpec {
            vocab_size: 40,
            feature_dim: 8,
            noise_sigma: 0.1,
            stretch: (1.0, 1.4),
            proto_frames: (4, 8),
            sentence_len: (3, 8),
        }
    }
}

/// Fully materialized synthetic language: prototypes plus translation rule.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub spec: SyntheticLanguageSpec,
    /// `prototypes[i]` is the frame sequence for content token `FIRST_CONTENT + i`.
    prototypes: Vec<Vec<f64>>,
    proto_len: Vec<usize>,
    /// Permutation over content indices: source content i -> target content map[i].
    token_map: Vec<usize>,
    inverse_map: Vec<usize>,
}

impl SyntheticLanguage {
    /// Build prototype table and translation rule from a seed.
    pub fn new(spec: SyntheticLanguageSpec, seed: u64) -> Result<SyntheticLanguage> {
        let content = spec
            .vocab_size
            .checked_sub(vocab::FIRST_CONTENT)
            .unwrap_or(0);
        if content < 2 {
            return Err(Error::Invalid {
                op: "synthetic_language",
                msg: format!(
                    "vocab_size {} leaves {} content tokens; need at least 2 for a translation rule",
                    spec.vocab_size, content
                ),
            });
        }
        if spec.proto_frames.0 < SILENCE_FRAMES || spec.proto_frames.0 > spec.proto_frames.1 {
            return Err(Error::Invalid {
                op: "synthetic_language",
                msg: format!(
                    "prototype frame range {:?} must be ascending with minimum {}",
                    spec.proto_frames, SILENCE_FRAMES
                ),
            });
        }
        if spec.stretch.0 < 1.0 || spec.stretch.1 < spec.stretch.0 {
            return Err(Error::Invalid {
                op: "synthetic_language",
                msg: format!("stretch range {:?} must be ascending and >= 1.0", spec.stretch),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut proto_len = Vec::with_capacity(content);
        let mut prototypes = Vec::with_capacity(content);
        for _ in 0..content {
            let len = rng.random_range(spec.proto_frames.0..=spec.proto_frames.1);
            proto_len.push(len);
            let frames: Vec<f64> = (0..len * spec.feature_dim)
                .map(|_| quantize(gaussian(&mut rng)))
                .collect();
            prototypes.push(frames);
        }
        // Cyclic shift by a random nonzero offset: bijective, no fixed points.
        let offset = rng.random_range(1..content);
        let token_map: Vec<usize> = (0..content).map(|i| (i + offset) % content).collect();
        let mut inverse_map = vec![0; content];
        for (i, &m) in token_map.iter().enumerate() {
            inverse_map[m] = i;
        }
        Ok(SyntheticLanguage {
            spec,
            prototypes,
            proto_len,
            token_map,
            inverse_map,
        })
    }

    pub fn content_count(&self) -> usize {
        self.token_map.len()
    }

    /// Prototype frames for a content token id.
    pub fn prototype(&self, token: usize) -> (&[f64], usize) {
        let idx = token - vocab::FIRST_CONTENT;
        (&self.prototypes[idx], self.proto_len[idx])
    }

    /// Translate a source sentence: per-token permutation, then swap each
    /// adjacent pair of positions.
    pub fn translate(&self, content: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = content
            .iter()
            .map(|&t| vocab::FIRST_CONTENT + self.token_map[t - vocab::FIRST_CONTENT])
            .collect();
        swap_adjacent(&mut out);
        out
    }

    /// Inverse of [`SyntheticLanguage::translate`].
    pub fn untranslate(&self, content: &[usize]) -> Vec<usize> {
        let mut tmp = content.to_vec();
        swap_adjacent(&mut tmp);
        tmp.iter()
            .map(|&t| vocab::FIRST_CONTENT + self.inverse_map[t - vocab::FIRST_CONTENT])
            .collect()
    }
}

fn swap_adjacent(xs: &mut [usize]) {
    let mut i = 0;
    while i + 1 < xs.len() {
        xs.swap(i, i + 1);
        i += 2;
    }
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Features are stored on disk as f32; quantizing at generation time makes
/// write-then-read an exact identity.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    /// Speech feature sequence, `T_s x F`.
    pub speech: Vec<f64>,
    pub speech_len: usize,
    /// Transcript: `[BOS_SRC, content.., EOS]`.
    pub src: Vec<usize>,
    /// Translation: `[BOS_TGT, content.., EOS]`.
    pub tgt: Vec<usize>,
}

impl Triplet {
    pub fn speech_tensor(&self, feature_dim: usize) -> Tensor {
        Tensor::from_vec(&[self.speech_len, feature_dim], self.speech.clone())
            .expect("triplet speech shape")
    }
}

/// Generated corpus with fixed train/dev/test splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub language: SyntheticLanguage,
    pub train: Vec<Triplet>,
    pub dev: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> &[Triplet] {
        match name {
            "train" => &self.train,
            "dev" => &self.dev,
            "test" => &self.test,
            _ => &[],
        }
    }
}

/// Generate `n_examples` triplets and split them 80/10/10.
pub fn generate_corpus(
    language: &SyntheticLanguage,
    n_examples: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_examples < 10 {
        return Err(Error::Invalid {
            op: "generate_corpus",
            msg: format!("need at least 10 examples, got {}", n_examples),
        });
    }
    let spec = &language.spec;
    let f = spec.feature_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
        let content: Vec<usize> = (0..len)
            .map(|_| rng.random_range(vocab::content_range(spec.vocab_size)))
            .collect();
        let mut frames: Vec<f64> = Vec::new();
        for _ in 0..SILENCE_FRAMES * f {
            frames.push(quantize(spec.noise_sigma * gaussian(&mut rng)));
        }
        for &tok in &content {
            let (proto, plen) = language.prototype(tok);
            let factor = if spec.stretch.1 > spec.stretch.0 {
                rng.random_range(spec.stretch.0..spec.stretch.1)
            } else {
                spec.stretch.0
            };
            let out_len = (plen as f64 * factor).round() as usize;
            for t_out in 0..out_len {
                let src = ((t_out as f64 / factor).floor() as usize).min(plen - 1);
                for j in 0..f {
                    let v = proto[src * f + j] + spec.noise_sigma * gaussian(&mut rng);
                    frames.push(quantize(v));
                }
            }
        }
        for _ in 0..SILENCE_FRAMES * f {
            frames.push(quantize(spec.noise_sigma * gaussian(&mut rng)));
        }
        let speech_len = frames.len() / f;
        let mut src = Vec::with_capacity(len + 2);
        src.push(BOS_SRC);
        src.extend_from_slice(&content);
        src.push(EOS);
        let translated = language.translate(&content);
        let mut tgt = Vec::with_capacity(len + 2);
        tgt.push(BOS_TGT);
        tgt.extend_from_slice(&translated);
        tgt.push(EOS);
        debug_assert!(speech_len >= 4 * src.len(), "speech must dominate text length");
        triplets.push(Triplet {
            speech: frames,
            speech_len,
            src,
            tgt,
        });
    }
    // Seeded disjoint splits: 10% dev, 10% test (at least one each).
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut rng);
    let n_hold = (n_examples / 10).max(1);
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let mut train = Vec::new();
    for (rank, &idx) in order.iter().enumerate() {
        if rank < n_hold {
            dev.push(triplets[idx].clone());
        } else if rank < 2 * n_hold {
            test.push(triplets[idx].clone());
        } else {
            train.push(triplets[idx].clone());
        }
    }
    Ok(Corpus {
        language: language.clone(),
        train,
        dev,
        test,
    })
}

/// Padded batch with validity masks.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Per-example padded speech `[T_max, F]`.
    pub speech: Vec<Tensor>,
    pub speech_mask: Vec<Vec<bool>>,
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub len: usize,
}

impl Batch {
    pub fn from_triplets(items: &[&Triplet], feature_dim: usize) -> Batch {
        let t_max = items.iter().map(|t| t.speech_len).max().unwrap_or(0);
        let s_max = items.iter().map(|t| t.src.len()).max().unwrap_or(0);
        let y_max = items.iter().map(|t| t.tgt.len()).max().unwrap_or(0);
        let mut speech = Vec::with_capacity(items.len());
        let mut speech_mask = Vec::with_capacity(items.len());
        let mut src = Vec::with_capacity(items.len());
        let mut src_mask = Vec::with_capacity(items.len());
        let mut tgt = Vec::with_capacity(items.len());
        let mut tgt_mask = Vec::with_capacity(items.len());
        for it in items {
            let mut frames = it.speech.clone();
            frames.resize(t_max * feature_dim, 0.0);
            speech.push(Tensor::from_vec(&[t_max, feature_dim], frames).expect("padded speech"));
            let mut m = vec![true; it.speech_len];
            m.resize(t_max, false);
            speech_mask.push(m);
            src.push(pad_tokens(&it.src, s_max));
            src_mask.push(pad_mask(it.src.len(), s_max));
            tgt.push(pad_tokens(&it.tgt, y_max));
            tgt_mask.push(pad_mask(it.tgt.len(), y_max));
        }
        Batch {
            speech,
            speech_mask,
            src,
            src_mask,
            tgt,
            tgt_mask,
            len: items.len(),
        }
    }

    /// True (unpadded) lengths derived from the masks.
    pub fn speech_lens(&self) -> Vec<usize> {
        self.speech_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .collect()
    }
}

fn pad_tokens(tokens: &[usize], to: usize) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.resize(to, PAD);
    out
}

fn pad_mask(len: usize, to: usize) -> Vec<bool> {
    let mut m = vec![true; len];
    m.resize(to, false);
    m
}

/// Length-bucketed batches. Examples are sorted by source length (speech
/// length as tie-break), grouped greedily under `batch_size` examples and
/// `max_tokens` source+target tokens, then the batch order is shuffled.
pub fn make_batches(
    split: &[Triplet],
    feature_dim: usize,
    batch_size: usize,
    max_tokens: Option<usize>,
    seed: u64,
    shuffle: bool,
    ctr_enabled: bool,
) -> Result<Vec<Batch>> {
    if split.is_empty() {
        return Err(Error::Invalid {
            op: "make_batches",
            msg: "empty split".into(),
        });
    }
    if ctr_enabled && (batch_size < 2 || split.len() < 2) {
        return Err(Error::Invalid {
            op: "make_batches",
            msg: "contrastive loss needs at least 2 examples per batch".into(),
        });
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by_key(|&i| (split[i].src.len(), split[i].speech_len, i));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0usize;
    for &i in &order {
        let cost = split[i].src.len() + split[i].tgt.len();
        let over_tokens = max_tokens.is_some_and(|m| current_tokens + cost > m);
        if !current.is_empty() && (current.len() >= batch_size || over_tokens) {
            groups.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += cost;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    // A trailing singleton cannot serve in-batch negatives; merge it back.
    if ctr_enabled {
        if let Some(last) = groups.last() {
            if last.len() == 1 && groups.len() >= 2 {
                let single = groups.pop().unwrap();
                groups.last_mut().unwrap().extend(single);
            }
        }
    }
    if shuffle {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        groups.shuffle(&mut rng);
    }
    Ok(groups
        .iter()
        .map(|g| {
            let refs: Vec<&Triplet> = g.iter().map(|&i| &split[i]).collect();
            Batch::from_triplets(&refs, feature_dim)
        })
        .collect())
}

const CORPUS_MAGIC: &str = "stlab-corpus";
const CORPUS_VERSION: u32 = 1;

/// Write a split to a line-oriented file: a header, then one record per
/// triplet (`speech_len;base64(f32 frames);src ids;tgt ids`).
pub fn write_corpus(path: &Path, spec: &SyntheticLanguageSpec, triplets: &[Triplet]) -> Result<()> {
    use base64::Engine;
    let engine = base64::engine::general_purpose::STANDARD;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{} v{} vocab={} feat={}",
        CORPUS_MAGIC, CORPUS_VERSION, spec.vocab_size, spec.feature_dim
    )?;
    for t in triplets {
        let mut bytes = Vec::with_capacity(t.speech.len() * 4);
        for &v in &t.speech {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        writeln!(
            w,
            "{};{};{};{}",
            t.speech_len,
            engine.encode(&bytes),
            join_ids(&t.src),
            join_ids(&t.tgt)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Read a split written by [`write_corpus`]. Returns the header values too.
pub fn read_corpus(path: &Path) -> Result<(usize, usize, Vec<Triplet>)> {
    use base64::Engine;
    let engine = base64::engine::general_purpose::STANDARD;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Corpus {
            line: 1,
            msg: "missing header".into(),
        })?;
    let (vocab_size, feature_dim) = parse_header(&header)?;
    let mut triplets = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(';');
        let speech_len: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(line_no, "bad speech length"))?;
        let blob = parts.next().ok_or_else(|| corrupt(line_no, "missing feature block"))?;
        let bytes = engine
            .decode(blob)
            .map_err(|e| corrupt(line_no, &format!("feature block: {e}")))?;
        if bytes.len() != speech_len * feature_dim * 4 {
            return Err(corrupt(
                line_no,
                &format!(
                    "feature block holds {} bytes, expected {}",
                    bytes.len(),
                    speech_len * feature_dim * 4
                ),
            ));
        }
        let speech: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let src = parse_ids(parts.next(), line_no)?;
        let tgt = parse_ids(parts.next(), line_no)?;
        if parts.next().is_some() {
            return Err(corrupt(line_no, "trailing fields"));
        }
        triplets.push(Triplet {
            speech,
            speech_len,
            src,
            tgt,
        });
    }
    Ok((vocab_size, feature_dim, triplets))
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad = || Error::Corpus {
        line: 1,
        msg: format!("bad header: {header:?}"),
    };
    if fields.len() != 4 || fields[0] != CORPUS_MAGIC || fields[1] != format!("v{CORPUS_VERSION}") {
        return Err(bad());
    }
    let vocab = fields[2]
        .strip_prefix("vocab=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(bad)?;
    let feat = fields[3]
        .strip_prefix("feat=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(bad)?;
    Ok((vocab, feat))
}

fn parse_ids(field: Option<&str>, line_no: usize) -> Result<Vec<usize>> {
    let field = field.ok_or_else(|| corrupt(line_no, "missing token list"))?;
    field
        .split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| corrupt(line_no, &format!("bad token id {tok:?}")))
        })
        .collect()
}

fn corrupt(line: usize, msg: &str) -> Error {
    Error::Corpus {
        line,
        msg: msg.to_string(),
    }
}
