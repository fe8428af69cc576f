//! The translation model: convolutional speech encoder, tied word embedding,
//! shared pre-LN Transformer encoder, Transformer decoder.
//!
//! One parameter set serves all three tasks (ST, ASR, MT); the decoder
//! learns which task it is doing from the BOS tag that starts the target.
//! The speech front end is two strided convolutions over precomputed
//! features, so the total time downsampling is `stride^2`. Sinusoidal
//! positions are added at the shared encoder/decoder inputs, which keeps
//! the pooled low-level representations (conv output, raw embeddings)
//! position-free.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::positional_encoding;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::augment::{self, CutoffSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::{attention, dropout, ffn, linear, norm};

/// Which representation pair the bridge loss contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastLevel {
    /// Mean-pooled speech-encoder output vs mean-pooled word embeddings.
    Low,
    /// Mean-pooled shared-encoder output for both modalities.
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub feature_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 40,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            dropout: 0.1,
            feature_dim: 8,
            conv_kernel: 5,
            conv_stride: 2,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < crate::vocab::FIRST_CONTENT + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.conv_kernel == 0 || self.conv_stride == 0 {
            return Err(Error::Config("conv kernel and stride must be positive".into()));
        }
        Ok(())
    }

    /// Output length of one conv layer for input length `t`.
    pub fn conv_out_len(&self, t: usize) -> usize {
        let pad = self.conv_kernel / 2;
        (t + 2 * pad - self.conv_kernel) / self.conv_stride + 1
    }

    /// Time length of the speech representation for `t` input frames.
    pub fn speech_out_len(&self, t: usize) -> usize {
        self.conv_out_len(self.conv_out_len(t))
    }

    /// Minimum accepted speech length.
    pub fn min_speech_len(&self) -> usize {
        self.conv_stride * self.conv_stride
    }
}

/// Named parameter tensors, ordered by path.
#[derive(Clone)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Deterministic seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let k = config.conv_kernel;
        let mut map = BTreeMap::new();

        let put = |map: &mut BTreeMap<String, Tensor>, path: &str, t: Tensor| {
            map.insert(path.to_string(), t);
        };

        // Tied embedding, also the output projection.
        put(
            &mut map,
            "embed.weight",
            normal(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        // Speech front end.
        put(
            &mut map,
            "speech.conv0.weight",
            xavier(&[d, config.feature_dim, k], config.feature_dim * k, d * k, &mut rng),
        );
        put(&mut map, "speech.conv0.bias", zeros(&[d]));
        put(
            &mut map,
            "speech.conv1.weight",
            xavier(&[d, d, k], d * k, d * k, &mut rng),
        );
        put(&mut map, "speech.conv1.bias", zeros(&[d]));
        put(&mut map, "speech.norm.gamma", ones(&[d]));
        put(&mut map, "speech.norm.beta", zeros(&[d]));

        for i in 0..config.n_enc_layers {
            init_attention(&mut map, &format!("enc.{i}.attn"), d, &mut rng);
            init_norm(&mut map, &format!("enc.{i}.attn_norm"), d);
            init_ffn(&mut map, &format!("enc.{i}.ffn"), d, config.ffn_dim, &mut rng);
            init_norm(&mut map, &format!("enc.{i}.ffn_norm"), d);
        }
        init_norm(&mut map, "enc.final_norm", d);

        for i in 0..config.n_dec_layers {
            init_attention(&mut map, &format!("dec.{i}.self_attn"), d, &mut rng);
            init_norm(&mut map, &format!("dec.{i}.self_norm"), d);
            init_attention(&mut map, &format!("dec.{i}.cross_attn"), d, &mut rng);
            init_norm(&mut map, &format!("dec.{i}.cross_norm"), d);
            init_ffn(&mut map, &format!("dec.{i}.ffn"), d, config.ffn_dim, &mut rng);
            init_norm(&mut map, &format!("dec.{i}.ffn_norm"), d);
        }
        init_norm(&mut map, "dec.final_norm", d);

        // Frame classifier for the CTC bridge (vocab + trailing blank).
        put(&mut map, "ctc.weight", xavier(&[d, v + 1], d, v + 1, &mut rng));
        put(&mut map, "ctc.bias", zeros(&[v + 1]));

        Ok(ModelParams { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> ModelParams {
        ModelParams { map }
    }

    pub fn get(&self, path: &str) -> &Tensor {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("param shape")
}

fn ones(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![1.0; shape.iter().product()]).expect("param shape")
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("normal std");
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("param shape")
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("param shape")
}

fn init_attention(map: &mut BTreeMap<String, Tensor>, prefix: &str, d: usize, rng: &mut ChaCha20Rng) {
    for proj in ["q", "k", "v", "o"] {
        map.insert(format!("{prefix}.{proj}.weight"), xavier(&[d, d], d, d, rng));
        map.insert(format!("{prefix}.{proj}.bias"), zeros(&[d]));
    }
}

fn init_ffn(map: &mut BTreeMap<String, Tensor>, prefix: &str, d: usize, ffn_dim: usize, rng: &mut ChaCha20Rng) {
    map.insert(format!("{prefix}.w1.weight"), xavier(&[d, ffn_dim], d, ffn_dim, rng));
    map.insert(format!("{prefix}.w1.bias"), zeros(&[ffn_dim]));
    map.insert(format!("{prefix}.w2.weight"), xavier(&[ffn_dim, d], ffn_dim, d, rng));
    map.insert(format!("{prefix}.w2.bias"), zeros(&[d]));
}

fn init_norm(map: &mut BTreeMap<String, Tensor>, prefix: &str, d: usize) {
    map.insert(format!("{prefix}.gamma"), ones(&[d]));
    map.insert(format!("{prefix}.beta"), zeros(&[d]));
}

const LN_EPS: f64 = 1e-5;

/// Speech front end: two strided convolutions with GELU, then layer norm.
/// `s` is `[T, feature_dim]` at true length. The optional cut-off erases
/// rows/columns of the output representation (training only).
pub fn speech_encode(
    s: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    train: bool,
    cutoff: Option<&CutoffSpec>,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    let t = s.shape()[0];
    if s.shape().len() != 2 || s.shape()[1] != config.feature_dim {
        return Err(Error::Invalid {
            op: "speech_encode",
            msg: format!(
                "expected [T, {}] features, got {:?}",
                config.feature_dim,
                s.shape()
            ),
        });
    }
    if t < config.min_speech_len() {
        return Err(Error::TooShort {
            op: "speech_encode",
            len: t,
            min: config.min_speech_len(),
        });
    }
    let h = s
        .conv1d(
            params.get("speech.conv0.weight"),
            Some(params.get("speech.conv0.bias")),
            config.conv_stride,
        )?
        .gelu()?;
    let h = h
        .conv1d(
            params.get("speech.conv1.weight"),
            Some(params.get("speech.conv1.bias")),
            config.conv_stride,
        )?
        .gelu()?;
    let h = h.layer_norm(
        params.get("speech.norm.gamma"),
        params.get("speech.norm.beta"),
        LN_EPS,
    )?;
    if train {
        if let Some(spec) = cutoff {
            return augment::cutoff(&h, spec.axis, spec.rate, rng);
        }
    }
    Ok(h)
}

/// Token embedding rows scaled by `sqrt(d_model)`.
pub fn embed_text(x: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Invalid {
            op: "embed_text",
            msg: "empty token sequence".into(),
        });
    }
    params
        .get("embed.weight")
        .embedding_lookup(x)?
        .scale((config.d_model as f64).sqrt())
}

/// Shared pre-LN Transformer encoder over either modality's sequence.
/// Adds sinusoidal positions at the input. Padded key positions are
/// excluded from attention.
pub fn encode(
    h_in: &Tensor,
    pad_mask: &[bool],
    params: &ModelParams,
    config: &ModelConfig,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    let t = h_in.shape()[0];
    if pad_mask.len() != t {
        return Err(Error::Invalid {
            op: "encode",
            msg: format!("pad mask length {} vs sequence {}", pad_mask.len(), t),
        });
    }
    if !pad_mask.iter().any(|&m| m) {
        return Err(Error::AllPadded { op: "encode" });
    }
    let rate = config.dropout;
    let pe = positional_encoding(t, config.d_model);
    let mut x = h_in.add(&pe)?;
    x = dropout(&x, rate, train, rng)?;
    for i in 0..config.n_enc_layers {
        let p = format!("enc.{i}");
        let h = norm(params, &format!("{p}.attn_norm"), &x, LN_EPS)?;
        let h = attention(
            params,
            &format!("{p}.attn"),
            &h,
            &h,
            Some(pad_mask),
            false,
            config.n_heads,
        )?;
        x = x.add(&dropout(&h, rate, train, rng)?)?;
        let h = norm(params, &format!("{p}.ffn_norm"), &x, LN_EPS)?;
        let h = ffn(params, &format!("{p}.ffn"), &h)?;
        x = x.add(&dropout(&h, rate, train, rng)?)?;
    }
    norm(params, "enc.final_norm", &x, LN_EPS)
}

/// Teacher-forced decoder pass: logits for every prefix position.
/// Position `t` attends causally to `y_prefix[..=t]` and to all non-pad
/// encoder states. Output projection is tied to the embedding.
pub fn decode_teacher_forced(
    y_prefix: &[usize],
    enc_states: &Tensor,
    enc_pad_mask: &[bool],
    params: &ModelParams,
    config: &ModelConfig,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    if y_prefix.is_empty() {
        return Err(Error::Invalid {
            op: "decode_teacher_forced",
            msg: "empty prefix (must start with a BOS tag)".into(),
        });
    }
    let rate = config.dropout;
    let t = y_prefix.len();
    let emb = embed_text(y_prefix, params, config)?;
    let pe = positional_encoding(t, config.d_model);
    let mut x = emb.add(&pe)?;
    x = dropout(&x, rate, train, rng)?;
    for i in 0..config.n_dec_layers {
        let p = format!("dec.{i}");
        let h = norm(params, &format!("{p}.self_norm"), &x, LN_EPS)?;
        let h = attention(params, &format!("{p}.self_attn"), &h, &h, None, true, config.n_heads)?;
        x = x.add(&dropout(&h, rate, train, rng)?)?;
        let h = norm(params, &format!("{p}.cross_norm"), &x, LN_EPS)?;
        let h = attention(
            params,
            &format!("{p}.cross_attn"),
            &h,
            enc_states,
            Some(enc_pad_mask),
            false,
            config.n_heads,
        )?;
        x = x.add(&dropout(&h, rate, train, rng)?)?;
        let h = norm(params, &format!("{p}.ffn_norm"), &x, LN_EPS)?;
        let h = ffn(params, &format!("{p}.ffn"), &h)?;
        x = x.add(&dropout(&h, rate, train, rng)?)?;
    }
    let x = norm(params, "dec.final_norm", &x, LN_EPS)?;
    x.matmul(&params.get("embed.weight").transpose()?)
}

/// Last-position logits for an incremental decode step.
pub fn decode_step(
    y_prefix: &[usize],
    enc_states: &Tensor,
    enc_pad_mask: &[bool],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let logits = decode_teacher_forced(
        y_prefix,
        enc_states,
        enc_pad_mask,
        params,
        config,
        false,
        &mut rng,
    )?;
    logits.slice(0, y_prefix.len() - 1, y_prefix.len())
}

/// Mean over non-pad time positions.
pub fn pooled_representation(seq: &Tensor, pad_mask: &[bool]) -> Result<Tensor> {
    seq.mean_pool_time(pad_mask)
}

/// Per-frame log-probabilities over vocab+blank for the CTC bridge,
/// computed from the speech representation.
pub fn ctc_log_probs(rep: &Tensor, params: &ModelParams) -> Result<Tensor> {
    linear(params, "ctc", rep)?.log_softmax(1)
}

/// Pooled speech representation at the requested contrast level.
pub fn speech_representation(
    s: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    level: ContrastLevel,
    train: bool,
    cutoff: Option<&CutoffSpec>,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    let rep = speech_encode(s, params, config, train, cutoff, rng)?;
    let mask = vec![true; rep.shape()[0]];
    match level {
        ContrastLevel::Low => pooled_representation(&rep, &mask),
        ContrastLevel::High => {
            let enc = encode(&rep, &mask, params, config, train, rng)?;
            pooled_representation(&enc, &mask)
        }
    }
}

/// Pooled transcript representation at the requested contrast level.
pub fn text_representation(
    x: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    level: ContrastLevel,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    let emb = embed_text(x, params, config)?;
    let mask = vec![true; x.len()];
    match level {
        ContrastLevel::Low => pooled_representation(&emb, &mask),
        ContrastLevel::High => {
            let enc = encode(&emb, &mask, params, config, train, rng)?;
            pooled_representation(&enc, &mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            feature_dim: 4,
            conv_kernel: 5,
            conv_stride: 2,
            max_len: 64,
        }
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0)
    }

    fn random_speech(t: usize, f: usize, seed: u64) -> Tensor {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_vec(&[t, f], (0..t * f).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn speech_encode_downsamples_by_stride_squared() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        let s = random_speech(16, 4, 3);
        let a = speech_encode(&s, &params, &config, false, None, &mut rng()).unwrap();
        assert_eq!(a.shape(), &[4, 8]);
        assert_eq!(config.speech_out_len(16), 4);
    }

    #[test]
    fn speech_encode_rejects_short_input() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        let s = random_speech(3, 4, 3);
        match speech_encode(&s, &params, &config, false, None, &mut rng()) {
            Err(Error::TooShort { min, .. }) => assert_eq!(min, 4),
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_zero_bias_propagates_zeros() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        // biases and layer-norm beta start at zero, gamma at one
        let s = Tensor::zeros(&[8, 4]);
        let a = speech_encode(&s, &params, &config, false, None, &mut rng()).unwrap();
        for v in a.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn speech_encode_golden_snapshot() {
        // Frozen from this implementation's first validated run; guards
        // against silent numeric drift in the conv/gelu/norm stack.
        let config = tiny_config();
        let params = ModelParams::init(&config, 7).unwrap();
        let s = random_speech(12, 4, 11);
        let a = speech_encode(&s, &params, &config, false, None, &mut rng()).unwrap();
        assert_eq!(a.shape(), &[3, 8]);
        let got = a.to_vec();
        let golden = [
            1.5558203228782913e-1,
            1.4023057203594178e0,
            2.0842773732296399e-1,
            -2.0432137211951176e0,
            -6.6143690403552757e-1,
            -1.9310506120590473e-1,
            -5.8383596820241598e-3,
            1.1372785561483629e0,
        ];
        for (g, w) in got.iter().take(8).zip(&golden) {
            assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
        }
    }

    #[test]
    fn embedding_lookup_and_scaling() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 2).unwrap();
        let e = embed_text(&[5], &params, &config).unwrap();
        let table = params.get("embed.weight").to_vec();
        let d = config.d_model;
        let scale = (d as f64).sqrt();
        for j in 0..d {
            assert!((e.get(j) - scale * table[5 * d + j]).abs() < 1e-12);
        }
        // repeated token -> identical rows
        let e2 = embed_text(&[7, 7], &params, &config).unwrap();
        let v = e2.to_vec();
        assert_eq!(&v[..d], &v[d..]);
        // out of range names the position
        match embed_text(&[1, 99], &params, &config) {
            Err(Error::TokenOutOfRange { pos, .. }) => assert_eq!(pos, 1),
            other => panic!("expected TokenOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn embedding_rows_are_distinct() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 3).unwrap();
        let ids: Vec<usize> = (0..config.vocab_size).collect();
        let e = embed_text(&ids, &params, &config).unwrap();
        let v = e.to_vec();
        let d = config.d_model;
        for i in 0..config.vocab_size {
            for j in i + 1..config.vocab_size {
                assert_ne!(&v[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
            }
        }
    }

    #[test]
    fn encoder_pad_positions_do_not_leak() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 4).unwrap();
        let d = config.d_model;
        let mut a = random_speech(5, d, 5).to_vec();
        let mask = vec![true, true, true, false, false];
        let x1 = Tensor::from_vec(&[5, d], a.clone()).unwrap();
        let out1 = encode(&x1, &mask, &params, &config, false, &mut rng()).unwrap();
        // permute the two pad rows' contents
        for j in 0..d {
            a.swap(3 * d + j, 4 * d + j);
        }
        let x2 = Tensor::from_vec(&[5, d], a).unwrap();
        let out2 = encode(&x2, &mask, &params, &config, false, &mut rng()).unwrap();
        let (v1, v2) = (out1.to_vec(), out2.to_vec());
        for t in 0..3 {
            for j in 0..d {
                assert!(
                    (v1[t * d + j] - v2[t * d + j]).abs() < 1e-12,
                    "non-pad output changed at ({t},{j})"
                );
            }
        }
        assert!(matches!(
            encode(&x1, &[false; 5], &params, &config, false, &mut rng()),
            Err(Error::AllPadded { .. })
        ));
    }

    #[test]
    fn single_position_encoder_matches_hand_unrolled() {
        // d_model=2, 1 head, 1 layer: self-attention over one position is a
        // softmax over a single score, so the context is exactly v(x).
        let config = ModelConfig {
            vocab_size: 8,
            d_model: 2,
            n_heads: 1,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 4,
            dropout: 0.0,
            feature_dim: 2,
            conv_kernel: 3,
            conv_stride: 2,
            max_len: 8,
            ..Default::default()
        };
        let params = ModelParams::init(&config, 9).unwrap();
        let x_raw = [0.3, -0.7];
        let x = Tensor::from_vec(&[1, 2], x_raw.to_vec()).unwrap();
        let got = encode(&x, &[true], &params, &config, false, &mut rng()).unwrap();

        // Hand-unrolled: pe(0) = [sin 0, cos 0] = [0, 1]
        let h0 = [x_raw[0], x_raw[1] + 1.0];
        let w = |p: &str| params.get(p).to_vec();
        let ln = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            vec![
                (v[0] - mean) * inv * g[0] + b[0],
                (v[1] - mean) * inv * g[1] + b[1],
            ]
        };
        let lin = |v: &[f64], wt: &[f64], b: &[f64], n_in: usize, n_out: usize| -> Vec<f64> {
            (0..n_out)
                .map(|o| (0..n_in).map(|i| v[i] * wt[i * n_out + o]).sum::<f64>() + b[o])
                .collect()
        };
        let hn = ln(&h0, &w("enc.0.attn_norm.gamma"), &w("enc.0.attn_norm.beta"));
        // one position: attention output = o-proj(v-proj(hn))
        let vproj = lin(&hn, &w("enc.0.attn.v.weight"), &w("enc.0.attn.v.bias"), 2, 2);
        let attn = lin(&vproj, &w("enc.0.attn.o.weight"), &w("enc.0.attn.o.bias"), 2, 2);
        let x1 = [h0[0] + attn[0], h0[1] + attn[1]];
        let fn_in = ln(&x1, &w("enc.0.ffn_norm.gamma"), &w("enc.0.ffn_norm.beta"));
        let mid = lin(&fn_in, &w("enc.0.ffn.w1.weight"), &w("enc.0.ffn.w1.bias"), 2, 4);
        let mid: Vec<f64> = mid.iter().map(|&v| v.max(0.0)).collect();
        let ffn_out = lin(&mid, &w("enc.0.ffn.w2.weight"), &w("enc.0.ffn.w2.bias"), 4, 2);
        let x2 = [x1[0] + ffn_out[0], x1[1] + ffn_out[1]];
        let want = ln(&x2, &w("enc.final_norm.gamma"), &w("enc.final_norm.beta"));
        for j in 0..2 {
            assert!(
                (got.get(j) - want[j]).abs() < 1e-12,
                "component {j}: got {}, want {}",
                got.get(j),
                want[j]
            );
        }
    }

    #[test]
    fn decoder_is_causal() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 6).unwrap();
        let enc = random_speech(4, config.d_model, 8);
        let mask = vec![true; 4];
        let y1 = [3usize, 5, 6, 7];
        let y2 = [3usize, 5, 9, 10]; // differs only after position 1
        let l1 = decode_teacher_forced(&y1, &enc, &mask, &params, &config, false, &mut rng())
            .unwrap()
            .to_vec();
        let l2 = decode_teacher_forced(&y2, &enc, &mask, &params, &config, false, &mut rng())
            .unwrap()
            .to_vec();
        let v = config.vocab_size;
        for t in 0..2 {
            for j in 0..v {
                assert!(
                    (l1[t * v + j] - l2[t * v + j]).abs() < 1e-12,
                    "logit ({t},{j}) depends on suffix"
                );
            }
        }
        // BOS-only prefix -> one logit row
        let one = decode_teacher_forced(&[3], &enc, &mask, &params, &config, false, &mut rng())
            .unwrap();
        assert_eq!(one.shape(), &[1, v]);
        // empty prefix is an error
        assert!(decode_teacher_forced(&[], &enc, &mask, &params, &config, false, &mut rng())
            .is_err());
    }

    #[test]
    fn shared_parameters_serve_all_tasks() {
        // the same tensor objects appear in speech, text, and decode graphs
        let config = tiny_config();
        let params = ModelParams::init(&config, 10).unwrap();
        let p2 = params.clone();
        assert!(Tensor::ptr_eq(params.get("embed.weight"), p2.get("embed.weight")));
    }

    #[test]
    fn encoder_grad_check() {
        let config = ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            feature_dim: 4,
            conv_kernel: 3,
            conv_stride: 2,
            max_len: 16,
            ..Default::default()
        };
        let params = ModelParams::init(&config, 12).unwrap();
        let x = {
            let mut r = ChaCha20Rng::seed_from_u64(13);
            Tensor::param(&[3, 8], (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mask = vec![true, true, true];
        let report = grad_check(
            &|inp| {
                let out = encode(&inp[0], &mask, &params, &config, false, &mut rng())?;
                let n = out.numel() as f64;
                out.mul(&out)?.sum()?.scale(1.0 / n)
            },
            std::slice::from_ref(&x),
            1e-3,
        )
        .unwrap();
        assert!(report.passed(1e-4), "encoder grad err {}", report.max_rel_err);
    }

    #[test]
    fn decoder_grad_check_through_speech_path() {
        let config = ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            feature_dim: 3,
            conv_kernel: 3,
            conv_stride: 2,
            max_len: 16,
            ..Default::default()
        };
        let params = ModelParams::init(&config, 14).unwrap();
        let s = {
            let mut r = ChaCha20Rng::seed_from_u64(15);
            Tensor::param(&[8, 3], (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let report = grad_check(
            &|inp| {
                let a = speech_encode(&inp[0], &params, &config, false, None, &mut rng())?;
                let mask = vec![true; a.shape()[0]];
                let enc = encode(&a, &mask, &params, &config, false, &mut rng())?;
                let logits =
                    decode_teacher_forced(&[3, 5], &enc, &mask, &params, &config, false, &mut rng())?;
                let n = logits.numel() as f64;
                logits.mul(&logits)?.sum()?.scale(1.0 / n)
            },
            std::slice::from_ref(&s),
            1e-3,
        )
        .unwrap();
        assert!(report.passed(1e-4), "decoder grad err {}", report.max_rel_err);
    }

    #[test]
    fn pooled_representation_examples() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(
            pooled_representation(&x, &[true, true]).unwrap().to_vec(),
            vec![2.0, 4.0]
        );
        let one = Tensor::from_vec(&[1, 2], vec![4.0, 2.0]).unwrap();
        assert_eq!(pooled_representation(&one, &[true]).unwrap().to_vec(), vec![4.0, 2.0]);
    }
}
