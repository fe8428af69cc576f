//! Transformer building blocks shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::ModelParams;
use crate::error::Result;
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention links. Finite so that a
/// fully masked row still produces defined (if useless) outputs.
const MASK_VALUE: f64 = -1e30;

/// Sinusoidal positional encodings `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(&[len, d], data).expect("positional encoding shape")
}

/// Inverted dropout: seeded Bernoulli mask times `1/(1-rate)`. Identity at
/// eval time or rate zero.
pub fn dropout(x: &Tensor, rate: f64, train: bool, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask)?;
    x.dropout_mask_apply(&mask)
}

/// `x @ W + b` with parameters at `{prefix}.weight` / `{prefix}.bias`.
pub fn linear(params: &ModelParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.matmul(params.get(&format!("{prefix}.weight")))?
        .add(params.get(&format!("{prefix}.bias")))
}

/// Layer norm with parameters at `{prefix}.gamma` / `{prefix}.beta`.
pub fn norm(params: &ModelParams, prefix: &str, x: &Tensor, eps: f64) -> Result<Tensor> {
    x.layer_norm(
        params.get(&format!("{prefix}.gamma")),
        params.get(&format!("{prefix}.beta")),
        eps,
    )
}

/// Multi-head attention. `query` is `[Tq, d]`, `memory` is `[Tk, d]`.
/// `key_mask[j] == false` hides memory position `j`; `causal` restricts
/// query position `t` to keys `<= t` (self-attention only).
pub fn attention(
    params: &ModelParams,
    prefix: &str,
    query: &Tensor,
    memory: &Tensor,
    key_mask: Option<&[bool]>,
    causal: bool,
    n_heads: usize,
) -> Result<Tensor> {
    let d = query.shape()[1];
    let dh = d / n_heads;
    let tq = query.shape()[0];
    let tk = memory.shape()[0];

    let q = linear(params, &format!("{prefix}.q"), query)?;
    let k = linear(params, &format!("{prefix}.k"), memory)?;
    let v = linear(params, &format!("{prefix}.v"), memory)?;

    let add_mask = build_mask(tq, tk, key_mask, causal);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice(1, h * dh, (h + 1) * dh)?;
        let kh = k.slice(1, h * dh, (h + 1) * dh)?;
        let vh = v.slice(1, h * dh, (h + 1) * dh)?;
        let mut scores = qh
            .matmul(&kh.transpose()?)?
            .scale(1.0 / (dh as f64).sqrt())?;
        if let Some(mask) = &add_mask {
            scores = scores.add(mask)?;
        }
        let attn = scores.softmax(1)?;
        heads.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let ctx = Tensor::concat(&refs, 1)?;
    linear(params, &format!("{prefix}.o"), &ctx)
}

fn build_mask(tq: usize, tk: usize, key_mask: Option<&[bool]>, causal: bool) -> Option<Tensor> {
    if key_mask.is_none() && !causal {
        return None;
    }
    let mut data = vec![0.0; tq * tk];
    let mut any = false;
    for t in 0..tq {
        for j in 0..tk {
            let hidden = (causal && j > t) || key_mask.is_some_and(|m| !m[j]);
            if hidden {
                data[t * tk + j] = MASK_VALUE;
                any = true;
            }
        }
    }
    if any {
        Some(Tensor::from_vec(&[tq, tk], data).expect("mask shape"))
    } else {
        None
    }
}

/// Position-wise feed-forward: `relu(x W1 + b1) W2 + b2`.
pub fn ffn(params: &ModelParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = linear(params, &format!("{prefix}.w1"), x)?.relu()?;
    linear(params, &format!("{prefix}.w2"), &h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(3, 4);
        // pos 0: sin 0, cos 0 pairs
        assert_eq!(pe.get(0), 0.0);
        assert_eq!(pe.get(1), 1.0);
        assert_eq!(pe.get(2), 0.0);
        assert_eq!(pe.get(3), 1.0);
        // pos 1, i=0: sin(1), cos(1)
        assert!((pe.get(4) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(5) - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let y = dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_seeded_determinism() {
        let x = Tensor::from_vec(&[4, 4], vec![1.0; 16]).unwrap();
        let a = dropout(&x, 0.3, true, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = dropout(&x, 0.3, true, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let kept: Vec<f64> = a.to_vec().into_iter().filter(|&v| v != 0.0).collect();
        let scale = 1.0 / 0.7;
        assert!(kept.iter().all(|&v| (v - scale).abs() < 1e-12));
    }
}
