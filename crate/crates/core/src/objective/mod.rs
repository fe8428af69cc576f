//! Loss functions: label-smoothed cross-entropy for the three sequence
//! tasks, the cross-modal contrastive loss, and the L2 / CTC alternatives,
//! plus the weighted combiner.

mod ctc;

pub use ctc::{ctc_loss, min_ctc_frames};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ContrastLevel;
use crate::tensor::Tensor;

/// The per-batch loss scalars and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_st: f64,
    pub l_asr: f64,
    pub l_mt: f64,
    pub l_ctr: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.l_st.is_finite()
            && self.l_asr.is_finite()
            && self.l_mt.is_finite()
            && self.l_ctr.is_finite()
            && self.total.is_finite()
    }
}

/// Contrastive loss knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub level: ContrastLevel,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.02,
            level: ContrastLevel::Low,
        }
    }
}

/// Token-sum of the label-smoothed negative log-likelihood over non-pad
/// positions, plus the position count. Building block for batch-level
/// token means.
pub fn cross_entropy_sum(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    label_smoothing: f64,
) -> Result<(Tensor, usize)> {
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::Invalid {
            op: "cross_entropy",
            msg: format!("label smoothing {label_smoothing} outside [0,1)"),
        });
    }
    let n = logits.shape()[0];
    if targets.len() != n || mask.len() != n {
        return Err(Error::Invalid {
            op: "cross_entropy",
            msg: format!(
                "{} logit rows vs {} targets / {} mask entries",
                n,
                targets.len(),
                mask.len()
            ),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::AllPadded {
            op: "cross_entropy",
        });
    }
    let vocab = logits.shape()[1];
    let lp = logits.log_softmax(1)?;
    let picked = lp.gather_rows(targets)?;
    let row_mean = lp.sum_axis(1)?.scale(1.0 / vocab as f64)?;
    let per_pos = picked
        .scale(1.0 - label_smoothing)?
        .add(&row_mean.scale(label_smoothing)?)?;
    let mask_vec: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask_t = Tensor::from_vec(&[n], mask_vec)?;
    let sum = per_pos.mul(&mask_t)?.sum()?.scale(-1.0)?;
    Ok((sum, count))
}

/// Mean over non-pad target positions of the label-smoothed NLL:
/// `-[(1-eps) log p(target) + eps * mean_vocab log p]`.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    label_smoothing: f64,
) -> Result<Tensor> {
    let (sum, count) = cross_entropy_sum(logits, targets, mask, label_smoothing)?;
    sum.scale(1.0 / count as f64)
}

/// Multi-class N-pair contrastive loss over pooled representations.
///
/// For each pair `i` the positive is `v[i]` and the candidate set is the
/// whole batch `{v_j}` (the positive plus in-batch negatives); similarity
/// is cosine, sharpened by `1/temperature`. Each optional extra positive
/// `(i, v')` adds one more term with `v'` substituted as the positive
/// against the same negatives. The result is the mean over all terms.
pub fn contrastive_loss(
    u_batch: &Tensor,
    v_batch: &Tensor,
    temperature: f64,
    extra_positives: Option<&[(usize, Tensor)]>,
) -> Result<Tensor> {
    if u_batch.shape() != v_batch.shape() || u_batch.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: u_batch.shape().to_vec(),
            rhs: v_batch.shape().to_vec(),
        });
    }
    let n = u_batch.shape()[0];
    let d = u_batch.shape()[1];
    if n == 0 {
        return Err(Error::Invalid {
            op: "contrastive_loss",
            msg: "empty batch".into(),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::Invalid {
            op: "contrastive_loss",
            msg: format!("temperature {temperature} must be positive"),
        });
    }
    let un = u_batch.l2_normalize_rows()?;
    let vn = v_batch.l2_normalize_rows()?;
    let sims = un.matmul(&vn.transpose()?)?.scale(1.0 / temperature)?;
    let lp = sims.log_softmax(1)?;
    let diag_ids: Vec<usize> = (0..n).collect();
    let mut term_sum = lp.gather_rows(&diag_ids)?.sum()?;
    let mut term_count = n;

    if let Some(extras) = extra_positives {
        for (i, v_extra) in extras {
            if *i >= n {
                return Err(Error::Invalid {
                    op: "contrastive_loss",
                    msg: format!("extra positive index {i} out of range for batch {n}"),
                });
            }
            if v_extra.numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "contrastive_loss",
                    lhs: vec![d],
                    rhs: v_extra.shape().to_vec(),
                });
            }
            let vp = v_extra.reshape(&[1, d])?.l2_normalize_rows()?;
            // candidate rows: v' first, then every v_j with j != i
            let mut rows: Vec<Tensor> = vec![vp];
            if *i > 0 {
                rows.push(vn.slice(0, 0, *i)?);
            }
            if *i + 1 < n {
                rows.push(vn.slice(0, *i + 1, n)?);
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let candidates = Tensor::concat(&refs, 0)?;
            let ui = un.slice(0, *i, *i + 1)?;
            let sims_i = ui
                .matmul(&candidates.transpose()?)?
                .scale(1.0 / temperature)?;
            let term = sims_i.log_softmax(1)?.gather_rows(&[0])?.sum()?;
            term_sum = term_sum.add(&term)?;
            term_count += 1;
        }
    }
    term_sum.scale(-1.0 / term_count as f64)
}

/// Mean over pairs of the squared Euclidean distance between rows.
pub fn l2_loss(u_batch: &Tensor, v_batch: &Tensor) -> Result<Tensor> {
    if u_batch.shape() != v_batch.shape() {
        return Err(Error::ShapeMismatch {
            op: "l2_loss",
            lhs: u_batch.shape().to_vec(),
            rhs: v_batch.shape().to_vec(),
        });
    }
    let n = u_batch.shape()[0].max(1);
    let diff = u_batch.sub(v_batch)?;
    diff.mul(&diff)?.sum()?.scale(1.0 / n as f64)
}

/// Weighted total of Eq-style multi-task losses. `lambda == 0` (or a
/// missing bridge term) disables the bridge exactly.
pub fn combine(
    l_st: &Tensor,
    l_asr: &Tensor,
    l_mt: &Tensor,
    bridge: Option<&Tensor>,
    lambda: f64,
) -> Result<(Tensor, LossBundle)> {
    if lambda < 0.0 {
        return Err(Error::Invalid {
            op: "combine",
            msg: format!("lambda {lambda} must be nonnegative"),
        });
    }
    for (name, t) in [("st", l_st), ("asr", l_asr), ("mt", l_mt)] {
        if t.item() < 0.0 {
            return Err(Error::Invalid {
                op: "combine",
                msg: format!("negative {name} loss {}", t.item()),
            });
        }
    }
    if let Some(b) = bridge {
        if b.item() < 0.0 {
            return Err(Error::Invalid {
                op: "combine",
                msg: format!("negative bridge loss {}", b.item()),
            });
        }
    }
    let mut total = l_st.add(l_asr)?.add(l_mt)?;
    let l_ctr = bridge.map(|b| b.item()).unwrap_or(0.0);
    if lambda > 0.0 {
        if let Some(b) = bridge {
            total = total.add(&b.scale(lambda)?)?;
        }
    }
    let bundle = LossBundle {
        l_st: l_st.item(),
        l_asr: l_asr.item(),
        l_mt: l_mt.item(),
        l_ctr,
        lambda,
        total: total.item(),
    };
    Ok((total, bundle))
}
