//! Forward primitives and their backward rules.
//!
//! The primitive set is exactly what the model and losses need: elementwise
//! arithmetic, matmul, conv1d, activations, softmax family, layer norm,
//! masked time pooling, embedding lookup, shape plumbing, and the small
//! reducers the loss functions are built from. No general broadcasting —
//! only scalar-tensor and bias-add, so every backward rule stays small.

use super::{check_finite, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Lane decomposition of a 1-D or 2-D tensor along `axis`.
/// Element `k` of lane `l` lives at `l * lane_stride + k * stride`.
struct Lanes {
    lanes: usize,
    len: usize,
    stride: usize,
    lane_stride: usize,
}

fn lanes(shape: &[usize], axis: usize, op: &'static str) -> Result<Lanes> {
    match (shape.len(), axis) {
        (1, 0) => Ok(Lanes {
            lanes: 1,
            len: shape[0],
            stride: 1,
            lane_stride: 0,
        }),
        (2, 0) => Ok(Lanes {
            lanes: shape[1],
            len: shape[0],
            stride: shape[1],
            lane_stride: 1,
        }),
        (2, 1) => Ok(Lanes {
            lanes: shape[0],
            len: shape[1],
            stride: 1,
            lane_stride: shape[1],
        }),
        _ => Err(Error::Invalid {
            op,
            msg: format!("axis {} invalid for shape {:?}", axis, shape),
        }),
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tensor {
    /// Elementwise sum. Also accepts a scalar rhs or, for a 2-D lhs, a 1-D
    /// bias whose length matches the last dimension.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_finite("add", &self.borrow_data())?;
        check_finite("add", &other.borrow_data())?;
        let a = self.clone();
        let b = other.clone();
        if self.shape() == other.shape() {
            let out: Vec<f64> = {
                let (da, db) = (self.borrow_data(), other.borrow_data());
                da.iter().zip(db.iter()).map(|(x, y)| x + y).collect()
            };
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                "add",
                vec![a.clone(), b.clone()],
                Box::new(move |g, sink| {
                    if let Some(ga) = sink.slot(&a) {
                        for (s, v) in ga.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                    if let Some(gb) = sink.slot(&b) {
                        for (s, v) in gb.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                }),
            ));
        }
        if other.numel() == 1 {
            let s = other.item();
            let out: Vec<f64> = self.borrow_data().iter().map(|x| x + s).collect();
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                "add",
                vec![a.clone(), b.clone()],
                Box::new(move |g, sink| {
                    if let Some(ga) = sink.slot(&a) {
                        for (s, v) in ga.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                    if let Some(gb) = sink.slot(&b) {
                        gb[0] += g.iter().sum::<f64>();
                    }
                }),
            ));
        }
        if self.shape().len() == 2 && other.shape().len() == 1 && self.shape()[1] == other.shape()[0]
        {
            let (r, c) = (self.shape()[0], self.shape()[1]);
            let out: Vec<f64> = {
                let (da, db) = (self.borrow_data(), other.borrow_data());
                (0..r * c).map(|i| da[i] + db[i % c]).collect()
            };
            return Ok(Tensor::from_op(
                vec![r, c],
                out,
                "add",
                vec![a.clone(), b.clone()],
                Box::new(move |g, sink| {
                    if let Some(ga) = sink.slot(&a) {
                        for (s, v) in ga.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                    if let Some(gb) = sink.slot(&b) {
                        for (i, v) in g.iter().enumerate() {
                            gb[i % c] += v;
                        }
                    }
                }),
            ));
        }
        Err(shape_err("add", self, other))
    }

    /// `self - other`, same broadcast rules as [`Tensor::add`].
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0)?)
    }

    /// Elementwise product. Accepts a scalar rhs.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_finite("mul", &self.borrow_data())?;
        check_finite("mul", &other.borrow_data())?;
        let a = self.clone();
        let b = other.clone();
        if self.shape() == other.shape() {
            let out: Vec<f64> = {
                let (da, db) = (self.borrow_data(), other.borrow_data());
                da.iter().zip(db.iter()).map(|(x, y)| x * y).collect()
            };
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                "mul",
                vec![a.clone(), b.clone()],
                Box::new(move |g, sink| {
                    {
                        let db = b.borrow_data();
                        if let Some(ga) = sink.slot(&a) {
                            for i in 0..g.len() {
                                ga[i] += g[i] * db[i];
                            }
                        }
                    }
                    let da = a.borrow_data();
                    if let Some(gb) = sink.slot(&b) {
                        for i in 0..g.len() {
                            gb[i] += g[i] * da[i];
                        }
                    }
                }),
            ));
        }
        if other.numel() == 1 {
            let s = other.item();
            let out: Vec<f64> = self.borrow_data().iter().map(|x| x * s).collect();
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                "mul",
                vec![a.clone(), b.clone()],
                Box::new(move |g, sink| {
                    {
                        let s = b.item();
                        if let Some(ga) = sink.slot(&a) {
                            for i in 0..g.len() {
                                ga[i] += g[i] * s;
                            }
                        }
                    }
                    let da = a.borrow_data();
                    if let Some(gb) = sink.slot(&b) {
                        gb[0] += g.iter().zip(da.iter()).map(|(x, y)| x * y).sum::<f64>();
                    }
                }),
            ));
        }
        Err(shape_err("mul", self, other))
    }

    /// Multiply by a compile-time constant (no gradient through the factor).
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        check_finite("scale", &self.borrow_data())?;
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let a = self.clone();
        let out: Vec<f64> = self.borrow_data().iter().map(|x| x * factor).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "scale",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * factor;
                    }
                }
            }),
        ))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(shape_err("matmul", self, other));
        }
        check_finite("matmul", &self.borrow_data())?;
        check_finite("matmul", &other.borrow_data())?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let out = {
            let (da, db) = (self.borrow_data(), other.borrow_data());
            matmul_raw(&da, &db, m, k, n)
        };
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(move |g, sink| {
                // dA = G * B^T
                {
                    let db = b.borrow_data();
                    if let Some(ga) = sink.slot(&a) {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij != 0.0 {
                                    for p in 0..k {
                                        ga[i * k + p] += gij * db[p * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                // dB = A^T * G
                let da = a.borrow_data();
                if let Some(gb) = sink.slot(&b) {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Invalid {
                op: "transpose",
                msg: format!("need 2-D, got {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = {
            let d = self.borrow_data();
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = d[i * c + j];
                }
            }
            o
        };
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            "transpose",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }),
        ))
    }

    /// 1-D convolution over the time axis.
    ///
    /// Input is `[T, C_in]`, kernel `[C_out, C_in, K]`, optional bias
    /// `[C_out]`. Implicit zero padding of `K/2` on both sides; output is
    /// `[(T + 2*(K/2) - K)/stride + 1, C_out]`.
    pub fn conv1d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        if self.shape().len() != 2 || kernel.shape().len() != 3 || self.shape()[1] != kernel.shape()[1]
        {
            return Err(shape_err("conv1d", self, kernel));
        }
        if stride == 0 {
            return Err(Error::Invalid {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        check_finite("conv1d", &self.borrow_data())?;
        check_finite("conv1d", &kernel.borrow_data())?;
        let (t_in, c_in) = (self.shape()[0], self.shape()[1]);
        let (c_out, _, ksz) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(shape_err("conv1d", kernel, b));
            }
            check_finite("conv1d", &b.borrow_data())?;
        }
        let pad = ksz / 2;
        if t_in + 2 * pad < ksz {
            return Err(Error::TooShort {
                op: "conv1d",
                len: t_in,
                min: ksz - 2 * pad,
            });
        }
        let t_out = (t_in + 2 * pad - ksz) / stride + 1;
        let out = {
            let x = self.borrow_data();
            let w = kernel.borrow_data();
            let mut o = vec![0.0; t_out * c_out];
            if let Some(b) = bias {
                let bd = b.borrow_data();
                for t in 0..t_out {
                    for co in 0..c_out {
                        o[t * c_out + co] = bd[co];
                    }
                }
            }
            for t in 0..t_out {
                for j in 0..ksz {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let src = src as usize;
                    for co in 0..c_out {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            acc += w[(co * c_in + ci) * ksz + j] * x[src * c_in + ci];
                        }
                        o[t * c_out + co] += acc;
                    }
                }
            }
            o
        };
        let a = self.clone();
        let kn = kernel.clone();
        let bs = bias.cloned();
        let mut parents = vec![a.clone(), kn.clone()];
        if let Some(b) = &bs {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![t_out, c_out],
            out,
            "conv1d",
            parents,
            Box::new(move |g, sink| {
                // dX
                {
                    let w = kn.borrow_data();
                    if let Some(gx) = sink.slot(&a) {
                        for t in 0..t_out {
                            for j in 0..ksz {
                                let src = (t * stride + j) as isize - pad as isize;
                                if src < 0 || src >= t_in as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for co in 0..c_out {
                                    let go = g[t * c_out + co];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        gx[src * c_in + ci] += go * w[(co * c_in + ci) * ksz + j];
                                    }
                                }
                            }
                        }
                    }
                }
                // dW
                {
                    let x = a.borrow_data();
                    if let Some(gw) = sink.slot(&kn) {
                        for t in 0..t_out {
                            for j in 0..ksz {
                                let src = (t * stride + j) as isize - pad as isize;
                                if src < 0 || src >= t_in as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for co in 0..c_out {
                                    let go = g[t * c_out + co];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        gw[(co * c_in + ci) * ksz + j] += go * x[src * c_in + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                // dB
                if let Some(b) = &bs {
                    if let Some(gb) = sink.slot(b) {
                        for t in 0..t_out {
                            for co in 0..c_out {
                                gb[co] += g[t * c_out + co];
                            }
                        }
                    }
                }
            }),
        ))
    }

    pub fn relu(&self) -> Result<Tensor> {
        check_finite("relu", &self.borrow_data())?;
        let out: Vec<f64> = self.borrow_data().iter().map(|x| x.max(0.0)).collect();
        let a = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "relu",
            vec![a.clone()],
            Box::new(move |g, sink| {
                let d = a.borrow_data();
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..g.len() {
                        if d[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        check_finite("gelu", &self.borrow_data())?;
        let out: Vec<f64> = self
            .borrow_data()
            .iter()
            .map(|&x| {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let a = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "gelu",
            vec![a.clone()],
            Box::new(move |g, sink| {
                let d = a.borrow_data();
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..g.len() {
                        let x = d[i];
                        let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                        let th = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                        ga[i] += g[i] * deriv;
                    }
                }
            }),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite("softmax", &self.borrow_data())?;
        let ln = lanes(self.shape(), axis, "softmax")?;
        let mut out = vec![0.0; self.numel()];
        {
            let d = self.borrow_data();
            for l in 0..ln.lanes {
                softmax_lane(&d, &mut out, &ln, l);
            }
        }
        let probs = out.clone();
        let a = self.clone();
        let ln2 = lanes(self.shape(), axis, "softmax")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "softmax",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for l in 0..ln2.lanes {
                        let base = l * ln2.lane_stride;
                        let mut dot = 0.0;
                        for k in 0..ln2.len {
                            let i = base + k * ln2.stride;
                            dot += g[i] * probs[i];
                        }
                        for k in 0..ln2.len {
                            let i = base + k * ln2.stride;
                            ga[i] += probs[i] * (g[i] - dot);
                        }
                    }
                }
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite("log_softmax", &self.borrow_data())?;
        let ln = lanes(self.shape(), axis, "log_softmax")?;
        let mut out = vec![0.0; self.numel()];
        let mut probs = vec![0.0; self.numel()];
        {
            let d = self.borrow_data();
            for l in 0..ln.lanes {
                let base = l * ln.lane_stride;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..ln.len {
                    mx = mx.max(d[base + k * ln.stride]);
                }
                let mut z = 0.0;
                for k in 0..ln.len {
                    z += (d[base + k * ln.stride] - mx).exp();
                }
                let logz = z.ln() + mx;
                for k in 0..ln.len {
                    let i = base + k * ln.stride;
                    out[i] = d[i] - logz;
                    probs[i] = out[i].exp();
                }
            }
        }
        let a = self.clone();
        let ln2 = lanes(self.shape(), axis, "log_softmax")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "log_softmax",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for l in 0..ln2.lanes {
                        let base = l * ln2.lane_stride;
                        let mut gsum = 0.0;
                        for k in 0..ln2.len {
                            gsum += g[base + k * ln2.stride];
                        }
                        for k in 0..ln2.len {
                            let i = base + k * ln2.stride;
                            ga[i] += g[i] - probs[i] * gsum;
                        }
                    }
                }
            }),
        ))
    }

    /// Layer normalization over the last axis, with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::Invalid {
            op: "layer_norm",
            msg: "empty shape".into(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err("layer_norm", self, gamma));
        }
        check_finite("layer_norm", &self.borrow_data())?;
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.borrow_data();
            let gm = gamma.borrow_data();
            let bt = beta.borrow_data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gm[j] + bt[j];
                }
            }
        }
        let a = self.clone();
        let gm = gamma.clone();
        let bt = beta.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "layer_norm",
            vec![a.clone(), gm.clone(), bt.clone()],
            Box::new(move |g, sink| {
                let gmv = gm.borrow_data().clone();
                if let Some(gx) = sink.slot(&a) {
                    for r in 0..rows {
                        let inv = inv_std[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gmv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gmv[j];
                            gx[r * d + j] +=
                                inv * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
                if let Some(gg) = sink.slot(&gm) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = sink.slot(&bt) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Mean over the unmasked time rows of a `[T, d]` tensor; returns `[d]`.
    pub fn mean_pool_time(&self, mask: &[bool]) -> Result<Tensor> {
        if self.shape().len() != 2 || self.shape()[0] != mask.len() {
            return Err(Error::Invalid {
                op: "mean_pool_time",
                msg: format!("shape {:?} vs mask length {}", self.shape(), mask.len()),
            });
        }
        check_finite("mean_pool_time", &self.borrow_data())?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllPadded {
                op: "mean_pool_time",
            });
        }
        let (t, d) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; d];
        {
            let x = self.borrow_data();
            for ti in 0..t {
                if mask[ti] {
                    for j in 0..d {
                        out[j] += x[ti * d + j];
                    }
                }
            }
        }
        for v in &mut out {
            *v /= count as f64;
        }
        let a = self.clone();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            vec![d],
            out,
            "mean_pool_time",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    let inv = 1.0 / count as f64;
                    for ti in 0..t {
                        if mask[ti] {
                            for j in 0..d {
                                ga[ti * d + j] += g[j] * inv;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Row lookup into an embedding table `[V, d]`; returns `[ids.len(), d]`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be 2-D, got {:?}", self.shape()),
            });
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v, pos });
            }
        }
        check_finite("embedding_lookup", &self.borrow_data())?;
        let out = {
            let tb = self.borrow_data();
            let mut o = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                o.extend_from_slice(&tb[id * d..(id + 1) * d]);
            }
            o
        };
        let table = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            "embedding_lookup",
            vec![table.clone()],
            Box::new(move |g, sink| {
                if let Some(gt) = sink.slot(&table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenate along `axis` (0 or 1 for 2-D, 0 for 1-D).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        for p in parts {
            check_finite("concat", &p.borrow_data())?;
        }
        let first = parts[0].shape();
        let ndim = first.len();
        if axis >= ndim {
            return Err(Error::Invalid {
                op: "concat",
                msg: format!("axis {} for {}-D", axis, ndim),
            });
        }
        for p in parts.iter().skip(1) {
            let s = p.shape();
            if s.len() != ndim
                || (0..ndim).any(|i| i != axis && s[i] != first[i])
            {
                return Err(shape_err("concat", parts[0], p));
            }
        }
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.to_vec();
        shape[axis] = total_axis;

        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let out = if ndim == 1 || axis == 0 {
            let mut o = Vec::with_capacity(shape.iter().product());
            for p in parts {
                o.extend_from_slice(&p.borrow_data());
            }
            o
        } else {
            // 2-D, axis 1: interleave rows
            let rows = first[0];
            let mut o = Vec::with_capacity(shape.iter().product());
            for r in 0..rows {
                for p in parts {
                    let c = p.shape()[1];
                    let d = p.borrow_data();
                    o.extend_from_slice(&d[r * c..(r + 1) * c]);
                }
            }
            o
        };
        let rows = if ndim == 2 { first[0] } else { 1 };
        let out_cols = if ndim == 2 { shape[1] } else { shape[0] };
        let parents = owned.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            "concat",
            parents,
            Box::new(move |g, sink| {
                if ndim == 1 || axis == 0 {
                    let mut offset = 0;
                    for (p, &_sz) in owned.iter().zip(&sizes) {
                        let n = p.numel();
                        if let Some(gp) = sink.slot(p) {
                            for i in 0..n {
                                gp[i] += g[offset + i];
                            }
                        }
                        offset += n;
                    }
                } else {
                    let mut col_offset = 0;
                    for (p, &sz) in owned.iter().zip(&sizes) {
                        if let Some(gp) = sink.slot(p) {
                            for r in 0..rows {
                                for j in 0..sz {
                                    gp[r * sz + j] += g[r * out_cols + col_offset + j];
                                }
                            }
                        }
                        col_offset += sz;
                    }
                }
            }),
        ))
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let ndim = self.shape().len();
        if axis >= ndim || start >= end || end > self.shape()[axis] {
            return Err(Error::Invalid {
                op: "slice",
                msg: format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start,
                    end,
                    axis,
                    self.shape()
                ),
            });
        }
        check_finite("slice", &self.borrow_data())?;
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let (rows, cols) = if ndim == 2 {
            (self.shape()[0], self.shape()[1])
        } else {
            (1, self.shape()[0])
        };
        let out = {
            let d = self.borrow_data();
            if ndim == 1 || axis == 0 {
                if ndim == 1 {
                    d[start..end].to_vec()
                } else {
                    d[start * cols..end * cols].to_vec()
                }
            } else {
                let mut o = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    o.extend_from_slice(&d[r * cols + start..r * cols + end]);
                }
                o
            }
        };
        let a = self.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            "slice",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    if ndim == 1 {
                        for i in 0..end - start {
                            ga[start + i] += g[i];
                        }
                    } else if axis == 0 {
                        for i in 0..(end - start) * cols {
                            ga[start * cols + i] += g[i];
                        }
                    } else {
                        let w = end - start;
                        for r in 0..rows {
                            for j in 0..w {
                                ga[r * cols + start + j] += g[r * w + j];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Apply a precomputed dropout (or cut-off) mask: elementwise multiply by
    /// a constant mask of identical shape.
    pub fn dropout_mask_apply(&self, mask: &Tensor) -> Result<Tensor> {
        if self.shape() != mask.shape() {
            return Err(shape_err("dropout_mask_apply", self, mask));
        }
        self.mul(mask)
    }

    /// Sum of all elements; returns a scalar `[1]`.
    pub fn sum(&self) -> Result<Tensor> {
        check_finite("sum", &self.borrow_data())?;
        let s: f64 = self.borrow_data().iter().sum();
        let a = self.clone();
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            "sum",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..n {
                        ga[i] += g[0];
                    }
                }
            }),
        ))
    }

    /// Sum a 2-D tensor along `axis`, returning a vector.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Invalid {
                op: "sum_axis",
                msg: format!("need 2-D, got {:?}", self.shape()),
            });
        }
        check_finite("sum_axis", &self.borrow_data())?;
        let ln = lanes(self.shape(), axis, "sum_axis")?;
        let mut out = vec![0.0; ln.lanes];
        {
            let d = self.borrow_data();
            for l in 0..ln.lanes {
                let base = l * ln.lane_stride;
                for k in 0..ln.len {
                    out[l] += d[base + k * ln.stride];
                }
            }
        }
        let a = self.clone();
        let ln2 = lanes(self.shape(), axis, "sum_axis")?;
        Ok(Tensor::from_op(
            vec![ln.lanes],
            out,
            "sum_axis",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for l in 0..ln2.lanes {
                        let base = l * ln2.lane_stride;
                        for k in 0..ln2.len {
                            ga[base + k * ln2.stride] += g[l];
                        }
                    }
                }
            }),
        ))
    }

    /// Pick one column per row of a 2-D tensor: `out[i] = self[i, ids[i]]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 || self.shape()[0] != ids.len() {
            return Err(Error::Invalid {
                op: "gather_rows",
                msg: format!("shape {:?} vs {} ids", self.shape(), ids.len()),
            });
        }
        let cols = self.shape()[1];
        for (pos, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: cols,
                    pos,
                });
            }
        }
        check_finite("gather_rows", &self.borrow_data())?;
        let out = {
            let d = self.borrow_data();
            ids.iter()
                .enumerate()
                .map(|(i, &id)| d[i * cols + id])
                .collect()
        };
        let a = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len()],
            out,
            "gather_rows",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for (i, &id) in ids.iter().enumerate() {
                        ga[i * cols + id] += g[i];
                    }
                }
            }),
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
            }),
        ))
    }

    /// Normalize each row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Invalid {
                op: "l2_normalize_rows",
                msg: format!("need 2-D, got {:?}", self.shape()),
            });
        }
        check_finite("l2_normalize_rows", &self.borrow_data())?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        {
            let x = self.borrow_data();
            for r in 0..n {
                let row = &x[r * d..(r + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNorm {
                        op: "l2_normalize_rows",
                        row: r,
                    });
                }
                norms[r] = norm;
                for j in 0..d {
                    out[r * d + j] = row[j] / norm;
                }
            }
        }
        let unit = out.clone();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            "l2_normalize_rows",
            vec![a.clone()],
            Box::new(move |g, sink| {
                if let Some(ga) = sink.slot(&a) {
                    for r in 0..n {
                        let y = &unit[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] += (gr[j] - dot * y[j]) / norms[r];
                        }
                    }
                }
            }),
        ))
    }
}

fn softmax_lane(d: &[f64], out: &mut [f64], ln: &Lanes, lane: usize) {
    let base = lane * ln.lane_stride;
    let mut mx = f64::NEG_INFINITY;
    for k in 0..ln.len {
        mx = mx.max(d[base + k * ln.stride]);
    }
    let mut z = 0.0;
    for k in 0..ln.len {
        let e = (d[base + k * ln.stride] - mx).exp();
        out[base + k * ln.stride] = e;
        z += e;
    }
    for k in 0..ln.len {
        out[base + k * ln.stride] /= z;
    }
}

/// Plain `[m,k] x [k,n]` product (also used by oracles in tests).
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}
