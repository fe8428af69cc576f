//! Two-component PCA via a cyclic Jacobi eigensolver on the covariance
//! matrix. Deterministic: fixed sweep order, canonical eigenvector signs.

/// Project `rows` (each of dimension `d`) onto the top two principal
/// components. Returns the 2-D coordinates and the fraction of total
/// variance each component explains.
pub fn pca_2d(rows: &[Vec<f64>]) -> (Vec<(f64, f64)>, [f64; 2]) {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || d == 0 {
        return (Vec::new(), [0.0, 0.0]);
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let denom = (n as f64 - 1.0).max(1.0);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mean[j]) / denom;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum::<f64>().max(1e-300);
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for k in 0..2.min(d) {
        let col = order[k];
        for i in 0..d {
            axes[k][i] = eigvecs[i * d + col];
        }
        canonical_sign(&mut axes[k]);
        explained[k] = eigvals[col].max(0.0) / total;
    }
    let coords = rows
        .iter()
        .map(|r| {
            let mut x = 0.0;
            let mut y = 0.0;
            for j in 0..d {
                let c = r[j] - mean[j];
                x += c * axes[0][j];
                y += c * axes[1][j];
            }
            (x, y)
        })
        .collect();
    (coords, explained)
}

/// Flip sign so the largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, val) in v.iter().enumerate() {
        if val.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for val in v.iter_mut() {
            *val = -*val;
        }
    }
}

/// Cyclic Jacobi for a symmetric matrix: returns (eigenvalues, column
/// eigenvectors).
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}

/// Total squared reconstruction error using the top `k` components; the
/// nesting oracle for PCA optimality tests.
pub fn reconstruction_error(rows: &[Vec<f64>], k: usize) -> f64 {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let denom = (n as f64 - 1.0).max(1.0);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / denom;
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap_or(std::cmp::Ordering::Equal));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(k)
        .map(|&col| (0..d).map(|i| eigvecs[i * d + col]).collect())
        .collect();
    let mut err = 0.0;
    for r in rows {
        let centered: Vec<f64> = (0..d).map(|j| r[j] - mean[j]).collect();
        let mut recon = vec![0.0; d];
        for axis in &axes {
            let proj: f64 = centered.iter().zip(axis).map(|(a, b)| a * b).sum();
            for j in 0..d {
                recon[j] += proj * axis[j];
            }
        }
        for j in 0..d {
            err += (centered[j] - recon[j]) * (centered[j] - recon[j]);
        }
    }
    err
}
