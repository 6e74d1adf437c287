//! Slice-level kernels shared by the tape's forward and backward passes.

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `acc[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_lhs(acc: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    // Row-times-matrix form against bᵀ keeps the inner loop contiguous.
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let acc_row = &mut acc[i * k..(i + 1) * k];
        for j in 0..n {
            let gij = g[i * n + j];
            for (o, &bv) in acc_row.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                *o += gij * bv;
            }
        }
    }
}

/// `acc[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_grad_rhs(acc: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in acc_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

/// Four independent partial sums, combined pairwise.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0; 4];
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fixed sinusoidal position code for positions `offset..offset + rows`.
pub fn sinusoidal_positions(offset: usize, rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        let pos = (offset + r) as f64;
        for i in 0..dim.div_ceil(2) {
            let freq = 1.0 / 10_000f64.powf((2 * i) as f64 / dim as f64);
            let angle = pos * freq;
            out[r * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                out[r * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    out
}
