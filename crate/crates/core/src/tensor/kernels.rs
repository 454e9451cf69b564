//! Forward and adjoint kernels on flat row-major buffers.

/// Additive-mask value for disallowed positions.
pub const MASKED: f64 = f64::NEG_INFINITY;

pub const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `c = op(a) · op(b) + beta · c` where `op` optionally transposes.
///
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k`
/// when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax of `x + mask`. Rows with no unmasked entry become zeros.
pub fn softmax_rows(x: &[f64], mask: Option<&[f64]>, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (xs, ys)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let ms = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let shifted = |j: usize| match ms {
            Some(m) => xs[j] + m[j],
            None => xs[j],
        };
        let max = (0..cols).map(shifted).fold(MASKED, f64::max);
        if max == MASKED {
            continue;
        }
        let mut sum = 0.0;
        for (j, y) in ys.iter_mut().enumerate() {
            let z = shifted(j);
            *y = if z == MASKED { 0.0 } else { (z - max).exp() };
            sum += *y;
        }
        for y in ys.iter_mut() {
            *y /= sum;
        }
    }
    out
}

/// Accumulates the softmax adjoint: `dx += p ⊙ (dy − ⟨dy, p⟩)` per row.
pub fn softmax_rows_backward(p: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for ((ps, gs), ds) in p.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = ps.iter().zip(gs).map(|(p, g)| p * g).sum();
        for ((d, p), g) in ds.iter_mut().zip(ps).zip(gs) {
            *d += p * (g - dot);
        }
    }
}

/// Normalized rows plus the per-row inverse standard deviation, both needed
/// by the adjoint.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let d = gain.len();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for ((xs, hs), ys) in x.chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d)) {
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            hs[j] = (xs[j] - mean) * r;
            ys[j] = hs[j] * gain[j] + bias[j];
        }
        rstd.push(r);
    }
    (out, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let d = gain.len();
    if let Some(dg) = dgain {
        for (hs, gs) in cache.xhat.chunks(d).zip(dy.chunks(d)) {
            for j in 0..d {
                dg[j] += hs[j] * gs[j];
            }
        }
    }
    if let Some(db) = dbias {
        for gs in dy.chunks(d) {
            for j in 0..d {
                db[j] += gs[j];
            }
        }
    }
    if let Some(dx) = dx {
        let mut g = vec![0.0; d];
        for (r, ((hs, gs), ds)) in cache
            .xhat
            .chunks(d)
            .zip(dy.chunks(d))
            .zip(dx.chunks_mut(d))
            .enumerate()
        {
            for j in 0..d {
                g[j] = gs[j] * gain[j];
            }
            let mean_g = g.iter().sum::<f64>() / d as f64;
            let mean_gh = g.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let rstd = cache.rstd[r];
            for j in 0..d {
                ds[j] += rstd * (g[j] - mean_g - hs[j] * mean_gh);
            }
        }
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `log Σ exp` of a row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
