//! Scaled dot-product attention with dense, causal and sliding-window +
//! global masks, and exact attended-pair accounting.
//!
//! The sliding window has total width `w` (even): position `i` attends to
//! every `j` with `|i − j| ≤ w/2`. Global positions attend to, and are
//! attended by, every position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::MASKED;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub window: usize,
    #[serde(default = "default_globals")]
    pub global_indices: Vec<usize>,
}

fn default_globals() -> Vec<usize> {
    vec![0]
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { window: 16, global_indices: default_globals() }
    }
}

impl AttentionConfig {
    pub fn new(window: usize, mut global_indices: Vec<usize>) -> Result<Self> {
        global_indices.sort_unstable();
        global_indices.dedup();
        let cfg = Self { window, global_indices };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::Config(format!("attention window must be even and >= 2, got {}", self.window)));
        }
        if self.global_indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("global_indices must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    fn check_globals(&self, n: usize) -> Result<()> {
        match self.global_indices.iter().find(|&&g| g >= n) {
            Some(&g) => Err(Error::Index { what: "global attention index", index: g, len: n }),
            None => Ok(()),
        }
    }
}

/// Boolean `rows × cols` matrix of permitted query/key pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Self { rows: n, cols: n, allowed }
    }

    /// Sliding-window mask with symmetric global rows and columns.
    pub fn sparse(n: usize, cfg: &AttentionConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        cfg.validate()?;
        cfg.check_globals(n)?;
        let h = cfg.half_window();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in i.saturating_sub(h)..=(i + h).min(n - 1) {
                allowed[i * n + j] = true;
            }
        }
        for &g in &cfg.global_indices {
            for k in 0..n {
                allowed[g * n + k] = true;
                allowed[k * n + g] = true;
            }
        }
        Ok(Self { rows: n, cols: n, allowed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn count(&self) -> u64 {
        self.allowed.iter().filter(|&&a| a).count() as u64
    }

    /// `0` where allowed, [`MASKED`] elsewhere.
    pub fn additive(&self) -> Vec<f64> {
        self.allowed.iter().map(|&a| if a { 0.0 } else { MASKED }).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PairPattern<'a> {
    Dense,
    Sparse(&'a AttentionConfig),
}

/// Number of attended (query, key) pairs for a length-`n` self-attention,
/// computed in closed form.
pub fn attention_pair_count(n: usize, pattern: PairPattern<'_>) -> Result<u64> {
    if n == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let n64 = n as u64;
    let cfg = match pattern {
        PairPattern::Dense => return Ok(n64 * n64),
        PairPattern::Sparse(cfg) => cfg,
    };
    cfg.validate()?;
    cfg.check_globals(n)?;
    let h = cfg.half_window();

    // Pairs with 0 < |i − j| = d ≤ h occur 2·(n − d) times.
    let reach = h.min(n - 1) as u64;
    let band = n64 + 2 * (reach * n64 - reach * (reach + 1) / 2);

    let g = cfg.global_indices.len() as u64;
    let global_cross = 2 * g * n64 - g * g;

    let in_window = |a: usize, b: usize| a.abs_diff(b) <= h;
    let per_global: u64 = cfg
        .global_indices
        .iter()
        .map(|&p| ((p + h).min(n - 1) - p.saturating_sub(h) + 1) as u64)
        .sum();
    let global_pairs_in_band = cfg
        .global_indices
        .iter()
        .flat_map(|&a| cfg.global_indices.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| in_window(a, b))
        .count() as u64;
    let overlap = 2 * per_global - global_pairs_in_band;

    Ok(band + global_cross - overlap)
}

#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    None,
    Causal,
    Explicit(&'a AttentionMask),
}

/// `softmax(q·kᵀ/√d + mask)·v`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, mask: Mask<'_>) -> Result<Var> {
    let (n_q, d) = g.value(q).matrix_dims("attend")?;
    let (n_k, d_k) = g.value(k).matrix_dims("attend")?;
    let (n_v, _) = g.value(v).matrix_dims("attend")?;
    if d != d_k || n_k != n_v {
        return Err(Error::shape("attend", g.value(q).shape(), g.value(k).shape()));
    }
    let additive = match mask {
        Mask::None => None,
        Mask::Causal => {
            if n_q != n_k {
                return Err(Error::shape("attend causal mask", &[n_q, n_q], &[n_q, n_k]));
            }
            Some(AttentionMask::causal(n_q).additive())
        }
        Mask::Explicit(m) => {
            if (m.rows(), m.cols()) != (n_q, n_k) {
                return Err(Error::shape("attend mask", &[m.rows(), m.cols()], &[n_q, n_k]));
            }
            Some(m.additive())
        }
    };
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax_rows(scores, additive.as_deref())?;
    g.matmul(probs, v)
}

/// Query/key/value/output projections of one attention sublayer. Head `h`
/// uses column block `h` of each input projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub fn multi_head_attend(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Mask<'_>,
) -> Result<Var> {
    let d_model = g.value(q_in).cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    let project = |g: &mut Graph, x: Var, wt: Var, b: Var| -> Result<Var> {
        let y = g.matmul(x, wt)?;
        g.add_row(y, b)
    };
    let q = project(g, q_in, w.wq, w.bq)?;
    let k = project(g, k_in, w.wk, w.bk)?;
    let v = project(g, v_in, w.wv, w.bv)?;

    let d_head = d_model / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * d_head, d_head)?,
                g.slice_cols(k, h * d_head, d_head)?,
                g.slice_cols(v, h * d_head, d_head)?,
            )
        };
        outs.push(attend(g, qh, kh, vh, mask)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    project(g, merged, w.wo, w.bo)
}
