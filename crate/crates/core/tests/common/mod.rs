#![allow(dead_code)]

use afg_core::{Graph, Tensor, Var};

/// Relative error with a small floor on the denominator so that
/// near-zero gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares graph gradients of a scalar-valued builder against central
/// finite differences on every input element. Returns the worst relative
/// error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

/// Deterministic pseudo-random tensor with entries in [-2, 2].
pub fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any tensor to a scalar through a fixed weighting, so that the
/// upstream gradient is not uniform.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = seeded(g.value(x).shape(), seed);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}
