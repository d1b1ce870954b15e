//! Layers composed from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Output of [`attention`]: the residual-added token update and the softmax
/// weights (`[B, D, D]`, or `[D, D]` for unbatched tokens).
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub output: Var,
    pub weights: Var,
}

/// Projection weights for single-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Single-head attention across the token axis with a residual connection:
/// `tokens + softmax(Q Kᵀ / √h) V W_o`.
///
/// `tokens` is `[D, h]` or batched `[B, D, h]`.
pub fn attention(g: &mut Graph, tokens: Var, w: AttentionWeights) -> Result<AttentionOut> {
    let shape = g.value(tokens).shape().to_vec();
    let (batch, d, h) = match *shape.as_slice() {
        [d, h] => (1, d, h),
        [b, d, h] => (b, d, h),
        _ => return Err(Error::Dimension(format!("attention tokens {shape:?}"))),
    };
    if h == 0 {
        return Err(Error::Dimension("attention needs h >= 1".into()));
    }
    let flat = g.reshape(tokens, &[batch * d, h])?;
    let project = |g: &mut Graph, weight: Var| -> Result<Var> {
        let p = g.matmul(flat, weight)?;
        g.reshape(p, &[batch, d, h])
    };
    let q = project(g, w.q)?;
    let k = project(g, w.k)?;
    let v = project(g, w.v)?;
    let logits = g.batch_matmul(q, k, true)?;
    let logits = g.scale(logits, 1.0 / (h as f64).sqrt());
    let weights = g.softmax_last(logits)?;
    let ctx = g.batch_matmul(weights, v, false)?;
    let ctx = g.reshape(ctx, &[batch * d, h])?;
    let mixed = g.matmul(ctx, w.o)?;
    let mixed = g.reshape(mixed, &shape)?;
    let output = g.add(tokens, mixed)?;
    let weights = if shape.len() == 2 {
        g.reshape(weights, &[d, d])?
    } else {
        weights
    };
    Ok(AttentionOut { output, weights })
}

/// `x · w + b` for `x [n, in]`, `w [in, out]`, `b [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Unit-norm copy of `v`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
pub fn uniform_init(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(g: &mut Graph, h: usize, fill: impl Fn(usize) -> f64) -> AttentionWeights {
        let mut mk = |offset: usize| {
            let data = (0..h * h).map(|i| fill(i + offset)).collect();
            g.constant(Tensor::new(vec![h, h], data).unwrap())
        };
        AttentionWeights {
            q: mk(0),
            k: mk(100),
            v: mk(200),
            o: mk(300),
        }
    }

    #[test]
    fn single_token_weight_is_one() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![1, 3], vec![0.2, -0.7, 1.1]).unwrap());
        let w = weights(&mut g, 3, |i| (i as f64).sin());
        let out = attention(&mut g, t, w).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
        assert!(g.value(out.output).is_finite());
    }

    #[test]
    fn equal_tokens_give_uniform_weights() {
        let mut g = Graph::new();
        let d = 4;
        let t = g.constant(Tensor::new(vec![d, 2], [0.3, -0.4].repeat(d)).unwrap());
        let q = g.constant(Tensor::eye(2));
        let k = g.constant(Tensor::eye(2));
        let v = g.constant(Tensor::eye(2));
        let o = g.constant(Tensor::eye(2));
        let out = attention(&mut g, t, AttentionWeights { q, k, v, o }).unwrap();
        for &p in g.value(out.weights).data() {
            assert!((p - 1.0 / d as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 1.7).cos()).collect()).unwrap());
        let w = weights(&mut g, 4, |i| (i as f64 * 0.31).sin());
        let out = attention(&mut g, t, w).unwrap();
        for row in g.value(out.weights).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let h = 3;
        let base: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..h).map(|c| ((r * h + c) as f64 * 0.9).sin()).collect())
            .collect();
        let perm = [2, 0, 3, 1];
        let run = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let t = g.constant(Tensor::from_rows(rows).unwrap());
            let w = weights(&mut g, h, |i| (i as f64 * 0.53).cos() * 0.5);
            let out = attention(&mut g, t, w).unwrap();
            g.value(out.output).clone()
        };
        let plain = run(&base);
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| base[i].clone()).collect();
        let permuted = run(&permuted_rows);
        for (new_row, &src) in perm.iter().enumerate() {
            for c in 0..h {
                let a = permuted.at(&[new_row, c]);
                let b = plain.at(&[src, c]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
