//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order
//! for the chain rule. Each node carries a `needs_grad` flag: constants and
//! frozen parameters never receive gradients of their own, but gradients
//! still flow *through* operations that consume them.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Reshape(Var),
    SoftmaxLast(Var),
    Conv1dSame { x: Var, w: Var, b: Var },
    MeanLast(Var),
    PerVarLinear { x: Var, w: Var, b: Var },
    GatedResidual { x: Var, gate: Var, adj: Var },
    Sum(Var),
    MseMean(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, idx) in &self.params {
            if let Some(g) = &self.grads[*idx] {
                let p = store.get_mut(name)?;
                if p.grad.shape() != g.shape() {
                    return Err(Error::Dimension(format!("gradient shape for `{name}`")));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

fn split_last(shape: &[usize]) -> Result<(usize, usize)> {
    let last = *shape.last().ok_or_else(|| dim_err("scalar has no last axis"))?;
    let rows = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    Ok((rows, last))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input sensitivities).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Gradients are tracked only if it is trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (&[bs, m, k], &[bs2, r, c]) = (sa, sb) else {
            return Err(dim_err(format!(
                "batch_matmul needs rank-3 operands, got {sa:?} and {sb:?}"
            )));
        };
        let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
        if bs != bs2 || k != k2 {
            return Err(dim_err(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(&[bs, m, n]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                (k, 1),
                &bd[i * k * n..],
                b_strides,
                &mut out.data_mut()[i * m * n..],
                (n, 1),
                false,
            );
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, ng))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = split_last(self.value(x).shape())?;
        if self.value(bias).shape() != [n] {
            return Err(dim_err(format!(
                "bias {:?} for input {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.needs(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let (_, n) = split_last(self.value(x).shape())?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxLast(x), ng))
    }

    /// Zero-padded "same" 1-D convolution.
    ///
    /// `x` is `[C_in, L]` or batched `[N, C_in, L]`; `w` is `[C_out, C_in, k]`
    /// with odd `k`; `b` is `[C_out]`. Output keeps the input's length.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin, len, batched) = conv_input_dims(self.value(x).shape())?;
        let &[cout, wcin, k] = self.value(w).shape() else {
            return Err(dim_err("conv weight must be [C_out, C_in, k]"));
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
        }
        if wcin != cin || self.value(b).shape() != [cout] {
            return Err(dim_err("conv weight/bias do not match input channels"));
        }
        let pad = (k - 1) / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * cout * len];
        for s in 0..n {
            for o in 0..cout {
                let y = &mut out[(s * cout + o) * len..(s * cout + o + 1) * len];
                y.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xs = &xd[(s * cin + c) * len..(s * cin + c + 1) * len];
                    let ws = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for (t, yv) in y.iter_mut().enumerate() {
                        for (j, wv) in ws.iter().enumerate() {
                            let src = t + j;
                            if src >= pad && src - pad < len {
                                *yv += wv * xs[src - pad];
                            }
                        }
                    }
                }
            }
        }
        let shape = if batched { vec![n, cout, len] } else { vec![cout, len] };
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1dSame { x, w, b }, ng))
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (_, n) = split_last(&shape)?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MeanLast(x), ng))
    }

    /// Separate affine map per variable: `x [.., D, h]`, `w [D, h, L]`,
    /// `b [D, L]` give `[.., D, L]`.
    pub fn per_var_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let &[d, h, l] = self.value(w).shape() else {
            return Err(dim_err("per-variable weight must be [D, h, L]"));
        };
        if xs.len() < 2 || xs[xs.len() - 2..] != [d, h] || self.value(b).shape() != [d, l] {
            return Err(dim_err(format!(
                "per-variable linear on {xs:?} with D={d}, h={h}, L={l}"
            )));
        }
        let batch = xs.iter().product::<usize>() / (d * h);
        let mut out = vec![0.0; batch * d * l];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..d {
            for s in 0..batch {
                out[(s * d + i) * l..(s * d + i + 1) * l].copy_from_slice(&bd[i * l..(i + 1) * l]);
            }
            gemm(
                batch,
                h,
                l,
                &xd[i * h..],
                (d * h, 1),
                &wd[i * h * l..],
                (l, 1),
                &mut out[i * l..],
                (d * l, 1),
                true,
            );
        }
        let mut shape = xs;
        let last = shape.len() - 1;
        shape[last] = l;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::PerVarLinear { x, w, b }, ng))
    }

    /// `x + tanh(gate[i]) * adj` where `i` indexes the second-to-last axis.
    pub fn gated_residual(&mut self, x: Var, gate: Var, adj: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = self.value(gate).len();
        if self.value(adj).shape() != shape.as_slice()
            || shape.len() < 2
            || shape[shape.len() - 2] != d
            || self.value(gate).rank() != 1
        {
            return Err(dim_err(format!("gated residual on {shape:?} with {d} gates")));
        }
        let l = shape[shape.len() - 1];
        let gates: Vec<f64> = self.value(gate).data().iter().map(|g| g.tanh()).collect();
        let mut out = self.value(x).clone();
        let ad = self.value(adj).data();
        for (row, (o, a)) in out.data_mut().chunks_mut(l).zip(ad.chunks(l)).enumerate() {
            let g = gates[row % d];
            for (ov, av) in o.iter_mut().zip(a) {
                *ov += g * av;
            }
        }
        let ng = self.needs(&[x, gate, adj]);
        Ok(self.push(out, Op::GatedResidual { x, gate, adj }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Mean of squared differences over all elements, as a scalar.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same(a, b, |x, y| x - y)?;
        let n = diff.len().max(1) as f64;
        let out = Tensor::scalar(diff.norm_sq() / n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MseMean(a, b), ng))
    }

    /// Propagates d(loss)/d(node) from a scalar `loss` back to every node
    /// that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.needs_grad)
            .filter_map(|(i, n)| n.param.clone().map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[idx].value;
        let send = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix()?;
                let (_, n) = tb.as_matrix()?;
                if wants(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        (n, 1),
                        tb.data(),
                        (1, n),
                        ga.data_mut(),
                        (k, 1),
                        false,
                    );
                    send(*a, ga, grads);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k),
                        gy.data(),
                        (n, 1),
                        gb.data_mut(),
                        (n, 1),
                        false,
                    );
                    send(*b, gb, grads);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let &[bs, m, k] = ta.shape() else { unreachable!() };
                let n = y.shape()[2];
                let (ad, bd, gd) = (ta.data(), tb.data(), gy.data());
                if wants(*a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    // dA = dC·Bᵀ, or dC·B when B was used transposed
                    let bstr = if *transpose_b { (k, 1) } else { (1, n) };
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            (n, 1),
                            &bd[i * k * n..],
                            bstr,
                            &mut ga.data_mut()[i * m * k..],
                            (k, 1),
                            false,
                        );
                    }
                    send(*a, ga, grads);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    for i in 0..bs {
                        if *transpose_b {
                            // dB = dCᵀ·A  ([n,m]·[m,k])
                            gemm(
                                n,
                                m,
                                k,
                                &gd[i * m * n..],
                                (1, n),
                                &ad[i * m * k..],
                                (k, 1),
                                &mut gb.data_mut()[i * n * k..],
                                (k, 1),
                                false,
                            );
                        } else {
                            // dB = Aᵀ·dC  ([k,m]·[m,n])
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..],
                                (1, k),
                                &gd[i * m * n..],
                                (n, 1),
                                &mut gb.data_mut()[i * k * n..],
                                (n, 1),
                                false,
                            );
                        }
                    }
                    send(*b, gb, grads);
                }
            }
            Op::AddBias(x, b) => {
                if wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in gy.data().chunks(n) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    send(*b, Tensor::from_vec(gb), grads);
                }
                send(*x, gy.clone(), grads);
            }
            Op::Add(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.map(|g| -g), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, elementwise(gy, tb, |g, v| g * v), grads);
                }
                if wants(*b) {
                    send(*b, elementwise(gy, ta, |g, v| g * v), grads);
                }
            }
            Op::Scale(x, c) => send(*x, gy.map(|g| g * c), grads),
            Op::Tanh(x) => send(*x, elementwise(gy, y, |g, t| g * (1.0 - t * t)), grads),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                send(*x, gy.clone().reshape(&shape)?, grads);
            }
            Op::SoftmaxLast(x) => {
                let (_, n) = split_last(y.shape())?;
                let mut gx = gy.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                    for (g, p) in gr.iter_mut().zip(yr) {
                        *g = p * (*g - dot);
                    }
                }
                send(*x, gx, grads);
            }
            Op::Conv1dSame { x, w, b } => {
                let (n, cin, len, _) = conv_input_dims(self.value(*x).shape())?;
                let &[cout, _, k] = self.value(*w).shape() else {
                    unreachable!()
                };
                let pad = (k - 1) / 2;
                let (xd, wd, gd) = (self.value(*x).data(), self.value(*w).data(), gy.data());
                if wants(*b) {
                    let mut gb = vec![0.0; cout];
                    for s in 0..n {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[(s * cout + o) * len..(s * cout + o + 1) * len].iter().sum::<f64>();
                        }
                    }
                    send(*b, Tensor::from_vec(gb), grads);
                }
                let (want_x, want_w) = (wants(*x), wants(*w));
                let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { wd.len() } else { 0 }];
                for s in 0..n {
                    for o in 0..cout {
                        let g = &gd[(s * cout + o) * len..(s * cout + o + 1) * len];
                        for c in 0..cin {
                            let xo = (s * cin + c) * len;
                            let wo = (o * cin + c) * k;
                            for (t, gv) in g.iter().enumerate() {
                                for j in 0..k {
                                    let src = t + j;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    if want_w {
                                        gw[wo + j] += gv * xd[xo + src - pad];
                                    }
                                    if want_x {
                                        gx[xo + src - pad] += gv * wd[wo + j];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_w {
                    send(*w, Tensor::new(self.value(*w).shape().to_vec(), gw)?, grads);
                }
                if want_x {
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?, grads);
                }
            }
            Op::MeanLast(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n = *shape.last().unwrap_or(&1);
                let data = gy
                    .data()
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g / n as f64, n))
                    .collect();
                send(*x, Tensor::new(shape, data)?, grads);
            }
            Op::PerVarLinear { x, w, b } => {
                let &[d, h, l] = self.value(*w).shape() else {
                    unreachable!()
                };
                let batch = gy.len() / (d * l);
                let gd = gy.data();
                if wants(*b) {
                    let mut gb = vec![0.0; d * l];
                    for row in gd.chunks(d * l) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    send(*b, Tensor::new(vec![d, l], gb)?, grads);
                }
                if wants(*w) {
                    let xd = self.value(*x).data();
                    let mut gw = Tensor::zeros(&[d, h, l]);
                    for i in 0..d {
                        gemm(
                            h,
                            batch,
                            l,
                            &xd[i * h..],
                            (1, d * h),
                            &gd[i * l..],
                            (d * l, 1),
                            &mut gw.data_mut()[i * h * l..],
                            (l, 1),
                            false,
                        );
                    }
                    send(*w, gw, grads);
                }
                if wants(*x) {
                    let wd = self.value(*w).data();
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for i in 0..d {
                        gemm(
                            batch,
                            l,
                            h,
                            &gd[i * l..],
                            (d * l, 1),
                            &wd[i * h * l..],
                            (1, l),
                            &mut gx.data_mut()[i * h..],
                            (d * h, 1),
                            false,
                        );
                    }
                    send(*x, gx, grads);
                }
            }
            Op::GatedResidual { x, gate, adj } => {
                let tg = self.value(*gate);
                let d = tg.len();
                let l = *y.shape().last().unwrap_or(&1);
                let t: Vec<f64> = tg.data().iter().map(|g| g.tanh()).collect();
                if wants(*gate) {
                    let mut gg = vec![0.0; d];
                    for (row, (g, a)) in gy.data().chunks(l).zip(self.value(*adj).data().chunks(l)).enumerate() {
                        let i = row % d;
                        gg[i] += g.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
                    }
                    for (acc, ti) in gg.iter_mut().zip(&t) {
                        *acc *= 1.0 - ti * ti;
                    }
                    send(*gate, Tensor::new(tg.shape().to_vec(), gg)?, grads);
                }
                if wants(*adj) {
                    let mut ga = gy.clone();
                    for (row, chunk) in ga.data_mut().chunks_mut(l).enumerate() {
                        let ti = t[row % d];
                        chunk.iter_mut().for_each(|v| *v *= ti);
                    }
                    send(*adj, ga, grads);
                }
                send(*x, gy.clone(), grads);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                send(*x, Tensor::full(self.value(*x).shape(), g), grads);
            }
            Op::MseMean(a, b) => {
                let g = gy.data()[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g / ta.len().max(1) as f64;
                let ga = elementwise(ta, tb, |u, v| scale * (u - v));
                if wants(*b) {
                    send(*b, ga.map(|v| -v), grads);
                }
                send(*a, ga, grads);
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked at forward time")
}

fn conv_input_dims(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [c, l] => Ok((1, c, l, false)),
        [n, c, l] => Ok((n, c, l, true)),
        _ => Err(dim_err(format!(
            "conv input must be [C, L] or [N, C, L], got {shape:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_scalar_param() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(4.0), true);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(3.0), true);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[6.0]);
    }

    #[test]
    fn backward_without_forward() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        store.insert("x", Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(), true);
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        // d/dx sum(x·W) = row sums of W
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.conv1d_same(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_sliding_sum_with_zero_padding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.conv1d_same(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv_bias_only() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 5], vec![3.0, 1.0, 4.0, 1.0, 5.0]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 1, 3]));
        let b = g.constant(Tensor::from_vec(vec![2.5]));
        let y = g.conv1d_same(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.5; 5]);
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d_same(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let p = g.softmax_last(x).unwrap();
        for row in g.value(p).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
