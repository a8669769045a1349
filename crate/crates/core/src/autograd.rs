//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is also a topological order. [`Graph::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table keyed by [`Var`].
//!
//! Every operation checks its output for NaN/inf and fails with
//! [`Error::NumericFault`] naming the operation. Nodes only carry gradient
//! state when at least one input requires it, so frozen sub-graphs cost
//! nothing in the backward pass.
//!
//! Matrices are rank-2 row-major; biases and layer-norm affine parameters
//! are rank-1; scalars have shape `[1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Transpose {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f32>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Sum {
        x: Var,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f32>,
        row_mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Layout of a multi-head attention call over packed sequences.
///
/// Rows of q/k/v are split into consecutive segments; tokens only attend
/// within their own segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<usize>,
    pub causal: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { op })
    }
}

/// `c = beta * c + a · b` with optional logical transposes of the stored operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements, matching the
    // strides computed above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact erf-form GELU on one value.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * std_normal_cdf(x)) as f32
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    (std_normal_cdf(x) + x * std_normal_pdf(x)) as f32
}

const LN_EPS: f32 = 1e-5;
const NORM_EPS: f32 = 1e-12;

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

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes are congruent")
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    /// Copies a tensor onto the tape. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Copies a tensor onto the tape without gradient tracking.
    pub fn frozen_leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, rg, Op::Mul { a, b })
    }

    /// Broadcast add of a rank-1 `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for {r}x{c}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push("add_row", vec![r, c], out, rg, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, rg, Op::Scale { x, factor })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push("transpose", vec![c, r], out, rg, Op::Transpose { x })
    }

    /// Row-wise layer normalization with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", "affine parameters must match width"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for (i, row) in self.value(x).chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            "layer_norm",
            vec![r, c],
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.requires_grad(x);
        self.push("softmax", vec![r, c], out, rg, Op::Softmax { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        check_finite("gelu", self.value(x))?;
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, rg, Op::Gelu { x })
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IdOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(
            "gather",
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", format!("width {c2} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
            rg |= self.requires_grad(p);
        }
        self.push(
            "concat_rows",
            vec![rows, c],
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q`, `k`, `v` are `N×d` with heads laid out as contiguous column
    /// blocks of width `d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape("attention", "q, k, v must share shape"));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible into {} heads", spec.heads),
            ));
        }
        if spec.segments.iter().sum::<usize>() != n || spec.segments.contains(&0) {
            return Err(Error::shape(
                "attention",
                format!("segments {:?} do not tile {n} rows", spec.segments),
            ));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(
            spec.segments.iter().map(|l| l * l).sum::<usize>() * spec.heads,
        );
        let mut start = 0;
        for &len in &spec.segments {
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qv[(start + i) * d + col..(start + i) * d + col + dh];
                    let limit = if spec.causal { i + 1 } else { len };
                    let base = probs.len();
                    probs.resize(base + len, 0.0);
                    let row = &mut probs[base..base + len];
                    for (j, s) in row.iter_mut().enumerate().take(limit) {
                        let kj = &kv[(start + j) * d + col..(start + j) * d + col + dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>();
                    }
                    softmax_in_place(&mut row[..limit]);
                    let o = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for (j, &p) in row.iter().enumerate().take(limit) {
                        let vj = &vv[(start + j) * d + col..(start + j) * d + col + dh];
                        o.iter_mut().zip(vj).for_each(|(acc, x)| *acc += p * x);
                    }
                }
            }
            start += len;
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        self.push(
            "attention",
            vec![n, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                spec: spec.clone(),
                probs,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, taken over positions where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (l, v) = self.dims2(logits, "masked_cross_entropy")?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("{l} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= v {
                return Err(Error::IdOutOfRange { id: t, vocab: v });
            }
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (i, row) in probs.chunks_exact_mut(v).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
            if mask[i] {
                total += (lse - row[targets[i]]) as f64;
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = (total / count as f64) as f32;
        let rg = self.requires_grad(logits);
        self.push(
            "masked_cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean of consecutive row groups: `N×d` → `S×d`.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "segment_mean")?;
        if segments.iter().sum::<usize>() != n || segments.contains(&0) || segments.is_empty() {
            return Err(Error::shape(
                "segment_mean",
                format!("segments {segments:?} do not tile {n} rows"),
            ));
        }
        let src = self.value(x);
        let mut out = vec![0.0; segments.len() * d];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                o.iter_mut()
                    .zip(&src[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a /= len as f32);
            start += len;
        }
        let rg = self.requires_grad(x);
        self.push(
            "segment_mean",
            vec![segments.len(), d],
            out,
            rg,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "l2_normalize")?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_exact_mut(c) {
            let norm = (row.iter().map(|v| v * v).sum::<f32>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.requires_grad(x);
        self.push("l2_normalize", vec![r, c], out, rg, Op::L2Normalize { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.requires_grad(x);
        self.push("sum", vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Mean squared error against a constant target over the selected rows.
    pub fn masked_mse(&mut self, pred: Var, target: &[f32], row_mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(pred, "masked_mse")?;
        if target.len() != r * c || row_mask.len() != r {
            return Err(Error::shape("masked_mse", "target/mask incongruent with prediction"));
        }
        let count = row_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let p = self.value(pred);
        let mut total = 0.0f64;
        for i in (0..r).filter(|&i| row_mask[i]) {
            for j in 0..c {
                let e = p[i * c + j] - target[i * c + j];
                total += (e * e) as f64;
            }
        }
        let loss = (total / (count * c) as f64) as f32;
        let rg = self.requires_grad(pred);
        self.push(
            "masked_mse",
            vec![1],
            vec![loss],
            rg,
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                row_mask: row_mask.to_vec(),
                count,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut [f32]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, self.value(*b), true, ga, 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, self.value(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let c = self.shape(*bias)[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for grow in g.chunks_exact(c) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                let gamma_v = self.value(*gamma);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (i, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate()
                    {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gamma_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f32>() / c as f32;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        let out = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[i] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (i, (yrow, grow)) in
                        node.value.chunks_exact(c).zip(g.chunks_exact(c)).enumerate()
                    {
                        let dot = yrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f32>();
                        for j in 0..c {
                            gx[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f32;
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (i, prow) in probs.chunks_exact(v).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        let out = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            out[j] += scale * prow[j];
                        }
                        out[targets[i]] -= scale;
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let d = self.shape(*x)[1];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut start = 0;
                    for (s, &len) in segments.iter().enumerate() {
                        let src = &g[s * d..(s + 1) * d];
                        for r in start..start + len {
                            gx[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b / len as f32);
                        }
                        start += len;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (i, (yrow, grow)) in
                        node.value.chunks_exact(c).zip(g.chunks_exact(c)).enumerate()
                    {
                        let dot = yrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f32>();
                        for j in 0..c {
                            gx[i * c + j] += (grow[j] - yrow[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                row_mask,
                count,
            } => {
                let c = self.shape(*pred)[1];
                let scale = 2.0 * g[0] / (*count * c) as f32;
                let p = self.value(*pred);
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    for i in (0..row_mask.len()).filter(|&i| row_mask[i]) {
                        for j in 0..c {
                            gp[i * c + j] += scale * (p[i * c + j] - target[i * c + j]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = self.requires_grad(q).then(|| vec![0.0; qv.len()]);
        let mut dk = self.requires_grad(k).then(|| vec![0.0; kv.len()]);
        let mut dv = self.requires_grad(v).then(|| vec![0.0; vv.len()]);
        let mut start = 0;
        let mut poff = 0;
        let max_len = spec.segments.iter().copied().max().unwrap_or(0);
        let mut ds = vec![0.0f32; max_len];
        for &len in &spec.segments {
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..len {
                    let limit = if spec.causal { i + 1 } else { len };
                    let prow = &probs[poff + i * len..poff + i * len + len];
                    let gi = &g[(start + i) * d + col..(start + i) * d + col + dh];
                    // dP and the softmax Jacobian
                    let mut dot = 0.0;
                    for j in 0..limit {
                        let vj = &vv[(start + j) * d + col..(start + j) * d + col + dh];
                        let dp = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f32>();
                        ds[j] = dp;
                        dot += dp * prow[j];
                    }
                    for j in 0..limit {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    if let Some(dv) = dv.as_mut() {
                        for j in 0..limit {
                            let p = prow[j];
                            dv[(start + j) * d + col..(start + j) * d + col + dh]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(a, b)| *a += p * b);
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        let out = &mut dq[(start + i) * d + col..(start + i) * d + col + dh];
                        for j in 0..limit {
                            let kj = &kv[(start + j) * d + col..(start + j) * d + col + dh];
                            out.iter_mut().zip(kj).for_each(|(a, b)| *a += ds[j] * b);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qi = &qv[(start + i) * d + col..(start + i) * d + col + dh];
                        for j in 0..limit {
                            dk[(start + j) * d + col..(start + j) * d + col + dh]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(a, b)| *a += ds[j] * b);
                        }
                    }
                }
                poff += len * len;
            }
            start += len;
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(local), Some(slot)) = (local, self.grad_slot(grads, var)) {
                slot.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    fn param(g: &mut Graph, shape: &[usize], data: Vec<f32>) -> Var {
        let t = Tensor::new(shape.to_vec(), data)
            .unwrap()
            .with_requires_grad(true);
        g.leaf(&t).unwrap()
    }

    #[test]
    fn gelu_golden_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(close(gelu_scalar(1.0), 0.841345, 1e-6));
        assert!(close(gelu_scalar(-1.0), -0.158655, 1e-6));
    }

    #[test]
    fn gelu_rejects_non_finite_input() {
        let mut g = Graph::new();
        // Leaves are checked on entry, so smuggle the NaN in through a product.
        let a = g.constant(vec![1], vec![f32::MAX]).unwrap();
        let err = g.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::NumericFault { op: "mul" }));
        let nan = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(g.leaf(&nan), Err(Error::NumericFault { op: "leaf" })));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(vec![5, 64], vec![0.0; 5 * 64]).unwrap();
        let loss = g
            .masked_cross_entropy(logits, &[1, 7, 63, 0, 2], &[true; 5])
            .unwrap();
        assert!(close(g.scalar_value(loss), 64f32.ln(), 1e-6));
        assert!(close(g.scalar_value(loss), 4.158883, 1e-5));
    }

    #[test]
    fn confident_correct_logits_give_vanishing_loss() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 3 * 4];
        for (i, t) in [2usize, 0, 3].iter().enumerate() {
            data[i * 4 + t] = 20.0;
        }
        let logits = g.constant(vec![3, 4], data).unwrap();
        let loss = g
            .masked_cross_entropy(logits, &[2, 0, 3], &[true; 3])
            .unwrap();
        // ln(1 + 3e^-20) ≈ 6.2e-9
        assert!(g.scalar_value(loss) < 1e-8);
        assert!(g.scalar_value(loss) >= 0.0);
    }

    #[test]
    fn single_masked_position_equals_its_nll() {
        let data = vec![0.3, -1.2, 2.0, 0.1, 0.5, -0.4, 1.5, 1.0, -2.0];
        let mut g = Graph::new();
        let logits = g.constant(vec![3, 3], data.clone()).unwrap();
        let masked = g
            .masked_cross_entropy(logits, &[0, 2, 1], &[false, true, false])
            .unwrap();
        let row = &data[3..6];
        let lse = row.iter().map(|x: &f32| x.exp()).sum::<f32>().ln();
        assert!(close(g.scalar_value(masked), lse - row[2], 1e-6));
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::new();
        let logits = g.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(matches!(
            g.masked_cross_entropy(logits, &[0, 1], &[false, false]),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            g.masked_cross_entropy(logits, &[0, 9], &[true, true]),
            Err(Error::IdOutOfRange { id: 9, vocab: 4 })
        ));
        // Out-of-range ids at masked-out positions are never read.
        assert!(g.masked_cross_entropy(logits, &[0, 9], &[true, false]).is_ok());
    }

    #[test]
    fn cross_entropy_gradient_only_on_masked_rows() {
        let mut g = Graph::new();
        let logits = param(&mut g, &[3, 4], (0..12).map(|i| i as f32 * 0.1).collect());
        let loss = g
            .masked_cross_entropy(logits, &[0, 1, 2], &[true, false, true])
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(logits).unwrap();
        assert!(gl[4..8].iter().all(|&x| x == 0.0));
        assert!(gl[0..4].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = param(&mut g, &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let xs = vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0];
        let mut g = Graph::new();
        let x = param(&mut g, &[2, 3], xs.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let expected: Vec<f32> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = param(&mut g, &[1, 2], vec![0.5, -0.5]);
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = param(&mut g, &[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn causal_attention_ignores_the_future() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..4 * 8).map(|i| ((i * 7) % 11) as f32 * 0.1).collect();
        let x = g.constant(vec![4, 8], data.clone()).unwrap();
        let spec = AttentionSpec {
            heads: 2,
            segments: vec![4],
            causal: true,
        };
        let a = g.attention(x, x, x, &spec).unwrap();
        let mut perturbed = data;
        perturbed[3 * 8..].iter_mut().for_each(|v| *v += 1.0);
        let y = g.constant(vec![4, 8], perturbed).unwrap();
        let b = g.attention(y, y, y, &spec).unwrap();
        assert_eq!(&g.value(a)[..3 * 8], &g.value(b)[..3 * 8]);
        assert_ne!(&g.value(a)[3 * 8..], &g.value(b)[3 * 8..]);
    }

    #[test]
    fn attention_segments_are_isolated() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..6 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let both = g.constant(vec![6, 4], data.clone()).unwrap();
        let spec = AttentionSpec {
            heads: 1,
            segments: vec![2, 4],
            causal: false,
        };
        let packed = g.attention(both, both, both, &spec).unwrap();
        let tail = g.constant(vec![4, 4], data[8..].to_vec()).unwrap();
        let alone = g
            .attention(
                tail,
                tail,
                tail,
                &AttentionSpec {
                    heads: 1,
                    segments: vec![4],
                    causal: false,
                },
            )
            .unwrap();
        assert_eq!(&g.value(packed)[8..], g.value(alone));
    }
}
