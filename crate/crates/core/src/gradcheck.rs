//! Finite-difference gradient checking for every autodiff primitive.
//!
//! Each case evaluates a primitive on random inputs twice: once through the
//! `f32` [`Graph`] (forward + backward), and once through a naive `f64`
//! reference written directly from the operation's definition. Central
//! differences of the reference give the numeric gradient; the reported
//! error for an input is `‖analytic − numeric‖∞ / ‖numeric‖∞`.
//!
//! The reference functions here share no code with [`crate::autograd`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Acceptance bound on the relative error.
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct PrimitiveReport {
    pub primitive: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl PrimitiveReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> f64>;

struct Case {
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: Build,
    reference: Reference,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

/// Inputs are rounded to f32 up front so both paths see identical values.
fn as_f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

fn check(case: &Case) -> Result<f64> {
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(case.inputs.len());
    for (shape, data) in &case.inputs {
        let t = Tensor::new(shape.clone(), data.iter().map(|&x| x as f32).collect())?
            .with_requires_grad(true);
        vars.push(g.leaf(&t)?);
    }
    let loss = (case.build)(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut values: Vec<Vec<f64>> = case.inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; values[i].len()],
        };
        let mut numeric = vec![0.0; values[i].len()];
        for j in 0..values[i].len() {
            let orig = values[i][j];
            values[i][j] = orig + FD_STEP;
            let up = (case.reference)(&values);
            values[i][j] = orig - FD_STEP;
            let down = (case.reference)(&values);
            values[i][j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = if scale > 1e-6 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn weighted_sum(g: &mut Graph, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(shape, weights.iter().map(|&x| x as f32).collect())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- f64 reference definitions ----

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn ref_gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn ref_layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let denom = (var + 1e-5).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) / denom * gamma[j] + beta[j]);
        }
    }
    out
}

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[allow(clippy::too_many_arguments)]
fn ref_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    segments: &[usize],
    causal: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; q.len()];
    let mut start = 0;
    for &len in segments {
        for h in 0..heads {
            for i in 0..len {
                let visible: Vec<usize> = (0..len).filter(|&j| !causal || j <= i).collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|c| q[(start + i) * d + h * dh + c] * k[(start + j) * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let p = ref_softmax(&scores);
                for c in 0..dh {
                    out[(start + i) * d + h * dh + c] = visible
                        .iter()
                        .zip(&p)
                        .map(|(&j, pj)| pj * v[(start + j) * d + h * dh + c])
                        .sum();
                }
            }
        }
        start += len;
    }
    out
}

fn ref_cross_entropy(logits: &[f64], v: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, row) in logits.chunks(v).enumerate() {
        if mask[i] {
            total -= ref_softmax(row)[targets[i]].ln();
            count += 1;
        }
    }
    total / count as f64
}

fn segments_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut segs = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = rng.gen_range(1..=left);
        segs.push(s);
        left -= s;
    }
    segs
}

// ---- case generators ----

fn matmul_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let w = rand_vec(rng, m * n, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![m, k], as_f32_exact(rand_vec(rng, m * k, 1.0))),
            (vec![k, n], as_f32_exact(rand_vec(rng, k * n, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| dot(&ref_matmul(&x[0], &x[1], m, k, n), &w2)),
    }
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0))),
            (vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect();
            dot(&y, &w2)
        }),
    }
}

fn mul_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0))),
            (vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect();
            dot(&y, &w2)
        }),
    }
}

fn add_row_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0))),
            (vec![c], as_f32_exact(rand_vec(rng, c, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0]
                .iter()
                .enumerate()
                .map(|(i, a)| a + x[1][i % c])
                .collect();
            dot(&y, &w2)
        }),
    }
}

fn layer_norm_case(rng: &mut ChaCha8Rng) -> Case {
    let r = dim(rng);
    // Width 2 makes the map nearly constant and rows with tiny spread are
    // ill-conditioned for a finite-difference step of 1e-3.
    let c = rng.gen_range(3..=8);
    let mut x = rand_vec(rng, r * c, 0.5);
    for row in x.chunks_mut(c) {
        for (j, v) in row.iter_mut().enumerate() {
            *v += j as f64;
        }
    }
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    let mut gamma = rand_vec(rng, c, 1.0);
    gamma.iter_mut().for_each(|x| *x += 1.0);
    Case {
        inputs: vec![
            (vec![r, c], as_f32_exact(x)),
            (vec![c], as_f32_exact(gamma)),
            (vec![c], as_f32_exact(rand_vec(rng, c, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| dot(&ref_layer_norm(&x[0], c, &x[1], &x[2]), &w2)),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(rand_vec(rng, r * c, 2.0)))],
        build: Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].chunks(c).flat_map(ref_softmax).collect();
            dot(&y, &w2)
        }),
    }
}

fn gelu_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(rand_vec(rng, r * c, 3.0)))],
        build: Box::new(move |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].iter().map(|&a| ref_gelu(a)).collect();
            dot(&y, &w2)
        }),
    }
}

fn gather_case(rng: &mut ChaCha8Rng) -> Case {
    let (v, d, n) = (dim(rng), dim(rng), dim(rng));
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let ids2 = ids.clone();
    let w = rand_vec(rng, n * d, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![v, d], as_f32_exact(rand_vec(rng, v * d, 1.0)))],
        build: Box::new(move |g, vars| {
            let y = g.gather(vars[0], &ids)?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = ids2
                .iter()
                .flat_map(|&id| x[0][id * d..(id + 1) * d].to_vec())
                .collect();
            dot(&y, &w2)
        }),
    }
}

fn attention_case(rng: &mut ChaCha8Rng, causal: bool) -> Case {
    let heads = rng.gen_range(1..=2);
    let dh = rng.gen_range(1..=4);
    let d = heads * dh;
    let n = dim(rng);
    let segments = segments_for(rng, n);
    let spec = AttentionSpec {
        heads,
        segments: segments.clone(),
        causal,
    };
    let w = rand_vec(rng, n * d, 1.0);
    let w2 = w.clone();
    Case {
        inputs: (0..3)
            .map(|_| (vec![n, d], as_f32_exact(rand_vec(rng, n * d, 1.5))))
            .collect(),
        build: Box::new(move |g, v| {
            let y = g.attention(v[0], v[1], v[2], &spec)?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            dot(
                &ref_attention(&x[0], &x[1], &x[2], d, heads, &segments, causal),
                &w2,
            )
        }),
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Case {
    let (l, v) = (dim(rng), rng.gen_range(2..=8));
    let targets: Vec<usize> = (0..l).map(|_| rng.gen_range(0..v)).collect();
    let mut mask: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.6)).collect();
    let forced = rng.gen_range(0..l);
    mask[forced] = true;
    let (t2, m2) = (targets.clone(), mask.clone());
    Case {
        inputs: vec![(vec![l, v], as_f32_exact(rand_vec(rng, l * v, 2.0)))],
        build: Box::new(move |g, vars| g.masked_cross_entropy(vars[0], &targets, &mask)),
        reference: Box::new(move |x| ref_cross_entropy(&x[0], v, &t2, &m2)),
    }
}

fn transpose_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0)))],
        build: Box::new(move |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    y[j * r + i] = x[0][i * c + j];
                }
            }
            dot(&y, &w2)
        }),
    }
}

fn scale_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let factor = rng.gen_range(-3.0..3.0f32);
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0)))],
        build: Box::new(move |g, v| {
            let y = g.scale(v[0], factor)?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].iter().map(|a| a * factor as f64).collect();
            dot(&y, &w2)
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> Case {
    let c = dim(rng);
    let (r1, r2) = (dim(rng), dim(rng));
    let w = rand_vec(rng, (r1 + r2) * c, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![r1, c], as_f32_exact(rand_vec(rng, r1 * c, 1.0))),
            (vec![r2, c], as_f32_exact(rand_vec(rng, r2 * c, 1.0))),
        ],
        build: Box::new(move |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0].iter().chain(&x[1]).copied().collect();
            dot(&y, &w2)
        }),
    }
}

fn segment_mean_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, d) = (dim(rng), dim(rng));
    let segments = segments_for(rng, n);
    let s2 = segments.clone();
    let w = rand_vec(rng, segments.len() * d, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![(vec![n, d], as_f32_exact(rand_vec(rng, n * d, 1.0)))],
        build: Box::new(move |g, v| {
            let y = g.segment_mean(v[0], &segments)?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let mut y = Vec::new();
            let mut start = 0;
            for &len in &s2 {
                for j in 0..d {
                    y.push((start..start + len).map(|r| x[0][r * d + j]).sum::<f64>() / len as f64);
                }
                start += len;
            }
            dot(&y, &w2)
        }),
    }
}

fn l2_normalize_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let w = rand_vec(rng, r * c, 1.0);
    let w2 = w.clone();
    let mut x = rand_vec(rng, r * c, 1.0);
    // keep rows away from the origin, where the map is singular
    for row in x.chunks_mut(c) {
        row[0] += 1.5f64.copysign(row[0]);
    }
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(x))],
        build: Box::new(move |g, v| {
            let y = g.l2_normalize(v[0])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |x| {
            let y: Vec<f64> = x[0]
                .chunks(c)
                .flat_map(|row| {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter().map(move |v| v / n).collect::<Vec<_>>()
                })
                .collect();
            dot(&y, &w2)
        }),
    }
}

fn masked_mse_case(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng), dim(rng));
    let target: Vec<f32> = rand_vec(rng, r * c, 1.0).iter().map(|&x| x as f32).collect();
    let mut mask: Vec<bool> = (0..r).map(|_| rng.gen_bool(0.5)).collect();
    let forced = rng.gen_range(0..r);
    mask[forced] = true;
    let (t2, m2) = (target.clone(), mask.clone());
    Case {
        inputs: vec![(vec![r, c], as_f32_exact(rand_vec(rng, r * c, 1.0)))],
        build: Box::new(move |g, v| g.masked_mse(v[0], &target, &mask)),
        reference: Box::new(move |x| {
            let mut total = 0.0;
            let mut count = 0;
            for i in (0..r).filter(|&i| m2[i]) {
                for j in 0..c {
                    total += (x[0][i * c + j] - t2[i * c + j] as f64).powi(2);
                }
                count += c;
            }
            total / count as f64
        }),
    }
}

/// Random two-layer perceptron `gelu(x·W1 + b1)·W2 + b2`, all parameters checked.
fn mlp_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, din, hidden, dout) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let x = as_f32_exact(rand_vec(rng, n * din, 1.0));
    let x2 = x.clone();
    let w = rand_vec(rng, n * dout, 1.0);
    let w2 = w.clone();
    Case {
        inputs: vec![
            (vec![din, hidden], as_f32_exact(rand_vec(rng, din * hidden, 0.8))),
            (vec![hidden], as_f32_exact(rand_vec(rng, hidden, 0.5))),
            (vec![hidden, dout], as_f32_exact(rand_vec(rng, hidden * dout, 0.8))),
            (vec![dout], as_f32_exact(rand_vec(rng, dout, 0.5))),
        ],
        build: Box::new(move |g, v| {
            let xv = g.constant(vec![n, din], x.iter().map(|&a| a as f32).collect())?;
            let h = g.matmul(xv, v[0])?;
            let h = g.add_row(h, v[1])?;
            let h = g.gelu(h)?;
            let y = g.matmul(h, v[2])?;
            let y = g.add_row(y, v[3])?;
            weighted_sum(g, y, &w)
        }),
        reference: Box::new(move |p| {
            let mut h = ref_matmul(&x2, &p[0], n, din, hidden);
            for (i, v) in h.iter_mut().enumerate() {
                *v = ref_gelu(*v + p[1][i % hidden]);
            }
            let mut y = ref_matmul(&h, &p[2], n, hidden, dout);
            for (i, v) in y.iter_mut().enumerate() {
                *v += p[3][i % dout];
            }
            dot(&y, &w2)
        }),
    }
}

type Generator = fn(&mut ChaCha8Rng) -> Case;

fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("matmul", matmul_case),
        ("add", add_case),
        ("mul", mul_case),
        ("add_row", add_row_case),
        ("layer_norm", layer_norm_case),
        ("softmax", softmax_case),
        ("gelu", gelu_case),
        ("gather", gather_case),
        ("attention_causal", |r| attention_case(r, true)),
        ("attention_full", |r| attention_case(r, false)),
        ("masked_cross_entropy", cross_entropy_case),
        ("transpose", transpose_case),
        ("scale", scale_case),
        ("concat_rows", concat_case),
        ("segment_mean", segment_mean_case),
        ("l2_normalize", l2_normalize_case),
        ("masked_mse", masked_mse_case),
        ("mlp_2layer", mlp_case),
    ]
}

/// Runs `cases_per_primitive` seeded random cases for every primitive.
pub fn run_gradcheck(seed: u64, cases_per_primitive: usize) -> Result<Vec<PrimitiveReport>> {
    let mut reports = Vec::new();
    for (idx, (name, generate)) in generators().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(idx as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..cases_per_primitive {
            let case = generate(&mut rng);
            worst = worst.max(check(&case)?);
        }
        reports.push(PrimitiveReport {
            primitive: name,
            cases: cases_per_primitive,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_a_handful_of_cases() {
        for r in run_gradcheck(11, 5).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.primitive, r.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx sum(gelu(x)) checked against a reference for sum(x): must fail.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let case = Case {
            inputs: vec![(vec![2, 3], as_f32_exact(rand_vec(&mut rng, 6, 2.0)))],
            build: Box::new(|g, v| {
                let y = g.gelu(v[0])?;
                g.sum(y)
            }),
            reference: Box::new(|x| x[0].iter().sum()),
        };
        assert!(check(&case).unwrap() > REL_TOLERANCE);
    }
}
