//! Reference implementations used as test oracles. They share nothing with
//! the library beyond the `Matrix` container and favour the most literal
//! formula over speed. The finite-difference helpers at the end run the
//! library's value-only forward pass against its tape; the rest (random
//! traces, random archives) are fixtures.

#![allow(dead_code)]

use knz::autodiff::{ParamId, Tape};
use knz::distill::{
    lm_pair, loss_total, record_losses, scoped_layers, DistillWeights, LossOptions,
};
use knz::io::archive::{DType, Tensor, TensorArchive};
use knz::kronecker::FactorShapes;
use knz::layers::{CompressionSchedule, DenseLinear, Linear, Role};
use knz::model::{ForwardTrace, GPTConfig, Leaves, TinyGPTModel, TokenEmbedding};
use knz::{Matrix, Rng};

pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::randn(rows, cols, 1.0, rng)
}

/// Triple-loop `a * b`.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
}

/// Kronecker product straight from the index definition.
pub fn naive_kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (m2, n2) = b.shape();
    Matrix::from_fn(a.rows() * m2, a.cols() * n2, |r, c| {
        a.get(r / m2, c / n2) * b.get(r % m2, c % n2)
    })
}

/// `R[i1 n1 + j1, i2 n2 + j2] = W[i1 m2 + i2, j1 n2 + j2]`.
pub fn naive_rearrange(w: &Matrix, s: FactorShapes) -> Matrix {
    Matrix::from_fn(s.m1 * s.n1, s.m2 * s.n2, |r, c| {
        let (i1, j1) = (r / s.n1, r % s.n1);
        let (i2, j2) = (c / s.n2, c % s.n2);
        w.get(i1 * s.m2 + i2, j1 * s.n2 + j2)
    })
}

pub fn fro(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn fro_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `||a - b||_F / max(||b||_F, tiny)`.
pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    fro_diff(a, b) / fro(b).max(1e-300)
}

/// Singular values (descending) by one-sided Jacobi rotations on the
/// columns of `a`, with the matching right singular vectors as columns of
/// the returned `v`.
pub fn jacobi_svd(a: &Matrix) -> (Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    let mut u = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (up, uq) = (u.get(i, p), u.get(i, q));
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (up, uq) = (u.get(i, p), u.get(i, q));
                    u.set(i, p, c * up - s * uq);
                    u.set(i, q, s * up + c * uq);
                }
                for i in 0..n {
                    let (vp, vq) = (v.get(i, p), v.get(i, q));
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> = (0..n)
        .map(|j| ((0..m).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt(), j))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let vs = Matrix::from_fn(n, n, |i, k| v.get(i, sv[k].1));
    (sv.into_iter().map(|(s, _)| s).collect(), vs)
}

/// Largest singular value, from the smaller Gram side.
pub fn top_singular_value(a: &Matrix) -> f64 {
    if a.rows() < a.cols() {
        jacobi_svd(&naive_transpose(a)).0[0]
    } else {
        jacobi_svd(a).0[0]
    }
}

/// `min ||W - A ⊗ B||_F` from the singular values of the rearrangement:
/// `sqrt(||W||^2 - sigma_1^2)`.
pub fn nearest_kron_residual(w: &Matrix, s: FactorShapes) -> f64 {
    let r = naive_rearrange(w, s);
    let sigma = top_singular_value(&r);
    (fro(w).powi(2) - sigma * sigma).max(0.0).sqrt()
}

fn permutations(n: usize) -> Vec<(Vec<usize>, f64)> {
    // Heap's algorithm, tracking the sign of each permutation.
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let mut sign = 1.0;
    out.push((p.clone(), sign));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            sign = -sign;
            out.push((p.clone(), sign));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Leibniz formula.
pub fn brute_det(a: &Matrix) -> f64 {
    assert_eq!(a.rows(), a.cols());
    permutations(a.rows())
        .into_iter()
        .map(|(p, sign)| {
            sign * p
                .iter()
                .enumerate()
                .map(|(i, &j)| a.get(i, j))
                .product::<f64>()
        })
        .sum()
}

/// Gauss-Jordan with partial pivoting.
pub fn gauss_jordan_inverse(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m.get(x, col).abs().total_cmp(&m.get(y, col).abs()))?;
        if m.get(piv, col).abs() < 1e-12 {
            return None;
        }
        for j in 0..n {
            let (a1, a2) = (m.get(col, j), m.get(piv, j));
            m.set(col, j, a2);
            m.set(piv, j, a1);
            let (b1, b2) = (inv.get(col, j), inv.get(piv, j));
            inv.set(col, j, b2);
            inv.set(piv, j, b1);
        }
        let d = m.get(col, col);
        for j in 0..n {
            m.set(col, j, m.get(col, j) / d);
            inv.set(col, j, inv.get(col, j) / d);
        }
        for r in 0..n {
            if r != col {
                let f = m.get(r, col);
                for j in 0..n {
                    m.set(r, j, m.get(r, j) - f * m.get(col, j));
                    inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
                }
            }
        }
    }
    Some(inv)
}

/// Gradients of `Y = X (A ⊗ B)^T` through the materialized weight:
/// `dW = G^T X`, then `dA`, `dB` by the chain rule through each entry of
/// `W = A ⊗ B`, and `dX = G W`.
pub fn materialized_kron_grads(
    a: &Matrix,
    b: &Matrix,
    x: &Matrix,
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let w = naive_kron(a, b);
    let dw = naive_matmul(&naive_transpose(g), x);
    let (m2, n2) = b.shape();
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(m2, n2);
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let (i1, i2, j1, j2) = (r / m2, r % m2, c / n2, c % n2);
            let d = dw.get(r, c);
            da.set(i1, j1, da.get(i1, j1) + d * b.get(i2, j2));
            db.set(i2, j2, db.get(i2, j2) + d * a.get(i1, j1));
        }
    }
    (da, db, naive_matmul(g, &w))
}

pub fn mse_oracle(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += (a.get(i, j) - b.get(i, j)).powi(2);
        }
    }
    s / (a.rows() * a.cols()) as f64
}

/// `Σ p ln(p / q)` over entries with `p > 0`.
pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            s += pi * (pi.ln() - qi.ln());
        }
    }
    s
}

/// Mean over rows of `-(z_t - log Σ exp z)`, with the log-sum-exp shifted
/// by the row maximum.
pub fn ce_oracle(logits: &Matrix, targets: &[usize]) -> f64 {
    let mut s = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        s += lse - row[t];
    }
    s / targets.len() as f64
}

/// A random causal row-stochastic matrix.
pub fn random_causal_attention(t: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        let w: Vec<f64> = (0..=i).map(|_| rng.uniform() + 0.05).collect();
        let s: f64 = w.iter().sum();
        for (j, x) in w.iter().enumerate() {
            m.set(i, j, x / s);
        }
    }
    m
}

/// Central difference of `f` at every requested coordinate of `x`.
pub fn central_difference(
    x: &Matrix,
    coords: &[(usize, usize)],
    h: f64,
    mut f: impl FnMut(&Matrix) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&(i, j)| {
            let mut xp = x.clone();
            xp.set(i, j, x.get(i, j) + h);
            let mut xm = x.clone();
            xm.set(i, j, x.get(i, j) - h);
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn tiny_config(seed: u64) -> GPTConfig {
    GPTConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 32,
        vocab: 16,
        max_seq_len: 8,
        seed,
        ..GPTConfig::default()
    }
}

/// The desk model scaled down by 64 from GPT-2 small in width.
pub fn desk_config(seed: u64) -> GPTConfig {
    GPTConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 12,
        d_ff: 48,
        vocab: 64,
        max_seq_len: 16,
        seed,
        ..GPTConfig::default()
    }
}

/// A dense model whose weights under `schedule` are exact Kronecker
/// products of the planned shapes, so compression is lossless.
pub fn kron_structured_model(
    config: GPTConfig,
    schedule: &CompressionSchedule,
    rng: &mut Rng,
) -> TinyGPTModel {
    let mut m = TinyGPTModel::new(config.clone()).unwrap();
    if schedule.compress_embedding {
        let f = schedule.embedding_factor;
        let a = Matrix::randn(config.vocab, config.d_model / f, 0.3, rng);
        let b = Matrix::randn(1, f, 1.0, rng);
        m.wte = TokenEmbedding::Dense(naive_kron(&a, &b));
    }
    for (i, block) in m.blocks.iter_mut().enumerate() {
        if !schedule.layers.selects(i) {
            continue;
        }
        for role in Role::ALL {
            if !schedule.factors_role(role) {
                continue;
            }
            let (o, n) = config.role_dims(role);
            let s = schedule.shapes_for(role, o, n).unwrap();
            let w = naive_kron(
                &Matrix::randn(s.m1, s.n1, 0.2, rng),
                &Matrix::randn(s.m2, s.n2, 1.0, rng),
            );
            let bias = block.linear(role).bias().cloned();
            *block.linear_mut(role) = Linear::Dense(DenseLinear::new(w, bias).unwrap());
        }
    }
    m
}

/// Random token ids below `vocab`.
pub fn random_tokens(n: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

/// Loss and per-parameter gradients of one sequence through the tape,
/// layers as in [`knz::distill::scoped_layers`] with the default scope.
pub fn tape_loss_and_grads(
    student: &TinyGPTModel,
    teacher: &TinyGPTModel,
    window: &[usize],
    w: &DistillWeights,
    opts: &LossOptions,
) -> (f64, Vec<Matrix>) {
    let (input, targets) = lm_pair(window).unwrap();
    let layers = scoped_layers(student, opts.layer_scope);
    let t_trace = teacher.forward(input).unwrap();
    let mut tape = Tape::new();
    let traced = student.record(&mut tape, input, Leaves::Trainable).unwrap();
    let ce = tape.cross_entropy(traced.logits, targets).unwrap();
    let nodes = record_losses(&mut tape, &traced, &t_trace, ce, w, opts, &layers).unwrap();
    let store = tape.backward(nodes.total).unwrap();
    let grads = student
        .named_params()
        .iter()
        .enumerate()
        .map(|(i, (_, m))| {
            store
                .get(ParamId(i))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    (tape.scalar(nodes.total), grads)
}

/// The same loss through the value-only path.
pub fn value_loss(
    student: &TinyGPTModel,
    teacher: &TinyGPTModel,
    window: &[usize],
    w: &DistillWeights,
    opts: &LossOptions,
) -> f64 {
    let (input, targets) = lm_pair(window).unwrap();
    let layers = scoped_layers(student, opts.layer_scope);
    let s = student.forward(input).unwrap();
    let t = teacher.forward(input).unwrap();
    loss_total(&s, &t, targets, w, opts, Some(&layers))
        .unwrap()
        .0
}

/// Central differences of [`value_loss`] at `n` sampled parameter
/// coordinates, paired with the tape gradient there.
pub fn sampled_gradient_check(
    student: &TinyGPTModel,
    teacher: &TinyGPTModel,
    window: &[usize],
    w: &DistillWeights,
    opts: &LossOptions,
    n: usize,
    rng: &mut Rng,
) -> Vec<(String, f64, f64)> {
    let (_, grads) = tape_loss_and_grads(student, teacher, window, w, opts);
    let names: Vec<String> = student
        .named_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let h = 1e-5;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = rng.below(names.len());
        let (r, c) = grads[p].shape();
        let (i, j) = (rng.below(r), rng.below(c));
        let mut probe = student.clone();
        let base = probe.params_mut()[p].get(i, j);
        probe.params_mut()[p].set(i, j, base + h);
        let up = value_loss(&probe, teacher, window, w, opts);
        probe.params_mut()[p].set(i, j, base - h);
        let down = value_loss(&probe, teacher, window, w, opts);
        out.push((
            format!("{}[{i},{j}]", names[p]),
            grads[p].get(i, j),
            (up - down) / (2.0 * h),
        ));
    }
    out
}

/// Loop-level reference forward pass over the dense form of every weight.
pub struct NaiveTrace {
    pub embedding: Matrix,
    pub attention: Vec<Vec<Matrix>>,
    pub hidden: Vec<Matrix>,
    pub final_hidden: Matrix,
    pub logits: Matrix,
}

fn naive_layernorm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Matrix {
    let d = x.cols() as f64;
    Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        (row[c] - mean) / (var + eps).sqrt() * gain.get(0, c) + bias.get(0, c)
    })
}

fn naive_linear(layer: &Linear, x: &Matrix) -> Matrix {
    let w = layer.dense_weight();
    let mut y = naive_matmul(x, &naive_transpose(&w));
    if let Some(b) = layer.bias() {
        y = Matrix::from_fn(y.rows(), y.cols(), |r, c| y.get(r, c) + b.get(0, c));
    }
    y
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn naive_forward(model: &TinyGPTModel, tokens: &[usize]) -> NaiveTrace {
    let cfg = &model.config;
    let t = tokens.len();
    let table = model.wte.materialize();
    let embedding = Matrix::from_fn(t, cfg.d_model, |r, c| {
        table.get(tokens[r], c) + model.wpe.get(r, c)
    });
    let hd = cfg.d_model / cfg.n_heads;
    let mut x = embedding.clone();
    let (mut attention, mut hidden) = (Vec::new(), Vec::new());
    for b in &model.blocks {
        let h = naive_layernorm(&x, &b.ln1.gain, &b.ln1.bias, cfg.ln_eps);
        let (q, k, v) = (
            naive_linear(&b.q, &h),
            naive_linear(&b.k, &h),
            naive_linear(&b.v, &h),
        );
        let mut merged = Matrix::zeros(t, cfg.d_model);
        let mut layer = Vec::new();
        for head in 0..cfg.n_heads {
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..hd)
                            .map(|c| q.get(i, head * hd + c) * k.get(j, head * hd + c))
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for (j, sj) in s.iter().enumerate() {
                    p.set(i, j, (sj - m).exp() / z);
                }
                for c in 0..hd {
                    let o: f64 = (0..=i).map(|j| p.get(i, j) * v.get(j, head * hd + c)).sum();
                    merged.set(i, head * hd + c, o);
                }
            }
            layer.push(p);
        }
        attention.push(layer);
        x = x.add(&naive_linear(&b.o, &merged)).unwrap();
        let h = naive_layernorm(&x, &b.ln2.gain, &b.ln2.bias, cfg.ln_eps);
        let up = naive_linear(&b.fc, &h).map(naive_gelu);
        x = x.add(&naive_linear(&b.proj, &up)).unwrap();
        hidden.push(x.clone());
    }
    let final_hidden = naive_layernorm(&x, &model.ln_f.gain, &model.ln_f.bias, cfg.ln_eps);
    let logits = naive_matmul(&final_hidden, &naive_transpose(&model.lm_head.weight));
    NaiveTrace {
        embedding,
        attention,
        hidden,
        final_hidden,
        logits,
    }
}

/// Relative agreement within 1e-9. Some gradients (key biases) vanish
/// exactly in theory and are rounding noise in both paths, hence the floor.
pub fn grads_close(got: &Matrix, want: &Matrix) -> bool {
    fro_diff(got, want) <= 1e-9 * fro(want).max(1e-6)
}

/// `dL/dA`, `dL/dB` from `dL/dW` for `W = A ⊗ B` by the index definition.
pub fn kron_factor_grads(a: &Matrix, b: &Matrix, dw: &Matrix) -> (Matrix, Matrix) {
    let (m2, n2) = b.shape();
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(m2, n2);
    for i1 in 0..a.rows() {
        for j1 in 0..a.cols() {
            for i2 in 0..m2 {
                for j2 in 0..n2 {
                    let g = dw.get(i1 * m2 + i2, j1 * n2 + j2);
                    da.set(i1, j1, da.get(i1, j1) + g * b.get(i2, j2));
                    db.set(i2, j2, db.get(i2, j2) + g * a.get(i1, j1));
                }
            }
        }
    }
    (da, db)
}

/// A random trace with valid causal attention rows.
pub fn random_trace(
    t: usize,
    d: usize,
    v: usize,
    layers: usize,
    heads: usize,
    rng: &mut Rng,
) -> ForwardTrace {
    ForwardTrace {
        embedding: random(t, d, rng),
        attention: (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| random_causal_attention(t, rng))
                    .collect()
            })
            .collect(),
        hidden: (0..layers).map(|_| random(t, d, rng)).collect(),
        ffn_out: (0..layers).map(|_| random(t, d, rng)).collect(),
        logits: random(t, v, rng),
    }
}

pub fn attention_oracle(s: &ForwardTrace, t: &ForwardTrace) -> f64 {
    let mut total = 0.0;
    for (sl, tl) in s.attention.iter().zip(&t.attention) {
        let mut layer = 0.0;
        for (q, p) in sl.iter().zip(tl) {
            let n = q.rows();
            let rows: f64 = (0..n)
                .map(|i| kl_oracle(&p.row(i)[..=i], &q.row(i)[..=i]))
                .sum();
            layer += rows / n as f64;
        }
        total += layer / sl.len() as f64;
    }
    total
}

pub fn random_archive(rng: &mut Rng) -> TensorArchive {
    let mut a = TensorArchive::new();
    let n = rng.below(6);
    for i in 0..n {
        let name_len = 1 + rng.below(40);
        let name: String = (0..name_len)
            .map(|k| char::from(b'a' + ((i * 7 + k) % 26) as u8))
            .collect();
        let name = format!("{i}.{name}");
        let rank = rng.below(4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.below(5)).collect();
        let len: usize = dims.iter().product();
        let dtype = if rng.below(2) == 0 {
            DType::F32
        } else {
            DType::F64
        };
        let data: Vec<f64> = (0..len)
            .map(|_| {
                let v = rng.normal() * 1e3;
                if dtype == DType::F32 {
                    v as f32 as f64
                } else {
                    v
                }
            })
            .collect();
        a.push(Tensor {
            name,
            dtype,
            dims,
            data,
        })
        .unwrap();
    }
    a
}

pub fn bits(a: &TensorArchive) -> Vec<(String, u8, Vec<usize>, Vec<u64>)> {
    a.tensors()
        .iter()
        .map(|t| {
            (
                t.name.clone(),
                t.dtype as u8,
                t.dims.clone(),
                t.data.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}
