//! Dense versus factored matrix-vector products: operation counts and
//! wall-clock timings.
//!
//! Flops are counted as two per multiply-add.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kronecker::{FactorShapes, KroneckerPair};
use crate::tensor::{matmul_nt, Matrix, Rng};

/// Flops of `W x` for a dense `m x n` weight.
pub fn dense_flops(m: usize, n: usize) -> u64 {
    2 * m as u64 * n as u64
}

/// Flops of `(A ⊗ B) x` evaluated as `vec(A X B^T)` in the cheaper order.
pub fn factored_flops(shapes: FactorShapes) -> u64 {
    2 * shapes.matvec_macs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub a_shape: String,
    pub b_shape: String,
    pub dense_params: usize,
    pub factored_params: usize,
    pub param_ratio: f64,
    pub dense_flops: u64,
    pub factored_flops: u64,
    pub flop_ratio: f64,
    /// Median nanoseconds per dense matvec, 0 when timing is skipped.
    pub dense_ns: f64,
    pub factored_ns: f64,
    pub speedup: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "m,n,a_shape,b_shape,dense_params,factored_params,param_ratio,dense_flops,factored_flops,flop_ratio,dense_ns,factored_ns,speedup";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{},{},{:.4},{:.1},{:.1},{:.4}",
            self.m,
            self.n,
            self.a_shape,
            self.b_shape,
            self.dense_params,
            self.factored_params,
            self.param_ratio,
            self.dense_flops,
            self.factored_flops,
            self.flop_ratio,
            self.dense_ns,
            self.factored_ns,
            self.speedup
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Measure one shape. With `reps == 0` only the analytic columns are filled.
pub fn bench_shape(shapes: FactorShapes, reps: usize, rng: &mut Rng) -> Result<BenchRow> {
    let (m, n) = shapes.product_shape();
    let df = dense_flops(m, n);
    let ff = factored_flops(shapes);
    let mut row = BenchRow {
        m,
        n,
        a_shape: format!("{}x{}", shapes.m1, shapes.n1),
        b_shape: format!("{}x{}", shapes.m2, shapes.n2),
        dense_params: m * n,
        factored_params: shapes.param_count(),
        param_ratio: (m * n) as f64 / shapes.param_count() as f64,
        dense_flops: df,
        factored_flops: ff,
        flop_ratio: df as f64 / ff as f64,
        dense_ns: 0.0,
        factored_ns: 0.0,
        speedup: 0.0,
    };
    if reps == 0 {
        return Ok(row);
    }
    let pair = KroneckerPair::new(
        Matrix::randn(shapes.m1, shapes.n1, 1.0, rng),
        Matrix::randn(shapes.m2, shapes.n2, 1.0, rng),
    );
    let dense = pair.materialize();
    let x = Matrix::randn(1, n, 1.0, rng);
    let mut sink = 0.0;
    let (mut td, mut tf) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let t = Instant::now();
        sink += matmul_nt(&x, &dense)?.get(0, 0);
        td.push(t.elapsed().as_nanos() as f64);
        let t = Instant::now();
        sink += pair.matmul(&x)?.get(0, 0);
        tf.push(t.elapsed().as_nanos() as f64);
    }
    std::hint::black_box(sink);
    row.dense_ns = median(td);
    row.factored_ns = median(tf);
    row.speedup = if row.factored_ns > 0.0 {
        row.dense_ns / row.factored_ns
    } else {
        0.0
    };
    Ok(row)
}

/// The GPT-2 small weight shapes at factor 2 plus the 1024 example, then
/// the same roles scaled down by 4 and 16.
pub fn default_shapes() -> Vec<FactorShapes> {
    let mut out = vec![FactorShapes::new(512, 512, 2, 2)];
    for scale in [1, 4, 16] {
        let (d, f) = (768 / scale, 3072 / scale);
        out.push(FactorShapes::new(d / 2, d, 2, 1));
        out.push(FactorShapes::new(f / 2, d, 2, 1));
        out.push(FactorShapes::new(d / 2, f, 2, 1));
    }
    out
}

/// Parse `m1xn1,m2xn2` into factor shapes.
pub fn parse_shape(s: &str) -> Result<FactorShapes> {
    let bad = || crate::Error::Config(format!("expected m1xn1,m2xn2, got {s:?}"));
    let dims: Vec<usize> = s
        .split(',')
        .flat_map(|p| p.split('x'))
        .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match dims[..] {
        [m1, n1, m2, n2] if m1 * n1 * m2 * n2 > 0 => Ok(FactorShapes::new(m1, n1, m2, n2)),
        _ => Err(bad()),
    }
}
