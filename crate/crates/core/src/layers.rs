//! Linear and embedding sublayers in dense and Kronecker-factored form, the
//! factor-shape planner, and the compression schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kronecker::{
    kron_matmul, nearest_kron_with, DecompositionReport, FactorShapes, KroneckerPair,
    PowerIteration,
};
use crate::tensor::{matmul_nt, Matrix, Rng};

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    pub weight: Matrix,
    /// `1 x out` when present.
    pub bias: Option<Matrix>,
}

impl DenseLinear {
    pub fn new(weight: Matrix, bias: Option<Matrix>) -> Result<Self> {
        check_bias(weight.rows(), bias.as_ref())?;
        Ok(Self { weight, bias })
    }

    /// GPT-2 style init: `N(0, std^2)` weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, std: f64, with_bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: Matrix::randn(out_dim, in_dim, std, rng),
            bias: with_bias.then(|| Matrix::zeros(1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Matrix::len)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        dense_forward(self, x)
    }
}

/// A linear layer whose weight is `A ⊗ B`. The bias stays dense.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerLinear {
    pub factors: KroneckerPair,
    pub bias: Option<Matrix>,
}

impl KroneckerLinear {
    pub fn new(factors: KroneckerPair, bias: Option<Matrix>) -> Result<Self> {
        check_bias(factors.shape().0, bias.as_ref())?;
        Ok(Self { factors, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.factors.shape().1
    }

    pub fn out_dim(&self) -> usize {
        self.factors.shape().0
    }

    pub fn param_count(&self) -> usize {
        self.factors.param_count() + self.bias.as_ref().map_or(0, Matrix::len)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        kron_forward(self, x)
    }

    /// The equivalent dense layer. Allocates the full weight.
    pub fn materialize(&self) -> DenseLinear {
        DenseLinear {
            weight: self.factors.materialize(),
            bias: self.bias.clone(),
        }
    }
}

fn check_bias(out_dim: usize, bias: Option<&Matrix>) -> Result<()> {
    match bias {
        Some(b) if b.shape() != (1, out_dim) => Err(Error::Shape {
            op: "linear bias",
            lhs: (1, out_dim),
            rhs: b.shape(),
        }),
        _ => Ok(()),
    }
}

/// Either form of linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(DenseLinear),
    Kronecker(KroneckerLinear),
}

impl Linear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(l) => dense_forward(l, x),
            Linear::Kronecker(l) => kron_forward(l, x),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(l) => l.in_dim(),
            Linear::Kronecker(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(l) => l.out_dim(),
            Linear::Kronecker(l) => l.out_dim(),
        }
    }

    pub fn bias(&self) -> Option<&Matrix> {
        match self {
            Linear::Dense(l) => l.bias.as_ref(),
            Linear::Kronecker(l) => l.bias.as_ref(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(l) => l.param_count(),
            Linear::Kronecker(l) => l.param_count(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, Linear::Kronecker(_))
    }

    /// Weight as a dense matrix, materializing factors if needed.
    pub fn dense_weight(&self) -> Matrix {
        match self {
            Linear::Dense(l) => l.weight.clone(),
            Linear::Kronecker(l) => l.factors.materialize(),
        }
    }
}

pub fn dense_forward(layer: &DenseLinear, x: &Matrix) -> Result<Matrix> {
    let y = matmul_nt(x, &layer.weight)?;
    match &layer.bias {
        Some(b) => y.add_row_vector(b.as_slice()),
        None => Ok(y),
    }
}

/// Factored forward: `x (A ⊗ B)^T + b` without building `A ⊗ B`.
pub fn kron_forward(layer: &KroneckerLinear, x: &Matrix) -> Result<Matrix> {
    let y = kron_matmul(&layer.factors, x)?;
    match &layer.bias {
        Some(b) => y.add_row_vector(b.as_slice()),
        None => Ok(y),
    }
}

/// Token embedding table `A_E ⊗ B_E` with `A_E: v x d/f` and `B_E: 1 x f`.
/// Row `i` of the implied table is `A_E[i] ⊗ B_E`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerEmbedding {
    pub a: Matrix,
    pub b: Matrix,
}

impl KroneckerEmbedding {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 {
            return Err(Error::Shape {
                op: "KroneckerEmbedding B must be 1 x f",
                lhs: (1, b.cols()),
                rhs: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn vocab(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols() * self.b.cols()
    }

    pub fn factor(&self) -> usize {
        self.b.cols()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn materialize(&self) -> Matrix {
        crate::kronecker::kron(&self.a, &self.b)
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Matrix> {
        embed_lookup(self, ids)
    }
}

/// Embedding rows for `ids`, each `A_E[id] ⊗ B_E`, at `d` multiplies per token.
pub fn embed_lookup(e: &KroneckerEmbedding, ids: &[usize]) -> Result<Matrix> {
    embed_lookup_counted(e, ids).map(|(m, _)| m)
}

/// [`embed_lookup`] that also returns the number of multiplies performed.
pub fn embed_lookup_counted(e: &KroneckerEmbedding, ids: &[usize]) -> Result<(Matrix, usize)> {
    if ids.is_empty() {
        return Err(Error::Empty("embed_lookup ids"));
    }
    let (v, f) = (e.vocab(), e.factor());
    let mut out = Matrix::zeros(ids.len(), e.dim());
    let mut mults = 0;
    for (t, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let row = out.row_mut(t);
        for (k, &av) in e.a.row(id).iter().enumerate() {
            for (o, &bv) in row[k * f..(k + 1) * f].iter_mut().zip(e.b.row(0)) {
                *o = av * bv;
                mults += 1;
            }
        }
    }
    Ok((out, mults))
}

/// Fit Kronecker factors to a dense layer's weight; the bias is copied.
pub fn decompose_linear(
    layer: &DenseLinear,
    shapes: FactorShapes,
    opts: PowerIteration,
    rng: &mut Rng,
) -> Result<(KroneckerLinear, DecompositionReport)> {
    let (factors, report) = nearest_kron_with(&layer.weight, shapes, opts, rng)?;
    Ok((
        KroneckerLinear {
            factors,
            bias: layer.bias.clone(),
        },
        report,
    ))
}

/// Fit `A_E ⊗ B_E` (`B_E` of shape `1 x factor`) to a `v x d` table.
pub fn decompose_embedding(
    table: &Matrix,
    factor: usize,
    opts: PowerIteration,
    rng: &mut Rng,
) -> Result<(KroneckerEmbedding, DecompositionReport)> {
    let shapes = plan_embedding_shapes(table.rows(), table.cols(), factor)?;
    let (pair, report) = nearest_kron_with(table, shapes, opts, rng)?;
    Ok((KroneckerEmbedding::new(pair.a, pair.b)?, report))
}

/// Factor shapes for a `rows x cols` weight at roughly `target_factor`
/// compression.
///
/// `B` is kept tiny (each dimension 1 or 2) and `A` carries the bulk. The
/// candidates are `2x1`, `1x2` and `2x2`; halving the longer dimension is
/// preferred, rows on a tie, so a square or tall weight gets `B: 2x1` and a
/// wide one `B: 1x2`. The candidate whose compression factor is closest to
/// the target (in log ratio) wins.
pub fn plan_shapes(rows: usize, cols: usize, target_factor: f64) -> Result<FactorShapes> {
    let fail = |reason: &str| Error::Plan {
        rows,
        cols,
        target: target_factor,
        reason: reason.to_string(),
    };
    if !(target_factor > 1.0) {
        return Err(fail("target factor must exceed 1"));
    }
    let order: [(usize, usize); 3] = if cols > rows {
        [(1, 2), (2, 1), (2, 2)]
    } else {
        [(2, 1), (1, 2), (2, 2)]
    };
    let mut best: Option<(f64, FactorShapes)> = None;
    for (m2, n2) in order {
        if rows % m2 != 0 || cols % n2 != 0 || rows / m2 == 0 || cols / n2 == 0 {
            continue;
        }
        let shapes = FactorShapes::new(rows / m2, cols / n2, m2, n2);
        let cf = (rows * cols) as f64 / shapes.param_count() as f64;
        let gap = (cf / target_factor).ln().abs();
        if best.map_or(true, |(g, _)| gap < g - 1e-12) {
            best = Some((gap, shapes));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| fail("no 1/2 divisor split of the dimensions"))
}

/// Shapes for an embedding table: `A: v x d/f`, `B: 1 x f`.
pub fn plan_embedding_shapes(vocab: usize, dim: usize, factor: usize) -> Result<FactorShapes> {
    if factor == 0 || dim % factor != 0 {
        return Err(Error::Plan {
            rows: vocab,
            cols: dim,
            target: factor as f64,
            reason: "embedding factor must divide the model dimension".into(),
        });
    }
    Ok(FactorShapes::new(vocab, dim / factor, 1, factor))
}

/// Which transformer blocks a schedule factors (0-based block indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelector {
    /// Odd 0-based indices: 1, 3, 5, ... (half of the blocks).
    Odd,
    /// Even 0-based indices: 0, 2, 4, ...
    Even,
    All,
    None,
    List(Vec<usize>),
}

impl LayerSelector {
    pub fn selects(&self, index: usize) -> bool {
        match self {
            LayerSelector::Odd => index % 2 == 1,
            LayerSelector::Even => index % 2 == 0,
            LayerSelector::All => true,
            LayerSelector::None => false,
            LayerSelector::List(l) => l.contains(&index),
        }
    }

    pub fn selected(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|&i| self.selects(i)).collect()
    }

    /// Parse `odd`, `even`, `all`, `none` or a comma-separated index list.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "odd" => Ok(LayerSelector::Odd),
            "even" => Ok(LayerSelector::Even),
            "all" => Ok(LayerSelector::All),
            "none" => Ok(LayerSelector::None),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad layer index {p:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(LayerSelector::List),
        }
    }
}

/// The linear maps inside one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
    AttnOut,
    FcIn,
    FcOut,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Query,
        Role::Key,
        Role::Value,
        Role::AttnOut,
        Role::FcIn,
        Role::FcOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Query => "q",
            Role::Key => "k",
            Role::Value => "v",
            Role::AttnOut => "o",
            Role::FcIn => "c_fc",
            Role::FcOut => "c_proj",
        }
    }
}

/// What to factor and how hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSchedule {
    pub compress_embedding: bool,
    pub embedding_factor: usize,
    pub layers: LayerSelector,
    /// Target compression factor for block linear maps (see [`plan_shapes`]).
    pub target_factor: f64,
    /// Factor the attention output projection as well as Q, K, V and the FFN.
    pub include_attn_out: bool,
    /// Explicit shapes that override the planner, per role.
    pub overrides: Vec<(Role, FactorShapes)>,
    pub power_iteration: PowerIterationConfig,
    /// Keep the last iterate instead of failing when power iteration runs out
    /// of iterations.
    pub accept_unconverged: bool,
}

/// Serializable mirror of [`PowerIteration`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterationConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl From<PowerIterationConfig> for PowerIteration {
    fn from(c: PowerIterationConfig) -> Self {
        PowerIteration {
            max_iters: c.max_iters,
            tol: c.tol,
        }
    }
}

impl Default for CompressionSchedule {
    /// Odd blocks plus the embedding, factor 2, attention output included.
    fn default() -> Self {
        let p = PowerIteration::default();
        Self {
            compress_embedding: true,
            embedding_factor: 2,
            layers: LayerSelector::Odd,
            target_factor: 2.0,
            include_attn_out: true,
            overrides: Vec::new(),
            power_iteration: PowerIterationConfig {
                max_iters: p.max_iters,
                tol: p.tol,
            },
            accept_unconverged: false,
        }
    }
}

impl CompressionSchedule {
    /// A schedule that changes nothing.
    pub fn empty() -> Self {
        Self {
            compress_embedding: false,
            layers: LayerSelector::None,
            ..Self::default()
        }
    }

    pub fn factors_role(&self, role: Role) -> bool {
        role != Role::AttnOut || self.include_attn_out
    }

    /// Shapes for `role` on a `rows x cols` weight.
    pub fn shapes_for(&self, role: Role, rows: usize, cols: usize) -> Result<FactorShapes> {
        if let Some((_, s)) = self.overrides.iter().find(|(r, _)| *r == role) {
            s.check_divides(rows, cols)?;
            return Ok(*s);
        }
        plan_shapes(rows, cols, self.target_factor)
    }
}
