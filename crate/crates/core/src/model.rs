//! A small decoder-only GPT with optional Kronecker-factored sublayers.
//!
//! Every forward pass is recorded on an [`autodiff::Tape`](crate::autodiff::Tape);
//! the plain [`TinyGPTModel::forward`] just reads the recorded values back.
//! Block structure follows GPT-2: pre-norm attention and MLP, each wrapped in
//! a residual, a final layer norm and an untied LM head.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::kronecker::{DecompositionReport, FactorShapes, KroneckerPair};
use crate::layers::{
    decompose_embedding, decompose_linear, plan_embedding_shapes, CompressionSchedule, DenseLinear,
    KroneckerEmbedding, Linear, Role,
};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPTConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for GPTConfig {
    /// The desk-scale model: 4 layers, 4 heads, width 64, byte vocabulary.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab: 256,
            max_seq_len: 128,
            seed: 0,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl GPTConfig {
    /// GPT-2 small dimensions with the vocabulary size given as 50527.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab: 50527,
            max_seq_len: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer count, head count and widths must be positive".into());
        }
        if self.vocab == 0 || self.max_seq_len == 0 {
            return bad("vocab and max_seq_len must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("ln_eps must be positive and init_std non-negative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(out, in)` of a block's linear map.
    pub fn role_dims(&self, role: Role) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match role {
            Role::Query | Role::Key | Role::Value | Role::AttnOut => (d, d),
            Role::FcIn => (f, d),
            Role::FcOut => (d, f),
        }
    }

    /// Parameter count of the model this config describes after applying
    /// `schedule`, computed from shapes alone.
    pub fn param_count(&self, schedule: &CompressionSchedule, include_head: bool) -> Result<usize> {
        self.validate()?;
        let (v, d) = (self.vocab, self.d_model);
        let mut total = if schedule.compress_embedding {
            plan_embedding_shapes(v, d, schedule.embedding_factor)?.param_count()
        } else {
            v * d
        };
        total += self.max_seq_len * d;
        for layer in 0..self.n_layers {
            total += 4 * d; // two layer norms
            for role in Role::ALL {
                let (out, inp) = self.role_dims(role);
                let weight = if schedule.layers.selects(layer) && schedule.factors_role(role) {
                    schedule.shapes_for(role, out, inp)?.param_count()
                } else {
                    out * inp
                };
                total += weight + out;
            }
        }
        total += 2 * d;
        if include_head {
            total += v * d;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    /// `1 x d`.
    pub gain: Matrix,
    /// `1 x d`.
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenEmbedding {
    Dense(Matrix),
    Kronecker(KroneckerEmbedding),
}

impl TokenEmbedding {
    pub fn vocab(&self) -> usize {
        match self {
            TokenEmbedding::Dense(m) => m.rows(),
            TokenEmbedding::Kronecker(e) => e.vocab(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TokenEmbedding::Dense(m) => m.cols(),
            TokenEmbedding::Kronecker(e) => e.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TokenEmbedding::Dense(m) => m.len(),
            TokenEmbedding::Kronecker(e) => e.param_count(),
        }
    }

    pub fn materialize(&self) -> Matrix {
        match self {
            TokenEmbedding::Dense(m) => m.clone(),
            TokenEmbedding::Kronecker(e) => e.materialize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc: Linear,
    pub proj: Linear,
}

impl Block {
    fn init(cfg: &GPTConfig, rng: &mut Rng) -> Self {
        let (d, f, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        // Projections feeding the residual stream get the GPT-2 depth scaling.
        let res_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let dense = |o, i, s, rng: &mut Rng| Linear::Dense(DenseLinear::init(o, i, s, true, rng));
        Self {
            ln1: LayerNormParams::new(d),
            q: dense(d, d, std, rng),
            k: dense(d, d, std, rng),
            v: dense(d, d, std, rng),
            o: dense(d, d, res_std, rng),
            ln2: LayerNormParams::new(d),
            fc: dense(f, d, std, rng),
            proj: dense(d, f, res_std, rng),
        }
    }

    pub fn linear(&self, role: Role) -> &Linear {
        match role {
            Role::Query => &self.q,
            Role::Key => &self.k,
            Role::Value => &self.v,
            Role::AttnOut => &self.o,
            Role::FcIn => &self.fc,
            Role::FcOut => &self.proj,
        }
    }

    pub fn linear_mut(&mut self, role: Role) -> &mut Linear {
        match role {
            Role::Query => &mut self.q,
            Role::Key => &mut self.k,
            Role::Value => &mut self.v,
            Role::AttnOut => &mut self.o,
            Role::FcIn => &mut self.fc,
            Role::FcOut => &mut self.proj,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.ln1.gain.len()
            + Role::ALL
                .iter()
                .map(|&r| self.linear(r).param_count())
                .sum::<usize>()
    }
}

/// Checkpoint-style name of a block linear map, e.g. `blocks.3.mlp.c_fc`.
pub fn linear_name(layer: usize, role: Role) -> String {
    let group = match role {
        Role::FcIn | Role::FcOut => "mlp",
        _ => "attn",
    };
    format!("blocks.{layer}.{group}.{}", role.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyGPTModel {
    pub config: GPTConfig,
    pub wte: TokenEmbedding,
    /// `max_seq_len x d`.
    pub wpe: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    /// `v x d`, no bias. Never factored.
    pub lm_head: DenseLinear,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Token plus position embedding, `T x d`.
    pub embedding: Matrix,
    /// `[layer][head]`, each `T x T` and causal.
    pub attention: Vec<Vec<Matrix>>,
    /// Block outputs after the residual, `T x d` per layer.
    pub hidden: Vec<Matrix>,
    /// Second MLP projection before the residual, `T x d` per layer.
    pub ffn_out: Vec<Matrix>,
    /// `T x v`.
    pub logits: Matrix,
}

/// Node ids of one forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TracedForward {
    /// Leaf node per parameter, in [`TinyGPTModel::named_params`] order.
    pub params: Vec<NodeId>,
    pub embedding: NodeId,
    /// Scaled pre-softmax scores `[layer][head]`.
    pub scores: Vec<Vec<NodeId>>,
    pub attention: Vec<Vec<NodeId>>,
    pub hidden: Vec<NodeId>,
    pub ffn_out: Vec<NodeId>,
    /// Output of the final layer norm.
    pub final_hidden: NodeId,
    pub logits: NodeId,
}

impl TracedForward {
    pub fn values(&self, tape: &Tape) -> ForwardTrace {
        let v = |id: &NodeId| tape.value(*id).clone();
        ForwardTrace {
            embedding: v(&self.embedding),
            attention: self
                .attention
                .iter()
                .map(|heads| heads.iter().map(v).collect())
                .collect(),
            hidden: self.hidden.iter().map(v).collect(),
            ffn_out: self.ffn_out.iter().map(v).collect(),
            logits: v(&self.logits),
        }
    }
}

/// How a model's parameters enter the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaves {
    /// As parameters `ParamId(i)`, `i` indexing [`TinyGPTModel::named_params`].
    Trainable,
    /// As constants; nothing is differentiated.
    Frozen,
}

/// One tensor factored by [`compress_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub original_shape: (usize, usize),
    pub factor_shapes: FactorShapes,
    pub params_before: usize,
    pub params_after: usize,
    pub decomposition: DecompositionReport,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Matrix)>, name: &str, l: &'a Linear) {
    match l {
        Linear::Dense(d) => out.push((format!("{name}.weight"), &d.weight)),
        Linear::Kronecker(k) => {
            out.push((format!("{name}.a"), &k.factors.a));
            out.push((format!("{name}.b"), &k.factors.b));
        }
    }
    if let Some(b) = l.bias() {
        out.push((format!("{name}.bias"), b));
    }
}

fn push_linear_mut<'a>(out: &mut Vec<&'a mut Matrix>, l: &'a mut Linear) {
    match l {
        Linear::Dense(d) => {
            out.push(&mut d.weight);
            out.extend(d.bias.as_mut());
        }
        Linear::Kronecker(k) => {
            out.push(&mut k.factors.a);
            out.push(&mut k.factors.b);
            out.extend(k.bias.as_mut());
        }
    }
}

impl TinyGPTModel {
    /// Randomly initialized dense model seeded from `config.seed`.
    pub fn new(config: GPTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (v, d, std) = (config.vocab, config.d_model, config.init_std);
        let wte = TokenEmbedding::Dense(Matrix::randn(v, d, std, &mut rng));
        let wpe = Matrix::randn(config.max_seq_len, d, std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::init(&config, &mut rng))
            .collect();
        let lm_head = DenseLinear::init(v, d, std, false, &mut rng);
        Ok(Self {
            wte,
            wpe,
            blocks,
            ln_f: LayerNormParams::new(d),
            lm_head,
            config,
        })
    }

    /// Every stored matrix with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        match &self.wte {
            TokenEmbedding::Dense(m) => out.push(("wte".to_string(), m)),
            TokenEmbedding::Kronecker(e) => {
                out.push(("wte.a".to_string(), &e.a));
                out.push(("wte.b".to_string(), &e.b));
            }
        }
        out.push(("wpe".to_string(), &self.wpe));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.bias"), &b.ln1.bias));
            for role in [Role::Query, Role::Key, Role::Value, Role::AttnOut] {
                push_linear(&mut out, &linear_name(i, role), b.linear(role));
            }
            out.push((format!("blocks.{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("blocks.{i}.ln2.bias"), &b.ln2.bias));
            push_linear(&mut out, &linear_name(i, Role::FcIn), &b.fc);
            push_linear(&mut out, &linear_name(i, Role::FcOut), &b.proj);
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f.bias));
        out.push(("lm_head.weight".to_string(), &self.lm_head.weight));
        out
    }

    /// Mutable access in exactly the order of [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        match &mut self.wte {
            TokenEmbedding::Dense(m) => out.push(m),
            TokenEmbedding::Kronecker(e) => {
                out.push(&mut e.a);
                out.push(&mut e.b);
            }
        }
        out.push(&mut self.wpe);
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gain);
            out.push(&mut b.ln1.bias);
            push_linear_mut(&mut out, &mut b.q);
            push_linear_mut(&mut out, &mut b.k);
            push_linear_mut(&mut out, &mut b.v);
            push_linear_mut(&mut out, &mut b.o);
            out.push(&mut b.ln2.gain);
            out.push(&mut b.ln2.bias);
            push_linear_mut(&mut out, &mut b.fc);
            push_linear_mut(&mut out, &mut b.proj);
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        out.push(&mut self.lm_head.weight);
        out
    }

    /// Stored parameters, optionally without the LM head.
    pub fn param_count(&self, include_head: bool) -> usize {
        let head = self.lm_head.param_count();
        let all: usize = self.named_params().iter().map(|(_, m)| m.len()).sum();
        if include_head {
            all
        } else {
            all - head
        }
    }

    /// Hash of every parameter's bits and name.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, m) in self.named_params() {
            name.hash(&mut h);
            m.shape().hash(&mut h);
            for x in m.as_slice() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Record a forward pass over `tokens` on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        leaves: Leaves,
    ) -> Result<TracedForward> {
        self.check_tokens(tokens)?;
        let params: Vec<NodeId> = self
            .named_params()
            .into_iter()
            .enumerate()
            .map(|(i, (_, m))| match leaves {
                Leaves::Trainable => tape.param(ParamId(i), m.clone()),
                Leaves::Frozen => tape.constant(m.clone()),
            })
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter list matches model structure");

        let t = tokens.len();
        let cfg = &self.config;
        let tok = match &self.wte {
            TokenEmbedding::Dense(_) => tape.gather(take(), tokens)?,
            TokenEmbedding::Kronecker(_) => {
                let (a, b) = (take(), take());
                tape.kron_gather(a, b, tokens)?
            }
        };
        let wpe = take();
        let pos = tape.slice_rows(wpe, 0, t)?;
        let embedding = tape.add(tok, pos)?;

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = embedding;
        let (mut scores, mut attention, mut hidden, mut ffn_out) = (vec![], vec![], vec![], vec![]);
        for b in &self.blocks {
            let (g1, b1) = (take(), take());
            let h = tape.layernorm(x, g1, b1, cfg.ln_eps)?;
            let q = record_linear(tape, &b.q, h, &mut take)?;
            let k = record_linear(tape, &b.k, h, &mut take)?;
            let v = record_linear(tape, &b.v, h, &mut take)?;
            let (mut layer_scores, mut layer_att, mut heads) = (vec![], vec![], vec![]);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let raw = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(raw, scale);
                let p = tape.causal_softmax(s)?;
                heads.push(tape.matmul(p, vh)?);
                layer_scores.push(s);
                layer_att.push(p);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn = record_linear(tape, &b.o, merged, &mut take)?;
            x = tape.add(x, attn)?;

            let (g2, b2) = (take(), take());
            let h = tape.layernorm(x, g2, b2, cfg.ln_eps)?;
            let up = record_linear(tape, &b.fc, h, &mut take)?;
            let act = tape.gelu(up);
            let down = record_linear(tape, &b.proj, act, &mut take)?;
            x = tape.add(x, down)?;

            scores.push(layer_scores);
            attention.push(layer_att);
            hidden.push(x);
            ffn_out.push(down);
        }
        let (gf, bf) = (take(), take());
        let final_hidden = tape.layernorm(x, gf, bf, cfg.ln_eps)?;
        let head = take();
        let logits = tape.matmul_nt(final_hidden, head)?;
        Ok(TracedForward {
            params,
            embedding,
            scores,
            attention,
            hidden,
            ffn_out,
            final_hidden,
            logits,
        })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let traced = self.record(&mut tape, tokens, Leaves::Frozen)?;
        Ok(traced.values(&tape))
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward(tokens)?.logits)
    }

    /// Append `n` greedily chosen tokens, keeping the trailing
    /// `max_seq_len` tokens as context.
    pub fn generate_greedy(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        for _ in 0..n {
            let start = seq.len().saturating_sub(self.config.max_seq_len);
            let logits = self.logits(&seq[start..])?;
            let last = logits.row(logits.rows() - 1);
            let best = last
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > last[best] { i } else { best });
            seq.push(best);
        }
        Ok(seq)
    }

    /// Copy with every factored sublayer and the embedding replaced by its
    /// dense product.
    pub fn materialize(&self) -> Self {
        let mut m = self.clone();
        m.wte = TokenEmbedding::Dense(self.wte.materialize());
        for b in &mut m.blocks {
            for role in Role::ALL {
                let l = b.linear_mut(role);
                if let Linear::Kronecker(k) = l {
                    *l = Linear::Dense(k.materialize());
                }
            }
        }
        m
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.wte, TokenEmbedding::Kronecker(_))
            || self
                .blocks
                .iter()
                .any(|b| Role::ALL.iter().any(|&r| b.linear(r).is_factored()))
    }
}

fn record_linear(
    tape: &mut Tape,
    layer: &Linear,
    x: NodeId,
    take: &mut impl FnMut() -> NodeId,
) -> Result<NodeId> {
    let y = match layer {
        Linear::Dense(_) => {
            let w = take();
            tape.matmul_nt(x, w)?
        }
        Linear::Kronecker(_) => {
            let (a, b) = (take(), take());
            tape.kron_matmul(x, a, b)?
        }
    };
    match layer.bias() {
        Some(_) => {
            let bias = take();
            tape.add_row(y, bias)
        }
        None => Ok(y),
    }
}

fn fit<T>(
    result: Result<(T, DecompositionReport)>,
    accept_unconverged: bool,
    rebuild: impl FnOnce(KroneckerPair) -> Result<T>,
) -> Result<(T, DecompositionReport)> {
    match result {
        Err(Error::NotConverged { partial, .. }) if accept_unconverged => {
            let (pair, report) = *partial;
            Ok((rebuild(pair)?, report))
        }
        other => other,
    }
}

/// Replace the layers and embedding selected by `schedule` with their
/// nearest Kronecker factors. Everything else, the LM head included, is
/// copied. Sublayers that are already factored are copied as they are.
pub fn compress_model(
    teacher: &TinyGPTModel,
    schedule: &CompressionSchedule,
    rng: &mut Rng,
) -> Result<(TinyGPTModel, Vec<TensorReport>)> {
    let mut student = teacher.clone();
    let mut reports = Vec::new();
    let opts = schedule.power_iteration.into();

    if schedule.compress_embedding {
        if let TokenEmbedding::Dense(table) = &teacher.wte {
            let shapes =
                plan_embedding_shapes(table.rows(), table.cols(), schedule.embedding_factor)
                    .map_err(|e| e.in_tensor("wte"))?;
            let (emb, report) = fit(
                decompose_embedding(table, schedule.embedding_factor, opts, rng),
                schedule.accept_unconverged,
                |p| KroneckerEmbedding::new(p.a, p.b),
            )
            .map_err(|e| e.in_tensor("wte"))?;
            reports.push(TensorReport {
                name: "wte".into(),
                original_shape: table.shape(),
                factor_shapes: shapes,
                params_before: table.len(),
                params_after: emb.param_count(),
                decomposition: report,
            });
            student.wte = TokenEmbedding::Kronecker(emb);
        }
    }

    for (i, block) in student.blocks.iter_mut().enumerate() {
        if !schedule.layers.selects(i) {
            continue;
        }
        for role in Role::ALL {
            if !schedule.factors_role(role) {
                continue;
            }
            let name = linear_name(i, role);
            let Linear::Dense(dense) = block.linear(role) else {
                continue;
            };
            let shape = dense.weight.shape();
            let shapes = schedule
                .shapes_for(role, shape.0, shape.1)
                .map_err(|e| e.in_tensor(name.clone()))?;
            let bias = dense.bias.clone();
            let (layer, report) = fit(
                decompose_linear(dense, shapes, opts, rng),
                schedule.accept_unconverged,
                |p| crate::layers::KroneckerLinear::new(p, bias),
            )
            .map_err(|e| e.in_tensor(name.clone()))?;
            reports.push(TensorReport {
                name,
                original_shape: shape,
                factor_shapes: shapes,
                params_before: dense.weight.len(),
                params_after: shapes.param_count(),
                decomposition: report,
            });
            *block.linear_mut(role) = Linear::Kronecker(layer);
        }
    }
    Ok((student, reports))
}

/// Last-token pooling followed by a dense projection to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `n_classes x d` with bias.
    pub projection: DenseLinear,
}

impl ClassifierHead {
    pub fn n_classes(&self) -> usize {
        self.projection.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub body: TinyGPTModel,
    pub head: ClassifierHead,
}

/// Attach a freshly initialized classification head.
pub fn attach_classifier(
    model: TinyGPTModel,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<ClassifierModel> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "a classifier needs at least 2 classes, got {n_classes}"
        )));
    }
    let d = model.config.d_model;
    let projection = DenseLinear::init(n_classes, d, model.config.init_std, true, rng);
    Ok(ClassifierModel {
        body: model,
        head: ClassifierHead { projection },
    })
}

/// Node ids of a recorded classifier pass.
#[derive(Debug, Clone)]
pub struct TracedClassifier {
    pub body: TracedForward,
    /// Leaf ids of the head weight and bias; their `ParamId`s follow the body's.
    pub head_params: [NodeId; 2],
    /// `1 x n_classes`.
    pub logits: NodeId,
}

impl ClassifierModel {
    /// Body parameters followed by the head weight and bias.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.body.named_params();
        out.push(("classifier.weight".into(), &self.head.projection.weight));
        if let Some(b) = &self.head.projection.bias {
            out.push(("classifier.bias".into(), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.body.params_mut();
        out.push(&mut self.head.projection.weight);
        out.extend(self.head.projection.bias.as_mut());
        out
    }

    pub fn record(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        leaves: Leaves,
    ) -> Result<TracedClassifier> {
        let body = self.body.record(tape, tokens, leaves)?;
        let base = body.params.len();
        let w = self.head.projection.weight.clone();
        let b = self
            .head
            .projection
            .bias
            .clone()
            .unwrap_or_else(|| Matrix::zeros(1, w.rows()));
        let (wn, bn) = match leaves {
            Leaves::Trainable => (
                tape.param(ParamId(base), w),
                tape.param(ParamId(base + 1), b),
            ),
            Leaves::Frozen => (tape.constant(w), tape.constant(b)),
        };
        let last = tape.slice_rows(body.final_hidden, tokens.len() - 1, 1)?;
        let z = tape.matmul_nt(last, wn)?;
        let logits = tape.add_row(z, bn)?;
        Ok(TracedClassifier {
            body,
            head_params: [wn, bn],
            logits,
        })
    }

    /// `1 x n_classes` logits for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let t = self.record(&mut tape, tokens, Leaves::Frozen)?;
        Ok(tape.value(t.logits).clone())
    }
}
