//! Intermediate-layer distillation losses, Adam, and the training loops.
//!
//! The objective for one sequence is
//!
//! ```text
//! L = a1 * MSE(E_s, E_t) + a2 * sum_l KL_l + a3 * sum_l MSE(H_s,l, H_t,l) + a4 * CE
//! ```
//!
//! where `KL_l` averages the row-wise KL divergence of the causal attention
//! distributions over rows and heads. A batch loss is the mean over its
//! sequences. The teacher is only ever read.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_row, KlDirection, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, ForwardTrace, Leaves, TinyGPTModel, TracedForward};
use crate::tensor::{log_softmax_row, Matrix, Rng};

/// The four loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl DistillWeights {
    pub const fn new(alpha1: f64, alpha2: f64, alpha3: f64, alpha4: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            alpha3,
            alpha4,
        }
    }

    /// Pre-training weights: `(0.5, 0.5, 0.5, 0.1)`.
    pub const fn pretrain() -> Self {
        Self::new(0.5, 0.5, 0.5, 0.1)
    }

    /// Fine-tuning weights: `(0.5, 0.5, 0.5, 0.02)`.
    pub const fn finetune() -> Self {
        Self::new(0.5, 0.5, 0.5, 0.02)
    }

    pub const fn lm_only() -> Self {
        Self::new(0.0, 0.0, 0.0, 1.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha1, self.alpha2, self.alpha3, self.alpha4]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {a:?}"
            )));
        }
        if a.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weighted sum of loss components.
    pub fn combine(&self, c: &LossComponents) -> f64 {
        self.alpha1 * c.emb + self.alpha2 * c.att + self.alpha3 * c.hid + self.alpha4 * c.ce
    }
}

impl FromStr for DistillWeights {
    type Err = Error;

    /// Parse `a1,a2,a3,a4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad loss weight {p:?}")))
            })
            .collect::<Result<_>>()?;
        let [a1, a2, a3, a4] = parts[..] else {
            return Err(Error::Config(format!(
                "expected four comma-separated weights, got {s:?}"
            )));
        };
        let w = Self::new(a1, a2, a3, a4);
        w.validate()?;
        Ok(w)
    }
}

/// Which training conditions to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Decomposition only, no training.
    None,
    /// Cross entropy only.
    Lm,
    /// The three distillation terms only.
    Kd,
    /// All four terms.
    LmKd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::None, Mode::Lm, Mode::Kd, Mode::LmKd];

    /// Effective weights given the full set `base`; `None` for [`Mode::None`].
    pub fn weights(self, base: DistillWeights) -> Option<DistillWeights> {
        match self {
            Mode::None => None,
            Mode::Lm => Some(DistillWeights::lm_only()),
            Mode::Kd => Some(DistillWeights {
                alpha4: 0.0,
                ..base
            }),
            Mode::LmKd => Some(base),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::None => "none",
            Mode::Lm => "lm",
            Mode::Kd => "kd",
            Mode::LmKd => "lm+kd",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mode::None),
            "lm" => Ok(Mode::Lm),
            "kd" => Ok(Mode::Kd),
            "lm+kd" | "lmkd" | "lm_kd" => Ok(Mode::LmKd),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Which layers the attention and hidden-state terms sum over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LayerScope {
    #[default]
    All,
    /// Only blocks with at least one factored linear map in the student.
    Factored,
}

/// Which per-layer tensor the hidden-state term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HiddenTap {
    /// Block output after the residual addition.
    #[default]
    PostResidual,
    /// Second MLP projection before the residual.
    PreResidual,
}

/// Options that shape the loss but not the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub kl_direction: KlDirection,
    pub layer_scope: LayerScope,
    pub hidden_tap: HiddenTap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Caps the total number of optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub seq_len: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossOptions,
    /// Write measured step times into the metrics; otherwise `wall_ms` is 0.
    pub record_timing: bool,
}

impl TrainConfig {
    /// Pre-training defaults at desk scale: batch 8, lr 2.5e-4.
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 8,
            learning_rate: 2.5e-4,
            epochs: 1,
            max_steps: None,
            seed: 0,
            adam: AdamConfig::default(),
            seq_len: 64,
            clip_norm: Some(1.0),
            loss: LossOptions::default(),
            record_timing: true,
        }
    }

    /// Fine-tuning defaults: batch 16, lr 2e-5.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            batch_size: 16,
            learning_rate: 2e-5,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "batch size and sequence length must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(
                "Adam needs betas in [0, 1) and eps > 0".into(),
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "L_emb")]
    pub l_emb: f64,
    #[serde(rename = "L_att")]
    pub l_att: f64,
    #[serde(rename = "L_hid")]
    pub l_hid: f64,
    #[serde(rename = "L_ce")]
    pub l_ce: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            emb: self.l_emb,
            att: self.l_att,
            hid: self.l_hid,
            ce: self.l_ce,
        }
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub emb: f64,
    pub att: f64,
    pub hid: f64,
    pub ce: f64,
}

impl LossComponents {
    fn scaled_add(&mut self, other: &Self, c: f64) {
        self.emb += c * other.emb;
        self.att += c * other.att;
        self.hid += c * other.hid;
        self.ce += c * other.ce;
    }

    fn check_finite(&self, total: f64, step: usize) -> Result<()> {
        for (component, v) in [
            ("L_emb", self.emb),
            ("L_att", self.att),
            ("L_hid", self.hid),
            ("L_ce", self.ce),
            ("L_total", total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { component, step });
            }
        }
        Ok(())
    }
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mse",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

fn check_layers(op: &'static str, s: usize, t: usize) -> Result<()> {
    if s != t {
        return Err(Error::Length {
            op,
            expected: t,
            got: s,
        });
    }
    Ok(())
}

/// Mean squared difference of the embedding outputs.
pub fn loss_embedding(student: &ForwardTrace, teacher: &ForwardTrace) -> Result<f64> {
    mse(&student.embedding, &teacher.embedding)
}

/// KL between causal attention matrices, averaged over rows and heads,
/// summed over `layers` (all layers when `None`).
pub fn loss_attention(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    direction: KlDirection,
    layers: Option<&[usize]>,
) -> Result<f64> {
    check_layers(
        "attention layers",
        student.attention.len(),
        teacher.attention.len(),
    )?;
    let all: Vec<usize> = (0..student.attention.len()).collect();
    let mut total = 0.0;
    for &l in layers.unwrap_or(&all) {
        let (s, t) = (&student.attention[l], &teacher.attention[l]);
        check_layers("attention heads", s.len(), t.len())?;
        let mut layer = 0.0;
        for (q, p) in s.iter().zip(t) {
            if q.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "loss_attention",
                    lhs: q.shape(),
                    rhs: p.shape(),
                });
            }
            let n = q.rows();
            let mut head = 0.0;
            for i in 0..n {
                let (qr, pr) = (&q.row(i)[..=i], &p.row(i)[..=i]);
                head += match direction {
                    KlDirection::TeacherStudent => kl_row(pr, qr),
                    KlDirection::StudentTeacher => kl_row(qr, pr),
                };
            }
            layer += head / n as f64;
        }
        total += layer / s.len() as f64;
    }
    Ok(total)
}

/// Sum over `layers` of the per-layer mean squared hidden-state difference.
pub fn loss_hidden(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    tap: HiddenTap,
    layers: Option<&[usize]>,
) -> Result<f64> {
    let pick = |tr: &ForwardTrace| match tap {
        HiddenTap::PostResidual => tr.hidden.clone(),
        HiddenTap::PreResidual => tr.ffn_out.clone(),
    };
    let (s, t) = (pick(student), pick(teacher));
    check_layers("hidden layers", s.len(), t.len())?;
    let all: Vec<usize> = (0..s.len()).collect();
    layers
        .unwrap_or(&all)
        .iter()
        .map(|&l| mse(&s[l], &t[l]))
        .sum()
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn loss_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Length {
            op: "cross_entropy targets",
            expected: logits.rows(),
            got: targets.len(),
        });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: logits.cols(),
            });
        }
        total -= log_softmax_row(logits.row(r))[t];
    }
    Ok(total / targets.len() as f64)
}

/// All four components and their weighted sum for one sequence.
pub fn loss_total(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    targets: &[usize],
    w: &DistillWeights,
    opts: &LossOptions,
    layers: Option<&[usize]>,
) -> Result<(f64, LossComponents)> {
    let c = LossComponents {
        emb: loss_embedding(student, teacher)?,
        att: loss_attention(student, teacher, opts.kl_direction, layers)?,
        hid: loss_hidden(student, teacher, opts.hidden_tap, layers)?,
        ce: loss_cross_entropy(&student.logits, targets)?,
    };
    Ok((w.combine(&c), c))
}

/// Loss nodes for one recorded sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub emb: NodeId,
    pub att: NodeId,
    pub hid: NodeId,
    pub ce: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            emb: tape.scalar(self.emb),
            att: tape.scalar(self.att),
            hid: tape.scalar(self.hid),
            ce: tape.scalar(self.ce),
        }
    }
}

/// Record the distillation terms between a traced student pass and a
/// teacher trace (held constant), plus the weighted total with the given
/// cross-entropy node.
pub fn record_losses(
    tape: &mut Tape,
    student: &TracedForward,
    teacher: &ForwardTrace,
    ce: NodeId,
    w: &DistillWeights,
    opts: &LossOptions,
    layers: &[usize],
) -> Result<LossNodes> {
    check_layers(
        "attention layers",
        student.attention.len(),
        teacher.attention.len(),
    )?;
    let te = tape.constant(teacher.embedding.clone());
    let emb = tape.mse(student.embedding, te)?;

    let mut att_terms = Vec::new();
    let mut hid_terms = Vec::new();
    for &l in layers {
        let heads = &student.scores[l];
        check_layers("attention heads", heads.len(), teacher.attention[l].len())?;
        let inv = 1.0 / heads.len() as f64;
        for (h, &s) in heads.iter().enumerate() {
            let kl = tape.attention_kl(s, &teacher.attention[l][h], opts.kl_direction)?;
            att_terms.push((kl, inv));
        }
        let (sh, th) = match opts.hidden_tap {
            HiddenTap::PostResidual => (student.hidden[l], &teacher.hidden[l]),
            HiddenTap::PreResidual => (student.ffn_out[l], &teacher.ffn_out[l]),
        };
        let tc = tape.constant(th.clone());
        hid_terms.push((tape.mse(sh, tc)?, 1.0));
    }
    let att = tape.weighted_sum(&att_terms)?;
    let hid = tape.weighted_sum(&hid_terms)?;
    let total = tape.weighted_sum(&[
        (emb, w.alpha1),
        (att, w.alpha2),
        (hid, w.alpha3),
        (ce, w.alpha4),
    ])?;
    Ok(LossNodes {
        emb,
        att,
        hid,
        ce,
        total,
    })
}

/// Blocks the distillation terms sum over.
pub fn scoped_layers(student: &TinyGPTModel, scope: LayerScope) -> Vec<usize> {
    use crate::layers::Role;
    (0..student.blocks.len())
        .filter(|&i| match scope {
            LayerScope::All => true,
            LayerScope::Factored => Role::ALL
                .iter()
                .any(|&r| student.blocks[i].linear(r).is_factored()),
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Length {
                op: "adam gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((x, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// Mean loss components and summed-then-averaged gradients over a batch.
/// `record` puts one sequence on a fresh tape and returns its loss nodes.
fn batch_gradients<F>(
    shapes: &[(usize, usize)],
    batch_len: usize,
    mut record: F,
) -> Result<(f64, LossComponents, Vec<Matrix>)>
where
    F: FnMut(usize, &mut Tape) -> Result<LossNodes>,
{
    if batch_len == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut grads: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let mut comps = LossComponents::default();
    let mut total = 0.0;
    let inv = 1.0 / batch_len as f64;
    for i in 0..batch_len {
        let mut tape = Tape::new();
        let nodes = record(i, &mut tape)?;
        comps.scaled_add(&nodes.components(&tape), inv);
        total += inv * tape.scalar(nodes.total);
        let store = tape.backward(nodes.total)?;
        for (pid, g) in store.params() {
            grads[pid.0].axpy(inv, g)?;
        }
    }
    Ok((total, comps, grads))
}

/// Split a token window into model input and next-token targets.
pub fn lm_pair(window: &[usize]) -> Result<(&[usize], &[usize])> {
    if window.len() < 2 {
        return Err(Error::Empty(
            "language-model window needs at least two tokens",
        ));
    }
    Ok((&window[..window.len() - 1], &window[1..]))
}

fn check_trace_shapes(student: &TinyGPTModel, teacher: &TinyGPTModel) -> Result<()> {
    let (s, t) = (&student.config, &teacher.config);
    if (s.n_layers, s.n_heads, s.d_model, s.vocab) != (t.n_layers, t.n_heads, t.d_model, t.vocab) {
        return Err(Error::Config(format!(
            "student ({} layers, {} heads, d {}, vocab {}) and teacher ({} layers, {} heads, d {}, vocab {}) traces differ in shape",
            s.n_layers, s.n_heads, s.d_model, s.vocab, t.n_layers, t.n_heads, t.d_model, t.vocab
        )));
    }
    Ok(())
}

/// One optimizer step on a batch of language-model windows (each
/// `seq_len + 1` tokens). The teacher is read, never written.
pub fn train_step(
    student: &mut TinyGPTModel,
    teacher: &TinyGPTModel,
    batch: &[Vec<usize>],
    w: &DistillWeights,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    check_trace_shapes(student, teacher)?;
    let start = Instant::now();
    let layers = scoped_layers(student, cfg.loss.layer_scope);
    let shapes: Vec<_> = student
        .named_params()
        .iter()
        .map(|(_, m)| m.shape())
        .collect();
    let model: &TinyGPTModel = student;
    let (total, comps, mut grads) = batch_gradients(&shapes, batch.len(), |i, tape| {
        let (input, targets) = lm_pair(&batch[i])?;
        let t_trace = teacher.forward(input)?;
        let traced = model.record(tape, input, Leaves::Trainable)?;
        let ce = tape.cross_entropy(traced.logits, targets)?;
        record_losses(tape, &traced, &t_trace, ce, w, &cfg.loss, &layers)
    })?;
    comps.check_finite(total, step)?;
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    opt.step(student.params_mut(), &grads, cfg.learning_rate)?;
    Ok(metrics(step, total, comps, start, cfg))
}

fn metrics(
    step: usize,
    total: f64,
    c: LossComponents,
    start: Instant,
    cfg: &TrainConfig,
) -> StepMetrics {
    StepMetrics {
        step,
        l_emb: c.emb,
        l_att: c.att,
        l_hid: c.hid,
        l_ce: c.ce,
        l_total: total,
        wall_ms: if cfg.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
    }
}

/// One cross-entropy-only step with no teacher; the distillation fields of
/// the metrics are 0.
pub fn lm_step(
    model: &mut TinyGPTModel,
    batch: &[Vec<usize>],
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let shapes: Vec<_> = model
        .named_params()
        .iter()
        .map(|(_, m)| m.shape())
        .collect();
    let frozen: &TinyGPTModel = model;
    let (total, comps, mut grads) = batch_gradients(&shapes, batch.len(), |i, tape| {
        let (input, targets) = lm_pair(&batch[i])?;
        let traced = frozen.record(tape, input, Leaves::Trainable)?;
        let ce = tape.cross_entropy(traced.logits, targets)?;
        let zero = tape.constant(Matrix::zeros(1, 1));
        let total = tape.weighted_sum(&[(ce, 1.0)])?;
        Ok(LossNodes {
            emb: zero,
            att: zero,
            hid: zero,
            ce,
            total,
        })
    })?;
    comps.check_finite(total, step)?;
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    opt.step(model.params_mut(), &grads, cfg.learning_rate)?;
    Ok(metrics(step, total, comps, start, cfg))
}

/// Plain language-model training of a single model, used for teachers.
pub fn train_lm(
    model: &mut TinyGPTModel,
    train: &[usize],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(cfg.adam);
    let steps = planned_steps(cfg, train.len());
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample_windows(train, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let m = lm_step(model, &batch, &mut opt, cfg, step)?;
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

/// One optimizer step of classifier fine-tuning; cross entropy is over the
/// class logits and the distillation terms over the body traces.
pub fn finetune_step(
    student: &mut ClassifierModel,
    teacher: &ClassifierModel,
    batch: &[(Vec<usize>, usize)],
    w: &DistillWeights,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    check_trace_shapes(&student.body, &teacher.body)?;
    let start = Instant::now();
    let layers = scoped_layers(&student.body, cfg.loss.layer_scope);
    let shapes: Vec<_> = student
        .named_params()
        .iter()
        .map(|(_, m)| m.shape())
        .collect();
    let model: &ClassifierModel = student;
    let (total, comps, mut grads) = batch_gradients(&shapes, batch.len(), |i, tape| {
        let (tokens, label) = (&batch[i].0, batch[i].1);
        let t_trace = teacher.body.forward(tokens)?;
        let traced = model.record(tape, tokens, Leaves::Trainable)?;
        let ce = tape.cross_entropy(traced.logits, &[label])?;
        record_losses(tape, &traced.body, &t_trace, ce, w, &cfg.loss, &layers)
    })?;
    comps.check_finite(total, step)?;
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    opt.step(student.params_mut(), &grads, cfg.learning_rate)?;
    Ok(metrics(step, total, comps, start, cfg))
}

/// Draw `batch` random windows of `seq_len + 1` tokens from `tokens`.
pub fn sample_windows(
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let w = seq_len + 1;
    if tokens.len() < w {
        return Err(Error::Length {
            op: "training split shorter than one window",
            expected: w,
            got: tokens.len(),
        });
    }
    let span = tokens.len() - w + 1;
    Ok((0..batch)
        .map(|_| {
            let s = rng.below(span);
            tokens[s..s + w].to_vec()
        })
        .collect())
}

/// Optimizer steps implied by `cfg` for a training split of `n_tokens`:
/// one epoch sees about as many tokens as the split holds.
pub fn planned_steps(cfg: &TrainConfig, n_tokens: usize) -> usize {
    let per_epoch = (n_tokens / (cfg.batch_size * cfg.seq_len)).max(1);
    let steps = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(steps, |m| steps.min(m))
}

/// Train `student` against `teacher` under `mode` on `train` tokens.
///
/// [`Mode::None`] returns an empty history and leaves the student alone.
/// `on_step` sees every metrics record as it is produced.
pub fn run_phase(
    mode: Mode,
    student: &mut TinyGPTModel,
    teacher: &TinyGPTModel,
    train: &[usize],
    cfg: &TrainConfig,
    base: DistillWeights,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let Some(w) = mode.weights(base) else {
        return Ok(Vec::new());
    };
    w.validate()?;
    if cfg.seq_len > student.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: student.config.max_seq_len,
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(cfg.adam);
    let steps = planned_steps(cfg, train.len());
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample_windows(train, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let m = train_step(student, teacher, &batch, &w, &mut opt, cfg, step)?;
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

/// Held-out language-model quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Non-overlapping windows: each window predicts `seq_len` tokens and the
/// next window starts where the previous one's targets ended. A final
/// partial window is kept when it predicts at least one token.
pub fn eval_windows(tokens: &[usize], seq_len: usize, max_windows: Option<usize>) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < tokens.len() && max_windows.map_or(true, |m| out.len() < m) {
        let e = (s + seq_len + 1).min(tokens.len());
        out.push(&tokens[s..e]);
        s += seq_len;
    }
    out
}

/// Token-weighted mean cross entropy and its exponential.
pub fn evaluate_lm(
    model: &TinyGPTModel,
    tokens: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<EvalResult> {
    let windows = eval_windows(tokens, seq_len.min(model.config.max_seq_len), max_windows);
    if windows.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let (mut nll, mut n) = (0.0, 0);
    for w in windows {
        let (input, targets) = lm_pair(w)?;
        let logits = model.logits(input)?;
        nll += loss_cross_entropy(&logits, targets)? * targets.len() as f64;
        n += targets.len();
    }
    let ce = nll / n as f64;
    Ok(EvalResult {
        cross_entropy: ce,
        perplexity: ce.exp(),
        tokens: n,
    })
}

/// Mean unweighted loss components of `student` against `teacher` over
/// evaluation windows.
pub fn evaluate_distill(
    student: &TinyGPTModel,
    teacher: &TinyGPTModel,
    tokens: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
    opts: &LossOptions,
) -> Result<LossComponents> {
    check_trace_shapes(student, teacher)?;
    let windows = eval_windows(tokens, seq_len, max_windows);
    if windows.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let layers = scoped_layers(student, opts.layer_scope);
    let mut acc = LossComponents::default();
    let inv = 1.0 / windows.len() as f64;
    for w in &windows {
        let (input, targets) = lm_pair(w)?;
        let s = student.forward(input)?;
        let t = teacher.forward(input)?;
        let (_, c) = loss_total(
            &s,
            &t,
            targets,
            &DistillWeights::pretrain(),
            opts,
            Some(&layers),
        )?;
        acc.scaled_add(&c, inv);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GPTConfig;

    fn tiny() -> TinyGPTModel {
        TinyGPTModel::new(GPTConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 32,
            vocab: 16,
            max_seq_len: 8,
            seed: 5,
            ..GPTConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn weights_parse_and_validate() {
        let w: DistillWeights = "0.5,0.5,0.5,0.1".parse().unwrap();
        assert_eq!(w, DistillWeights::pretrain());
        assert!("0,0,0,0".parse::<DistillWeights>().is_err());
        assert!("1,2,3".parse::<DistillWeights>().is_err());
        assert!("-1,0,0,1".parse::<DistillWeights>().is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!(
            Mode::Lm.weights(DistillWeights::pretrain()),
            Some(DistillWeights::lm_only())
        );
        assert_eq!(Mode::None.weights(DistillWeights::pretrain()), None);
    }

    #[test]
    fn identical_traces_leave_only_cross_entropy() {
        let m = tiny();
        let t = m.forward(&[1, 2, 3]).unwrap();
        let (total, c) = loss_total(
            &t,
            &t,
            &[2, 3, 4],
            &DistillWeights::pretrain(),
            &LossOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!((c.emb, c.att, c.hid), (0.0, 0.0, 0.0));
        assert!((total - 0.1 * c.ce).abs() < 1e-15);
    }

    #[test]
    fn constant_offsets() {
        let m = tiny();
        let t = m.forward(&[1, 2, 3]).unwrap();
        let mut s = t.clone();
        s.embedding = s.embedding.map(|x| x + 1.0);
        s.hidden[1] = s.hidden[1].map(|x| x + 2.0);
        assert!((loss_embedding(&s, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((loss_hidden(&s, &t, HiddenTap::PostResidual, None).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let teacher = tiny();
        let mut student = teacher.clone();
        student.wpe.set(0, 0, 0.3);
        let before = student.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            seq_len: 4,
            batch_size: 2,
            ..TrainConfig::pretrain()
        };
        let mut opt = Adam::new(cfg.adam);
        let batch = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]];
        train_step(
            &mut student,
            &teacher,
            &batch,
            &DistillWeights::pretrain(),
            &mut opt,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(student, before);
    }

    #[test]
    fn none_mode_runs_no_steps() {
        let teacher = tiny();
        let mut student = teacher.clone();
        let toks: Vec<usize> = (0..100).map(|i| i % 16).collect();
        let h = run_phase(
            Mode::None,
            &mut student,
            &teacher,
            &toks,
            &TrainConfig::pretrain(),
            DistillWeights::pretrain(),
            |_| {},
        )
        .unwrap();
        assert!(h.is_empty());
        assert_eq!(student, teacher);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = vec![Matrix::filled(1, 2, 3.0), Matrix::filled(1, 2, 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|m| m.as_slice()).map(|x| x * x).sum();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_windows_cover_each_target_once() {
        let toks: Vec<usize> = (0..10).collect();
        let w = eval_windows(&toks, 4, None);
        let targets: Vec<usize> = w.iter().flat_map(|w| w[1..].to_vec()).collect();
        assert_eq!(targets, (1..10).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_json_keys() {
        let m = StepMetrics {
            step: 3,
            l_emb: 1.0,
            l_att: 2.0,
            l_hid: 3.0,
            l_ce: 4.0,
            l_total: 5.0,
            wall_ms: 0,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"step":3,"L_emb":1.0,"L_att":2.0,"L_hid":3.0,"L_ce":4.0,"L_total":5.0,"wall_ms":0}"#
        );
    }
}
