//! `knz`: compress transformer checkpoints into Kronecker factors, train the
//! compressed students, and evaluate them.

// `!(x > 0.0)` rejects NaN on purpose; the suggested replacements for `%`
// and `map_or` need a newer toolchain than `rust-version`.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::manual_is_multiple_of,
    clippy::unnecessary_map_or
)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use knz::autodiff::KlDirection;
use knz::bench::{bench_shape, default_shapes, parse_shape, BenchRow};
use knz::distill::{
    evaluate_lm, run_phase, train_lm, DistillWeights, EvalResult, HiddenTap, LayerScope,
    LossOptions, Mode, StepMetrics, TrainConfig,
};
use knz::io::archive::write_atomic;
use knz::io::corpus::{synthetic_text, Corpus};
use knz::io::metrics::write_metrics;
use knz::io::report::{CompressionReportFile, ModelTotals};
use knz::io::{load_model, save_model};
use knz::layers::{CompressionSchedule, LayerSelector};
use knz::model::{compress_model, GPTConfig, TinyGPTModel};
use knz::Rng;

#[derive(Parser)]
#[command(
    name = "knz",
    version,
    about = "Kronecker compression and distillation of tiny GPT models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized dense model.
    Init(InitArgs),
    /// Write a synthetic English-like text corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a dense model as a plain language model (teacher pre-training).
    Pretrain(PretrainArgs),
    /// Replace selected weights with their nearest Kronecker factors.
    Compress(CompressArgs),
    /// Train a compressed student against its teacher.
    Train(TrainArgs),
    /// Held-out cross entropy and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Dense versus factored matrix-vector products, as CSV.
    Bench(BenchArgs),
    /// Compress a teacher and train the student under every mode.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; falls back to KNZ_SEED, then 0.
    #[arg(long, env = "KNZ_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 4 layers, 4 heads, d 64, byte vocabulary.
    Desk,
    /// GPT-2 small dimensions (about 1 GB of f64 weights).
    Gpt2Small,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Defaults to 4 x d_model.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    output: PathBuf,
    /// Minimum size in bytes.
    #[arg(long, default_value_t = 1_100_000)]
    bytes: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct CorpusArgs {
    /// A text file, or a directory whose files are read in name order.
    #[arg(long)]
    corpus: PathBuf,
    /// Fraction of the corpus tail held out for validation.
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        Corpus::load(&self.corpus, self.val_fraction)
            .with_context(|| format!("loading corpus {}", self.corpus.display()))
    }
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2.5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Write 0 for wall_ms so repeated runs produce identical files.
    #[arg(long)]
    omit_timing: bool,
    /// Print every n-th step to stderr; 0 is silent.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

impl LoopArgs {
    fn config(&self, seed: u64, loss: LossOptions) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            learning_rate: self.lr,
            epochs: self.epochs,
            max_steps: self.steps,
            seed,
            seq_len: self.seq_len,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            loss,
            record_timing: !self.omit_timing,
            ..TrainConfig::pretrain()
        }
    }

    fn logger(&self) -> impl FnMut(&StepMetrics) {
        let every = self.log_every;
        move |m| {
            if every > 0 && m.step % every == 0 {
                eprintln!(
                    "step {:>5}  total {:.4}  emb {:.4}  att {:.4}  hid {:.4}  ce {:.4}",
                    m.step, m.l_total, m.l_emb, m.l_att, m.l_hid, m.l_ce
                );
            }
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    output: PathBuf,
    /// Metrics history, one JSON object per line.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    train: LoopArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct ScheduleArgs {
    /// `odd`, `even`, `all`, `none` or a list of 0-based block indices.
    #[arg(long, default_value = "odd")]
    layers: String,
    /// Target compression factor per weight; must exceed 1.
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    embedding: Toggle,
    #[arg(long, default_value_t = 2)]
    embedding_factor: usize,
    /// Leave the attention output projection dense.
    #[arg(long)]
    keep_attn_out: bool,
    /// Keep the last power-iteration estimate instead of failing when a
    /// tensor does not converge.
    #[arg(long)]
    accept_unconverged: bool,
}

impl ScheduleArgs {
    fn schedule(&self) -> Result<CompressionSchedule> {
        if !(self.factor > 1.0) {
            bail!("--factor must exceed 1 (got {})", self.factor);
        }
        Ok(CompressionSchedule {
            compress_embedding: self.embedding == Toggle::On,
            embedding_factor: self.embedding_factor,
            layers: LayerSelector::parse(&self.layers)?,
            target_factor: self.factor,
            include_attn_out: !self.keep_attn_out,
            accept_unconverged: self.accept_unconverged,
            ..CompressionSchedule::default()
        })
    }
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// JSON report; defaults to the output path with a `.json` extension.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Lm,
    Kd,
    #[value(name = "lm+kd")]
    LmKd,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => Mode::None,
            ModeArg::Lm => Mode::Lm,
            ModeArg::Kd => Mode::Kd,
            ModeArg::LmKd => Mode::LmKd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KlArg {
    TeacherStudent,
    StudentTeacher,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    Factored,
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    Post,
    Pre,
}

#[derive(Args)]
struct LossArgs {
    /// Loss weights for embedding, attention, hidden and cross entropy.
    #[arg(long, default_value = "0.5,0.5,0.5,0.1")]
    alphas: DistillWeights,
    #[arg(long, value_enum, default_value_t = KlArg::TeacherStudent)]
    kl_direction: KlArg,
    /// Blocks whose attention and hidden states enter the loss.
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    layer_scope: ScopeArg,
    /// Hidden state after (`post`) or before (`pre`) the MLP residual.
    #[arg(long, value_enum, default_value_t = TapArg::Post)]
    hidden_tap: TapArg,
}

impl LossArgs {
    fn options(&self) -> LossOptions {
        LossOptions {
            kl_direction: match self.kl_direction {
                KlArg::TeacherStudent => KlDirection::TeacherStudent,
                KlArg::StudentTeacher => KlDirection::StudentTeacher,
            },
            layer_scope: match self.layer_scope {
                ScopeArg::All => LayerScope::All,
                ScopeArg::Factored => LayerScope::Factored,
            },
            hidden_tap: match self.hidden_tap {
                TapArg::Post => HiddenTap::PostResidual,
                TapArg::Pre => HiddenTap::PreResidual,
            },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::LmKd)]
    mode: ModeArg,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    train: LoopArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Evaluate at most this many windows of the validation split.
    #[arg(long)]
    max_windows: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// `m1xn1,m2xn2`; repeatable. Defaults to the GPT-2 small shapes.
    #[arg(long = "shape")]
    shapes: Vec<String>,
    /// Timed repetitions per shape; 0 fills only the analytic columns.
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Receives the compressed student, one checkpoint and metrics file per
    /// mode, and `summary.json`.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    train: LoopArgs,
    #[arg(long)]
    max_windows: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Compress(a) => compress(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn load(path: &Path) -> Result<TinyGPTModel> {
    load_model(path).with_context(|| format!("reading {}", path.display()))
}

fn save(model: &TinyGPTModel, path: &Path) -> Result<()> {
    save_model(model, path).with_context(|| format!("writing {}", path.display()))
}

fn init(a: InitArgs) -> Result<()> {
    let base = match a.preset {
        Preset::Desk => GPTConfig::default(),
        Preset::Gpt2Small => GPTConfig::gpt2_small(),
    };
    let d_model = a.d_model.unwrap_or(base.d_model);
    let config = GPTConfig {
        n_layers: a.layers.unwrap_or(base.n_layers),
        n_heads: a.heads.unwrap_or(base.n_heads),
        d_model,
        d_ff: a.d_ff.unwrap_or(if a.d_model.is_some() {
            4 * d_model
        } else {
            base.d_ff
        }),
        vocab: a.vocab.unwrap_or(base.vocab),
        max_seq_len: a.max_seq_len.unwrap_or(base.max_seq_len),
        seed: a.seed.seed,
        ..base
    };
    let model = TinyGPTModel::new(config)?;
    save(&model, &a.output)?;
    println!(
        "wrote {} ({} parameters)",
        a.output.display(),
        model.param_count(true)
    );
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let text = synthetic_text(a.bytes, a.seed.seed);
    write_atomic(&a.output, text.as_bytes())
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote {} ({} bytes)", a.output.display(), text.len());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut model = load(&a.model)?;
    let corpus = a.corpus.load()?;
    let cfg = a.train.config(a.seed.seed, LossOptions::default());
    let history = train_lm(&mut model, corpus.train(), &cfg, a.train.logger())?;
    save(&model, &a.output)?;
    if let Some(p) = &a.metrics {
        write_metrics(p, &history)?;
    }
    println!(
        "{} steps, final training cross entropy {:.4}",
        history.len(),
        history.last().map_or(f64::NAN, |m| m.l_ce)
    );
    Ok(())
}

/// Near-tied singular values stall the power iteration; say how to proceed.
fn unconverged_hint(e: knz::Error) -> anyhow::Error {
    let stalled = match &e {
        knz::Error::Tensor { source, .. } => matches!(**source, knz::Error::NotConverged { .. }),
        _ => false,
    };
    let e = anyhow::Error::new(e);
    if stalled {
        e.context(
            "decomposition failed; --accept-unconverged keeps the last power-iteration estimate",
        )
    } else {
        e
    }
}

fn compress(a: CompressArgs) -> Result<()> {
    let schedule = a.schedule.schedule()?;
    let teacher = load(&a.input)?;
    let (student, reports) = compress_model(&teacher, &schedule, &mut Rng::new(a.seed.seed))
        .map_err(unconverged_hint)?;
    save(&student, &a.output)?;
    let totals = ModelTotals {
        params_before: teacher.param_count(false),
        params_after: student.param_count(false),
    };
    let report = CompressionReportFile::new(&reports, totals);
    let report_path = a.report.unwrap_or_else(|| a.output.with_extension("json"));
    report.save(&report_path)?;
    println!(
        "{} tensors factored: {} -> {} parameters ({:.3}x); model without LM head {} -> {}",
        report.tensors.len(),
        report.totals.params_before,
        report.totals.params_after,
        report.totals.compression_factor,
        report.model.params_before,
        report.model.params_after
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let teacher = load(&a.teacher)?;
    let mut student = load(&a.student)?;
    let corpus = a.corpus.load()?;
    let cfg = a.train.config(a.seed.seed, a.loss.options());
    let history = run_phase(
        a.mode.into(),
        &mut student,
        &teacher,
        corpus.train(),
        &cfg,
        a.loss.alphas,
        a.train.logger(),
    )?;
    save(&student, &a.output)?;
    if let Some(p) = &a.metrics {
        write_metrics(p, &history)?;
    }
    println!("{} steps in mode {}", history.len(), Mode::from(a.mode));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load(&a.model)?;
    let corpus = a.corpus.load()?;
    let r = evaluate_lm(&model, corpus.validation(), a.seq_len, a.max_windows)?;
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!(
            "cross_entropy {:.6}\nperplexity {:.4}\ntokens {}",
            r.cross_entropy, r.perplexity, r.tokens
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let shapes = if a.shapes.is_empty() {
        default_shapes()
    } else {
        a.shapes
            .iter()
            .map(|s| parse_shape(s))
            .collect::<knz::Result<_>>()?
    };
    let mut rng = Rng::new(a.seed.seed);
    let mut out = String::from(BenchRow::CSV_HEADER);
    out.push('\n');
    for s in shapes {
        out.push_str(&bench_shape(s, a.reps, &mut rng)?.csv());
        out.push('\n');
    }
    match &a.output {
        Some(p) => {
            write_atomic(p, out.as_bytes()).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    mode: String,
    steps: usize,
    eval: EvalResult,
}

#[derive(Serialize)]
struct AblationSummary {
    teacher: EvalResult,
    params_teacher: usize,
    params_student: usize,
    modes: Vec<AblationRow>,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let schedule = a.schedule.schedule()?;
    let teacher = load(&a.teacher)?;
    let corpus = a.corpus.load()?;
    fs::create_dir_all(&a.out_dir)?;
    let (student, _) = compress_model(&teacher, &schedule, &mut Rng::new(a.seed.seed))
        .map_err(unconverged_hint)?;
    save(&student, &a.out_dir.join("student.ktnz"))?;
    let cfg = a.train.config(a.seed.seed, a.loss.options());
    let evaluate =
        |m: &TinyGPTModel| evaluate_lm(m, corpus.validation(), cfg.seq_len, a.max_windows);

    let mut summary = AblationSummary {
        teacher: evaluate(&teacher)?,
        params_teacher: teacher.param_count(false),
        params_student: student.param_count(false),
        modes: Vec::new(),
    };
    for mode in Mode::ALL {
        let mut s = student.clone();
        let history = run_phase(
            mode,
            &mut s,
            &teacher,
            corpus.train(),
            &cfg,
            a.loss.alphas,
            a.train.logger(),
        )?;
        let tag = mode.to_string().replace('+', "_");
        save(&s, &a.out_dir.join(format!("student_{tag}.ktnz")))?;
        write_metrics(a.out_dir.join(format!("metrics_{tag}.jsonl")), &history)?;
        let eval = evaluate(&s)?;
        println!(
            "{:<6} steps {:>5}  cross entropy {:.4}  perplexity {:.3}",
            mode.to_string(),
            history.len(),
            eval.cross_entropy,
            eval.perplexity
        );
        summary.modes.push(AblationRow {
            mode: mode.to_string(),
            steps: history.len(),
            eval,
        });
    }
    println!(
        "teacher        cross entropy {:.4}  perplexity {:.3}",
        summary.teacher.cross_entropy, summary.teacher.perplexity
    );
    write_atomic(
        &a.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(())
}
