mod common;

use common::*;
use knz::autodiff::KlDirection;
use knz::distill::*;
use knz::layers::CompressionSchedule;
use knz::model::{compress_model, ForwardTrace, TinyGPTModel};
use knz::{Matrix, Rng};

fn fixture(seed: u64) -> (ForwardTrace, ForwardTrace, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let s = random_trace(5, 6, 7, 3, 2, &mut rng);
    let t = random_trace(5, 6, 7, 3, 2, &mut rng);
    (s, t, random_tokens(5, 7, &mut rng))
}

#[test]
fn embedding_loss_cases() {
    let (s, t, _) = fixture(1);
    assert_eq!(loss_embedding(&s, &s).unwrap(), 0.0);
    let mut shifted = s.clone();
    shifted.embedding = s.embedding.map(|x| x + 1.0);
    assert!((loss_embedding(&shifted, &s).unwrap() - 1.0).abs() <= 1e-12);
    assert!(
        (loss_embedding(&s, &t).unwrap() - mse_oracle(&s.embedding, &t.embedding)).abs() <= 1e-12
    );
    let mut bad = s.clone();
    bad.embedding = Matrix::zeros(4, 6);
    assert!(loss_embedding(&bad, &t).is_err());
}

#[test]
fn attention_loss_cases() {
    let (s, t, _) = fixture(2);
    assert_eq!(
        loss_attention(&s, &s, KlDirection::TeacherStudent, None).unwrap(),
        0.0
    );
    let got = loss_attention(&s, &t, KlDirection::TeacherStudent, None).unwrap();
    assert!(got > 0.0);
    assert!((got - attention_oracle(&s, &t)).abs() <= 1e-10);
    let reversed = loss_attention(&s, &t, KlDirection::StudentTeacher, None).unwrap();
    assert!((reversed - attention_oracle(&t, &s)).abs() <= 1e-10);

    // One layer, one head, two tokens: row 0 is [1] on both sides, row 1 is
    // teacher [1, 0] against student [0.5, 0.5].
    let one = |rows: [[f64; 2]; 2]| ForwardTrace {
        embedding: Matrix::zeros(2, 1),
        attention: vec![vec![Matrix::from_rows(&rows)]],
        hidden: vec![Matrix::zeros(2, 1)],
        ffn_out: vec![Matrix::zeros(2, 1)],
        logits: Matrix::zeros(2, 1),
    };
    let student = one([[1.0, 0.0], [0.5, 0.5]]);
    let teacher = one([[1.0, 0.0], [1.0, 0.0]]);
    let l = loss_attention(&student, &teacher, KlDirection::TeacherStudent, None).unwrap();
    assert!((l - std::f64::consts::LN_2 / 2.0).abs() <= 1e-12);
}

#[test]
fn hidden_loss_cases() {
    let (s, t, _) = fixture(3);
    assert_eq!(
        loss_hidden(&s, &s, HiddenTap::PostResidual, None).unwrap(),
        0.0
    );
    let mut shifted = s.clone();
    shifted.hidden[1] = s.hidden[1].map(|x| x + 2.0);
    assert!(
        (loss_hidden(&shifted, &s, HiddenTap::PostResidual, None).unwrap() - 4.0).abs() <= 1e-12
    );
    let oracle: f64 = s
        .hidden
        .iter()
        .zip(&t.hidden)
        .map(|(a, b)| mse_oracle(a, b))
        .sum();
    assert!((loss_hidden(&s, &t, HiddenTap::PostResidual, None).unwrap() - oracle).abs() <= 1e-12);
    let pre: f64 = s
        .ffn_out
        .iter()
        .zip(&t.ffn_out)
        .map(|(a, b)| mse_oracle(a, b))
        .sum();
    assert!((loss_hidden(&s, &t, HiddenTap::PreResidual, None).unwrap() - pre).abs() <= 1e-12);
    let only_two = mse_oracle(&s.hidden[2], &t.hidden[2]);
    assert!(
        (loss_hidden(&s, &t, HiddenTap::PostResidual, Some(&[2])).unwrap() - only_two).abs()
            <= 1e-12
    );
}

#[test]
fn cross_entropy_cases() {
    let mut confident = Matrix::zeros(3, 4);
    for (r, t) in [1, 3, 0].iter().enumerate() {
        confident.set(r, *t, 200.0);
    }
    assert!(loss_cross_entropy(&confident, &[1, 3, 0]).unwrap() < 1e-12);
    let uniform = Matrix::zeros(2, 16);
    assert!((loss_cross_entropy(&uniform, &[0, 15]).unwrap() - 16f64.ln()).abs() <= 1e-12);
    let (s, _, targets) = fixture(4);
    let got = loss_cross_entropy(&s.logits, &targets).unwrap();
    assert!((got - ce_oracle(&s.logits, &targets)).abs() <= 1e-10);
    assert!(loss_cross_entropy(&s.logits, &[7, 0, 0, 0, 0]).is_err());
}

#[test]
fn total_is_the_weighted_sum() {
    let (s, t, targets) = fixture(5);
    let opts = LossOptions::default();
    let w = DistillWeights::pretrain();
    let (total, c) = loss_total(&s, &t, &targets, &w, &opts, None).unwrap();
    let hand = 0.5 * mse_oracle(&s.embedding, &t.embedding)
        + 0.5 * attention_oracle(&s, &t)
        + 0.5
            * s.hidden
                .iter()
                .zip(&t.hidden)
                .map(|(a, b)| mse_oracle(a, b))
                .sum::<f64>()
        + 0.1 * ce_oracle(&s.logits, &targets);
    assert!((total - hand).abs() <= 1e-9);
    assert!(c.emb >= 0.0 && c.att >= 0.0 && c.hid >= 0.0 && c.ce >= 0.0);

    let (lm, _) = loss_total(&s, &t, &targets, &DistillWeights::lm_only(), &opts, None).unwrap();
    assert!((lm - ce_oracle(&s.logits, &targets)).abs() <= 1e-12);
    let (same, c) = loss_total(&s, &s, &targets, &w, &opts, None).unwrap();
    assert_eq!((c.emb, c.att, c.hid), (0.0, 0.0, 0.0));
    assert!((same - 0.1 * c.ce).abs() <= 1e-15);
}

fn desk_setup(seed: u64) -> (TinyGPTModel, TinyGPTModel, Vec<Vec<usize>>) {
    let mut rng = Rng::new(seed);
    let teacher = TinyGPTModel::new(desk_config(seed)).unwrap();
    let (student, _) = compress_model(&teacher, &CompressionSchedule::default(), &mut rng).unwrap();
    let batch = (0..4).map(|_| random_tokens(13, 64, &mut rng)).collect();
    (student, teacher, batch)
}

fn cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        seq_len: 12,
        batch_size: 4,
        record_timing: false,
        ..TrainConfig::pretrain()
    }
}

#[test]
fn repeated_batch_loss_decreases() {
    let (mut student, teacher, batch) = desk_setup(6);
    let (w, c) = (DistillWeights::pretrain(), cfg(1e-3));
    let mut opt = Adam::new(c.adam);
    let fp = teacher.fingerprint();
    let history: Vec<StepMetrics> = (0..51)
        .map(|step| train_step(&mut student, &teacher, &batch, &w, &mut opt, &c, step).unwrap())
        .collect();
    let decreases = history
        .windows(2)
        .filter(|p| p[1].l_total < p[0].l_total)
        .count();
    assert!(decreases >= 45, "{decreases} of 50");
    for m in &history {
        assert!((m.l_total - w.combine(&m.components())).abs() <= 1e-9);
    }
    assert_eq!(teacher.fingerprint(), fp);
}

#[test]
fn zero_learning_rate_leaves_student_unchanged() {
    let (mut student, teacher, batch) = desk_setup(7);
    let before = student.clone();
    let c = cfg(0.0);
    let mut opt = Adam::new(c.adam);
    for step in 0..3 {
        train_step(
            &mut student,
            &teacher,
            &batch,
            &DistillWeights::pretrain(),
            &mut opt,
            &c,
            step,
        )
        .unwrap();
    }
    assert_eq!(student, before);
}

#[test]
fn run_phase_is_deterministic_and_keeps_teacher_frozen() {
    let (student, teacher, _) = desk_setup(8);
    let tokens = random_tokens(2000, 64, &mut Rng::new(9));
    let c = TrainConfig {
        max_steps: Some(6),
        ..cfg(1e-3)
    };
    let run = |mode| {
        let mut s = student.clone();
        let h = run_phase(
            mode,
            &mut s,
            &teacher,
            &tokens,
            &c,
            DistillWeights::pretrain(),
            |_| {},
        )
        .unwrap();
        (s, h)
    };
    let fp = teacher.fingerprint();
    let (s1, h1) = run(Mode::LmKd);
    let (s2, h2) = run(Mode::LmKd);
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
    assert_eq!(h1.len(), 6);
    assert_eq!(teacher.fingerprint(), fp);

    let (s0, h0) = run(Mode::None);
    assert!(h0.is_empty());
    assert_eq!(s0, student);

    let (_, lm) = run(Mode::Lm);
    assert!(lm.iter().all(|m| (m.l_total - m.l_ce).abs() <= 1e-12));
    let (_, kd) = run(Mode::Kd);
    assert!(kd
        .iter()
        .all(|m| (m.l_total - 0.5 * (m.l_emb + m.l_att + m.l_hid)).abs() <= 1e-12));
}

#[test]
fn kd_only_moves_student_traces_toward_teacher() {
    let (mut student, teacher, _) = desk_setup(10);
    let mut rng = Rng::new(13);
    for p in student.params_mut() {
        let noise = random(p.rows(), p.cols(), &mut rng).scale(0.1);
        p.add_assign(&noise).unwrap();
    }
    let tokens = random_tokens(3000, 64, &mut Rng::new(11));
    let c = TrainConfig {
        max_steps: Some(30),
        ..cfg(1e-3)
    };
    let mut trained = student.clone();
    run_phase(
        Mode::Kd,
        &mut trained,
        &teacher,
        &tokens,
        &c,
        DistillWeights::pretrain(),
        |_| {},
    )
    .unwrap();
    let opts = LossOptions::default();
    let before = evaluate_distill(&student, &teacher, &tokens, 12, Some(20), &opts).unwrap();
    let after = evaluate_distill(&trained, &teacher, &tokens, 12, Some(20), &opts).unwrap();
    assert!(after.emb < before.emb, "{after:?} vs {before:?}");
    assert!(after.hid < before.hid, "{after:?} vs {before:?}");
}

#[test]
fn metrics_lines_have_the_documented_keys() {
    let m = StepMetrics {
        step: 3,
        l_emb: 0.1,
        l_att: 0.2,
        l_hid: 0.3,
        l_ce: 0.4,
        l_total: 0.34,
        wall_ms: 0,
    };
    let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["L_att", "L_ce", "L_emb", "L_hid", "L_total", "step", "wall_ms"]
    );
}

#[test]
fn untrained_model_perplexity_is_near_vocab_size() {
    let model = TinyGPTModel::new(knz::model::GPTConfig::default()).unwrap();
    let tokens = random_tokens(3000, 256, &mut Rng::new(12));
    let r = evaluate_lm(&model, &tokens, 64, None).unwrap();
    assert!(
        (r.perplexity / 256.0 - 1.0).abs() <= 0.05,
        "{}",
        r.perplexity
    );
}
