//! Acceptance suite. Every test prints one `ACCEPTANCE` line with its
//! verdict and measured values, then asserts. Run with
//! `cargo test -p fastpitch --test acceptance -- --nocapture`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fastpitch::corpus::{
    load_dataset, preprocess, read_manifest, toy_model_config, toy_train_config, write_toy_corpus, AlignmentSource,
    PreprocessConfig, TOY_TRANSCRIPTS,
};
use fastpitch::dsp::{path_cost, track_pitch, viterbi, AudioClip, Candidate, MelConfig, PitchConfig, TransitionCosts};
use fastpitch::inference::{apply_transform, benchmark, real_time_factor, synthesize, PitchTransform};
use fastpitch::model::{
    upsample, Checkpoint, FastPitch, InferControls, ModelConfig, Speaker, TokenSequence, TrainExample,
};
use fastpitch::numerics::{grad_check, Graph, Mode, Tensor};
use fastpitch::prosody::{extract_durations, AttentionMatrix, PitchStats};
use fastpitch::ranking::{update_rating, Rating, GLICKO2_SCALE};
use fastpitch::text::Vocabulary;
use fastpitch::training::{lamb_step, lr_at, LambConfig, OptimizerState, TraceRow, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: String) {
    println!("ACCEPTANCE [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        predictor_channels: 16,
        n_mels: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = FastPitch::new(cfg.clone(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let durations = vec![2, 3];
    let example = TrainExample {
        tokens: TokenSequence::new(vec![5, 12]),
        pitch: Tensor::matrix(2, 1, vec![0.7, -0.4]).unwrap(),
        mel: Tensor::matrix(
            5,
            cfg.n_mels,
            (0..5 * cfg.n_mels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap(),
        durations,
    };
    let probe = model.clone();
    let report = grad_check(
        |tape, vars| {
            let mut g = Graph::with_bound_params(std::mem::take(tape), vars.to_vec(), Mode::Eval);
            let (vars, _) = probe.forward_train(&mut g, &example, None)?;
            *tape = g.tape;
            Ok(vars.total)
        },
        model.params_mut().tensors_mut(),
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = report.max_rel_error < 1e-3 && elapsed < Duration::from_secs(30);
    verdict(
        "gradient correctness",
        pass,
        format!(
            "max relative error {:.3e} over {} scalars (limit 1e-3), {:.2?} (limit 30 s)",
            report.max_rel_error, report.checked, elapsed
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn pitch_tracker_accuracy() {
    let start = Instant::now();
    let cfg = PitchConfig::default();
    let mut details = Vec::new();
    let mut pass = true;
    for hz in [110.0, 220.0, 440.0] {
        let fp = track_pitch(&AudioClip::sine(hz, 1.0, 0.5, 22050), &cfg).unwrap();
        let inner = 2..fp.len() - 2;
        let all_voiced = fp.voiced[inner.clone()].iter().all(|&v| v);
        let err = median(fp.f0_hz[inner].iter().map(|f| (f - hz).abs()).collect());
        pass &= all_voiced && err < 1.0;
        details.push(format!("{hz} Hz: voiced={all_voiced} median error {err:.4} Hz"));
    }
    let silence = track_pitch(&AudioClip::new(vec![0.0; 22050], 22050).unwrap(), &cfg).unwrap();
    let unvoiced = silence.voiced.iter().all(|&v| !v);
    let elapsed = start.elapsed();
    pass &= unvoiced && elapsed < Duration::from_secs(5);
    details.push(format!("silence all unvoiced={unvoiced}, {elapsed:.2?} (limit 5 s)"));
    verdict("pitch tracker accuracy", pass, details.join("; "));
}

fn brute_force_min(frames: &[Vec<Candidate>], costs: &TransitionCosts) -> f64 {
    let mut best = f64::INFINITY;
    let mut path = vec![0usize; frames.len()];
    loop {
        best = best.min(path_cost(frames, &path, costs));
        let mut t = 0;
        loop {
            if t == frames.len() {
                return best;
            }
            path[t] += 1;
            if path[t] < frames[t].len() {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

#[test]
fn viterbi_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let costs = PitchConfig::default().transition_costs(22050);
    let mut mismatches = 0;
    for _ in 0..200 {
        let frames: Vec<Vec<Candidate>> = (0..rng.gen_range(1..=6))
            .map(|_| {
                let mut c = vec![Candidate::unvoiced(rng.gen_range(0.0..1.5))];
                for _ in 1..rng.gen_range(1..=4) {
                    c.push(Candidate {
                        frequency: rng.gen_range(50.0..500.0),
                        strength: rng.gen_range(0.0..1.2),
                    });
                }
                c
            })
            .collect();
        let path = viterbi(&frames, &costs);
        if path_cost(&frames, &path, &costs) != brute_force_min(&frames, &costs) {
            mismatches += 1;
        }
    }
    verdict(
        "Viterbi optimality",
        mismatches == 0,
        format!("{mismatches} of 200 random instances differ from exhaustive minimum (exact comparison)"),
    );
}

#[test]
fn duration_extraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    for _ in 0..1000 {
        let (n, t) = (rng.gen_range(1..8), rng.gen_range(1..40));
        let weights = (0..n * t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d = extract_durations(&AttentionMatrix::new(n, t, weights).unwrap());
        if d.iter().sum::<usize>() != t || d.len() != n {
            violations += 1;
        }
    }
    // Column argmaxes 0,0,1,2,2,2.
    let argmax = [0usize, 0, 1, 2, 2, 2];
    let weights = (0..3)
        .flat_map(|r| argmax.iter().map(move |&a| if a == r { 1.0 } else { 0.1 }))
        .collect();
    let hand = extract_durations(&AttentionMatrix::new(3, 6, weights).unwrap());
    verdict(
        "duration extraction",
        violations == 0 && hand == vec![2, 1, 3],
        format!("{violations} of 1000 random matrices violate sum = t; hand case → {hand:?} (expected [2, 1, 3])"),
    );
}

#[test]
fn upsampling() {
    let model = FastPitch::new(toy_model_config(), 0).unwrap();
    let mut g = model.graph(Mode::Eval);
    let (g1, g2) = (vec![1.5, -2.0, 0.25], vec![7.0, 0.0, -1.0]);
    let src = g.tape.constant(Tensor::from_rows(&[g1.clone(), g2.clone()]).unwrap());
    let up = upsample(&mut g, src, &[2, 3]).unwrap();
    let t = g.tape.value(up);
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    let hand_ok = rows == vec![g1.clone(), g1, g2.clone(), g2.clone(), g2];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..10);
        let mut d: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        d[0] += 1;
        let src = g.tape.constant(Tensor::zeros(&[n, 2]));
        let up = upsample(&mut g, src, &d).unwrap();
        if g.tape.value(up).rows() != d.iter().sum::<usize>() {
            violations += 1;
        }
    }
    verdict(
        "upsampling",
        hand_ok && violations == 0,
        format!("hand case d=[2,3] exact={hand_ok}; {violations} of 1000 random cases violate rows = sum d"),
    );
}

struct ToyRun {
    checkpoint: Checkpoint,
    trace: Vec<TraceRow>,
    snapshot: Vec<Tensor>,
    examples: Vec<TrainExample>,
    elapsed: Duration,
}

const PREFIX_STEPS: u64 = 200;

fn toy_examples() -> (Vec<TrainExample>, PitchStats, MelConfig) {
    let dir = tempfile::tempdir().unwrap();
    let mel = MelConfig::default();
    let manifest = write_toy_corpus(dir.path(), 8, 1, &mel).unwrap();
    let cfg = PreprocessConfig {
        mel: mel.clone(),
        pitch: PitchConfig::default(),
        alignment: AlignmentSource::Attention(dir.path().join("alignments")),
        seed: 1,
    };
    let out = dir.path().join("features");
    preprocess(&read_manifest(&manifest).unwrap(), &Vocabulary::default(), &cfg, &out).unwrap();
    let data = load_dataset(&out, 1).unwrap();
    (data.examples, data.stats, mel)
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let (examples, stats, mel) = toy_examples();
        let cfg = toy_train_config();
        let mut trainer = Trainer::new(FastPitch::new(toy_model_config(), cfg.seed).unwrap(), cfg).unwrap();
        let mut snapshot = Vec::new();
        let trace = trainer
            .run(&examples, |row, t| {
                if row.step == PREFIX_STEPS {
                    snapshot = t.model.params().tensors().to_vec();
                }
                Ok(())
            })
            .unwrap();
        let step = trainer.step();
        ToyRun {
            checkpoint: Checkpoint {
                model: trainer.model,
                pitch_stats: stats,
                vocabulary: Vocabulary::default(),
                audio: mel,
                step,
            },
            trace,
            snapshot,
            examples,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn toy_convergence() {
    let run = toy_run();
    let (first, last) = (run.trace.first().unwrap(), run.trace.last().unwrap());
    let mel_ratio = last.mel_loss / first.mel_loss;
    let pitch_ratio = last.pitch_loss / first.pitch_loss;
    let dur_ratio = last.dur_loss / first.dur_loss;

    // Reproducibility: a fresh run with the same seed must match the first
    // PREFIX_STEPS steps bit for bit, losses and parameters alike.
    let cfg = TrainConfig {
        max_steps: PREFIX_STEPS,
        ..toy_train_config()
    };
    let mut again = Trainer::new(FastPitch::new(toy_model_config(), cfg.seed).unwrap(), cfg).unwrap();
    let prefix = again.run(&run.examples, |_, _| Ok(())).unwrap();
    let reproducible =
        prefix[..] == run.trace[..PREFIX_STEPS as usize] && again.model.params().tensors() == &run.snapshot[..];

    let pass = run.trace.len() == 2000
        && mel_ratio < 0.1
        && pitch_ratio <= 0.5
        && dur_ratio <= 0.5
        && run.elapsed < Duration::from_secs(600)
        && reproducible;
    verdict(
        "toy convergence",
        pass,
        format!(
            "{} steps in {:.1?} (limit 600 s); mel {:.4} → {:.4} (ratio {:.4}, limit 0.1); \
             pitch {:.4} → {:.4} (ratio {:.4}, limit 0.5); duration {:.4} → {:.4} (ratio {:.4}, limit 0.5); \
             first {PREFIX_STEPS} steps bit-identical on rerun={reproducible}",
            run.trace.len(),
            run.elapsed,
            first.mel_loss,
            last.mel_loss,
            mel_ratio,
            first.pitch_loss,
            last.pitch_loss,
            pitch_ratio,
            first.dur_loss,
            last.dur_loss,
            dur_ratio,
        ),
    );
}

#[test]
fn pitch_control() {
    let ckpt = &toy_run().checkpoint;
    let speaker = Speaker::default();
    let mut worst_shift: f64 = 0.0;
    let mut worst_involution: f64 = 0.0;
    let mut frames_ok = true;
    for text in TOY_TRANSCRIPTS {
        let base = synthesize(ckpt, text, speaker, &[], None).unwrap();
        let up = synthesize(ckpt, text, speaker, &[PitchTransform::ShiftHz(50.0)], None).unwrap();
        for (b, u) in base.pitch_hz.iter().zip(&up.pitch_hz) {
            match (b, u) {
                (Some(b), Some(u)) => worst_shift = worst_shift.max((u - b - 50.0).abs()),
                (None, None) => {}
                _ => worst_shift = f64::INFINITY,
            }
        }
        let twice = synthesize(
            ckpt,
            text,
            speaker,
            &[PitchTransform::Invert, PitchTransform::Invert],
            None,
        )
        .unwrap();
        for (a, b) in twice.pitch.data().iter().zip(base.pitch.data()) {
            worst_involution = worst_involution.max((a - b).abs());
        }
        for t in [
            PitchTransform::ShiftHz(50.0),
            PitchTransform::ShiftHz(-50.0),
            PitchTransform::Invert,
            PitchTransform::Flatten,
            PitchTransform::Scale(1.7),
        ] {
            let out = synthesize(ckpt, text, speaker, &[t], None).unwrap();
            frames_ok &= out.mel.n_frames() == base.mel.n_frames() && out.durations == base.durations;
        }
    }
    // Sentinel entries in a contour under the trained model's statistics.
    let contour = Tensor::matrix(4, 1, vec![0.0, 0.8, 0.0, -0.3]).unwrap();
    let mut sentinels_fixed = true;
    for t in [
        PitchTransform::ShiftHz(50.0),
        PitchTransform::Invert,
        PitchTransform::Flatten,
        PitchTransform::Scale(2.0),
    ] {
        let out = apply_transform(&contour, &t, &ckpt.pitch_stats).unwrap();
        sentinels_fixed &= out.get2(0, 0) == 0.0 && out.get2(2, 0) == 0.0;
    }
    let pass = worst_shift < 1e-9 && worst_involution < 1e-9 && sentinels_fixed && frames_ok;
    verdict(
        "pitch control",
        pass,
        format!(
            "max |Δhz − 50| {worst_shift:.2e} (limit 1e-9); invert∘invert max deviation {worst_involution:.2e} \
             (limit 1e-9); sentinels fixed={sentinels_fixed}; frame counts invariant={frames_ok}"
        ),
    );
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig::default();
    let peak = lr_at(1000, &cfg, 384).unwrap();
    let expected = 0.1 * 384f64.powf(-0.5) * 1000f64.powf(-0.5);
    let peak_rel = (peak - expected).abs() / expected;
    let neighbors_lower = lr_at(999, &cfg, 384).unwrap() < peak && lr_at(1001, &cfg, 384).unwrap() < peak;
    let ratio = lr_at(2000, &cfg, 384).unwrap() / peak;
    let ratio_rel = (ratio - 2f64.powf(-0.5)).abs() / 2f64.powf(-0.5);
    verdict(
        "LR schedule",
        peak_rel < 1e-6 && ratio_rel < 1e-9 && neighbors_lower,
        format!(
            "lr(1000) = {peak:.6e} (expected {expected:.6e}, rel {peak_rel:.1e}, limit 1e-6; ≈1.614e-4); \
             peak at 1000={neighbors_lower}; lr(2000)/lr(1000) rel error {ratio_rel:.1e} (limit 1e-9)"
        ),
    );
}

#[test]
fn lamb() {
    // Scalar step, w = 1, g = 1, by hand.
    let cfg = LambConfig::default();
    let lr = 0.01;
    let mut params = vec![Tensor::vector(vec![1.0])];
    let mut state = OptimizerState::new(&params);
    lamb_step(&mut params, &[vec![1.0]], &["w"], &mut state, &cfg, lr).unwrap();
    let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
    let v_hat: f64 = (0.02 * 1.0) / (1.0 - 0.98);
    let r = m_hat / (v_hat.sqrt() + 1e-9) + 1e-6 * 1.0;
    let expected = 1.0 - lr * (1.0 / r.abs()) * r;
    let scalar_err = (params[0].data()[0] - expected).abs();

    // Zero gradient and zero weight decay leave parameters alone.
    let fixed_cfg = LambConfig {
        weight_decay: 0.0,
        ..cfg
    };
    let start = vec![Tensor::vector(vec![0.5, -1.5]), Tensor::vector(vec![2.0])];
    let mut p = start.clone();
    let mut s = OptimizerState::new(&p);
    lamb_step(
        &mut p,
        &[vec![0.0, 0.0], vec![0.0]],
        &["a", "b"],
        &mut s,
        &fixed_cfg,
        0.1,
    )
    .unwrap();
    let fixed_point = p == start;

    // Trust ratio pinned to 1 without decay is Adam.
    let adam_cfg = LambConfig {
        weight_decay: 0.0,
        layerwise: false,
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = vec![Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())];
    let mut w = p[0].data().to_vec();
    let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
    let mut s = OptimizerState::new(&p);
    let mut adam_err: f64 = 0.0;
    for t in 1..=4 {
        let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        lamb_step(&mut p, std::slice::from_ref(&g), &["w"], &mut s, &adam_cfg, 0.02).unwrap();
        for k in 0..5 {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.98 * v[k] + 0.02 * g[k] * g[k];
            w[k] -= 0.02 * (m[k] / (1.0 - 0.9f64.powi(t))) / ((v[k] / (1.0 - 0.98f64.powi(t))).sqrt() + 1e-9);
            adam_err = adam_err.max((p[0].data()[k] - w[k]).abs());
        }
    }
    verdict(
        "LAMB",
        scalar_err < 1e-12 && fixed_point && adam_err < 1e-12,
        format!(
            "scalar step error {scalar_err:.1e} (limit 1e-12); zero-gradient fixed point={fixed_point}; \
             Adam equivalence max error {adam_err:.1e} (limit 1e-12)"
        ),
    );
}

/// Published update procedure, step by step, with bisection for the
/// volatility root.
fn glicko2_oracle() -> (f64, f64, f64) {
    let pi2 = std::f64::consts::PI.powi(2);
    let (mu, phi, sigma, tau) = (0.0, 200.0 / 173.7178, 0.06f64, 0.5);
    let opponents = [(1400.0, 30.0, 1.0), (1550.0, 100.0, 0.0), (1700.0, 300.0, 0.0)];
    let (mut v_inv, mut sum) = (0.0, 0.0);
    for (r, rd, s) in opponents {
        let (mu_j, phi_j) = ((r - 1500.0) / 173.7178, rd / 173.7178);
        let g = 1.0 / (1.0 + 3.0 * phi_j * phi_j / pi2).sqrt();
        let e = 1.0 / (1.0 + (-g * (mu - mu_j)).exp());
        v_inv += g * g * e * (1.0 - e);
        sum += g * (s - e);
    }
    let v = 1.0 / v_inv;
    let delta = v * sum;
    let a = (sigma * sigma).ln();
    let f = |x: f64| {
        let ex = x.exp();
        ex * (delta * delta - phi * phi - v - ex) / (2.0 * (phi * phi + v + ex).powi(2)) - (x - a) / (tau * tau)
    };
    let (mut lo, mut hi) = (a - 20.0, a + 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma_new = (lo / 2.0).exp();
    let phi_star = (phi * phi + sigma_new * sigma_new).sqrt();
    let phi_new = 1.0 / (1.0 / (phi_star * phi_star) + 1.0 / v).sqrt();
    (
        1500.0 + 173.7178 * (mu + phi_new * phi_new * sum),
        173.7178 * phi_new,
        sigma_new,
    )
}

#[test]
fn glicko2() {
    let player = Rating::new(1500.0, 200.0, 0.06).unwrap();
    let games = [
        (Rating::new(1400.0, 30.0, 0.06).unwrap(), 1.0),
        (Rating::new(1550.0, 100.0, 0.06).unwrap(), 0.0),
        (Rating::new(1700.0, 300.0, 0.06).unwrap(), 0.0),
    ];
    let new = update_rating(player, &games, 0.5).unwrap();
    let oracle = glicko2_oracle();
    let published = (new.rating - 1464.05).abs() <= 0.01
        && (new.deviation - 151.52).abs() <= 0.01
        && (new.volatility - 0.05999).abs() <= 1e-4;
    let matches_oracle = (new.rating - oracle.0).abs() < 1e-4
        && (new.deviation - oracle.1).abs() < 1e-4
        && (new.volatility - oracle.2).abs() < 1e-7;
    let idle = update_rating(player, &[], 0.5).unwrap();
    let phi = 200.0 / GLICKO2_SCALE;
    let no_play_exact = idle.deviation == (phi * phi + 0.06f64 * 0.06).sqrt() * GLICKO2_SCALE
        && idle.rating == 1500.0
        && idle.volatility == 0.06;
    verdict(
        "Glicko-2",
        published && matches_oracle && no_play_exact,
        format!(
            "rating {:.4} (1464.05 ± 0.01), RD {:.4} (151.52 ± 0.01), σ {:.6} (0.05999 ± 1e-4); \
             oracle ({:.4}, {:.4}, {:.6}) agrees={matches_oracle}; no-play RD growth exact={no_play_exact}",
            new.rating, new.deviation, new.volatility, oracle.0, oracle.1, oracle.2
        ),
    );
}

#[test]
fn benchmark_plumbing() {
    let fabricated = real_time_factor(10.0, 0.1).unwrap();
    let texts: Vec<String> = TOY_TRANSCRIPTS.iter().map(|s| s.to_string()).collect();
    let report = benchmark(&toy_run().checkpoint, &texts, 1, 3).unwrap();
    let pass =
        (fabricated - 100.0).abs() < 1e-9 && report.rtf > 0.0 && report.utterances == 8 && report.batch_size == 1;
    verdict(
        "benchmark plumbing",
        pass,
        format!(
            "fabricated 10 s / 0.1 s → RTF {fabricated} (expected 100); toy model CPU RTF {:.1}× \
             (mean latency {:.2} ms ± {:.2} ms, informational)",
            report.rtf,
            report.mean_latency_s * 1e3,
            report.std_latency_s * 1e3
        ),
    );
}

#[test]
fn checkpoint_round_trip() {
    let ckpt = Checkpoint {
        model: FastPitch::new(toy_model_config(), 31).unwrap(),
        pitch_stats: PitchStats::new(140.0, 25.0).unwrap(),
        vocabulary: Vocabulary::default(),
        audio: MelConfig::default(),
        step: 7,
    };
    let seq = TokenSequence::new(Vocabulary::default().encode("round trip").unwrap().1);
    // Fixed durations: an untrained duration predictor can round every
    // symbol to zero frames.
    let controls = InferControls {
        pitch: None,
        durations: Some(&[3; 10]),
    };
    let before = ckpt.model.forward_infer(&seq, &controls).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let after = loaded.model.forward_infer(&seq, &controls).unwrap();
    let identical = before == after && loaded.model.params() == ckpt.model.params();
    verdict(
        "checkpoint round trip",
        identical,
        format!(
            "save → load → forward bit-identical={identical} ({} mel frames compared)",
            before.mel.rows()
        ),
    );
}
