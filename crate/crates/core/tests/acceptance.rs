//! End-to-end acceptance checks. Every test prints one `PASS`/`FAIL` line for
//! its criterion.
//!
//! Criteria 5 and 6 are learned behaviours. Their lines report the measured
//! outcome without failing the test run; all others also assert.

use avalign_core::analysis::{self, cer, collapse_diagnostic, edit_distance, modality_lag, monotonicity_score, LagMode};
use avalign_core::audio::{self, Waveform};
use avalign_core::autodiff::{Graph, Padding, Var};
use avalign_core::corpus::{self, CorpusConfig, SymbolConfig};
use avalign_core::gradcheck::grad_check;
use avalign_core::model::{
    au_loss, ce_loss, Example, FusionVariant, MemoryEdit, Model, ModelConfig, ModelKind, VideoData,
};
use avalign_core::nn::{init_lstm, lstm_layer, LstmState, LstmVars};
use avalign_core::params::ParamStore;
use avalign_core::train::{self, Adam, Dataset, Stage, TrainConfig};
use avalign_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::time::{Duration, Instant};

/// Written straight to stderr so the line shows up without `--nocapture`.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn random(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn micro_example(seed: u64, n: usize, m: usize, label: Vec<usize>) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Example {
        id: format!("micro{seed}"),
        audio: random(vec![n, 3], -1.0, 1.0, &mut rng),
        video: Some(VideoData::Features(random(vec![m, 3], -1.0, 1.0, &mut rng))),
        au_targets: Some(random(vec![m, 2], 0.0, 1.0, &mut rng)),
        label,
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

/// Reduce `y` to a scalar through a fixed random weighting so that every
/// output entry receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.input(random(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_cases() -> Vec<(&'static str, ParamStore, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = |specs: &[(&str, Vec<usize>, f64, f64)]| {
        let mut s = ParamStore::new();
        for (name, shape, lo, hi) in specs {
            s.insert(name, random(shape.clone(), *lo, *hi, &mut rng));
        }
        s
    };
    let ab = |r: usize, c: usize| vec![("a", vec![r, c], -1.0, 1.0), ("b", vec![r, c], -1.0, 1.0)];
    let mut cases: Vec<(&'static str, ParamStore, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $specs:expr, |$g:ident, $p:ident| $body:expr) => {
            cases.push((
                $name,
                store(&$specs),
                Box::new(move |$g: &mut Graph, s: &ParamStore| {
                    let $p = |g: &mut Graph, n: &str| g.param(s, n);
                    let y = $body;
                    weighted_sum($g, y, 7)
                }),
            ));
        };
    }
    case!("matmul", [("a", vec![3, 4], -1.0, 1.0), ("b", vec![4, 2], -1.0, 1.0)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.matmul(a, b)?
    });
    case!("matmul_nt", [("a", vec![3, 4], -1.0, 1.0), ("b", vec![5, 4], -1.0, 1.0)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.matmul_nt(a, b)?
    });
    case!("add", ab(2, 3), |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.add(a, b)?
    });
    case!("sub", ab(2, 3), |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.sub(a, b)?
    });
    case!("mul", ab(2, 3), |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.mul(a, b)?
    });
    case!("add_n", ab(2, 3), |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.add_n(&[a, b, a])?
    });
    case!("add_row", [("a", vec![3, 4], -1.0, 1.0), ("b", vec![1, 4], -1.0, 1.0)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        g.add_row(a, b)?
    });
    case!("tanh", ab(2, 3), |g, p| {
        let a = p(g, "a")?;
        g.tanh(a)
    });
    case!("sigmoid", ab(2, 3), |g, p| {
        let a = p(g, "a")?;
        g.sigmoid(a)
    });
    case!("relu", [("a", vec![2, 3], 0.2, 1.0), ("b", vec![2, 3], -1.0, -0.2)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        let s = g.add_n(&[a, a])?;
        let r1 = g.relu(s);
        let r2 = g.relu(b);
        g.add(r1, r2)?
    });
    case!("square", ab(2, 3), |g, p| {
        let a = p(g, "a")?;
        g.square(a)
    });
    case!("log", [("a", vec![2, 3], 0.5, 2.0)], |g, p| {
        let a = p(g, "a")?;
        g.log(a)?
    });
    case!("clip", [("a", vec![2, 3], 0.2, 0.8), ("b", vec![2, 3], 1.2, 2.0)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        let ca = g.clip(a, 0.0, 1.0);
        let cb = g.clip(b, 0.0, 1.0);
        g.add(ca, cb)?
    });
    case!("scale", ab(2, 3), |g, p| {
        let a = p(g, "a")?;
        g.scale(a, -2.5)
    });
    case!("softmax_rows", [("a", vec![3, 4], -2.0, 2.0)], |g, p| {
        let a = p(g, "a")?;
        g.softmax(a, 1)?
    });
    case!("softmax_cols", [("a", vec![3, 4], -2.0, 2.0)], |g, p| {
        let a = p(g, "a")?;
        g.softmax(a, 0)?
    });
    case!("log_softmax", [("a", vec![3, 4], -2.0, 2.0)], |g, p| {
        let a = p(g, "a")?;
        g.log_softmax(a)
    });
    case!("concat", [("a", vec![2, 3], -1.0, 1.0), ("b", vec![2, 2], -1.0, 1.0)], |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        let h = g.concat(&[a, b], 1)?;
        let at = g.narrow(h, 1, 1, 3)?;
        let v = g.concat(&[at, a], 0)?;
        g.mul(v, v)?
    });
    case!("narrow_row_flip", [("a", vec![4, 3], -1.0, 1.0)], |g, p| {
        let a = p(g, "a")?;
        let n = g.narrow(a, 0, 1, 2)?;
        let r = g.row(a, 3)?;
        let f = g.flip_rows(n);
        let fr = g.concat(&[f, r], 0)?;
        let sq = g.square(fr);
        g.reshape(sq, vec![1, 9])?
    });
    case!("sum_mean", ab(2, 3), |g, p| {
        let (a, b) = (p(g, "a")?, p(g, "b")?);
        let s = g.sum(a);
        let m = g.mean(b);
        let sm = g.mul(s, m)?;
        g.add(sm, s)?
    });
    case!("pick", [("a", vec![3, 4], -1.0, 1.0)], |g, p| {
        let a = p(g, "a")?;
        let sq = g.square(a);
        g.pick(sq, &[(0, 1), (2, 3), (0, 1), (1, 0)])?
    });
    case!("conv2d_same", [("x", vec![5, 5, 2], -1.0, 1.0), ("k", vec![3, 3, 2, 3], -1.0, 1.0)], |g, p| {
        let (x, k) = (p(g, "x")?, p(g, "k")?);
        g.conv2d(x, k, 2, Padding::Same)?
    });
    case!("conv2d_valid", [("x", vec![5, 4, 2], -1.0, 1.0), ("k", vec![2, 3, 2, 2], -1.0, 1.0)], |g, p| {
        let (x, k) = (p(g, "x")?, p(g, "k")?);
        g.conv2d(x, k, 1, Padding::Valid)?
    });
    case!(
        "channel_norm",
        [("x", vec![3, 3, 2], -1.0, 1.0), ("gm", vec![1, 2], 0.5, 1.5), ("bt", vec![1, 2], -0.5, 0.5)],
        |g, p| {
            let (x, gm, bt) = (p(g, "x")?, p(g, "gm")?, p(g, "bt")?);
            g.channel_norm(x, gm, bt, 1e-5)?
        }
    );
    case!("lstm", [("xs", vec![4, 3], -1.0, 1.0)], |g, p| {
        let xs = p(g, "xs")?;
        let mut st = ParamStore::new();
        init_lstm(&mut st, "l", 3, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let lv = LstmVars::load(g, &st, "l")?;
        let init = LstmState::zeros(g, 2);
        let (out, fin) = lstm_layer(g, &lv, xs, init)?;
        let c = g.tanh(fin.c);
        g.concat(&[out, c], 0)?
    });
    cases
}

fn lstm_param_case() -> Result<(ParamStore, OpFn)> {
    let mut st = ParamStore::new();
    init_lstm(&mut st, "l", 3, 2, &mut ChaCha8Rng::seed_from_u64(5));
    let xs = random(vec![4, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    Ok((
        st,
        Box::new(move |g: &mut Graph, s: &ParamStore| {
            let lv = LstmVars::load(g, s, "l")?;
            let x = g.input(xs.clone());
            let init = LstmState::zeros(g, 2);
            let (out, _) = lstm_layer(g, &lv, x, init)?;
            weighted_sum(g, out, 9)
        }),
    ))
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cases = op_cases();
    let (st, f) = lstm_param_case().unwrap();
    cases.push(("lstm_params", st, f));
    let n_ops = cases.len();
    for (name, store, f) in cases {
        let r = grad_check(|g, s| f(g, s), &store, 1e-5, 1e-3, None).unwrap();
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("{name}: {:.2e}", r.max_rel_error));
        }
    }
    let mut configs: Vec<ModelConfig> = Vec::new();
    for v in FusionVariant::ALL {
        configs.push(ModelConfig::micro(ModelKind::AvAlign, v));
        configs.push(ModelConfig::micro(ModelKind::AvAlignAu, v));
    }
    configs.push(ModelConfig::micro(ModelKind::AvCat, FusionVariant::Baseline));
    configs.push(ModelConfig::micro(ModelKind::AvCatAu, FusionVariant::Baseline));
    let n_models = configs.len();
    let ex = micro_example(3, 3, 4, vec![3, 5]);
    for cfg in configs {
        let label = format!("{} {}", cfg.kind, cfg.fusion);
        let model = Model::new(cfg, 11).unwrap();
        let r = grad_check(
            |g, store| {
                let m = Model {
                    config: model.config.clone(),
                    params: store.clone(),
                };
                Ok(m.forward(g, &ex, &MemoryEdit::None)?.loss)
            },
            &model.params,
            1e-5,
            1e-3,
            None,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("{label}: {:.2e}", r.max_rel_error));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(300);
    report(
        1,
        "gradient integrity",
        pass,
        &format!(
            "{n_ops} op cases, {n_models} micro-models, max rel err {worst:.2e} <= 1e-3, {:.1}s < 300s {failures:?}",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_attention_laws() {
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    let mut nonneg = true;
    let mut seed = 0;
    while rows < 10_000 {
        let kind = if seed % 2 == 0 { ModelKind::AvAlignAu } else { ModelKind::AvCat };
        let mut cfg = ModelConfig::micro(kind, FusionVariant::ALL[seed as usize % 6]);
        cfg.vocab = corpus::VOCAB_SIZE;
        let model = Model::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, m) = (rng.random_range(20..60), rng.random_range(10..40));
        let ex = micro_example(seed, n, m, vec![3]);
        let d = model.greedy_decode(&ex, 40, &MemoryEdit::None).unwrap();
        let (err, nn) = d.record.normalisation_error();
        worst = worst.max(err);
        nonneg &= nn;
        rows += d.record.matrices().iter().map(|(_, t)| t.rows()).sum::<usize>();
        seed += 1;
    }

    let mut rev_err: f64 = 0.0;
    let mut same_text = true;
    for s in 0..20u64 {
        let mut cfg = ModelConfig::micro(ModelKind::AvAlignAu, FusionVariant::ALL[s as usize % 6]);
        cfg.vocab = corpus::VOCAB_SIZE;
        let model = Model::new(cfg, 500 + s).unwrap();
        let ex = micro_example(700 + s, 25, 15, vec![3]);
        let c = analysis::control_time_reverse(&model, &ex, 30).unwrap();
        let (a, b) = (c.clean.record.alpha.unwrap(), c.control.record.alpha.unwrap());
        let m = a.cols();
        for i in 0..a.rows() {
            for j in 0..m {
                rev_err = rev_err.max((b.get2(i, j) - a.get2(i, m - 1 - j)).abs());
            }
        }
        same_text &= c.clean.ids == c.control.ids;
    }
    let pass = worst <= 1e-6 && nonneg && rev_err <= 1e-6 && same_text;
    report(
        2,
        "attention laws",
        pass,
        &format!(
            "{rows} rows, max |sum-1| {worst:.1e} <= 1e-6; reversal max err {rev_err:.1e} <= 1e-6; transcripts identical: {same_text}"
        ),
    );
    assert!(pass);
}

fn dp_edit_distance(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, v) in d[0].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn criterion_3_formula_fidelity() {
    let mut g = Graph::new();
    let pred = g.input(Tensor::full(vec![7, 2], 0.75));
    let tgt = g.input(Tensor::full(vec![7, 2], 0.25));
    let au = au_loss(&mut g, pred, tgt, 10.0).unwrap();
    let au_v = g.value(au).item();

    let norm = corpus::normalize_au(5.0).unwrap();

    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(vec![4, corpus::VOCAB_SIZE]));
    let ce = ce_loss(&mut g, logits, &[3, 7, 2, 30]).unwrap();
    let ce_err = (g.value(ce).item() - (corpus::VOCAB_SIZE as f64).ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet: Vec<char> = "abcdefgh '".chars().collect();
    let mut mismatches = 0;
    for _ in 0..200 {
        let mut s = |lo: usize| -> String {
            let n = rng.random_range(lo..15);
            (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let (h, r) = (s(0), s(1));
        let (hc, rc): (Vec<char>, Vec<char>) = (h.chars().collect(), r.chars().collect());
        let want = dp_edit_distance(&hc, &rc) as f64 / rc.len() as f64;
        if cer(&h, &r).unwrap() != want || edit_distance(&hc, &rc) != dp_edit_distance(&hc, &rc) {
            mismatches += 1;
        }
    }
    let pass = au_v == 5.0 && norm == 1.0 && ce_err <= 1e-9 && mismatches == 0;
    report(
        3,
        "formula fidelity",
        pass,
        &format!(
            "au_loss {au_v} == 5.0; normalize_au(5.0) {norm} == 1.0; |ce - log 31| {ce_err:.1e} <= 1e-9; CER mismatches {mismatches}/200"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_overfit_sanity() {
    let cfg = CorpusConfig {
        sentences: 3,
        test_sentences: 0,
        min_len: 4,
        max_len: 6,
        ..Default::default()
    };
    let c = corpus::generate_corpus(&cfg, 1).unwrap();
    let noise = corpus::babble_noise(&c.symbols, audio::SAMPLE_RATE as usize, 1);
    let ds = Dataset::from_utterances(&c.train, noise);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in ModelKind::ALL {
        let t = Instant::now();
        let mut model = Model::new(ModelConfig::toy(kind), 0).unwrap();
        let exs = ds.examples(Stage::Clean, kind.uses_video()).unwrap();
        let refs: Vec<&Example> = exs.iter().collect();
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let (mut steps, mut ce) = (0, f64::INFINITY);
        while steps < 500 {
            train::train_step(&mut model, &mut opt, &refs, 1.0).unwrap();
            steps += 1;
            ce = exs.iter().map(|e| model.loss(e).unwrap().ce).sum::<f64>() / exs.len() as f64;
            if ce < 0.01 {
                break;
            }
        }
        let err = train::evaluate_cer(&model, &exs, 30).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let ok = ce < 0.01 && err == 0.0 && secs < 120.0;
        pass &= ok;
        lines.push(format!("{kind}: {steps} steps ce {ce:.4} cer {err} {secs:.1}s"));
    }
    report(
        4,
        "overfit sanity",
        pass,
        &format!("ce < 0.01 within 500 steps, CER 0, < 120s each; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_5_monotonic_alignment() {
    let start = Instant::now();
    let cfg = CorpusConfig {
        sentences: 300,
        test_sentences: 50,
        symbols: SymbolConfig {
            lag_range_ms: (-20.0, 80.0),
            ..Default::default()
        },
        ..Default::default()
    };
    let c = corpus::generate_corpus(&cfg, 7).unwrap();
    let noise = corpus::babble_noise(&c.symbols, audio::SAMPLE_RATE as usize, 7);
    let train_ds = Dataset::from_utterances(&c.train, noise.clone());
    let test_ds = Dataset::from_utterances(&c.test, noise);
    let tc = TrainConfig {
        stages: vec![Stage::Clean],
        seeds: vec![0],
        max_epochs: 100,
        ..Default::default()
    };
    let out = train::run_curriculum(&ModelConfig::toy(ModelKind::AvAlignAu), &tc, &train_ds, None, None, 0, None).unwrap();
    let model = &out.stages[0].checkpoint.model;

    let tests = test_ds.examples(Stage::Clean, true).unwrap();
    let mut monos = Vec::new();
    let (mut ok, mut total) = (0, 0);
    for (ex, s) in tests.iter().zip(&c.test) {
        let d = model.greedy_decode(ex, 40, &MemoryEdit::None).unwrap();
        let alpha = d.record.alpha.unwrap();
        monos.push(monotonicity_score(&alpha).score.unwrap_or(f64::NEG_INFINITY));
        let trace = modality_lag(&alpha, audio::FEATURE_PERIOD_S, corpus::VIDEO_PERIOD_S, LagMode::Row).unwrap();
        for sl in analysis::symbol_lags(&trace, &s.truth).unwrap() {
            total += 1;
            if sl.recovered_ms.is_some_and(|r| (r - sl.injected_ms).abs() <= corpus::VIDEO_PERIOD_S * 1e3) {
                ok += 1;
            }
        }
    }
    monos.sort_by(f64::total_cmp);
    let median = (monos[(monos.len() - 1) / 2] + monos[monos.len() / 2]) / 2.0;
    let frac = ok as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = median >= 0.8 && frac >= 0.7 && secs <= 1800.0;
    report(
        5,
        "monotonic alignment emergence",
        pass,
        &format!(
            "median monotonicity {median:.3} >= 0.8; lag within 40 ms on {frac:.3} of {total} symbols >= 0.70; {secs:.0}s <= 1800s"
        ),
    );
}

#[test]
fn criterion_6_visual_benefit() {
    let start = Instant::now();
    let cfg = CorpusConfig {
        sentences: 300,
        test_sentences: 50,
        confusable_fraction: 0.5,
        ..Default::default()
    };
    let tc = TrainConfig {
        stages: vec![Stage::Clean],
        max_epochs: 60,
        ..Default::default()
    };
    let (mut audio_cer, mut av_cer) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let c = corpus::generate_corpus(&cfg, 100 + seed).unwrap();
        let noise = corpus::babble_noise(&c.symbols, audio::SAMPLE_RATE as usize, seed);
        let train_ds = Dataset::from_utterances(&c.train, noise.clone());
        let test_ds = Dataset::from_utterances(&c.test, noise);
        for (kind, sink) in [(ModelKind::Audio, &mut audio_cer), (ModelKind::AvAlignAu, &mut av_cer)] {
            let out = train::run_curriculum(&ModelConfig::toy(kind), &tc, &train_ds, None, Some(&test_ds), seed, None).unwrap();
            sink.push(out.test_cer[0]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, v) = (mean(&audio_cer), mean(&av_cer));
    let pass = a >= 0.20 && v <= 0.5 * a;
    report(
        6,
        "visual benefit",
        pass,
        &format!(
            "audio-only CER {a:.3} >= 0.20; AV Align+AU CER {v:.3} <= 0.5 x audio = {:.3}; per seed audio {audio_cer:.3?} av {av_cer:.3?}; {:.0}s",
            0.5 * a,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_collapse_diagnostic() {
    let collapsed = Tensor::from_fn(vec![6, 5], |k| if k % 5 == 0 { 1.0 } else { 0.0 });
    let c = collapse_diagnostic(&collapsed);
    let mut worst: f64 = 0.0;
    for m in [1usize, 2, 7, 40, 123] {
        let u = collapse_diagnostic(&Tensor::full(vec![9, m], 1.0 / m as f64));
        worst = worst.max((u.mean_row_entropy - (m as f64).ln()).abs());
    }
    let pass = c.first_frame_mass == 1.0 && c.mean_row_entropy == 0.0 && worst <= 1e-9;
    report(
        7,
        "collapse diagnostic",
        pass,
        &format!(
            "collapse: first_frame_mass {} == 1, entropy {} == 0; uniform: max |H - log M| {worst:.1e} <= 1e-9",
            c.first_frame_mass, c.mean_row_entropy
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_curriculum() {
    let cfg = CorpusConfig {
        sentences: 6,
        test_sentences: 2,
        min_len: 3,
        max_len: 5,
        ..Default::default()
    };
    let tc = TrainConfig {
        stages: vec![Stage::Clean, Stage::Snr(10.0), Stage::Snr(0.0), Stage::Snr(-5.0)],
        max_epochs: 1,
        batch_size: 3,
        ..Default::default()
    };
    let run = |dir: &std::path::Path| {
        let c = corpus::generate_corpus(&cfg, 5).unwrap();
        corpus::write_corpus(&dir.join("corpus"), &c).unwrap();
        let noise = corpus::babble_noise(&c.symbols, audio::SAMPLE_RATE as usize, 5);
        let ds = Dataset::from_utterances(&c.train, noise);
        train::run_curriculum(&ModelConfig::toy(ModelKind::AvAlignAu), &tc, &ds, None, None, 3, Some(dir)).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (o1, _o2) = (run(d1.path()), run(d2.path()));

    let mut files = Vec::new();
    for e in walk(d1.path()) {
        files.push(e.strip_prefix(d1.path()).unwrap().to_path_buf());
    }
    files.sort();
    let identical = !files.is_empty()
        && files
            .iter()
            .all(|f| std::fs::read(d1.path().join(f)).unwrap() == std::fs::read(d2.path().join(f)).unwrap())
        && walk(d2.path()).len() == files.len();

    let bits = |p: &ParamStore| -> Vec<(String, Vec<u64>)> {
        p.iter()
            .map(|x| (x.name.clone(), x.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let copied = o1
        .stages
        .windows(2)
        .all(|w| bits(&w[0].checkpoint.model.params) == bits(&w[1].initial));
    let moved = o1
        .stages
        .iter()
        .all(|s| bits(&s.initial) != bits(&s.checkpoint.model.params));
    let pass = identical && copied && moved;
    report(
        8,
        "determinism and curriculum",
        pass,
        &format!(
            "{} output files byte-identical across reruns: {identical}; stage k+1 starts from stage k parameters bitwise: {copied} (every stage trained: {moved})",
            files.len()
        ),
    );
    assert!(pass);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn criterion_9_front_end_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Waveform::new(
        (0..audio::SAMPLE_RATE as usize).map(|_| rng.random_range(-0.5..0.5)).collect(),
        audio::SAMPLE_RATE,
    )
    .unwrap();
    let spec = audio::log_mel_spectrogram(&w).unwrap();
    let feats = audio::features(&w).unwrap();
    let frames_ok = spec.rows() == 98 && feats.vectors.rows() == 31 && feats.vectors.cols() == 240;
    let formula_ok = 1 + (98 - 8) / 3 == 31;

    let noise = Waveform::new(
        (0..7000).map(|_| rng.random_range(-1.0..1.0)).collect(),
        audio::SAMPLE_RATE,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for snr in [20.0, 10.0, 0.0, -5.0, -12.5] {
        let mixed = audio::mix_noise(&w, &noise, snr).unwrap();
        let resid: Vec<f64> = mixed.samples.iter().zip(&w.samples).map(|(m, c)| m - c).collect();
        let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let measured = 10.0 * (p(&w.samples) / p(&resid)).log10();
        worst = worst.max((measured - snr).abs());
    }
    let pass = frames_ok && formula_ok && worst <= 1e-9;
    report(
        9,
        "front-end arithmetic",
        pass,
        &format!(
            "1 s -> {} STFT frames -> {} x {} vectors (expect 98 -> 31 x 240); max SNR error {worst:.1e} dB <= 1e-9",
            spec.rows(),
            feats.vectors.rows(),
            feats.vectors.cols()
        ),
    );
    assert!(pass);
}
