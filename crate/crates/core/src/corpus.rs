//! Deterministic synthetic audio-visual corpus.
//!
//! Every vocabulary character gets a [`SymbolSpec`]: an audio template (a
//! harmonic tone with two formant peaks), a video template (a 128-dim
//! feature direction modulated by a mouth-opening trajectory) and a
//! cross-modal lag. Characters in the same confusable group share their audio
//! template exactly, so only the video stream can tell them apart.
//!
//! Time conventions: utterances live on a "world" clock. Stacked audio vector
//! `i` is centred on world time `i · 30 ms` (the waveform carries a lead-in
//! that absorbs the analysis-window offset) and video frame `j` samples world
//! time `j · 40 ms`. A symbol spoken over `[s, e)` shows its video trajectory
//! over `[s − lag, e − lag)`; positive lag means the video leads.

use crate::audio::{self, AudioFeatureSeq, Waveform, SAMPLE_RATE};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::visual::{ImageFrameSeq, VisualFeatureSeq, IMAGE_SIZE, VISUAL_DIM};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const VOCAB_SIZE: usize = 31;
/// The 28 content characters, in id order starting at 3.
pub const CONTENT_CHARS: &str = "abcdefghijklmnopqrstuvwxyz '";

pub const VIDEO_PERIOD_S: f64 = 0.040;
/// World time of the first stacked audio vector's centre, relative to sample 0.
pub const AUDIO_ORIGIN_S: f64 = ((audio::STACK - 1) * audio::HOP + audio::WINDOW) as f64
    / 2.0
    / SAMPLE_RATE as f64;
const LEAD_IN_S: f64 = 0.16;
const TAIL_S: f64 = 0.16;

/// Character vocabulary: PAD, SOS, EOS followed by a–z, space, apostrophe.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id(&self, c: char) -> Option<usize> {
        CONTENT_CHARS.chars().position(|x| x == c).map(|p| p + 3)
    }

    pub fn char(&self, id: usize) -> Option<char> {
        (3..VOCAB_SIZE)
            .contains(&id)
            .then(|| CONTENT_CHARS.chars().nth(id - 3).unwrap())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Decode ids, stopping at EOS and skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter_map(|&i| self.char(i))
            .collect()
    }
}

/// Map an Action Unit intensity in `[0, 5]` to a sigmoid target in `[0, 1]` by
/// clipping to `[0, 3]` and dividing by 3.
pub fn normalize_au(intensity: f64) -> Result<f64> {
    if intensity < 0.0 || intensity.is_nan() {
        return Err(Error::Domain(format!("negative AU intensity {intensity}")));
    }
    Ok(intensity.min(3.0) / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioTemplate {
    pub duration_ms: f64,
    pub f0: f64,
    pub formants: [f64; 2],
    /// Silent templates render zeros.
    pub silent: bool,
}

impl AudioTemplate {
    /// Render with a pitch factor (1.0 for the template itself) and a start
    /// phase in radians.
    pub fn render(&self, pitch: f64, phase: f64) -> Vec<f64> {
        let n = (self.duration_ms / 1000.0 * SAMPLE_RATE as f64).round() as usize;
        if self.silent {
            return vec![0.0; n];
        }
        let f0 = self.f0 * pitch;
        let ramp = (0.012 * SAMPLE_RATE as f64) as usize;
        let mut harmonics = Vec::new();
        let mut k = 1.0;
        while k * f0 < 5_000.0 {
            let f = k * f0;
            let amp: f64 = self
                .formants
                .iter()
                .map(|fm| (-((f - fm) / 120.0).powi(2)).exp())
                .sum::<f64>()
                + 0.02;
            harmonics.push((f, amp));
            k += 1.0;
        }
        let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let env = if i < ramp {
                    0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                } else if i + ramp > n {
                    0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let s: f64 = harmonics
                    .iter()
                    .map(|(f, a)| a * (2.0 * PI * f * t + phase * f / f0).sin())
                    .sum();
                0.3 * env * s / norm
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTemplate {
    /// Unit-norm identity direction in feature space.
    pub direction: Vec<f64>,
    /// Peak mouth opening in `[0, 1]`.
    pub mouth_peak: f64,
    /// Fraction of the symbol during which the lips stay closed before opening.
    pub open_at: f64,
}

impl VideoTemplate {
    /// Mouth opening at relative position `u ∈ [0, 1)` within the symbol.
    pub fn mouth(&self, u: f64) -> f64 {
        if u < self.open_at {
            0.0
        } else {
            self.mouth_peak * (PI * (u - self.open_at) / (1.0 - self.open_at)).sin().max(0.0)
        }
    }

    /// Feature envelope: identity direction ramps in and out over the symbol.
    pub fn envelope(&self, u: f64) -> f64 {
        0.4 + 0.6 * (PI * u).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub ch: char,
    pub audio: AudioTemplate,
    pub video: VideoTemplate,
    pub av_lag_ms: f64,
    pub confusable_group: Option<usize>,
}

/// Settings for building the per-character symbol table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymbolConfig {
    pub confusable_pairs: Vec<(char, char)>,
    pub lag_range_ms: (f64, f64),
    pub duration_range_ms: (f64, f64),
}

impl Default for SymbolConfig {
    fn default() -> Self {
        SymbolConfig {
            confusable_pairs: vec![('m', 'n'), ('b', 'p'), ('d', 't'), ('f', 'v')],
            lag_range_ms: (0.0, 0.0),
            duration_range_ms: (120.0, 240.0),
        }
    }
}

/// Symbol specs for all 28 content characters.
pub fn build_symbols(cfg: &SymbolConfig, seed: u64) -> Result<Vec<SymbolSpec>> {
    let (lo, hi) = cfg.lag_range_ms;
    if lo > hi || lo.abs() > 200.0 || hi.abs() > 200.0 {
        return Err(Error::Config(format!("lag range ({lo}, {hi}) must lie within ±200 ms")));
    }
    let (dlo, dhi) = cfg.duration_range_ms;
    if !(dlo > 0.0 && dlo <= dhi) {
        return Err(Error::Config(format!("bad duration range ({dlo}, {dhi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let mut specs: Vec<SymbolSpec> = CONTENT_CHARS
        .chars()
        .enumerate()
        .map(|(k, ch)| {
            let mut dir: Vec<f64> = (0..VISUAL_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let silent = ch == ' ';
            SymbolSpec {
                ch,
                audio: AudioTemplate {
                    duration_ms: rng.random_range(dlo..=dhi),
                    f0: rng.random_range(110.0..220.0),
                    formants: [300.0 + 95.0 * (k % 7) as f64, 1100.0 + 420.0 * (k / 7) as f64],
                    silent,
                },
                video: VideoTemplate {
                    direction: dir,
                    mouth_peak: if silent { 0.0 } else { rng.random_range(0.3..1.0) },
                    open_at: rng.random_range(0.0..0.3),
                },
                av_lag_ms: if lo == hi { lo } else { rng.random_range(lo..=hi) },
                confusable_group: None,
            }
        })
        .collect();
    for (g, &(a, b)) in cfg.confusable_pairs.iter().enumerate() {
        let ia = CONTENT_CHARS
            .chars()
            .position(|c| c == a)
            .ok_or_else(|| Error::Config(format!("unknown character {a:?}")))?;
        let ib = CONTENT_CHARS
            .chars()
            .position(|c| c == b)
            .ok_or_else(|| Error::Config(format!("unknown character {b:?}")))?;
        if specs[ia].confusable_group.is_some() || specs[ib].confusable_group.is_some() || ia == ib {
            return Err(Error::Config(format!("character in more than one confusable pair: {a}/{b}")));
        }
        specs[ib].audio = specs[ia].audio.clone();
        // closed-lips onset vs open onset keeps the pair visually distinct
        specs[ia].video.open_at = 0.45;
        specs[ib].video.open_at = 0.0;
        specs[ia].confusable_group = Some(g);
        specs[ib].confusable_group = Some(g);
    }
    Ok(specs)
}

fn spec_for(specs: &[SymbolSpec], c: char) -> Result<&SymbolSpec> {
    specs
        .iter()
        .find(|s| s.ch == c)
        .ok_or_else(|| Error::Data(format!("no symbol spec covers {c:?}")))
}

/// Ground-truth spans of one character; `end` indices are exclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharAlignment {
    pub ch: char,
    pub start_ms: f64,
    pub end_ms: f64,
    pub lag_ms: f64,
    pub audio_span: (usize, usize),
    pub video_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSample {
    pub id: String,
    pub waveform: Waveform,
    pub audio: AudioFeatureSeq,
    pub video: VisualFeatureSeq,
    /// `M × 2` (AU25, AU26) targets in `[0, 1]`.
    pub au_targets: Tensor,
    pub label: String,
    pub truth: Vec<CharAlignment>,
    /// Per-frame mouth opening and active symbol, kept for image rendering.
    pub mouth: Vec<f64>,
    pub frame_symbol: Vec<Option<char>>,
}

impl UtteranceSample {
    /// Render lip images for the CNN path.
    pub fn render_frames(&self) -> ImageFrameSeq {
        render_frames(&self.mouth, &self.frame_symbol)
    }
}

/// Synthesize one utterance.
pub fn generate_utterance(specs: &[SymbolSpec], text: &str, seed: u64) -> Result<UtteranceSample> {
    if text.is_empty() {
        return Err(Error::Data("empty text".into()));
    }
    Vocabulary.encode(text)?;
    let chars: Vec<&SymbolSpec> = text.chars().map(|c| spec_for(specs, c)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // world-time layout
    let mut spans = Vec::with_capacity(chars.len());
    let mut t = LEAD_IN_S * 1000.0;
    for s in &chars {
        spans.push((t, t + s.audio.duration_ms));
        t += s.audio.duration_ms;
    }
    let world_end_ms = t + TAIL_S * 1000.0;

    // audio: sample 0 sits AUDIO_ORIGIN_S before world time 0
    let origin = AUDIO_ORIGIN_S * 1000.0;
    let total = ((world_end_ms + origin) / 1000.0 * SAMPLE_RATE as f64).round() as usize;
    let mut samples = vec![0.0; total];
    for (s, &(start, _)) in chars.iter().zip(&spans) {
        let first = ((start + origin) / 1000.0 * SAMPLE_RATE as f64).round() as usize;
        for (k, v) in s.audio.render(1.0, 0.0).into_iter().enumerate() {
            if let Some(slot) = samples.get_mut(first + k) {
                *slot += v;
            }
        }
    }
    for v in samples.iter_mut() {
        *v += rng.random_range(-1.0..1.0) * 1e-3;
    }
    let waveform = Waveform::new(samples, SAMPLE_RATE)?;
    let audio = audio::features(&waveform)?;
    let n_audio = audio.len();

    // video frames
    let m = (world_end_ms / (VIDEO_PERIOD_S * 1000.0)).ceil() as usize;
    let mut mouth = vec![0.0; m];
    let mut frame_symbol = vec![None; m];
    let mut feats = vec![0.0; m * VISUAL_DIM];
    for j in 0..m {
        let tj = j as f64 * VIDEO_PERIOD_S * 1000.0;
        let active = chars
            .iter()
            .zip(&spans)
            .rfind(|(s, &(a, b))| tj >= a - s.av_lag_ms && tj < b - s.av_lag_ms);
        let row = &mut feats[j * VISUAL_DIM..(j + 1) * VISUAL_DIM];
        if let Some((s, &(a, b))) = active {
            let u = (tj - (a - s.av_lag_ms)) / (b - a);
            let open = s.video.mouth(u);
            let env = s.video.envelope(u);
            mouth[j] = open;
            frame_symbol[j] = Some(s.ch);
            for (k, r) in row.iter_mut().enumerate() {
                *r = 2.0 * env * s.video.direction[k] + if k < 8 { open } else { 0.0 };
            }
        }
        for r in row.iter_mut() {
            *r += rng.random_range(-1.0..1.0) * 0.05;
        }
    }
    let video = VisualFeatureSeq {
        features: Tensor::new(vec![m, VISUAL_DIM], feats)?,
        frame_period_s: VIDEO_PERIOD_S,
    };
    let au_targets = au_track(&mouth)?;

    let audio_period_ms = audio.frame_period_s * 1000.0;
    let video_period_ms = VIDEO_PERIOD_S * 1000.0;
    let truth = chars
        .iter()
        .zip(&spans)
        .map(|(s, &(a, b))| {
            let span = |lo: f64, hi: f64, period: f64, n: usize| {
                let first = (lo / period).ceil().max(0.0) as usize;
                let last = ((hi / period).ceil().max(0.0) as usize).min(n);
                (first.min(n), last.max(first.min(n)))
            };
            CharAlignment {
                ch: s.ch,
                start_ms: a,
                end_ms: b,
                lag_ms: s.av_lag_ms,
                audio_span: span(a, b, audio_period_ms, n_audio),
                video_span: span(a - s.av_lag_ms, b - s.av_lag_ms, video_period_ms, m),
            }
        })
        .collect();

    Ok(UtteranceSample {
        id: format!("utt{seed:016x}"),
        waveform,
        audio,
        video,
        au_targets,
        label: text.to_string(),
        truth,
        mouth,
        frame_symbol,
    })
}

/// AU25/AU26 targets from a mouth-opening track: 3-frame triangular
/// smoothing, channel gains, then [`normalize_au`].
pub fn au_track(mouth: &[f64]) -> Result<Tensor> {
    let m = mouth.len();
    let mut data = Vec::with_capacity(m * 2);
    for j in 0..m {
        let prev = mouth[j.saturating_sub(1)];
        let next = mouth[(j + 1).min(m - 1)];
        let smooth = 0.25 * prev + 0.5 * mouth[j] + 0.25 * next;
        data.push(normalize_au(4.5 * smooth)?);
        data.push(normalize_au(3.0 * smooth)?);
    }
    Tensor::new(vec![m, 2], data)
}

/// Draw a simple lip image per frame: an ellipse whose height follows the
/// mouth opening, tinted per symbol.
pub fn render_frames(mouth: &[f64], frame_symbol: &[Option<char>]) -> ImageFrameSeq {
    let s = IMAGE_SIZE;
    let mut data = Vec::with_capacity(mouth.len() * s * s * 3);
    for (open, sym) in mouth.iter().zip(frame_symbol) {
        let tint = sym.and_then(|c| Vocabulary.id(c)).unwrap_or(0) as f64 / VOCAB_SIZE as f64;
        let (cx, cy) = (s as f64 / 2.0, s as f64 / 2.0);
        let rx = 10.0 + 4.0 * tint;
        let ry = 1.0 + 9.0 * open;
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r = dx * dx + dy * dy;
                let (red, green, blue) = if r <= 1.0 {
                    (40.0, 10.0, 20.0 + 100.0 * tint)
                } else if r <= 1.8 {
                    (190.0, 70.0 + 60.0 * tint, 80.0)
                } else {
                    (220.0, 170.0, 140.0)
                };
                data.extend_from_slice(&[red, green, blue]);
            }
        }
    }
    ImageFrameSeq {
        frames: Tensor::new(vec![mouth.len().max(1), s, s, 3], if data.is_empty() { vec![0.0; s * s * 3] } else { data })
            .unwrap(),
        frame_period_s: VIDEO_PERIOD_S,
    }
}

/// Pseudo-babble noise: six overlapping streams of randomly pitch-shifted,
/// randomly phased symbol templates.
pub fn babble_noise(specs: &[SymbolSpec], n_samples: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbab_b1e);
    let voiced: Vec<&SymbolSpec> = specs.iter().filter(|s| !s.audio.silent).collect();
    let mut out = vec![0.0; n_samples];
    for _ in 0..6 {
        let mut pos = rng.random_range(0..(SAMPLE_RATE as usize / 5).max(1));
        while pos < n_samples {
            let s = voiced[rng.random_range(0..voiced.len())];
            let pitch = rng.random_range(0.8..1.25);
            let phase = rng.random_range(0.0..2.0 * PI);
            let snippet = s.audio.render(pitch, phase);
            for (k, v) in snippet.iter().enumerate() {
                if let Some(o) = out.get_mut(pos + k) {
                    *o += v;
                }
            }
            pos += snippet.len().max(1);
        }
    }
    Waveform {
        samples: out,
        sample_rate: SAMPLE_RATE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sentences: usize,
    pub test_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Characters sentences are drawn from (confusable characters that appear
    /// here are sampled with `confusable_fraction`).
    pub alphabet: String,
    pub confusable_fraction: f64,
    pub symbols: SymbolConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sentences: 500,
            test_sentences: 100,
            min_len: 5,
            max_len: 12,
            alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
            confusable_fraction: 0.0,
            symbols: SymbolConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub symbols: Vec<SymbolSpec>,
    pub train: Vec<UtteranceSample>,
    pub test: Vec<UtteranceSample>,
}

/// Random texts for a config; disjoint across the whole returned list.
pub fn generate_texts(cfg: &CorpusConfig, specs: &[SymbolSpec], count: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    let alphabet: Vec<char> = cfg.alphabet.chars().collect();
    if alphabet.is_empty() || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config("empty alphabet or bad length range".into()));
    }
    let is_conf = |c: &char| spec_for(specs, *c).map(|s| s.confusable_group.is_some()).unwrap_or(false);
    let conf: Vec<char> = alphabet.iter().copied().filter(is_conf).collect();
    let plain: Vec<char> = alphabet.iter().copied().filter(|c| !is_conf(c)).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 1000 + 1000 {
            return Err(Error::Config("cannot draw enough distinct sentences".into()));
        }
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let text: String = (0..len)
            .map(|_| {
                let pick_conf = !conf.is_empty()
                    && (plain.is_empty() || rng.random_bool(cfg.confusable_fraction.clamp(0.0, 1.0)));
                let pool = if pick_conf { &conf } else { &plain };
                *pool.choose(rng).unwrap()
            })
            .collect();
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    Ok(out)
}

/// Build train and test splits with disjoint sentences.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let symbols = build_symbols(&cfg.symbols, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = generate_texts(cfg, &symbols, cfg.sentences + cfg.test_sentences, &mut rng)?;
    let mut all = Vec::with_capacity(texts.len());
    for (k, text) in texts.iter().enumerate() {
        let mut s = generate_utterance(&symbols, text, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
        s.id = format!("s{seed}_{k:05}");
        all.push(s);
    }
    let test = all.split_off(cfg.sentences);
    Ok(Corpus {
        symbols,
        train: all,
        test,
    })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub audio_path: String,
    pub video_path: String,
    pub au_path: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<CharAlignment>>,
}

pub fn write_sample(dir: &Path, s: &UtteranceSample) -> Result<ManifestRow> {
    std::fs::create_dir_all(dir.join("utts"))?;
    let rel = |ext: &str| format!("utts/{}.{ext}", s.id);
    let (a, v, u) = (rel("wav"), rel("video.avt"), rel("au.avt"));
    s.waveform.write_wav(&dir.join(&a))?;
    crate::visual::write_features(&dir.join(&v), &s.video)?;
    let mut c = Container::new(serde_json::json!({ "frame_period_s": s.video.frame_period_s }));
    c.push("au", s.au_targets.clone());
    c.write(&dir.join(&u))?;
    std::fs::write(dir.join(rel("txt")), &s.label)?;
    Ok(ManifestRow {
        id: s.id.clone(),
        audio_path: a,
        video_path: v,
        au_path: u,
        label: s.label.clone(),
        truth: Some(s.truth.clone()),
    })
}

/// Write `train.json`, `test.json` and `symbols.json` plus per-utterance files.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in [("train", &corpus.train), ("test", &corpus.test)] {
        let rows = split.iter().map(|s| write_sample(dir, s)).collect::<Result<Vec<_>>>()?;
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&rows)?)?;
    }
    std::fs::write(dir.join("symbols.json"), serde_json::to_string_pretty(&corpus.symbols)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let rows: Vec<ManifestRow> = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(rows)
}

/// A sample loaded from disk. Audio is optional so audio-free consumers never
/// touch the WAV; video likewise.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub label: String,
    pub waveform: Option<Waveform>,
    pub video: Option<VisualFeatureSeq>,
    pub au_targets: Option<Tensor>,
    pub truth: Option<Vec<CharAlignment>>,
}

pub fn load_sample(base: &Path, row: &ManifestRow, with_audio: bool, with_video: bool) -> Result<LoadedSample> {
    let p = |r: &str| -> PathBuf { base.join(r) };
    let waveform = with_audio.then(|| Waveform::read_wav(&p(&row.audio_path))).transpose()?;
    let (video, au_targets) = if with_video {
        let v = crate::visual::ingest_features(&p(&row.video_path), VISUAL_DIM)?;
        let au = Container::read(&p(&row.au_path))?
            .get("au")
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: no 'au' tensor", row.au_path)))?;
        if au.rows() != v.len() || au.cols() != 2 {
            return Err(Error::Format(format!(
                "{}: AU track {:?} does not match {} video frames",
                row.au_path,
                au.shape(),
                v.len()
            )));
        }
        if au.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Data(format!("{}: AU targets outside [0, 1]", row.au_path)));
        }
        (Some(v), Some(au))
    } else {
        (None, None)
    };
    Ok(LoadedSample {
        id: row.id.clone(),
        label: row.label.clone(),
        waveform,
        video,
        au_targets,
        truth: row.truth.clone(),
    })
}

/// Shuffle helper used by training; kept here so corpus order stays the one
/// source of sample identity.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
