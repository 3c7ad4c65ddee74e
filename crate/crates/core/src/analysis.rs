//! Error rates, alignment diagnostics, control experiments, modality lag and
//! per-sentence error analysis.

use crate::autodiff::Graph;
use crate::corpus::{CharAlignment, Vocabulary, EOS, SOS, VIDEO_PERIOD_S, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::{AlignmentRecord, Decoded, Example, MemoryEdit, Model, VideoData};
use crate::nn::{init_linear, init_lstm, lstm_step, LstmState, LstmVars};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{clip_gradients, Adam};
use crate::visual::ImageFrameSeq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate `edit_distance(hyp, ref) / len(ref)`; may exceed 1.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Data("empty reference".into()));
    }
    let h: Vec<char> = hyp.chars().collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Bilinear resampling of a matrix onto a `rows × cols` grid, corners aligned.
pub fn resample_bilinear(t: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if t.rank() != 2 || rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("cannot resample {:?} to {rows}x{cols}", t.shape())));
    }
    let (r0, c0) = (t.rows(), t.cols());
    let coord = |k: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = k as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (ia, ib, fy) = coord(i, rows, r0);
        for j in 0..cols {
            let (ja, jb, fx) = coord(j, cols, c0);
            let top = t.get2(ia, ja) * (1.0 - fx) + t.get2(ia, jb) * fx;
            let bot = t.get2(ib, ja) * (1.0 - fx) + t.get2(ib, jb) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Average of matrices after resampling each to `rows × cols`.
pub fn mean_matrix(ms: &[&Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if ms.is_empty() {
        return Err(Error::Data("no alignments to aggregate".into()));
    }
    let mut acc = Tensor::zeros(vec![rows, cols]);
    for m in ms {
        acc.add_assign(&resample_bilinear(m, rows, cols)?);
    }
    acc.scale_inplace(1.0 / ms.len() as f64);
    Ok(acc)
}

/// Mean cross-modal alignment over `records` on a `size × size` grid.
pub fn mean_alignment(records: &[AlignmentRecord], size: usize) -> Result<Tensor> {
    let alphas = records
        .iter()
        .map(|r| r.alpha.as_ref().ok_or_else(|| Error::Data("record has no cross-modal alignment".into())))
        .collect::<Result<Vec<_>>>()?;
    mean_matrix(&alphas, size, size)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && xs[idx[e + 1]] == xs[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// sequence is constant or shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn row_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    /// Spearman correlation between `i` and `argmax_j α_ij`, if defined.
    pub score: Option<f64>,
    /// Every row peaks on the same video frame.
    pub collapsed: bool,
}

pub fn monotonicity_score(alpha: &Tensor) -> Monotonicity {
    let peaks = row_argmax(alpha);
    let collapsed = peaks.len() > 1 && peaks.iter().all(|&p| p == peaks[0]);
    let i: Vec<f64> = (0..peaks.len()).map(|k| k as f64).collect();
    let j: Vec<f64> = peaks.iter().map(|&p| p as f64).collect();
    Monotonicity {
        score: spearman(&i, &j),
        collapsed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    /// Mean of `α_{i,1}` over rows.
    pub first_frame_mass: f64,
    /// Mean Shannon entropy of the rows, in nats.
    pub mean_row_entropy: f64,
}

pub fn collapse_diagnostic(alpha: &Tensor) -> CollapseStats {
    let n = alpha.rows() as f64;
    let mut mass = 0.0;
    let mut ent = 0.0;
    for r in 0..alpha.rows() {
        let row = alpha.row_slice(r);
        mass += row[0];
        ent -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    CollapseStats {
        first_frame_mass: mass / n,
        mean_row_entropy: ent / n,
    }
}

/// Clean and corrupted decodes of the same example.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlResult {
    pub clean: Decoded,
    pub control: Decoded,
    /// Video memory length before and after the corruption.
    pub memory_len: (usize, usize),
}

impl ControlResult {
    /// Largest absolute difference between the clean and corrupted alpha,
    /// when both exist and have the same shape.
    pub fn alpha_max_diff(&self) -> Option<f64> {
        let (a, b) = (self.clean.record.alpha.as_ref()?, self.control.record.alpha.as_ref()?);
        a.zip_map(b, |x, y| (x - y).abs()).ok().map(|d| d.max_abs())
    }
}

fn video_len(ex: &Example) -> usize {
    ex.video.as_ref().map_or(0, |v| v.len())
}

/// Replace the video memory by uniform noise over its own value range.
pub fn control_random_memory(model: &Model, ex: &Example, seed: u64, max_len: usize) -> Result<ControlResult> {
    let m = video_len(ex);
    Ok(ControlResult {
        clean: model.greedy_decode(ex, max_len, &MemoryEdit::None)?,
        control: model.greedy_decode(ex, max_len, &MemoryEdit::RandomUniform { seed })?,
        memory_len: (m, m),
    })
}

/// Reverse the time axis of the video memory after encoding.
pub fn control_time_reverse(model: &Model, ex: &Example, max_len: usize) -> Result<ControlResult> {
    let m = video_len(ex);
    Ok(ControlResult {
        clean: model.greedy_decode(ex, max_len, &MemoryEdit::None)?,
        control: model.greedy_decode(ex, max_len, &MemoryEdit::Reverse)?,
        memory_len: (m, m),
    })
}

/// Number of blank frames covering `seconds` of video.
pub fn blank_frames(seconds: f64) -> usize {
    (seconds / VIDEO_PERIOD_S).round() as usize
}

/// Copy of `ex` with `pre` and `post` blank video frames around the original
/// ones: zero feature vectors, or black images in frame mode.
pub fn with_blank_ends(ex: &Example, pre: usize, post: usize) -> Result<Example> {
    let video = ex.video.as_ref().ok_or_else(|| Error::Data(format!("{}: no video", ex.id)))?;
    let pad = |t: &Tensor, unit: usize| -> Result<Tensor> {
        let mut d = vec![0.0; pre * unit];
        d.extend_from_slice(t.data());
        d.extend(std::iter::repeat_n(0.0, post * unit));
        let mut shape = t.shape().to_vec();
        shape[0] += pre + post;
        Tensor::new(shape, d)
    };
    let video = match video {
        VideoData::Features(t) => VideoData::Features(pad(t, t.cols())?),
        VideoData::Frames(f) => {
            let unit = f.frames.len() / f.len();
            VideoData::Frames(ImageFrameSeq {
                frames: pad(&f.frames, unit)?,
                frame_period_s: f.frame_period_s,
            })
        }
    };
    Ok(Example {
        video: Some(video),
        au_targets: None,
        ..ex.clone()
    })
}

/// Prepend `pre_s` and append `post_s` seconds of blank video (0 to 4 s).
pub fn control_blank_ends(model: &Model, ex: &Example, pre_s: f64, post_s: f64, max_len: usize) -> Result<ControlResult> {
    for s in [pre_s, post_s] {
        if !(0.0..=4.0).contains(&s) {
            return Err(Error::Config(format!("blank segment of {s} s outside [0, 4]")));
        }
    }
    let padded = with_blank_ends(ex, blank_frames(pre_s), blank_frames(post_s))?;
    Ok(ControlResult {
        clean: model.greedy_decode(ex, max_len, &MemoryEdit::None)?,
        control: model.greedy_decode(&padded, max_len, &MemoryEdit::None)?,
        memory_len: (video_len(ex), video_len(&padded)),
    })
}

/// Which axis the lag is estimated along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LagMode {
    /// One estimate per audio frame from its attention row.
    #[default]
    Row,
    /// One estimate per video frame from its (renormalised) column.
    Col,
}

impl FromStr for LagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(LagMode::Row),
            "col" => Ok(LagMode::Col),
            _ => Err(Error::Config(format!("unknown lag mode '{s}'"))),
        }
    }
}

/// Signed lag per frame; positive means the video leads the audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagTrace {
    pub mode: LagMode,
    pub audio_period_s: f64,
    pub video_period_s: f64,
    /// Frame times in seconds along the estimated axis.
    pub time_s: Vec<f64>,
    /// `None` where the row or column carries no attention mass.
    pub lag_ms: Vec<Option<f64>>,
    /// Weighted variance of the attended index, in frames².
    pub variance: Vec<Option<f64>>,
}

impl LagTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,time_s,lag_ms\n");
        for (k, (t, l)) in self.time_s.iter().zip(&self.lag_ms).enumerate() {
            let l = l.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(s, "{k},{t:.4},{l}");
        }
        s
    }
}

fn weighted_moments(w: impl Iterator<Item = (f64, f64)> + Clone) -> Option<(f64, f64)> {
    let total: f64 = w.clone().map(|(_, p)| p).sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mean = w.clone().map(|(x, p)| x * p).sum::<f64>() / total;
    let var = w.map(|(x, p)| p * (x - mean).powi(2)).sum::<f64>() / total;
    Some((mean, var))
}

/// Weighted-centroid lag estimate from a cross-modal alignment.
///
/// Row mode: `lag(i) = i·T_a − ĵ_i·T_v` with `ĵ_i = Σ_j α_ij j`.
/// Column mode: `lag(j) = î_j·T_a − j·T_v` with `î_j` the centroid of column
/// `j` after normalising it to unit mass.
pub fn modality_lag(alpha: &Tensor, audio_period_s: f64, video_period_s: f64, mode: LagMode) -> Result<LagTrace> {
    if !(audio_period_s > 0.0 && video_period_s > 0.0) {
        return Err(Error::Domain("frame periods must be positive".into()));
    }
    if alpha.rank() != 2 {
        return Err(Error::Dimension(format!("alpha must be a matrix, got {:?}", alpha.shape())));
    }
    let (n, m) = (alpha.rows(), alpha.cols());
    let (mut time_s, mut lag_ms, mut variance) = (Vec::new(), Vec::new(), Vec::new());
    match mode {
        LagMode::Row => {
            for i in 0..n {
                let row = alpha.row_slice(i);
                let mom = weighted_moments(row.iter().enumerate().map(|(j, &p)| (j as f64, p)));
                time_s.push(i as f64 * audio_period_s);
                lag_ms.push(mom.map(|(c, _)| (i as f64 * audio_period_s - c * video_period_s) * 1e3));
                variance.push(mom.map(|(_, v)| v));
            }
        }
        LagMode::Col => {
            for j in 0..m {
                let mom = weighted_moments((0..n).map(|i| (i as f64, alpha.get2(i, j))));
                time_s.push(j as f64 * video_period_s);
                lag_ms.push(mom.map(|(c, _)| (c * audio_period_s - j as f64 * video_period_s) * 1e3));
                variance.push(mom.map(|(_, v)| v));
            }
        }
    }
    Ok(LagTrace {
        mode,
        audio_period_s,
        video_period_s,
        time_s,
        lag_ms,
        variance,
    })
}

/// Injected versus recovered lag of one symbol occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolLag {
    pub ch: char,
    pub injected_ms: f64,
    /// Median row-mode lag over the symbol's audio frames.
    pub recovered_ms: Option<f64>,
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[k] } else { (xs[k - 1] + xs[k]) / 2.0 })
}

/// Compare a row-mode trace with the ground-truth spans of an utterance.
pub fn symbol_lags(trace: &LagTrace, truth: &[CharAlignment]) -> Result<Vec<SymbolLag>> {
    if trace.mode != LagMode::Row {
        return Err(Error::Config("symbol lags need a row-mode trace".into()));
    }
    Ok(truth
        .iter()
        .map(|t| {
            let (a, b) = t.audio_span;
            let mut v: Vec<f64> = trace.lag_ms[a.min(trace.lag_ms.len())..b.min(trace.lag_ms.len())]
                .iter()
                .flatten()
                .copied()
                .collect();
            SymbolLag {
                ch: t.ch,
                injected_ms: t.lag_ms,
                recovered_ms: median(&mut v),
            }
        })
        .collect())
}

/// Decoding result of one system on one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceDelta {
    pub id: String,
    pub sentence: String,
    pub predictability: f64,
    pub audio_prediction: String,
    pub av_prediction: String,
    pub cer_audio: f64,
    pub cer_av: f64,
    /// `cer_audio − cer_av`; positive means the audio-visual system is better.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Sorted by predictability, most predictable (lowest LM cross-entropy)
    /// first.
    pub rows: Vec<SentenceDelta>,
    /// `(threshold, fraction of sentences with δ ≥ threshold)` for thresholds
    /// from 0 upward.
    pub cdf: Vec<(f64, f64)>,
}

impl DeltaReport {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("id,sentence,ce,audio_prediction,av_prediction,cer_audio,cer_av,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{},{:.6},{:.6},{:.6}",
                r.id, r.sentence, r.predictability, r.audio_prediction, r.av_prediction, r.cer_audio, r.cer_av, r.delta
            );
        }
        s
    }

    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in &self.cdf {
            let _ = writeln!(s, "{t:.6},{f:.6}");
        }
        s
    }
}

/// Per-sentence error differences between an audio-only and an audio-visual
/// system on the same test set, ranked by language-model predictability.
pub fn error_delta_report(audio: &[UtteranceResult], av: &[UtteranceResult], lm: &CharLm) -> Result<DeltaReport> {
    if audio.len() != av.len() {
        return Err(Error::Data(format!("{} audio results vs {} audio-visual results", audio.len(), av.len())));
    }
    let by_id: HashMap<&str, &UtteranceResult> = av.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut rows = Vec::with_capacity(audio.len());
    for a in audio {
        let v = by_id
            .get(a.id.as_str())
            .ok_or_else(|| Error::Data(format!("utterance {} missing from the audio-visual run", a.id)))?;
        if v.reference != a.reference {
            return Err(Error::Data(format!("utterance {} has different references", a.id)));
        }
        rows.push(SentenceDelta {
            id: a.id.clone(),
            sentence: a.reference.clone(),
            predictability: lm.score(&a.reference)?,
            audio_prediction: a.hypothesis.clone(),
            av_prediction: v.hypothesis.clone(),
            cer_audio: a.cer,
            cer_av: v.cer,
            delta: a.cer - v.cer,
        });
    }
    rows.sort_by(|x, y| x.predictability.total_cmp(&y.predictability).then(x.id.cmp(&y.id)));
    let cdf = delta_cdf(&rows.iter().map(|r| r.delta).collect::<Vec<_>>());
    Ok(DeltaReport { rows, cdf })
}

/// Fraction of values at or above each threshold in `{0} ∪ {δ > 0}`.
pub fn delta_cdf(deltas: &[f64]) -> Vec<(f64, f64)> {
    let n = deltas.len().max(1) as f64;
    let mut ts: Vec<f64> = deltas.iter().copied().filter(|&d| d > 0.0).collect();
    ts.push(0.0);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.into_iter()
        .map(|t| (t, deltas.iter().filter(|&&d| d >= t).count() as f64 / n))
        .collect()
}

/// Character-level LSTM language model over the 31-id vocabulary, fed the
/// previous character only.
#[derive(Clone, Debug, PartialEq)]
pub struct CharLm {
    pub params: ParamStore,
    pub hidden: usize,
}

impl CharLm {
    /// Random LSTM with a zero output layer, so every prediction is uniform.
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_lstm(&mut params, "lm.lstm", VOCAB_SIZE, hidden, &mut rng);
        init_linear(&mut params, "lm.out", hidden, VOCAB_SIZE, &mut rng);
        params.get_mut("lm.out.w").unwrap().data_mut().fill(0.0);
        CharLm { params, hidden }
    }

    fn loss(&self, g: &mut Graph, text: &str) -> Result<crate::autodiff::Var> {
        let ids = Vocabulary.encode(text)?;
        if ids.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        let p = LstmVars::load(g, &self.params, "lm.lstm")?;
        let ow = g.param(&self.params, "lm.out.w")?;
        let ob = g.param(&self.params, "lm.out.b")?;
        let mut state = LstmState::zeros(g, self.hidden);
        let mut inputs = vec![SOS];
        inputs.extend(&ids);
        let mut targets = ids;
        targets.push(EOS);
        let mut logits = Vec::with_capacity(inputs.len());
        for &y in &inputs {
            let wy = g.narrow(p.wx, 0, y, 1)?;
            let x = g.add(wy, p.b)?;
            state = lstm_step(g, &p, x, state)?;
            let hw = g.matmul(state.h, ow)?;
            logits.push(g.add_row(hw, ob)?);
        }
        let l = g.concat(&logits, 0)?;
        crate::model::ce_loss(g, l, &targets)
    }

    /// Mean `−log p(char)` in nats over the sentence and its EOS.
    pub fn score(&self, text: &str) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, text)?;
        Ok(g.value(l).item())
    }

    /// Adam on one sentence per step, cycling through `labels` for `epochs`.
    pub fn train(&mut self, labels: &[String], epochs: usize, lr: f64) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Data("no training sentences".into()));
        }
        let mut opt = Adam::new(lr, 0.9, 0.999, 1e-8);
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let mut sum = 0.0;
            for s in labels {
                let mut g = Graph::new();
                let l = self.loss(&mut g, s)?;
                sum += g.value(l).item();
                let mut grads = g.backward(l)?;
                clip_gradients(&mut grads, 1.0);
                opt.step(&mut self.params, &grads);
            }
            last = sum / labels.len() as f64;
            if !last.is_finite() {
                return Err(Error::Divergence("language model loss is not finite".into()));
            }
        }
        Ok(last)
    }
}

/// Train a character LM on the training-split labels.
pub fn char_lm(train_labels: &[String], hidden: usize, epochs: usize, seed: u64) -> Result<CharLm> {
    let mut lm = CharLm::new(hidden, seed);
    lm.train(train_labels, epochs, 1e-2)?;
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionVariant, ModelConfig, ModelKind};

    fn diag(n: usize) -> Tensor {
        Tensor::eye(n)
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("hello", "hello").unwrap(), 0.0);
        assert!((cer("kitten", "sitting").unwrap() - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(cer("aaaa", "a").unwrap(), 3.0);
        assert!(cer("x", "").is_err());
    }

    #[test]
    fn resampling_identity_and_interpolation() {
        let t = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resample_bilinear(&t, 2, 2).unwrap(), t);
        let r = resample_bilinear(&t, 3, 3).unwrap();
        assert_eq!(r.get2(1, 1), 1.5);
        assert_eq!(r.get2(0, 1), 0.5);
    }

    #[test]
    fn mean_of_transposed_diagonals_is_symmetric() {
        let a = Tensor::from_fn(vec![4, 4], |k| if k % 4 == 0 && k / 4 < 2 { 1.0 } else { 0.0 });
        let b = a.transpose();
        let m = mean_matrix(&[&a, &b], 8, 8).unwrap();
        assert!(m.zip_map(&m.transpose(), |x, y| (x - y).abs()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn monotonicity_cases() {
        assert_eq!(monotonicity_score(&diag(5)).score, Some(1.0));
        let anti = diag(5).flip_rows();
        assert_eq!(monotonicity_score(&anti).score, Some(-1.0));
        let collapse = Tensor::from_fn(vec![4, 3], |k| if k % 3 == 0 { 1.0 } else { 0.0 });
        let m = monotonicity_score(&collapse);
        assert_eq!(m.score, None);
        assert!(m.collapsed);
        assert_eq!(monotonicity_score(&Tensor::row(vec![0.2, 0.8])).score, None);
    }

    #[test]
    fn collapse_statistics() {
        let collapse = Tensor::from_fn(vec![4, 3], |k| if k % 3 == 0 { 1.0 } else { 0.0 });
        let c = collapse_diagnostic(&collapse);
        assert_eq!((c.first_frame_mass, c.mean_row_entropy), (1.0, 0.0));
        let u = collapse_diagnostic(&Tensor::full(vec![3, 4], 0.25));
        assert!((u.first_frame_mass - 0.25).abs() < 1e-15);
        assert!((u.mean_row_entropy - 4f64.ln()).abs() < 1e-12);
        assert!((collapse_diagnostic(&diag(4)).first_frame_mass - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lag_examples() {
        let t = modality_lag(&diag(4), 0.04, 0.04, LagMode::Row).unwrap();
        assert!(t.lag_ms.iter().all(|l| l.unwrap().abs() < 1e-9));
        let a = Tensor::row(vec![0.0, 1.0, 0.0, 0.0]);
        let t = modality_lag(&a, 0.03, 0.04, LagMode::Row).unwrap();
        assert!((t.lag_ms[0].unwrap() + 40.0).abs() < 1e-9);
        let u = Tensor::full(vec![3, 5], 0.2);
        let t = modality_lag(&u, 0.03, 0.04, LagMode::Row).unwrap();
        for (i, l) in t.lag_ms.iter().enumerate() {
            assert!((l.unwrap() - (i as f64 * 30.0 - 2.0 * 40.0)).abs() < 1e-9);
        }
        let c = modality_lag(&diag(3), 0.04, 0.04, LagMode::Col).unwrap();
        assert_eq!(c.lag_ms.len(), 3);
        assert!(c.lag_ms.iter().all(|l| l.unwrap().abs() < 1e-9));
        assert!(modality_lag(&u, 0.0, 0.04, LagMode::Row).is_err());
    }

    #[test]
    fn delta_report_identities() {
        let lm = CharLm::new(4, 0);
        let mk = |id: &str, r: &str, h: &str| UtteranceResult {
            id: id.into(),
            reference: r.into(),
            hypothesis: h.into(),
            cer: cer(h, r).unwrap(),
        };
        let a = vec![mk("1", "abc", "abd"), mk("2", "hello", "help")];
        let same = error_delta_report(&a, &a, &lm).unwrap();
        assert!(same.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(same.cdf, vec![(0.0, 1.0)]);
        let v = vec![mk("2", "hello", "hello"), mk("1", "abc", "abc")];
        let rep = error_delta_report(&a, &v, &lm).unwrap();
        let mean_delta = rep.rows.iter().map(|r| r.delta).sum::<f64>() / 2.0;
        let ma = a.iter().map(|r| r.cer).sum::<f64>() / 2.0;
        let mv = v.iter().map(|r| r.cer).sum::<f64>() / 2.0;
        assert!((mean_delta - (ma - mv)).abs() < 1e-12);
        assert!(rep.cdf.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 > w[0].0));
        assert!(error_delta_report(&a, &v[..1], &lm).is_err());
    }

    #[test]
    fn untrained_lm_is_uniform() {
        let lm = CharLm::new(8, 3);
        assert!((lm.score("hello world").unwrap() - 31f64.ln()).abs() < 1e-12);
        assert!(lm.score("").is_err());
    }

    #[test]
    fn lm_learns_a_repeated_sentence() {
        let s = vec!["the cat".to_string()];
        let lm = char_lm(&s, 16, 400, 1).unwrap();
        let memorised = lm.score("the cat").unwrap();
        assert!(memorised < 0.05, "{memorised}");
        assert!(lm.score("qzx jkv").unwrap() > memorised);
    }

    #[test]
    fn blank_ends_grow_memory() {
        let m = Model::new(ModelConfig::micro(ModelKind::AvAlign, FusionVariant::Baseline), 0).unwrap();
        let ex = Example {
            id: "b".into(),
            audio: Tensor::full(vec![3, 3], 0.1),
            video: Some(VideoData::Features(Tensor::full(vec![2, 3], 0.5))),
            au_targets: None,
            label: vec![3],
        };
        let r = control_blank_ends(&m, &ex, 1.0, 1.0, 4).unwrap();
        assert_eq!(r.memory_len, (2, 52));
        assert_eq!(r.control.record.alpha.as_ref().unwrap().cols(), 52);
        let same = control_blank_ends(&m, &ex, 0.0, 0.0, 4).unwrap();
        assert_eq!(same.clean, same.control);
        assert!(control_blank_ends(&m, &ex, 5.0, 0.0, 4).is_err());
    }
}
