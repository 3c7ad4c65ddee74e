//! Adam, gradient clipping, staged-SNR curricula and multi-seed trials.

use crate::audio::{self, Waveform};
use crate::autodiff::Gradients;
use crate::corpus::{self, CharAlignment, LoadedSample, ManifestRow, UtteranceSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Example, MemoryEdit, Model, ModelConfig, VideoData};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

/// A curriculum stage: clean speech or a target SNR in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Stage {
    Clean,
    Snr(f64),
}

impl Stage {
    pub fn snr_db(self) -> Option<f64> {
        match self {
            Stage::Clean => None,
            Stage::Snr(s) => Some(s),
        }
    }

    /// Tag stored in checkpoints and reports, e.g. `clean`, `snr10`, `snr-5`.
    pub fn tag(self) -> String {
        match self {
            Stage::Clean => "clean".into(),
            Stage::Snr(s) => format!("snr{s}"),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Clean => f.write_str("clean"),
            Stage::Snr(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("clean") {
            return Ok(Stage::Clean);
        }
        let t = t.strip_prefix("snr").unwrap_or(t);
        t.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Stage::Snr)
            .ok_or_else(|| Error::Config(format!("bad stage '{s}', expected 'clean' or an SNR in dB")))
    }
}

impl TryFrom<serde_json::Value> for Stage {
    type Error = Error;

    fn try_from(v: serde_json::Value) -> Result<Self> {
        match v {
            serde_json::Value::String(s) => s.parse(),
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(Stage::Snr)
                .ok_or_else(|| Error::Config("bad stage number".into())),
            other => Err(Error::Config(format!("bad stage {other}"))),
        }
    }
}

impl From<Stage> for serde_json::Value {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Clean => serde_json::Value::String("clean".into()),
            Stage::Snr(v) => serde_json::json!(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Epoch budget per stage.
    pub max_epochs: usize,
    /// Optional cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
    /// Validation every this many epochs.
    pub eval_every: usize,
    /// Stop a stage after this many evaluations without improvement.
    pub patience: usize,
    pub max_decode_len: usize,
    /// Stop a stage once the mean training loss of an epoch falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 8,
            max_epochs: 20,
            max_steps: None,
            stages: vec![Stage::Clean, Stage::Snr(10.0), Stage::Snr(0.0), Stage::Snr(-5.0)],
            seeds: (0..5).collect(),
            eval_every: 1,
            patience: 5,
            max_decode_len: 64,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let snrs: Vec<f64> = self.stages.iter().filter_map(|s| s.snr_db()).collect();
        let clean_after_noise = self
            .stages
            .iter()
            .position(|s| *s == Stage::Clean)
            .is_some_and(|p| p > 0);
        if clean_after_noise || self.stages.iter().filter(|s| **s == Stage::Clean).count() > 1 {
            return Err(Error::Config("'clean' may only be the first stage".into()));
        }
        if snrs.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("stage SNRs must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; non-trainable parameters are skipped.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            ..Default::default()
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            let shape = p.tensor.shape().to_vec();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(shape));
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One utterance as held by the trainer: the clean waveform (noise is mixed
/// per stage), optional video and AU targets.
#[derive(Clone, Debug)]
pub struct DataSample {
    pub id: String,
    pub label: String,
    pub waveform: Option<Waveform>,
    /// Clean features, used when there is no waveform.
    pub clean_audio: Option<Tensor>,
    pub video: Option<VideoData>,
    pub au_targets: Option<Tensor>,
    pub truth: Option<Vec<CharAlignment>>,
}

impl DataSample {
    pub fn from_utterance(s: &UtteranceSample) -> Self {
        DataSample {
            id: s.id.clone(),
            label: s.label.clone(),
            waveform: Some(s.waveform.clone()),
            clean_audio: Some(s.audio.vectors.clone()),
            video: Some(VideoData::Features(s.video.features.clone())),
            au_targets: Some(s.au_targets.clone()),
            truth: Some(s.truth.clone()),
        }
    }

    pub fn from_loaded(s: LoadedSample) -> Self {
        DataSample {
            id: s.id,
            label: s.label,
            waveform: s.waveform,
            clean_audio: None,
            video: s.video.map(|v| VideoData::Features(v.features)),
            au_targets: s.au_targets,
            truth: s.truth,
        }
    }

    /// Model-ready example at `stage`. `noise` is tiled from `offset`.
    pub fn example(&self, stage: Stage, noise: &Waveform, offset: usize, with_video: bool) -> Result<Example> {
        let audio = match (stage, &self.clean_audio, &self.waveform) {
            (Stage::Clean, Some(a), _) => a.clone(),
            (Stage::Clean, None, Some(w)) => audio::features(w)?.vectors,
            (Stage::Snr(snr), _, Some(w)) => {
                let n = rotate(noise, offset);
                audio::features(&audio::mix_noise(w, &n, snr)?)?.vectors
            }
            _ => return Err(Error::Data(format!("{}: no waveform to mix noise into", self.id))),
        };
        Ok(Example {
            id: self.id.clone(),
            audio,
            video: if with_video { self.video.clone() } else { None },
            au_targets: if with_video { self.au_targets.clone() } else { None },
            label: Vocabulary.encode(&self.label)?,
        })
    }
}

fn rotate(w: &Waveform, offset: usize) -> Waveform {
    let n = w.samples.len().max(1);
    let k = offset % n;
    let mut samples = w.samples[k..].to_vec();
    samples.extend_from_slice(&w.samples[..k]);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Samples plus the noise source used for the noisy stages.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<DataSample>,
    pub noise: Waveform,
}

impl Dataset {
    pub fn from_utterances(samples: &[UtteranceSample], noise: Waveform) -> Self {
        Dataset {
            samples: samples.iter().map(DataSample::from_utterance).collect(),
            noise,
        }
    }

    /// Load a manifest; video files are only opened when `with_video`.
    pub fn load(base: &Path, rows: &[ManifestRow], with_video: bool, noise: Waveform) -> Result<Self> {
        let samples = rows
            .iter()
            .map(|r| corpus::load_sample(base, r, true, with_video).map(DataSample::from_loaded))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, noise })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn examples(&self, stage: Stage, with_video: bool) -> Result<Vec<Example>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(k, s)| s.example(stage, &self.noise, k.wrapping_mul(7919 * 13), with_video))
            .collect()
    }
}

/// Mean loss over `batch` with per-sample gradients averaged, then clipped
/// and applied.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &[&Example], clip_norm: f64) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for ex in batch {
        let (parts, grads) = model.loss_and_grads(ex)?;
        loss += parts.total;
        total.accumulate(&grads);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    let grad_norm = clip_gradients(&mut total, clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {grad_norm}")));
    }
    opt.step(&mut model.params, &total);
    Ok(StepStats {
        loss: loss * scale,
        grad_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub seed: u64,
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    /// Parameters the stage started from.
    pub initial: ParamStore,
    pub checkpoint: Checkpoint,
    pub rows: Vec<EpochRow>,
    pub steps: usize,
}

fn mean_ce(model: &Model, exs: &[Example]) -> Result<f64> {
    let mut s = 0.0;
    for ex in exs {
        s += model.loss(ex)?.ce;
    }
    Ok(s / exs.len().max(1) as f64)
}

/// Train `model` on one stage, starting from its current parameters. With a
/// validation set the best parameters by validation CE are kept.
pub fn run_stage(
    model: &mut Model,
    train: &Dataset,
    valid: Option<&Dataset>,
    stage: Stage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let with_video = model.kind().uses_video();
    let exs = train.examples(stage, with_video)?;
    let vexs = valid.map(|v| v.examples(stage, with_video)).transpose()?;
    let initial = model.params.clone();
    let mut opt = Adam::from_config(cfg);
    let mut rows = Vec::new();
    let mut steps = 0;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = corpus::shuffled_indices(exs.len(), rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &exs[i]).collect();
            let st = train_step(model, &mut opt, &batch, cfg.clip_norm)?;
            sum += st.loss;
            count += 1;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        let train_loss = sum / count as f64;
        let mut row = EpochRow {
            seed,
            stage: stage.tag(),
            epoch,
            steps,
            train_loss,
            valid_ce: None,
        };
        if let Some(v) = &vexs {
            if epoch % cfg.eval_every == 0 {
                let ce = mean_ce(model, v)?;
                row.valid_ce = Some(ce);
                if best.as_ref().is_none_or(|(b, _)| ce < *b) {
                    best = Some((ce, model.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        info!(
            "seed {seed} stage {} epoch {epoch}: loss {train_loss:.4} valid {:?}",
            stage.tag(),
            row.valid_ce
        );
        rows.push(row);
        if stale >= cfg.patience
            || cfg.target_loss.is_some_and(|t| train_loss < t)
            || cfg.max_steps.is_some_and(|m| steps >= m)
        {
            break 'epochs;
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(StageOutcome {
        initial,
        checkpoint: Checkpoint::new(model.clone(), &stage.tag()),
        rows,
        steps,
    })
}

/// Result of a full curriculum for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub stages: Vec<StageOutcome>,
    /// Test CER after each stage, evaluated at that stage's SNR.
    pub test_cer: Vec<f64>,
}

/// Fresh model from `seed`, then every stage in order, each starting from the
/// previous stage's parameters. Checkpoints go to `out_dir` when given.
pub fn run_curriculum(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    valid: Option<&Dataset>,
    test: Option<&Dataset>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrialOutcome> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut stages = Vec::new();
    let mut test_cer = Vec::new();
    for &stage in &cfg.stages {
        let out = run_stage(&mut model, train, valid, stage, cfg, &mut rng, seed)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            out.checkpoint
                .save(&dir.join(format!("{}_seed{seed}_{}.ckpt", model_cfg.kind, stage.tag())))?;
        }
        if let Some(t) = test {
            let exs = t.examples(stage, model.kind().uses_video())?;
            test_cer.push(evaluate_cer(&model, &exs, cfg.max_decode_len)?);
        }
        stages.push(out);
    }
    Ok(TrialOutcome { seed, stages, test_cer })
}

/// Mean greedy-decode CER.
pub fn evaluate_cer(model: &Model, exs: &[Example], max_len: usize) -> Result<f64> {
    if exs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut s = 0.0;
    for ex in exs {
        let d = model.greedy_decode(ex, max_len, &MemoryEdit::None)?;
        s += crate::analysis::cer(&d.text, &Vocabulary.decode(&ex.label))?;
    }
    Ok(s / exs.len() as f64)
}

/// Mean, sample standard deviation and Student-t 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `None` for fewer than two values.
    pub ci95: Option<(f64, f64)>,
}

pub fn summarize(xs: &[f64]) -> Result<Summary> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if xs.is_empty() {
        return Err(Error::Data("no values to summarize".into()));
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok(Summary {
            n,
            mean,
            std: 0.0,
            ci95: None,
        });
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Domain(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * std / (n as f64).sqrt();
    Ok(Summary {
        n,
        mean,
        std,
        ci95: Some((mean - half, mean + half)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub cers: Vec<f64>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub rows: Vec<EpochRow>,
    pub stages: Vec<StageSummary>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    /// Loss curves: one line per (seed, stage, epoch).
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("seed,stage,epoch,steps,train_loss,valid_ce\n");
        for r in &self.rows {
            let v = r.valid_ce.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{:.6},{}\n", r.seed, r.stage, r.epoch, r.steps, r.train_loss, v));
        }
        s
    }

    /// Per-stage CER summary; the interval columns read `n/a` for one seed.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("stage,n,mean_cer,std_cer,ci95_low,ci95_high,cers\n");
        for st in &self.stages {
            let (lo, hi) = match st.summary.ci95 {
                Some((l, h)) => (format!("{l:.6}"), format!("{h:.6}")),
                None => ("n/a".into(), "n/a".into()),
            };
            let cers: Vec<String> = st.cers.iter().map(|c| format!("{c:.6}")).collect();
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{}\n",
                st.stage,
                st.summary.n,
                st.summary.mean,
                st.summary.std,
                lo,
                hi,
                cers.join(";")
            ));
        }
        s
    }
}

/// Independent curricula for every seed in `cfg.seeds`.
pub fn run_trials(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    valid: Option<&Dataset>,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); cfg.stages.len()];
    for &seed in &cfg.seeds {
        let t = run_curriculum(model_cfg, cfg, train, valid, Some(test), seed, out_dir)?;
        for st in &t.stages {
            rows.extend(st.rows.iter().cloned());
        }
        for (k, c) in t.test_cer.iter().enumerate() {
            per_stage[k].push(*c);
        }
    }
    let stages = cfg
        .stages
        .iter()
        .zip(per_stage)
        .map(|(s, cers)| {
            Ok(StageSummary {
                stage: s.tag(),
                summary: summarize(&cers)?,
                cers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        kind: model_cfg.kind.to_string(),
        rows,
        stages,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
