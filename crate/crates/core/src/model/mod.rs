//! Audio-visual sequence-to-sequence models.
//!
//! Three architectures share one parameter layout convention and one
//! character decoder:
//!
//! * **audio**: LSTM audio encoder, attention decoder over `o_A`;
//! * **AV Align**: the top audio LSTM (`av_lstm`) attends over the video
//!   encoder outputs at every audio step and fuses the visual context into
//!   `o_AV`, which the decoder attends to;
//! * **AV Cat**: independent encoders, the decoder runs one attention per
//!   modality and concatenates both contexts.
//!
//! The `_au` kinds add a sigmoid Action Unit head on the video encoder outputs
//! and a λ-weighted squared-error loss.

mod alignment;
mod avalign;
mod avcat;
mod checkpoint;
pub mod fusion;

pub use alignment::AlignmentRecord;
pub use avalign::{
    attend, au_head, au_loss, av_attend_encode, ce_loss, cross_entropy_from_probs, decode_step,
    encode_audio, encode_video, CrossModal, DecoderState, DecoderVars, StepOutput,
};
pub use avcat::avcat_decode_step;
pub use checkpoint::Checkpoint;
pub use fusion::{fuse, FusionVariant};

use crate::autodiff::{Gradients, Graph, Var};
use crate::corpus::{UtteranceSample, Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_lstm, LstmState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::visual::{init_cnn, CnnConfig, ImageFrameSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Audio,
    AvAlign,
    AvAlignAu,
    AvCat,
    AvCatAu,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Audio,
        ModelKind::AvAlign,
        ModelKind::AvAlignAu,
        ModelKind::AvCat,
        ModelKind::AvCatAu,
    ];

    pub fn uses_video(self) -> bool {
        self != ModelKind::Audio
    }

    pub fn au_enabled(self) -> bool {
        matches!(self, ModelKind::AvAlignAu | ModelKind::AvCatAu)
    }

    pub fn is_align(self) -> bool {
        matches!(self, ModelKind::AvAlign | ModelKind::AvAlignAu)
    }

    pub fn is_cat(self) -> bool {
        matches!(self, ModelKind::AvCat | ModelKind::AvCatAu)
    }

    /// Same architecture with the AU loss switched on or off.
    pub fn with_au(self, on: bool) -> ModelKind {
        match (self, on) {
            (ModelKind::AvAlign | ModelKind::AvAlignAu, true) => ModelKind::AvAlignAu,
            (ModelKind::AvAlign | ModelKind::AvAlignAu, false) => ModelKind::AvAlign,
            (ModelKind::AvCat | ModelKind::AvCatAu, true) => ModelKind::AvCatAu,
            (ModelKind::AvCat | ModelKind::AvCatAu, false) => ModelKind::AvCat,
            (ModelKind::Audio, _) => ModelKind::Audio,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Audio => "audio",
            ModelKind::AvAlign => "av_align",
            ModelKind::AvAlignAu => "av_align_au",
            ModelKind::AvCat => "av_cat",
            ModelKind::AvCatAu => "av_cat_au",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub audio_layers: usize,
    pub video_layers: usize,
    pub hidden: usize,
    /// Width of the video encoder; a learned projection maps it to `hidden`
    /// before attention scoring when the two differ.
    pub video_hidden: usize,
    pub vocab: usize,
    pub fusion: FusionVariant,
    pub au_lambda: f64,
    /// `Some` runs the residual CNN on raw frames; `None` consumes
    /// precomputed per-frame features.
    pub cnn: Option<CnnConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::AvAlignAu,
            audio_dim: crate::audio::FEATURE_DIM,
            video_dim: crate::visual::VISUAL_DIM,
            audio_layers: 3,
            video_layers: 1,
            hidden: 256,
            video_hidden: 256,
            vocab: crate::corpus::VOCAB_SIZE,
            fusion: FusionVariant::Baseline,
            au_lambda: 10.0,
            cnn: None,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: single-layer encoders, 32 units.
    pub fn toy(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            audio_layers: 1,
            hidden: 32,
            video_hidden: 32,
            ..Default::default()
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn micro(kind: ModelKind, fusion: FusionVariant) -> Self {
        ModelConfig {
            kind,
            audio_dim: 3,
            video_dim: 3,
            audio_layers: 1,
            video_layers: 1,
            hidden: 4,
            video_hidden: 4,
            vocab: 6,
            fusion,
            au_lambda: 10.0,
            cnn: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.video_hidden == 0 || self.audio_layers == 0 || self.video_layers == 0 {
            return Err(Error::Config("layer counts and widths must be positive".into()));
        }
        if self.vocab <= EOS {
            return Err(Error::Config("vocabulary must include PAD, SOS and EOS".into()));
        }
        if let Some(c) = &self.cnn {
            if c.out_dim != self.video_dim {
                return Err(Error::Config("CNN output width must equal video_dim".into()));
            }
            crate::visual::validate_geometry(c)?;
        }
        Ok(())
    }
}

/// Video input: precomputed features (`M × video_dim`) or raw frames.
#[derive(Clone, Debug, PartialEq)]
pub enum VideoData {
    Features(Tensor),
    Frames(ImageFrameSeq),
}

impl VideoData {
    pub fn len(&self) -> usize {
        match self {
            VideoData::Features(t) => t.rows(),
            VideoData::Frames(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model-ready training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `N × audio_dim`.
    pub audio: Tensor,
    pub video: Option<VideoData>,
    /// `M × 2`.
    pub au_targets: Option<Tensor>,
    /// Label ids without SOS/EOS.
    pub label: Vec<usize>,
}

impl Example {
    pub fn from_sample(s: &UtteranceSample) -> Result<Self> {
        Ok(Example {
            id: s.id.clone(),
            audio: s.audio.vectors.clone(),
            video: Some(VideoData::Features(s.video.features.clone())),
            au_targets: Some(s.au_targets.clone()),
            label: Vocabulary.encode(&s.label)?,
        })
    }

    /// Decoder input ids (SOS + label) and targets (label + EOS).
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = vec![SOS];
        inputs.extend(&self.label);
        let mut targets = self.label.clone();
        targets.push(EOS);
        (inputs, targets)
    }
}

/// Inference-time edit of the video memory after encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum MemoryEdit {
    #[default]
    None,
    /// Reverse the time axis of `o_V`.
    Reverse,
    /// Replace `o_V` by uniform noise over its own value range.
    RandomUniform { seed: u64 },
}

/// Scalar loss breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub au: Option<f64>,
}

/// Graph handles produced by a teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub ce: Var,
    pub au: Option<Var>,
    pub o_a: Var,
    pub o_v: Option<Var>,
    pub o_av: Option<Var>,
    pub record: AlignmentRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub text: String,
    pub record: AlignmentRecord,
}

/// Parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub(crate) struct Encoded {
    pub o_a: Var,
    pub o_v: Option<Var>,
    pub memory_v: Option<Var>,
    pub o_av: Option<Var>,
    pub dec_init: LstmState,
    pub alpha: Option<Tensor>,
}

impl Model {
    /// Fresh parameters: Glorot-uniform weights, zero biases, forget-gate
    /// bias +1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub(crate) fn encode(&self, g: &mut Graph, ex: &Example, edit: &MemoryEdit) -> Result<Encoded> {
        let cfg = &self.config;
        let store = &self.params;
        if ex.audio.rank() != 2 || ex.audio.cols() != cfg.audio_dim {
            return Err(Error::Dimension(format!(
                "audio {:?}, expected N x {}",
                ex.audio.shape(),
                cfg.audio_dim
            )));
        }
        let audio = g.input(ex.audio.clone());
        let (o_a, audio_final) = encode_audio(g, store, audio, cfg.audio_layers)?;
        if !cfg.kind.uses_video() {
            return Ok(Encoded {
                o_a,
                o_v: None,
                memory_v: None,
                o_av: None,
                dec_init: audio_final,
                alpha: None,
            });
        }
        let video = ex
            .video
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: model '{}' needs video", ex.id, cfg.kind)))?;
        let v = match (video, &cfg.cnn) {
            (VideoData::Features(t), _) => {
                if t.cols() != cfg.video_dim {
                    return Err(Error::Dimension(format!(
                        "video features {:?}, expected M x {}",
                        t.shape(),
                        cfg.video_dim
                    )));
                }
                g.input(t.clone())
            }
            (VideoData::Frames(frames), Some(cnn)) => crate::visual::cnn_forward(g, store, "cnn", cnn, frames)?,
            (VideoData::Frames(_), None) => {
                return Err(Error::Config("raw frames given but the model has no CNN".into()))
            }
        };
        let (o_v, _) = encode_video(g, store, v, cfg.video_layers)?;
        let edited = match edit {
            MemoryEdit::None => o_v,
            MemoryEdit::Reverse => g.flip_rows(o_v),
            MemoryEdit::RandomUniform { seed } => {
                let t = g.value(o_v);
                let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let noise = Tensor::from_fn(t.shape().to_vec(), |_| {
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                });
                g.input(noise)
            }
        };
        let memory_v = if store.contains("video_proj.w") {
            let w = g.param(store, "video_proj.w")?;
            g.matmul(edited, w)?
        } else {
            edited
        };
        if cfg.kind.is_align() {
            let cm = av_attend_encode(g, store, cfg.fusion, o_a, memory_v)?;
            let alpha_rows: Vec<&Tensor> = cm.alpha.iter().map(|&a| g.value(a)).collect();
            let alpha = Tensor::concat_rows(&alpha_rows)?;
            Ok(Encoded {
                o_a,
                o_v: Some(o_v),
                memory_v: Some(memory_v),
                o_av: Some(cm.o_av),
                dec_init: cm.final_state,
                alpha: Some(alpha),
            })
        } else {
            Ok(Encoded {
                o_a,
                o_v: Some(o_v),
                memory_v: Some(memory_v),
                o_av: None,
                dec_init: audio_final,
                alpha: None,
            })
        }
    }

    fn memories(&self, enc: &Encoded) -> Vec<Var> {
        if self.config.kind.is_align() {
            vec![enc.o_av.unwrap()]
        } else if self.config.kind.is_cat() {
            vec![enc.o_a, enc.memory_v.unwrap()]
        } else {
            vec![enc.o_a]
        }
    }

    /// Teacher-forced forward pass building the total loss.
    pub fn forward(&self, g: &mut Graph, ex: &Example, edit: &MemoryEdit) -> Result<Forward> {
        if ex.label.is_empty() {
            return Err(Error::Data(format!("{}: empty label", ex.id)));
        }
        let enc = self.encode(g, ex, edit)?;
        let mems = self.memories(&enc);
        let dec = DecoderVars::load(g, &self.params)?;
        let (inputs, targets) = ex.teacher_forcing();
        let mut state = DecoderState::new(enc.dec_init);
        let mut logits = Vec::with_capacity(inputs.len());
        let mut betas: Vec<Vec<Var>> = vec![Vec::new(); mems.len()];
        for &y in &inputs {
            let step = decode_step(g, &dec, y, state, &mems)?;
            logits.push(step.logits);
            for (b, r) in betas.iter_mut().zip(step.betas) {
                b.push(r);
            }
            state = step.state;
        }
        let logits = g.concat(&logits, 0)?;
        let ce = ce_loss(g, logits, &targets)?;
        let au = if self.config.kind.au_enabled() {
            let targets = ex
                .au_targets
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: AU loss enabled but no AU targets", ex.id)))?;
            let pred = au_head(g, &self.params, enc.o_v.unwrap())?;
            let tgt = g.input(targets.clone());
            Some(au_loss(g, pred, tgt, self.config.au_lambda)?)
        } else {
            None
        };
        let loss = match au {
            Some(a) => g.add(ce, a)?,
            None => ce,
        };
        let record = self.record(g, &enc, &betas)?;
        Ok(Forward {
            loss,
            ce,
            au,
            o_a: enc.o_a,
            o_v: enc.o_v,
            o_av: enc.o_av,
            record,
        })
    }

    fn record(&self, g: &Graph, enc: &Encoded, betas: &[Vec<Var>]) -> Result<AlignmentRecord> {
        let stack = |rows: &[Var]| -> Result<Tensor> {
            let ts: Vec<&Tensor> = rows.iter().map(|&r| g.value(r)).collect();
            Tensor::concat_rows(&ts)
        };
        Ok(AlignmentRecord {
            alpha: enc.alpha.clone(),
            beta: stack(&betas[0])?,
            beta_video: if betas.len() > 1 { Some(stack(&betas[1])?) } else { None },
        })
    }

    /// Loss breakdown and parameter gradients for one example.
    pub fn loss_and_grads(&self, ex: &Example) -> Result<(LossParts, Gradients)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, ex, &MemoryEdit::None)?;
        let parts = LossParts {
            total: g.value(f.loss).item(),
            ce: g.value(f.ce).item(),
            au: f.au.map(|a| g.value(a).item()),
        };
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!("{}: loss is {}", ex.id, parts.total)));
        }
        let grads = g.backward(f.loss)?;
        Ok((parts, grads))
    }

    pub fn loss(&self, ex: &Example) -> Result<LossParts> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, ex, &MemoryEdit::None)?;
        Ok(LossParts {
            total: g.value(f.loss).item(),
            ce: g.value(f.ce).item(),
            au: f.au.map(|a| g.value(a).item()),
        })
    }

    /// Greedy decoding from SOS until EOS or `max_len` steps; ties go to the
    /// lowest id.
    pub fn greedy_decode(&self, ex: &Example, max_len: usize, edit: &MemoryEdit) -> Result<Decoded> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, ex, edit)?;
        let mems = self.memories(&enc);
        let dec = DecoderVars::load(&mut g, &self.params)?;
        let mut state = DecoderState::new(enc.dec_init);
        let mut y = SOS;
        let mut ids = Vec::new();
        let mut betas: Vec<Vec<Var>> = vec![Vec::new(); mems.len()];
        for _ in 0..max_len {
            let step = decode_step(&mut g, &dec, y, state, &mems)?;
            for (b, r) in betas.iter_mut().zip(step.betas) {
                b.push(r);
            }
            state = step.state;
            let row = g.value(step.logits).data();
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == EOS {
                break;
            }
            ids.push(best);
            y = best;
        }
        let record = if betas[0].is_empty() {
            AlignmentRecord {
                alpha: enc.alpha.clone(),
                beta: Tensor::zeros(vec![1, g.value(mems[0]).rows()]),
                beta_video: None,
            }
        } else {
            self.record(&g, &enc, &betas)?
        };
        Ok(Decoded {
            text: Vocabulary.decode(&ids),
            ids,
            record,
        })
    }

    /// Video encoder outputs `o_V` (no edits), for inspection.
    pub fn video_encoding(&self, ex: &Example) -> Result<Option<Tensor>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, ex, &MemoryEdit::None)?;
        Ok(enc.o_v.map(|v| g.value(v).clone()))
    }

    /// Audio encoder outputs `o_A`, for inspection.
    pub fn audio_encoding(&self, ex: &Example, edit: &MemoryEdit) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, ex, edit)?;
        Ok(g.value(enc.o_a).clone())
    }
}

fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let n = cfg.hidden;
    for l in 0..cfg.audio_layers {
        let n_in = if l == 0 { cfg.audio_dim } else { n };
        init_lstm(&mut s, &format!("audio_enc.l{l}"), n_in, n, rng);
    }
    if cfg.kind.uses_video() {
        if let Some(cnn) = &cfg.cnn {
            init_cnn(&mut s, "cnn", cnn, rng);
        }
        for l in 0..cfg.video_layers {
            let n_in = if l == 0 { cfg.video_dim } else { cfg.video_hidden };
            init_lstm(&mut s, &format!("video_enc.l{l}"), n_in, cfg.video_hidden, rng);
        }
        if cfg.video_hidden != n {
            s.init_glorot("video_proj.w", cfg.video_hidden, n, rng);
        }
        if cfg.kind.au_enabled() {
            init_linear(&mut s, "au_head", cfg.video_hidden, 2, rng);
        }
    }
    if cfg.kind.is_align() {
        init_lstm(&mut s, "av_lstm", 2 * n, n, rng);
        fusion::init_fusion(&mut s, cfg.fusion, n, rng);
    }
    init_lstm(&mut s, "decoder.lstm", cfg.vocab + n, n, rng);
    let contexts = if cfg.kind.is_cat() { 2 } else { 1 };
    init_linear(&mut s, "decoder.out", (1 + contexts) * n, n, rng);
    init_linear(&mut s, "decoder.logits", n, cfg.vocab, rng);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_roundtrip() {
        for k in ModelKind::ALL {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("wlas".parse::<ModelKind>().is_err());
    }

    #[test]
    fn parameter_sets_per_kind() {
        let a = Model::new(ModelConfig::micro(ModelKind::Audio, FusionVariant::Baseline), 0).unwrap();
        assert!(!a.params.contains("av_lstm.wx"));
        assert!(!a.params.contains("video_enc.l0.wx"));
        let al = Model::new(ModelConfig::micro(ModelKind::AvAlignAu, FusionVariant::M4), 0).unwrap();
        assert!(al.params.contains("fusion.nn1.w") && al.params.contains("au_head.w"));
        let cat = Model::new(ModelConfig::micro(ModelKind::AvCat, FusionVariant::Baseline), 0).unwrap();
        assert_eq!(cat.params.get("decoder.out.w").unwrap().shape(), &[12, 4]);
        assert!(!cat.params.contains("au_head.w"));
    }

    #[test]
    fn video_projection_only_when_widths_differ() {
        let mut cfg = ModelConfig::micro(ModelKind::AvAlign, FusionVariant::Baseline);
        assert!(!Model::new(cfg.clone(), 0).unwrap().params.contains("video_proj.w"));
        cfg.video_hidden = 3;
        let m = Model::new(cfg, 0).unwrap();
        assert_eq!(m.params.get("video_proj.w").unwrap().shape(), &[3, 4]);
    }
}
