//! Python bindings: feature extraction, synthetic utterances, models,
//! training steps, decoding and alignment analysis.
//!
//! Matrices cross the boundary as lists of row lists.

use avalign_core::analysis::{self, LagMode};
use avalign_core::audio::{self, Waveform};
use avalign_core::corpus::{self, CorpusConfig, SymbolConfig, UtteranceSample};
use avalign_core::model::{
    Checkpoint, Example, FusionVariant, MemoryEdit, Model, ModelConfig, ModelKind, VideoData,
};
use avalign_core::train::{Adam, Dataset, Stage};
use avalign_core::{Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

/// Stacked log-mel vectors (`N × 240`) of a mono waveform.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=22050))]
fn audio_features(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let w = Waveform::new(samples, sample_rate).map_err(py_err)?.resample(audio::SAMPLE_RATE);
    Ok(to_rows(&audio::features(&w).map_err(py_err)?.vectors))
}

/// `clean + g · noise` at `snr_db`.
#[pyfunction]
fn mix_noise(clean: Vec<f64>, noise: Vec<f64>, snr_db: f64) -> PyResult<Vec<f64>> {
    let c = Waveform::new(clean, audio::SAMPLE_RATE).map_err(py_err)?;
    let n = Waveform::new(noise, audio::SAMPLE_RATE).map_err(py_err)?;
    Ok(audio::mix_noise(&c, &n, snr_db).map_err(py_err)?.samples)
}

#[pyfunction]
fn normalize_au(intensity: f64) -> PyResult<f64> {
    corpus::normalize_au(intensity).map_err(py_err)
}

#[pyfunction]
fn cer(hyp: &str, reference: &str) -> PyResult<f64> {
    analysis::cer(hyp, reference).map_err(py_err)
}

#[pyfunction]
fn encode_text(text: &str) -> PyResult<Vec<usize>> {
    corpus::Vocabulary.encode(text).map_err(py_err)
}

/// `(score or None, collapsed)`.
#[pyfunction]
fn monotonicity_score(alpha: Vec<Vec<f64>>) -> PyResult<(Option<f64>, bool)> {
    let m = analysis::monotonicity_score(&from_rows(&alpha)?);
    Ok((m.score, m.collapsed))
}

/// `(first_frame_mass, mean_row_entropy)`.
#[pyfunction]
fn collapse_diagnostic(alpha: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let c = analysis::collapse_diagnostic(&from_rows(&alpha)?);
    Ok((c.first_frame_mass, c.mean_row_entropy))
}

/// Per-frame lag in ms (positive: video leads); `per` is `row` or `col`.
#[pyfunction]
#[pyo3(signature = (alpha, audio_period_s=audio::FEATURE_PERIOD_S, video_period_s=corpus::VIDEO_PERIOD_S, per="row"))]
fn modality_lag(alpha: Vec<Vec<f64>>, audio_period_s: f64, video_period_s: f64, per: &str) -> PyResult<Vec<Option<f64>>> {
    let mode: LagMode = per.parse().map_err(py_err)?;
    Ok(analysis::modality_lag(&from_rows(&alpha)?, audio_period_s, video_period_s, mode)
        .map_err(py_err)?
        .lag_ms)
}

/// A model-ready utterance.
#[pyclass(name = "Example", from_py_object)]
#[derive(Clone)]
pub struct PyExample {
    inner: Example,
    truth: Vec<(char, f64, usize, usize)>,
}

#[pymethods]
impl PyExample {
    #[new]
    #[pyo3(signature = (label, audio, video=None, au_targets=None))]
    fn new(label: &str, audio: Vec<Vec<f64>>, video: Option<Vec<Vec<f64>>>, au_targets: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        Ok(PyExample {
            inner: Example {
                id: "py".into(),
                audio: from_rows(&audio)?,
                video: video.map(|v| from_rows(&v)).transpose()?.map(VideoData::Features),
                au_targets: au_targets.map(|a| from_rows(&a)).transpose()?,
                label: corpus::Vocabulary.encode(label).map_err(py_err)?,
            },
            truth: Vec::new(),
        })
    }

    #[getter]
    fn label(&self) -> String {
        corpus::Vocabulary.decode(&self.inner.label)
    }

    #[getter]
    fn audio(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.audio)
    }

    #[getter]
    fn video(&self) -> Option<Vec<Vec<f64>>> {
        match &self.inner.video {
            Some(VideoData::Features(t)) => Some(to_rows(t)),
            _ => None,
        }
    }

    #[getter]
    fn au_targets(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.au_targets.as_ref().map(to_rows)
    }

    /// Ground truth `(char, lag_ms, audio_start, audio_end)` per character of
    /// synthetic utterances.
    #[getter]
    fn truth(&self) -> Vec<(char, f64, usize, usize)> {
        self.truth.clone()
    }
}

fn example_from_sample(s: &UtteranceSample) -> PyResult<PyExample> {
    Ok(PyExample {
        inner: Example::from_sample(s).map_err(py_err)?,
        truth: s
            .truth
            .iter()
            .map(|t| (t.ch, t.lag_ms, t.audio_span.0, t.audio_span.1))
            .collect(),
    })
}

/// Deterministic synthetic train and test splits.
#[pyfunction]
#[pyo3(signature = (sentences, test_sentences, seed=0, confusable_fraction=0.0, lag_min_ms=0.0, lag_max_ms=0.0, min_len=5, max_len=12))]
#[allow(clippy::too_many_arguments)]
fn synth_corpus(
    sentences: usize,
    test_sentences: usize,
    seed: u64,
    confusable_fraction: f64,
    lag_min_ms: f64,
    lag_max_ms: f64,
    min_len: usize,
    max_len: usize,
) -> PyResult<(Vec<PyExample>, Vec<PyExample>)> {
    let cfg = CorpusConfig {
        sentences,
        test_sentences,
        min_len,
        max_len,
        confusable_fraction,
        symbols: SymbolConfig {
            lag_range_ms: (lag_min_ms, lag_max_ms),
            ..Default::default()
        },
        ..Default::default()
    };
    let c = corpus::generate_corpus(&cfg, seed).map_err(py_err)?;
    let train = c.train.iter().map(example_from_sample).collect::<PyResult<Vec<_>>>()?;
    let test = c.test.iter().map(example_from_sample).collect::<PyResult<Vec<_>>>()?;
    Ok((train, test))
}

/// AV Align, AV Cat or audio-only recogniser with its optimizer state.
#[pyclass(name = "Model")]
pub struct PyModel {
    model: Model,
    opt: Adam,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind="av_align_au", fusion="baseline", seed=0, hidden=32, audio_layers=1, lr=1e-3))]
    fn new(kind: &str, fusion: &str, seed: u64, hidden: usize, audio_layers: usize, lr: f64) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let mut cfg = ModelConfig::toy(kind);
        cfg.fusion = fusion.parse::<FusionVariant>().map_err(py_err)?;
        cfg.hidden = hidden;
        cfg.video_hidden = hidden;
        cfg.audio_layers = audio_layers;
        Ok(PyModel {
            model: Model::new(cfg, seed).map_err(py_err)?,
            opt: Adam::new(lr, 0.9, 0.999, 1e-8),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel {
            model: ck.model,
            opt: Adam::new(1e-3, 0.9, 0.999, 1e-8),
        })
    }

    #[pyo3(signature = (path, stage="clean"))]
    fn save(&self, path: PathBuf, stage: &str) -> PyResult<()> {
        Checkpoint::new(self.model.clone(), stage).save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.model.kind().to_string()
    }

    fn num_parameters(&self) -> usize {
        self.model.params.num_values()
    }

    /// Dict with `total`, `ce` and `au` (or None).
    fn loss<'py>(&self, py: Python<'py>, example: &PyExample) -> PyResult<Bound<'py, PyDict>> {
        let p = self.model.loss(&example.inner).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("total", p.total)?;
        d.set_item("ce", p.ce)?;
        d.set_item("au", p.au)?;
        Ok(d)
    }

    /// One clipped Adam step on the mean loss of `batch`; returns that loss.
    #[pyo3(signature = (batch, clip_norm=1.0))]
    fn train_step(&mut self, batch: Vec<PyExample>, clip_norm: f64) -> PyResult<f64> {
        let refs: Vec<&Example> = batch.iter().map(|e| &e.inner).collect();
        let st = avalign_core::train::train_step(&mut self.model, &mut self.opt, &refs, clip_norm).map_err(py_err)?;
        Ok(st.loss)
    }

    /// Greedy transcript plus alignments. `edit` is `none`, `reverse` or
    /// `random:<seed>`.
    #[pyo3(signature = (example, max_len=64, edit="none"))]
    fn decode<'py>(&self, py: Python<'py>, example: &PyExample, max_len: usize, edit: &str) -> PyResult<Bound<'py, PyDict>> {
        let edit = match edit {
            "none" => MemoryEdit::None,
            "reverse" => MemoryEdit::Reverse,
            s => match s.strip_prefix("random:").and_then(|v| v.parse().ok()) {
                Some(seed) => MemoryEdit::RandomUniform { seed },
                None => return Err(PyValueError::new_err(format!("unknown edit '{s}'"))),
            },
        };
        let d = self.model.greedy_decode(&example.inner, max_len, &edit).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("text", d.text)?;
        out.set_item("alpha", d.record.alpha.as_ref().map(to_rows))?;
        out.set_item("beta", to_rows(&d.record.beta))?;
        out.set_item("beta_video", d.record.beta_video.as_ref().map(to_rows))?;
        Ok(out)
    }
}

/// Re-render `examples` with babble noise at `snr_db` (None keeps them clean).
#[pyfunction]
#[pyo3(signature = (labels, seed, snr_db=None))]
fn noisy_examples(labels: Vec<String>, seed: u64, snr_db: Option<f64>) -> PyResult<Vec<PyExample>> {
    let specs = corpus::build_symbols(&SymbolConfig::default(), seed).map_err(py_err)?;
    let samples = labels
        .iter()
        .enumerate()
        .map(|(k, l)| corpus::generate_utterance(&specs, l, seed.wrapping_add(k as u64)))
        .collect::<avalign_core::Result<Vec<_>>>()
        .map_err(py_err)?;
    let noise = corpus::babble_noise(&specs, 4 * audio::SAMPLE_RATE as usize, seed);
    let ds = Dataset::from_utterances(&samples, noise);
    let stage = snr_db.map_or(Stage::Clean, Stage::Snr);
    let exs = ds.examples(stage, true).map_err(py_err)?;
    Ok(exs
        .into_iter()
        .map(|inner| PyExample { inner, truth: Vec::new() })
        .collect())
}

#[pymodule]
fn avalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(audio_features, m)?)?;
    m.add_function(wrap_pyfunction!(mix_noise, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_au, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(encode_text, m)?)?;
    m.add_function(wrap_pyfunction!(monotonicity_score, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_diagnostic, m)?)?;
    m.add_function(wrap_pyfunction!(modality_lag, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(noisy_examples, m)?)?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
