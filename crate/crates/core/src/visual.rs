//! Visual front end: a residual CNN (full pre-activation blocks) mapping
//! 36×36 RGB lip crops to 128-dim frame features, plus the feature-ingestion
//! bypass.
//!
//! Layer stack for the default configuration:
//!
//! | layer | op                       | output     |
//! |-------|--------------------------|------------|
//! | 0     | rescale to [-1, 1]       | 36×36×3    |
//! | 1     | conv 3×3                 | 36×36×8    |
//! | 2-3   | res block                | 36×36×8    |
//! | 4-5   | res block, stride 2      | 18×18×16   |
//! | 6-7   | res block, stride 2      | 9×9×32     |
//! | 8-9   | res block, stride 2      | 5×5×64     |
//! | 10    | conv 5×5 (valid)         | 1×1×128    |

use crate::autodiff::{conv_geometry, Graph, Padding, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const IMAGE_SIZE: usize = 36;
pub const IMAGE_CHANNELS: usize = 3;
pub const VISUAL_DIM: usize = 128;
const NORM_EPS: f64 = 1e-5;

/// `M` RGB frames, `M × H × W × 3`, values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrameSeq {
    pub frames: Tensor,
    pub frame_period_s: f64,
}

impl ImageFrameSeq {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, j: usize) -> Tensor {
        let s = &self.frames.shape()[1..];
        let n: usize = s.iter().product();
        Tensor::new(s.to_vec(), self.frames.data()[j * n..(j + 1) * n].to_vec()).unwrap()
    }
}

/// Per-frame visual features, `M × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureSeq {
    pub features: Tensor,
    pub frame_period_s: f64,
}

impl VisualFeatureSeq {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Map pixel values in `[0, 255]` linearly onto `[-1, 1]`.
pub fn rescale(frames: &Tensor) -> Tensor {
    frames.map(|v| v / 127.5 - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: usize,
    /// Output channels of the stem conv and of the four residual stages.
    pub channels: [usize; 5],
    pub out_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_size: IMAGE_SIZE,
            channels: [8, 8, 16, 32, 64],
            out_dim: VISUAL_DIM,
        }
    }
}

impl CnnConfig {
    /// Tiny variant used for gradient checks.
    pub fn micro() -> Self {
        CnnConfig {
            input_size: 12,
            channels: [4, 4, 4, 4, 4],
            out_dim: 4,
        }
    }

    fn strides(&self) -> [usize; 4] {
        [1, 2, 2, 2]
    }

    /// Spatial size after every residual stage.
    fn final_spatial(&self) -> usize {
        self.strides()
            .iter()
            .fold(self.input_size, |s, &st| s.div_ceil(st))
    }

    /// Expected `H × W × C` after each layer, stem first.
    pub fn shape_trace(&self) -> Vec<[usize; 3]> {
        let mut s = self.input_size;
        let mut out = vec![[s, s, IMAGE_CHANNELS], [s, s, self.channels[0]]];
        for (k, st) in self.strides().iter().enumerate() {
            s = s.div_ceil(*st);
            out.push([s, s, self.channels[k + 1]]);
        }
        out.push([1, 1, self.out_dim]);
        out
    }
}

/// Register all CNN parameters under `prefix`.
pub fn init_cnn(store: &mut ParamStore, prefix: &str, cfg: &CnnConfig, rng: &mut impl Rng) {
    let conv = |store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut dyn rand::RngCore| {
        let fan_in = k * k * cin;
        let fan_out = k * k * cout;
        store.insert(&format!("{name}.w"), glorot(vec![k, k, cin, cout], fan_in, fan_out, rng));
        store.init_zeros(&format!("{name}.b"), vec![1, cout]);
    };
    let norm = |store: &mut ParamStore, name: &str, c: usize| {
        store.insert(&format!("{name}.g"), Tensor::ones(vec![1, c]));
        store.init_zeros(&format!("{name}.b"), vec![1, c]);
    };
    conv(store, &format!("{prefix}.stem"), 3, IMAGE_CHANNELS, cfg.channels[0], rng);
    for k in 0..4 {
        let (cin, cout) = (cfg.channels[k], cfg.channels[k + 1]);
        let b = format!("{prefix}.block{k}");
        norm(store, &format!("{b}.norm1"), cin);
        conv(store, &format!("{b}.conv1"), 3, cin, cout, rng);
        norm(store, &format!("{b}.norm2"), cout);
        conv(store, &format!("{b}.conv2"), 3, cout, cout, rng);
        if cin != cout || cfg.strides()[k] != 1 {
            conv(store, &format!("{b}.proj"), 1, cin, cout, rng);
        }
    }
    norm(store, &format!("{prefix}.final_norm"), cfg.channels[4]);
    let f = cfg.final_spatial();
    conv(store, &format!("{prefix}.head"), f, cfg.channels[4], cfg.out_dim, rng);
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize, pad: Padding) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_row(y, b)
}

fn norm_relu(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.g"))?;
    let beta = g.param(store, &format!("{name}.b"))?;
    let y = g.channel_norm(x, gamma, beta, NORM_EPS)?;
    Ok(g.relu(y))
}

/// Full pre-activation residual block:
/// `skip(x) + conv2(relu(norm2(conv1(relu(norm1(x))))))`, where `skip` is the
/// identity or a strided 1×1 projection.
pub fn res_block(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let a = norm_relu(g, store, &format!("{name}.norm1"), x)?;
    let t = conv(g, store, &format!("{name}.conv1"), a, stride, Padding::Same)?;
    let t = norm_relu(g, store, &format!("{name}.norm2"), t)?;
    let t = conv(g, store, &format!("{name}.conv2"), t, 1, Padding::Same)?;
    let skip = if store.contains(&format!("{name}.proj.w")) {
        conv(g, store, &format!("{name}.proj"), x, stride, Padding::Same)?
    } else {
        x
    };
    g.add(skip, t)
}

/// One already-rescaled `H × W × 3` frame to a `1 × out_dim` feature row.
/// Also returns the shape after each layer.
pub fn cnn_frame(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &CnnConfig,
    frame: Var,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let s = g.value(frame).shape().to_vec();
    if s != [cfg.input_size, cfg.input_size, IMAGE_CHANNELS] {
        return Err(Error::Dimension(format!(
            "frame {:?}, expected {}x{}x{}",
            s, cfg.input_size, cfg.input_size, IMAGE_CHANNELS
        )));
    }
    let mut trace = vec![s];
    let mut x = conv(g, store, &format!("{prefix}.stem"), frame, 1, Padding::Same)?;
    trace.push(g.value(x).shape().to_vec());
    for (k, st) in cfg.strides().iter().enumerate() {
        x = res_block(g, store, &format!("{prefix}.block{k}"), x, *st)?;
        trace.push(g.value(x).shape().to_vec());
    }
    let x = norm_relu(g, store, &format!("{prefix}.final_norm"), x)?;
    let y = conv(g, store, &format!("{prefix}.head"), x, 1, Padding::Valid)?;
    trace.push(g.value(y).shape().to_vec());
    let out = g.reshape(y, vec![1, cfg.out_dim])?;
    Ok((out, trace))
}

/// Apply the CNN to every frame, returning an `M × out_dim` matrix.
pub fn cnn_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &CnnConfig,
    frames: &ImageFrameSeq,
) -> Result<Var> {
    if frames.is_empty() {
        return Err(Error::Length("empty frame sequence".into()));
    }
    let mut rows = Vec::with_capacity(frames.len());
    for j in 0..frames.len() {
        let x = g.input(rescale(&frames.frame(j)));
        rows.push(cnn_frame(g, store, prefix, cfg, x)?.0);
    }
    g.concat(&rows, 0)
}

/// Check the geometry of a configuration without running it.
pub fn validate_geometry(cfg: &CnnConfig) -> Result<()> {
    let f = cfg.final_spatial();
    conv_geometry(f, f, f, f, 1, Padding::Valid).map(|_| ())
}

/// Load a feature file written by [`write_features`]; rows must be
/// `expected_dim` wide and there must be at least one row.
pub fn ingest_features(path: &Path, expected_dim: usize) -> Result<VisualFeatureSeq> {
    let c = Container::read(path)?;
    features_from_container(&c, expected_dim)
}

pub fn features_from_container(c: &Container, expected_dim: usize) -> Result<VisualFeatureSeq> {
    let t = c
        .get("features")
        .ok_or_else(|| Error::Format("container has no 'features' tensor".into()))?;
    if t.rank() != 2 || t.cols() != expected_dim {
        return Err(Error::Format(format!(
            "features {:?}, expected M x {expected_dim}",
            t.shape()
        )));
    }
    let period = c
        .meta
        .get("frame_period_s")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format("missing frame_period_s".into()))?;
    Ok(VisualFeatureSeq {
        features: t.clone(),
        frame_period_s: period,
    })
}

pub fn write_features(path: &Path, seq: &VisualFeatureSeq) -> Result<()> {
    let mut c = Container::new(serde_json::json!({ "frame_period_s": seq.frame_period_s }));
    c.push("features", seq.features.clone());
    c.write(path)
}

/// Load a directory of PNG/PPM frames (sorted by file name), resizing each to
/// 36×36 RGB.
pub fn load_frames_dir(dir: &Path, frame_period_s: f64) -> Result<ImageFrameSeq> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG/PPM frames in {}", dir.display())));
    }
    let mut data = Vec::with_capacity(files.len() * IMAGE_SIZE * IMAGE_SIZE * 3);
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let img = image::imageops::resize(
            &img,
            IMAGE_SIZE as u32,
            IMAGE_SIZE as u32,
            image::imageops::FilterType::Triangle,
        );
        data.extend(img.as_raw().iter().map(|&v| v as f64));
    }
    Ok(ImageFrameSeq {
        frames: Tensor::new(vec![files.len(), IMAGE_SIZE, IMAGE_SIZE, 3], data)?,
        frame_period_s,
    })
}
