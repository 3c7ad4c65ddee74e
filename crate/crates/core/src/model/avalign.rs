//! Encoders, cross-modal attention, decoder step and losses.

use super::fusion::{fuse, FusionVariant};
use crate::autodiff::{Graph, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{linear, lstm_layer, lstm_step, LstmState, LstmVars};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn encode_stack(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, layers: usize) -> Result<(Var, LstmState)> {
    if g.value(x).rows() == 0 {
        return Err(Error::Length(format!("{prefix}: empty input sequence")));
    }
    let mut out = x;
    let mut last = None;
    for l in 0..layers {
        let p = LstmVars::load(g, store, &format!("{prefix}.l{l}"))?;
        if p.input_size(g) != g.value(out).cols() {
            return Err(Error::Dimension(format!(
                "{prefix}.l{l} expects width {}, got {}",
                p.input_size(g),
                g.value(out).cols()
            )));
        }
        let init = LstmState::zeros(g, p.hidden);
        let (o, s) = lstm_layer(g, &p, out, init)?;
        out = o;
        last = Some(s);
    }
    let last = last.ok_or_else(|| Error::Config(format!("{prefix}: zero layers")))?;
    Ok((out, last))
}

/// Stacked audio LSTM, zero initial states. Returns `o_A` (`N × n`) and the
/// final state of the top layer.
pub fn encode_audio(g: &mut Graph, store: &ParamStore, audio: Var, layers: usize) -> Result<(Var, LstmState)> {
    encode_stack(g, store, "audio_enc", audio, layers)
}

/// Stacked video LSTM. Returns `o_V` (`M × n_v`).
pub fn encode_video(g: &mut Graph, store: &ParamStore, video: Var, layers: usize) -> Result<(Var, LstmState)> {
    encode_stack(g, store, "video_enc", video, layers)
}

/// Dot-product attention of a `1 × n` query over an `M × n` memory.
/// Returns the context (`1 × n`) and the weights (`1 × M`).
pub fn attend(g: &mut Graph, query: Var, memory: Var) -> Result<(Var, Var)> {
    let scores = g.matmul_nt(query, memory)?;
    let weights = g.softmax(scores, 1)?;
    let ctx = g.matmul(weights, memory)?;
    Ok((ctx, weights))
}

/// Output of the cross-modal layer.
#[derive(Clone, Debug)]
pub struct CrossModal {
    /// `N × n` fused representations.
    pub o_av: Var,
    /// Final `(h, c)` of the AV LSTM.
    pub final_state: LstmState,
    /// One `1 × M` attention row per audio step.
    pub alpha: Vec<Var>,
}

/// The AV LSTM reads `[o_A_i ; o_AV_{i-1}]`, attends over the video memory
/// with its hidden state and fuses the visual context back in.
pub fn av_attend_encode(
    g: &mut Graph,
    store: &ParamStore,
    variant: FusionVariant,
    o_a: Var,
    memory: Var,
) -> Result<CrossModal> {
    let p = LstmVars::load(g, store, "av_lstm")?;
    let n = p.hidden;
    if g.value(o_a).cols() != n || g.value(memory).cols() != n || p.input_size(g) != 2 * n {
        return Err(Error::Dimension(format!(
            "cross-modal layer: o_A {:?}, memory {:?}, hidden {n}",
            g.value(o_a).shape(),
            g.value(memory).shape()
        )));
    }
    let w_audio = g.narrow(p.wx, 0, 0, n)?;
    let w_fused = g.narrow(p.wx, 0, n, n)?;
    let xa = g.matmul(o_a, w_audio)?;
    let pre = g.add_row(xa, p.b)?;
    let steps = g.value(o_a).rows();
    let mut state = LstmState::zeros(g, n);
    let mut prev: Option<Var> = None;
    let mut outs = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    for i in 0..steps {
        let mut x = g.row(pre, i)?;
        if let Some(o) = prev {
            let r = g.matmul(o, w_fused)?;
            x = g.add(x, r)?;
        }
        state = lstm_step(g, &p, x, state)?;
        let (ctx, a) = attend(g, state.h, memory)?;
        let o = fuse(g, store, variant, state.h, ctx)?;
        outs.push(o);
        alpha.push(a);
        prev = Some(o);
    }
    Ok(CrossModal {
        o_av: g.concat(&outs, 0)?,
        final_state: state,
        alpha,
    })
}

/// Decoder weights loaded once per graph. The LSTM input is
/// `[one_hot(y) ; o_D]`, so its weight rows are split into the vocabulary
/// block (indexed by row) and the `o_D` block.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub lstm: LstmVars,
    w_y: Var,
    w_o: Var,
    out_w: Var,
    out_b: Var,
    logits_w: Var,
    logits_b: Var,
    pub vocab: usize,
}

impl DecoderVars {
    pub fn load(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        let lstm = LstmVars::load(g, store, "decoder.lstm")?;
        let n = lstm.hidden;
        let rows = lstm.input_size(g);
        if rows <= n {
            return Err(Error::Dimension("decoder input narrower than its hidden size".into()));
        }
        let vocab = rows - n;
        Ok(DecoderVars {
            w_y: g.narrow(lstm.wx, 0, 0, vocab)?,
            w_o: g.narrow(lstm.wx, 0, vocab, n)?,
            out_w: g.param(store, "decoder.out.w")?,
            out_b: g.param(store, "decoder.out.b")?,
            logits_w: g.param(store, "decoder.logits.w")?,
            logits_b: g.param(store, "decoder.logits.b")?,
            lstm,
            vocab,
        })
    }
}

/// Decoder recurrence: LSTM state plus the previous output `o_D`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub o_d: Option<Var>,
}

impl DecoderState {
    /// Start from an encoder state with `o_D_0 = 0`.
    pub fn new(lstm: LstmState) -> Self {
        DecoderState { lstm, o_d: None }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `1 × vocab` pre-softmax scores; `p_k = softmax(logits)`.
    pub logits: Var,
    pub o_d: Var,
    pub state: DecoderState,
    /// One `1 × len` attention row per memory.
    pub betas: Vec<Var>,
}

impl StepOutput {
    pub fn probs(&self, g: &mut Graph) -> Result<Var> {
        g.softmax(self.logits, 1)
    }
}

/// One decoder step. `memories` holds `o_AV` for AV Align and the audio-only
/// model, or `[o_A, o_V]` for AV Cat; each gets its own attention and the
/// contexts are concatenated after `h_D` before the output projection.
pub fn decode_step(
    g: &mut Graph,
    dec: &DecoderVars,
    y_prev: usize,
    state: DecoderState,
    memories: &[Var],
) -> Result<StepOutput> {
    if y_prev >= dec.vocab {
        return Err(Error::Domain(format!("token id {y_prev} outside vocabulary of {}", dec.vocab)));
    }
    let wy = g.row(dec.w_y, y_prev)?;
    let mut x = g.add(wy, dec.lstm.b)?;
    if let Some(o) = state.o_d {
        let r = g.matmul(o, dec.w_o)?;
        x = g.add(x, r)?;
    }
    let lstm = lstm_step(g, &dec.lstm, x, state.lstm)?;
    let mut parts = vec![lstm.h];
    let mut betas = Vec::with_capacity(memories.len());
    for &m in memories {
        let (ctx, b) = attend(g, lstm.h, m)?;
        parts.push(ctx);
        betas.push(b);
    }
    let joined = g.concat(&parts, 1)?;
    let ow = g.matmul(joined, dec.out_w)?;
    let o_d = g.add_row(ow, dec.out_b)?;
    let lw = g.matmul(o_d, dec.logits_w)?;
    let logits = g.add_row(lw, dec.logits_b)?;
    Ok(StepOutput {
        logits,
        o_d,
        state: DecoderState { lstm, o_d: Some(o_d) },
        betas,
    })
}

/// Mean negative log-likelihood of `targets` under `softmax(logits)` rows;
/// PAD targets are excluded from both the sum and the count.
pub fn ce_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = g.value(logits).rows();
    if targets.len() != rows {
        return Err(Error::Length(format!("{} targets for {} output steps", targets.len(), rows)));
    }
    let coords: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(k, &t)| (k, t))
        .collect();
    if coords.is_empty() {
        return Err(Error::Data("empty label".into()));
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, &coords)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// `(1/L) Σ_k −log p_k[y_k]` on an explicit probability matrix.
pub fn cross_entropy_from_probs(p: &Tensor, targets: &[usize]) -> Result<f64> {
    if p.rank() != 2 || targets.len() != p.rows() {
        return Err(Error::Length(format!("{} targets for probabilities {:?}", targets.len(), p.shape())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t >= p.cols() {
            return Err(Error::Domain(format!("target {t} outside {} classes", p.cols())));
        }
        total -= p.get2(k, t).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("empty label".into()));
    }
    Ok(total / count as f64)
}

/// `sigmoid(o_V · W_AU + b_AU)`, `M × 2`.
pub fn au_head(g: &mut Graph, store: &ParamStore, o_v: Var) -> Result<Var> {
    let z = linear(g, store, "au_head", o_v)?;
    Ok(g.sigmoid(z))
}

/// `λ / M · Σ_j ‖pred_j − target_j‖²`.
pub fn au_loss(g: &mut Graph, pred: Var, target: Var, lambda: f64) -> Result<Var> {
    let (ps, ts) = (g.value(pred).shape().to_vec(), g.value(target).shape().to_vec());
    if ps != ts {
        return Err(Error::Length(format!("AU prediction {ps:?} vs target {ts:?}")));
    }
    let m = ps[0] as f64;
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, lambda / m))
}
