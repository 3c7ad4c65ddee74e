//! AV Cat decoder step: independent attentions over audio and video.

use super::avalign::{decode_step, DecoderState, DecoderVars, StepOutput};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Decoder step attending separately to `o_A` and the (projected) `o_V`;
/// the output projection sees `[h_D ; c_A ; c_V]`. `betas[0]` is the audio
/// row, `betas[1]` the video row.
pub fn avcat_decode_step(
    g: &mut Graph,
    dec: &DecoderVars,
    y_prev: usize,
    state: DecoderState,
    o_a: Var,
    o_v: Var,
) -> Result<StepOutput> {
    decode_step(g, dec, y_prev, state, &[o_a, o_v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionVariant, Model, ModelConfig, ModelKind};
    use crate::nn::LstmState;
    use crate::tensor::Tensor;

    #[test]
    fn single_entry_memories_and_normalised_output() {
        let m = Model::new(ModelConfig::micro(ModelKind::AvCat, FusionVariant::Baseline), 1).unwrap();
        let mut g = Graph::new();
        let dec = DecoderVars::load(&mut g, &m.params).unwrap();
        let o_a = g.input(Tensor::row(vec![0.1, 0.2, -0.3, 0.4]));
        let o_v = g.input(Tensor::row(vec![-0.5, 0.0, 0.3, 0.2]));
        let init = LstmState::zeros(&mut g, 4);
        let st = DecoderState::new(init);
        let out = avcat_decode_step(&mut g, &dec, 1, st, o_a, o_v).unwrap();
        assert_eq!(g.value(out.betas[0]).data(), &[1.0]);
        assert_eq!(g.value(out.betas[1]).data(), &[1.0]);
        let p = out.probs(&mut g).unwrap();
        assert!((g.value(p).sum() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(p).len(), 6);
    }
}
