//! Layers built from graph primitives: affine maps and LSTM cells.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Register `{prefix}.w` (`n_in × n_out`) and `{prefix}.b` (`1 × n_out`).
pub fn init_linear(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) {
    store.init_glorot(&format!("{prefix}.w"), n_in, n_out, rng);
    store.init_zeros(&format!("{prefix}.b"), vec![1, n_out]);
}

/// `x · W + b` applied row-wise.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Hidden and cell state of an LSTM, each `1 × n`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, n: usize) -> Self {
        LstmState {
            h: g.input(Tensor::zeros(vec![1, n])),
            c: g.input(Tensor::zeros(vec![1, n])),
        }
    }
}

/// Graph handles of one LSTM's weights. Gate columns are ordered
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

/// Register `{prefix}.wx`, `{prefix}.wh` and `{prefix}.b`; the forget-gate
/// bias starts at +1.
pub fn init_lstm(store: &mut ParamStore, prefix: &str, n_in: usize, n: usize, rng: &mut impl Rng) {
    store.insert(&format!("{prefix}.wx"), glorot(vec![n_in, 4 * n], n_in, 4 * n, rng));
    store.insert(&format!("{prefix}.wh"), glorot(vec![n, 4 * n], n, 4 * n, rng));
    let b = Tensor::from_fn(vec![1, 4 * n], |i| if (n..2 * n).contains(&i) { 1.0 } else { 0.0 });
    store.insert(&format!("{prefix}.b"), b);
}

impl LstmVars {
    pub fn load(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let wh = g.param(store, &format!("{prefix}.wh"))?;
        let hidden = g.value(wh).rows();
        Ok(LstmVars {
            wx: g.param(store, &format!("{prefix}.wx"))?,
            wh,
            b: g.param(store, &format!("{prefix}.b"))?,
            hidden,
        })
    }

    pub fn input_size(&self, g: &Graph) -> usize {
        g.value(self.wx).rows()
    }
}

/// One LSTM step on a `1 × n_in` input.
///
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')` with sigmoid gates and a tanh
/// candidate.
pub fn lstm_cell(g: &mut Graph, p: &LstmVars, x: Var, state: LstmState) -> Result<LstmState> {
    let xw = g.matmul(x, p.wx)?;
    let pre = g.add_row(xw, p.b)?;
    lstm_step(g, p, pre, state)
}

/// LSTM step given the already-projected input `x · Wx + b`.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, x_proj: Var, state: LstmState) -> Result<LstmState> {
    let n = p.hidden;
    let hw = g.matmul(state.h, p.wh)?;
    let z = g.add(x_proj, hw)?;
    let zi = g.narrow(z, 1, 0, n)?;
    let zf = g.narrow(z, 1, n, n)?;
    let zg = g.narrow(z, 1, 2 * n, n)?;
    let zo = g.narrow(z, 1, 3 * n, n)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, state.c)?;
    let ig = g.mul(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Run an LSTM over the rows of `xs` (`T × n_in`), returning the `T × n`
/// output matrix and the final state.
pub fn lstm_layer(
    g: &mut Graph,
    p: &LstmVars,
    xs: Var,
    init: LstmState,
) -> Result<(Var, LstmState)> {
    let steps = g.value(xs).rows();
    let xw = g.matmul(xs, p.wx)?;
    let proj = g.add_row(xw, p.b)?;
    let mut state = init;
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = g.row(proj, t)?;
        state = lstm_step(g, p, row, state)?;
        outs.push(state.h);
    }
    let out = g.concat(&outs, 0)?;
    Ok((out, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_gives_zero_state() {
        let mut store = ParamStore::new();
        store.init_zeros("l.wx", vec![3, 8]);
        store.init_zeros("l.wh", vec![2, 8]);
        store.init_zeros("l.b", vec![1, 8]);
        let mut g = Graph::new();
        let p = LstmVars::load(&mut g, &store, "l").unwrap();
        let x = g.input(Tensor::row(vec![0.3, -1.0, 2.0]));
        let s0 = LstmState::zeros(&mut g, 2);
        let s = lstm_cell(&mut g, &p, x, s0).unwrap();
        assert_eq!(g.value(s.h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(s.c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_lstm(&mut store, "l", 3, 2, &mut rng);
        let b = store.get_mut("l.b").unwrap();
        b.data_mut()[2] = 50.0;
        b.data_mut()[3] = 50.0;
        let mut g = Graph::new();
        let p = LstmVars::load(&mut g, &store, "l").unwrap();
        let x = g.input(Tensor::row(vec![0.3, -1.0, 2.0]));
        let c_prev = vec![0.7, -0.4];
        let state = LstmState {
            h: g.input(Tensor::row(vec![0.1, 0.2])),
            c: g.input(Tensor::row(c_prev.clone())),
        };
        let s = lstm_cell(&mut g, &p, x, state).unwrap();
        // reconstruct i ⊙ g by hand
        let z = {
            let xv = Tensor::row(vec![0.3, -1.0, 2.0]);
            let hv = Tensor::row(vec![0.1, 0.2]);
            let a = xv.matmul(store.get("l.wx").unwrap()).unwrap();
            let h = hv.matmul(store.get("l.wh").unwrap()).unwrap();
            let b = store.get("l.b").unwrap();
            (0..8).map(|k| a.data()[k] + h.data()[k] + b.data()[k]).collect::<Vec<_>>()
        };
        for k in 0..2 {
            let i = crate::autodiff::sigmoid(z[k]);
            let cand = z[4 + k].tanh();
            let expect = c_prev[k] + i * cand;
            assert!((g.value(s.c).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_preserves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_lstm(&mut store, "l", 4, 3, &mut rng);
        let mut g = Graph::new();
        let p = LstmVars::load(&mut g, &store, "l").unwrap();
        let xs = g.input(Tensor::from_fn(vec![5, 4], |i| (i as f64).sin()));
        let s0 = LstmState::zeros(&mut g, 3);
        let (out, _) = lstm_layer(&mut g, &p, xs, s0).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 3]);
    }
}
