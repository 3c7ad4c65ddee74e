//! Fusion of the audio-side state `h_i` with the visual context `c_V_i`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear};
use crate::params::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Fusion layer family. `nn_k(x) = W_k x + b_k` below.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    /// `nn_av([h; c])`
    #[default]
    Baseline,
    /// `tanh(nn1(tanh(nn2([h; c]))))`
    M1,
    /// `h + tanh(nn1(h)) + c + tanh(nn2(c)) + tanh(nn3([h; c]))`
    M2,
    /// M2 without the bare `c` term
    M3,
    /// `h ⊙ σ(nn1(h)) + c ⊙ σ(nn2(c))`
    M4,
    /// `h ⊙ σ(nn_a(h)) + tanh(nn1([h; c])) ⊙ σ(nn2([h; c]))`
    M5,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::Baseline,
        FusionVariant::M1,
        FusionVariant::M2,
        FusionVariant::M3,
        FusionVariant::M4,
        FusionVariant::M5,
    ];
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionVariant::Baseline => "baseline",
            FusionVariant::M1 => "m1",
            FusionVariant::M2 => "m2",
            FusionVariant::M3 => "m3",
            FusionVariant::M4 => "m4",
            FusionVariant::M5 => "m5",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown fusion variant '{s}'")))
    }
}

pub fn init_fusion(store: &mut ParamStore, variant: FusionVariant, n: usize, rng: &mut impl Rng) {
    let mut lin = |name: &str, n_in: usize| init_linear(store, &format!("fusion.{name}"), n_in, n, rng);
    match variant {
        FusionVariant::Baseline => lin("av", 2 * n),
        FusionVariant::M1 => {
            lin("nn2", 2 * n);
            lin("nn1", n);
        }
        FusionVariant::M2 | FusionVariant::M3 => {
            lin("nn1", n);
            lin("nn2", n);
            lin("nn3", 2 * n);
        }
        FusionVariant::M4 => {
            lin("nn1", n);
            lin("nn2", n);
        }
        FusionVariant::M5 => {
            lin("nn_a", n);
            lin("nn1", 2 * n);
            lin("nn2", 2 * n);
        }
    }
}

/// Fuse `h` and `c` (both `1 × n`, or `T × n` row-wise) into `o_AV`.
pub fn fuse(g: &mut Graph, store: &ParamStore, variant: FusionVariant, h: Var, c: Var) -> Result<Var> {
    let nn = |g: &mut Graph, name: &str, x: Var| linear(g, store, &format!("fusion.{name}"), x);
    match variant {
        FusionVariant::Baseline => {
            let hc = g.concat(&[h, c], 1)?;
            nn(g, "av", hc)
        }
        FusionVariant::M1 => {
            let hc = g.concat(&[h, c], 1)?;
            let inner = nn(g, "nn2", hc)?;
            let inner = g.tanh(inner);
            let outer = nn(g, "nn1", inner)?;
            Ok(g.tanh(outer))
        }
        FusionVariant::M2 | FusionVariant::M3 => {
            let hc = g.concat(&[h, c], 1)?;
            let a = nn(g, "nn1", h)?;
            let a = g.tanh(a);
            let b = nn(g, "nn2", c)?;
            let b = g.tanh(b);
            let d = nn(g, "nn3", hc)?;
            let d = g.tanh(d);
            if variant == FusionVariant::M2 {
                g.add_n(&[h, a, c, b, d])
            } else {
                g.add_n(&[h, a, b, d])
            }
        }
        FusionVariant::M4 => {
            let wa = nn(g, "nn1", h)?;
            let wa = g.sigmoid(wa);
            let wv = nn(g, "nn2", c)?;
            let wv = g.sigmoid(wv);
            let a = g.mul(h, wa)?;
            let v = g.mul(c, wv)?;
            g.add(a, v)
        }
        FusionVariant::M5 => {
            let hc = g.concat(&[h, c], 1)?;
            let wa = nn(g, "nn_a", h)?;
            let wa = g.sigmoid(wa);
            let av = nn(g, "nn1", hc)?;
            let av = g.tanh(av);
            let wav = nn(g, "nn2", hc)?;
            let wav = g.sigmoid(wav);
            let a = g.mul(h, wa)?;
            let b = g.mul(av, wav)?;
            g.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn baseline_projector_returns_h() {
        let n = 3;
        let mut store = ParamStore::new();
        let w = Tensor::from_fn(vec![2 * n, n], |k| {
            let (r, c) = (k / n, k % n);
            if r == c {
                1.0
            } else {
                0.0
            }
        });
        store.insert("fusion.av.w", w);
        store.init_zeros("fusion.av.b", vec![1, n]);
        let mut g = Graph::new();
        let h = g.input(Tensor::row(vec![0.5, -1.0, 2.0]));
        let c = g.input(Tensor::row(vec![9.0, 9.0, 9.0]));
        let o = fuse(&mut g, &store, FusionVariant::Baseline, h, c).unwrap();
        assert_eq!(g.value(o).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn parse_roundtrip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.to_string().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("m9".parse::<FusionVariant>().is_err());
    }

    #[test]
    fn every_variant_produces_n_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in FusionVariant::ALL {
            let mut store = ParamStore::new();
            init_fusion(&mut store, v, 4, &mut rng);
            let mut g = Graph::new();
            let h = g.input(Tensor::row(vec![0.1, 0.2, 0.3, 0.4]));
            let c = g.input(Tensor::row(vec![-0.1, 0.5, 0.0, 1.0]));
            let o = fuse(&mut g, &store, v, h, c).unwrap();
            assert_eq!(g.value(o).shape(), &[1, 4], "{v}");
        }
    }
}
