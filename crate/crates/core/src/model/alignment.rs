//! Attention matrices of one decoded utterance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Row-per-query attention weights.
///
/// * `alpha`: `N_audio × M_video` cross-modal weights (AV Align only);
/// * `beta`: `L × N` decoder weights over the first memory (`o_AV` or `o_A`);
/// * `beta_video`: `L × M` decoder weights over `o_V` (AV Cat only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub alpha: Option<Tensor>,
    pub beta: Tensor,
    pub beta_video: Option<Tensor>,
}

fn write_matrix(out: &mut String, name: &str, t: &Tensor) {
    let _ = writeln!(out, "# {name} {} {}", t.rows(), t.cols());
    for r in 0..t.rows() {
        let line: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
}

impl AlignmentRecord {
    pub fn matrices(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = Vec::new();
        if let Some(a) = &self.alpha {
            v.push(("alpha", a));
        }
        v.push(("beta", &self.beta));
        if let Some(b) = &self.beta_video {
            v.push(("beta_video", b));
        }
        v
    }

    /// Largest `|row sum − 1|` and whether every entry is nonnegative.
    pub fn normalisation_error(&self) -> (f64, bool) {
        let mut worst: f64 = 0.0;
        let mut nonneg = true;
        for (_, t) in self.matrices() {
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                nonneg &= row.iter().all(|&v| v >= 0.0);
            }
        }
        (worst, nonneg)
    }

    /// One header line `# name rows cols` per matrix followed by its rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (name, t) in self.matrices() {
            write_matrix(&mut s, name, t);
        }
        s
    }

    /// Parse the layout written by [`AlignmentRecord::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut mats: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(h) = line.strip_prefix("# ") {
                let f: Vec<&str> = h.split_whitespace().collect();
                let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header '{line}'")));
                if f.len() != 3 {
                    return Err(Error::Format(format!("bad header '{line}'")));
                }
                mats.push((f[0].to_string(), parse(f[1])?, parse(f[2])?, Vec::new()));
            } else {
                let cur = mats.last_mut().ok_or_else(|| Error::Format("values before first header".into()))?;
                for v in line.split(',') {
                    cur.3.push(v.trim().parse().map_err(|_| Error::Format(format!("bad value '{v}'")))?);
                }
            }
        }
        let mut alpha = None;
        let mut beta = None;
        let mut beta_video = None;
        for (name, r, c, d) in mats {
            let t = Tensor::new(vec![r, c], d)?;
            match name.as_str() {
                "alpha" => alpha = Some(t),
                "beta" => beta = Some(t),
                "beta_video" => beta_video = Some(t),
                other => return Err(Error::Format(format!("unknown matrix '{other}'"))),
            }
        }
        Ok(AlignmentRecord {
            alpha,
            beta: beta.ok_or_else(|| Error::Format("no beta matrix".into()))?,
            beta_video,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Write `{stem}_{name}.pgm` for every matrix.
    pub fn write_pgms(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in self.matrices() {
            std::fs::write(dir.join(format!("{stem}_{name}.pgm")), pgm_bytes(t)?)?;
        }
        Ok(())
    }
}

/// Binary 8-bit PGM with the matrix maximum mapped to 255.
pub fn pgm_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("heatmap needs a matrix, got {:?}", t.shape())));
    }
    let max = t.data().iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", t.cols(), t.rows()).into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}
