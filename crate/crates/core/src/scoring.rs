//! Per-sample importance scores.
//!
//! * error-vector score `d_evs = ‖p(w^q, x) − y‖₂` against the one-hot label,
//! * disagreement score `d_ds = ‖p(w^q, x) − p_T(x)‖₂` against the teacher,
//! * `d_acs = β(t)·d_evs + (1 − β(t))·d_ds` with an annealing schedule `β`.
//!
//! The exact per-sample gradient norm is kept here as an oracle for checking
//! how well `d_evs` ranks samples.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::network::{backward_wrt, forward, predict_dataset, GradWrt, Mode, Model};
use crate::numerics::{l2_distance, ProbVector, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub epoch: usize,
    pub d_evs: f64,
    /// `None` when no teacher is available (distillation disabled).
    pub d_ds: Option<f64>,
    pub d_acs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealingStrategy {
    Fixed,
    Linear,
    Sqrt,
    Quadratic,
    Cosine,
    EvsOnly,
    DsOnly,
}

impl AnnealingStrategy {
    pub const ALL: [AnnealingStrategy; 7] = [
        AnnealingStrategy::Fixed,
        AnnealingStrategy::Linear,
        AnnealingStrategy::Sqrt,
        AnnealingStrategy::Quadratic,
        AnnealingStrategy::Cosine,
        AnnealingStrategy::EvsOnly,
        AnnealingStrategy::DsOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnealingStrategy::Fixed => "fixed",
            AnnealingStrategy::Linear => "linear",
            AnnealingStrategy::Sqrt => "sqrt",
            AnnealingStrategy::Quadratic => "quadratic",
            AnnealingStrategy::Cosine => "cosine",
            AnnealingStrategy::EvsOnly => "evs_only",
            AnnealingStrategy::DsOnly => "ds_only",
        }
    }

    /// Whether the schedule ever puts weight on the disagreement score.
    pub fn needs_teacher(self) -> bool {
        self != AnnealingStrategy::EvsOnly
    }
}

impl fmt::Display for AnnealingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnealingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown annealing strategy {s:?}")))
    }
}

/// Error-vector score `‖p − y‖₂`.
pub fn evs(p_quant: &ProbVector, y: &ProbVector) -> Result<f64> {
    l2_distance(p_quant.as_slice(), y.as_slice())
}

/// Disagreement score `‖p − p_T‖₂`.
pub fn ds(p_quant: &ProbVector, p_teacher: &ProbVector) -> Result<f64> {
    l2_distance(p_quant.as_slice(), p_teacher.as_slice())
}

/// Weight on the error-vector score at epoch `t` of `total`.
pub fn beta(t: usize, total: usize, strategy: AnnealingStrategy) -> Result<f64> {
    if total == 0 {
        return Err(Error::Domain("total epochs must be at least 1".into()));
    }
    if t > total {
        return Err(Error::Domain(format!("epoch {t} beyond total {total}")));
    }
    let r = t as f64 / total as f64;
    Ok(match strategy {
        // exact endpoints; cos(π/2) is 6e-17 in floating point
        AnnealingStrategy::Cosine if t == total => 0.0,
        AnnealingStrategy::Fixed => 0.5,
        AnnealingStrategy::Linear => 1.0 - r,
        AnnealingStrategy::Sqrt => 1.0 - r.sqrt(),
        AnnealingStrategy::Quadratic => 1.0 - r * r,
        AnnealingStrategy::Cosine => (r * std::f64::consts::FRAC_PI_2).cos().clamp(0.0, 1.0),
        AnnealingStrategy::EvsOnly => 1.0,
        AnnealingStrategy::DsOnly => 0.0,
    })
}

/// `β·d_evs + (1 − β)·d_ds`.
pub fn acs_score(d_evs: f64, d_ds: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        return d_evs;
    }
    if beta == 0.0 {
        return d_ds;
    }
    // rounding can push the blend one ulp outside its inputs
    (beta * d_evs + (1.0 - beta) * d_ds).clamp(d_evs.min(d_ds), d_evs.max(d_ds))
}

/// Exact ℓ₂ norm of the per-sample cross-entropy gradient with respect to the
/// weights used in the forward pass (the quantized weights in quant mode).
pub fn grad_norm_oracle(model: &Model, x: &[f64], y: &ProbVector, mode: Mode) -> Result<f64> {
    ensure_len("oracle sample", model.input_width(), x.len())?;
    let batch = Tensor2::new(1, x.len(), x.to_vec())?;
    let trace = forward(model, &batch, mode)?;
    Ok(backward_wrt(model, &trace, std::slice::from_ref(y), GradWrt::Effective)?.l2_norm())
}

/// Scores every sample of `data` with the quantized model. `teacher` holds
/// `p_T` per sample id when distillation is on.
pub fn score_dataset(
    model: &Model,
    data: &Dataset,
    teacher: Option<&[ProbVector]>,
    epoch: usize,
    beta: f64,
) -> Result<Vec<ScoreRecord>> {
    if let Some(t) = teacher {
        ensure_len("teacher outputs", data.len(), t.len())?;
    } else if beta != 1.0 {
        return Err(Error::State(
            "disagreement score requested but no teacher outputs are available".into(),
        ));
    }
    let probs = predict_dataset(model, data, Mode::Quant)?;
    probs
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let d_evs = evs(p, &data.one_hot(id))?;
            let d_ds = teacher.map(|t| ds(p, &t[id])).transpose()?;
            Ok(ScoreRecord {
                sample_id: id,
                epoch,
                d_evs,
                d_ds,
                d_acs: acs_score(d_evs, d_ds.unwrap_or(0.0), beta),
            })
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("spearman", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::Input(
            "rank correlation needs at least two points".into(),
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

pub const SCORES_HEADER: &str = "epoch,sample_id,d_evs,d_ds,d_acs";

pub fn write_scores_csv(records: &[ScoreRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{SCORES_HEADER}")?;
    for r in records {
        let ds = r.d_ds.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.sample_id, r.d_evs, ds, r.d_acs
        )?;
    }
    Ok(())
}

pub fn save_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores_csv(records, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().transpose().map_err(|e| Error::io(path, e))?;
    if header.as_deref().map(str::trim) != Some(SCORES_HEADER) {
        return Err(Error::format(
            0,
            format!("score dump must start with `{SCORES_HEADER}`"),
        ));
    }
    let bad =
        |line: usize, what: &str| Error::Input(format!("{}:{line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 5 {
            return Err(bad(i + 2, "column count"));
        }
        let num = |s: &str, what| s.parse::<f64>().map_err(|_| bad(i + 2, what));
        out.push(ScoreRecord {
            epoch: cols[0].parse().map_err(|_| bad(i + 2, "epoch"))?,
            sample_id: cols[1].parse().map_err(|_| bad(i + 2, "sample_id"))?,
            d_evs: num(cols[2], "d_evs")?,
            d_ds: if cols[3].is_empty() {
                None
            } else {
                Some(num(cols[3], "d_ds")?)
            },
            d_acs: num(cols[4], "d_acs")?,
        });
    }
    Ok(out)
}
