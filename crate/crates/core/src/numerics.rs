//! Dense arithmetic substrate: row-major matrices, probability vectors,
//! softmax / cross-entropy with their exact logit gradient, and plain SGD.

use crate::error::{ensure_len, Error, Result};

/// Floor applied inside `log` so saturated predictions keep losses finite.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on `Σp = 1` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        ensure_len("tensor values", rows * cols, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite tensor entry at index {i}"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure_len(&format!("row {i}"), cols, r.as_ref().len())?;
            values.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A probability distribution over `M` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and `Σp = 1` within [`PROB_SUM_TOL`].
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(
                "probability entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn one_hot(label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut v = vec![0.0; classes];
        v[label] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `−Σ target·log(max(p, ε))`.
pub fn cross_entropy(p: &ProbVector, target: &ProbVector) -> Result<f64> {
    ensure_len("cross_entropy", p.len(), target.len())?;
    Ok(cross_entropy_raw(p.as_slice(), target.as_slice()))
}

pub(crate) fn cross_entropy_raw(p: &[f64], target: &[f64]) -> f64 {
    -p.iter()
        .zip(target)
        .map(|(&pm, &tm)| {
            if tm == 0.0 {
                0.0
            } else {
                tm * pm.max(LOG_EPS).ln()
            }
        })
        .sum::<f64>()
}

/// Shannon entropy `−Σ p·ln p` (with `0·ln 0 = 0`).
pub fn entropy(p: &ProbVector) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to `z`: `p − target`.
pub fn ce_logit_gradient(p: &ProbVector, target: &ProbVector) -> Result<Vec<f64>> {
    ensure_len("ce_logit_gradient", p.len(), target.len())?;
    Ok(p.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| a - b)
        .collect())
}

/// Euclidean distance between two equally long vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("l2_distance", a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Gradients for a list of parameter tensors, stored flat in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    tensors: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn new(tensors: Vec<Vec<f64>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(shapes: &[usize]) -> Self {
        Self {
            tensors: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.tensors.iter().map(Vec::len).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) -> Result<()> {
        check_congruent(&self.shapes(), &other.shapes())?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

fn check_congruent(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "parameter shapes {a:?} do not match gradient shapes {b:?}"
        )));
    }
    Ok(())
}

/// `w ← w − lr·g` for every parameter.
pub fn sgd_update(params: &mut [&mut [f64]], grads: &GradientBuffer, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    check_congruent(&shapes, &grads.shapes())?;
    for (p, g) in params.iter_mut().zip(grads.tensors()) {
        p.iter_mut().zip(g).for_each(|(w, gw)| *w -= lr * gw);
    }
    Ok(())
}
