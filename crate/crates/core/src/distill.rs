//! Full-precision teacher, the distillation loss `−Σ p_T log p` and the
//! minibatch SGD epoch shared by teacher and student training.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::network::{backward, forward, init_model, predict, Mode, Model};
use crate::numerics::{cross_entropy_raw, ProbVector};
use crate::rng::{self, stream};

/// Distillation loss for one sample: cross-entropy of the student against the
/// teacher distribution (temperature 1).
pub fn kd_loss(p_student: &ProbVector, p_teacher: &ProbVector) -> Result<f64> {
    ensure_len("kd_loss", p_student.len(), p_teacher.len())?;
    Ok(cross_entropy_raw(
        p_student.as_slice(),
        p_teacher.as_slice(),
    ))
}

/// Mean distillation loss over a batch.
pub fn kd_loss_batch(students: &[ProbVector], teachers: &[ProbVector]) -> Result<f64> {
    ensure_len("kd_loss_batch", students.len(), teachers.len())?;
    if students.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let total = students
        .iter()
        .zip(teachers)
        .map(|(s, t)| kd_loss(s, t))
        .sum::<Result<f64>>()?;
    Ok(total / students.len() as f64)
}

/// Memoized teacher outputs keyed by sample id.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    teacher: Model,
    entries: Vec<Option<ProbVector>>,
    forwards: usize,
}

impl TeacherCache {
    pub fn new(teacher: Model, n: usize) -> Self {
        Self {
            teacher,
            entries: vec![None; n],
            forwards: 0,
        }
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    /// Number of single-sample teacher forwards performed so far.
    pub fn forward_count(&self) -> usize {
        self.forwards
    }

    pub fn cached(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Fills every missing entry.
    pub fn warm_up(&mut self, data: &Dataset) -> Result<()> {
        ensure_len("teacher cache", self.entries.len(), data.len())?;
        let missing: Vec<usize> = (0..data.len())
            .filter(|&i| self.entries[i].is_none())
            .collect();
        for chunk in missing.chunks(512) {
            let probs = predict(&self.teacher, &data.batch(chunk)?, Mode::Fp)?;
            self.forwards += chunk.len();
            for (&id, p) in chunk.iter().zip(probs) {
                self.entries[id] = Some(p);
            }
        }
        Ok(())
    }

    /// All cached outputs in id order; requires a completed warm-up.
    pub fn outputs(&self) -> Result<Vec<ProbVector>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(id, e)| {
                e.clone()
                    .ok_or_else(|| Error::State(format!("teacher output for {id} not cached")))
            })
            .collect()
    }
}

/// Teacher distribution for `id`, computed and memoized on first access.
pub fn teacher_predict(cache: &mut TeacherCache, data: &Dataset, id: usize) -> Result<ProbVector> {
    if id >= cache.entries.len() || !data.contains(id) {
        return Err(Error::Input(format!("unknown sample id {id}")));
    }
    if let Some(p) = &cache.entries[id] {
        return Ok(p.clone());
    }
    let p = predict(&cache.teacher, &data.batch(&[id])?, Mode::Fp)?
        .pop()
        .expect("one output per input");
    cache.forwards += 1;
    cache.entries[id] = Some(p.clone());
    Ok(p)
}

/// Per-sample training targets.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// One-hot labels.
    Hard,
    /// Teacher outputs indexed by sample id, mixed with the one-hot label as
    /// `(1 − λ)·p_T + λ·y`. `λ = 0` is pure distillation.
    Soft {
        teacher: &'a [ProbVector],
        hard_mix: f64,
    },
}

impl Targets<'_> {
    fn for_sample(&self, data: &Dataset, id: usize) -> ProbVector {
        match *self {
            Targets::Hard => data.one_hot(id),
            Targets::Soft {
                teacher,
                hard_mix: 0.0,
            } => teacher[id].clone(),
            Targets::Soft { teacher, hard_mix } => {
                let y = data.label(id);
                let mixed = teacher[id]
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(m, &p)| (1.0 - hard_mix) * p + if m == y { hard_mix } else { 0.0 })
                    .collect();
                ProbVector::from_raw(mixed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean loss against the training targets, measured before each update.
    pub loss: f64,
    /// Fraction of visited samples whose prediction matched the label.
    pub accuracy: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub batch_size: usize,
}

/// One pass of minibatch SGD over `ids` in a shuffled order. Each step uses
/// the batch-mean gradient. `max_steps` truncates the pass.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng>(
    model: &mut Model,
    data: &Dataset,
    ids: &[usize],
    targets: Targets<'_>,
    mode: Mode,
    params: SgdParams,
    max_steps: Option<usize>,
    rng: &mut R,
) -> Result<EpochStats> {
    if params.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Targets::Soft { teacher, .. } = targets {
        ensure_len("teacher outputs", data.len(), teacher.len())?;
    }
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
    for batch_ids in order.chunks(params.batch_size) {
        if max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let x = data.batch(batch_ids)?;
        let t: Vec<ProbVector> = batch_ids
            .iter()
            .map(|&id| targets.for_sample(data, id))
            .collect();
        let trace = forward(model, &x, mode)?;
        for ((p, target), &id) in trace.probs().iter().zip(&t).zip(batch_ids) {
            loss_sum += cross_entropy_raw(p.as_slice(), target.as_slice());
            correct += usize::from(p.argmax() == data.label(id));
        }
        seen += batch_ids.len();
        let mut grads = backward(model, &trace, &t)?;
        grads.scale(1.0 / batch_ids.len() as f64);
        if !loss_sum.is_finite() || !grads.l2_norm().is_finite() {
            return Err(Error::Run(format!(
                "non-finite loss or gradient at step {steps}"
            )));
        }
        model.apply_sgd(&grads, params.lr)?;
        steps += 1;
    }
    Ok(EpochStats {
        loss: if seen == 0 {
            0.0
        } else {
            loss_sum / seen as f64
        },
        accuracy: if seen == 0 {
            0.0
        } else {
            correct as f64 / seen as f64
        },
        steps,
    })
}

/// Trains a full-precision teacher on hard labels. Returns the model and the
/// per-epoch statistics.
pub fn train_teacher(
    arch: &[usize],
    data: &Dataset,
    epochs: usize,
    params: SgdParams,
    seed: u64,
) -> Result<(Model, Vec<EpochStats>)> {
    if arch.first() != Some(&data.dims()) || arch.last() != Some(&data.classes()) {
        return Err(Error::Config(format!(
            "architecture {arch:?} does not match data ({} features, {} classes)",
            data.dims(),
            data.classes()
        )));
    }
    let mut model = init_model(arch, rng::derive_seed(seed, stream::TEACHER_INIT))?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut r = rng::indexed_rng(seed, stream::TEACHER_SHUFFLE, epoch as u64);
        let stats = train_epoch(
            &mut model,
            data,
            &ids,
            Targets::Hard,
            Mode::Fp,
            params,
            None,
            &mut r,
        )
        .map_err(|e| match e {
            Error::Run(msg) => Error::Run(format!("teacher diverged in epoch {epoch}: {msg}")),
            other => other,
        })?;
        log.push(stats);
    }
    Ok((model, log))
}
