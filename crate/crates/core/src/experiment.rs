//! End-to-end runs: teacher training, quantization-aware training with
//! periodic coreset reselection, baselines, sweeps, score histograms and
//! timing reports.
//!
//! At every epoch `t` with `t % R == 0` the selector picks a new coreset (for
//! the adaptive selector: score all samples with the current quantized model,
//! blend with `β(t)` and keep the top fraction); other epochs reuse the
//! previous coreset. Each epoch then runs one shuffled SGD pass over the
//! coreset against the teacher's distribution (or the hard labels when
//! distillation is off).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    inject_label_noise, load_dataset, noisy_recall, pruned_ids, DataSource, Dataset,
};
use crate::distill::{train_epoch, train_teacher, EpochStats, SgdParams, Targets, TeacherCache};
use crate::error::{Error, Result};
use crate::network::{
    correctness, evaluate, init_model, load_checkpoint, save_checkpoint, Mode, Model, QuantSpec,
};
use crate::numerics::ProbVector;
use crate::quant::QuantConfig;
use crate::rng::{self, stream};
use crate::scoring::{beta, evs, save_scores, score_dataset, AnnealingStrategy, ScoreRecord};
use crate::selection::{
    baseline_select, coreset_size, save_coreset, select_topk_counted, update_forgetting_ledger,
    Baseline, BaselineState, Coreset, ForgettingLedger, Selector,
};

/// Samples used to calibrate activation scales at QAT start.
const ACT_CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_bits_w")]
    pub bits_w: u32,
    #[serde(default = "default_bits_a")]
    pub bits_a: u32,
    #[serde(default = "default_true")]
    pub signed: bool,
    #[serde(default = "default_true")]
    pub keep_edges_fp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Hidden widths of the teacher; defaults to the student's.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Load the teacher from this checkpoint instead of training it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    /// Total epochs `E`.
    pub epochs: usize,
    /// Selection interval `R`.
    pub interval: usize,
    /// Coreset fraction `S`.
    pub fraction: f64,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_strategy")]
    pub strategy: AnnealingStrategy,
    #[serde(default = "default_selector")]
    pub selector: Selector,
    /// Train against teacher outputs; `false` trains on hard labels and
    /// restricts the adaptive selector to the error-vector score.
    #[serde(default = "default_true")]
    pub kd: bool,
    /// Weight of the one-hot label mixed into distillation targets. Not part
    /// of the distillation objective proper; keep at 0 for pure KD.
    #[serde(default)]
    pub hard_mix: f64,
    /// Early-training epochs for the EL2N and forgetting baselines.
    #[serde(default = "default_early_epochs")]
    pub early_epochs: usize,
    /// Recalibrate weight scales every this many epochs (off by default).
    #[serde(default)]
    pub recalibrate_every: Option<usize>,
    /// Cap on total SGD steps; when set, the epoch count is derived from it.
    #[serde(default)]
    pub step_budget: Option<usize>,
    /// Start the student from the teacher's weights instead of a fresh init.
    #[serde(default)]
    pub init_from_teacher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Fraction of training labels to corrupt.
    #[serde(default)]
    pub noise: f64,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub qat: QatConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_bits_w() -> u32 {
    2
}
fn default_bits_a() -> u32 {
    32
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    32
}
fn default_strategy() -> AnnealingStrategy {
    AnnealingStrategy::Cosine
}
fn default_selector() -> Selector {
    Selector::Acs
}
fn default_early_epochs() -> usize {
    5
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("config cannot be written as TOML: {e}")))
    }

    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            bits_w: self.model.bits_w,
            bits_a: self.model.bits_a,
            signed: self.model.signed,
            keep_edges_fp: self.model.keep_edges_fp,
        }
    }

    /// Annealing strategy actually used: without distillation there is no
    /// teacher distribution, so only the error-vector score is available.
    pub fn effective_strategy(&self) -> AnnealingStrategy {
        if self.qat.kd {
            self.qat.strategy
        } else {
            AnnealingStrategy::EvsOnly
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.qat.kd
    }

    /// Checks every constraint that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let q = &self.qat;
        let bad = |m: String| Err(Error::Config(m));
        if q.epochs == 0 && q.step_budget.is_none() {
            return bad("qat.epochs must be at least 1".into());
        }
        if q.interval == 0 {
            return bad("qat.interval must be at least 1".into());
        }
        if q.step_budget.is_none() && q.interval > q.epochs {
            return bad(format!(
                "qat.interval {} exceeds qat.epochs {}",
                q.interval, q.epochs
            ));
        }
        if !(q.fraction > 0.0 && q.fraction <= 1.0) {
            return bad(format!(
                "qat.fraction must be in (0, 1], got {}",
                q.fraction
            ));
        }
        for (name, lr) in [("qat.lr", q.lr), ("teacher.lr", self.teacher.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if q.batch_size == 0 || self.teacher.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&q.hard_mix) {
            return bad(format!(
                "qat.hard_mix must be in [0, 1], got {}",
                q.hard_mix
            ));
        }
        if q.recalibrate_every == Some(0) || q.step_budget == Some(0) {
            return bad("recalibrate_every and step_budget must be positive when set".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        QuantConfig::new(self.model.bits_w, self.model.signed)?;
        QuantConfig::new(self.model.bits_a, false)?;
        Ok(())
    }

    fn arch(&self, data: &Dataset, hidden: &[usize]) -> Vec<usize> {
        let mut arch = vec![data.dims()];
        arch.extend_from_slice(hidden);
        arch.push(data.classes());
        arch
    }

    pub fn student_arch(&self, data: &Dataset) -> Vec<usize> {
        self.arch(data, &self.model.hidden)
    }

    pub fn teacher_arch(&self, data: &Dataset) -> Vec<usize> {
        self.arch(
            data,
            self.teacher.hidden.as_deref().unwrap_or(&self.model.hidden),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// A selection round ran at the start of this epoch.
    Select,
    /// The previous coreset was carried forward.
    Carry,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Select => "select",
            Phase::Carry => "carry",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub coreset_size: usize,
    pub steps: usize,
    pub selection_time_s: f64,
    pub training_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
    /// Wall time of the QAT loop (selection, training and evaluation).
    pub total_time_s: f64,
}

/// Columns that are a pure function of the configuration.
pub const METRICS_HEADER: &str = "epoch,phase,train_loss,train_acc,test_acc,coreset_size,steps";
pub const TIMING_HEADER: &str = "epoch,selection_time_s,training_time_s";

impl MetricsLog {
    /// Deterministic per-epoch metrics; wall-clock columns live in
    /// [`MetricsLog::write_timing_csv`] so this file is reproducible byte for
    /// byte.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.phase.as_str(),
                r.train_loss,
                r.train_acc,
                r.test_acc,
                r.coreset_size,
                r.steps
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn write_timing_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{TIMING_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{}",
                r.epoch, r.selection_time_s, r.training_time_s
            )?;
        }
        writeln!(out, "total,{},", self.total_time_s)
    }
}

/// Operation counts for the selection step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub selection_rounds: u64,
    /// Single-sample student forwards spent on scoring.
    pub scoring_forwards: u64,
    /// Comparisons made while sorting scores.
    pub sort_comparisons: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRound {
    pub round: usize,
    pub epoch: usize,
    /// `β(t)` for the adaptive selector.
    pub beta: Option<f64>,
    pub coreset_size: usize,
    /// Fraction of the injected noisy samples left out of the coreset.
    pub noisy_recall: Option<f64>,
    pub time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: MetricsLog,
    pub model: Model,
    /// One coreset per selection round.
    pub coresets: Vec<Coreset>,
    pub rounds: Vec<SelectionRound>,
    /// Score dumps of the adaptive selector, one per round.
    pub scores: Vec<Vec<ScoreRecord>>,
    pub counters: OpCounters,
    /// Total epochs actually run.
    pub epochs: usize,
    pub strategy: AnnealingStrategy,
}

impl RunResult {
    pub fn final_test_acc(&self) -> f64 {
        self.metrics.rows.last().map_or(0.0, |r| r.test_acc)
    }

    pub fn final_recall(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.noisy_recall)
    }
}

/// Train/test data with noise applied and, when needed, the teacher.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Option<Model>,
    pub teacher_log: Vec<EpochStats>,
}

/// Loads data, injects label noise and obtains the teacher.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (clean, test) = load_dataset(&config.data)?;
    let train = inject_label_noise(&clean, config.noise, config.seed)?;
    let (teacher, teacher_log) = if config.needs_teacher() {
        let (t, log) = obtain_teacher(config, &train)?;
        (Some(t), log)
    } else {
        (None, Vec::new())
    };
    Ok(Prepared {
        train,
        test,
        teacher,
        teacher_log,
    })
}

pub fn obtain_teacher(config: &RunConfig, train: &Dataset) -> Result<(Model, Vec<EpochStats>)> {
    let arch = config.teacher_arch(train);
    if let Some(path) = &config.teacher.checkpoint {
        let (model, role) = load_checkpoint(path)?;
        if role != "teacher" {
            return Err(Error::Config(format!(
                "{} holds a {role:?} checkpoint, not a teacher",
                path.display()
            )));
        }
        if model.arch() != arch {
            return Err(Error::Config(format!(
                "teacher checkpoint architecture {:?} does not match {arch:?}",
                model.arch()
            )));
        }
        return Ok((model, Vec::new()));
    }
    let params = SgdParams {
        lr: config.teacher.lr,
        batch_size: config.teacher.batch_size,
    };
    train_teacher(&arch, train, config.teacher.epochs, params, config.seed)
}

/// Loads everything and runs quantization-aware training.
pub fn run_qat(config: &RunConfig) -> Result<RunResult> {
    let prepared = prepare(config)?;
    run_qat_with(config, &prepared)
}

/// EL2N scores and forgetting ledger from a short early-training run.
struct EarlyState {
    el2n: Vec<f64>,
    ledger: ForgettingLedger,
}

fn early_training(
    config: &RunConfig,
    init: &Model,
    train: &Dataset,
    targets: Targets<'_>,
    params: SgdParams,
) -> Result<EarlyState> {
    let mut model = init.clone();
    let ids: Vec<usize> = (0..train.len()).collect();
    let mut ledger = ForgettingLedger::new(train.len());
    let observe = |model: &Model, ledger: &mut ForgettingLedger| -> Result<()> {
        let obs: Vec<(usize, bool)> = correctness(model, train, Mode::Quant)?
            .into_iter()
            .enumerate()
            .collect();
        update_forgetting_ledger(ledger, &obs)
    };
    observe(&model, &mut ledger)?;
    for e in 0..config.qat.early_epochs {
        let mut r = rng::indexed_rng(config.seed, stream::EARLY_SHUFFLE, e as u64);
        train_epoch(
            &mut model,
            train,
            &ids,
            targets,
            Mode::Quant,
            params,
            None,
            &mut r,
        )?;
        observe(&model, &mut ledger)?;
    }
    let probs = crate::network::predict_dataset(&model, train, Mode::Quant)?;
    let el2n = probs
        .iter()
        .enumerate()
        .map(|(id, p)| evs(p, &train.one_hot(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EarlyState { el2n, ledger })
}

fn init_student(config: &RunConfig, prepared: &Prepared) -> Result<Model> {
    let arch = config.student_arch(&prepared.train);
    let mut model = match (&prepared.teacher, config.qat.init_from_teacher) {
        (Some(t), true) => {
            if t.arch() != arch {
                return Err(Error::Config(
                    "init_from_teacher needs matching architectures".into(),
                ));
            }
            t.clone()
        }
        (None, true) => return Err(Error::Config("init_from_teacher needs a teacher".into())),
        _ => init_model(&arch, rng::derive_seed(config.seed, stream::STUDENT_INIT))?,
    };
    model.attach_quantizers(&config.quant_spec())?;
    model.calibrate_weight_scales()?;
    let n_cal = prepared.train.len().min(ACT_CALIBRATION_SAMPLES);
    let cal = prepared.train.batch(&(0..n_cal).collect::<Vec<_>>())?;
    model.calibrate_activation_scales(&cal)?;
    Ok(model)
}

/// Runs quantization-aware training on prepared data.
pub fn run_qat_with(config: &RunConfig, prepared: &Prepared) -> Result<RunResult> {
    config.validate()?;
    let train = &prepared.train;
    let test = &prepared.test;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(
            "training and test sets must be non-empty".into(),
        ));
    }
    let n = train.len();
    let q = &config.qat;
    let strategy = config.effective_strategy();

    let teacher_outputs: Option<Vec<ProbVector>> = match (&prepared.teacher, config.needs_teacher())
    {
        (Some(t), true) => {
            let mut cache = TeacherCache::new(t.clone(), n);
            cache.warm_up(train)?;
            Some(cache.outputs()?)
        }
        (None, true) => {
            return Err(Error::State(
                "distillation is on but no teacher was prepared".into(),
            ))
        }
        _ => None,
    };
    let targets = match &teacher_outputs {
        Some(t) => Targets::Soft {
            teacher: t,
            hard_mix: q.hard_mix,
        },
        None => Targets::Hard,
    };
    let params = SgdParams {
        lr: q.lr,
        batch_size: q.batch_size,
    };

    let mut model = init_student(config, prepared)?;

    let per_epoch = match q.selector {
        Selector::Full => n,
        _ => coreset_size(q.fraction, n),
    };
    let steps_per_epoch = per_epoch.div_ceil(q.batch_size);
    let epochs = match q.step_budget {
        Some(b) => b.div_ceil(steps_per_epoch),
        None => q.epochs,
    };
    if q.interval > epochs {
        return Err(Error::Config(format!(
            "qat.interval {} exceeds the {epochs} epochs run",
            q.interval
        )));
    }

    let mut log = MetricsLog::default();
    let mut counters = OpCounters::default();
    let mut coresets: Vec<Coreset> = Vec::new();
    let mut rounds: Vec<SelectionRound> = Vec::new();
    let mut scores: Vec<Vec<ScoreRecord>> = Vec::new();
    let mut early: Option<EarlyState> = None;
    let mut steps_taken = 0usize;
    let loop_start = Instant::now();

    for t in 0..epochs {
        if let Some(k) = q.recalibrate_every {
            if t > 0 && t % k == 0 {
                model.calibrate_weight_scales()?;
            }
        }
        let mut selection_time_s = 0.0;
        let phase = if t % q.interval == 0 {
            let started = Instant::now();
            let round = rounds.len();
            let mut round_beta = None;
            let coreset = match q.selector {
                Selector::Acs => {
                    let b = beta(t, epochs, strategy)?;
                    let records = score_dataset(&model, train, teacher_outputs.as_deref(), t, b)?;
                    counters.scoring_forwards += n as u64;
                    let mut c = select_topk_counted(
                        &records,
                        q.fraction,
                        n,
                        &mut counters.sort_comparisons,
                    )?;
                    c.epoch_created = t;
                    c.seed = config.seed;
                    round_beta = Some(b);
                    scores.push(records);
                    c
                }
                Selector::Full => Coreset::full(t, n, "full", config.seed),
                other => {
                    let baseline = match other {
                        Selector::Random => Baseline::Random,
                        Selector::El2n => Baseline::El2n,
                        Selector::Forgetting => Baseline::Forgetting,
                        _ => Baseline::FullCoverage,
                    };
                    if matches!(baseline, Baseline::El2n | Baseline::Forgetting) && early.is_none()
                    {
                        early = Some(early_training(config, &model, train, targets, params)?);
                    }
                    let state = BaselineState {
                        n,
                        round,
                        epoch: t,
                        el2n_scores: early.as_ref().map(|e| e.el2n.clone()),
                        forgetting: early.as_ref().map(|e| e.ledger.clone()),
                    };
                    let seed = match baseline {
                        Baseline::Random => {
                            rng::derive_indexed(config.seed, stream::SELECTOR, round as u64)
                        }
                        _ => rng::derive_seed(config.seed, stream::SELECTOR),
                    };
                    baseline_select(baseline, &state, q.fraction, seed)?
                }
            };
            selection_time_s = started.elapsed().as_secs_f64();
            let recall = if train.noisy_ids().is_empty() {
                None
            } else {
                Some(noisy_recall(
                    &pruned_ids(n, coreset.ids()),
                    train.noisy_ids(),
                )?)
            };
            counters.selection_rounds += 1;
            rounds.push(SelectionRound {
                round,
                epoch: t,
                beta: round_beta,
                coreset_size: coreset.len(),
                noisy_recall: recall,
                time_s: selection_time_s,
            });
            coresets.push(coreset);
            Phase::Select
        } else {
            Phase::Carry
        };
        let coreset = coresets.last().expect("a coreset is selected at epoch 0");

        let last_good = model.clone();
        let started = Instant::now();
        let mut r = rng::indexed_rng(config.seed, stream::STUDENT_SHUFFLE, t as u64);
        let remaining = q.step_budget.map(|b| b - steps_taken);
        let stats = match train_epoch(
            &mut model,
            train,
            coreset.ids(),
            targets,
            Mode::Quant,
            params,
            remaining,
            &mut r,
        ) {
            Ok(s) => s,
            Err(Error::Run(msg)) => {
                let mut note = String::new();
                if let Some(dir) = &config.out_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let path = dir.join("last_good.ckpt");
                    save_checkpoint(&last_good, "student", &path)?;
                    note = format!("; last good model saved to {}", path.display());
                }
                return Err(Error::Run(format!("epoch {t}: {msg}{note}")));
            }
            Err(e) => return Err(e),
        };
        let training_time_s = started.elapsed().as_secs_f64();
        steps_taken += stats.steps;

        log.rows.push(EpochRow {
            epoch: t,
            phase,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            test_acc: evaluate(&model, test, Mode::Quant)?,
            coreset_size: coreset.len(),
            steps: stats.steps,
            selection_time_s,
            training_time_s,
        });
    }
    log.total_time_s = loop_start.elapsed().as_secs_f64();

    Ok(RunResult {
        metrics: log,
        model,
        coresets,
        rounds,
        scores,
        counters,
        epochs,
        strategy,
    })
}

/// Quantizer settings as written next to a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub bits_w: u32,
    pub bits_a: u32,
    pub signed: bool,
    /// Per-layer weight scales; 0 marks a full-precision layer.
    pub weight_scales: Vec<f64>,
    pub activation_scales: Vec<f64>,
}

impl QuantSummary {
    pub fn of(config: &RunConfig, model: &Model) -> Self {
        let flat = |v: Vec<Option<f64>>| v.into_iter().map(|s| s.unwrap_or(0.0)).collect();
        Self {
            bits_w: config.model.bits_w,
            bits_a: config.model.bits_a,
            signed: config.model.signed,
            weight_scales: flat(model.weight_scales()),
            activation_scales: flat(model.activation_scales()),
        }
    }
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `timing.csv`, `selections.csv`, per-round
/// `scores_epoch<t>.csv` and `coreset_epoch<t>.txt`, checkpoints, the
/// effective config, `quant.toml` and (under label noise) `noisy_ids.txt`
/// into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    config: &RunConfig,
    prepared: &Prepared,
    result: &RunResult,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), |w| result.metrics.write_csv(w))?;
    write_file(&dir.join("timing.csv"), |w| {
        result.metrics.write_timing_csv(w)
    })?;
    write_file(&dir.join("selections.csv"), |w| {
        writeln!(
            w,
            "round,epoch,beta,coreset_size,noisy_recall,selection_time_s"
        )?;
        for r in &result.rounds {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.round,
                r.epoch,
                opt(r.beta),
                r.coreset_size,
                opt(r.noisy_recall),
                r.time_s
            )?;
        }
        Ok(())
    })?;
    for records in &result.scores {
        if let Some(first) = records.first() {
            save_scores(
                records,
                &dir.join(format!("scores_epoch{}.csv", first.epoch)),
            )?;
        }
    }
    for c in &result.coresets {
        save_coreset(
            c,
            &dir.join(format!("coreset_epoch{}.txt", c.epoch_created)),
        )?;
    }
    if !prepared.train.noisy_ids().is_empty() {
        let mut text = String::new();
        for id in prepared.train.noisy_ids() {
            text.push_str(&format!("{id}\n"));
        }
        std::fs::write(dir.join("noisy_ids.txt"), text)
            .map_err(|e| Error::io(dir.join("noisy_ids.txt"), e))?;
    }
    save_checkpoint(&result.model, "student", dir.join("student.ckpt"))?;
    if let Some(t) = &prepared.teacher {
        save_checkpoint(t, "teacher", dir.join("teacher.ckpt"))?;
    }
    let summary = QuantSummary::of(config, &result.model);
    std::fs::write(
        dir.join("quant.toml"),
        toml::to_string(&summary).expect("serializable"),
    )
    .map_err(|e| Error::io(dir.join("quant.toml"), e))?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)
        .map_err(|e| Error::io(dir.join("config.toml"), e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Fraction,
    Interval,
    Strategy,
    Selector,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Fraction => "fraction",
            SweepAxis::Interval => "interval",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Selector => "selector",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fraction" | "S" => Ok(SweepAxis::Fraction),
            "interval" | "R" => Ok(SweepAxis::Interval),
            "strategy" => Ok(SweepAxis::Strategy),
            "selector" => Ok(SweepAxis::Selector),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// Applies one sweep value to a config.
pub fn apply_axis(config: &mut RunConfig, axis: SweepAxis, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("invalid {axis} value {value:?}"));
    match axis {
        SweepAxis::Fraction => config.qat.fraction = value.parse().map_err(|_| bad())?,
        SweepAxis::Interval => config.qat.interval = value.parse().map_err(|_| bad())?,
        SweepAxis::Strategy => config.qat.strategy = value.parse()?,
        SweepAxis::Selector => config.qat.selector = value.parse()?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    /// `Err` holds the child run's error message.
    pub outcome: std::result::Result<SweepOutcome, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    pub final_test_acc: f64,
    pub total_time_s: f64,
    pub selection_time_s: f64,
    pub training_time_s: f64,
    pub counters: OpCounters,
    pub final_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepSeeds {
    /// Child `i` uses a seed derived from the base seed and `i`.
    Derived,
    /// Every child uses the base seed.
    Shared,
}

/// One run per value. Data, noise and the teacher are prepared once from the
/// base config; each child gets its own seed for initialization, shuffling
/// and random selection. Failed children are recorded and the sweep goes on.
pub fn run_sweep(
    base: &RunConfig,
    prepared: &Prepared,
    axis: SweepAxis,
    values: &[String],
    seeds: SweepSeeds,
) -> Vec<SweepRow> {
    values
        .iter()
        .enumerate()
        .map(|(i, value)| {
            let seed = match seeds {
                // kept below 2^63 so the seed round-trips through TOML
                SweepSeeds::Derived => {
                    rng::derive_indexed(base.seed, stream::SWEEP, i as u64) & (i64::MAX as u64)
                }
                SweepSeeds::Shared => base.seed,
            };
            let mut config = base.clone();
            config.seed = seed;
            config.out_dir = base
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("{axis}_{value}")));
            let outcome = apply_axis(&mut config, axis, value)
                .and_then(|_| {
                    let result = run_qat_with(&config, prepared)?;
                    if let Some(dir) = &config.out_dir {
                        write_run_outputs(dir, &config, prepared, &result)?;
                    }
                    Ok(result)
                })
                .map(|r| {
                    let timing = timing_breakdown(&r.metrics);
                    SweepOutcome {
                        final_test_acc: r.final_test_acc(),
                        total_time_s: timing.total,
                        selection_time_s: timing.selection,
                        training_time_s: timing.training,
                        counters: r.counters,
                        final_recall: r.final_recall(),
                    }
                })
                .map_err(|e| format!("{}: {e}", e.kind()));
            SweepRow {
                value: value.clone(),
                seed,
                outcome,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "value,seed,status,final_test_acc,total_time_s,selection_time_s,training_time_s,selection_rounds,scoring_forwards,final_noisy_recall";

pub fn write_summary_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        match &r.outcome {
            Ok(o) => writeln!(
                out,
                "{},{},ok,{},{},{},{},{},{},{}",
                r.value,
                r.seed,
                o.final_test_acc,
                o.total_time_s,
                o.selection_time_s,
                o.training_time_s,
                o.counters.selection_rounds,
                o.counters.scoring_forwards,
                o.final_recall.map(|v| v.to_string()).unwrap_or_default()
            )?,
            Err(msg) => writeln!(
                out,
                "{},{},\"error: {}\",,,,,,,",
                r.value,
                r.seed,
                msg.replace('"', "'")
            )?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Evs,
    Ds,
    Acs,
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evs" => Ok(ScoreKind::Evs),
            "ds" => Ok(ScoreKind::Ds),
            "acs" => Ok(ScoreKind::Acs),
            _ => Err(Error::Config(format!("unknown score kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width histogram of one score over `[0, √2]` for one epoch of a dump.
/// Values at or above `√2` land in the last bin.
pub fn export_score_histogram(
    records: &[ScoreRecord],
    epoch: usize,
    bins: usize,
    kind: ScoreKind,
) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let selected: Vec<&ScoreRecord> = records.iter().filter(|r| r.epoch == epoch).collect();
    if selected.is_empty() {
        return Err(Error::Input(format!(
            "score dump has no records for epoch {epoch}"
        )));
    }
    let top = std::f64::consts::SQRT_2;
    let width = top / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 * width,
            hi: if i + 1 == bins {
                top
            } else {
                (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for r in selected {
        let v = match kind {
            ScoreKind::Evs => r.d_evs,
            ScoreKind::Ds => r.d_ds.ok_or_else(|| {
                Error::Input(format!("sample {} has no disagreement score", r.sample_id))
            })?,
            ScoreKind::Acs => r.d_acs,
        };
        let idx = ((v.max(0.0) / width).floor() as usize).min(bins - 1);
        out[idx].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv(bins: &[HistogramBin], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count")?;
    for b in bins {
        writeln!(out, "{},{},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingBreakdown {
    pub total: f64,
    /// Scoring and sorting (plus any baseline early training).
    pub selection: f64,
    pub training: f64,
}

pub fn timing_breakdown(log: &MetricsLog) -> TimingBreakdown {
    TimingBreakdown {
        total: log.total_time_s,
        selection: log.rows.iter().map(|r| r.selection_time_s).sum(),
        training: log.rows.iter().map(|r| r.training_time_s).sum(),
    }
}

/// Ids of each coreset keyed by the epoch it was created.
pub fn coreset_history(result: &RunResult) -> BTreeMap<usize, Vec<usize>> {
    result
        .coresets
        .iter()
        .map(|c| (c.epoch_created, c.ids().to_vec()))
        .collect()
}
