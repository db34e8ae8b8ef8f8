//! Coreset selection: top-k by combined score plus the random, EL2N,
//! forgetting-event and full-coverage baselines, and coreset files.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scoring::ScoreRecord;

/// `max(1, floor(S·N))`. A 1e-9 slack absorbs representation error such as
/// `0.29 · 100 = 28.999999999999996`.
pub fn coreset_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "coreset fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// The training subset for a range of epochs. Members are kept sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    pub epoch_created: usize,
    member_ids: Vec<usize>,
    pub fraction: f64,
    pub strategy: String,
    pub seed: u64,
}

impl Coreset {
    pub fn new(
        epoch_created: usize,
        mut member_ids: Vec<usize>,
        fraction: f64,
        strategy: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        member_ids.sort_unstable();
        if let Some(w) = member_ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Input(format!("duplicate coreset member {}", w[0])));
        }
        Ok(Self {
            epoch_created,
            member_ids,
            fraction,
            strategy: strategy.into(),
            seed,
        })
    }

    /// Every id of a dataset of size `n`.
    pub fn full(epoch_created: usize, n: usize, strategy: impl Into<String>, seed: u64) -> Self {
        Self {
            epoch_created,
            member_ids: (0..n).collect(),
            fraction: 1.0,
            strategy: strategy.into(),
            seed,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.member_ids
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn id_set(&self) -> BTreeSet<usize> {
        self.member_ids.iter().copied().collect()
    }
}

/// Descending by value, ascending id on ties.
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k_by(values: &[f64], k: usize, comparisons: &mut u64) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    order.sort_by(|&a, &b| {
        *comparisons += 1;
        rank_order(a, b)
    });
    order.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Indexes `scores` by sample id, requiring exactly one record per id `0..n`.
fn acs_by_id(scores: &[ScoreRecord], n: usize) -> Result<Vec<f64>> {
    let mut by_id = vec![None; n];
    for r in scores {
        let slot = by_id
            .get_mut(r.sample_id)
            .ok_or_else(|| Error::Input(format!("score for unknown sample id {}", r.sample_id)))?;
        if slot.replace(r.d_acs).is_some() {
            return Err(Error::Input(format!(
                "duplicate score for sample id {}",
                r.sample_id
            )));
        }
    }
    by_id
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or_else(|| Error::Input(format!("missing score for sample id {id}"))))
        .collect()
}

/// The `max(1, floor(S·N))` samples with the highest `d_acs`, ties broken by
/// ascending id.
pub fn select_topk(scores: &[ScoreRecord], fraction: f64, n: usize) -> Result<Coreset> {
    select_topk_counted(scores, fraction, n, &mut 0)
}

/// [`select_topk`] that also adds the number of sort comparisons to `comparisons`.
pub fn select_topk_counted(
    scores: &[ScoreRecord],
    fraction: f64,
    n: usize,
    comparisons: &mut u64,
) -> Result<Coreset> {
    check_fraction(fraction)?;
    if n == 0 {
        return Err(Error::Input("cannot select from an empty dataset".into()));
    }
    let values = acs_by_id(scores, n)?;
    let epoch = scores.first().map_or(0, |r| r.epoch);
    let ids = top_k_by(&values, coreset_size(fraction, n), comparisons);
    Coreset::new(epoch, ids, fraction, "acs", 0)
}

/// Per-sample forgetting-event counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForgettingLedger {
    previous: Vec<Option<bool>>,
    events: Vec<u32>,
}

impl ForgettingLedger {
    pub fn new(n: usize) -> Self {
        Self {
            previous: vec![None; n],
            events: vec![0; n],
        }
    }

    pub fn events(&self) -> &[u32] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Records one round of correctness observations `(sample id, correct)`.
/// A forgetting event is a transition from correct to incorrect.
pub fn update_forgetting_ledger(
    ledger: &mut ForgettingLedger,
    observations: &[(usize, bool)],
) -> Result<()> {
    if let Some(&(id, _)) = observations.iter().find(|(id, _)| *id >= ledger.len()) {
        return Err(Error::Input(format!(
            "unknown sample id {id} in forgetting ledger"
        )));
    }
    for &(id, correct) in observations {
        if ledger.previous[id] == Some(true) && !correct {
            ledger.events[id] += 1;
        }
        ledger.previous[id] = Some(correct);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Adaptive selection by combined score.
    Acs,
    Random,
    El2n,
    Forgetting,
    FullCoverage,
    /// No selection: every epoch trains on all samples.
    Full,
}

impl Selector {
    pub const ALL: [Selector; 6] = [
        Selector::Acs,
        Selector::Random,
        Selector::El2n,
        Selector::Forgetting,
        Selector::FullCoverage,
        Selector::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Acs => "acs",
            Selector::Random => "random",
            Selector::El2n => "el2n",
            Selector::Forgetting => "forgetting",
            Selector::FullCoverage => "full_coverage",
            Selector::Full => "full",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Random,
    El2n,
    Forgetting,
    FullCoverage,
}

impl Baseline {
    pub fn tag(self) -> &'static str {
        match self {
            Baseline::Random => "random",
            Baseline::El2n => "el2n",
            Baseline::Forgetting => "forgetting",
            Baseline::FullCoverage => "full_coverage",
        }
    }
}

/// Inputs the baseline selectors draw on.
#[derive(Debug, Clone, Default)]
pub struct BaselineState {
    pub n: usize,
    /// Selection round index (full coverage).
    pub round: usize,
    pub epoch: usize,
    /// Error-vector scores of the early-trained model, by id (EL2N).
    pub el2n_scores: Option<Vec<f64>>,
    pub forgetting: Option<ForgettingLedger>,
}

pub fn baseline_select(
    baseline: Baseline,
    state: &BaselineState,
    fraction: f64,
    seed: u64,
) -> Result<Coreset> {
    check_fraction(fraction)?;
    let n = state.n;
    if n == 0 {
        return Err(Error::Input("cannot select from an empty dataset".into()));
    }
    let k = coreset_size(fraction, n);
    let ids = match baseline {
        Baseline::Random => {
            let mut r = rng::stream_rng(seed, stream::SELECTOR);
            sample(&mut r, n, k).into_vec()
        }
        Baseline::El2n => {
            let scores = state
                .el2n_scores
                .as_ref()
                .ok_or_else(|| Error::State("EL2N selection needs early-training scores".into()))?;
            if scores.len() != n {
                return Err(Error::Dimension(format!(
                    "{} EL2N scores for {n} samples",
                    scores.len()
                )));
            }
            top_k_by(scores, k, &mut 0)
        }
        Baseline::Forgetting => {
            let ledger = state.forgetting.as_ref().ok_or_else(|| {
                Error::State("forgetting selection needs an early-training ledger".into())
            })?;
            if ledger.len() != n {
                return Err(Error::Dimension(format!(
                    "ledger tracks {} of {n} samples",
                    ledger.len()
                )));
            }
            let counts: Vec<f64> = ledger.events().iter().map(|&c| f64::from(c)).collect();
            top_k_by(&counts, k, &mut 0)
        }
        Baseline::FullCoverage => full_coverage_blocks(n, fraction, seed)
            .into_iter()
            .cycle()
            .nth(state.round)
            .expect("at least one block"),
    };
    Coreset::new(state.epoch, ids, fraction, baseline.tag(), seed)
}

/// A seeded random partition of `0..n` into blocks of `max(1, floor(S·N))`
/// ids; the last block holds the remainder.
pub fn full_coverage_blocks(n: usize, fraction: f64, seed: u64) -> Vec<Vec<usize>> {
    let k = coreset_size(fraction, n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream_rng(seed, stream::SELECTOR));
    ids.chunks(k).map(<[usize]>::to_vec).collect()
}

/// `100 · |a ∩ b| / |a|` for equally sized coresets.
pub fn coreset_overlap(a: &Coreset, b: &Coreset) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "overlap needs equal, non-empty coresets (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let bs = b.id_set();
    let common = a.ids().iter().filter(|id| bs.contains(id)).count();
    Ok(100.0 * common as f64 / a.len() as f64)
}

pub fn write_coreset(c: &Coreset, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "#coreset v1 strategy={} S={} epoch={} seed={}",
        c.strategy, c.fraction, c.epoch_created, c.seed
    )?;
    for id in c.ids() {
        writeln!(out, "{id}")?;
    }
    Ok(())
}

pub fn save_coreset(c: &Coreset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_coreset(c, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Parses a coreset file, checking every id against a dataset of `n` samples.
pub fn parse_coreset(text: &str, n: usize) -> Result<Coreset> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let fields = header
        .strip_prefix("#coreset v1")
        .ok_or_else(|| Error::format(0, "coreset file must start with `#coreset v1`"))?;
    let (mut strategy, mut fraction, mut epoch, mut seed) = (None, None, None, None);
    for kv in fields.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(0, format!("bad header field {kv:?}")))?;
        let bad = || Error::format(0, format!("bad value in header field {kv:?}"));
        match k {
            "strategy" => strategy = Some(v.to_string()),
            "S" => fraction = Some(v.parse::<f64>().map_err(|_| bad())?),
            "epoch" => epoch = Some(v.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            _ => return Err(Error::format(0, format!("unknown header field {k:?}"))),
        }
    }
    let missing = |f: &str| Error::format(0, format!("coreset header lacks {f}="));
    let mut offset = header.len() as u64 + 1;
    let mut ids = Vec::new();
    for line in lines {
        let t = line.trim();
        if !t.is_empty() {
            let id: usize = t
                .parse()
                .map_err(|_| Error::format(offset, format!("bad sample id {t:?}")))?;
            if id >= n {
                return Err(Error::Input(format!(
                    "coreset id {id} not in dataset of {n} samples"
                )));
            }
            ids.push(id);
        }
        offset += line.len() as u64 + 1;
    }
    Coreset::new(
        epoch.ok_or_else(|| missing("epoch"))?,
        ids,
        fraction.ok_or_else(|| missing("S"))?,
        strategy.ok_or_else(|| missing("strategy"))?,
        seed.ok_or_else(|| missing("seed"))?,
    )
}

pub fn load_coreset(path: &Path, n: usize) -> Result<Coreset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coreset(&text, n)
}
