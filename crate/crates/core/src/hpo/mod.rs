//! Hyperband over head and augmentation hyperparameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, FlipType};
use crate::error::{Error, Result};
use crate::model::{HeadConfig, DENSE_CHOICES, LR_MAX, LR_MIN, MAX_DROPOUT, MAX_LAYERS};
use crate::rng::stream;

/// Closed interval; `lo == hi` pins the dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn within(&self, lo: f64, hi: f64) -> bool {
        lo <= self.lo && self.lo <= self.hi && self.hi <= hi
    }

    fn uniform(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + u * (self.hi - self.lo)
    }

    fn log_uniform(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        if self.lo == self.hi {
            return self.lo;
        }
        (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp().clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpace {
    pub rotation: Interval,
    pub zoom: Interval,
    pub contrast: Interval,
    pub brightness: Interval,
    pub tr_width: Interval,
    pub tr_height: Interval,
    pub flip_types: Vec<FlipType>,
}

impl Default for AugmentSpace {
    fn default() -> Self {
        let f = Interval::new(0.0, 0.5);
        Self {
            rotation: f,
            zoom: f,
            contrast: f,
            brightness: f,
            tr_width: f,
            tr_height: f,
            flip_types: vec![FlipType::Vertical, FlipType::Horizontal, FlipType::Both],
        }
    }
}

/// Joint head + learning-rate (+ augmentation) search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub learning_rate: Interval,
    pub n_layers: Vec<usize>,
    pub dense_units: Vec<usize>,
    pub dropout: Interval,
    /// Absent when augmentation is disabled.
    pub augment: Option<AugmentSpace>,
}

impl SearchSpace {
    pub fn new(with_augmentation: bool) -> Self {
        Self {
            learning_rate: Interval::new(LR_MIN, LR_MAX),
            n_layers: vec![1, 2, 3],
            dense_units: DENSE_CHOICES.to_vec(),
            dropout: Interval::new(0.0, MAX_DROPOUT),
            augment: with_augmentation.then(AugmentSpace::default),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.within(LR_MIN, LR_MAX) {
            return Err(Error::invalid("learning-rate range outside [1e-6, 1e-3]"));
        }
        if !self.dropout.within(0.0, MAX_DROPOUT) {
            return Err(Error::invalid("dropout range outside [0, 0.5]"));
        }
        if self.n_layers.is_empty() || self.n_layers.iter().any(|n| !(1..=MAX_LAYERS).contains(n)) {
            return Err(Error::invalid("n_layers choices must be a non-empty subset of {1, 2, 3}"));
        }
        if self.dense_units.is_empty() || self.dense_units.iter().any(|u| !DENSE_CHOICES.contains(u)) {
            return Err(Error::invalid(format!("dense choices must be a non-empty subset of {DENSE_CHOICES:?}")));
        }
        if let Some(a) = &self.augment {
            for (name, r) in [
                ("rotation", a.rotation),
                ("zoom", a.zoom),
                ("contrast", a.contrast),
                ("brightness", a.brightness),
                ("tr_width", a.tr_width),
                ("tr_height", a.tr_height),
            ] {
                if !r.within(0.0, 0.5) {
                    return Err(Error::invalid(format!("{name} range outside [0, 0.5]")));
                }
            }
            if a.flip_types.is_empty() {
                return Err(Error::invalid("no flip types to choose from"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, c: &TrialConfig) -> bool {
        let lr = c.head.learning_rate;
        let head_ok = c.head.validate().is_ok()
            && lr >= self.learning_rate.lo
            && lr <= self.learning_rate.hi
            && self.n_layers.contains(&c.head.n_layers)
            && c.head.layers().all(|(u, d)| {
                self.dense_units.contains(&u) && d >= self.dropout.lo && d <= self.dropout.hi
            });
        let aug_ok = match (&self.augment, &c.augment) {
            (None, None) => true,
            (Some(s), Some(a)) => {
                let inside = |r: Interval, v: f64| v >= r.lo && v <= r.hi;
                inside(s.rotation, a.rotation)
                    && inside(s.zoom, a.zoom)
                    && inside(s.contrast, a.contrast)
                    && inside(s.brightness, a.brightness)
                    && inside(s.tr_width, a.tr_width)
                    && inside(s.tr_height, a.tr_height)
                    && s.flip_types.contains(&a.flip_type)
            }
            _ => false,
        };
        head_ok && aug_ok
    }
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub head: HeadConfig,
    pub augment: Option<AugmentConfig>,
}

impl TrialConfig {
    /// Flat `name -> value` view used by the trial log and plots. Inactive
    /// head slots read 0.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("learning_rate".into(), self.head.learning_rate);
        m.insert("n_layers".into(), self.head.n_layers as f64);
        for i in 0..MAX_LAYERS {
            m.insert(format!("dense_{}", i + 1), self.head.dense_units[i] as f64);
            m.insert(format!("dropout_{}", i + 1), self.head.dropout[i]);
        }
        if let Some(a) = &self.augment {
            for (name, v) in a.factors() {
                m.insert(name.into(), v);
            }
            m.insert("flip_type".into(), f64::from(a.flip_type as u8));
        }
        m
    }

    fn from_flat(m: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| m.get(k).copied().ok_or_else(|| Error::invalid(format!("trial log lacks {k}")));
        let head = HeadConfig {
            n_layers: get("n_layers")? as usize,
            dense_units: [get("dense_1")? as usize, get("dense_2")? as usize, get("dense_3")? as usize],
            dropout: [get("dropout_1")?, get("dropout_2")?, get("dropout_3")?],
            learning_rate: get("learning_rate")?,
        };
        let augment = if m.contains_key("flip_type") {
            let flip_type = match get("flip_type")? as u8 {
                0 => FlipType::Vertical,
                1 => FlipType::Horizontal,
                2 => FlipType::Both,
                other => return Err(Error::invalid(format!("bad flip type {other}"))),
            };
            Some(AugmentConfig {
                rotation: get("rotation")?,
                zoom: get("zoom")?,
                contrast: get("contrast")?,
                brightness: get("brightness")?,
                tr_width: get("tr_width")?,
                tr_height: get("tr_height")?,
                flip_type,
            })
        } else {
            None
        };
        Ok(Self { head, augment })
    }
}

/// Independent draw per dimension; the learning rate is log-uniform.
pub fn sample_config(space: &SearchSpace, rng: &mut impl Rng) -> TrialConfig {
    let learning_rate = space.learning_rate.log_uniform(rng);
    let n_layers = *space.n_layers.choose(rng).expect("validated space");
    let mut dense_units = [0; MAX_LAYERS];
    let mut dropout = [0.0; MAX_LAYERS];
    for i in 0..n_layers {
        dense_units[i] = *space.dense_units.choose(rng).expect("validated space");
        dropout[i] = space.dropout.uniform(rng);
    }
    let augment = space.augment.as_ref().map(|a| AugmentConfig {
        rotation: a.rotation.uniform(rng),
        zoom: a.zoom.uniform(rng),
        contrast: a.contrast.uniform(rng),
        brightness: a.brightness.uniform(rng),
        tr_width: a.tr_width.uniform(rng),
        tr_height: a.tr_height.uniform(rng),
        flip_type: *a.flip_types.choose(rng).expect("validated space"),
    });
    TrialConfig {
        head: HeadConfig {
            n_layers,
            dense_units,
            dropout,
            learning_rate,
        },
        augment,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandConfig {
    /// Maximum epochs granted to a single trial.
    pub max_resource: usize,
    pub eta: usize,
    pub seed: u64,
}

impl Default for HyperbandConfig {
    fn default() -> Self {
        Self {
            max_resource: 27,
            eta: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

fn check_budget(r: usize, eta: usize) -> Result<()> {
    if r < 1 || eta < 2 {
        return Err(Error::invalid(format!("hyperband needs R >= 1 and eta >= 2, got R={r}, eta={eta}")));
    }
    Ok(())
}

/// Brackets `s = s_max ..= 0`, where `s_max = floor(log_eta R)`.
///
/// Bracket `s` starts with `ceil((s_max + 1) / (s + 1) * eta^s)` configs at
/// `R * eta^-s` epochs; rung `i` keeps `floor(n / eta^i)` configs at
/// `R * eta^(i - s)` epochs (floored, at least 1).
pub fn hyperband_schedule(max_resource: usize, eta: usize) -> Result<Vec<Bracket>> {
    check_budget(max_resource, eta)?;
    let mut s_max = 0;
    while eta.pow(s_max as u32 + 1) <= max_resource {
        s_max += 1;
    }
    let mut brackets = Vec::new();
    for s in (0..=s_max).rev() {
        let n0 = ((s_max + 1) * eta.pow(s as u32)).div_ceil(s + 1);
        let rungs = (0..=s)
            .map(|i| Rung {
                n: n0 / eta.pow(i as u32),
                r: (max_resource / eta.pow((s - i) as u32)).max(1),
            })
            .take_while(|r| r.n > 0)
            .collect();
        brackets.push(Bracket { s, rungs });
    }
    Ok(brackets)
}

/// Epochs consumed when every rung retrains from scratch.
pub fn schedule_cost(brackets: &[Bracket]) -> usize {
    brackets.iter().flat_map(|b| &b.rungs).map(|r| r.n * r.r).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Identifies the configuration; repeated across the rungs it reaches.
    pub trial_id: usize,
    pub bracket: usize,
    pub rung: usize,
    pub resource: usize,
    pub score: f64,
    pub failed: bool,
    pub config: TrialConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbandResult {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

/// Score of a configuration trained for `resource` epochs. The seed is
/// derived from the search seed and the trial id.
pub trait Objective: Sync {
    fn evaluate(&self, config: &TrialConfig, resource: usize, seed: u64) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&TrialConfig, usize, u64) -> Result<f64> + Sync,
{
    fn evaluate(&self, config: &TrialConfig, resource: usize, seed: u64) -> Result<f64> {
        self(config, resource, seed)
    }
}

/// Successive halving inside every bracket. Trials of one rung run in
/// parallel; promotion keeps the top `n_(i+1)` by score, ties to the lower
/// trial id. A failing or non-finite objective scores 0 and is flagged.
pub fn run_hyperband(space: &SearchSpace, objective: &dyn Objective, hb: &HyperbandConfig) -> Result<HyperbandResult> {
    space.validate()?;
    let schedule = hyperband_schedule(hb.max_resource, hb.eta)?;
    let mut trials = Vec::new();
    let mut next_id = 0;
    for bracket in &schedule {
        let mut rng = stream(hb.seed, &[0x4B, bracket.s as u64]);
        let mut alive: Vec<(usize, TrialConfig)> = (0..bracket.rungs[0].n)
            .map(|_| {
                let c = sample_config(space, &mut rng);
                next_id += 1;
                (next_id - 1, c)
            })
            .collect();
        for (i, rung) in bracket.rungs.iter().enumerate() {
            let scored: Vec<TrialRecord> = alive
                .par_iter()
                .map(|(id, config)| {
                    let seed = stream(hb.seed, &[0x7E, *id as u64]).random();
                    let (score, failed) = match objective.evaluate(config, rung.r, seed) {
                        Ok(v) if v.is_finite() => (v.clamp(0.0, 1.0), false),
                        _ => (0.0, true),
                    };
                    TrialRecord {
                        trial_id: *id,
                        bracket: bracket.s,
                        rung: i,
                        resource: rung.r,
                        score,
                        failed,
                        config: config.clone(),
                    }
                })
                .collect();
            trials.extend(scored.iter().cloned());
            if let Some(next) = bracket.rungs.get(i + 1) {
                let mut ranked = scored;
                ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.trial_id.cmp(&b.trial_id)));
                alive = ranked.into_iter().take(next.n).map(|t| (t.trial_id, t.config)).collect();
            }
        }
    }
    let best = best_trial(&trials).cloned().ok_or_else(|| Error::invalid("empty schedule"))?;
    Ok(HyperbandResult { best, trials })
}

/// Highest score; ties to the lower trial id, then the earlier record.
pub fn best_trial(trials: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for t in trials {
        best = match best {
            Some(b) if t.score > b.score || (t.score == b.score && t.trial_id < b.trial_id) => Some(t),
            None => Some(t),
            keep => keep,
        };
    }
    best
}

impl TrialRecord {
    /// One flat JSON object per trial evaluation.
    pub fn to_log_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("trial_id".into(), self.trial_id.into());
        obj.insert("bracket".into(), self.bracket.into());
        obj.insert("rung".into(), self.rung.into());
        obj.insert("resource".into(), self.resource.into());
        obj.insert("score".into(), self.score.into());
        obj.insert("failed".into(), self.failed.into());
        for (k, v) in self.config.flat() {
            obj.insert(k, v.into());
        }
        serde_json::Value::Object(obj).to_string()
    }

    pub fn from_log_line(line: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v.as_object().ok_or_else(|| Error::invalid("trial log line is not an object"))?;
        let int = |k: &str| {
            obj.get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::invalid(format!("trial log lacks {k}")))
        };
        let mut flat = BTreeMap::new();
        for (k, v) in obj {
            if !["trial_id", "bracket", "rung", "resource", "score", "failed"].contains(&k.as_str()) {
                if let Some(x) = v.as_f64() {
                    flat.insert(k.clone(), x);
                }
            }
        }
        Ok(Self {
            trial_id: int("trial_id")?,
            bracket: int("bracket")?,
            rung: int("rung")?,
            resource: int("resource")?,
            score: obj
                .get("score")
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::invalid("trial log lacks score"))?,
            failed: obj.get("failed").and_then(serde_json::Value::as_bool).unwrap_or(false),
            config: TrialConfig::from_flat(&flat)?,
        })
    }
}

pub fn write_trial_log(path: impl AsRef<Path>, trials: &[TrialRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in trials {
        writeln!(f, "{}", t.to_log_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(TrialRecord::from_log_line).collect()
}

/// Per-hyperparameter `(value, score)` series for exploration plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationData {
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
    /// Index of the best trial within each series.
    pub best_index: usize,
    pub best_trial_id: usize,
}

pub fn exploration_plot_data(trials: &[TrialRecord]) -> Result<ExplorationData> {
    let best = best_trial(trials).ok_or_else(|| Error::invalid("empty trial log"))?;
    let best_index = trials.iter().position(|t| std::ptr::eq(t, best)).expect("member");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let keys: Vec<String> = trials.iter().flat_map(|t| t.config.flat().into_keys()).collect();
    for k in keys {
        series.entry(k).or_default();
    }
    for t in trials {
        let flat = t.config.flat();
        for (k, s) in series.iter_mut() {
            s.push((flat.get(k).copied().unwrap_or(0.0), t.score));
        }
    }
    Ok(ExplorationData {
        series,
        best_index,
        best_trial_id: best.trial_id,
    })
}
