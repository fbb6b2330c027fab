//! Black-box search over the quantized glitch parameter space.
//!
//! Three strategies share one evaluation path (a full protocol campaign per
//! configuration): uniform `Random`, an evenly-strided `Grid`, and
//! `Adaptive`, a density-ratio sampler in the style of a tree-structured
//! Parzen estimator. `Adaptive` splits past evaluations at the median score,
//! models each dimension of the good and bad sets with discretised Gaussian
//! kernels over level indices, draws candidates around good points (or
//! uniformly with probability `epsilon`) and evaluates the candidate with
//! the highest good/bad density ratio.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erf;
use serde::{Deserialize, Serialize};

use crate::campaign::{run_config, ConfigResult, ProtocolInput, Target, TrialRecord, Verdict};
use crate::error::{Error, Result};
use crate::fault::{GlitchConfig, GLITCH_UNIT_MAX, GLITCH_UNIT_STEP, MAX_REPEAT};
use crate::model::{NUM_CLASSES, NUM_QUBITS};
use crate::seed;
use crate::trace::{Layer, MicroOpTrace};

/// One quantized dimension: `min, min + step, ..., <= max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: u64,
    pub max: u64,
    pub step: u64,
}

impl Axis {
    pub fn new(min: u64, max: u64, step: u64) -> Self {
        Axis { min, max, step }
    }

    pub fn levels(&self) -> u64 {
        (self.max - self.min) / self.step + 1
    }

    pub fn value(&self, level: u64) -> u64 {
        self.min + level * self.step
    }

    pub fn contains(&self, v: u64) -> bool {
        v >= self.min && v <= self.max && (v - self.min) % self.step == 0
    }

    /// Nearest level to `v`, ties toward the lower level. `None` if out of range.
    fn snap(&self, v: f64) -> Option<u64> {
        if !(v >= self.min as f64 && v <= self.max as f64) {
            return None;
        }
        let r = (v - self.min as f64) / self.step as f64;
        let lower = r.floor();
        let level = if r - lower > 0.5 { lower + 1.0 } else { lower } as u64;
        Some(level.min(self.levels() - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub width: Axis,
    pub offset: Axis,
    pub external_offset: Axis,
    pub repeat: Axis,
}

impl SearchSpace {
    fn with_external(external_offset: Axis) -> Self {
        let unit = GLITCH_UNIT_STEP as u64;
        SearchSpace {
            width: Axis::new(0, GLITCH_UNIT_MAX as u64, unit),
            offset: Axis::new(0, GLITCH_UNIT_MAX as u64, unit),
            external_offset,
            repeat: Axis::new(1, MAX_REPEAT as u64, 1),
        }
    }

    /// Full parameter table, external offset spanning the whole trace.
    pub fn full(trace: &MicroOpTrace) -> Self {
        Self::with_external(Axis::new(0, trace.total_cycles, 1))
    }

    /// External offset restricted to one layer's window.
    pub fn layer(trace: &MicroOpTrace, layer: Layer) -> Result<Self> {
        let (s, e) = trace
            .window(layer)
            .ok_or_else(|| Error::invalid(format!("trace has no {layer} window")))?;
        Ok(Self::with_external(Axis::new(s, e, 1)))
    }

    fn axes(&self) -> [&Axis; 4] {
        [&self.width, &self.offset, &self.external_offset, &self.repeat]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in ["width", "offset", "external_offset", "repeat"]
            .iter()
            .zip(self.axes())
        {
            if a.step == 0 {
                return Err(Error::invalid(format!("{name} step must be positive")));
            }
            if a.min > a.max {
                return Err(Error::invalid(format!(
                    "{name} range is empty (min {} > max {})",
                    a.min, a.max
                )));
            }
        }
        let unit = GLITCH_UNIT_STEP as u64;
        for (name, a) in [("width", &self.width), ("offset", &self.offset)] {
            if a.max > GLITCH_UNIT_MAX as u64 || a.min % unit != 0 || a.step % unit != 0 {
                return Err(Error::invalid(format!(
                    "{name} axis must use multiples of {unit} within [0, {GLITCH_UNIT_MAX}]"
                )));
            }
        }
        if self.repeat.min < 1 || self.repeat.max > MAX_REPEAT as u64 {
            return Err(Error::invalid(format!("repeat axis must lie in [1, {MAX_REPEAT}]")));
        }
        Ok(())
    }

    /// Number of distinct quantized configurations.
    pub fn size(&self) -> u128 {
        self.axes().iter().map(|a| a.levels() as u128).product()
    }

    pub fn contains(&self, g: &GlitchConfig) -> bool {
        self.width.contains(g.width as u64)
            && self.offset.contains(g.offset as u64)
            && self.external_offset.contains(g.external_offset)
            && self.repeat.contains(g.repeat as u64)
    }

    fn level_counts(&self) -> [u64; 4] {
        self.axes().map(Axis::levels)
    }

    fn config(&self, p: Levels) -> GlitchConfig {
        GlitchConfig {
            width: self.width.value(p[0]) as u32,
            offset: self.offset.value(p[1]) as u32,
            external_offset: self.external_offset.value(p[2]),
            repeat: self.repeat.value(p[3]) as u32,
        }
    }
}

/// A point of the search space before quantization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    pub width: f64,
    pub offset: f64,
    pub external_offset: f64,
    pub repeat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub glitch: GlitchConfig,
    /// One entry per coordinate that had to be clamped into range.
    pub warnings: Vec<String>,
}

/// Snaps each coordinate to its nearest step (ties round down), clamping
/// out-of-range coordinates and recording a warning for each.
pub fn quantize(point: RawPoint, space: &SearchSpace) -> Quantized {
    let mut warnings = Vec::new();
    let coords = [point.width, point.offset, point.external_offset, point.repeat];
    let names = ["width", "offset", "external_offset", "repeat"];
    let mut levels = [0u64; 4];
    for (i, axis) in space.axes().into_iter().enumerate() {
        levels[i] = axis.snap(coords[i]).unwrap_or_else(|| {
            let msg = format!(
                "{} {} outside [{}, {}], clamped",
                names[i], coords[i], axis.min, axis.max
            );
            log::warn!("{msg}");
            warnings.push(msg);
            if coords[i] > axis.max as f64 {
                axis.levels() - 1
            } else {
                0
            }
        });
    }
    Quantized {
        glitch: space.config(levels),
        warnings,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Maximise mean Hamming distance from the true bitstring.
    Untargeted,
    /// Maximise how often inputs of other classes come out as this class.
    Targeted(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub mode: Objective,
    #[serde(default = "default_reset_penalty")]
    pub reset_penalty: f64,
}

fn default_reset_penalty() -> f64 {
    5.0
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            mode: Objective::Untargeted,
            reset_penalty: default_reset_penalty(),
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.reset_penalty >= 0.0 && self.reset_penalty.is_finite()) {
            return Err(Error::invalid("reset penalty must be finite and >= 0"));
        }
        if let Objective::Targeted(t) = self.mode {
            if t as usize >= NUM_CLASSES {
                return Err(Error::invalid(format!("target class {t} out of range")));
            }
        }
        Ok(())
    }

    /// Largest achievable score.
    pub fn upper_bound(&self) -> f64 {
        match self.mode {
            Objective::Untargeted => NUM_QUBITS as f64,
            Objective::Targeted(_) => 1.0,
        }
    }
}

/// Per-trial mean of the objective, resets charged `reset_penalty` each.
pub fn score_trials(trials: &[TrialRecord], objective: &ObjectiveSpec) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    let resets = trials
        .iter()
        .filter(|t| t.verdict == Verdict::ResetOrHang)
        .count() as f64;
    let gain: f64 = match objective.mode {
        Objective::Untargeted => trials.iter().filter_map(|t| t.hamming).map(f64::from).sum(),
        Objective::Targeted(target) => trials
            .iter()
            .filter(|t| t.true_class != target && t.verdict == Verdict::Misprediction(target))
            .count() as f64,
    };
    (gain - objective.reset_penalty * resets) / trials.len() as f64
}

pub fn score(result: &ConfigResult, objective: &ObjectiveSpec) -> f64 {
    score_trials(&result.trials, objective)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Grid,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub glitch: GlitchConfig,
    pub score: f64,
    pub fault_count: usize,
    pub reset_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// In evaluation order.
    pub evaluated: Vec<Evaluation>,
    /// All evaluations ranked: score descending, then fewer resets, then
    /// smaller external offset.
    pub top_k: Vec<Evaluation>,
}

impl SearchReport {
    fn from_evaluated(evaluated: Vec<Evaluation>) -> Self {
        let mut top_k = evaluated.clone();
        top_k.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.reset_count.cmp(&b.reset_count))
                .then(a.glitch.external_offset.cmp(&b.glitch.external_offset))
        });
        SearchReport { evaluated, top_k }
    }

    pub fn best(&self) -> Option<&Evaluation> {
        self.top_k.first()
    }

    /// 1-based number of evaluations until the first one with a fault.
    pub fn evaluations_to_first_fault(&self) -> Option<usize> {
        self.evaluated
            .iter()
            .position(|e| e.fault_count >= 1)
            .map(|i| i + 1)
    }

    /// CSV: `rank,width,offset,external_offset,repeats,faults,resets,score`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rank,width,offset,external_offset,repeats,faults,resets,score")?;
        for (i, e) in self.top_k.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.6}",
                i + 1,
                e.glitch.width,
                e.glitch.offset,
                e.glitch.external_offset,
                e.glitch.repeat,
                e.fault_count,
                e.reset_count,
                e.score
            )?;
        }
        Ok(())
    }
}

/// Everything needed to evaluate one configuration.
#[derive(Clone, Copy, Debug)]
pub struct SearchContext<'a> {
    pub target: Target<'a>,
    /// One input per class.
    pub inputs: &'a [ProtocolInput],
    pub reps: usize,
    pub campaign_seed: u64,
}

impl SearchContext<'_> {
    pub fn evaluate(&self, glitch: &GlitchConfig) -> Result<ConfigResult> {
        run_config(&self.target, self.inputs, self.reps, glitch, self.campaign_seed)
    }
}

type Levels = [u64; 4];

/// Tuning of the adaptive sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub startup: usize,
    pub epsilon: f64,
    pub candidates: usize,
    /// Kernel bandwidth as a fraction of a dimension's level count.
    pub bandwidth: f64,
    /// Joint kernels over all dimensions instead of independent per-dimension ones.
    pub multivariate: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            startup: 10,
            epsilon: 0.1,
            candidates: 24,
            bandwidth: 0.1,
            multivariate: true,
        }
    }
}

pub fn search(
    space: &SearchSpace,
    objective: &ObjectiveSpec,
    budget: usize,
    strategy: Strategy,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<SearchReport> {
    search_with(space, objective, budget, strategy, &AdaptiveConfig::default(), ctx, seed)
}

pub fn search_with(
    space: &SearchSpace,
    objective: &ObjectiveSpec,
    budget: usize,
    strategy: Strategy,
    adaptive: &AdaptiveConfig,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<SearchReport> {
    space.validate()?;
    objective.validate()?;
    if budget == 0 {
        return Err(Error::invalid("search budget must be >= 1"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::SEARCH_DOMAIN, strategy as u64]));
    let mut evaluated = Vec::with_capacity(budget);
    let run = |levels: Levels, evaluated: &mut Vec<Evaluation>| -> Result<f64> {
        let glitch = space.config(levels);
        let result = ctx.evaluate(&glitch)?;
        let s = score(&result, objective);
        evaluated.push(Evaluation {
            glitch,
            score: s,
            fault_count: result.fault_count,
            reset_count: result.reset_count,
        });
        Ok(s)
    };
    match strategy {
        Strategy::Random => {
            let counts = space.level_counts();
            for _ in 0..budget {
                run(uniform(&counts, &mut rng), &mut evaluated)?;
            }
        }
        Strategy::Grid => {
            for levels in grid_points(space, budget) {
                run(levels, &mut evaluated)?;
            }
        }
        Strategy::Adaptive => {
            let mut sampler = AdaptiveSampler::new(space.level_counts(), *adaptive, &mut rng);
            for _ in 0..budget {
                let levels = sampler.propose(&mut rng);
                let s = run(levels, &mut evaluated)?;
                sampler.observe(levels, s);
            }
        }
    }
    Ok(SearchReport::from_evaluated(evaluated))
}

fn uniform(counts: &Levels, rng: &mut ChaCha8Rng) -> Levels {
    std::array::from_fn(|d| rng.random_range(0..counts[d]))
}

/// Evenly spaced levels whose product fits the budget, in lexicographic
/// order (width outermost).
fn grid_points(space: &SearchSpace, budget: usize) -> Vec<Levels> {
    let full = space.level_counts();
    let mut n = full;
    while n.iter().map(|&v| v as u128).product::<u128>() > budget as u128 {
        let (d, _) = n
            .iter()
            .enumerate()
            .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
            .expect("four dims");
        n[d] -= 1;
    }
    let picks: Vec<Vec<u64>> = (0..4)
        .map(|d| {
            if n[d] == 1 {
                vec![(full[d] - 1) / 2]
            } else {
                (0..n[d])
                    .map(|i| {
                        let num = i as u128 * (full[d] - 1) as u128;
                        let den = (n[d] - 1) as u128;
                        ((num + den / 2) / den) as u64
                    })
                    .collect()
            }
        })
        .collect();
    let mut out = Vec::new();
    for &a in &picks[0] {
        for &b in &picks[1] {
            for &c in &picks[2] {
                for &e in &picks[3] {
                    out.push([a, b, c, e]);
                }
            }
        }
    }
    out
}

/// Radical inverse of `i` in `base`.
fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

const HALTON_BASES: [u64; 4] = [2, 3, 5, 7];

struct AdaptiveSampler {
    counts: Levels,
    cfg: AdaptiveConfig,
    history: Vec<(Levels, f64)>,
    seen: HashSet<Levels>,
    /// Random shift of the Halton sequence, per dimension.
    shift: [f64; 4],
    halton_index: u64,
}

impl AdaptiveSampler {
    fn new(counts: Levels, cfg: AdaptiveConfig, rng: &mut ChaCha8Rng) -> Self {
        AdaptiveSampler {
            counts,
            cfg,
            history: Vec::new(),
            seen: HashSet::new(),
            shift: std::array::from_fn(|_| rng.random::<f64>()),
            halton_index: 0,
        }
    }

    /// Next unseen point of the shifted Halton sequence.
    fn quasi_random(&mut self, rng: &mut ChaCha8Rng) -> Levels {
        for _ in 0..64 {
            self.halton_index += 1;
            let p: Levels = std::array::from_fn(|d| {
                let u = (radical_inverse(self.halton_index, HALTON_BASES[d]) + self.shift[d]).fract();
                ((u * self.counts[d] as f64) as u64).min(self.counts[d] - 1)
            });
            if !self.seen.contains(&p) {
                return p;
            }
        }
        self.fresh_uniform(rng)
    }

    fn observe(&mut self, p: Levels, score: f64) {
        self.history.push((p, score));
        self.seen.insert(p);
    }

    fn bandwidths(&self, n: usize) -> [f64; 4] {
        let shrink = (n.max(1) as f64).powf(-0.2);
        std::array::from_fn(|d| (self.counts[d] as f64 * self.cfg.bandwidth * shrink).max(1.0))
    }

    /// Gaussian kernel mass at level `x` for a kernel centred on level `mu`,
    /// renormalised to the `counts[d]` levels so edges are not under-weighted.
    fn kernel(&self, d: usize, x: u64, mu: u64, bw: f64) -> f64 {
        let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
        let mu = mu as f64;
        let top = self.counts[d] as f64 - 0.5;
        let mass = phi((top - mu) / bw) - phi((-0.5 - mu) / bw);
        let z = (x as f64 - mu) / bw;
        (-0.5 * z * z).exp() / (bw * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300))
    }

    /// Mixture of a uniform prior (weight 1) and one kernel per point,
    /// either one mixture per dimension or one over the joint space.
    fn log_density(&self, x: &Levels, points: &[Levels], bw: &[f64; 4]) -> f64 {
        let n = 1.0 + points.len() as f64;
        if self.cfg.multivariate {
            let prior: f64 = self.counts.iter().map(|&c| 1.0 / c as f64).product();
            let kernels: f64 = points
                .iter()
                .map(|p| (0..4).map(|d| self.kernel(d, x[d], p[d], bw[d])).product::<f64>())
                .sum();
            ((prior + kernels) / n).ln()
        } else {
            (0..4)
                .map(|d| {
                    let prior = 1.0 / self.counts[d] as f64;
                    let k: f64 = points.iter().map(|p| self.kernel(d, x[d], p[d], bw[d])).sum();
                    ((prior + k) / n).ln()
                })
                .sum()
        }
    }

    fn split(&self) -> (Vec<Levels>, Vec<Levels>) {
        let mut scores: Vec<f64> = self.history.iter().map(|h| h.1).collect();
        scores.sort_by(f64::total_cmp);
        let n = scores.len();
        let median = if n % 2 == 1 {
            scores[n / 2]
        } else {
            0.5 * (scores[n / 2 - 1] + scores[n / 2])
        };
        let (good, bad): (Vec<&(Levels, f64)>, Vec<_>) = self.history.iter().partition(|h| h.1 > median);
        (
            good.into_iter().map(|h| h.0).collect(),
            bad.into_iter().map(|h| h.0).collect(),
        )
    }

    fn propose(&mut self, rng: &mut ChaCha8Rng) -> Levels {
        if self.history.len() < self.cfg.startup {
            return self.quasi_random(rng);
        }
        let (good, bad) = self.split();
        if good.is_empty() {
            // every score ties at the median: nothing to model yet
            return self.quasi_random(rng);
        }
        let bw_good = self.bandwidths(good.len());
        let bw_bad = self.bandwidths(bad.len());
        let mut best: Option<(f64, Levels)> = None;
        for _ in 0..self.cfg.candidates.max(1) {
            let cand = if rng.random::<f64>() < self.cfg.epsilon {
                uniform(&self.counts, rng)
            } else {
                let centre = good[rng.random_range(0..good.len())];
                std::array::from_fn(|d| {
                    let noise = Normal::new(0.0, bw_good[d]).expect("positive bandwidth");
                    let v = (centre[d] as f64 + noise.sample(rng)).round();
                    v.clamp(0.0, (self.counts[d] - 1) as f64) as u64
                })
            };
            if self.seen.contains(&cand) {
                continue;
            }
            let ratio = self.log_density(&cand, &good, &bw_good) - self.log_density(&cand, &bad, &bw_bad);
            if best.is_none_or(|(r, _)| ratio > r) {
                best = Some((ratio, cand));
            }
        }
        match best {
            Some((_, p)) => p,
            None => self.fresh_uniform(rng),
        }
    }

    fn fresh_uniform(&self, rng: &mut ChaCha8Rng) -> Levels {
        let mut p = uniform(&self.counts, rng);
        for _ in 0..64 {
            if !self.seen.contains(&p) {
                break;
            }
            p = uniform(&self.counts, rng);
        }
        p
    }
}
