//! Glitch configurations, the susceptibility surrogate, and the instrumented
//! forward pass that applies corruptions as their target ops execute.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{relu, Dims, ForwardResult, Matrix, ModelParams};
use crate::seed;
use crate::trace::{Layer, MicroOp, MicroOpTrace, OpKey, OpKind};

pub const GLITCH_UNIT_MAX: u32 = 4000;
pub const GLITCH_UNIT_STEP: u32 = 100;
pub const MAX_REPEAT: u32 = 5;

/// One voltage-glitch setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlitchConfig {
    /// Pulse width, generator units.
    pub width: u32,
    /// Phase within the target cycle, generator units.
    pub offset: u32,
    /// Cycles after the trigger.
    pub external_offset: u64,
    /// Consecutive glitched cycles.
    pub repeat: u32,
}

impl GlitchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("offset", self.offset)] {
            if v > GLITCH_UNIT_MAX || v % GLITCH_UNIT_STEP != 0 {
                return Err(Error::invalid(format!(
                    "{name} {v} must be a multiple of {GLITCH_UNIT_STEP} in [0, {GLITCH_UNIT_MAX}]"
                )));
            }
        }
        if !(1..=MAX_REPEAT).contains(&self.repeat) {
            return Err(Error::invalid(format!(
                "repeat {} outside [1, {MAX_REPEAT}]",
                self.repeat
            )));
        }
        Ok(())
    }

    /// The glitched cycles, before intersecting with the trace.
    pub fn cycles(&self) -> std::ops::Range<u64> {
        self.external_offset..self.external_offset + self.repeat as u64
    }

    fn stream_seed(&self, seed: u64) -> u64 {
        seed::derive(
            seed,
            &[
                seed::GLITCH_DOMAIN,
                self.width as u64,
                self.offset as u64,
                self.external_offset,
                self.repeat as u64,
            ],
        )
    }
}

impl fmt::Display for GlitchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "width={} offset={} ext={} repeat={}",
            self.width, self.offset, self.external_offset, self.repeat
        )
    }
}

/// Inclusive integer interval; `lo > hi` is the empty band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct Band {
    pub lo: u64,
    pub hi: u64,
}

impl Band {
    pub const EMPTY: Band = Band { lo: 1, hi: 0 };

    pub fn new(lo: u64, hi: u64) -> Self {
        Band { lo, hi }
    }

    pub fn contains(&self, v: u64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl From<[u64; 2]> for Band {
    fn from([lo, hi]: [u64; 2]) -> Self {
        Band { lo, hi }
    }
}

impl From<Band> for [u64; 2] {
    fn from(b: Band) -> Self {
        [b.lo, b.hi]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorruptionKind {
    BitFlipAcc,
    SkipOp,
    ZeroOperand,
    ReluPassthrough,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::BitFlipAcc,
        CorruptionKind::SkipOp,
        CorruptionKind::ZeroOperand,
        CorruptionKind::ReluPassthrough,
    ];

    /// Corruptions a glitch can produce on an op of `kind`.
    pub fn applicable(kind: OpKind) -> &'static [CorruptionKind] {
        use CorruptionKind::*;
        match kind {
            OpKind::Mac | OpKind::BiasAdd => &[BitFlipAcc, SkipOp, ZeroOperand],
            OpKind::ReluElem => &[ReluPassthrough, SkipOp, ZeroOperand],
            OpKind::ExpElem | OpKind::NormElem => &[BitFlipAcc, ZeroOperand],
        }
    }
}

/// Configurable stand-in for the device's glitch physics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SusceptibilityProfile {
    pub width_band: Band,
    pub offset_band: Band,
    pub corrupt_prob: BTreeMap<OpKind, f64>,
    pub reset_coeff: f64,
    pub corruption_mix: BTreeMap<CorruptionKind, f64>,
    /// When set, only cycles inside this window can be faulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_cycles: Option<Band>,
}

impl Default for SusceptibilityProfile {
    fn default() -> Self {
        SusceptibilityProfile {
            width_band: Band::new(2400, 2800),
            offset_band: Band::new(2400, 2800),
            corrupt_prob: OpKind::ALL.iter().map(|&k| (k, 0.5)).collect(),
            reset_coeff: 0.03,
            corruption_mix: BTreeMap::from([
                (CorruptionKind::BitFlipAcc, 1.0),
                (CorruptionKind::SkipOp, 1.0),
                (CorruptionKind::ZeroOperand, 0.0),
                (CorruptionKind::ReluPassthrough, 1.0),
            ]),
            active_cycles: None,
        }
    }
}

impl SusceptibilityProfile {
    /// No glitch ever has an effect.
    pub fn inert() -> Self {
        SusceptibilityProfile {
            width_band: Band::EMPTY,
            offset_band: Band::EMPTY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in &self.corrupt_prob {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!("corrupt_prob.{k} = {p} outside [0, 1]")));
            }
        }
        if !(self.reset_coeff >= 0.0 && self.reset_coeff.is_finite()) {
            return Err(Error::invalid("reset_coeff must be finite and >= 0"));
        }
        if self
            .corruption_mix
            .values()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::invalid("corruption_mix weights must be finite and >= 0"));
        }
        if !self.corruption_mix.values().any(|&w| w > 0.0) {
            return Err(Error::invalid("corruption_mix weights are all zero"));
        }
        Ok(())
    }

    pub fn corrupt_prob(&self, kind: OpKind) -> f64 {
        self.corrupt_prob.get(&kind).copied().unwrap_or(0.0)
    }

    pub fn reset_prob(&self, glitch: &GlitchConfig) -> f64 {
        (self.reset_coeff * (glitch.width as f64 / GLITCH_UNIT_MAX as f64) * glitch.repeat as f64)
            .min(1.0)
    }

    pub fn in_band(&self, glitch: &GlitchConfig) -> bool {
        self.width_band.contains(glitch.width as u64)
            && self.offset_band.contains(glitch.offset as u64)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: SusceptibilityProfile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("profile: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effect {
    BitFlipAcc { bit: u8 },
    SkipOp,
    ZeroOperand,
    ReluPassthrough,
}

impl Effect {
    pub fn kind(&self) -> CorruptionKind {
        match self {
            Effect::BitFlipAcc { .. } => CorruptionKind::BitFlipAcc,
            Effect::SkipOp => CorruptionKind::SkipOp,
            Effect::ZeroOperand => CorruptionKind::ZeroOperand,
            Effect::ReluPassthrough => CorruptionKind::ReluPassthrough,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub effect: Effect,
    pub target: MicroOp,
}

impl Corruption {
    pub fn new(effect: Effect, target: MicroOp) -> Result<Self> {
        match effect {
            Effect::BitFlipAcc { bit } if bit > 63 => {
                Err(Error::invalid(format!("bit index {bit} outside [0, 63]")))
            }
            Effect::ReluPassthrough if target.kind != OpKind::ReluElem => Err(Error::invalid(
                "RELU_PASSTHROUGH may only target RELU_ELEM ops",
            )),
            _ => Ok(Corruption { effect, target }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FaultPlan {
    NoEffect,
    Corruptions(Vec<Corruption>),
    Reset,
}

/// Decides what a glitch does to one inference. Reproducible in
/// `(glitch, profile, trace, seed)`.
pub fn resolve_glitch(
    glitch: &GlitchConfig,
    profile: &SusceptibilityProfile,
    trace: &MicroOpTrace,
    seed: u64,
) -> FaultPlan {
    let affected: Vec<u64> = glitch
        .cycles()
        .filter(|&c| c >= trace.trigger_cycle && c <= trace.total_cycles)
        .filter(|&c| profile.active_cycles.is_none_or(|w| w.contains(c)))
        .collect();
    if affected.is_empty() || !profile.in_band(glitch) {
        return FaultPlan::NoEffect;
    }

    let mut rng = seed::rng(glitch.stream_seed(seed));
    if rng.random::<f64>() < profile.reset_prob(glitch) {
        return FaultPlan::Reset;
    }

    let mut out = Vec::new();
    for cycle in affected {
        let op = *trace.locate(cycle).expect("affected cycles lie inside the trace");
        if rng.random::<f64>() >= profile.corrupt_prob(op.kind) {
            continue;
        }
        let choices: Vec<(CorruptionKind, f64)> = CorruptionKind::applicable(op.kind)
            .iter()
            .map(|&k| (k, profile.corruption_mix.get(&k).copied().unwrap_or(0.0)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let total: f64 = choices.iter().map(|c| c.1).sum();
        if total <= 0.0 {
            continue;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut kind = choices.last().expect("non-empty").0;
        for &(k, w) in &choices {
            if pick < w {
                kind = k;
                break;
            }
            pick -= w;
        }
        let effect = match kind {
            CorruptionKind::BitFlipAcc => Effect::BitFlipAcc {
                bit: rng.random_range(0..64),
            },
            CorruptionKind::SkipOp => Effect::SkipOp,
            CorruptionKind::ZeroOperand => Effect::ZeroOperand,
            CorruptionKind::ReluPassthrough => Effect::ReluPassthrough,
        };
        out.push(Corruption::new(effect, op).expect("applicable corruption"));
    }
    if out.is_empty() {
        FaultPlan::NoEffect
    } else {
        FaultPlan::Corruptions(out)
    }
}

/// Outcome of executing one (possibly faulted) inference.
#[derive(Clone, Debug, PartialEq)]
pub enum Execution {
    Completed(ForwardResult),
    ResetOrHang,
}

impl Execution {
    pub fn result(&self) -> Option<&ForwardResult> {
        match self {
            Execution::Completed(r) => Some(r),
            Execution::ResetOrHang => None,
        }
    }
}

#[inline]
fn flip(v: f64, bit: u8) -> f64 {
    f64::from_bits(v.to_bits() ^ (1u64 << bit))
}

struct Injector<'a> {
    corruptions: &'a [Corruption],
}

#[derive(Default)]
struct OpEffects {
    skip: bool,
    zero: bool,
    passthrough: bool,
    flips: Vec<u8>,
}

impl OpEffects {
    fn flip_all(&self, mut v: f64) -> f64 {
        for &b in &self.flips {
            v = flip(v, b);
        }
        v
    }
}

impl Injector<'_> {
    fn at(&self, kind: OpKind, layer: Layer, neuron: usize, operand: usize) -> Option<OpEffects> {
        if self.corruptions.is_empty() {
            return None;
        }
        let key = OpKey {
            kind,
            layer,
            neuron: neuron as u32,
            operand: operand as u32,
        };
        let mut fx: Option<OpEffects> = None;
        for c in self.corruptions.iter().filter(|c| c.target.key() == key) {
            let e = fx.get_or_insert_with(OpEffects::default);
            match c.effect {
                Effect::BitFlipAcc { bit } => e.flips.push(bit),
                Effect::SkipOp => e.skip = true,
                Effect::ZeroOperand => e.zero = true,
                Effect::ReluPassthrough => e.passthrough = true,
            }
        }
        fx
    }

    fn dense(&self, layer: Layer, w: &Matrix, b: &[f64], input: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|j| {
                let mut acc = 0.0;
                for (i, (wi, xi)) in w.row(j).iter().zip(input).enumerate() {
                    match self.at(OpKind::Mac, layer, j, i) {
                        None => acc += wi * xi,
                        Some(fx) => {
                            if !fx.skip {
                                acc += wi * if fx.zero { 0.0 } else { *xi };
                            }
                            acc = fx.flip_all(acc);
                        }
                    }
                }
                match self.at(OpKind::BiasAdd, layer, j, 0) {
                    None => acc += b[j],
                    Some(fx) => {
                        if !fx.skip {
                            acc += if fx.zero { 0.0 } else { b[j] };
                        }
                        acc = fx.flip_all(acc);
                    }
                }
                acc
            })
            .collect()
    }

    fn relu_layer(&self, layer: Layer, z: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; z.len()];
        for (j, &zj) in z.iter().enumerate() {
            a[j] = match self.at(OpKind::ReluElem, layer, j, 0) {
                None => relu(zj),
                Some(fx) => {
                    let v = if fx.skip {
                        a[j]
                    } else if fx.zero {
                        relu(0.0)
                    } else if fx.passthrough {
                        zj
                    } else {
                        relu(zj)
                    };
                    fx.flip_all(v)
                }
            };
        }
        a
    }

    fn softmax(&self, zo: &[f64]) -> Vec<f64> {
        let m = zo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut buf = vec![0.0; zo.len()];
        let mut sum = 0.0;
        for (k, &z) in zo.iter().enumerate() {
            match self.at(OpKind::ExpElem, Layer::Output, k, 0) {
                None => buf[k] = (z - m).exp(),
                Some(fx) => {
                    if fx.skip {
                        continue;
                    }
                    let input = if fx.zero { 0.0 } else { z };
                    buf[k] = fx.flip_all((input - m).exp());
                }
            }
            sum += buf[k];
        }
        for (k, v) in buf.iter_mut().enumerate() {
            match self.at(OpKind::NormElem, Layer::Output, k, 0) {
                None => *v /= sum,
                Some(fx) => {
                    if !fx.skip {
                        *v = if fx.zero { 0.0 } else { *v } / sum;
                    }
                    *v = fx.flip_all(*v);
                }
            }
        }
        buf
    }
}

/// Runs the forward pass applying `corruptions` as their ops execute.
/// Any non-finite intermediate is reported as a hang.
pub fn execute(params: &ModelParams, x: &[f64], corruptions: &[Corruption]) -> Result<Execution> {
    let Dims { d, .. } = params.dims();
    if x.len() != d {
        return Err(Error::Dimension {
            what: "input features",
            expected: d,
            got: x.len(),
        });
    }
    let inj = Injector { corruptions };
    let z1 = inj.dense(Layer::Dense1, &params.w1, &params.b1, x);
    let a1 = inj.relu_layer(Layer::ReLU1, &z1);
    let z2 = inj.dense(Layer::Dense2, &params.w2, &params.b2, &a1);
    let a2 = inj.relu_layer(Layer::ReLU2, &z2);
    let zo = inj.dense(Layer::Output, &params.wo, &params.bo, &a2);
    let probs = inj.softmax(&zo);
    let result = ForwardResult::from_parts(z1, a1, z2, a2, zo, probs);
    if result.all_finite() {
        Ok(Execution::Completed(result))
    } else {
        Ok(Execution::ResetOrHang)
    }
}

pub fn execute_plan(params: &ModelParams, x: &[f64], plan: &FaultPlan) -> Result<Execution> {
    match plan {
        FaultPlan::NoEffect => execute(params, x, &[]),
        FaultPlan::Corruptions(c) => execute(params, x, c),
        FaultPlan::Reset => Ok(Execution::ResetOrHang),
    }
}

/// Resolves the glitch and executes the inference under it.
pub fn faulted_forward(
    params: &ModelParams,
    x: &[f64],
    trace: &MicroOpTrace,
    glitch: &GlitchConfig,
    profile: &SusceptibilityProfile,
    seed: u64,
) -> Result<Execution> {
    glitch.validate()?;
    let plan = resolve_glitch(glitch, profile, trace, seed);
    execute_plan(params, x, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use crate::trace::{compile_trace, CostModel};

    fn bench_trace() -> MicroOpTrace {
        compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap()
    }

    fn glitch(width: u32, offset: u32, ext: u64, repeat: u32) -> GlitchConfig {
        GlitchConfig {
            width,
            offset,
            external_offset: ext,
            repeat,
        }
    }

    fn random_params(seed: u64) -> ModelParams {
        crate::train::initialize(Dims::default(), seed)
    }

    #[test]
    fn validation() {
        assert!(glitch(2400, 2400, 0, 1).validate().is_ok());
        assert!(glitch(2450, 2400, 0, 1).validate().is_err());
        assert!(glitch(4100, 2400, 0, 1).validate().is_err());
        assert!(glitch(2400, 2400, 0, 0).validate().is_err());
        assert!(glitch(2400, 2400, 0, 6).validate().is_err());
    }

    #[test]
    fn zero_width_is_no_effect() {
        let t = bench_trace();
        let p = SusceptibilityProfile::default();
        for ext in [0, 700, 14208, 100_000] {
            for offset in [0, 2500, 4000] {
                assert_eq!(resolve_glitch(&glitch(0, offset, ext, 5), &p, &t, 1), FaultPlan::NoEffect);
            }
        }
    }

    #[test]
    fn beyond_trace_is_no_effect() {
        let t = bench_trace();
        let mut p = SusceptibilityProfile::default();
        p.reset_coeff = 100.0;
        let g = glitch(2600, 2600, t.total_cycles + 1, 5);
        assert_eq!(resolve_glitch(&g, &p, &t, 3), FaultPlan::NoEffect);
    }

    #[test]
    fn table_two_row_one_targets_dense1() {
        let t = bench_trace();
        let g = glitch(2400, 2400, 10026, 2);
        let cycles: Vec<u64> = g.cycles().collect();
        assert_eq!(cycles, vec![10026, 10027]);
        for c in cycles {
            assert_eq!(t.locate(c).unwrap().layer, Layer::Dense1);
        }
        let mut p = SusceptibilityProfile::default();
        p.reset_coeff = 0.0;
        p.corrupt_prob = OpKind::ALL.iter().map(|&k| (k, 1.0)).collect();
        match resolve_glitch(&g, &p, &t, 9) {
            FaultPlan::Corruptions(c) => {
                assert!(!c.is_empty() && c.len() <= 2);
                assert!(c.iter().all(|c| c.target.layer == Layer::Dense1));
            }
            other => panic!("expected corruptions, got {other:?}"),
        }
    }

    #[test]
    fn reset_certain_when_coefficient_saturates() {
        let t = bench_trace();
        let mut p = SusceptibilityProfile::default();
        p.reset_coeff = 10.0;
        assert_eq!(resolve_glitch(&glitch(2400, 2400, 5000, 1), &p, &t, 0), FaultPlan::Reset);
    }

    #[test]
    fn active_window_masks_cycles() {
        let t = bench_trace();
        let mut p = SusceptibilityProfile::default();
        p.reset_coeff = 0.0;
        p.corrupt_prob = OpKind::ALL.iter().map(|&k| (k, 1.0)).collect();
        p.active_cycles = t.window(Layer::ReLU1).map(|(s, e)| Band::new(s, e));
        assert_eq!(resolve_glitch(&glitch(2500, 2500, 10026, 5), &p, &t, 0), FaultPlan::NoEffect);
        assert!(matches!(
            resolve_glitch(&glitch(2500, 2500, 14208, 5), &p, &t, 0),
            FaultPlan::Corruptions(_)
        ));
    }

    #[test]
    fn no_effect_plan_matches_clean_forward_bitwise() {
        let params = random_params(4);
        let x = [0.3, -1.2, 0.8, 0.1, -0.5, 1.1, -0.9, 0.4, 0.0, 2.0];
        let clean = forward(&params, &x).unwrap();
        let run = execute_plan(&params, &x, &FaultPlan::NoEffect).unwrap();
        let got = run.result().unwrap();
        for (a, b) in [
            (&clean.z1, &got.z1),
            (&clean.a1, &got.a1),
            (&clean.z2, &got.z2),
            (&clean.a2, &got.a2),
            (&clean.zo, &got.zo),
            (&clean.probs, &got.probs),
        ] {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn skip_on_output_mac_preserves_hidden_layers() {
        let params = random_params(5);
        let x = [1.0; 10];
        let t = bench_trace();
        let clean = forward(&params, &x).unwrap();
        let op = *t
            .ops
            .iter()
            .find(|o| o.layer == Layer::Output && o.kind == OpKind::Mac && o.neuron == 3)
            .unwrap();
        let plan = FaultPlan::Corruptions(vec![Corruption::new(Effect::SkipOp, op).unwrap()]);
        let run = execute_plan(&params, &x, &plan).unwrap();
        let got = run.result().unwrap();
        assert_eq!(got.a1, clean.a1);
        assert_eq!(got.a2, clean.a2);
        assert_eq!(got.z2, clean.z2);
    }

    #[test]
    fn exponent_flip_becomes_hang() {
        let t = bench_trace();
        let op = *t
            .ops
            .iter()
            .find(|o| o.layer == Layer::Dense1 && o.kind == OpKind::BiasAdd)
            .unwrap();
        let mut p = ModelParams::zeros(Dims::default());
        p.b1[0] = 1.5;
        // 1.5 with the top exponent bit set is a NaN pattern
        assert!(flip(1.5, 62).is_nan());
        let plan = FaultPlan::Corruptions(vec![
            Corruption::new(Effect::BitFlipAcc { bit: 62 }, op).unwrap(),
        ]);
        assert_eq!(execute_plan(&p, &[0.0; 10], &plan).unwrap(), Execution::ResetOrHang);
    }

    #[test]
    fn passthrough_only_on_relu() {
        let t = bench_trace();
        let mac = t.ops[0];
        assert!(Corruption::new(Effect::ReluPassthrough, mac).is_err());
        assert!(Corruption::new(Effect::BitFlipAcc { bit: 64 }, mac).is_err());
        let relu_op = *t.locate(14208).unwrap();
        assert!(Corruption::new(Effect::ReluPassthrough, relu_op).is_ok());
    }

    #[test]
    fn reset_probability_is_monotone_in_coefficient() {
        let t = bench_trace();
        let g = glitch(2600, 2600, 20_000, 3);
        for seed in 0..300 {
            let mut lo = SusceptibilityProfile::default();
            lo.reset_coeff = 0.02;
            let mut hi = lo.clone();
            hi.reset_coeff = 0.2;
            if resolve_glitch(&g, &lo, &t, seed) == FaultPlan::Reset {
                assert_eq!(resolve_glitch(&g, &hi, &t, seed), FaultPlan::Reset);
            }
        }
    }

    #[test]
    fn profile_toml_round_trip_and_keys() {
        let p = SusceptibilityProfile::default();
        let text = p.to_toml().unwrap();
        assert!(text.contains("width_band = [2400, 2800]"));
        assert_eq!(SusceptibilityProfile::from_toml(&text).unwrap(), p);

        let custom = r#"
width_band = [2500, 2700]
offset_band = [2400, 2800]
reset_coeff = 0.0
active_cycles = [14048, 15602]

[corrupt_prob]
RELU_ELEM = 1.0

[corruption_mix]
SKIP_OP = 1.0
RELU_PASSTHROUGH = 1.0
"#;
        let q = SusceptibilityProfile::from_toml(custom).unwrap();
        assert_eq!(q.width_band, Band::new(2500, 2700));
        assert_eq!(q.corrupt_prob(OpKind::ReluElem), 1.0);
        assert_eq!(q.corrupt_prob(OpKind::Mac), 0.0);
        assert_eq!(q.active_cycles, Some(Band::new(14048, 15602)));

        assert!(SusceptibilityProfile::from_toml("width_band = [1, 2]\nbogus = 3\n").is_err());
        let bad = custom.replace("RELU_ELEM = 1.0", "RELU_ELEM = 1.5");
        assert!(SusceptibilityProfile::from_toml(&bad).is_err());
    }
}
