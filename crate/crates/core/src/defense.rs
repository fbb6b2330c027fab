//! Countermeasures evaluated against the same simulated attacker.
//!
//! A defended inference runs one or more shots of the (possibly glitched)
//! forward pass, checks them, and either returns a class, rejects, or
//! reports a reset. Evaluation pairs every defended trial with the
//! undefended one on the same trial seed: shot 0 of a defended trial sees
//! exactly the fault the baseline trial saw.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{run_inputs, ProtocolInput, Target};
use crate::dataset::{centroid, GenConfig};
use crate::error::{Error, Result};
use crate::fault::{execute_plan, Execution, FaultPlan, GlitchConfig};
use crate::model::{forward, ForwardResult, ModelParams, NUM_CLASSES};
use crate::seed;
use crate::trace::{Layer, MicroOpTrace, OpKind};

/// Inclusive bounds on every value a layer produces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Run `shots` inferences and return the class holding a strict majority.
    MajorityVote { shots: u32 },
    /// Reject outputs whose softmax entropy (nats) exceeds `threshold`.
    EntropyCheck { threshold: f64 },
    /// Reject when a layer's output leaves its bounds. Dense layers are
    /// checked on pre-activations, ReLU layers on activations, Output on logits.
    ActivationRangeCheck { bounds: BTreeMap<Layer, Bounds> },
    /// Delay the whole inference by a uniform `0..=max_jitter` cycles.
    TimingJitter { max_jitter: u64 },
    /// Reject when a nearest-centroid discriminator disagrees.
    CrossCheck {
        #[serde(default = "unit_scale")]
        centroid_scale: f64,
    },
    /// Flags a reset with probability `detection_prob`.
    GlitchMonitor { detection_prob: f64 },
}

fn unit_scale() -> f64 {
    1.0
}

impl DefenseKind {
    pub fn label(&self) -> String {
        match self {
            DefenseKind::MajorityVote { shots } => format!("majority_vote({shots})"),
            DefenseKind::EntropyCheck { threshold } => format!("entropy_check({threshold})"),
            DefenseKind::ActivationRangeCheck { .. } => "activation_range_check".into(),
            DefenseKind::TimingJitter { max_jitter } => format!("timing_jitter({max_jitter})"),
            DefenseKind::CrossCheck { .. } => "cross_check".into(),
            DefenseKind::GlitchMonitor { detection_prob } => {
                format!("glitch_monitor({detection_prob})")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagAction {
    #[default]
    Reject,
    /// Re-run the defended inference with a fresh seed, up to `max_retries` times.
    Retry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefensePolicy {
    pub kind: DefenseKind,
    #[serde(default)]
    pub action_on_flag: FlagAction,
    #[serde(default = "one")]
    pub max_retries: u32,
}

fn one() -> u32 {
    1
}

impl DefensePolicy {
    pub fn new(kind: DefenseKind) -> Self {
        DefensePolicy {
            kind,
            action_on_flag: FlagAction::Reject,
            max_retries: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DefenseKind::MajorityVote { shots } => {
                if *shots < 3 || shots % 2 == 0 {
                    return Err(Error::invalid(format!(
                        "majority vote needs an odd shot count >= 3, got {shots}"
                    )));
                }
            }
            DefenseKind::EntropyCheck { threshold } => {
                if !(*threshold >= 0.0) {
                    return Err(Error::invalid("entropy threshold must be >= 0"));
                }
            }
            DefenseKind::ActivationRangeCheck { bounds } => {
                if bounds.values().any(|b| !(b.lo <= b.hi)) {
                    return Err(Error::invalid("activation bounds need lo <= hi"));
                }
            }
            DefenseKind::TimingJitter { .. } => {}
            DefenseKind::CrossCheck { centroid_scale } => {
                if !(*centroid_scale > 0.0 && centroid_scale.is_finite()) {
                    return Err(Error::invalid("centroid scale must be positive"));
                }
            }
            DefenseKind::GlitchMonitor { detection_prob } => {
                if !(0.0..=1.0).contains(detection_prob) {
                    return Err(Error::invalid("detection probability must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Softmax entropy in nats, capped at its maximum `ln 32`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.min((probs.len() as f64).ln()).max(0.0)
}

/// Per-layer bounds covering every clean activation on `inputs`, widened by
/// `margin` times each range's span.
pub fn calibrate_bounds(
    params: &ModelParams,
    inputs: &[ProtocolInput],
    margin: f64,
) -> Result<BTreeMap<Layer, Bounds>> {
    let mut out: BTreeMap<Layer, Bounds> = BTreeMap::new();
    for input in inputs {
        let r = forward(params, &input.features)?;
        for layer in Layer::ALL {
            let b = out.entry(layer).or_insert(Bounds {
                lo: f64::INFINITY,
                hi: f64::NEG_INFINITY,
            });
            for &v in layer_values(&r, layer) {
                b.lo = b.lo.min(v);
                b.hi = b.hi.max(v);
            }
        }
    }
    for b in out.values_mut() {
        let pad = margin * (b.hi - b.lo);
        b.lo -= pad;
        b.hi += pad;
    }
    Ok(out)
}

fn layer_values(r: &ForwardResult, layer: Layer) -> &[f64] {
    match layer {
        Layer::Dense1 => &r.z1,
        Layer::ReLU1 => &r.a1,
        Layer::Dense2 => &r.z2,
        Layer::ReLU2 => &r.a2,
        Layer::Output => &r.zo,
    }
}

fn first_mac_cycles(trace: &MicroOpTrace) -> u64 {
    trace
        .ops
        .iter()
        .find(|op| op.layer == Layer::Dense1 && op.kind == OpKind::Mac)
        .map_or(1, |op| op.cycles())
}

/// Nearest-centroid reference discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn new(d: usize, centroid_scale: f64) -> Result<Self> {
        let cfg = GenConfig {
            d,
            centroid_scale,
            ..GenConfig::default()
        };
        cfg.validate()?;
        Ok(NearestCentroid {
            centroids: (0..NUM_CLASSES)
                .map(|c| centroid(c, &cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Closest centroid in Euclidean distance, ties to the lower class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let dist = |c: &[f64]| -> f64 { c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = 0;
        let mut best_d = dist(&self.centroids[0]);
        for (k, c) in self.centroids.iter().enumerate().skip(1) {
            let dk = dist(c);
            if dk < best_d {
                best = k;
                best_d = dk;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Disagreement,
    HighEntropy,
    OutOfRange,
    ReferenceMismatch,
    GlitchDetected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefendedOutput {
    Class(usize),
    Rejected,
    ResetOrHang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefendedOutcome {
    pub output: DefendedOutput,
    pub flags: Vec<Flag>,
    /// Device cycles spent, retries and extra shots included.
    pub cost_cycles: u64,
}

/// An armed attacker: the target and the glitch applied to every shot.
#[derive(Clone, Copy, Debug)]
pub struct Attack<'a> {
    pub target: Target<'a>,
    pub glitch: &'a GlitchConfig,
}

/// A policy bound to its precomputed state.
struct Prepared<'a> {
    policy: &'a DefensePolicy,
    reference: Option<NearestCentroid>,
}

impl<'a> Prepared<'a> {
    fn new(policy: &'a DefensePolicy, params: &ModelParams) -> Result<Self> {
        policy.validate()?;
        let reference = match policy.kind {
            DefenseKind::CrossCheck { centroid_scale } => {
                Some(NearestCentroid::new(params.dims().d, centroid_scale)?)
            }
            _ => None,
        };
        Ok(Prepared { policy, reference })
    }

    fn shot(&self, attack: &Attack<'_>, x: &[f64], shot_seed: u64, delay: u64) -> Result<Execution> {
        let plan = if delay == 0 {
            attack.target.plan(attack.glitch, shot_seed)
        } else {
            let shifted = attack.target.trace.shifted(delay);
            Target {
                trace: &shifted,
                ..attack.target
            }
            .plan(attack.glitch, shot_seed)
        };
        match plan {
            FaultPlan::Reset => Ok(Execution::ResetOrHang),
            p => execute_plan(attack.target.params, x, &p),
        }
    }

    /// One defended attempt without retries.
    fn attempt(&self, attack: &Attack<'_>, x: &[f64], seed: u64) -> Result<DefendedOutcome> {
        let base = attack.target.trace.total_cycles;
        let single = |exec: &Execution, extra_cost: u64, check: &dyn Fn(&ForwardResult) -> Option<Flag>| {
            let (output, flags) = match exec.result() {
                None => (DefendedOutput::ResetOrHang, vec![]),
                Some(r) => match check(r) {
                    Some(f) => (DefendedOutput::Rejected, vec![f]),
                    None => (DefendedOutput::Class(r.predicted_class), vec![]),
                },
            };
            DefendedOutcome {
                output,
                flags,
                cost_cycles: base + extra_cost,
            }
        };
        Ok(match &self.policy.kind {
            DefenseKind::MajorityVote { shots } => {
                let mut votes = [0u32; NUM_CLASSES];
                for i in 0..*shots as u64 {
                    let s = if i == 0 {
                        seed
                    } else {
                        seed::derive(seed, &[seed::SHOT_DOMAIN, i])
                    };
                    if let Some(r) = self.shot(attack, x, s, 0)?.result() {
                        votes[r.predicted_class] += 1;
                    }
                }
                // A class needs more than half of all shots; shots lost to a
                // reset count against every class.
                let (winner, top) = votes
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("non-empty");
                let (output, flags) = if *top == 0 {
                    (DefendedOutput::ResetOrHang, vec![])
                } else if 2 * top <= *shots {
                    (DefendedOutput::Rejected, vec![Flag::Disagreement])
                } else {
                    (DefendedOutput::Class(winner), vec![])
                };
                DefendedOutcome {
                    output,
                    flags,
                    cost_cycles: base * *shots as u64,
                }
            }
            DefenseKind::EntropyCheck { threshold } => {
                let exec = self.shot(attack, x, seed, 0)?;
                single(&exec, 0, &|r| (entropy(&r.probs) > *threshold).then_some(Flag::HighEntropy))
            }
            DefenseKind::ActivationRangeCheck { bounds } => {
                let exec = self.shot(attack, x, seed, 0)?;
                single(&exec, 0, &|r| {
                    let bad = bounds
                        .iter()
                        .any(|(&l, b)| layer_values(r, l).iter().any(|&v| !b.contains(v)));
                    bad.then_some(Flag::OutOfRange)
                })
            }
            DefenseKind::TimingJitter { max_jitter } => {
                let delay = seed::rng(seed::derive(seed, &[seed::DEFENSE_DOMAIN]))
                    .random_range(0..=*max_jitter);
                let exec = self.shot(attack, x, seed, delay)?;
                single(&exec, delay, &|_| None)
            }
            DefenseKind::CrossCheck { .. } => {
                let reference = self.reference.as_ref().expect("prepared reference");
                let exec = self.shot(attack, x, seed, 0)?;
                // one MAC per (class, feature) at the first layer's MAC cost
                let extra = (NUM_CLASSES * x.len()) as u64 * first_mac_cycles(attack.target.trace);
                let ref_class = reference.predict(x);
                single(&exec, extra, &|r| {
                    (r.predicted_class != ref_class).then_some(Flag::ReferenceMismatch)
                })
            }
            DefenseKind::GlitchMonitor { detection_prob } => {
                let exec = self.shot(attack, x, seed, 0)?;
                let detected = exec.result().is_none()
                    && seed::rng(seed::derive(seed, &[seed::DEFENSE_DOMAIN]))
                        .random::<f64>()
                        < *detection_prob;
                if detected {
                    DefendedOutcome {
                        output: DefendedOutput::Rejected,
                        flags: vec![Flag::GlitchDetected],
                        cost_cycles: base,
                    }
                } else {
                    single(&exec, 0, &|_| None)
                }
            }
        })
    }

    fn predict(&self, attack: &Attack<'_>, x: &[f64], seed: u64) -> Result<DefendedOutcome> {
        let mut out = self.attempt(attack, x, seed)?;
        if self.policy.action_on_flag == FlagAction::Retry {
            let mut retry = 0;
            while !out.flags.is_empty() && out.output == DefendedOutput::Rejected && retry < self.policy.max_retries
            {
                retry += 1;
                let next = self.attempt(
                    attack,
                    x,
                    seed::derive(seed, &[seed::DEFENSE_DOMAIN, retry as u64]),
                )?;
                out = DefendedOutcome {
                    output: next.output,
                    flags: out.flags.into_iter().chain(next.flags).collect(),
                    cost_cycles: out.cost_cycles + next.cost_cycles,
                };
                if !matches!(out.output, DefendedOutput::Rejected) {
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// One defended inference of `x` under `attack`.
pub fn defended_predict(
    policy: &DefensePolicy,
    attack: &Attack<'_>,
    x: &[f64],
    seed: u64,
) -> Result<DefendedOutcome> {
    attack.glitch.validate()?;
    Prepared::new(policy, attack.target.params)?.predict(attack, x, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub policy: String,
    pub n_trials: usize,
    /// Undefended mispredictions per trial.
    pub baseline_fault_rate: f64,
    /// Accepted wrong classes per trial.
    pub defended_fault_rate: f64,
    /// Trials with at least one flag.
    pub flagged_rate: f64,
    pub rejected_rate: f64,
    pub baseline_reset_rate: f64,
    pub defended_reset_rate: f64,
    /// Defended cycles over undefended cycles.
    pub overhead_factor: f64,
}

impl DefenseReport {
    pub fn write_csv<W: Write>(reports: &[DefenseReport], mut w: W) -> Result<()> {
        writeln!(
            w,
            "policy,baseline_fault_rate,defended_fault_rate,flagged_rate,overhead_factor"
        )?;
        for r in reports {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.policy, r.baseline_fault_rate, r.defended_fault_rate, r.flagged_rate, r.overhead_factor
            )?;
        }
        Ok(())
    }
}

/// Runs `reps` trials per input with and without the policy on identical
/// trial seeds.
pub fn evaluate_defense(
    policy: &DefensePolicy,
    attack: &Attack<'_>,
    inputs: &[ProtocolInput],
    reps: usize,
    campaign_seed: u64,
) -> Result<DefenseReport> {
    let prepared = Prepared::new(policy, attack.target.params)?;
    let baseline = run_inputs(&attack.target, inputs, reps, attack.glitch, campaign_seed)?;
    let n = baseline.trials.len();
    let defended: Vec<DefendedOutcome> = (0..n)
        .into_par_iter()
        .map(|t| {
            let input = &inputs[t / reps];
            prepared.predict(attack, &input.features, seed::trial_seed(campaign_seed, t as u64))
        })
        .collect::<Result<_>>()?;

    let rate = |k: usize| k as f64 / n as f64;
    let wrong = defended
        .iter()
        .enumerate()
        .filter(|(t, o)| matches!(o.output, DefendedOutput::Class(c) if c != inputs[t / reps].true_class))
        .count();
    let count = |f: &dyn Fn(&DefendedOutcome) -> bool| defended.iter().filter(|o| f(o)).count();
    let base_cycles = attack.target.trace.total_cycles as u128 * n as u128;
    let def_cycles: u128 = defended.iter().map(|o| o.cost_cycles as u128).sum();
    Ok(DefenseReport {
        policy: policy.kind.label(),
        n_trials: n,
        baseline_fault_rate: rate(baseline.fault_count),
        defended_fault_rate: rate(wrong),
        flagged_rate: rate(count(&|o| !o.flags.is_empty())),
        rejected_rate: rate(count(&|o| o.output == DefendedOutput::Rejected)),
        baseline_reset_rate: rate(baseline.reset_count),
        defended_reset_rate: rate(count(&|o| o.output == DefendedOutput::ResetOrHang)),
        overhead_factor: def_cycles as f64 / base_cycles as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{CorruptionKind, SusceptibilityProfile};
    use crate::model::Dims;
    use crate::trace::{compile_trace, CostModel};

    /// All weights zero; class 18 wins on its bias, class 16 is runner-up.
    fn bias_model() -> ModelParams {
        let mut p = ModelParams::zeros(Dims::default());
        p.bo[18] = 10.0;
        p.bo[16] = 9.0;
        p
    }

    /// Skips output bias adds with probability `p`, nothing else.
    fn bias_skip_profile(p: f64) -> SusceptibilityProfile {
        let mut prof = SusceptibilityProfile::default();
        prof.corrupt_prob = OpKind::ALL
            .iter()
            .map(|&k| (k, if k == OpKind::BiasAdd { p } else { 0.0 }))
            .collect();
        prof.corruption_mix = BTreeMap::from([(CorruptionKind::SkipOp, 1.0)]);
        prof.reset_coeff = 0.0;
        prof
    }

    fn bias18_glitch(trace: &MicroOpTrace) -> GlitchConfig {
        let op = trace
            .ops
            .iter()
            .find(|o| o.layer == Layer::Output && o.kind == OpKind::BiasAdd && o.neuron == 18)
            .unwrap();
        GlitchConfig {
            width: 2400,
            offset: 2400,
            external_offset: op.cycle_start,
            repeat: 1,
        }
    }

    fn input18() -> Vec<ProtocolInput> {
        vec![ProtocolInput {
            input_id: 0,
            true_class: 18,
            features: vec![0.0; 10],
        }]
    }

    #[test]
    fn policy_validation() {
        for shots in [0, 1, 2, 4] {
            assert!(DefensePolicy::new(DefenseKind::MajorityVote { shots }).validate().is_err());
        }
        assert!(DefensePolicy::new(DefenseKind::MajorityVote { shots: 5 }).validate().is_ok());
        assert!(DefensePolicy::new(DefenseKind::EntropyCheck { threshold: -0.1 })
            .validate()
            .is_err());
        assert!(DefensePolicy::new(DefenseKind::GlitchMonitor { detection_prob: 1.5 })
            .validate()
            .is_err());
    }

    #[test]
    fn entropy_bounds() {
        let uniform = vec![1.0 / 32.0; 32];
        assert!(entropy(&uniform) <= 32f64.ln());
        let mut onehot = vec![0.0; 32];
        onehot[7] = 1.0;
        assert_eq!(entropy(&onehot), 0.0);
    }

    #[test]
    fn entropy_check_at_max_never_rejects() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = bias_skip_profile(0.5);
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::EntropyCheck {
            threshold: 32f64.ln(),
        });
        for s in 0..200 {
            let out = defended_predict(&policy, &attack, &[0.0; 10], s).unwrap();
            assert!(out.flags.is_empty());
        }
    }

    #[test]
    fn majority_vote_without_faults_is_clean() {
        let params = crate::train::initialize(Dims::default(), 5);
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = SusceptibilityProfile::inert();
        let g = GlitchConfig {
            width: 2600,
            offset: 2600,
            external_offset: 1000,
            repeat: 5,
        };
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::MajorityVote { shots: 3 });
        for s in 0..20u64 {
            let x: Vec<f64> = (0..10).map(|i| ((s * 7 + i) % 5) as f64 - 2.0).collect();
            let clean = forward(&params, &x).unwrap().predicted_class;
            let out = defended_predict(&policy, &attack, &x, s).unwrap();
            assert_eq!(out.output, DefendedOutput::Class(clean));
        }
    }

    #[test]
    fn jitter_without_attack_is_a_no_op() {
        let params = crate::train::initialize(Dims::default(), 6);
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = SusceptibilityProfile::default();
        let g = GlitchConfig {
            width: 0,
            offset: 0,
            external_offset: 20_000,
            repeat: 1,
        };
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::TimingJitter { max_jitter: 5000 });
        for s in 0..20u64 {
            let x: Vec<f64> = (0..10).map(|i| ((s + i) % 3) as f64 - 1.0).collect();
            let clean = forward(&params, &x).unwrap().predicted_class;
            let out = defended_predict(&policy, &attack, &x, s).unwrap();
            assert_eq!(out.output, DefendedOutput::Class(clean));
        }
    }

    #[test]
    fn identity_glitch_report_is_clean() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = bias_skip_profile(1.0);
        let mut g = bias18_glitch(&trace);
        g.width = 0;
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::MajorityVote { shots: 3 });
        let r = evaluate_defense(&policy, &attack, &input18(), 50, 1).unwrap();
        assert_eq!(r.baseline_fault_rate, 0.0);
        assert_eq!(r.defended_fault_rate, 0.0);
        assert_eq!(r.overhead_factor, 3.0);
    }

    #[test]
    fn majority_vote_reduces_wrong_outputs() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = bias_skip_profile(0.2);
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::MajorityVote { shots: 3 });
        let r = evaluate_defense(&policy, &attack, &input18(), 2000, 9).unwrap();
        assert!((r.baseline_fault_rate - 0.2).abs() < 0.03, "{r:?}");
        assert!((r.defended_fault_rate - 0.104).abs() < 0.03, "{r:?}");
        assert_eq!(r.rejected_rate, 0.0);
    }

    #[test]
    fn majority_vote_counts_resets_as_lost_votes() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let mut profile = bias_skip_profile(0.0);
        let g = bias18_glitch(&trace);
        // reset probability 1/2 per shot
        profile.reset_coeff = 0.5 * 4000.0 / g.width as f64;
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::MajorityVote { shots: 3 });
        let r = evaluate_defense(&policy, &attack, &input18(), 4000, 12).unwrap();
        assert!((r.baseline_reset_rate - 0.5).abs() < 0.03, "{r:?}");
        assert_eq!(r.defended_fault_rate, 0.0);
        // all three reset: 1/8; exactly one survivor: 3/8
        assert!((r.defended_reset_rate - 0.125).abs() < 0.02, "{r:?}");
        assert!((r.rejected_rate - 0.375).abs() < 0.03, "{r:?}");
        assert_eq!(r.flagged_rate, r.rejected_rate);
    }

    #[test]
    fn jitter_moves_the_target_away() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = bias_skip_profile(1.0);
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::TimingJitter { max_jitter: 100 });
        let r = evaluate_defense(&policy, &attack, &input18(), 1000, 4).unwrap();
        assert_eq!(r.baseline_fault_rate, 1.0);
        // 5-cycle op, 101 possible delays
        assert!(r.defended_fault_rate < 0.15, "{r:?}");
        assert!(r.overhead_factor > 1.0);
    }

    #[test]
    fn glitch_monitor_flags_resets() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let mut profile = bias_skip_profile(0.0);
        profile.reset_coeff = 1e9;
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::GlitchMonitor { detection_prob: 1.0 });
        let r = evaluate_defense(&policy, &attack, &input18(), 100, 4).unwrap();
        assert_eq!(r.baseline_reset_rate, 1.0);
        assert_eq!(r.flagged_rate, 1.0);
        assert_eq!(r.rejected_rate, 1.0);
    }

    #[test]
    fn cross_check_flags_reference_disagreement() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = SusceptibilityProfile::inert();
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let policy = DefensePolicy::new(DefenseKind::CrossCheck { centroid_scale: 1.0 });
        let c18 = centroid(18, &GenConfig::default()).unwrap();
        let c3 = centroid(3, &GenConfig::default()).unwrap();
        let ok = defended_predict(&policy, &attack, &c18, 0).unwrap();
        assert_eq!(ok.output, DefendedOutput::Class(18));
        let bad = defended_predict(&policy, &attack, &c3, 0).unwrap();
        assert_eq!(bad.flags, vec![Flag::ReferenceMismatch]);
        assert!(ok.cost_cycles > trace.total_cycles);
    }

    #[test]
    fn range_check_flags_out_of_bounds() {
        let params = bias_model();
        let trace = compile_trace(Dims::default(), &CostModel::bench_calibrated()).unwrap();
        let profile = bias_skip_profile(1.0);
        let g = bias18_glitch(&trace);
        let attack = Attack {
            target: Target::new(&params, &trace, &profile),
            glitch: &g,
        };
        let bounds = calibrate_bounds(&params, &input18(), 0.0).unwrap();
        assert_eq!(bounds[&Layer::Output], Bounds { lo: 0.0, hi: 10.0 });
        let mut policy = DefensePolicy::new(DefenseKind::ActivationRangeCheck { bounds });
        let out = defended_predict(&policy, &attack, &[0.0; 10], 0).unwrap();
        // the skipped bias leaves zo[18] = 0, still inside [0, 10]
        assert_eq!(out.output, DefendedOutput::Class(16));
        policy.kind = DefenseKind::ActivationRangeCheck {
            bounds: BTreeMap::from([(Layer::Output, Bounds { lo: 1.0, hi: 10.0 })]),
        };
        let out = defended_predict(&policy, &attack, &[0.0; 10], 0).unwrap();
        assert_eq!(out.output, DefendedOutput::Rejected);
    }

    #[test]
    fn report_csv() {
        let r = DefenseReport {
            policy: "majority_vote(3)".into(),
            n_trials: 1,
            baseline_fault_rate: 0.2,
            defended_fault_rate: 0.104,
            flagged_rate: 0.0,
            rejected_rate: 0.0,
            baseline_reset_rate: 0.0,
            defended_reset_rate: 0.0,
            overhead_factor: 3.0,
        };
        let mut buf = Vec::new();
        DefenseReport::write_csv(&[r], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "policy,baseline_fault_rate,defended_fault_rate,flagged_rate,overhead_factor\n\
             majority_vote(3),0.200000,0.104000,0.000000,3.000000\n"
        );
    }
}
