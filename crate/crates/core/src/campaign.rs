//! Trial protocol: fresh device state, one input, one armed glitch, one
//! logged outcome. Trials are independent and seeded by index, so they run
//! in parallel and are merged back in `trial_index` order.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fault::{execute_plan, resolve_glitch, Execution, FaultPlan, GlitchConfig, SusceptibilityProfile};
use crate::model::{forward, Bits, ForwardResult, ModelParams, NUM_CLASSES, NUM_QUBITS};
use crate::seed;
use crate::trace::MicroOpTrace;

/// Repetitions per class in the reference protocol (32 x 3 = 96 attempts).
pub const DEFAULT_REPS: usize = 3;

/// The device under test.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub params: &'a ModelParams,
    pub trace: &'a MicroOpTrace,
    pub profile: &'a SusceptibilityProfile,
    /// A disarmed glitch module never fires; records still carry its settings.
    pub armed: bool,
}

impl<'a> Target<'a> {
    pub fn new(params: &'a ModelParams, trace: &'a MicroOpTrace, profile: &'a SusceptibilityProfile) -> Self {
        Target {
            params,
            trace,
            profile,
            armed: true,
        }
    }

    pub fn disarmed(self) -> Self {
        Target { armed: false, ..self }
    }

    pub fn plan(&self, glitch: &GlitchConfig, trial_seed: u64) -> FaultPlan {
        if self.armed {
            resolve_glitch(glitch, self.profile, self.trace, trial_seed)
        } else {
            FaultPlan::NoEffect
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolInput {
    pub input_id: u64,
    pub true_class: usize,
    pub features: Vec<f64>,
}

impl ProtocolInput {
    pub fn from_samples<'s>(samples: impl IntoIterator<Item = &'s Sample>) -> Vec<ProtocolInput> {
        samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| ProtocolInput {
                input_id: i as u64,
                true_class: s.true_class,
                features: s.features.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    Misprediction(u8),
    ResetOrHang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: u64,
    pub input_id: u64,
    pub true_class: u8,
    pub glitch: GlitchConfig,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamming: Option<u8>,
    /// Per-position flips, leftmost bit first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit_flips: Option<[bool; NUM_QUBITS]>,
    pub seed: u64,
}

impl TrialRecord {
    /// Predicted class, absent for resets.
    pub fn predicted(&self) -> Option<usize> {
        match self.verdict {
            Verdict::Correct => Some(self.true_class as usize),
            Verdict::Misprediction(p) => Some(p as usize),
            Verdict::ResetOrHang => None,
        }
    }

    fn from_execution(
        trial_index: u64,
        input: &ProtocolInput,
        glitch: GlitchConfig,
        execution: &Execution,
        seed: u64,
    ) -> Self {
        let truth = Bits::from_class(input.true_class).expect("validated class");
        let (verdict, hamming, bit_flips) = match execution.result() {
            None => (Verdict::ResetOrHang, None, None),
            Some(r) => {
                let t = truth.to_array();
                let p = r.predicted_bits.to_array();
                let flips: [bool; NUM_QUBITS] = std::array::from_fn(|i| t[i] != p[i]);
                let h = flips.iter().filter(|&&f| f).count() as u8;
                let verdict = if r.predicted_class == input.true_class {
                    Verdict::Correct
                } else {
                    Verdict::Misprediction(r.predicted_class as u8)
                };
                (verdict, Some(h), Some(flips))
            }
        };
        TrialRecord {
            trial_index,
            input_id: input.input_id,
            true_class: input.true_class as u8,
            glitch,
            verdict,
            hamming,
            bit_flips,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub glitch: GlitchConfig,
    pub trials: Vec<TrialRecord>,
    pub fault_count: usize,
    pub reset_count: usize,
}

impl ConfigResult {
    fn from_trials(glitch: GlitchConfig, trials: Vec<TrialRecord>) -> Self {
        let fault_count = trials
            .iter()
            .filter(|t| matches!(t.verdict, Verdict::Misprediction(_)))
            .count();
        let reset_count = trials
            .iter()
            .filter(|t| t.verdict == Verdict::ResetOrHang)
            .count();
        ConfigResult {
            glitch,
            trials,
            fault_count,
            reset_count,
        }
    }

    pub fn correct_count(&self) -> usize {
        self.trials.len() - self.fault_count - self.reset_count
    }

    pub fn summary(&self) -> ConfigSummary {
        ConfigSummary {
            glitch: self.glitch,
            n_trials: self.trials.len(),
            fault_count: self.fault_count,
            reset_count: self.reset_count,
            correct_count: self.correct_count(),
        }
    }

    /// JSON lines: one record per trial, then `{"summary": ...}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trials {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &SummaryLine { summary: self.summary() })?;
        writeln!(w)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub glitch: GlitchConfig,
    pub n_trials: usize,
    pub fault_count: usize,
    pub reset_count: usize,
    pub correct_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryLine {
    summary: ConfigSummary,
}

/// Reads trial records from a campaign log, skipping summary lines.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("log line {}: {e}", n + 1)))?;
        if value.get("summary").is_some() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("log line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn check_input(target: &Target<'_>, input: &ProtocolInput) -> Result<()> {
    if input.true_class >= NUM_CLASSES {
        return Err(Error::invalid(format!("true class {} out of range", input.true_class)));
    }
    let d = target.params.dims().d;
    if input.features.len() != d {
        return Err(Error::Dimension {
            what: "input features",
            expected: d,
            got: input.features.len(),
        });
    }
    Ok(())
}

fn run_planned(
    target: &Target<'_>,
    input: &ProtocolInput,
    clean: Option<&ForwardResult>,
    glitch: &GlitchConfig,
    trial_index: u64,
    trial_seed: u64,
) -> Result<TrialRecord> {
    let plan = target.plan(glitch, trial_seed);
    let execution = match (&plan, clean) {
        (FaultPlan::NoEffect, Some(c)) => Execution::Completed(c.clone()),
        _ => execute_plan(target.params, &input.features, &plan)?,
    };
    Ok(TrialRecord::from_execution(trial_index, input, *glitch, &execution, trial_seed))
}

/// One trial from a freshly reset device.
pub fn run_trial(
    target: &Target<'_>,
    input: &ProtocolInput,
    glitch: &GlitchConfig,
    trial_index: u64,
    trial_seed: u64,
) -> Result<TrialRecord> {
    glitch.validate()?;
    check_input(target, input)?;
    run_planned(target, input, None, glitch, trial_index, trial_seed)
}

/// Runs `reps` trials of every input, in input order. No class coverage check.
pub fn run_inputs(
    target: &Target<'_>,
    inputs: &[ProtocolInput],
    reps: usize,
    glitch: &GlitchConfig,
    campaign_seed: u64,
) -> Result<ConfigResult> {
    glitch.validate()?;
    if reps == 0 {
        return Err(Error::Protocol("reps must be >= 1".into()));
    }
    for input in inputs {
        check_input(target, input)?;
    }
    // NoEffect trials reuse the clean pass of their input.
    let clean: Vec<ForwardResult> = inputs
        .par_iter()
        .map(|i| forward(target.params, &i.features))
        .collect::<Result<_>>()?;
    let n = inputs.len() * reps;
    let trials: Vec<TrialRecord> = (0..n)
        .into_par_iter()
        .map(|t| {
            let idx = t / reps;
            let trial_index = t as u64;
            let s = seed::trial_seed(campaign_seed, trial_index);
            run_planned(target, &inputs[idx], Some(&clean[idx]), glitch, trial_index, s)
        })
        .collect::<Result<_>>()?;
    Ok(ConfigResult::from_trials(*glitch, trials))
}

/// The reference protocol: exactly one input per class, `reps` attempts
/// each, trials ordered by (class, repetition).
pub fn run_config(
    target: &Target<'_>,
    inputs: &[ProtocolInput],
    reps: usize,
    glitch: &GlitchConfig,
    campaign_seed: u64,
) -> Result<ConfigResult> {
    let ordered = protocol_order(inputs)?;
    run_inputs(target, &ordered, reps, glitch, campaign_seed)
}

/// Validates one-input-per-class and returns the inputs sorted by class.
pub fn protocol_order(inputs: &[ProtocolInput]) -> Result<Vec<ProtocolInput>> {
    let mut slots: Vec<Option<&ProtocolInput>> = vec![None; NUM_CLASSES];
    for input in inputs {
        let slot = slots
            .get_mut(input.true_class)
            .ok_or_else(|| Error::Protocol(format!("class {} out of range", input.true_class)))?;
        if slot.replace(input).is_some() {
            return Err(Error::Protocol(format!(
                "class {} appears more than once",
                input.true_class
            )));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(class, s)| {
            s.cloned()
                .ok_or_else(|| Error::Protocol(format!("class {class} missing from slice")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{centroid, GenConfig};
    use crate::fault::{Corruption, Effect};
    use crate::model::{Dims, Matrix};
    use crate::trace::{compile_trace, CostModel, Layer, OpKind};

    /// Weights that read each qubit's sign and score every class by agreement.
    fn oracle_params(gain: f64) -> ModelParams {
        let cfg = GenConfig::default();
        let dims = Dims { d: 10, h1: 10, h2: 10 };
        let mut p = ModelParams::zeros(dims);
        for q in 0..5 {
            // hidden pair (2q, 2q+1) = (bit-1 evidence, bit-0 evidence)
            p.w1.set(2 * q, 2 * q, 1.0);
            p.w1.set(2 * q + 1, 2 * q, -1.0);
        }
        p.w2 = Matrix::from_vec(10, 10, (0..100).map(|i| if i % 11 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        for k in 0..NUM_CLASSES {
            let c = centroid(k, &cfg).unwrap();
            for q in 0..5 {
                let one = c[2 * q] > 0.0;
                p.wo.set(k, 2 * q, if one { gain } else { -gain });
                p.wo.set(k, 2 * q + 1, if one { -gain } else { gain });
            }
        }
        p
    }

    fn centroid_inputs() -> Vec<ProtocolInput> {
        let cfg = GenConfig::default();
        (0..NUM_CLASSES)
            .map(|k| ProtocolInput {
                input_id: k as u64,
                true_class: k,
                features: centroid(k, &cfg).unwrap(),
            })
            .collect()
    }

    fn glitch(width: u32) -> GlitchConfig {
        GlitchConfig {
            width,
            offset: 2500,
            external_offset: 5_000,
            repeat: 3,
        }
    }

    #[test]
    fn oracle_params_are_perfect_on_centroids() {
        let p = oracle_params(4.0);
        for i in centroid_inputs() {
            assert_eq!(forward(&p, &i.features).unwrap().predicted_class, i.true_class);
        }
    }

    #[test]
    fn reference_protocol_runs_96_trials() {
        let p = oracle_params(4.0);
        let t = compile_trace(p.dims(), &CostModel::bench_calibrated()).unwrap();
        let prof = SusceptibilityProfile::default();
        let r = run_config(&Target::new(&p, &t, &prof), &centroid_inputs(), DEFAULT_REPS, &glitch(0), 1).unwrap();
        assert_eq!(r.trials.len(), 96);
        assert_eq!((r.fault_count, r.reset_count), (0, 0));
        let order: Vec<(u8, u64)> = r.trials.iter().map(|t| (t.true_class, t.trial_index)).collect();
        for (i, (class, idx)) in order.iter().enumerate() {
            assert_eq!(*idx, i as u64);
            assert_eq!(*class as usize, i / 3);
        }
    }

    #[test]
    fn missing_or_duplicate_class_is_protocol_error() {
        let p = oracle_params(4.0);
        let t = compile_trace(p.dims(), &CostModel::unit()).unwrap();
        let prof = SusceptibilityProfile::default();
        let target = Target::new(&p, &t, &prof);
        let mut inputs = centroid_inputs();
        inputs.pop();
        assert!(matches!(run_config(&target, &inputs, 3, &glitch(0), 1), Err(Error::Protocol(_))));
        inputs.push(inputs[0].clone());
        assert!(matches!(run_config(&target, &inputs, 3, &glitch(0), 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn reset_record_has_no_hamming() {
        let p = oracle_params(4.0);
        let t = compile_trace(p.dims(), &CostModel::bench_calibrated()).unwrap();
        let mut prof = SusceptibilityProfile::default();
        prof.reset_coeff = 100.0;
        let rec = run_trial(&Target::new(&p, &t, &prof), &centroid_inputs()[4], &glitch(2500), 0, 7).unwrap();
        assert_eq!(rec.verdict, Verdict::ResetOrHang);
        assert_eq!((rec.hamming, rec.bit_flips), (None, None));
        let json = serde_json::to_string(&rec).unwrap();
        assert!(!json.contains("hamming") && !json.contains("bit_flips"));
    }

    #[test]
    fn skipping_one_normalisation_keeps_a_wide_margin_correct() {
        let p = oracle_params(4.0);
        let t = compile_trace(p.dims(), &CostModel::bench_calibrated()).unwrap();
        let input = &centroid_inputs()[18];
        let clean = forward(&p, &input.features).unwrap();
        assert_eq!(clean.predicted_class, 18);
        // choose the runner-up so the skipped term is the most dangerous one
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&a, &b| clean.probs[b].total_cmp(&clean.probs[a]));
        let runner_up = order[1];
        let op = *t
            .ops
            .iter()
            .find(|o| o.layer == Layer::Output && o.kind == OpKind::NormElem && o.neuron as usize == runner_up)
            .unwrap();
        let plan = FaultPlan::Corruptions(vec![Corruption::new(Effect::SkipOp, op).unwrap()]);
        let faulted = execute_plan(&p, &input.features, &plan).unwrap();
        let got = faulted.result().unwrap();
        // oracle: the skipped slot keeps its unnormalised exp term
        let m = clean.zo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(got.probs[runner_up], (clean.zo[runner_up] - m).exp());
        assert!(got.probs[runner_up] < got.probs[18]);
        assert_eq!(got.predicted_class, 18);
    }

    #[test]
    fn same_seed_same_serialisation_and_order_independence() {
        let p = oracle_params(0.5);
        let t = compile_trace(p.dims(), &CostModel::bench_calibrated()).unwrap();
        let prof = SusceptibilityProfile::default();
        let target = Target::new(&p, &t, &prof);
        let g = GlitchConfig {
            width: 2600,
            offset: 2600,
            external_offset: 1_000,
            repeat: 5,
        };
        let a = run_config(&target, &centroid_inputs(), 3, &g, 42).unwrap();
        let b = run_config(&target, &centroid_inputs(), 3, &g, 42).unwrap();
        let (mut ja, mut jb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ja).unwrap();
        b.write_jsonl(&mut jb).unwrap();
        assert_eq!(ja, jb);

        // replaying trials in reverse with their own seeds reproduces each record
        let ordered = protocol_order(&centroid_inputs()).unwrap();
        for rec in a.trials.iter().rev() {
            let input = &ordered[rec.trial_index as usize / 3];
            let again = run_trial(&target, input, &g, rec.trial_index, rec.seed).unwrap();
            assert_eq!(&again, rec);
        }
        assert_eq!(a.fault_count + a.reset_count + a.correct_count(), a.trials.len());
    }

    #[test]
    fn jsonl_round_trip_skips_summary() {
        let p = oracle_params(4.0);
        let t = compile_trace(p.dims(), &CostModel::unit()).unwrap();
        let prof = SusceptibilityProfile::default();
        let r = run_config(&Target::new(&p, &t, &prof), &centroid_inputs(), 1, &glitch(0), 3).unwrap();
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        for field in ["trial_index", "input_id", "true_class", "glitch", "verdict", "hamming", "bit_flips", "seed"] {
            assert!(first.contains(&format!("\"{field}\"")), "{field} missing from {first}");
        }
        assert!(text.lines().last().unwrap().starts_with("{\"summary\""));
        assert_eq!(read_jsonl(text.as_bytes()).unwrap(), r.trials);
    }
}
