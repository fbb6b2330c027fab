//! Cycle-annotated micro-op trace of one forward pass.
//!
//! The trace maps an external offset (cycles since the trigger) to the
//! operation executing at that cycle. Dense layers emit one `MAC` per
//! (neuron, input) pair followed by that neuron's `BIAS_ADD`; ReLU layers
//! emit one `RELU_ELEM` per element; the output layer emits its dense ops,
//! then one `EXP_ELEM` and one `NORM_ELEM` per class.
//!
//! A layer's length in cycles is therefore
//!
//! ```text
//! dense:  n_out * n_in * cost(MAC) + n_out * cost(BIAS_ADD) + epilogue
//! relu:   n * cost(RELU_ELEM) + epilogue
//! output: 32 * n_in * cost(MAC) + 32 * (cost(BIAS_ADD) + cost(EXP_ELEM) + cost(NORM_ELEM)) + epilogue
//! ```
//!
//! where `cost` honours per-layer overrides and the epilogue is charged to the
//! layer's last op.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Mac,
    BiasAdd,
    ReluElem,
    ExpElem,
    NormElem,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Mac,
        OpKind::BiasAdd,
        OpKind::ReluElem,
        OpKind::ExpElem,
        OpKind::NormElem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Mac => "MAC",
            OpKind::BiasAdd => "BIAS_ADD",
            OpKind::ReluElem => "RELU_ELEM",
            OpKind::ExpElem => "EXP_ELEM",
            OpKind::NormElem => "NORM_ELEM",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    Dense1,
    ReLU1,
    Dense2,
    ReLU2,
    Output,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Dense1,
        Layer::ReLU1,
        Layer::Dense2,
        Layer::ReLU2,
        Layer::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Dense1 => "Dense1",
            Layer::ReLU1 => "ReLU1",
            Layer::Dense2 => "Dense2",
            Layer::ReLU2 => "ReLU2",
            Layer::Output => "Output",
        }
    }

    pub fn is_relu(self) -> bool {
        matches!(self, Layer::ReLU1 | Layer::ReLU2)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown layer {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MicroOp {
    pub kind: OpKind,
    pub layer: Layer,
    pub neuron: u32,
    /// Input index for `MAC`, otherwise 0.
    pub operand: u32,
    pub cycle_start: u64,
    /// Inclusive.
    pub cycle_end: u64,
}

impl MicroOp {
    pub fn cycles(&self) -> u64 {
        self.cycle_end - self.cycle_start + 1
    }

    pub fn contains(&self, cycle: u64) -> bool {
        (self.cycle_start..=self.cycle_end).contains(&cycle)
    }

    /// Identity of the op independent of where it sits in time.
    pub fn key(&self) -> OpKey {
        OpKey {
            kind: self.kind,
            layer: self.layer,
            neuron: self.neuron,
            operand: self.operand,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpKey {
    pub kind: OpKind,
    pub layer: Layer,
    pub neuron: u32,
    pub operand: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Cycles between the trigger and the first Dense1 op.
    pub prologue_cycles: u64,
    pub cycles_per: BTreeMap<OpKind, u64>,
    /// Per-layer replacements for `cycles_per`.
    #[serde(default)]
    pub layer_cycles_per: BTreeMap<Layer, BTreeMap<OpKind, u64>>,
    /// Extra cycles charged to each layer's final op (loop exit, call return).
    #[serde(default)]
    pub layer_epilogue: BTreeMap<Layer, u64>,
}

impl CostModel {
    /// Every op takes one cycle, no prologue or epilogue.
    pub fn unit() -> Self {
        CostModel {
            prologue_cycles: 0,
            cycles_per: OpKind::ALL.iter().map(|&k| (k, 1)).collect(),
            layer_cycles_per: BTreeMap::new(),
            layer_epilogue: BTreeMap::new(),
        }
    }

    /// Costs fitted to the measured per-layer windows of the reference MCU
    /// port, for [`Dims::default`] (d=10, h1=16, h2=32):
    ///
    /// | layer  | window            | fit                                   |
    /// |--------|-------------------|---------------------------------------|
    /// | Dense1 | [687, 14047]      | 160*83 + 16*5 + 1 = 13361             |
    /// | ReLU1  | [14048, 15602]    | 16*97 + 3 = 1555                      |
    /// | Dense2 | [15603, 37269]    | 512*42 + 32*5 + 3 = 21667             |
    /// | ReLU2  | [37270, 40259]    | 32*93 + 14 = 2990                     |
    /// | Output | [40260, 118602]   | 1024*42 + 32*(5+1000+99) + 7 = 78343  |
    pub fn bench_calibrated() -> Self {
        let cycles_per = BTreeMap::from([
            (OpKind::Mac, 42),
            (OpKind::BiasAdd, 5),
            (OpKind::ReluElem, 97),
            (OpKind::ExpElem, 1000),
            (OpKind::NormElem, 99),
        ]);
        let layer_cycles_per = BTreeMap::from([
            (Layer::Dense1, BTreeMap::from([(OpKind::Mac, 83)])),
            (Layer::ReLU2, BTreeMap::from([(OpKind::ReluElem, 93)])),
        ]);
        let layer_epilogue = BTreeMap::from([
            (Layer::Dense1, 1),
            (Layer::ReLU1, 3),
            (Layer::Dense2, 3),
            (Layer::ReLU2, 14),
            (Layer::Output, 7),
        ]);
        CostModel {
            prologue_cycles: 687,
            cycles_per,
            layer_cycles_per,
            layer_epilogue,
        }
    }

    pub fn cost(&self, layer: Layer, kind: OpKind) -> u64 {
        self.layer_cycles_per
            .get(&layer)
            .and_then(|m| m.get(&kind))
            .or_else(|| self.cycles_per.get(&kind))
            .copied()
            .unwrap_or(0)
    }

    pub fn epilogue(&self, layer: Layer) -> u64 {
        self.layer_epilogue.get(&layer).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in OpKind::ALL {
            for layer in Layer::ALL {
                if self.cost(layer, kind) == 0 {
                    return Err(Error::invalid(format!(
                        "cost of {kind} in {layer} must be >= 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Closed-form length of a layer's window, in cycles.
    pub fn layer_length(&self, dims: Dims, layer: Layer) -> u64 {
        let c = |k| self.cost(layer, k);
        let (d, h1, h2, nc) = (dims.d as u64, dims.h1 as u64, dims.h2 as u64, NUM_CLASSES as u64);
        let body = match layer {
            Layer::Dense1 => h1 * d * c(OpKind::Mac) + h1 * c(OpKind::BiasAdd),
            Layer::ReLU1 => h1 * c(OpKind::ReluElem),
            Layer::Dense2 => h2 * h1 * c(OpKind::Mac) + h2 * c(OpKind::BiasAdd),
            Layer::ReLU2 => h2 * c(OpKind::ReluElem),
            Layer::Output => {
                nc * h2 * c(OpKind::Mac)
                    + nc * (c(OpKind::BiasAdd) + c(OpKind::ExpElem) + c(OpKind::NormElem))
            }
        };
        body + self.epilogue(layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroOpTrace {
    pub ops: Vec<MicroOp>,
    pub trigger_cycle: u64,
    pub total_cycles: u64,
    pub windows: BTreeMap<Layer, (u64, u64)>,
}

struct Emitter<'a> {
    cost: &'a CostModel,
    ops: Vec<MicroOp>,
    cursor: u64,
}

impl Emitter<'_> {
    fn push(&mut self, kind: OpKind, layer: Layer, neuron: usize, operand: usize) {
        let len = self.cost.cost(layer, kind);
        self.ops.push(MicroOp {
            kind,
            layer,
            neuron: neuron as u32,
            operand: operand as u32,
            cycle_start: self.cursor,
            cycle_end: self.cursor + len - 1,
        });
        self.cursor += len;
    }

    fn dense(&mut self, layer: Layer, n_out: usize, n_in: usize) {
        for j in 0..n_out {
            for i in 0..n_in {
                self.push(OpKind::Mac, layer, j, i);
            }
            self.push(OpKind::BiasAdd, layer, j, 0);
        }
    }

    fn elementwise(&mut self, kind: OpKind, layer: Layer, n: usize) {
        for j in 0..n {
            self.push(kind, layer, j, 0);
        }
    }

    fn close_layer(&mut self, layer: Layer) {
        let extra = self.cost.epilogue(layer);
        if let Some(last) = self.ops.last_mut() {
            last.cycle_end += extra;
        }
        self.cursor += extra;
    }
}

pub fn compile_trace(dims: Dims, cost: &CostModel) -> Result<MicroOpTrace> {
    dims.validate()?;
    cost.validate()?;
    let mut e = Emitter {
        cost,
        ops: Vec::with_capacity(dims.mac_count() + dims.h1 * 2 + dims.h2 * 2 + NUM_CLASSES * 3),
        cursor: cost.prologue_cycles,
    };
    e.dense(Layer::Dense1, dims.h1, dims.d);
    e.close_layer(Layer::Dense1);
    e.elementwise(OpKind::ReluElem, Layer::ReLU1, dims.h1);
    e.close_layer(Layer::ReLU1);
    e.dense(Layer::Dense2, dims.h2, dims.h1);
    e.close_layer(Layer::Dense2);
    e.elementwise(OpKind::ReluElem, Layer::ReLU2, dims.h2);
    e.close_layer(Layer::ReLU2);
    e.dense(Layer::Output, NUM_CLASSES, dims.h2);
    e.elementwise(OpKind::ExpElem, Layer::Output, NUM_CLASSES);
    e.elementwise(OpKind::NormElem, Layer::Output, NUM_CLASSES);
    e.close_layer(Layer::Output);
    MicroOpTrace::from_ops(e.ops)
}

impl MicroOpTrace {
    /// Builds a trace from contiguous, layer-ordered ops.
    pub fn from_ops(ops: Vec<MicroOp>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| Error::invalid("empty trace"))?;
        let trigger_cycle = first.cycle_start;
        for pair in ops.windows(2) {
            if pair[1].cycle_start != pair[0].cycle_end + 1 || pair[1].layer < pair[0].layer {
                return Err(Error::invalid(format!(
                    "ops not contiguous/layer-ordered at cycle {}",
                    pair[1].cycle_start
                )));
            }
        }
        if ops.iter().any(|op| op.cycle_end < op.cycle_start) {
            return Err(Error::invalid("op with cycle_end < cycle_start"));
        }
        let total_cycles = ops.last().expect("non-empty").cycle_end;
        let mut windows: BTreeMap<Layer, (u64, u64)> = BTreeMap::new();
        for op in &ops {
            windows
                .entry(op.layer)
                .and_modify(|w| w.1 = op.cycle_end)
                .or_insert((op.cycle_start, op.cycle_end));
        }
        Ok(MicroOpTrace {
            ops,
            trigger_cycle,
            total_cycles,
            windows,
        })
    }

    pub fn window(&self, layer: Layer) -> Option<(u64, u64)> {
        self.windows.get(&layer).copied()
    }

    /// The op executing at `cycle`, by binary search.
    pub fn locate(&self, cycle: u64) -> Result<&MicroOp> {
        self.locate_index(cycle).map(|i| &self.ops[i])
    }

    pub fn locate_index(&self, cycle: u64) -> Result<usize> {
        if cycle < self.trigger_cycle || cycle > self.total_cycles {
            return Err(Error::OutOfTrace {
                cycle,
                start: self.trigger_cycle,
                end: self.total_cycles,
            });
        }
        Ok(self.ops.partition_point(|op| op.cycle_end < cycle))
    }

    /// Same ops delayed by `by` cycles.
    pub fn shifted(&self, by: u64) -> MicroOpTrace {
        MicroOpTrace {
            ops: self
                .ops
                .iter()
                .map(|op| MicroOp {
                    cycle_start: op.cycle_start + by,
                    cycle_end: op.cycle_end + by,
                    ..*op
                })
                .collect(),
            trigger_cycle: self.trigger_cycle + by,
            total_cycles: self.total_cycles + by,
            windows: self
                .windows
                .iter()
                .map(|(&l, &(s, e))| (l, (s + by, e + by)))
                .collect(),
        }
    }

    /// Cycles spent in ops of `kind` within `layer`.
    pub fn cycles_in(&self, layer: Layer, kind: OpKind) -> u64 {
        self.ops
            .iter()
            .filter(|op| op.layer == layer && op.kind == kind)
            .map(MicroOp::cycles)
            .sum()
    }

    /// Diagnostic CSV dump.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "kind,layer,neuron,operand,cycle_start,cycle_end")?;
        for op in &self.ops {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                op.kind, op.layer, op.neuron, op.operand, op.cycle_start, op.cycle_end
            )?;
        }
        Ok(())
    }
}

/// Per-layer windows of a trace.
pub fn layer_windows(trace: &MicroOpTrace) -> BTreeMap<Layer, (u64, u64)> {
    trace.windows.clone()
}
