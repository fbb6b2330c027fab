//! The 5-layer readout-correction network: parameters, clean forward pass,
//! class/bitstring conversion and the `MLPv1` weights file.
//!
//! Layer order is Dense1 -> ReLU1 -> Dense2 -> ReLU2 -> Output(softmax).
//! Accumulation order is fixed (bias added after the input products, inputs
//! in index order) so that the fault engine's instrumented executor can
//! reproduce this pass bit for bit.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_QUBITS: usize = 5;
pub const NUM_CLASSES: usize = 1 << NUM_QUBITS;

/// A 5-bit readout string. Qubit 4 is the leftmost character.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bits(u8);

impl Bits {
    pub fn from_class(class_index: usize) -> Result<Self> {
        if class_index >= NUM_CLASSES {
            return Err(Error::invalid(format!(
                "class index {class_index} outside 0..{NUM_CLASSES}"
            )));
        }
        Ok(Bits(class_index as u8))
    }

    pub fn class(self) -> usize {
        self.0 as usize
    }

    /// Value of qubit `q` (0 = least significant).
    pub fn qubit(self, q: usize) -> bool {
        (self.0 >> q) & 1 == 1
    }

    /// Bits in string order, leftmost (qubit 4) first.
    pub fn to_array(self) -> [bool; NUM_QUBITS] {
        std::array::from_fn(|pos| self.qubit(NUM_QUBITS - 1 - pos))
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:05b}", self.0)
    }
}

impl FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != NUM_QUBITS || !s.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(Error::invalid(format!("malformed 5-bit string {s:?}")));
        }
        Ok(Bits(u8::from_str_radix(s, 2).expect("validated binary string")))
    }
}

impl TryFrom<String> for Bits {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Bits> for String {
    fn from(b: Bits) -> String {
        b.to_string()
    }
}

/// Big-endian 5-bit rendering of a class index.
pub fn predict_bits(class_index: usize) -> Result<Bits> {
    Bits::from_class(class_index)
}

pub fn bits_to_class(bits: Bits) -> usize {
    bits.class()
}

/// Layer widths. The class count is fixed at 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
}

impl Dims {
    pub const C: usize = NUM_CLASSES;

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::invalid(format!("zero layer dimension in {self:?}")));
        }
        Ok(())
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn mac_count(&self) -> usize {
        self.d * self.h1 + self.h1 * self.h2 + self.h2 * Self::C
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d: 10, h1: 16, h2: 32 }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        ModelParams {
            w1: Matrix::zeros(dims.h1, dims.d),
            b1: vec![0.0; dims.h1],
            w2: Matrix::zeros(dims.h2, dims.h1),
            b2: vec![0.0; dims.h2],
            wo: Matrix::zeros(NUM_CLASSES, dims.h2),
            bo: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.w1.cols(),
            h1: self.w1.rows(),
            h2: self.w2.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        let checks: [(&'static str, usize, usize); 6] = [
            ("b1", dims.h1, self.b1.len()),
            ("w2 columns", dims.h1, self.w2.cols()),
            ("b2", dims.h2, self.b2.len()),
            ("wo columns", dims.h2, self.wo.cols()),
            ("wo rows", NUM_CLASSES, self.wo.rows()),
            ("bo", NUM_CLASSES, self.bo.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if !self.tensors().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("non-finite model parameter"));
        }
        Ok(())
    }

    /// Tensors in file order: w1, b1, w2, b2, wo, bo.
    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        [
            self.w1.as_slice(),
            &self.b1[..],
            self.w2.as_slice(),
            &self.b2[..],
            self.wo.as_slice(),
            &self.bo[..],
        ]
        .into_iter()
    }

    /// Writes the `MLPv1` text format.
    pub fn write_mlpv1<W: Write>(&self, mut w: W) -> Result<()> {
        let dims = self.dims();
        writeln!(w, "MLPv1 {} {} {} {}", dims.d, dims.h1, dims.h2, NUM_CLASSES)?;
        for tensor in self.tensors() {
            let line: Vec<String> = tensor.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Reads the `MLPv1` text format; the value count must match exactly.
    pub fn read_mlpv1<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty weights file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "MLPv1" {
            return Err(Error::Parse(format!("bad MLPv1 header {header:?}")));
        }
        let nums: Vec<usize> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("header field {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if nums[3] != NUM_CLASSES {
            return Err(Error::Parse(format!(
                "class count must be {NUM_CLASSES}, got {}",
                nums[3]
            )));
        }
        let dims = Dims {
            d: nums[0],
            h1: nums[1],
            h2: nums[2],
        };
        dims.validate()?;

        let mut values = Vec::new();
        for line in lines {
            for tok in line?.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::Parse(format!("value {tok:?}: {e}")))?;
                values.push(v);
            }
        }
        let sizes = [
            dims.h1 * dims.d,
            dims.h1,
            dims.h2 * dims.h1,
            dims.h2,
            NUM_CLASSES * dims.h2,
            NUM_CLASSES,
        ];
        let expected: usize = sizes.iter().sum();
        if values.len() != expected {
            return Err(Error::Dimension {
                what: "MLPv1 value count",
                expected,
                got: values.len(),
            });
        }
        let mut it = values.into_iter();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let params = ModelParams {
            w1: Matrix::from_vec(dims.h1, dims.d, take(sizes[0]))?,
            b1: take(sizes[1]),
            w2: Matrix::from_vec(dims.h2, dims.h1, take(sizes[2]))?,
            b2: take(sizes[3]),
            wo: Matrix::from_vec(NUM_CLASSES, dims.h2, take(sizes[4]))?,
            bo: take(sizes[5]),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub zo: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    pub predicted_bits: Bits,
}

impl ForwardResult {
    pub(crate) fn from_parts(
        z1: Vec<f64>,
        a1: Vec<f64>,
        z2: Vec<f64>,
        a2: Vec<f64>,
        zo: Vec<f64>,
        probs: Vec<f64>,
    ) -> Self {
        let predicted_class = argmax(&probs);
        ForwardResult {
            z1,
            a1,
            z2,
            a2,
            zo,
            probs,
            predicted_class,
            predicted_bits: Bits(predicted_class as u8),
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.z1, &self.a1, &self.z2, &self.a2, &self.zo, &self.probs]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn dense(w: &Matrix, b: &[f64], input: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|j| {
            let mut acc = 0.0;
            for (wi, xi) in w.row(j).iter().zip(input) {
                acc += wi * xi;
            }
            acc += b[j];
            acc
        })
        .collect()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite entries"));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let mut sum = 0.0;
    for v in &e {
        sum += v;
    }
    Ok(e.into_iter().map(|v| v / sum).collect())
}

/// Clean forward pass.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardResult> {
    let dims = params.dims();
    if x.len() != dims.d {
        return Err(Error::Dimension {
            what: "input features",
            expected: dims.d,
            got: x.len(),
        });
    }
    let z1 = dense(&params.w1, &params.b1, x);
    let a1: Vec<f64> = z1.iter().map(|&v| relu(v)).collect();
    let z2 = dense(&params.w2, &params.b2, &a1);
    let a2: Vec<f64> = z2.iter().map(|&v| relu(v)).collect();
    let zo = dense(&params.wo, &params.bo, &a2);
    let probs = softmax(&zo)?;
    Ok(ForwardResult::from_parts(z1, a1, z2, a2, zo, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_model_is_uniform_and_picks_class_zero() {
        let p = ModelParams::zeros(Dims::default());
        let r = forward(&p, &[0.3; 10]).unwrap();
        for v in &r.probs {
            assert!((v - 1.0 / 32.0).abs() < 1e-15);
        }
        assert_eq!(r.predicted_class, 0);
    }

    #[test]
    fn bias_forces_class_18() {
        let mut p = ModelParams::zeros(Dims::default());
        p.bo[18] = 10.0;
        let r = forward(&p, &[1.0; 10]).unwrap();
        assert_eq!(r.predicted_class, 18);
        assert_eq!(r.predicted_bits.to_string(), "10010");
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::zeros(Dims::default());
        assert!(matches!(
            forward(&p, &[0.0; 9]),
            Err(Error::Dimension { expected: 10, got: 9, .. })
        ));
    }

    #[test]
    fn softmax_closed_form_one_hot_logit() {
        let mut z = vec![0.0; 32];
        z[0] = 1.0;
        let p = softmax(&z).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 31.0)).abs() < 1e-15);
        for v in &p[1..] {
            assert!((v - 1.0 / (e + 31.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut z = vec![0.0; 32];
        z[4] = f64::NAN;
        assert!(softmax(&z).is_err());
    }

    #[test]
    fn bits_examples() {
        assert_eq!(predict_bits(18).unwrap().to_string(), "10010");
        assert_eq!(predict_bits(0).unwrap().to_string(), "00000");
        assert_eq!(predict_bits(31).unwrap().to_string(), "11111");
        assert!(predict_bits(32).is_err());
        assert!("1001".parse::<Bits>().is_err());
        assert!("10020".parse::<Bits>().is_err());
        assert_eq!(
            predict_bits(18).unwrap().to_array(),
            [true, false, false, true, false]
        );
    }

    #[test]
    fn bits_round_trip_all_classes() {
        for k in 0..NUM_CLASSES {
            let b = predict_bits(k).unwrap();
            assert_eq!(bits_to_class(b), k);
            assert_eq!(b.to_string().parse::<Bits>().unwrap(), b);
        }
    }

    #[test]
    fn mlpv1_round_trip_and_count_check() {
        let mut p = ModelParams::zeros(Dims { d: 2, h1: 3, h2: 4 });
        p.w1.set(1, 1, -0.125);
        p.bo[7] = 1.0 / 3.0;
        let mut buf = Vec::new();
        p.write_mlpv1(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("MLPv1 2 3 4 32\n"));
        let back = ModelParams::read_mlpv1(text.as_bytes()).unwrap();
        assert_eq!(back, p);

        let truncated = text.trim_end().rsplit_once(' ').unwrap().0.to_string();
        assert!(ModelParams::read_mlpv1(truncated.as_bytes()).is_err());
        assert!(ModelParams::read_mlpv1("MLPv1 2 3 4 31\n".as_bytes()).is_err());
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, NUM_CLASSES)
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(z in logits()) {
            let p = softmax(&z).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(argmax(&p), argmax(&z));
        }

        #[test]
        fn softmax_shift_invariant(z in logits()) {
            let shifted: Vec<f64> = z.iter().map(|v| v + 7.0).collect();
            let a = softmax(&z).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic_and_relu_consistent(
            seed in any::<u64>(),
            x in prop::collection::vec(-3.0f64..3.0, 10),
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let mut p = ModelParams::zeros(Dims::default());
            for m in [&mut p.w1, &mut p.w2, &mut p.wo] {
                for r in 0..m.rows() {
                    for v in m.row_mut(r) {
                        *v = rng.random_range(-1.0..1.0);
                    }
                }
            }
            let a = forward(&p, &x).unwrap();
            let b = forward(&p, &x).unwrap();
            prop_assert_eq!(&a, &b);
            for (z, act) in a.z1.iter().zip(&a.a1) {
                prop_assert_eq!(*act, z.max(0.0));
            }
            for (z, act) in a.z2.iter().zip(&a.a2) {
                prop_assert_eq!(*act, z.max(0.0));
            }
        }
    }
}
