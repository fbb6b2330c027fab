//! Synthetic integrated-IQ readout data for the 32 five-qubit classes.
//!
//! Each qubit owns `d / 5` consecutive features (an I,Q pair by default).
//! A qubit reading 1 sits at `+centroid_scale`, a 0 at `-centroid_scale`,
//! plus isotropic Gaussian noise. The optional noisy-bit-1 channel moves
//! qubit 1's features to the opposite centroid while keeping the label.

use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NUM_CLASSES, NUM_QUBITS};
use crate::seed;

/// Qubit whose readout is noisy in the calibration preset.
pub const NOISY_QUBIT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub d: usize,
    pub centroid_scale: f64,
    pub noise_sigma: f64,
    pub bit1_flip_prob: f64,
    pub samples_per_class: usize,
    /// Fraction of each class's samples tagged `test`.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            d: 10,
            centroid_scale: 1.0,
            noise_sigma: 0.35,
            bit1_flip_prob: 0.0,
            samples_per_class: 200,
            test_fraction: 0.25,
        }
    }
}

impl GenConfig {
    /// Noisy qubit-1 readout: about a quarter of class-18 reads land on 16.
    pub fn noisy_bit1() -> Self {
        GenConfig {
            bit1_flip_prob: 0.25,
            ..GenConfig::default()
        }
    }

    pub fn features_per_qubit(&self) -> usize {
        self.d / NUM_QUBITS
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % NUM_QUBITS != 0 {
            return Err(Error::invalid(format!(
                "feature dimension {} must be a positive multiple of {NUM_QUBITS}",
                self.d
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if !self.centroid_scale.is_finite() {
            return Err(Error::invalid("centroid_scale must be finite"));
        }
        if !(0.0..=1.0).contains(&self.bit1_flip_prob) {
            return Err(Error::invalid("bit1_flip_prob must lie in [0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid(
                "samples_per_class must be >= 2 so both splits hold every class",
            ));
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        let n = (self.samples_per_class as f64 * self.test_fraction).round() as usize;
        n.clamp(1, self.samples_per_class - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub true_class: usize,
    pub features: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub samples: Vec<Sample>,
}

/// Noise-free feature vector of a class.
pub fn centroid(class_index: usize, config: &GenConfig) -> Result<Vec<f64>> {
    if class_index >= NUM_CLASSES {
        return Err(Error::invalid(format!(
            "class index {class_index} outside 0..{NUM_CLASSES}"
        )));
    }
    config.validate()?;
    let k = config.features_per_qubit();
    let mut v = vec![0.0; config.d];
    for q in 0..NUM_QUBITS {
        let value = qubit_level((class_index >> q) & 1 == 1, config.centroid_scale);
        v[q * k..(q + 1) * k].fill(value);
    }
    Ok(v)
}

fn qubit_level(bit: bool, scale: f64) -> f64 {
    if bit {
        scale
    } else {
        -scale
    }
}

pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::DATA_DOMAIN]));
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let k = config.features_per_qubit();
    let n_test = config.test_count();

    let mut samples = Vec::with_capacity(NUM_CLASSES * config.samples_per_class);
    for class in 0..NUM_CLASSES {
        for i in 0..config.samples_per_class {
            let flip = rng.random::<f64>() < config.bit1_flip_prob;
            let features = (0..config.d)
                .map(|f| {
                    let q = f / k;
                    let mut bit = (class >> q) & 1 == 1;
                    if flip && q == NOISY_QUBIT {
                        bit = !bit;
                    }
                    qubit_level(bit, config.centroid_scale) + noise.sample(&mut rng)
                })
                .collect();
            let split = if i < config.samples_per_class - n_test {
                Split::Train
            } else {
                Split::Test
            };
            samples.push(Sample {
                true_class: class,
                features,
                split,
            });
        }
    }
    Ok(Dataset {
        d: config.d,
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            d: self.d,
            samples: self.split(split).cloned().collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.true_class] += 1;
        }
        counts
    }

    /// One randomly chosen sample per class, ordered by class.
    pub fn one_per_class(&self, seed: u64) -> Result<Vec<&Sample>> {
        let mut rng = seed::rng(seed::derive(seed, &[seed::DATA_DOMAIN, 1]));
        let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); NUM_CLASSES];
        for s in &self.samples {
            by_class[s.true_class].push(s);
        }
        by_class
            .iter()
            .enumerate()
            .map(|(class, pool)| {
                pool.choose(&mut rng)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("no sample of class {class}")))
            })
            .collect()
    }

    /// CSV with header `class,f0,...,f{d-1}`; split tags are not written.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("class".to_string())
            .chain((0..self.d).map(|i| format!("f{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            write!(w, "{}", s.true_class)?;
            for v in &s.features {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Dataset::write_csv`], tagging every row `split`.
    pub fn read_csv<R: BufRead>(reader: R, split: Split) -> Result<Dataset> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"class") {
            return Err(Error::Parse("dataset header must start with `class`".into()));
        }
        let d = cols.len() - 1;
        for (i, c) in cols[1..].iter().enumerate() {
            if *c != format!("f{i}") {
                return Err(Error::Parse(format!("unexpected column {c:?}")));
            }
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    d + 1,
                    fields.len()
                )));
            }
            let true_class: usize = fields[0]
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: class: {e}", lineno + 2)))?;
            if true_class >= NUM_CLASSES {
                return Err(Error::Parse(format!(
                    "row {}: class {true_class} out of range",
                    lineno + 2
                )));
            }
            let features = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: {f:?}: {e}", lineno + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                true_class,
                features,
                split,
            });
        }
        Ok(Dataset { d, samples })
    }
}
