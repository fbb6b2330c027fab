//! Statistics over campaign logs: Hamming distances, per-bit flip rates,
//! predicted-class histograms and top-k configuration tables.
//!
//! Resets carry no prediction, so they are counted but excluded from every
//! bit and class statistic.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::campaign::TrialRecord;
use crate::error::{Error, Result};
use crate::model::{Bits, NUM_CLASSES, NUM_QUBITS};
use crate::search::SearchReport;

pub fn hamming_bits(a: Bits, b: Bits) -> u32 {
    (a.class() ^ b.class()).count_ones()
}

/// Hamming distance between two 5-character bitstrings.
pub fn hamming(a: &str, b: &str) -> Result<u32> {
    Ok(hamming_bits(a.parse()?, b.parse()?))
}

/// Per-position flip flags (leftmost first), `None` for a reset.
fn flips(record: &TrialRecord) -> Result<Option<[bool; NUM_QUBITS]>> {
    let Some(pred) = record.predicted() else {
        return Ok(None);
    };
    let t = Bits::from_class(record.true_class as usize)?.to_array();
    let p = Bits::from_class(pred)?.to_array();
    Ok(Some(std::array::from_fn(|i| t[i] != p[i])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitFlipStats {
    /// Flip rate per position, leftmost bit first. `None` if every trial reset.
    pub per_bit_flip_rate: Option<[f64; NUM_QUBITS]>,
    pub mean_hamming: Option<f64>,
    /// Classified trials by Hamming distance 0..=5.
    pub hamming_histogram: [usize; NUM_QUBITS + 1],
    pub flip_counts: [usize; NUM_QUBITS],
    pub n_reset: usize,
    pub n_trials: usize,
}

impl BitFlipStats {
    pub fn n_classified(&self) -> usize {
        self.n_trials - self.n_reset
    }

    /// Pearson chi-square test of the flip counts against "every position
    /// equally likely to flip". `None` when there are no flips at all.
    pub fn uniformity(&self) -> Option<ChiSquareTest> {
        let total: usize = self.flip_counts.iter().sum();
        if total == 0 {
            return None;
        }
        let expected = total as f64 / NUM_QUBITS as f64;
        let statistic: f64 = self
            .flip_counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dof = (NUM_QUBITS - 1) as f64;
        let dist = ChiSquared::new(dof).expect("positive dof");
        Some(ChiSquareTest {
            statistic,
            dof: NUM_QUBITS - 1,
            p_value: dist.sf(statistic),
        })
    }

    /// CSV: `bit,rate`, one row per position, leftmost bit as 0.
    /// Rates are empty when every trial reset.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bit,rate")?;
        for b in 0..NUM_QUBITS {
            match self.per_bit_flip_rate {
                Some(r) => writeln!(w, "{b},{}", r[b])?,
                None => writeln!(w, "{b},")?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn bit_flip_stats(log: &[TrialRecord]) -> Result<BitFlipStats> {
    if log.is_empty() {
        return Err(Error::invalid("bit-flip statistics need a non-empty log"));
    }
    let mut hist = [0usize; NUM_QUBITS + 1];
    let mut counts = [0usize; NUM_QUBITS];
    let mut n_reset = 0;
    for r in log {
        match flips(r)? {
            None => n_reset += 1,
            Some(f) => {
                let mut h = 0;
                for (c, &flipped) in counts.iter_mut().zip(&f) {
                    if flipped {
                        *c += 1;
                        h += 1;
                    }
                }
                hist[h] += 1;
            }
        }
    }
    let classified = log.len() - n_reset;
    let (rates, mean) = if classified == 0 {
        (None, None)
    } else {
        let n = classified as f64;
        let weighted: usize = hist.iter().enumerate().map(|(h, &c)| h * c).sum();
        (
            Some(counts.map(|c| c as f64 / n)),
            Some(weighted as f64 / n),
        )
    };
    Ok(BitFlipStats {
        per_bit_flip_rate: rates,
        mean_hamming: mean,
        hamming_histogram: hist,
        flip_counts: counts,
        n_reset,
        n_trials: log.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: [usize; NUM_CLASSES],
    /// Matching trials, resets included.
    pub total: usize,
    pub n_reset: usize,
}

impl ClassHistogram {
    pub fn classified(&self) -> usize {
        self.total - self.n_reset
    }

    pub fn fraction(&self, class: usize) -> Option<f64> {
        let n = self.classified();
        (n > 0).then(|| self.counts[class] as f64 / n as f64)
    }

    /// Classes with at least one count, most frequent first (ties: lower class).
    pub fn modes(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..NUM_CLASSES).filter(|&c| self.counts[c] > 0).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }

    /// CSV: `class,count` for all 32 classes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "class,count")?;
        for (c, n) in self.counts.iter().enumerate() {
            writeln!(w, "{c},{n}")?;
        }
        Ok(())
    }
}

/// Predicted-class counts over trials whose true class matches `filter`
/// (all trials when `None`).
pub fn class_histogram(log: &[TrialRecord], filter: Option<usize>) -> ClassHistogram {
    let mut h = ClassHistogram {
        counts: [0; NUM_CLASSES],
        total: 0,
        n_reset: 0,
    };
    for r in log
        .iter()
        .filter(|r| filter.is_none_or(|c| r.true_class as usize == c))
    {
        h.total += 1;
        match r.predicted() {
            Some(p) => h.counts[p] += 1,
            None => h.n_reset += 1,
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKRow {
    pub configuration: usize,
    pub width: u32,
    pub offset: u32,
    pub external_offset: u64,
    pub repeats: u32,
    pub faults: usize,
}

pub fn top_k_table(report: &SearchReport, k: usize) -> Result<Vec<TopKRow>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    Ok(report
        .top_k
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| TopKRow {
            configuration: i + 1,
            width: e.glitch.width,
            offset: e.glitch.offset,
            external_offset: e.glitch.external_offset,
            repeats: e.glitch.repeat,
            faults: e.fault_count,
        })
        .collect())
}

pub fn write_top_k_csv<W: Write>(rows: &[TopKRow], mut w: W) -> Result<()> {
    writeln!(w, "configuration,width,offset,external_offset,repeats,faults")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.configuration, r.width, r.offset, r.external_offset, r.repeats, r.faults
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::Verdict;
    use crate::fault::GlitchConfig;
    use crate::search::Evaluation;
    use proptest::prelude::*;

    fn record(true_class: u8, verdict: Verdict) -> TrialRecord {
        TrialRecord {
            trial_index: 0,
            input_id: 0,
            true_class,
            glitch: GlitchConfig {
                width: 0,
                offset: 0,
                external_offset: 0,
                repeat: 1,
            },
            verdict,
            hamming: None,
            bit_flips: None,
            seed: 0,
        }
    }

    fn verdict(true_class: u8, pred: Option<u8>) -> Verdict {
        match pred {
            None => Verdict::ResetOrHang,
            Some(p) if p == true_class => Verdict::Correct,
            Some(p) => Verdict::Misprediction(p),
        }
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming("10010", "10000").unwrap(), 1);
        assert_eq!(hamming("01101", "01101").unwrap(), 0);
        assert_eq!(hamming("00000", "11111").unwrap(), 5);
        assert!(hamming("1001", "10000").is_err());
        assert!(hamming("10020", "10000").is_err());
        assert!(hamming("100100", "10000").is_err());
    }

    #[test]
    fn hamming_is_a_metric_on_all_pairs() {
        let s: Vec<String> = (0..NUM_CLASSES).map(|c| format!("{c:05b}")).collect();
        for a in &s {
            for b in &s {
                let dab = hamming(a, b).unwrap();
                assert_eq!(dab == 0, a == b);
                assert_eq!(dab, hamming(b, a).unwrap());
                for c in &s {
                    assert!(dab <= hamming(a, c).unwrap() + hamming(c, b).unwrap());
                }
            }
        }
    }

    #[test]
    fn single_trial_stats() {
        let s = bit_flip_stats(&[record(18, Verdict::Misprediction(16))]).unwrap();
        assert_eq!(s.per_bit_flip_rate, Some([0.0, 0.0, 0.0, 1.0, 0.0]));
        assert_eq!(s.mean_hamming, Some(1.0));
        assert_eq!(s.hamming_histogram, [0, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn all_reset_log() {
        let log = vec![record(3, Verdict::ResetOrHang); 4];
        let s = bit_flip_stats(&log).unwrap();
        assert_eq!(s.per_bit_flip_rate, None);
        assert_eq!(s.mean_hamming, None);
        assert_eq!(s.n_reset, 4);
        assert_eq!(s.n_trials, 4);
        let h = class_histogram(&log, None);
        assert_eq!(h.counts.iter().sum::<usize>(), 0);
        assert_eq!(h.classified(), 0);
        assert!(bit_flip_stats(&[]).is_err());
    }

    #[test]
    fn class_histogram_filter() {
        let log = vec![
            record(18, Verdict::Correct),
            record(18, Verdict::Misprediction(16)),
            record(18, Verdict::Correct),
            record(18, Verdict::ResetOrHang),
            record(3, Verdict::Correct),
        ];
        let h = class_histogram(&log, Some(18));
        assert_eq!(h.counts[18], 2);
        assert_eq!(h.counts[16], 1);
        assert_eq!(h.counts[3], 0);
        assert_eq!(h.total, 4);
        assert_eq!(h.n_reset, 1);
        assert_eq!(h.modes(), vec![18, 16]);
        assert_eq!(class_histogram(&log, None).total, 5);
    }

    #[test]
    fn uniformity_test() {
        let mut s = bit_flip_stats(&[record(0, Verdict::Correct)]).unwrap();
        assert!(s.uniformity().is_none());
        s.flip_counts = [10, 10, 10, 10, 10];
        let t = s.uniformity().unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        s.flip_counts = [50, 0, 0, 0, 0];
        // (40^2 + 4 * 10^2) / 10 = 200
        let t = s.uniformity().unwrap();
        assert!((t.statistic - 200.0).abs() < 1e-9);
        assert!(t.p_value < 1e-30);
    }

    #[test]
    fn top_k_row_layout() {
        let e = Evaluation {
            glitch: GlitchConfig {
                width: 2700,
                offset: 2600,
                external_offset: 14208,
                repeat: 5,
            },
            score: 1.0,
            fault_count: 27,
            reset_count: 0,
        };
        let report = SearchReport {
            evaluated: vec![e],
            top_k: vec![e],
        };
        let rows = top_k_table(&report, 5).unwrap();
        assert_eq!(rows.len(), 1);
        let mut buf = Vec::new();
        write_top_k_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some("1,2700,2600,14208,5,27"));
        assert!(top_k_table(&report, 0).is_err());
    }

    proptest! {
        #[test]
        fn mean_hamming_is_sum_of_bit_rates(
            trials in prop::collection::vec((0u8..32, prop::option::weighted(0.8, 0u8..32)), 1..200)
        ) {
            let log: Vec<TrialRecord> = trials
                .iter()
                .map(|&(t, p)| record(t, verdict(t, p)))
                .collect();
            let s = bit_flip_stats(&log).unwrap();
            prop_assert_eq!(s.hamming_histogram.iter().sum::<usize>() + s.n_reset, s.n_trials);
            if let (Some(rates), Some(mean)) = (s.per_bit_flip_rate, s.mean_hamming) {
                prop_assert!((rates.iter().sum::<f64>() - mean).abs() <= 1e-12);
            }
            let h = class_histogram(&log, None);
            prop_assert_eq!(h.counts.iter().sum::<usize>() + h.n_reset, h.total);
        }
    }
}
