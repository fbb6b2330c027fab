//! Mini-batch SGD with softmax cross-entropy for the readout network.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{forward, relu, Dims, Matrix, ModelParams, NUM_CLASSES};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub h1: usize,
    pub h2: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = Dims::default();
        TrainConfig {
            h1: dims.h1,
            h2: dims.h2,
            learning_rate: 0.05,
            epochs: 40,
            batch_size: 32,
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn initialize(dims: Dims, seed: u64) -> ModelParams {
    let mut rng = seed::rng(seed);
    let mut params = ModelParams::zeros(dims);
    for m in [&mut params.w1, &mut params.w2, &mut params.wo] {
        let limit = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
        for r in 0..m.rows() {
            for v in m.row_mut(r) {
                *v = rng.random_range(-limit..limit);
            }
        }
    }
    params
}

struct Grads {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    wo: Matrix,
    bo: Vec<f64>,
}

impl Grads {
    fn zeros(dims: Dims) -> Self {
        let p = ModelParams::zeros(dims);
        Grads {
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            wo: p.wo,
            bo: p.bo,
        }
    }
}

fn accumulate(params: &ModelParams, x: &[f64], label: usize, g: &mut Grads) -> Result<()> {
    let r = forward(params, x)?;
    // dL/dzo for softmax cross-entropy
    let mut dzo = r.probs.clone();
    dzo[label] -= 1.0;

    let mut da2 = vec![0.0; r.a2.len()];
    for (k, &dz) in dzo.iter().enumerate() {
        g.bo[k] += dz;
        let row = g.wo.row_mut(k);
        for (j, &a) in r.a2.iter().enumerate() {
            row[j] += dz * a;
            da2[j] += dz * params.wo.get(k, j);
        }
    }
    let dz2: Vec<f64> = da2
        .iter()
        .zip(&r.z2)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();

    let mut da1 = vec![0.0; r.a1.len()];
    for (k, &dz) in dz2.iter().enumerate() {
        g.b2[k] += dz;
        let row = g.w2.row_mut(k);
        for (j, &a) in r.a1.iter().enumerate() {
            row[j] += dz * a;
            da1[j] += dz * params.w2.get(k, j);
        }
    }
    for (k, (&d, &z)) in da1.iter().zip(&r.z1).enumerate() {
        let dz = if relu(z) > 0.0 { d } else { 0.0 };
        g.b1[k] += dz;
        let row = g.w1.row_mut(k);
        for (j, &xj) in x.iter().enumerate() {
            row[j] += dz * xj;
        }
    }
    Ok(())
}

fn apply(params: &mut ModelParams, g: &Grads, step: f64) {
    fn sub(dst: &mut [f64], src: &[f64], step: f64) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d -= step * s;
        }
    }
    for (p, gm) in [
        (&mut params.w1, &g.w1),
        (&mut params.w2, &g.w2),
        (&mut params.wo, &g.wo),
    ] {
        for r in 0..p.rows() {
            sub(p.row_mut(r), gm.row(r), step);
        }
    }
    sub(&mut params.b1, &g.b1, step);
    sub(&mut params.b2, &g.b2, step);
    sub(&mut params.bo, &g.bo, step);
}

/// Trains on the `train` split of `dataset`. Deterministic in `seed`.
pub fn train(dataset: &Dataset, hyper: &TrainConfig, seed: u64) -> Result<ModelParams> {
    let samples: Vec<_> = dataset.split(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let mut seen = [false; NUM_CLASSES];
    for s in &samples {
        seen[s.true_class] = true;
    }
    if let Some(missing) = seen.iter().position(|&x| !x) {
        return Err(Error::Training(format!(
            "class {missing} missing from training split"
        )));
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0) {
        return Err(Error::Training(
            "batch_size must be >= 1 and learning_rate > 0".into(),
        ));
    }
    let dims = Dims {
        d: dataset.d,
        h1: hyper.h1,
        h2: hyper.h2,
    };
    dims.validate()?;

    let mut params = initialize(dims, seed::derive(seed, &[0]));
    let mut rng = seed::rng(seed::derive(seed, &[1]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let mut g = Grads::zeros(dims);
            for &i in batch {
                accumulate(&params, &samples[i].features, samples[i].true_class, &mut g)?;
            }
            apply(&mut params, &g, hyper.learning_rate / batch.len() as f64);
        }
    }
    params.validate().map_err(|e| Error::Training(e.to_string()))?;
    Ok(params)
}

/// Fraction of `split` samples classified correctly by the clean forward pass.
pub fn accuracy(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<f64> {
    let mut n = 0usize;
    let mut ok = 0usize;
    for s in dataset.split(split) {
        n += 1;
        if forward(params, &s.features)?.predicted_class == s.true_class {
            ok += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no samples in split"));
    }
    Ok(ok as f64 / n as f64)
}
