// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multinomial logistic-regression probes on hidden states.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::matmul;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-4;

/// Fit a softmax classifier on a seeded `train_fraction` of the rows by
/// full-batch gradient descent on standardized features and report the
/// accuracy on the remaining rows.
pub fn linear_probe(
    activations: &[Vec<f32>],
    labels: &[u32],
    train_fraction: f64,
    epochs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let n = activations.len();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} activations but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Data("a probe needs at least two examples".into()));
    }
    let d = activations[0].len();
    if d == 0 || activations.iter().any(|a| a.len() != d) {
        return Err(Error::Shape("activations must share one non-zero dimension".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let classes: BTreeMap<u32, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let c = classes.len();
    if c < 2 {
        return Err(Error::Data("a probe needs at least two classes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (m, &x) in mean.iter_mut().zip(&activations[i]) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train {
        for k in 0..d {
            sd[k] += (f64::from(activations[i][k]) - mean[k]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / n_train as f64).sqrt().max(1e-8));
    let (mean, sd) = (&mean, &sd);
    let features = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| (0..d).map(move |k| (f64::from(activations[i][k]) - mean[k]) / sd[k]))
            .collect()
    };
    let x_train = features(train);
    let y_train: Vec<usize> = train.iter().map(|&i| classes[&labels[i]]).collect();

    let mut w = vec![0.0f64; d * c];
    let mut b = vec![0.0f64; c];
    let mut logits = vec![0.0; n_train * c];
    let mut dlogits = vec![0.0; n_train * c];
    let mut gw = vec![0.0; d * c];
    for _ in 0..epochs {
        forward(&x_train, &w, &b, n_train, d, c, &mut logits);
        for r in 0..n_train {
            let row = &logits[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..c {
                let p = (row[k] - max).exp() / z;
                dlogits[r * c + k] = (p - f64::from(u8::from(k == y_train[r]))) / n_train as f64;
            }
        }
        matmul(d, n_train, c, &x_train, true, &dlogits, false, &mut gw, false);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= LEARNING_RATE * (gi + L2 * *wi);
        }
        for k in 0..c {
            let g: f64 = (0..n_train).map(|r| dlogits[r * c + k]).sum();
            b[k] -= LEARNING_RATE * g;
        }
    }
    let accuracy = |rows: &[usize]| -> f64 {
        let x = features(rows);
        let mut l = vec![0.0; rows.len() * c];
        forward(&x, &w, &b, rows.len(), d, c, &mut l);
        let hits = rows
            .iter()
            .enumerate()
            .filter(|&(r, &i)| crate::model::forward_argmax(&l[r * c..(r + 1) * c]) as usize == classes[&labels[i]])
            .count();
        hits as f64 / rows.len() as f64
    };
    Ok(ProbeResult {
        n_classes: c,
        n_train,
        n_test: test.len(),
        train_accuracy: accuracy(train),
        test_accuracy: accuracy(test),
    })
}

fn forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, c: usize, out: &mut [f64]) {
    matmul(n, d, c, x, false, w, false, out, false);
    for r in 0..n {
        for k in 0..c {
            out[r * c + k] += b[k];
        }
    }
}
