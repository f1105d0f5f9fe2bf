//! Non-differentiable numerics shared across modules.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a log.
pub const PROB_FLOOR: f32 = 1e-12;

/// Numerically stable softmax (max-subtracted, accumulated in `f64`).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// `-ln(probs[label])` for a one-hot target, with the probability floored
/// at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f32], onehot: &[f32]) -> Result<f32> {
    if probs.len() != onehot.len() || probs.is_empty() {
        return Err(Error::dim("cross_entropy", probs.len(), onehot.len()));
    }
    let label = onehot_label(onehot)?;
    Ok(-(probs[label].max(PROB_FLOOR)).ln())
}

/// Index of the single `1.0` entry of a one-hot vector.
pub fn onehot_label(onehot: &[f32]) -> Result<usize> {
    let mut label = None;
    for (i, &v) in onehot.iter().enumerate() {
        if v == 1.0 {
            if label.is_some() {
                return Err(Error::Domain("one-hot vector has several ones".into()));
            }
            label = Some(i);
        } else if v != 0.0 {
            return Err(Error::Domain(format!("one-hot entry {v} is neither 0 nor 1")));
        }
    }
    label.ok_or_else(|| Error::Domain("one-hot vector has no one".into()))
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
}

pub fn normalized(v: &[f32]) -> Vec<f32> {
    let n = l2_norm(v);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}
