//! Representation-collapse diagnostic.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Mean over feature dimensions of the population standard deviation taken
/// across every token of every example. `reps` holds one `[P, d]` tensor
/// per example.
pub fn collapse_metric<T: Scalar>(reps: &[Tensor<T>]) -> Result<f64> {
    if reps.len() < 2 {
        return Err(Error::shape(format!("collapse metric needs at least 2 examples, got {}", reps.len())));
    }
    let d = reps[0].cols();
    let mut rows = 0usize;
    let mut sum = vec![0.0f64; d];
    for r in reps {
        if r.rank() != 2 || r.cols() != d {
            return Err(Error::shape(format!("representation shape {:?}, expected [P, {d}]", r.shape())));
        }
        rows += r.rows();
        for row in r.data().chunks(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let mut var = vec![0.0f64; d];
    for r in reps {
        for row in r.data().chunks(d) {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v.as_f64() - mu).powi(2);
            }
        }
    }
    Ok(var.iter().map(|v| (v / rows as f64).sqrt()).sum::<f64>() / d as f64)
}
