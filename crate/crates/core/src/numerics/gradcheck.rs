//! Central finite-difference checking of tape gradients in 64-bit.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error. Gradients that vanish
/// identically (a key bias under softmax shift invariance) leave only
/// finite-difference noise, which is then compared absolutely.
pub const ZERO_FLOOR: f64 = 1e-6;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Worst norm-wise relative error `|analytic - numeric| / max(|analytic|, |numeric|, ZERO_FLOOR)`
    /// over all inputs.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(ZERO_FLOOR);
        worst = worst.max(diff2.sqrt() / scale);
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}
