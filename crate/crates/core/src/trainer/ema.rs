//! Momentum schedule and the exponential moving average of the online
//! fusion module into its target twin.

use crate::error::{Error, Result};
use crate::model::{ONLINE_PREFIX, TARGET_PREFIX};
use crate::numerics::Scalar;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl EmaSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= start && start <= end && end <= 1.0) {
            return Err(Error::Config(format!("EMA momentum range [{start}, {end}] must satisfy 0 <= start <= end <= 1")));
        }
        Ok(EmaSchedule { start, end, total_steps })
    }
}

/// Linear ramp from `start` at step 0 to `end` at `total_steps`. Steps past
/// the end are clamped.
pub fn momentum_at(step: u64, sched: &EmaSchedule) -> f64 {
    if sched.total_steps == 0 {
        return sched.end;
    }
    if step > sched.total_steps {
        log::warn!("momentum requested at step {step} beyond schedule length {}; clamping", sched.total_steps);
        return sched.end;
    }
    if step == sched.total_steps {
        return sched.end;
    }
    sched.start + (sched.end - sched.start) * step as f64 / sched.total_steps as f64
}

/// `target <- m * target + (1 - m) * online` for every tensor under the
/// online prefix, evaluated as `target + (1 - m) * (online - target)` in
/// 64-bit. Both endpoints are exact: `m = 1` leaves targets alone and
/// `m = 0` copies.
pub fn ema_update<T: Scalar>(store: &mut ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    let online_prefix = format!("{ONLINE_PREFIX}.");
    let pairs: Vec<(String, String)> = store
        .with_prefix(&online_prefix)
        .map(|(k, _)| (k.clone(), format!("{TARGET_PREFIX}.{}", &k[online_prefix.len()..])))
        .collect();
    if m == 1.0 {
        return Ok(());
    }
    for (src, dst) in pairs {
        let online = store.value(&src)?.clone();
        let target = &mut store.get_mut(&dst)?.value;
        if target.shape() != online.shape() {
            return Err(Error::shape(format!(
                "EMA pair {src} {:?} vs {dst} {:?}",
                online.shape(),
                target.shape()
            )));
        }
        if m == 0.0 {
            *target = online;
            continue;
        }
        for (t, o) in target.data_mut().iter_mut().zip(online.data()) {
            let (tv, ov) = (t.as_f64(), o.as_f64());
            *t = T::from_f64(tv + (1.0 - m) * (ov - tv));
        }
    }
    Ok(())
}
