//! Browser bindings: sample context/target masks, plot the EMA momentum
//! ramp, and render synthetic training pairs with their patch grid.

use wasm_bindgen::prelude::*;

use tijepa::dataprep::{synth_caption, synth_image, SYNTH_COLORS, SYNTH_QUADRANTS};
use tijepa::masking::{sample_masks, MaskConfig};
use tijepa::rng;
use tijepa::trainer::{momentum_at, EmaSchedule};

pub const CELL_NONE: u8 = 0;
pub const CELL_CONTEXT: u8 = 1;
pub const CELL_TARGET: u8 = 2;

/// One sampled mask set, flattened row-major for drawing.
#[wasm_bindgen]
pub struct MaskView {
    cells: Vec<u8>,
    context: usize,
    targets: usize,
}

#[wasm_bindgen]
impl MaskView {
    /// 0 unused, 1 context, 2 target (targets win where both apply).
    pub fn cells(&self) -> Vec<u8> {
        self.cells.clone()
    }

    pub fn context_size(&self) -> usize {
        self.context
    }

    /// Distinct patches covered by the union of target blocks.
    pub fn target_size(&self) -> usize {
        self.targets
    }
}

#[wasm_bindgen]
pub fn sample_mask_view(
    grid_h: usize,
    grid_w: usize,
    num_targets: usize,
    target_scale_max: f64,
    seed: u64,
) -> Result<MaskView, JsError> {
    let cfg = MaskConfig {
        num_targets,
        target_scale: (0.15f64.min(target_scale_max), target_scale_max),
        ..Default::default()
    };
    let set = sample_masks((grid_h, grid_w), &cfg, &mut rng::derive(seed, &[])).map_err(|e| JsError::new(&e.to_string()))?;
    let mut cells = vec![CELL_NONE; grid_h * grid_w];
    for &i in &set.context {
        cells[i] = CELL_CONTEXT;
    }
    let union = set.target_union();
    for &i in &union {
        cells[i] = CELL_TARGET;
    }
    Ok(MaskView {
        cells,
        context: set.context.len(),
        targets: union.len(),
    })
}

/// Momentum at `points` evenly spaced steps from 0 to `total_steps`.
#[wasm_bindgen]
pub fn ema_curve(start: f64, end: f64, total_steps: u64, points: usize) -> Result<Vec<f64>, JsError> {
    let sched = EmaSchedule::new(start, end, total_steps).map_err(|e| JsError::new(&e.to_string()))?;
    let points = points.max(2);
    Ok((0..points)
        .map(|i| {
            let step = (i as u64 * total_steps) / (points as u64 - 1);
            momentum_at(step, &sched)
        })
        .collect())
}

/// RGBA pixels of a synthetic pair, with patch boundaries darkened when
/// `patch > 0`.
#[wasm_bindgen]
pub fn synth_rgba(color: usize, quadrant: usize, size: usize, patch: usize) -> Vec<u8> {
    let img = synth_image(color % SYNTH_COLORS.len(), quadrant % SYNTH_QUADRANTS.len(), size);
    let mut out = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            let edge = patch > 0 && (y % patch == 0 || x % patch == 0);
            for v in img.pixel(y, x) {
                let v = if edge { v * 0.6 } else { v };
                out.push((v * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub fn synth_caption_text(color: usize, quadrant: usize) -> String {
    synth_caption(color % SYNTH_COLORS.len(), quadrant % SYNTH_QUADRANTS.len())
}
