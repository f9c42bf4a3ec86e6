//! Context and target block sampling over the patch grid.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};

/// Axis-aligned rectangle of patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Patch count requested by the scale draw, before rounding to a
    /// rectangle and clamping to the grid.
    pub requested: usize,
    indices: Vec<usize>,
}

impl BlockMask {
    pub fn new(grid: (usize, usize), top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (gh, gw) = grid;
        if height == 0 || width == 0 || top + height > gh || left + width > gw {
            return Err(Error::shape(format!(
                "block {height}x{width} at ({top},{left}) does not fit a {gh}x{gw} grid"
            )));
        }
        let indices = (top..top + height)
            .flat_map(|r| (left..left + width).map(move |c| r * gw + c))
            .collect();
        Ok(BlockMask {
            grid_h: gh,
            grid_w: gw,
            top,
            left,
            height,
            width,
            requested: height * width,
            indices,
        })
    }

    /// Sorted row-major patch indices covered by the block.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn area(&self) -> usize {
        self.indices.len()
    }
}

/// One context index set plus `M` target blocks, with the context disjoint
/// from every target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Context rectangle before target removal.
    pub context_block: BlockMask,
    /// Sorted visible context indices.
    pub context: Vec<usize>,
    pub targets: Vec<BlockMask>,
}

impl MaskSet {
    /// One line per grid row: `T` target, `C` context, `.` neither.
    pub fn render(&self) -> String {
        let mut cells = vec![b'.'; self.grid_h * self.grid_w];
        for &i in &self.context {
            cells[i] = b'C';
        }
        for t in &self.targets {
            for &i in t.indices() {
                cells[i] = b'T';
            }
        }
        let mut out = String::with_capacity(cells.len() + self.grid_h);
        for row in cells.chunks(self.grid_w) {
            out.push_str(std::str::from_utf8(row).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn target_union(&self) -> BTreeSet<usize> {
        self.targets.iter().flat_map(|t| t.indices().iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub num_targets: usize,
    pub context_scale: (f64, f64),
    pub context_aspect: (f64, f64),
    pub target_scale: (f64, f64),
    pub target_aspect: (f64, f64),
    pub max_retries: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            num_targets: 4,
            context_scale: (0.85, 1.0),
            context_aspect: (1.0, 1.0),
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            max_retries: 20,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), unit: bool) -> Result<()> {
    let ok = lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi && (!unit || hi <= 1.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid {name} range [{lo}, {hi}]")))
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_targets == 0 {
            return Err(Error::Config("at least one target block is required".into()));
        }
        check_range("context scale", self.context_scale, true)?;
        check_range("target scale", self.target_scale, true)?;
        check_range("context aspect", self.context_aspect, false)?;
        check_range("target aspect", self.target_aspect, false)
    }
}

/// Draws a block with `scale * N` patches (rounded) and aspect ratio
/// `height / width` drawn from `aspect`, placed uniformly on the grid.
pub fn sample_block<R: Rng>(
    grid: (usize, usize),
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> Result<BlockMask> {
    let (gh, gw) = grid;
    let n_total = gh * gw;
    if n_total == 0 {
        return Err(Error::Sampling("degenerate grid with no patches".into()));
    }
    check_range("scale", scale, true)?;
    check_range("aspect", aspect, false)?;
    let s = rng.gen_range(scale.0..=scale.1);
    let a = rng.gen_range(aspect.0..=aspect.1);
    let n = (s * n_total as f64).round() as usize;
    let h = ((n as f64 * a).sqrt().round() as usize).clamp(1, gh);
    let w = ((n as f64 / h as f64).round() as usize).clamp(1, gw);
    let top = rng.gen_range(0..=gh - h);
    let left = rng.gen_range(0..=gw - w);
    let mut block = BlockMask::new(grid, top, left, h, w)?;
    block.requested = n;
    Ok(block)
}

/// Samples `M` target blocks, then one context block whose overlap with
/// the targets is removed. Resamples everything up to `max_retries` times
/// if the context comes out empty.
pub fn sample_masks<R: Rng>(grid: (usize, usize), cfg: &MaskConfig, rng: &mut R) -> Result<MaskSet> {
    cfg.validate()?;
    for _ in 0..=cfg.max_retries {
        let targets = (0..cfg.num_targets)
            .map(|_| sample_block(grid, cfg.target_scale, cfg.target_aspect, rng))
            .collect::<Result<Vec<_>>>()?;
        let context_block = sample_block(grid, cfg.context_scale, cfg.context_aspect, rng)?;
        let covered: BTreeSet<usize> = targets.iter().flat_map(|t| t.indices().iter().copied()).collect();
        let context: Vec<usize> = context_block
            .indices()
            .iter()
            .copied()
            .filter(|i| !covered.contains(i))
            .collect();
        if !context.is_empty() {
            return Ok(MaskSet {
                grid_h: grid.0,
                grid_w: grid.1,
                context_block,
                context,
                targets,
            });
        }
    }
    Err(Error::Sampling(format!(
        "context empty after {} retries on a {}x{} grid",
        cfg.max_retries, grid.0, grid.1
    )))
}
