//! Random grid masking of student inputs.
//!
//! A coarse `s×s` grid of uniform `[0,1)` draws is thresholded at the
//! masking ratio `α` (a cell is kept when its draw is `≥ α`), expanded to
//! the image by nearest-neighbour resize, and masked pixels are replaced by
//! a fill value. The expected masked fraction is `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    /// Masked pixels become 0.0.
    #[default]
    Zero,
    /// Masked pixels become 1.0, the `[0,1]` image maximum.
    Max,
    /// Zero on even adaptation steps, Max on odd ones.
    Alternate,
}

impl Fill {
    /// Concrete fill value for a given adaptation step.
    pub fn value_at(self, step: u64) -> f64 {
        match self {
            Fill::Zero => 0.0,
            Fill::Max => 1.0,
            Fill::Alternate => {
                if step % 2 == 0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub grid: usize,
    pub ratio: f64,
    pub fill: Fill,
}

impl MaskSpec {
    pub fn new(grid: usize, ratio: f64, fill: Fill) -> Result<Self> {
        let spec = MaskSpec { grid, ratio, fill };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("mask grid size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("masking ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Draws, thresholds and upsamples one mask for an `h×w` image.
    pub fn draw(&self, h: usize, w: usize, rng: &mut StreamRng) -> Result<BinaryMask> {
        let grid = sample_mask(self.grid, rng);
        binarize(&grid, self.ratio)?.upscale(h, w)
    }
}

/// `s×s` i.i.d. uniform `[0,1)` values.
pub fn sample_mask(s: usize, rng: &mut StreamRng) -> Tensor {
    let data = (0..s * s).map(|_| rng::uniform(rng)).collect();
    Tensor::new(vec![s, s], data).expect("s×s buffer")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    /// `s×s`, 1 = keep, 0 = masked.
    pub grid: Vec<u8>,
    pub grid_size: usize,
    /// `H×W` nearest-neighbour expansion of `grid`; empty until upscaled.
    pub upscaled: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

/// Keeps cells whose draw is `≥ ratio`.
pub fn binarize(grid: &Tensor, ratio: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("masking ratio {ratio} outside [0, 1]")));
    }
    let s = match grid.shape() {
        [a, b] if a == b => *a,
        other => return Err(Error::Dimension(format!("mask grid must be square, got {other:?}"))),
    };
    Ok(BinaryMask {
        grid: grid.data().iter().map(|&v| u8::from(v >= ratio)).collect(),
        grid_size: s,
        upscaled: Vec::new(),
        height: 0,
        width: 0,
    })
}

impl BinaryMask {
    /// Nearest-neighbour expansion: pixel `(y, x)` reads cell
    /// `(⌊y·s/H⌋, ⌊x·s/W⌋)`.
    pub fn upscale(mut self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Dimension("mask target must be at least 1×1".into()));
        }
        let s = self.grid_size;
        let cols: Vec<usize> = (0..w).map(|x| x * s / w).collect();
        self.upscaled = (0..h)
            .flat_map(|y| {
                let row = y * s / h;
                let grid = &self.grid;
                cols.iter().map(move |&c| grid[row * s + c])
            })
            .collect();
        self.height = h;
        self.width = w;
        Ok(self)
    }

    /// Fraction of zero (masked) entries in the upscaled mask.
    pub fn masked_fraction(&self) -> f64 {
        let src = if self.upscaled.is_empty() { &self.grid } else { &self.upscaled };
        src.iter().filter(|&&v| v == 0).count() as f64 / src.len() as f64
    }
}

/// Copies `x`, replacing masked pixels in every channel by `fill_value`.
pub fn apply_mask(x: &Tensor, mask: &BinaryMask, fill_value: f64) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if mask.upscaled.is_empty() || (mask.height, mask.width) != (h, w) {
        return Err(Error::Dimension(format!(
            "mask is {}×{}, image is {h}×{w}",
            mask.height, mask.width
        )));
    }
    let mut out = x.clone();
    out.grad = None;
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &m) in plane.iter_mut().zip(&mask.upscaled) {
            if m == 0 {
                *v = fill_value;
            }
        }
    }
    Ok(out)
}
