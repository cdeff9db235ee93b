//! Patch tokenization, random masking, positional tables, and tile splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::numerics::Tensor;

/// Flattened non-overlapping `ρ×ρ` patches of a `C×H×W` image.
///
/// Token `n` is the `n`-th patch in raster order; within a token, values are
/// laid out pixel row, pixel column, then channel (channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub tokens: Tensor,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchSet> {
    let [c, h, w] = image.shape()[..] else {
        return Err(dim_err!("patchify expects C×H×W, got {:?}", image.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("image {}×{} is not divisible into {patch}-pixel patches", h, w));
    }
    let (rows, cols) = (h / patch, w / patch);
    let k = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(rows * cols * k);
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gr * patch + py, gc * patch + px);
                    for ch in 0..c {
                        data.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(PatchSet { tokens: Tensor::new(&[rows * cols, k], data)?, patch_size: patch, grid: (rows, cols), channels: c })
}

pub fn unpatchify(patches: &PatchSet) -> Result<Tensor> {
    let (rows, cols) = patches.grid;
    let (p, c) = (patches.patch_size, patches.channels);
    let (h, w) = (rows * p, cols * p);
    if patches.tokens.shape() != [rows * cols, p * p * c] {
        return Err(dim_err!(
            "token matrix {:?} does not match grid {:?} with patch {p} and {c} channels",
            patches.tokens.shape(),
            patches.grid
        ));
    }
    let mut out = vec![0.0; c * h * w];
    let mut it = patches.tokens.data().iter();
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gr * p + py, gc * p + px);
                    for ch in 0..c {
                        out[(ch * h + y) * w + x] = *it.next().unwrap();
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Masked and visible token indices (0-based, sorted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPair {
    /// Every position visible. Used for inference-time encoding.
    pub fn none(p: usize) -> Self {
        MaskPair { masked: Vec::new(), unmasked: (0..p).collect(), ratio: 0.0, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of masked tokens: `round(ratio·P)` with halves rounded up.
pub fn masked_count(p: usize, ratio: f64) -> usize {
    ((ratio * p as f64).round() as usize).min(p)
}

/// Uniform random subset of `round(ratio·P)` positions, deterministic in `seed`.
pub fn sample_masks(p: usize, ratio: f64, seed: u64) -> Result<MaskPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(param_err!("mask ratio must lie in (0, 1), got {ratio}"));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = masked_count(p, ratio);
    let mut masked = order[..m].to_vec();
    let mut unmasked = order[m..].to_vec();
    masked.sort_unstable();
    unmasked.sort_unstable();
    Ok(MaskPair { masked, unmasked, ratio, seed })
}

/// Fixed 2-D sine-cosine table of shape `[rows·cols × d]`.
///
/// The first `d/2` columns encode the grid row, the last `d/2` the grid
/// column; each half is `[sin(pos·ω_i)…, cos(pos·ω_i)…]` with
/// `ω_i = 10000^(−i/(d/4))`.
pub fn positional_embedding(grid: (usize, usize), d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(param_err!("positional embedding width must be divisible by 4, got {d}"));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let (rows, cols) = grid;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(&[rows * cols, d], data)
}

/// Tally for one split tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSplitReport {
    pub tile_shape: [usize; 2],
    pub patch_shape: [usize; 2],
    pub kept: usize,
    pub discarded_small: usize,
    pub discarded_invalid: usize,
}

/// Value marking an invalid pixel. NaN matches any NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sentinel {
    Nan,
    Value(f64),
}

impl Default for Sentinel {
    fn default() -> Self {
        Sentinel::Nan
    }
}

impl Sentinel {
    pub fn matches(self, v: f64) -> bool {
        match self {
            Sentinel::Nan => v.is_nan(),
            Sentinel::Value(s) => v == s,
        }
    }
}

/// Cuts a `C×H×W` tile into `patch×patch` cells in raster order.
///
/// Only the `floor(H/patch)·floor(W/patch)` interior cells are candidates;
/// the right and bottom remainder strips are dropped and counted in
/// `discarded_small` (one per strip that exists). Cells with a sentinel value
/// in any band are dropped as invalid.
pub fn split_tile(tile: &Tensor, patch: usize, sentinel: Sentinel) -> Result<(Vec<Tensor>, TileSplitReport)> {
    let [c, h, w] = tile.shape()[..] else {
        return Err(dim_err!("split_tile expects C×H×W, got {:?}", tile.shape()));
    };
    if patch == 0 {
        return Err(param_err!("patch size must be at least 1"));
    }
    let (rows, cols) = (h / patch, w / patch);
    let src = tile.data();
    let mut kept = Vec::new();
    let mut invalid = 0;
    for gr in 0..rows {
        for gc in 0..cols {
            let mut data = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for y in gr * patch..(gr + 1) * patch {
                    let start = (ch * h + y) * w + gc * patch;
                    data.extend_from_slice(&src[start..start + patch]);
                }
            }
            if data.iter().any(|&v| sentinel.matches(v)) {
                invalid += 1;
            } else {
                kept.push(Tensor::new(&[c, patch, patch], data)?);
            }
        }
    }
    let strips = usize::from(h % patch != 0) + usize::from(w % patch != 0);
    let report = TileSplitReport {
        tile_shape: [h, w],
        patch_shape: [patch, patch],
        kept: kept.len(),
        discarded_small: strips,
        discarded_invalid: invalid,
    };
    Ok((kept, report))
}
