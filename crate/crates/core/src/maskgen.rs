//! Mask generation and Hadamard corruption.
//!
//! Restoration training removes half of every undamaged patch and asks the
//! generator to fill it back in. Masks are binary H×W grids (0 = removed,
//! 1 = retained) built from square cells of side `k`. For each scale the
//! pool holds one mask and its exact complement, so the zero/one ratio is
//! exactly 1:1 and every pixel is removed with probability 1/2 under
//! uniform pool sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result, Stage};
use crate::image::{self, ImagePatch};
use crate::rng::rng_for;

/// Mask construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskMode {
    /// Checkerboard over the k×k cell grid, one pair per scale (default).
    MultiscaleSquare,
    /// Alternating full-height column stripes of width k.
    Striped,
    /// Seeded uniformly random half of the cells, one pair per scale.
    Jumbled,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MaskMode::MultiscaleSquare => "multiscale_square",
            MaskMode::Striped => "striped",
            MaskMode::Jumbled => "jumbled",
        };
        f.write_str(name)
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale_square" => Ok(MaskMode::MultiscaleSquare),
            "striped" => Ok(MaskMode::Striped),
            "jumbled" => Ok(MaskMode::Jumbled),
            other => Err(Error::argument(
                Stage::Maskgen,
                format!("unknown mask mode '{other}' (expected multiscale_square, striped or jumbled)"),
            )),
        }
    }
}

/// Binary removal mask; 0 = removed, 1 = retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    scale_k: usize,
    mode: MaskMode,
    grid: Vec<u8>,
}

impl Mask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale_k(&self) -> usize {
        self.scale_k
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Row-major grid of {0,1} values.
    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.width + x]
    }

    pub fn zeros_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 0).count()
    }

    pub fn ones_count(&self) -> usize {
        self.grid.len() - self.zeros_count()
    }

    /// Elementwise complement; removed and retained regions swap.
    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            scale_k: self.scale_k,
            mode: self.mode,
            grid: self.grid.iter().map(|&v| 1 - v).collect(),
        }
    }

    fn from_cells(
        height: usize,
        width: usize,
        scale_k: usize,
        mode: MaskMode,
        removed_cell: impl Fn(usize, usize) -> bool,
    ) -> Mask {
        let mut grid = vec![1u8; height * width];
        for y in 0..height {
            let cy = y / scale_k;
            for x in 0..width {
                if removed_cell(cy, x / scale_k) {
                    grid[y * width + x] = 0;
                }
            }
        }
        Mask { height, width, scale_k, mode, grid }
    }
}

/// Immutable set of masks, two complementary masks per scale.
#[derive(Debug, Clone)]
pub struct MaskPool {
    masks: Vec<Mask>,
    scales: Vec<usize>,
    rng_seed: u64,
}

impl MaskPool {
    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Complement pairs in scale order: (mask, complement) per scale.
    pub fn pairs(&self) -> impl Iterator<Item = (&Mask, &Mask)> {
        self.masks.chunks_exact(2).map(|pair| (&pair[0], &pair[1]))
    }
}

/// Build the mask pool for the given dimensions, scales and mode.
///
/// Scales are deduplicated and ordered largest first. Each scale must divide
/// both dimensions, and its cell grid must admit an exact 1:1 split.
pub fn build_mask_pool(
    height: usize,
    width: usize,
    scales: &[usize],
    mode: MaskMode,
    seed: u64,
) -> Result<MaskPool> {
    if scales.is_empty() {
        return Err(Error::argument(Stage::Maskgen, "at least one mask scale is required"));
    }
    let mut ordered: Vec<usize> = scales.to_vec();
    ordered.sort_unstable_by(|a, b| b.cmp(a));
    ordered.dedup();

    let mut masks = Vec::with_capacity(ordered.len() * 2);
    for &k in &ordered {
        if k == 0 {
            return Err(Error::argument(Stage::Maskgen, "mask scale 0 is invalid"));
        }
        if !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::dimension(
                Stage::Maskgen,
                format!("scale {k} does not divide {height}x{width}"),
            ));
        }
        let (grid_h, grid_w) = (height / k, width / k);
        let base = match mode {
            MaskMode::MultiscaleSquare => {
                // A checkerboard splits 1:1 exactly when either grid side is
                // even; a 1x1 or odd-by-odd grid cannot.
                if grid_h % 2 != 0 && grid_w % 2 != 0 {
                    return Err(Error::argument(
                        Stage::Maskgen,
                        format!(
                            "scale {k} yields a {grid_h}x{grid_w} cell grid whose checkerboard cannot split 1:1"
                        ),
                    ));
                }
                Mask::from_cells(height, width, k, mode, |cy, cx| (cy + cx) % 2 == 0)
            }
            MaskMode::Striped => {
                if grid_w % 2 != 0 {
                    return Err(Error::argument(
                        Stage::Maskgen,
                        format!("scale {k} yields {grid_w} column stripes; an even count is required for a 1:1 split"),
                    ));
                }
                Mask::from_cells(height, width, k, mode, |_, cx| cx % 2 == 0)
            }
            MaskMode::Jumbled => {
                let cells = grid_h * grid_w;
                if cells % 2 != 0 {
                    return Err(Error::argument(
                        Stage::Maskgen,
                        format!("scale {k} yields {cells} cells; an even count is required for a 1:1 split"),
                    ));
                }
                let mut order: Vec<usize> = (0..cells).collect();
                order.shuffle(&mut rng_for(seed, "jumbled", &[k as u64]));
                let mut removed = vec![false; cells];
                for &cell in order.iter().take(cells / 2) {
                    removed[cell] = true;
                }
                Mask::from_cells(height, width, k, mode, |cy, cx| removed[cy * grid_w + cx])
            }
        };
        let comp = base.complement();
        masks.push(base);
        masks.push(comp);
    }

    Ok(MaskPool { masks, scales: ordered, rng_seed: seed })
}

/// Draw one mask uniformly from the pool; deterministic per draw seed.
pub fn sample_mask(pool: &MaskPool, draw_seed: u64) -> Result<&Mask> {
    if pool.is_empty() {
        return Err(Error::state(Stage::Maskgen, "cannot sample from an empty mask pool"));
    }
    let idx = rng_for(pool.rng_seed, "mask_draw", &[draw_seed]).gen_range(0..pool.len());
    Ok(&pool.masks[idx])
}

/// Hadamard corruption: every channel is multiplied by the mask grid.
pub fn corrupt(image: &ImagePatch, mask: &Mask) -> Result<ImagePatch> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(Error::dimension(
            Stage::Maskgen,
            format!(
                "mask {}x{} does not match image {}x{}",
                mask.height,
                mask.width,
                image.height(),
                image.width()
            ),
        ));
    }
    let mut out = image.clone();
    let plane = image.height() * image.width();
    for c in 0..image.channels() {
        let data = out.data_mut();
        for (i, &m) in mask.grid.iter().enumerate() {
            if m == 0 {
                data[c * plane + i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Export every mask as an 8-bit PNG (0 = removed, 255 = retained) named
/// `mask_{mode}_{k}_{index}.png`, index counting within the scale.
pub fn export_mask_pngs(pool: &MaskPool, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(Stage::Maskgen, dir))?;
    let mut per_scale = std::collections::HashMap::new();
    for mask in pool.masks() {
        let index = per_scale.entry(mask.scale_k).or_insert(0usize);
        let name = format!("mask_{}_{}_{}.png", mask.mode(), mask.scale_k(), index);
        *index += 1;
        let bytes: Vec<u8> = mask.grid().iter().map(|&v| if v == 0 { 0 } else { 255 }).collect();
        image::save_gray_png(&dir.join(name), &bytes, mask.height(), mask.width())?;
    }
    Ok(())
}
