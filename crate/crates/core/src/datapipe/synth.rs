//! Procedural road-texture dataset with injected cracks and exact ground
//! truth.
//!
//! Backgrounds are band-limited value noise over a brightness gradient;
//! cracks are dark random-walk polylines stamped onto test images. The
//! ground-truth mask marks exactly the stamped pixels, so it is correct by
//! construction rather than estimated after the fact.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Stage};
use crate::image::{save_gray_png, save_rgb_png, to_rgb8, ImagePatch, ValueRange};
use crate::rng::rng_for;

use super::{discover_dataset, Dataset, DEFAULT_RESOLUTION};

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Acceptable crack coverage per test mask; samples outside the band are
/// regenerated from a fresh stream.
const MIN_CRACK_FRACTION: f64 = 0.005;
const MAX_CRACK_FRACTION: f64 = 0.10;
const MAX_CRACK_ATTEMPTS: usize = 64;

/// Default-resolution generation with a val split sized at a tenth of the
/// train split (at least one image, so the layout contract holds).
pub fn generate_synthetic_dataset(
    out_root: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_with(
        out_root,
        &SynthParams {
            n_train,
            n_val: (n_train / 10).max(1),
            n_test,
            resolution: DEFAULT_RESOLUTION,
            seed,
        },
    )
}

pub fn generate_with(out_root: &Path, params: &SynthParams) -> Result<Dataset> {
    if params.resolution < 8 {
        return Err(Error::argument(Stage::Datapipe, "synthetic resolution must be at least 8"));
    }
    let res = params.resolution;
    let dirs = ["train/undamaged", "val/undamaged", "test/images", "test/masks"];
    for dir in dirs {
        let path = out_root.join(dir);
        std::fs::create_dir_all(&path).map_err(Error::io(Stage::Datapipe, &path))?;
    }

    for i in 0..params.n_train {
        let mut rng = rng_for(params.seed, "synth_train", &[i as u64]);
        let img = render_road(&mut rng, res);
        let path = out_root.join(format!("train/undamaged/train_{i:04}.png"));
        save_rgb_png(&path, &to_rgb8(&img), res, res)?;
    }
    for i in 0..params.n_val {
        let mut rng = rng_for(params.seed, "synth_val", &[i as u64]);
        let img = render_road(&mut rng, res);
        let path = out_root.join(format!("val/undamaged/val_{i:04}.png"));
        save_rgb_png(&path, &to_rgb8(&img), res, res)?;
    }
    for i in 0..params.n_test {
        let (damaged, mask, _) = render_test_sample(params.seed, i, res)?;
        let img_path = out_root.join(format!("test/images/test_{i:04}.png"));
        save_rgb_png(&img_path, &to_rgb8(&damaged), res, res)?;
        let mask_bytes: Vec<u8> = mask.iter().map(|&m| if m == 1 { 255 } else { 0 }).collect();
        let mask_path = out_root.join(format!("test/masks/test_{i:04}.png"));
        save_gray_png(&mask_path, &mask_bytes, res, res)?;
    }

    discover_dataset(out_root, res)
}

/// One test sample: damaged image, 0/1 crack mask, undamaged background.
/// Crack layouts whose coverage falls outside the accepted band are
/// redrawn from a fresh attempt stream.
pub(crate) fn render_test_sample(
    seed: u64,
    index: usize,
    resolution: usize,
) -> Result<(ImagePatch, Vec<u8>, ImagePatch)> {
    let mut bg_rng = rng_for(seed, "synth_test_bg", &[index as u64]);
    let background = render_road(&mut bg_rng, resolution);

    for attempt in 0..MAX_CRACK_ATTEMPTS {
        let mut rng = rng_for(seed, "synth_crack", &[index as u64, attempt as u64]);
        let mut damaged = background.clone();
        let mask = stamp_cracks(&mut damaged, &mut rng);
        let fraction =
            mask.iter().filter(|&&m| m == 1).count() as f64 / (resolution * resolution) as f64;
        if (MIN_CRACK_FRACTION..=MAX_CRACK_FRACTION).contains(&fraction) {
            return Ok((damaged, mask, background));
        }
    }
    Err(Error::state(
        Stage::Datapipe,
        format!("no admissible crack layout for test image {index} in {MAX_CRACK_ATTEMPTS} draws"),
    ))
}

/// Band-limited value noise at one lattice spacing, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, res: usize, spacing: usize) -> Vec<f32> {
    let cells = res / spacing + 2;
    let lattice: Vec<f32> = (0..cells * cells).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = vec![0.0f32; res * res];
    for y in 0..res {
        let fy = y as f32 / spacing as f32;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f32;
        for x in 0..res {
            let fx = x as f32 / spacing as f32;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f32;
            let at = |yy: usize, xx: usize| lattice[yy * cells + xx];
            out[y * res + x] = at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + at(y0, x0 + 1) * (1.0 - wy) * wx
                + at(y0 + 1, x0) * wy * (1.0 - wx)
                + at(y0 + 1, x0 + 1) * wy * wx;
        }
    }
    out
}

/// Undamaged road texture: base gray, three noise octaves, a directional
/// brightness gradient, slight channel tint, and pixel grain.
fn render_road(rng: &mut ChaCha8Rng, res: usize) -> ImagePatch {
    let base: f32 = rng.gen_range(0.45..=0.70);
    let octaves = [
        (res / 4, 0.10f32),
        (res / 8, 0.05),
        (res / 16, 0.025),
    ];
    let mut luminance = vec![base; res * res];
    for (spacing, amplitude) in octaves {
        let noise = value_noise(rng, res, spacing.max(2));
        for (l, n) in luminance.iter_mut().zip(&noise) {
            *l += amplitude * n;
        }
    }

    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let grad_amp: f32 = rng.gen_range(0.0..=0.08);
    let (dy, dx) = (theta.sin(), theta.cos());
    let tint: [f32; 3] =
        [rng.gen_range(0.97..=1.03), rng.gen_range(0.97..=1.03), rng.gen_range(0.97..=1.03)];

    let mut img = ImagePatch::zeros(3, res, res, ValueRange::Unit);
    let span = (res - 1).max(1) as f32;
    for y in 0..res {
        for x in 0..res {
            // Projection onto the gradient direction, centered on 0.
            let proj = (y as f32 / span - 0.5) * dy + (x as f32 / span - 0.5) * dx;
            let grain: f32 = rng.gen_range(-0.02..=0.02);
            let lum = luminance[y * res + x] + grad_amp * proj + grain;
            for (c, &tc) in tint.iter().enumerate() {
                img.set(c, y, x, (lum * tc).clamp(0.02, 0.98));
            }
        }
    }
    img
}

/// Pixel offsets of a disk of the given stroke width.
fn disk_offsets(width: u32) -> Vec<(isize, isize)> {
    let r = width as f64 / 2.0;
    let reach = width as isize / 2;
    let mut offsets = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if ((dy * dy + dx * dx) as f64) <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Draw 1-3 dark random-walk polylines onto the image, returning the 0/1
/// mask of exactly the darkened pixels. Overlapping strokes keep the first
/// crack's intensity so every mask pixel is modified exactly once.
fn stamp_cracks(img: &mut ImagePatch, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let res = img.height();
    let mut mask = vec![0u8; res * res];
    let n_cracks = rng.gen_range(1..=3);
    for _ in 0..n_cracks {
        let width: u32 = rng.gen_range(1..=5);
        let drop: f32 = rng.gen_range(0.30..=0.60);
        let offsets = disk_offsets(width);

        // Start in the central half so short walks cannot immediately leave.
        let mut y = rng.gen_range((res / 4) as f64..(3 * res / 4) as f64);
        let mut x = rng.gen_range((res / 4) as f64..(3 * res / 4) as f64);
        let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = rng.gen_range(res / 2..=3 * res / 2);

        for _ in 0..steps {
            let (cy, cx) = (y.round() as isize, x.round() as isize);
            for &(dy, dx) in &offsets {
                let (py, px) = (cy + dy, cx + dx);
                if py < 0 || px < 0 || py >= res as isize || px >= res as isize {
                    continue;
                }
                let idx = py as usize * res + px as usize;
                if mask[idx] == 1 {
                    continue;
                }
                mask[idx] = 1;
                // Slight per-pixel variation keeps the stroke from being a
                // flat multiple of the background.
                let jitter: f32 = rng.gen_range(-0.05..=0.05);
                for c in 0..3 {
                    let v = img.get(c, py as usize, px as usize);
                    img.set(c, py as usize, px as usize, v * (1.0 - drop) * (1.0 + jitter));
                }
            }
            theta += rng.gen_range(-0.25..=0.25);
            y += theta.sin();
            x += theta.cos();
            if y < 0.0 || x < 0.0 || y >= res as f64 || x >= res as f64 {
                break;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{load_gt_mask, load_patch};

    fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for dir in ["train/undamaged", "val/undamaged", "test/images", "test/masks"] {
            let mut files: Vec<_> = std::fs::read_dir(root.join(dir))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            for f in files {
                let name = format!("{dir}/{}", f.file_name().unwrap().to_str().unwrap());
                out.push((name, std::fs::read(&f).unwrap()));
            }
        }
        out
    }

    fn small_params(seed: u64) -> SynthParams {
        SynthParams { n_train: 4, n_val: 2, n_test: 3, resolution: 64, seed }
    }

    #[test]
    fn counts_match_the_request() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_with(dir.path(), &small_params(0)).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.val.len(), 2);
        assert_eq!(ds.test.len(), 3);
        assert!(ds.test.entries.iter().all(|e| e.ground_truth.is_some()));

        // Files decode at the generation resolution.
        let img = load_patch(&ds.test.entries[0].image, 64).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 64, 64));
    }

    #[test]
    fn crack_fraction_stays_in_band() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_with(dir.path(), &small_params(1)).unwrap();
        for entry in &ds.test.entries {
            let mask = load_gt_mask(entry.ground_truth.as_ref().unwrap(), 64).unwrap();
            let fraction = mask.crack_pixels() as f64 / (64.0 * 64.0);
            assert!(
                (MIN_CRACK_FRACTION..=MAX_CRACK_FRACTION).contains(&fraction),
                "fraction {fraction} outside the accepted band"
            );
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_with(a.path(), &small_params(7)).unwrap();
        generate_with(b.path(), &small_params(7)).unwrap();
        assert_eq!(file_bytes(a.path()), file_bytes(b.path()));

        let c = tempfile::tempdir().unwrap();
        generate_with(c.path(), &small_params(8)).unwrap();
        assert_ne!(file_bytes(a.path()), file_bytes(c.path()));
    }

    #[test]
    fn ground_truth_marks_exactly_the_modified_pixels() {
        let (damaged, mask, background) = render_test_sample(3, 0, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let modified = (0..3).any(|c| damaged.get(c, y, x) != background.get(c, y, x));
                let flagged = mask[y * 64 + x] == 1;
                assert_eq!(modified, flagged, "mismatch at ({y}, {x})");
            }
        }
    }

    #[test]
    fn cracks_are_darker_than_their_background() {
        let (damaged, mask, background) = render_test_sample(4, 1, 64).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m == 1 {
                let (y, x) = (i / 64, i % 64);
                assert!(
                    damaged.get(0, y, x) < background.get(0, y, x),
                    "crack pixel at ({y}, {x}) is not darker"
                );
            }
        }
    }

    #[test]
    fn default_entry_point_writes_val_split() {
        let dir = tempfile::tempdir().unwrap();
        // Default resolution is large; keep counts tiny.
        let ds = generate_synthetic_dataset(dir.path(), 2, 1, 5).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.train.resolution, DEFAULT_RESOLUTION);
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = SynthParams { resolution: 4, ..small_params(0) };
        assert!(generate_with(dir.path(), &params).is_err());
    }
}
