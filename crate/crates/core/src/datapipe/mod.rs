//! Dataset layout discovery, patch extraction, augmentation and
//! normalization, plus the synthetic dataset generator in [`synth`].
//!
//! On-disk layout (bit-exact contract):
//!
//! ```text
//! root/train/undamaged/*.png|jpg
//! root/val/undamaged/*.png|jpg
//! root/test/images/*.png|jpg
//! root/test/masks/<same-stem>.png   (8-bit gray, 0 = background, 255 = crack)
//! ```
//!
//! Training is unsupervised: undamagedness is asserted by placement, so the
//! train and val splits never carry ground truth.

pub mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detector::BinaryCrackMap;
use crate::error::{Error, Result, Stage};
use crate::image::{
    load_gray, load_rgb, resize_bilinear, resize_nearest, ImagePatch, ValueRange,
};
use crate::rng::rng_for;

pub const DEFAULT_RESOLUTION: usize = 256;

/// Gray level at or above which a stored mask pixel counts as crack.
const GT_BINARIZE_THRESHOLD: f32 = 128.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainUndamaged,
    ValUndamaged,
    Test,
}

impl Split {
    /// Image directory relative to the dataset root.
    fn image_dir(self) -> &'static str {
        match self {
            Split::TrainUndamaged => "train/undamaged",
            Split::ValUndamaged => "val/undamaged",
            Split::Test => "test/images",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Split::TrainUndamaged => "train",
            Split::ValUndamaged => "val",
            Split::Test => "test",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    /// Side length images and masks are resized to on load.
    pub resolution: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// All three splits of one dataset root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Files in `dir` passing `keep`, in byte-wise lexicographic name order so
/// manifests are identical across platforms.
fn sorted_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|_| Error::Layout(dir.to_path_buf()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(Error::io(Stage::Datapipe, dir))?.path();
        if path.is_file() && keep(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Pairing { msg: format!("{} has no UTF-8 stem", path.display()) })
}

/// Scan one split. Test entries are paired with masks by file stem; a mask
/// without a matching image is an error, an image without a mask is not.
pub fn discover_split(root: &Path, split: Split, resolution: usize) -> Result<DatasetManifest> {
    if resolution == 0 {
        return Err(Error::argument(Stage::Datapipe, "resolution must be positive"));
    }
    let image_dir = root.join(split.image_dir());
    let images = sorted_files(&image_dir, is_image_file)?;

    let mut entries: Vec<ManifestEntry> =
        images.into_iter().map(|image| ManifestEntry { image, ground_truth: None }).collect();

    if split == Split::Test {
        let mask_dir = root.join("test/masks");
        if mask_dir.is_dir() {
            let mut stems = std::collections::BTreeMap::new();
            for (idx, entry) in entries.iter().enumerate() {
                let stem = stem_of(&entry.image)?;
                if stems.insert(stem.clone(), idx).is_some() {
                    return Err(Error::Pairing {
                        msg: format!("duplicate test image stem '{stem}' makes mask pairing ambiguous"),
                    });
                }
            }
            for mask in sorted_files(&mask_dir, |p| p.is_file())? {
                let stem = stem_of(&mask)?;
                let Some(&idx) = stems.get(&stem) else {
                    return Err(Error::Pairing {
                        msg: format!("mask {} has no matching test image", mask.display()),
                    });
                };
                entries[idx].ground_truth = Some(mask);
            }
        }
    }

    Ok(DatasetManifest { root: root.to_path_buf(), split, entries, resolution })
}

pub fn discover_dataset(root: &Path, resolution: usize) -> Result<Dataset> {
    Ok(Dataset {
        train: discover_split(root, Split::TrainUndamaged, resolution)?,
        val: discover_split(root, Split::ValUndamaged, resolution)?,
        test: discover_split(root, Split::Test, resolution)?,
    })
}

/// Load an RGB image resized (bilinear) to the manifest resolution.
pub fn load_patch(path: &Path, resolution: usize) -> Result<ImagePatch> {
    let raw = load_rgb(path)?;
    Ok(resize_bilinear(&raw, resolution, resolution))
}

/// Load a ground-truth mask: nearest-neighbor resize (preserves binarity),
/// then threshold at gray level 128.
pub fn load_gt_mask(path: &Path, resolution: usize) -> Result<BinaryCrackMap> {
    let raw = load_gray(path)?;
    let resized = resize_nearest(&raw, resolution, resolution);
    let values =
        resized.data().iter().map(|&v| u8::from(v >= GT_BINARIZE_THRESHOLD)).collect();
    BinaryCrackMap::new(resolution, resolution, values)
}

/// Row-major grid of size×size crops at the given stride; trailing partial
/// patches are dropped.
pub fn extract_patches(image: &ImagePatch, size: usize, stride: usize) -> Result<Vec<ImagePatch>> {
    if size == 0 || stride == 0 {
        return Err(Error::argument(Stage::Datapipe, "patch size and stride must be positive"));
    }
    if size > image.height() || size > image.width() {
        return Err(Error::dimension(
            Stage::Datapipe,
            format!(
                "patch size {size} exceeds image dimensions {}x{}",
                image.height(),
                image.width()
            ),
        ));
    }
    let mut patches = Vec::new();
    let mut y = 0;
    while y + size <= image.height() {
        let mut x = 0;
        while x + size <= image.width() {
            patches.push(crop(image, y, x, size, size));
            x += stride;
        }
        y += stride;
    }
    Ok(patches)
}

fn crop(src: &ImagePatch, top: usize, left: usize, height: usize, width: usize) -> ImagePatch {
    let mut out = ImagePatch::zeros(src.channels(), height, width, src.range());
    for c in 0..src.channels() {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, src.get(c, top + y, left + x));
            }
        }
    }
    out
}

/// Mirror `i - pad` into [0, n): single-bounce reflection without edge
/// duplication. Sufficient while the padding stays below the source size,
/// which the 0.75 minimum scale guarantees.
fn reflect_index(i: usize, pad: usize, n: usize) -> usize {
    let j = i as isize - pad as isize;
    let r = if j < 0 {
        -j
    } else if j >= n as isize {
        2 * (n as isize - 1) - j
    } else {
        j
    };
    r.clamp(0, n as isize - 1) as usize
}

fn reflect_pad(src: &ImagePatch, target_h: usize, target_w: usize) -> ImagePatch {
    if src.height() >= target_h && src.width() >= target_w {
        return src.clone();
    }
    let out_h = src.height().max(target_h);
    let out_w = src.width().max(target_w);
    let pad_top = (out_h - src.height()) / 2;
    let pad_left = (out_w - src.width()) / 2;
    let mut out = ImagePatch::zeros(src.channels(), out_h, out_w, src.range());
    for c in 0..src.channels() {
        for y in 0..out_h {
            let sy = reflect_index(y, pad_top, src.height());
            for x in 0..out_w {
                let sx = reflect_index(x, pad_left, src.width());
                out.set(c, y, x, src.get(c, sy, sx));
            }
        }
    }
    out
}

fn flip(patch: &ImagePatch, horizontal: bool, vertical: bool) -> ImagePatch {
    if !horizontal && !vertical {
        return patch.clone();
    }
    let (h, w) = (patch.height(), patch.width());
    let mut out = ImagePatch::zeros(patch.channels(), h, w, patch.range());
    for c in 0..patch.channels() {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.set(c, y, x, patch.get(c, sy, sx));
            }
        }
    }
    out
}

/// Seeded augmentation: uniform rescale in [0.75, 1.25], reflection padding
/// back up to size when scaled down, random crop to the original size, then
/// horizontal and vertical flips with probability 0.5 each.
///
/// Draw order is fixed (scale, crop y, crop x, hflip, vflip); crop offsets
/// are only drawn when there is slack, which keeps identity transforms
/// reachable by seed search.
pub fn augment(patch: &ImagePatch, seed: u64) -> ImagePatch {
    let mut rng: ChaCha8Rng = rng_for(seed, "augment", &[]);
    let (target_h, target_w) = (patch.height(), patch.width());

    let scale: f64 = rng.gen_range(0.75..=1.25);
    let new_h = ((target_h as f64 * scale).round() as usize).max(1);
    let new_w = ((target_w as f64 * scale).round() as usize).max(1);
    let scaled = resize_bilinear(patch, new_h, new_w);
    let padded = reflect_pad(&scaled, target_h, target_w);

    let slack_y = padded.height() - target_h;
    let slack_x = padded.width() - target_w;
    let top = if slack_y > 0 { rng.gen_range(0..=slack_y) } else { 0 };
    let left = if slack_x > 0 { rng.gen_range(0..=slack_x) } else { 0 };
    let cropped = if slack_y == 0 && slack_x == 0 {
        padded
    } else {
        crop(&padded, top, left, target_h, target_w)
    };

    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    flip(&cropped, hflip, vflip)
}

/// Unit range to signed range (x ↦ 2x − 1). Out-of-range inputs are clamped
/// first; the count of clamped values is returned alongside the patch.
pub fn normalize(patch: &ImagePatch) -> Result<(ImagePatch, usize)> {
    if patch.range() != ValueRange::Unit {
        return Err(Error::argument(Stage::Datapipe, "normalize expects a unit-range patch"));
    }
    let mut clamped = 0usize;
    let mut out = patch.clone();
    for v in out.data_mut() {
        let c = v.clamp(0.0, 1.0);
        if c != *v {
            clamped += 1;
        }
        *v = 2.0 * c - 1.0;
    }
    Ok((out.with_range(ValueRange::Signed), clamped))
}

/// Signed range back to unit range (x ↦ (x + 1) / 2), clamping as above.
pub fn denormalize(patch: &ImagePatch) -> Result<(ImagePatch, usize)> {
    if patch.range() != ValueRange::Signed {
        return Err(Error::argument(Stage::Datapipe, "denormalize expects a signed-range patch"));
    }
    let mut clamped = 0usize;
    let mut out = patch.clone();
    for v in out.data_mut() {
        let c = v.clamp(-1.0, 1.0);
        if c != *v {
            clamped += 1;
        }
        *v = (c + 1.0) / 2.0;
    }
    Ok((out.with_range(ValueRange::Unit), clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_gray_png;

    fn touch_png(path: &Path) {
        // Minimal real 2x2 PNG so loaders can decode it when needed.
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_gray_png(path, &[10, 200, 60, 90], 2, 2).unwrap();
    }

    fn checker_patch(channels: usize, h: usize, w: usize) -> ImagePatch {
        let mut p = ImagePatch::zeros(channels, h, w, ValueRange::Unit);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let v = ((c * h + y) * w + x) as f32 / (channels * h * w) as f32;
                    p.set(c, y, x, v);
                }
            }
        }
        p
    }

    #[test]
    fn discover_counts_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for name in ["a", "b", "c"] {
            touch_png(&root.join(format!("train/undamaged/{name}.png")));
        }
        touch_png(&root.join("val/undamaged/v.png"));
        touch_png(&root.join("test/images/t0.png"));
        touch_png(&root.join("test/images/t1.png"));
        touch_png(&root.join("test/masks/t0.png"));
        touch_png(&root.join("test/masks/t1.png"));

        let ds = discover_dataset(root, 256).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.test.len(), 2);
        assert!(ds.train.entries.iter().all(|e| e.ground_truth.is_none()));
        assert!(ds.test.entries.iter().all(|e| e.ground_truth.is_some()));
    }

    #[test]
    fn test_image_without_mask_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("test/images/has_mask.png"));
        touch_png(&root.join("test/images/no_mask.png"));
        touch_png(&root.join("test/masks/has_mask.png"));

        let m = discover_split(root, Split::Test, 256).unwrap();
        assert_eq!(m.len(), 2);
        let by_stem: Vec<_> = m.entries.iter().map(|e| e.ground_truth.is_some()).collect();
        // Lexicographic: has_mask.png before no_mask.png.
        assert_eq!(by_stem, vec![true, false]);
    }

    #[test]
    fn orphan_mask_is_a_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("test/images/t0.png"));
        touch_png(&root.join("test/masks/t0.png"));
        touch_png(&root.join("test/masks/stray.png"));
        match discover_split(root, Split::Test, 256) {
            Err(Error::Pairing { msg }) => assert!(msg.contains("stray")),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }

    #[test]
    fn missing_split_dir_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("train/undamaged/a.png"));
        // No val directory.
        match discover_split(root, Split::ValUndamaged, 256) {
            Err(Error::Layout(path)) => {
                assert!(path.ends_with("val/undamaged"), "unexpected path {path:?}")
            }
            other => panic!("expected layout error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_order_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for name in ["m.png", "a.jpg", "z.png", "b.png"] {
            touch_png(&root.join(format!("train/undamaged/{name}")));
        }
        let m = discover_split(root, Split::TrainUndamaged, 256).unwrap();
        let names: Vec<_> = m
            .entries
            .iter()
            .map(|e| e.image.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec!["a.jpg", "b.png", "m.png", "z.png"]);
    }

    #[test]
    fn extract_patches_grid_arithmetic() {
        // Same arithmetic as a 2000x1500 image at size/stride 500: 4x3 grid.
        let img = checker_patch(1, 15, 20);
        let patches = extract_patches(&img, 5, 5).unwrap();
        assert_eq!(patches.len(), 12);

        // Overlong stride: rows fit at y in {0, 7}, cols at x in {0, 7, 14}.
        assert_eq!(extract_patches(&img, 5, 7).unwrap().len(), 2 * 3);
    }

    #[test]
    fn extract_patches_drops_trailing_remainder() {
        // 30x30 at size 26, stride 26: one patch, remainder dropped.
        let img = checker_patch(1, 30, 30);
        assert_eq!(extract_patches(&img, 26, 26).unwrap().len(), 1);

        // 256-equivalent: size == dims -> exactly one.
        let square = checker_patch(3, 16, 16);
        assert_eq!(extract_patches(&square, 16, 16).unwrap().len(), 1);
    }

    #[test]
    fn extract_patches_are_row_major_views() {
        let img = checker_patch(1, 6, 9);
        let patches = extract_patches(&img, 3, 3).unwrap();
        assert_eq!(patches.len(), 6);
        // Patch at grid (1, 2) is the 4th..: row-major index 1*3 + 2 = 5.
        let p = &patches[5];
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(p.get(0, y, x), img.get(0, 3 + y, 6 + x));
            }
        }
    }

    #[test]
    fn extract_patches_rejects_oversized_patch() {
        let img = checker_patch(1, 8, 8);
        assert!(extract_patches(&img, 9, 1).is_err());
        assert!(extract_patches(&img, 0, 1).is_err());
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let p = checker_patch(3, 24, 24);
        assert_eq!(augment(&p, 7), augment(&p, 7));
        assert_ne!(augment(&p, 7), augment(&p, 8));
    }

    #[test]
    fn augment_preserves_dims_and_range() {
        let p = checker_patch(3, 24, 24);
        for seed in 0..40 {
            let a = augment(&p, seed);
            assert_eq!((a.height(), a.width(), a.channels()), (24, 24, 3));
            for &v in a.data() {
                assert!((0.0..=1.0).contains(&v), "value {v} escaped [0,1]");
            }
        }
    }

    #[test]
    fn some_seed_draws_the_identity_transform() {
        // An asymmetric patch equals its augmentation only for the identity
        // draw (scale rounding to the same size, no crop slack, no flips).
        let p = checker_patch(1, 16, 16);
        let found = (0..20_000u64).find(|&seed| augment(&p, seed) == p);
        assert!(found.is_some(), "no identity seed in the search range");
    }

    #[test]
    fn normalize_maps_endpoints_and_roundtrips() {
        let mut p = ImagePatch::zeros(1, 1, 3, ValueRange::Unit);
        p.set(0, 0, 0, 0.0);
        p.set(0, 0, 1, 0.5);
        p.set(0, 0, 2, 1.0);
        let (n, clamped) = normalize(&p).unwrap();
        assert_eq!(clamped, 0);
        assert_eq!(n.range(), ValueRange::Signed);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);

        let (back, c2) = denormalize(&n).unwrap();
        assert_eq!(c2, 0);
        for (a, b) in back.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_clamps_and_counts() {
        let mut p = ImagePatch::zeros(1, 1, 2, ValueRange::Unit);
        p.set(0, 0, 0, 1.2);
        p.set(0, 0, 1, 0.3);
        let (n, clamped) = normalize(&p).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(n.data()[0], 1.0);

        // Wrong range convention is rejected both ways.
        assert!(normalize(&n).is_err());
        assert!(denormalize(&p).is_err());
    }

    #[test]
    fn roundtrip_random_values_within_tolerance() {
        let mut rng = rng_for(3, "norm_test", &[]);
        let data: Vec<f32> = (0..256).map(|_| rng.gen::<f32>()).collect();
        let p = ImagePatch::from_data(1, 16, 16, ValueRange::Unit, data.clone()).unwrap();
        let (back, _) = denormalize(&normalize(&p).unwrap().0).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn gt_mask_binarizes_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_gray_png(&path, &[0, 127, 128, 255], 2, 2).unwrap();
        let mask = load_gt_mask(&path, 2).unwrap();
        assert_eq!(mask.values(), &[0, 0, 1, 1]);
    }

    #[test]
    fn load_patch_resizes_to_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 3 % 251) as u8).collect();
        crate::image::save_rgb_png(&path, &bytes, 8, 8).unwrap();
        let patch = load_patch(&path, 4).unwrap();
        assert_eq!((patch.channels(), patch.height(), patch.width()), (3, 4, 4));
        assert_eq!(patch.range(), ValueRange::Unit);
    }
}
