//! Edge-preserving bilateral smoothing of error maps.

use super::{min_max, ErrorMap};
use crate::error::{Error, Result, Stage};

/// Bilateral filter with Gaussian spatial and intensity kernels.
///
/// The map is min-max quantized to 8-bit levels internally so
/// `sigma_intensity` is always in 8-bit units regardless of the raw error
/// magnitudes, then the filtered levels are mapped back to the original
/// range. Neighborhoods are square with side `diameter`, clipped at the
/// borders (in-bounds neighbors only). Constant maps are fixed points.
pub fn smooth_bilateral(
    map: &ErrorMap,
    diameter: usize,
    sigma_intensity: f64,
    sigma_spatial: f64,
) -> Result<ErrorMap> {
    if diameter < 3 || diameter.is_multiple_of(2) {
        return Err(Error::argument(
            Stage::Detector,
            format!("bilateral diameter must be odd and >= 3, got {diameter}"),
        ));
    }
    if sigma_intensity <= 0.0 || sigma_spatial <= 0.0 {
        return Err(Error::argument(
            Stage::Detector,
            format!("bilateral sigmas must be positive, got {sigma_intensity}/{sigma_spatial}"),
        ));
    }
    let Some((lo, hi)) = min_max(map.values()) else {
        return Ok(map.clone());
    };

    let (h, w) = (map.height(), map.width());
    let scale = 255.0 / (hi - lo);
    let levels: Vec<f64> =
        map.values().iter().map(|&v| ((v - lo) * scale).round()).collect();

    let radius = (diameter / 2) as isize;
    // Spatial weights depend only on the offset; precompute the window.
    let side = 2 * radius + 1;
    let inv_2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let spatial: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = i / side - radius;
            let dx = i % side - radius;
            (-((dy * dy + dx * dx) as f64) * inv_2ss).exp()
        })
        .collect();
    // Level differences are integers in [-255, 255]; precompute those too.
    let inv_2si = 1.0 / (2.0 * sigma_intensity * sigma_intensity);
    let intensity: Vec<f64> =
        (0..=255).map(|d| (-((d * d) as f64) * inv_2si).exp()).collect();

    let mut out = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = levels[y as usize * w + x as usize];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -radius..=radius {
                let ny = y + dy;
                if ny < 0 || ny >= h as isize {
                    continue;
                }
                for dx in -radius..=radius {
                    let nx = x + dx;
                    if nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let v = levels[ny as usize * w + nx as usize];
                    let ws = spatial[((dy + radius) * side + dx + radius) as usize];
                    let wi = intensity[(v - center).abs() as usize];
                    num += ws * wi * v;
                    den += ws * wi;
                }
            }
            // den >= the center's own weight (1.0 * intensity[0]) > 0.
            out[y as usize * w + x as usize] = (num / den) / scale + lo;
        }
    }
    ErrorMap::new(h, w, out)
}
