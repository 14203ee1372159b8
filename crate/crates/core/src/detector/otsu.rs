//! Otsu binarization of error maps.

use super::{min_max, quantize_u8, BinaryCrackMap, ErrorMap};
use crate::error::Result;

/// Threshold and binary map for one error map.
#[derive(Debug, Clone)]
pub struct OtsuOutcome {
    /// Chosen 8-bit level; `None` for a degenerate (constant) map.
    pub threshold: Option<u8>,
    /// 1 where the quantized map exceeds the threshold.
    pub binary: BinaryCrackMap,
    /// Set when the map had zero dynamic range and nothing was flagged.
    pub no_anomaly: bool,
}

/// Between-class-variance argmax over a 256-bin histogram.
///
/// Single cumulative pass over the bins; ties break toward the lower level.
/// `None` when no threshold leaves both classes non-empty, i.e. when fewer
/// than two bins are populated.
pub fn otsu_argmax(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(l, &c)| l as f64 * c as f64).sum();

    let mut n0 = 0u64;
    let mut s0 = 0.0;
    let mut best: Option<(u8, f64)> = None;
    for (t, &count) in hist.iter().enumerate() {
        n0 += count;
        s0 += t as f64 * count as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let mu0 = s0 / n0 as f64;
        let mu1 = (sum_all - s0) / n1 as f64;
        let var = n0 as f64 * n1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Min-max quantize to 256 levels, pick the Otsu threshold, binarize.
///
/// A constant map has no histogram to split: the outcome is an all-zeros
/// crack map with the no-anomaly flag set instead of an error.
pub fn otsu_threshold(map: &ErrorMap) -> Result<OtsuOutcome> {
    let Some((lo, hi)) = min_max(map.values()) else {
        return Ok(OtsuOutcome {
            threshold: None,
            binary: BinaryCrackMap::new(
                map.height(),
                map.width(),
                vec![0; map.values().len()],
            )?,
            no_anomaly: true,
        });
    };
    let levels = quantize_u8(map.values(), lo, hi);
    let mut hist = [0u64; 256];
    for &q in &levels {
        hist[q as usize] += 1;
    }
    // min < max guarantees bins 0 and 255 are both populated, so a split
    // always exists.
    let t = otsu_argmax(&hist).expect("non-degenerate map always has a threshold");
    let binary: Vec<u8> = levels.iter().map(|&q| u8::from(q > t)).collect();
    Ok(OtsuOutcome {
        threshold: Some(t),
        binary: BinaryCrackMap::new(map.height(), map.width(), binary)?,
        no_anomaly: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::Rng;

    #[test]
    fn argmax_matches_exhaustive_oracle_on_random_histograms() {
        let mut rng = crate::rng::rng_for(0, "otsu_hist", &[]);
        for case in 0..200 {
            let mut hist = [0u64; 256];
            // Mix of dense, sparse and spiky histograms.
            let populated = rng.gen_range(1..256);
            for _ in 0..populated {
                let level = rng.gen_range(0..256);
                hist[level] += rng.gen_range(0..500u64);
            }
            assert_eq!(otsu_argmax(&hist), reference::otsu(&hist), "case {case}: {hist:?}");
        }
    }

    #[test]
    fn argmax_handles_degenerate_histograms() {
        let empty = [0u64; 256];
        assert_eq!(otsu_argmax(&empty), None);

        let mut single = [0u64; 256];
        single[42] = 1000;
        assert_eq!(otsu_argmax(&single), None);

        let mut two = [0u64; 256];
        two[10] = 5;
        two[200] = 5;
        let t = otsu_argmax(&two).unwrap();
        assert!((10..200).contains(&(t as usize)));
    }

    #[test]
    fn bimodal_map_flags_exactly_the_bright_mode() {
        // 90% of pixels around level 10, 10% around level 200.
        let mut values = vec![10.0 / 255.0; 900];
        values.extend(std::iter::repeat_n(200.0 / 255.0, 100));
        // Sentinels at 0 and 1 so min-max quantization reproduces the
        // original levels exactly.
        values.push(0.0);
        values.push(1.0);
        let map = ErrorMap::new(6, 167, values).unwrap();
        let out = otsu_threshold(&map).unwrap();
        let t = out.threshold.unwrap();
        assert!((10..200).contains(&(t as usize)), "threshold {t}");
        // 100 bright-mode pixels plus the max sentinel.
        let flagged: u64 = out.binary.values().iter().map(|&v| v as u64).sum();
        assert_eq!(flagged, 101);
        assert!(!out.no_anomaly);
    }

    #[test]
    fn constant_map_short_circuits_with_flag() {
        let map = ErrorMap::new(8, 8, vec![0.25; 64]).unwrap();
        let out = otsu_threshold(&map).unwrap();
        assert_eq!(out.threshold, None);
        assert!(out.no_anomaly);
        assert!(out.binary.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn threshold_is_invariant_under_affine_rescaling() {
        let mut rng = crate::rng::rng_for(3, "otsu_affine", &[]);
        for case in 0..30 {
            let values: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
            let map = ErrorMap::new(16, 16, values.clone()).unwrap();
            let base = otsu_threshold(&map).unwrap();

            let a = rng.gen_range(0.5..20.0);
            let b = rng.gen_range(0.0..5.0);
            let scaled: Vec<f64> = values.iter().map(|v| a * v + b).collect();
            let scaled = otsu_threshold(&ErrorMap::new(16, 16, scaled).unwrap()).unwrap();

            // Affine maps survive min-max quantization exactly (up to float
            // rounding), so the flagged sets must coincide.
            assert_eq!(
                base.binary.values(),
                scaled.binary.values(),
                "case {case}: affine rescale changed the flagged set"
            );
        }
    }

    #[test]
    fn flagged_set_is_invariant_under_monotone_maps_of_bimodal_data() {
        // Two well-separated clusters; any strictly monotone transform keeps
        // the between-cluster gap dominant, so Otsu keeps splitting inside
        // the gap and the flagged set is stable even though bin boundaries
        // shift.
        let mut rng = crate::rng::rng_for(4, "otsu_monotone", &[]);
        for case in 0..30 {
            let n_low = rng.gen_range(100..400);
            let n_high = rng.gen_range(20..100);
            let mut values = Vec::with_capacity(n_low + n_high);
            for _ in 0..n_low {
                values.push(rng.gen_range(0.05..0.15));
            }
            for _ in 0..n_high {
                values.push(rng.gen_range(0.75..0.95));
            }
            let map = ErrorMap::new(1, values.len(), values.clone()).unwrap();
            let base = otsu_threshold(&map).unwrap();

            let transforms: [&dyn Fn(f64) -> f64; 3] = [
                &|v: f64| v * v,
                &|v: f64| v.sqrt(),
                &|v: f64| (4.0 * v).exp(),
            ];
            for (ti, tf) in transforms.iter().enumerate() {
                let mapped: Vec<f64> = values.iter().map(|&v| tf(v)).collect();
                let out = otsu_threshold(&ErrorMap::new(1, mapped.len(), mapped).unwrap()).unwrap();
                assert_eq!(
                    base.binary.values(),
                    out.binary.values(),
                    "case {case}, transform {ti}"
                );
            }
        }
    }
}
