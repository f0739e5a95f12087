//! Random patch transformations for the self-supervised views.
//!
//! Order: horizontal/vertical flips, a uniform quarter-turn, an integer
//! shift with zero fill, a multiplicative intensity scale (clamped to [0,1]
//! and re-normalized to max 1, so scales > 1 saturate the top of the peak),
//! and additive Gaussian noise clamped to [0,1].

use crate::peak_extract::PeakPatch;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Uniform rotation over {0, 90, 180, 270} degrees.
    pub rot90: bool,
    /// Shift each axis uniformly in [-max_shift, max_shift] pixels.
    pub max_shift: i32,
    /// Multiplicative scale drawn uniformly from this range.
    pub intensity_scale: (f64, f64),
    /// Additive Gaussian sigma (0 disables).
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_h: 0.5,
            flip_v: 0.5,
            rot90: true,
            max_shift: 2,
            intensity_scale: (0.8, 1.2),
            noise_sigma: 0.01,
        }
    }
}

impl AugmentationConfig {
    /// All transforms off; `augment` becomes the identity.
    pub fn identity() -> Self {
        Self {
            flip_h: 0.0,
            flip_v: 0.0,
            rot90: false,
            max_shift: 0,
            intensity_scale: (1.0, 1.0),
            noise_sigma: 0.0,
        }
    }
}

fn flip_horizontal(pixels: &mut [f32], p: usize) {
    for row in pixels.chunks_exact_mut(p) {
        row.reverse();
    }
}

fn flip_vertical(pixels: &mut [f32], p: usize) {
    for r in 0..p / 2 {
        for c in 0..p {
            pixels.swap(r * p + c, (p - 1 - r) * p + c);
        }
    }
}

/// Rotate a square patch by `k` quarter turns (counterclockwise).
pub fn rot90(pixels: &[f32], p: usize, k: usize) -> Vec<f32> {
    let mut out = pixels.to_vec();
    for _ in 0..k % 4 {
        let src = out.clone();
        for r in 0..p {
            for c in 0..p {
                out[(p - 1 - c) * p + r] = src[r * p + c];
            }
        }
    }
    out
}

fn shift(pixels: &[f32], p: usize, dr: i32, dc: i32) -> Vec<f32> {
    let mut out = vec![0.0f32; p * p];
    for r in 0..p as i32 {
        for c in 0..p as i32 {
            let (sr, sc) = (r - dr, c - dc);
            if sr >= 0 && sc >= 0 && sr < p as i32 && sc < p as i32 {
                out[(r * p as i32 + c) as usize] = pixels[(sr * p as i32 + sc) as usize];
            }
        }
    }
    out
}

/// One random view of a patch. Identity is reachable: with all
/// probabilities zero, zero shift, unit scale and zero noise the output
/// equals the input.
pub fn augment(patch: &PeakPatch, cfg: &AugmentationConfig, rng: &mut impl Rng) -> PeakPatch {
    let p = patch.size;
    let mut pixels = patch.pixels.clone();

    if cfg.flip_h > 0.0 && rng.gen_bool(cfg.flip_h) {
        flip_horizontal(&mut pixels, p);
    }
    if cfg.flip_v > 0.0 && rng.gen_bool(cfg.flip_v) {
        flip_vertical(&mut pixels, p);
    }
    if cfg.rot90 {
        let k = rng.gen_range(0..4usize);
        if k > 0 {
            pixels = rot90(&pixels, p, k);
        }
    }
    if cfg.max_shift > 0 {
        let dr = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let dc = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        if dr != 0 || dc != 0 {
            pixels = shift(&pixels, p, dr, dc);
        }
    }
    let (lo, hi) = cfg.intensity_scale;
    if lo != 1.0 || hi != 1.0 {
        let s = rng.gen_range(lo..=hi) as f32;
        let mut max = 0.0f32;
        for v in &mut pixels {
            *v = (*v * s).clamp(0.0, 1.0);
            max = max.max(*v);
        }
        if max > 0.0 {
            for v in &mut pixels {
                *v /= max;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma > 0");
        for v in &mut pixels {
            let n: f64 = normal.sample(rng);
            *v = (f64::from(*v) + n).clamp(0.0, 1.0) as f32;
        }
    }

    PeakPatch {
        pixels,
        ..patch.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn asymmetric_patch(p: usize) -> PeakPatch {
        // strictly increasing values, normalized so the max is 1
        let n = (p * p) as f32;
        PeakPatch {
            pixels: (0..p * p).map(|i| (i as f32 + 1.0) / n).collect(),
            size: p,
            frame_index: 0,
            omega: 0.0,
            centroid_row: 0.0,
            centroid_col: 0.0,
            raw_max: 100,
            component_area: 9,
        }
    }

    #[test]
    fn all_off_config_is_identity() {
        let patch = asymmetric_patch(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&patch, &AugmentationConfig::identity(), &mut rng);
        assert_eq!(out.pixels, patch.pixels);
    }

    #[test]
    fn two_quarter_turn_pairs_restore_the_patch() {
        let patch = asymmetric_patch(9);
        let once = rot90(&patch.pixels, 9, 2);
        let twice = rot90(&once, 9, 2);
        assert_eq!(twice, patch.pixels);
    }

    #[test]
    fn augmented_values_stay_in_unit_range() {
        let patch = asymmetric_patch(15);
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let out = augment(&patch, &cfg, &mut rng);
            assert_eq!(out.pixels.len(), 225);
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn transform_rates_match_configured_probabilities() {
        // each transform isolated; firing is detectable as a changed patch
        let patch = asymmetric_patch(11);
        let n = 10_000usize;
        let binom_bound = |p: f64| {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            (n as f64 * p - 3.0 * sigma, n as f64 * p + 3.0 * sigma)
        };

        // flip_h at 0.3
        let cfg = AugmentationConfig {
            flip_h: 0.3,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fired = (0..n)
            .filter(|_| augment(&patch, &cfg, &mut rng).pixels != patch.pixels)
            .count() as f64;
        let (lo, hi) = binom_bound(0.3);
        assert!(fired > lo && fired < hi, "flip_h fired {fired}");

        // rot90: non-identity 3 of 4 draws
        let cfg = AugmentationConfig {
            rot90: true,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fired = (0..n)
            .filter(|_| augment(&patch, &cfg, &mut rng).pixels != patch.pixels)
            .count() as f64;
        let (lo, hi) = binom_bound(0.75);
        assert!(fired > lo && fired < hi, "rot90 fired {fired}");

        // shift +-1: identity only when (dr, dc) == (0, 0), p = 8/9
        let cfg = AugmentationConfig {
            max_shift: 1,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fired = (0..n)
            .filter(|_| augment(&patch, &cfg, &mut rng).pixels != patch.pixels)
            .count() as f64;
        let (lo, hi) = binom_bound(8.0 / 9.0);
        assert!(fired > lo && fired < hi, "shift fired {fired}");

        // intensity scale (0.8, 1.2): scales <= 1 renormalize back to the
        // original, scales > 1 saturate, so fires about half the time
        let cfg = AugmentationConfig {
            intensity_scale: (0.8, 1.2),
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fired = (0..n)
            .filter(|_| augment(&patch, &cfg, &mut rng).pixels != patch.pixels)
            .count() as f64;
        let (lo, hi) = binom_bound(0.5);
        assert!(fired > lo && fired < hi, "scale fired {fired}");
    }

    #[test]
    fn shift_zero_fills() {
        let patch = asymmetric_patch(5);
        let shifted = shift(&patch.pixels, 5, 2, 0);
        // first two rows are zero fill
        assert!(shifted[..10].iter().all(|&v| v == 0.0));
        assert_eq!(shifted[10], patch.pixels[0]);
    }
}
