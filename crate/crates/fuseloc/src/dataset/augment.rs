//! Training-time augmentation for point clouds and images.
//!
//! Cloud pipeline: Gaussian jitter (clamped to the unit cube), independent
//! point dropout, then optional erasure of a random axis-aligned cuboid.
//! Image pipeline: photometric jitter (brightness, contrast, saturation),
//! random crop resized back to the original size, then random erasing.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::element::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    /// Standard deviation of per-coordinate Gaussian jitter.
    pub jitter_sigma: f64,
    /// Probability of dropping each point independently.
    pub point_drop_prob: f64,
    /// Probability of erasing one random axis-aligned cuboid.
    pub cuboid_erase_prob: f64,
    /// Probability of erasing one random image rectangle with noise.
    pub image_erase_prob: f64,
    /// Crop side as a fraction of the original (1.0 disables cropping).
    pub crop_fraction: f64,
    /// Additive brightness jitter half-width, in unit-range values.
    pub brightness: f64,
    /// Contrast scale jitter half-width around 1.
    pub contrast: f64,
    /// Saturation scale jitter half-width around 1.
    pub saturation: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.002,
            point_drop_prob: 0.1,
            cuboid_erase_prob: 0.4,
            image_erase_prob: 0.5,
            crop_fraction: 0.9,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentationConfig {
    /// Identity configuration: every stage is a no-op.
    pub fn disabled() -> Self {
        Self {
            jitter_sigma: 0.0,
            point_drop_prob: 0.0,
            cuboid_erase_prob: 0.0,
            image_erase_prob: 0.0,
            crop_fraction: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("point_drop_prob", self.point_drop_prob),
            ("cuboid_erase_prob", self.cuboid_erase_prob),
            ("image_erase_prob", self.image_erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.jitter_sigma < 0.0 {
            return Err(Error::validation(format!(
                "jitter_sigma must be nonnegative, got {}",
                self.jitter_sigma
            )));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "crop_fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

const CUBOID_RETRIES: usize = 20;

/// Jitter, drop, and cuboid-erase a cloud. Never returns an empty cloud:
/// a dropout or erasure that would remove every point is skipped (erasure
/// after bounded retries with fresh cuboids).
pub fn augment_cloud<R: Rng>(
    cloud: &[[f32; 3]],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Vec<[f32; 3]> {
    debug_assert!(!cloud.is_empty(), "augment_cloud needs a nonempty cloud");
    let mut points: Vec<[f32; 3]> = if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("validated sigma");
        cloud
            .iter()
            .map(|p| {
                let mut q = [0.0f32; 3];
                for c in 0..3 {
                    let j: f64 = normal.sample(rng);
                    q[c] = (p[c] as f64 + j).clamp(-1.0, 1.0) as f32;
                }
                q
            })
            .collect()
    } else {
        cloud.to_vec()
    };

    if cfg.point_drop_prob > 0.0 {
        let kept: Vec<[f32; 3]> = points
            .iter()
            .copied()
            .filter(|_| !rng.gen_bool(cfg.point_drop_prob))
            .collect();
        if !kept.is_empty() {
            points = kept;
        }
    }

    if cfg.cuboid_erase_prob > 0.0 && rng.gen_bool(cfg.cuboid_erase_prob) {
        for _ in 0..CUBOID_RETRIES {
            let mut center = [0.0f64; 3];
            let mut half = [0.0f64; 3];
            for c in 0..3 {
                center[c] = rng.gen_range(-1.0..=1.0);
                half[c] = rng.gen_range(0.05..=0.6);
            }
            let survivors: Vec<[f32; 3]> = points
                .iter()
                .copied()
                .filter(|p| {
                    !(0..3).all(|c| (p[c] as f64 - center[c]).abs() <= half[c])
                })
                .collect();
            if !survivors.is_empty() {
                points = survivors;
                break;
            }
        }
    }
    points
}

/// Fill a rectangle of the unit-range image buffer with uniform noise.
pub(crate) fn fill_rect_noise<R: Rng>(
    values: &mut [f64],
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    rh: usize,
    rw: usize,
    rng: &mut R,
) {
    for c in 0..3 {
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                values[(c * h + y) * w + x] = rng.gen_range(0.0..=1.0);
            }
        }
    }
}

/// Photometric jitter, random crop with resize-back, and random erasing.
pub fn augment_image<R: Rng>(image: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut v = image.to_unit_values();

    if cfg.brightness > 0.0 {
        let b = rng.gen_range(-cfg.brightness..=cfg.brightness);
        for x in v.iter_mut() {
            *x += b;
        }
    }
    if cfg.contrast > 0.0 {
        let c = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        for x in v.iter_mut() {
            *x = (*x - 0.5) * c + 0.5;
        }
    }
    if cfg.saturation > 0.0 {
        let s = rng.gen_range(1.0 - cfg.saturation..=1.0 + cfg.saturation);
        for y in 0..h {
            for x in 0..w {
                let r = v[y * w + x];
                let g = v[(h + y) * w + x];
                let b = v[(2 * h + y) * w + x];
                let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                v[y * w + x] = luma + (r - luma) * s;
                v[(h + y) * w + x] = luma + (g - luma) * s;
                v[(2 * h + y) * w + x] = luma + (b - luma) * s;
            }
        }
    }

    if cfg.crop_fraction < 1.0 {
        let ch = ((h as f64 * cfg.crop_fraction).floor() as usize).max(1);
        let cw = ((w as f64 * cfg.crop_fraction).floor() as usize).max(1);
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        let mut resized = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                let sy = y0 + (y * ch) / h;
                for x in 0..w {
                    let sx = x0 + (x * cw) / w;
                    resized[(c * h + y) * w + x] = v[(c * h + sy) * w + sx];
                }
            }
        }
        v = resized;
    }

    if cfg.image_erase_prob > 0.0 && rng.gen_bool(cfg.image_erase_prob) {
        let rh = rng.gen_range(h / 8..=h / 2).max(1);
        let rw = rng.gen_range(w / 8..=w / 2).max(1);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        fill_rect_noise(&mut v, h, w, y0, x0, rh, rw, rng);
    }

    Image::from_unit_values(h, w, &v).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.9..=0.9),
                    rng.gen_range(-0.9..=0.9),
                    rng.gen_range(-0.9..=0.9),
                ]
            })
            .collect()
    }

    fn test_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        let data: Vec<u8> = (0..3 * h * w).map(|_| rng.gen()).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn disabled_config_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = test_cloud(&mut rng, 100);
        let img = test_image(&mut rng, 32, 32);
        let cfg = AugmentationConfig::disabled();
        cfg.validate().unwrap();
        assert_eq!(augment_cloud(&cloud, &cfg, &mut rng), cloud);
        assert_eq!(augment_image(&img, &cfg, &mut rng), img);
    }

    #[test]
    fn fixed_seed_reproduces_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = test_cloud(&mut rng, 200);
        let img = test_image(&mut rng, 32, 48);
        let cfg = AugmentationConfig::default();
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (augment_cloud(&cloud, &cfg, &mut r), augment_image(&img, &cfg, &mut r))
        };
        let (c1, i1) = run(7);
        let (c2, i2) = run(7);
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(&c2) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }
        assert_eq!(i1, i2);
        let (c3, _) = run(8);
        assert_ne!(c1, c3, "different seeds should draw different augmentations");
    }

    #[test]
    fn jitter_stays_inside_the_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud: Vec<[f32; 3]> = vec![[1.0, -1.0, 1.0]; 50];
        let cfg = AugmentationConfig {
            jitter_sigma: 0.5,
            ..AugmentationConfig::disabled()
        };
        for p in augment_cloud(&cloud, &cfg, &mut rng) {
            for c in p {
                assert!((-1.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn point_drop_matches_binomial_bounds() {
        // n=4096, p=0.1: survivors ~ Binomial(4096, 0.9), mean 3686.4,
        // sigma ~ 19.2. Every seed must land within 5 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = test_cloud(&mut rng, 4096);
        let cfg = AugmentationConfig {
            point_drop_prob: 0.1,
            ..AugmentationConfig::disabled()
        };
        let mean = 4096.0 * 0.9;
        let sigma = (4096.0 * 0.1 * 0.9f64).sqrt();
        let mut total = 0usize;
        for seed in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = augment_cloud(&cloud, &cfg, &mut r).len();
            total += n;
            assert!(
                (n as f64 - mean).abs() < 5.0 * sigma,
                "seed {seed}: {n} survivors outside 5-sigma band around {mean}"
            );
        }
        let avg = total as f64 / 100.0;
        assert!((avg - mean).abs() < sigma, "average {avg} too far from {mean}");
    }

    #[test]
    fn cuboid_erase_never_empties_the_cloud() {
        // A single point is covered by any cuboid containing it, so every
        // draw that hits it must be retried and finally skipped.
        let cfg = AugmentationConfig {
            cuboid_erase_prob: 1.0,
            ..AugmentationConfig::disabled()
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_cloud(&[[0.0, 0.0, 0.0]], &cfg, &mut rng);
            assert!(!out.is_empty(), "seed {seed} emptied the cloud");
        }
    }

    #[test]
    fn cuboid_erase_removes_an_axis_aligned_block() {
        // Dense cloud: erasing should remove some points but not all, and
        // survivors must be exactly the points outside some cuboid. We check
        // the weaker observable: fewer points, none duplicated or moved.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = test_cloud(&mut rng, 2000);
        let cfg = AugmentationConfig {
            cuboid_erase_prob: 1.0,
            ..AugmentationConfig::disabled()
        };
        let mut removed_somewhere = false;
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_cloud(&cloud, &cfg, &mut r);
            assert!(!out.is_empty());
            assert!(out.len() <= cloud.len());
            let set: std::collections::HashSet<[u32; 3]> = cloud
                .iter()
                .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
                .collect();
            for p in &out {
                assert!(set.contains(&[p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]));
            }
            removed_somewhere |= out.len() < cloud.len();
        }
        assert!(removed_somewhere, "no cuboid ever removed a point");
    }

    #[test]
    fn brightness_jitter_respects_the_pixel_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = test_image(&mut rng, 32, 32);
        let cfg = AugmentationConfig {
            brightness: 0.2,
            ..AugmentationConfig::disabled()
        };
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_image(&img, &cfg, &mut r);
            for (a, b) in img.data().iter().zip(out.data()) {
                let delta = (*a as i32 - *b as i32).abs();
                assert!(delta <= (0.2f64 * 255.0).ceil() as i32 + 1, "delta {delta} too large");
            }
        }
    }

    #[test]
    fn full_rectangle_erase_is_pure_noise_with_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = test_image(&mut rng, 32, 32);
        let mut v = img.to_unit_values();
        fill_rect_noise(&mut v, 32, 32, 0, 0, 32, 32, &mut rng);
        let out = Image::from_unit_values(32, 32, &v).unwrap();
        assert_eq!(out.height(), 32);
        assert_eq!(out.width(), 32);
        let changed = img
            .data()
            .iter()
            .zip(out.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(
            changed > img.data().len() * 9 / 10,
            "only {changed} values changed; expected nearly all"
        );
    }

    #[test]
    fn crop_resize_preserves_shape_and_value_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = test_image(&mut rng, 48, 32);
        let cfg = AugmentationConfig {
            crop_fraction: 0.7,
            ..AugmentationConfig::disabled()
        };
        let out = augment_image(&img, &cfg, &mut rng);
        assert_eq!(out.height(), 48);
        assert_eq!(out.width(), 32);
        // Nearest-neighbor resize only relocates values.
        let palette: std::collections::HashSet<u8> = img.data().iter().copied().collect();
        assert!(out.data().iter().all(|v| palette.contains(v)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_prob = AugmentationConfig { point_drop_prob: 1.5, ..Default::default() };
        assert!(bad_prob.validate().is_err());
        let bad_sigma = AugmentationConfig { jitter_sigma: -0.1, ..Default::default() };
        assert!(bad_sigma.validate().is_err());
        let bad_crop = AugmentationConfig { crop_fraction: 0.0, ..Default::default() };
        assert!(bad_crop.validate().is_err());
        let bad_sat = AugmentationConfig { saturation: 1.0, ..Default::default() };
        assert!(bad_sat.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }
}
