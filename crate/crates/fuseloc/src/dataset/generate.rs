//! Synthetic dataset generation.
//!
//! Every place gets a distinctive geometric scene (random boxes and planes,
//! sampled into a point cloud) and a distinctive procedural image. Each
//! traversal re-renders the place with viewpoint jitter, point noise, and a
//! photometric shift, so same-place elements look alike without being
//! identical. Place positions sit on a grid whose pitch keeps distinct
//! places at negative-pair range while same-place traversals stay within
//! positive-pair range.
//!
//! The spurious-cue mode manufactures a dominating image modality: the
//! natural (place-keyed) image signal is heavily diluted, and every
//! training-traversal image is stamped with a high-contrast watermark that
//! encodes the place identity. Held-out-traversal images never carry the
//! watermark, so image descriptors that latch onto it generalize badly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::element::{element_id, Element, Image, MAX_CLOUD_POINTS, MIN_IMAGE_DIM};
use crate::error::{Error, Result};
use crate::metric::similarity::POSITIVE_RADIUS_M;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_places: usize,
    pub traversals: usize,
    /// Minimum distance between distinct places, meters. Must exceed the
    /// 50 m negative threshold so cross-place pairs are true negatives.
    pub spacing_m: f64,
    pub points_per_cloud: usize,
    pub image_size: usize,
    /// Extra photometric renderings per element for training-time sampling.
    pub image_variants: usize,
    /// Inject the train-only image watermark (dominating-modality mode).
    pub spurious_rgb: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_places: 40,
            traversals: 4,
            spacing_m: 100.0,
            points_per_cloud: 1024,
            image_size: 64,
            image_variants: 3,
            spurious_rgb: false,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_places < 2 {
            return Err(Error::validation(format!(
                "need at least 2 places, got {}",
                self.n_places
            )));
        }
        if self.traversals < 2 {
            return Err(Error::validation(format!(
                "need at least 2 traversals, got {}",
                self.traversals
            )));
        }
        if !(self.spacing_m > 50.0) {
            return Err(Error::validation(format!(
                "place spacing must exceed the 50 m negative threshold so \
                 cross-place pairs are unambiguous negatives, got {} m",
                self.spacing_m
            )));
        }
        if self.points_per_cloud == 0 || self.points_per_cloud > MAX_CLOUD_POINTS {
            return Err(Error::validation(format!(
                "points per cloud must lie in 1..={MAX_CLOUD_POINTS}, got {}",
                self.points_per_cloud
            )));
        }
        if self.image_size < MIN_IMAGE_DIM {
            return Err(Error::validation(format!(
                "image size must be at least {MIN_IMAGE_DIM}, got {}",
                self.image_size
            )));
        }
        if self.image_variants > 8 {
            return Err(Error::validation(format!(
                "at most 8 image variants per element, got {}",
                self.image_variants
            )));
        }
        Ok(())
    }
}

/// Outcome of the watermark self-check in spurious-cue mode, measured as
/// mean absolute 8-bit pixel difference between each emitted image and its
/// watermark-free rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpuriousCueReport {
    pub train_images: usize,
    pub holdout_images: usize,
    /// Smallest difference across watermarked (train) images; must be > 0.
    pub min_train_diff: f64,
    /// Largest difference across held-out images; must be exactly 0.
    pub max_holdout_diff: f64,
}

impl SpuriousCueReport {
    pub fn passes(&self) -> bool {
        self.train_images > 0
            && self.holdout_images > 0
            && self.min_train_diff > 0.0
            && self.max_holdout_diff == 0.0
    }
}

#[derive(Debug)]
pub struct SyntheticDataset {
    pub elements: Vec<Element>,
    /// Present iff the generator ran in spurious-cue mode.
    pub spurious_report: Option<SpuriousCueReport>,
}

// ---- deterministic seed derivation ----

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable sub-seed derivation: two rounds of a 64-bit mix over
/// `seed ^ tag` plus the index, so distinct tags and indices give
/// independent streams regardless of evaluation order.
pub(crate) fn derive_seed(seed: u64, tag: u64, k: u64) -> u64 {
    splitmix(splitmix(seed ^ tag).wrapping_add(k))
}

const TAG_SCENE: u64 = 0x5343454E45;
const TAG_ELEMENT: u64 = 0x454C454D;

// ---- geometry ----

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Block { center: [f64; 3], half: [f64; 3] },
    Slab { axis: usize, offset: f64, center: [f64; 2], half: [f64; 2] },
}

fn random_scene(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut prims = Vec::new();
    let blocks = rng.gen_range(2..=4);
    for _ in 0..blocks {
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for c in 0..3 {
            center[c] = rng.gen_range(-0.6..=0.6);
            half[c] = rng.gen_range(0.1..=0.35);
        }
        prims.push(Primitive::Block { center, half });
    }
    let slabs = rng.gen_range(1..=2);
    for _ in 0..slabs {
        let axis = rng.gen_range(0..3);
        prims.push(Primitive::Slab {
            axis,
            offset: rng.gen_range(-0.8..=0.8),
            center: [rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3)],
            half: [rng.gen_range(0.3..=0.6), rng.gen_range(0.3..=0.6)],
        });
    }
    prims
}

fn sample_surface(prim: &Primitive, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match prim {
        Primitive::Block { center, half } => {
            let face = rng.gen_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for c in 0..3 {
                p[c] = if c == axis {
                    center[c] + sign * half[c]
                } else {
                    center[c] + rng.gen_range(-half[c]..=half[c])
                };
            }
            p
        }
        Primitive::Slab { axis, offset, center, half } => {
            let mut p = [0.0; 3];
            let mut k = 0;
            for c in 0..3 {
                if c == *axis {
                    p[c] = *offset;
                } else {
                    p[c] = center[k] + rng.gen_range(-half[k]..=half[k]);
                    k += 1;
                }
            }
            p
        }
    }
}

/// One traversal's view of a scene: sampled surface points under a small
/// rigid viewpoint change plus sensor noise, clamped to the unit cube.
fn render_cloud(
    scene: &[Primitive],
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f32; 3]> {
    let theta = rng.gen_range(-0.05..=0.05f64);
    let (sin_t, cos_t) = theta.sin_cos();
    let shift = [
        rng.gen_range(-0.03..=0.03),
        rng.gen_range(-0.03..=0.03),
        rng.gen_range(-0.03..=0.03),
    ];
    let noise = Normal::new(0.0, 0.008).expect("fixed sigma");
    (0..n_points)
        .map(|_| {
            let prim = &scene[rng.gen_range(0..scene.len())];
            let p = sample_surface(prim, rng);
            let rotated = [
                p[0] * cos_t - p[1] * sin_t,
                p[0] * sin_t + p[1] * cos_t,
                p[2],
            ];
            let mut out = [0.0f32; 3];
            for c in 0..3 {
                let v = rotated[c] + shift[c] + noise.sample(rng);
                out[c] = v.clamp(-1.0, 1.0) as f32;
            }
            out
        })
        .collect()
}

// ---- imagery ----

#[derive(Debug, Clone, Copy)]
struct PlaceLook {
    stripe_a: [f64; 3],
    stripe_b: [f64; 3],
    blob_color: [f64; 3],
    freq: f64,
    angle: f64,
    phase: f64,
    blob: [f64; 2],
    blob_r: f64,
    /// Key driving the watermark block code in spurious-cue mode.
    key: u64,
}

fn random_look(rng: &mut ChaCha8Rng, place: usize, seed: u64) -> PlaceLook {
    let mut color = |lo: f64| -> [f64; 3] {
        [rng.gen_range(lo..=1.0), rng.gen_range(lo..=1.0), rng.gen_range(lo..=1.0)]
    };
    PlaceLook {
        stripe_a: color(0.0),
        stripe_b: color(0.0),
        blob_color: color(0.4),
        freq: rng.gen_range(1.5..=5.0),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        blob: [rng.gen_range(0.2..=0.8), rng.gen_range(0.2..=0.8)],
        blob_r: rng.gen_range(0.15..=0.35),
        key: derive_seed(seed, 0x574D, place as u64),
    }
}

/// Per-rendering photometric draw.
#[derive(Debug, Clone, Copy)]
struct Shot {
    brightness: f64,
    gain: [f64; 3],
    phase_shift: f64,
}

fn random_shot(rng: &mut ChaCha8Rng) -> Shot {
    Shot {
        brightness: rng.gen_range(-0.08..=0.08),
        gain: [
            rng.gen_range(0.95..=1.05),
            rng.gen_range(0.95..=1.05),
            rng.gen_range(0.95..=1.05),
        ],
        phase_shift: rng.gen_range(-0.3..=0.3),
    }
}

/// Weight of the place-keyed pattern in the rendered image. In spurious
/// mode the natural signal is heavily diluted toward a shared gradient so
/// the watermark dominates anything learnable from training images.
fn natural_weight(spurious: bool) -> f64 {
    if spurious {
        0.12
    } else {
        1.0
    }
}

fn render_image(
    look: &PlaceLook,
    shot: &Shot,
    size: usize,
    spurious: bool,
    watermark: bool,
    noise_rng: &mut ChaCha8Rng,
) -> Image {
    let w_nat = natural_weight(spurious);
    let (sin_a, cos_a) = look.angle.sin_cos();
    let noise = Normal::new(0.0, 0.02).expect("fixed sigma");
    let mut values = vec![0.0f64; 3 * size * size];
    for y in 0..size {
        let v = y as f64 / (size - 1) as f64;
        for x in 0..size {
            let u = x as f64 / (size - 1) as f64;
            let s = (std::f64::consts::TAU * look.freq * (u * cos_a + v * sin_a)
                + look.phase
                + shot.phase_shift)
                .sin();
            let t = 0.5 * (s + 1.0);
            let mut pix = [0.0f64; 3];
            for c in 0..3 {
                pix[c] = look.stripe_a[c] + (look.stripe_b[c] - look.stripe_a[c]) * t;
            }
            let d = ((u - look.blob[0]).powi(2) + (v - look.blob[1]).powi(2)).sqrt();
            if d < look.blob_r {
                let wgt = 0.8 * (1.0 - d / look.blob_r);
                for c in 0..3 {
                    pix[c] = pix[c] + (look.blob_color[c] - pix[c]) * wgt;
                }
            }
            // Shared, place-independent gradient that dominates in
            // spurious mode.
            let shared = 0.3 + 0.4 * u + 0.05 * v;
            for c in 0..3 {
                let base = w_nat * pix[c] + (1.0 - w_nat) * shared;
                let shifted = base * shot.gain[c] + shot.brightness;
                values[(c * size + y) * size + x] = shifted;
            }
        }
    }
    if watermark {
        stamp_watermark(&mut values, size, look.key);
    }
    for val in values.iter_mut() {
        *val += noise.sample(noise_rng);
    }
    Image::from_unit_values(size, size, &values).expect("square image")
}

/// High-contrast 4x4 block code covering the whole image, alpha-blended
/// over the base. Each block's color encodes 3 bits of the place key.
fn stamp_watermark(values: &mut [f64], size: usize, key: u64) {
    const GRID: usize = 4;
    const ALPHA: f64 = 0.75;
    for y in 0..size {
        let by = (y * GRID) / size;
        for x in 0..size {
            let bx = (x * GRID) / size;
            let block = by * GRID + bx;
            let bits = (key >> (3 * block)) & 0b111;
            for c in 0..3 {
                let level = if (bits >> c) & 1 == 1 { 0.92 } else { 0.08 };
                let idx = (c * size + y) * size + x;
                values[idx] = values[idx] * (1.0 - ALPHA) + level * ALPHA;
            }
        }
    }
}

// ---- assembly ----

/// Half-width of the uniform per-element position jitter. Two draws from
/// `[-J, J]^2` are at most `2J*sqrt(2) < 10 m` apart, keeping same-place
/// pairs inside the positive radius.
const POSITION_JITTER_M: f64 = 3.5;

pub fn generate_synthetic(cfg: &GenerateConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let side = (cfg.n_places as f64).sqrt().ceil() as usize;
    // Pitch leaves the full positive radius between place cells even after
    // jitter, so cross-place distance never drops below spacing_m.
    let pitch = cfg.spacing_m + POSITIVE_RADIUS_M;
    let holdout = cfg.traversals - 1;

    let mut elements = Vec::with_capacity(cfg.n_places * cfg.traversals);
    let mut train_images = 0usize;
    let mut holdout_images = 0usize;
    let mut min_train_diff = f64::INFINITY;
    let mut max_holdout_diff = 0.0f64;

    for place in 0..cfg.n_places {
        let mut scene_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SCENE, place as u64));
        let scene = random_scene(&mut scene_rng);
        let look = random_look(&mut scene_rng, place, cfg.seed);
        let center = [
            100_000.0 + (place % side) as f64 * pitch,
            4_000_000.0 + (place / side) as f64 * pitch,
        ];

        for trav in 0..cfg.traversals {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                TAG_ELEMENT,
                (place * 10_000 + trav) as u64,
            ));
            let position = [
                center[0] + rng.gen_range(-POSITION_JITTER_M..=POSITION_JITTER_M),
                center[1] + rng.gen_range(-POSITION_JITTER_M..=POSITION_JITTER_M),
            ];
            let cloud = render_cloud(&scene, cfg.points_per_cloud, &mut rng);
            let marked = cfg.spurious_rgb && trav != holdout;

            let render_pair = |rng: &mut ChaCha8Rng| -> (Image, f64) {
                let shot = random_shot(rng);
                // Render the emitted image and its watermark-free twin from
                // identical draws; their difference isolates the watermark.
                let mut noise_rng = rng.clone();
                let img = render_image(
                    &look,
                    &shot,
                    cfg.image_size,
                    cfg.spurious_rgb,
                    marked,
                    rng,
                );
                let clean = render_image(
                    &look,
                    &shot,
                    cfg.image_size,
                    cfg.spurious_rgb,
                    false,
                    &mut noise_rng,
                );
                let diff = img.mean_abs_diff(&clean).expect("same shape");
                (img, diff)
            };

            let (image, diff) = render_pair(&mut rng);
            let mut diffs = vec![diff];
            let mut image_variants = Vec::with_capacity(cfg.image_variants);
            for _ in 0..cfg.image_variants {
                let (img, diff) = render_pair(&mut rng);
                diffs.push(diff);
                image_variants.push(img);
            }
            if cfg.spurious_rgb {
                for d in diffs {
                    if marked {
                        train_images += 1;
                        min_train_diff = min_train_diff.min(d);
                    } else {
                        holdout_images += 1;
                        max_holdout_diff = max_holdout_diff.max(d);
                    }
                }
            }

            let element = Element {
                id: element_id(place, trav),
                position,
                cloud,
                image,
                image_variants,
            };
            element.validate()?;
            elements.push(element);
        }
    }

    let spurious_report = cfg.spurious_rgb.then_some(SpuriousCueReport {
        train_images,
        holdout_images,
        min_train_diff,
        max_holdout_diff,
    });
    if let Some(report) = &spurious_report {
        if !report.passes() {
            return Err(Error::numeric(format!(
                "spurious-cue self-check failed: {report:?}"
            )));
        }
    }
    Ok(SyntheticDataset { elements, spurious_report })
}
