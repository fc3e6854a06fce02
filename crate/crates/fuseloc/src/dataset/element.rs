//! In-memory dataset element: a point cloud, an image, and a planar
//! position in meters.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on points per cloud.
pub const MAX_CLOUD_POINTS: usize = 4096;
/// Smallest accepted image side.
pub const MIN_IMAGE_DIM: usize = 32;

/// 8-bit color image stored channel-major (`[3, H, W]`, RGB plane order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::validation(format!(
                "image data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Black image of the given size.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Channel values scaled to `[0, 1]`, same `[3, H, W]` layout.
    pub fn to_unit_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Build from unit-range values, rounding and clamping to 8 bits.
    pub fn from_unit_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, data)
    }

    /// The image as a `[3, H, W]` constant on a tape, values in `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self, tape: &Tape<F>) -> Tensor<F> {
        let vals: Vec<F> = self.data.iter().map(|&v| F::from_f64(v as f64 / 255.0)).collect();
        tape.constant(vec![3, self.height, self.width], vals)
    }

    /// Mean absolute per-channel-value difference against another image of
    /// the same shape, in 8-bit units.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::validation("image size mismatch in comparison"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as i32 - b as i32).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// One place observation: identity, planar position, sensor readings, and
/// optional alternate renderings of the image used during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub id: String,
    /// Planar position in meters (easting, northing).
    pub position: [f64; 2],
    /// Up to [`MAX_CLOUD_POINTS`] points, coordinates in `[-1, 1]`.
    pub cloud: Vec<[f32; 3]>,
    /// Canonical image; evaluation always reads this one.
    pub image: Image,
    /// Alternate photometric renderings sampled during training.
    pub image_variants: Vec<Image>,
}

impl Element {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("element id must not be empty"));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(format!(
                "element {}: position must be finite",
                self.id
            )));
        }
        if self.cloud.is_empty() {
            return Err(Error::validation(format!("element {}: empty cloud", self.id)));
        }
        if self.cloud.len() > MAX_CLOUD_POINTS {
            return Err(Error::validation(format!(
                "element {}: {} points exceeds the {MAX_CLOUD_POINTS}-point cap",
                self.id,
                self.cloud.len()
            )));
        }
        for p in &self.cloud {
            if !p.iter().all(|c| c.is_finite() && (-1.0..=1.0).contains(c)) {
                return Err(Error::validation(format!(
                    "element {}: point {p:?} outside [-1, 1]^3",
                    self.id
                )));
            }
        }
        for img in std::iter::once(&self.image).chain(&self.image_variants) {
            if img.height() < MIN_IMAGE_DIM || img.width() < MIN_IMAGE_DIM {
                return Err(Error::validation(format!(
                    "element {}: image {}x{} below the {MIN_IMAGE_DIM}-pixel minimum",
                    self.id,
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }

    /// Cloud coordinates widened to f64 for quantization.
    pub fn cloud_f64(&self) -> Vec<[f64; 3]> {
        self.cloud
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }

    /// Image to use for a training pass: the canonical image plus variants,
    /// indexed cyclically by an epoch-level draw.
    pub fn training_image(&self, draw: usize) -> &Image {
        let n = 1 + self.image_variants.len();
        let k = draw % n;
        if k == 0 {
            &self.image
        } else {
            &self.image_variants[k - 1]
        }
    }
}

/// Canonical element id: place index and traversal index.
pub fn element_id(place: usize, traversal: usize) -> String {
    format!("p{place:04}_t{traversal:02}")
}

/// Parse the traversal index back out of an element id. Ids not produced by
/// [`element_id`] yield `None`.
pub fn parse_traversal(id: &str) -> Option<usize> {
    let pos = id.rfind("_t")?;
    let digits = &id[pos + 2..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_element() -> Element {
        Element {
            id: element_id(3, 1),
            position: [100.0, 200.0],
            cloud: vec![[0.0, 0.0, 0.0], [0.5, -0.5, 0.25]],
            image: Image::zeros(32, 32).unwrap(),
            image_variants: vec![],
        }
    }

    #[test]
    fn valid_element_passes() {
        small_element().validate().unwrap();
    }

    #[test]
    fn out_of_cube_points_are_rejected() {
        let mut e = small_element();
        e.cloud.push([1.5, 0.0, 0.0]);
        assert!(e.validate().is_err());
    }

    #[test]
    fn oversized_clouds_are_rejected() {
        let mut e = small_element();
        e.cloud = vec![[0.0; 3]; MAX_CLOUD_POINTS + 1];
        assert!(e.validate().is_err());
    }

    #[test]
    fn undersized_images_are_rejected() {
        let mut e = small_element();
        e.image = Image::zeros(31, 64).unwrap();
        assert!(e.validate().is_err());
    }

    #[test]
    fn non_finite_positions_are_rejected() {
        let mut e = small_element();
        e.position = [f64::NAN, 0.0];
        assert!(e.validate().is_err());
    }

    #[test]
    fn ids_round_trip_the_traversal_index() {
        assert_eq!(element_id(3, 1), "p0003_t01");
        assert_eq!(parse_traversal("p0003_t01"), Some(1));
        assert_eq!(parse_traversal("p0123_t12"), Some(12));
        assert_eq!(parse_traversal("noformat"), None);
        assert_eq!(parse_traversal("p0001_tx"), None);
    }

    #[test]
    fn pixel_indexing_is_channel_major() {
        let mut img = Image::zeros(32, 32).unwrap();
        img.set_pixel(2, 1, 3, 77);
        assert_eq!(img.pixel(2, 1, 3), 77);
        assert_eq!(img.data()[(2 * 32 + 1) * 32 + 3], 77);
    }

    #[test]
    fn unit_value_round_trip() {
        let mut img = Image::zeros(32, 32).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as u8;
        }
        let back = Image::from_unit_values(32, 32, &img.to_unit_values()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn training_image_cycles_variants() {
        let mut e = small_element();
        let mut v1 = Image::zeros(32, 32).unwrap();
        v1.set_pixel(0, 0, 0, 1);
        let mut v2 = Image::zeros(32, 32).unwrap();
        v2.set_pixel(0, 0, 0, 2);
        e.image_variants = vec![v1.clone(), v2.clone()];
        assert_eq!(e.training_image(0), &e.image);
        assert_eq!(e.training_image(1), &v1);
        assert_eq!(e.training_image(2), &v2);
        assert_eq!(e.training_image(3), &e.image);
    }
}
