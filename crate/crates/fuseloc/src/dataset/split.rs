//! Geographic train/test split over planar coordinates.

use crate::dataset::element::Element;
use crate::error::{Error, Result};

/// Axis-aligned rectangle in meters. The test region is closed: boundary
/// elements belong to the test side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_easting: f64,
    pub min_northing: f64,
    pub max_easting: f64,
    pub max_northing: f64,
}

impl Rect {
    pub fn validate(&self) -> Result<()> {
        for v in [self.min_easting, self.min_northing, self.max_easting, self.max_northing] {
            if !v.is_finite() {
                return Err(Error::validation("split rectangle must be finite"));
            }
        }
        if self.max_easting <= self.min_easting || self.max_northing <= self.min_northing {
            return Err(Error::validation(format!(
                "split rectangle has an empty side: \
                 easting [{}, {}], northing [{}, {}]",
                self.min_easting, self.max_easting, self.min_northing, self.max_northing
            )));
        }
        Ok(())
    }

    pub fn contains(&self, position: [f64; 2]) -> bool {
        position[0] >= self.min_easting
            && position[0] <= self.max_easting
            && position[1] >= self.min_northing
            && position[1] <= self.max_northing
    }
}

/// Partition element indices into (train, test) by position: inside the
/// closed rectangle goes to test, everything else to train. The two sides
/// are disjoint and together cover the dataset; either side may be empty.
pub fn utm_split(elements: &[Element], test_region: &Rect) -> Result<(Vec<usize>, Vec<usize>)> {
    test_region.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, e) in elements.iter().enumerate() {
        if test_region.contains(e.position) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, test))
}
