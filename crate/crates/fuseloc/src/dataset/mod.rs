//! Dataset model: elements, on-disk format, synthetic generation,
//! augmentation, and the geographic split.

pub mod augment;
pub mod element;
pub mod generate;
pub mod io;
pub mod split;

pub use augment::{augment_cloud, augment_image, AugmentationConfig};
pub use element::{element_id, parse_traversal, Element, Image, MAX_CLOUD_POINTS, MIN_IMAGE_DIM};
pub use generate::{generate_synthetic, GenerateConfig, SpuriousCueReport, SyntheticDataset};
pub use io::{load_dataset, read_index, save_dataset, write_index, IndexEntry};
pub use split::{utm_split, Rect};

/// Highest traversal index present, used as the held-out traversal. `None`
/// when no element id carries a traversal index.
pub fn holdout_traversal(elements: &[Element]) -> Option<usize> {
    elements.iter().filter_map(|e| parse_traversal(&e.id)).max()
}

/// Split element indices by traversal: the held-out traversal versus the
/// rest. Elements without a parsable traversal stay on the training side.
pub fn traversal_split(elements: &[Element]) -> (Vec<usize>, Vec<usize>) {
    match holdout_traversal(elements) {
        None => ((0..elements.len()).collect(), Vec::new()),
        Some(h) => {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for (i, e) in elements.iter().enumerate() {
                if parse_traversal(&e.id) == Some(h) {
                    held.push(i);
                } else {
                    train.push(i);
                }
            }
            (train, held)
        }
    }
}
