//! On-disk dataset format.
//!
//! A dataset directory holds `index.json` (an array of entries with decimal
//! numbers), point clouds in the PCB1 binary format, and images as binary
//! PPM (P6, maxval 255).
//!
//! PCB1 layout, all little-endian: the 4-byte magic `PCB1`, a `u32` point
//! count, then count x 3 `f32` coordinates.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::element::{Element, Image};
use crate::error::{Error, Result};

const CLOUD_MAGIC: &[u8; 4] = b"PCB1";

/// One row of `index.json`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub easting: f64,
    pub northing: f64,
    pub cloud: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_variants: Option<Vec<String>>,
}

// ---- point clouds ----

pub fn write_cloud(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    let count = u32::try_from(points.len())
        .map_err(|_| Error::validation("cloud too large for the PCB1 count field"))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    for p in points {
        for c in p {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<Vec<[f32; 3]>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CLOUD_MAGIC {
        return Err(Error::mismatch(format!(
            "{}: bad cloud magic {magic:?}, expected PCB1",
            path.display()
        )));
    }
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * 12 {
        return Err(Error::mismatch(format!(
            "{}: expected {} coordinate bytes for {count} points, found {}",
            path.display(),
            count * 12,
            body.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for chunk in body.chunks_exact(12) {
        points.push([
            f32::from_le_bytes(chunk[0..4].try_into().unwrap()),
            f32::from_le_bytes(chunk[4..8].try_into().unwrap()),
            f32::from_le_bytes(chunk[8..12].try_into().unwrap()),
        ]);
    }
    Ok(points)
}

// ---- images ----

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                row.push(image.pixel(c, y, x));
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    fn token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<String> {
        // Skip whitespace and `#` comment lines between header fields.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::mismatch(format!(
                "{}: truncated PPM header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let magic = token(&bytes, &mut pos, path)?;
    if magic != "P6" {
        return Err(Error::mismatch(format!(
            "{}: expected binary PPM (P6), found {magic:?}",
            path.display()
        )));
    }
    let w: usize = token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| Error::mismatch(format!("{}: bad PPM width", path.display())))?;
    let h: usize = token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| Error::mismatch(format!("{}: bad PPM height", path.display())))?;
    let maxval = token(&bytes, &mut pos, path)?;
    if maxval != "255" {
        return Err(Error::mismatch(format!(
            "{}: PPM maxval must be 255, found {maxval}",
            path.display()
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::mismatch(format!("{}: malformed PPM header", path.display())));
    }
    pos += 1;
    let body = &bytes[pos..];
    if body.len() != 3 * h * w {
        return Err(Error::mismatch(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            3 * h * w,
            body.len()
        )));
    }
    let mut data = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c];
            }
        }
    }
    Image::new(h, w, data)
}

// ---- index and whole-directory IO ----

pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::Io(format!("index serialization failed: {e}")))?;
    fs::write(dir.join("index.json"), text + "\n")?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::mismatch(format!("{}: malformed index: {e}", path.display())))
}

fn variant_path(id: &str, k: usize) -> String {
    format!("images/{id}_v{k}.ppm")
}

/// Write a complete dataset directory: clouds, images, variants, index.
pub fn save_dataset(dir: &Path, elements: &[Element]) -> Result<()> {
    fs::create_dir_all(dir.join("clouds"))?;
    fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(elements.len());
    for e in elements {
        e.validate()?;
        let cloud_rel = format!("clouds/{}.pcb", e.id);
        let image_rel = format!("images/{}.ppm", e.id);
        write_cloud(&dir.join(&cloud_rel), &e.cloud)?;
        write_image(&dir.join(&image_rel), &e.image)?;
        let variants = if e.image_variants.is_empty() {
            None
        } else {
            let mut rels = Vec::with_capacity(e.image_variants.len());
            for (k, img) in e.image_variants.iter().enumerate() {
                let rel = variant_path(&e.id, k + 1);
                write_image(&dir.join(&rel), img)?;
                rels.push(rel);
            }
            Some(rels)
        };
        entries.push(IndexEntry {
            id: e.id.clone(),
            easting: e.position[0],
            northing: e.position[1],
            cloud: cloud_rel,
            image: image_rel,
            image_variants: variants,
        });
    }
    write_index(dir, &entries)
}

/// Load a dataset directory back into memory, validating every element.
pub fn load_dataset(dir: &Path) -> Result<Vec<Element>> {
    let entries = read_index(dir)?;
    if entries.is_empty() {
        return Err(Error::validation(format!(
            "{}: dataset index is empty",
            dir.display()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut elements = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::validation(format!("duplicate element id {}", entry.id)));
        }
        let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
        let cloud = read_cloud(&resolve(&entry.cloud))?;
        let image = read_image(&resolve(&entry.image))?;
        let image_variants = entry
            .image_variants
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|rel| read_image(&resolve(rel)))
            .collect::<Result<Vec<_>>>()?;
        let element = Element {
            id: entry.id,
            position: [entry.easting, entry.northing],
            cloud,
            image,
            image_variants,
        };
        element.validate()?;
        elements.push(element);
    }
    Ok(elements)
}
