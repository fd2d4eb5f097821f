//! Image datasets held as raw RGB pixels in `[0, 1]`, `(3, H, W)` per image.
//!
//! On disk a dataset is a directory with `labels.csv` (`id,file,label`) and
//! one PNG per image. Pixel values are always multiples of 1/255 so that a
//! save/load cycle is lossless.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: String,
    /// Ground truth, if known. The explanation pipeline never reads it.
    pub label: Option<usize>,
    pub pixels: Array3<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    file: String,
    label: Option<usize>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.pixels.dim().0 != 3 {
                return Err(Error::Shape(format!(
                    "image `{}` has {} channels, expected 3",
                    item.id,
                    item.pixels.dim().0
                )));
            }
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate image id `{}`", item.id)));
            }
        }
        Ok(Dataset { items, by_id })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    /// First `n` items, in order.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset::new(self.items.iter().take(n).cloned().collect()).unwrap()
    }

    /// Fingerprint over ids and pixel content.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for item in &self.items {
            h.update(item.id.as_bytes());
            h.update([0u8]);
            for v in item.pixels.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        for item in &self.items {
            let file = format!("images/{}.png", item.id);
            to_rgb_image(item.pixels.view()).save(dir.join(&file))?;
            w.serialize(LabelRow { id: item.id.clone(), file, label: item.label })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let labels = dir.join("labels.csv");
        if !labels.exists() {
            return Err(Error::MissingPath(labels));
        }
        let mut r = csv::Reader::from_path(&labels)?;
        let mut items = Vec::new();
        for row in r.deserialize() {
            let row: LabelRow = row?;
            let img = image::open(dir.join(&row.file))?.to_rgb8();
            items.push(DatasetItem { id: row.id, label: row.label, pixels: from_rgb_image(&img) });
        }
        Dataset::new(items)
    }
}

/// Reads any image file as a `(3, H, W)` array in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    Ok(from_rgb_image(&image::open(path)?.to_rgb8()))
}

pub fn from_rgb_image(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
}

/// Quantizes `[0, 1]` pixels to 8 bits; values outside are clamped.
pub fn to_rgb_image(px: ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = px.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (px[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// Pixel box `(x, y, width, height)` in source image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

pub fn crop(px: ArrayView3<f64>, b: BBox) -> Array3<f64> {
    px.slice(s![.., b.y..b.y + b.height, b.x..b.x + b.width]).to_owned()
}

/// Stacks equally wide images along the height axis.
pub fn stack_vertical(parts: &[Array3<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|e| Error::Shape(format!("cannot stack images vertically: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, v: u8) -> DatasetItem {
        DatasetItem {
            id: id.into(),
            label: Some(v as usize % 3),
            pixels: Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
                ((v as usize + c * 31 + y * 7 + x) % 256) as f64 / 255.0
            }),
        }
    }

    #[test]
    fn save_load_is_lossless() {
        let ds = Dataset::new(vec![item("a", 1), item("b", 200)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.fingerprint(), ds.fingerprint());
        assert_eq!(back.get("b").unwrap().label, Some(200 % 3));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Dataset::new(vec![item("a", 1), item("a", 2)]).is_err());
    }

    #[test]
    fn crop_and_stack() {
        let it = item("a", 9);
        let b = BBox { x: 2, y: 1, width: 3, height: 3 };
        let c = crop(it.pixels.view(), b);
        assert_eq!(c.dim(), (3, 3, 3));
        assert_eq!(c[[1, 0, 0]], it.pixels[[1, 1, 2]]);
        let st = stack_vertical(&[c.clone(), c.clone()]).unwrap();
        assert_eq!(st.dim(), (3, 6, 3));
        assert_eq!(st.slice(s![.., 3.., ..]), c);
    }
}
