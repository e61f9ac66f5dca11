//! On-disk formats: PNG tiles, JSON annotations and the dataset manifest.
//!
//! A dataset directory holds `manifest.json`, `tiles/<id>.png` and
//! `annotations/<id>.json`; manifest paths are relative to the directory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vec2instance_core::data::{
    assign_splits, filter_tiles, polygon_from_geo, DatasetManifest, FilterConfig, GeoTransform, ImageTile, ManifestEntry,
    Polygon, Split,
};
use vec2instance_core::models::TILE_SIZE;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pretty JSON with object keys in sorted order and a trailing newline, so
/// equal values always produce equal bytes.
pub fn to_json_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json_string(value).map_err(|e| Error::format(path, e))?;
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e))
}

/// Writes a file, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds intensities to the 8-bit levels a PNG can hold.
pub fn quantize(pixels: &mut [f32]) {
    for v in pixels {
        *v = to_u8(*v) as f32 / 255.0;
    }
}

pub fn rgb_image(width: usize, height: usize, pixels: &[f32]) -> RgbImage {
    let raw = pixels.iter().map(|&v| to_u8(v)).collect();
    ImageBuffer::from_raw(width as u32, height as u32, raw).expect("pixel buffer matches dimensions")
}

pub fn save_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    save_png(path, &rgb_image(width, height, pixels))
}

/// Reads any PNG as RGB with intensities in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().flat_map(|Rgb(p)| p.map(|c| c as f32 / 255.0)).collect();
    Ok((w as usize, h as usize, pixels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub polygon: Vec<[f64; 2]>,
}

/// Polygons in pixel space, or in `(lon, lat)` when a geotransform is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub tile_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<AnnotatedInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotransform: Option<GeoTransform>,
}

impl AnnotationFile {
    pub fn from_tile(tile: &ImageTile) -> Self {
        Self {
            tile_id: tile.tile_id.clone(),
            width: tile.width,
            height: tile.height,
            instances: tile
                .annotations
                .iter()
                .map(|p| AnnotatedInstance {
                    polygon: p.vertices().to_vec(),
                })
                .collect(),
            geotransform: None,
        }
    }

    pub fn polygons(&self) -> vec2instance_core::Result<Vec<Polygon>> {
        self.instances
            .iter()
            .map(|i| match &self.geotransform {
                Some(gt) => polygon_from_geo(gt, &i.polygon),
                None => Polygon::new(i.polygon.clone()),
            })
            .collect()
    }
}

/// Loads an image and its annotation file into a tile.
pub fn load_tile(image: &Path, annotation: &Path) -> Result<ImageTile> {
    let ann: AnnotationFile = read_json(annotation)?;
    let (width, height, pixels) = read_rgb_png(image)?;
    if (width, height) != (ann.width, ann.height) {
        return Err(Error::format(
            annotation,
            format!("annotation is {}x{} but the image is {width}x{height}", ann.width, ann.height),
        ));
    }
    Ok(ImageTile {
        tile_id: ann.tile_id.clone(),
        width,
        height,
        pixels,
        annotations: ann.polygons()?,
    })
}

fn tile_paths(tile_id: &str) -> (String, String) {
    (format!("tiles/{tile_id}.png"), format!("annotations/{tile_id}.json"))
}

/// Writes a tile into a dataset directory and returns its manifest entry
/// (assigned to the training split until splits are drawn).
pub fn save_tile(root: &Path, tile: &ImageTile) -> Result<ManifestEntry> {
    let id = &tile.tile_id;
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::config(format!("tile id `{id}` cannot name a file")));
    }
    let (image, annotation) = tile_paths(&tile.tile_id);
    write_rgb_png(&root.join(&image), tile.width, tile.height, &tile.pixels)?;
    write_json(&root.join(&annotation), &AnnotationFile::from_tile(tile))?;
    manifest_entry(tile, image, annotation)
}

pub fn manifest_entry(tile: &ImageTile, image: String, annotation: String) -> Result<ManifestEntry> {
    Ok(ManifestEntry {
        tile_id: tile.tile_id.clone(),
        image,
        annotation,
        split: Split::Train,
        instances: tile.annotations.len(),
        max_instance_extent: tile.max_instance_extent()?,
    })
}

/// Filters entries and draws the 2/3 : 1/3 tile split.
pub fn build_manifest(entries: Vec<ManifestEntry>, filter: FilterConfig, seed: u64) -> DatasetManifest {
    let mut manifest = filter_tiles(&DatasetManifest {
        entries,
        filter_config: filter,
    });
    assign_splits(&mut manifest.entries, seed);
    manifest
}

/// A preprocessed dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_json(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<ImageTile> {
        let tile = load_tile(&self.root.join(&entry.image), &self.root.join(&entry.annotation))?;
        if tile.width != TILE_SIZE || tile.height != TILE_SIZE {
            return Err(Error::format(
                self.root.join(&entry.image),
                format!("expected a preprocessed {TILE_SIZE}x{TILE_SIZE} tile"),
            ));
        }
        Ok(tile)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ImageTile>> {
        self.manifest.split(split).map(|e| self.load(e)).collect()
    }
}

/// Image/annotation pairs of a raw directory: every `<id>.json` with a
/// sibling `<id>.png`, in file-name order.
pub fn raw_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let png = path.with_extension("png");
            if png.exists() {
                pairs.push((png, path));
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vec2instance_core::data::{generate_synthetic_tile, SynthConfig};

    #[test]
    fn tile_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut tile = generate_synthetic_tile(4, &SynthConfig::default()).unwrap().tile;
        quantize(&mut tile.pixels);
        assert_eq!(save_tile(dir.path(), &tile).unwrap_err().class(), "ConfigError");
        tile.tile_id = "t4".into();
        let entry = save_tile(dir.path(), &tile).unwrap();
        let back = load_tile(&dir.path().join(&entry.image), &dir.path().join(&entry.annotation)).unwrap();
        assert_eq!(back, tile);
        assert_eq!(entry.instances, tile.annotations.len());
    }

    #[test]
    fn json_keys_are_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let s = to_json_string(&S { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn geo_annotations_are_projected() {
        let ann = AnnotationFile {
            tile_id: "g".into(),
            width: 10,
            height: 10,
            instances: vec![AnnotatedInstance {
                polygon: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            }],
            geotransform: Some(GeoTransform::from([2.0, 0.0, 1.0, 0.0, 2.0, 1.0])),
        };
        let p = ann.polygons().unwrap();
        assert_eq!(p[0].vertices(), &[[1.0, 1.0], [3.0, 1.0], [3.0, 3.0]]);
        let json = to_json_string(&ann).unwrap();
        assert_eq!(serde_json::from_str::<AnnotationFile>(&json).unwrap(), ann);
    }
}
