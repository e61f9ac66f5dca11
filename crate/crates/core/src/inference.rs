//! Prediction workflow: centroid detection, per-candidate mask decoding,
//! non-maximum suppression and label-map assembly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{cell_center, crop_rgb, ImageTile, InstanceMask, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::models::{GRID_SIZE, PATCH_SIZE, TILE_SIZE};
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Minimum centroid-map activation for a candidate.
    pub detection_threshold: f32,
    /// Masks overlapping a kept mask at this IoU or more are suppressed.
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            detection_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(Error::Config(format!(
                "detection threshold {} outside (0, 1)",
                self.detection_threshold
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("NMS IoU threshold {} outside (0, 1)", self.nms_iou)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidCandidate {
    /// Grid cell `(row, col)`.
    pub cell: (usize, usize),
    /// Tile pixel `(x, y)` the instance patch is centered on.
    pub pixel: (usize, usize),
    pub score: f32,
}

/// Cells of a 32×32 activation map at or above `threshold`, by descending
/// score (row-major order among equal scores).
pub fn candidates_from_map(map: &[f32], threshold: f32) -> Result<Vec<CentroidCandidate>> {
    if map.len() != GRID_SIZE * GRID_SIZE {
        return Err(Error::ShapeMismatch {
            expected: GRID_SIZE * GRID_SIZE,
            actual: map.len(),
        });
    }
    if let Some(i) = map.iter().position(|v| !v.is_finite()) {
        return Err(Error::Inference(format!("non-finite centroid activation at cell {i}")));
    }
    let mut out: Vec<CentroidCandidate> = map
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(i, &score)| {
            let (row, col) = (i / GRID_SIZE, i % GRID_SIZE);
            CentroidCandidate {
                cell: (row, col),
                pixel: cell_center(row, col),
                score,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(out)
}

fn check_tile(tile: &ImageTile) -> Result<()> {
    if tile.width != TILE_SIZE || tile.height != TILE_SIZE || tile.pixels.len() != TILE_SIZE * TILE_SIZE * 3 {
        return Err(Error::ShapeMismatch {
            expected: TILE_SIZE,
            actual: tile.width,
        });
    }
    Ok(())
}

/// Runs the centroid network on one 256×256 tile.
pub fn predict_centroids(net: &Network<f32>, tile: &ImageTile, threshold: f32) -> Result<Vec<CentroidCandidate>> {
    check_tile(tile)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("detection threshold {threshold} outside (0, 1)")));
    }
    let map = net.forward(&Tensor::from_vec(1, TILE_SIZE, TILE_SIZE, 3, tile.pixels.clone()));
    candidates_from_map(&map.data, threshold)
}

/// A decoded 64×64 mask placed in tile coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstanceMask {
    pub mask: InstanceMask,
    /// Tile coordinates `(x, y)` of the mask's top-left pixel.
    pub origin: (isize, isize),
    pub score: f32,
}

impl ScoredInstanceMask {
    /// Foreground pixels in tile coordinates (unclipped).
    pub fn foreground_pixels(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let size = self.mask.size;
        self.mask
            .values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= MASK_THRESHOLD)
            .map(move |(i, _)| (self.origin.0 + (i % size) as isize, self.origin.1 + (i / size) as isize))
    }
}

fn crop_origin(pixel: (usize, usize)) -> (isize, isize) {
    let half = (PATCH_SIZE / 2) as isize;
    (pixel.0 as isize - half, pixel.1 as isize - half)
}

/// Window of `PATCH_SIZE` centered on `pixel`, zero-padded at the borders.
pub fn candidate_crop(tile: &ImageTile, pixel: (usize, usize)) -> Vec<f32> {
    let (x0, y0) = crop_origin(pixel);
    crop_rgb(&tile.pixels, tile.width, tile.height, x0, y0, PATCH_SIZE)
}

pub fn predict_instance(
    net: &Network<f32>,
    tile: &ImageTile,
    candidate: &CentroidCandidate,
) -> Result<ScoredInstanceMask> {
    Ok(predict_instances(net, tile, core::slice::from_ref(candidate))?.remove(0))
}

const INSTANCE_BATCH: usize = 16;

/// Decodes one mask per candidate, batching the crops through the network.
pub fn predict_instances(
    net: &Network<f32>,
    tile: &ImageTile,
    candidates: &[CentroidCandidate],
) -> Result<Vec<ScoredInstanceMask>> {
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(INSTANCE_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * PATCH_SIZE * PATCH_SIZE * 3);
        for c in chunk {
            if c.pixel.0 >= tile.width || c.pixel.1 >= tile.height {
                return Err(Error::Inference(format!("candidate {:?} outside the tile", c.pixel)));
            }
            input.extend(candidate_crop(tile, c.pixel));
        }
        let y = net.forward(&Tensor::from_vec(chunk.len(), PATCH_SIZE, PATCH_SIZE, 3, input));
        if !y.all_finite() {
            return Err(Error::Inference("non-finite mask values".into()));
        }
        for (i, c) in chunk.iter().enumerate() {
            out.push(ScoredInstanceMask {
                mask: InstanceMask {
                    size: PATCH_SIZE,
                    values: y.item(i).to_vec(),
                },
                origin: crop_origin(c.pixel),
                score: c.score,
            });
        }
    }
    Ok(out)
}

/// Binary IoU of two placed masks; 0 when both are empty.
pub fn mask_iou(a: &ScoredInstanceMask, b: &ScoredInstanceMask) -> f64 {
    let (ca, cb) = (a.mask.foreground_count(), b.mask.foreground_count());
    let inter = intersection(a, b);
    let union = ca + cb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn intersection(a: &ScoredInstanceMask, b: &ScoredInstanceMask) -> usize {
    let (sa, sb) = (a.mask.size as isize, b.mask.size as isize);
    let x0 = a.origin.0.max(b.origin.0);
    let y0 = a.origin.1.max(b.origin.1);
    let x1 = (a.origin.0 + sa).min(b.origin.0 + sb);
    let y1 = (a.origin.1 + sa).min(b.origin.1 + sb);
    let mut n = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let fa = a.mask.is_foreground((x - a.origin.0) as usize, (y - a.origin.1) as usize);
            let fb = b.mask.is_foreground((x - b.origin.0) as usize, (y - b.origin.1) as usize);
            n += (fa && fb) as usize;
        }
    }
    n
}

/// Indices kept by greedy suppression, in visiting order (descending score,
/// then input order).
pub fn nms_indices(masks: &[ScoredInstanceMask], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&i, &j| masks[j].score.partial_cmp(&masks[i].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| mask_iou(&masks[k], &masks[i]) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(masks: &[ScoredInstanceMask], iou_threshold: f64) -> Vec<ScoredInstanceMask> {
    nms_indices(masks, iou_threshold)
        .into_iter()
        .map(|i| masks[i].clone())
        .collect()
}

/// Per-pixel instance ids (0 = background) and their binary union.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Paints mask `i` with id `i + 1`. Where masks overlap the higher score
/// wins, ties going to the earlier mask.
pub fn assemble_labelmap(masks: &[ScoredInstanceMask], width: usize, height: usize) -> LabelMap {
    let mut labels = vec![0u32; width * height];
    let mut owner_score = vec![f32::NEG_INFINITY; width * height];
    for (i, m) in masks.iter().enumerate() {
        for (x, y) in m.foreground_pixels() {
            if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                continue;
            }
            let p = y as usize * width + x as usize;
            if labels[p] == 0 || m.score > owner_score[p] {
                labels[p] = i as u32 + 1;
                owner_score[p] = m.score;
            }
        }
    }
    LabelMap { width, height, labels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub tile_id: alloc::string::String,
    pub candidates: Vec<CentroidCandidate>,
    /// Masks surviving suppression, by descending score.
    pub instances: Vec<ScoredInstanceMask>,
    pub labelmap: LabelMap,
}

/// Full prediction for one tile. A tile without detections yields an empty
/// result.
pub fn predict_tile(
    centroid_net: &Network<f32>,
    instance_net: &Network<f32>,
    tile: &ImageTile,
    cfg: &InferenceConfig,
) -> Result<TilePrediction> {
    cfg.validate()?;
    let candidates = predict_centroids(centroid_net, tile, cfg.detection_threshold)?;
    let masks = predict_instances(instance_net, tile, &candidates)?;
    let instances = nms(&masks, cfg.nms_iou);
    let labelmap = assemble_labelmap(&instances, tile.width, tile.height);
    Ok(TilePrediction {
        tile_id: tile.tile_id.clone(),
        candidates,
        instances,
        labelmap,
    })
}
