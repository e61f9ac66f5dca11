//! Annotated tiles, polygon rasterization, training targets and the synthetic
//! dataset generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CELL_STRIDE, GRID_SIZE, PATCH_SIZE, TILE_SIZE};

/// Simple polygon, single exterior ring, pixel coordinates (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!("{} vertices, need at least 3", vertices.len())));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPolygon("non-finite coordinate".into()));
        }
        let a = vertices[0];
        let collinear = vertices.windows(2).skip(1).all(|w| {
            let (b, c) = (w[0], w[1]);
            ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() < 1e-12
        });
        if collinear {
            return Err(Error::InvalidPolygon("all vertices are collinear".into()));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// `(min_x, min_y, max_x, max_y)`
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), v| (x0.min(v[0]), y0.min(v[1]), x1.max(v[0]), y1.max(v[1])),
        )
    }

    /// Whether the polygon lies entirely inside a `width × height` tile.
    pub fn fully_inside(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= width as f64 && y1 <= height as f64
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|v| [v[0] * sx, v[1] * sy]).collect(),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|v| [v[0] + dx, v[1] + dy]).collect(),
        }
    }
}

/// Square single-channel mask, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub size: usize,
    pub values: Vec<f32>,
}

/// Binarization threshold shared by masks, detections and evaluation.
pub const MASK_THRESHOLD: f32 = 0.5;

impl InstanceMask {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.size + x]
    }

    #[inline]
    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= MASK_THRESHOLD
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= MASK_THRESHOLD).count()
    }

    pub fn thresholded(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= MASK_THRESHOLD).collect()
    }

    /// `(min_x, min_y, max_x, max_y)` of the foreground, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.size {
            for x in 0..self.size {
                if self.is_foreground(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }
}

/// x-coordinates where the horizontal line at `y` crosses the polygon
/// boundary, using the half-open rule `min(y1, y2) <= y < max(y1, y2)`.
fn scanline_crossings(poly: &Polygon, y: f64, out: &mut Vec<f64>) {
    out.clear();
    let v = poly.vertices();
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        if (a[1] > y) != (b[1] > y) {
            out.push((b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]);
        }
    }
    out.sort_by(|p, q| p.partial_cmp(q).expect("finite crossings"));
}

/// Rasterizes `poly` onto an `size × size` grid with the even-odd rule.
///
/// Pixel `(row i, col j)` is set iff its center `(j + 0.5, i + 0.5)` has an
/// odd number of boundary crossings strictly to its right. Edges are
/// half-open in `y`, so a center lying exactly on a vertex row counts the
/// edges leaving upward only, and a center lying exactly on an edge counts
/// as inside for left edges and outside for right edges.
pub fn rasterize_polygon(poly: &Polygon, size: usize) -> Result<InstanceMask> {
    if size == 0 {
        return Err(Error::Config("raster size must be at least 1".into()));
    }
    Polygon::new(poly.vertices.clone())?;
    let mut mask = InstanceMask::zeros(size);
    let mut xs = Vec::new();
    for row in 0..size {
        scanline_crossings(poly, row as f64 + 0.5, &mut xs);
        for span in xs.chunks_exact(2) {
            // centers j + 0.5 in [span[0], span[1])
            let first = libm::ceil(span[0] - 0.5).max(0.0);
            let end = libm::ceil(span[1] - 0.5).min(size as f64);
            if end <= first {
                continue;
            }
            let line = &mut mask.values[row * size..(row + 1) * size];
            line[first as usize..end as usize].fill(1.0);
        }
    }
    Ok(mask)
}

/// Mean foreground coordinate rounded half-up and clamped into the grid,
/// as `(x, y)`.
pub fn compute_centroid(mask: &InstanceMask) -> Result<(usize, usize)> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..mask.size {
        for x in 0..mask.size {
            if mask.is_foreground(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let round = |m: f64| -> usize {
        let r = libm::floor(m / n as f64 + 0.5);
        r.clamp(0.0, (mask.size - 1) as f64) as usize
    };
    Ok((round(sx), round(sy)))
}

/// Affine map from geographic `(lon, lat)` to pixel `(x, y)`:
/// `x = a·lon + b·lat + c`, `y = d·lon + e·lat + f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct GeoTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl From<[f64; 6]> for GeoTransform {
    fn from([a, b, c, d, e, f]: [f64; 6]) -> Self {
        Self { a, b, c, d, e, f }
    }
}

impl From<GeoTransform> for [f64; 6] {
    fn from(g: GeoTransform) -> Self {
        [g.a, g.b, g.c, g.d, g.e, g.f]
    }
}

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        e: 1.0,
        f: 0.0,
    };

    pub fn determinant(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }
}

pub fn geo_to_pixel(gt: &GeoTransform, lon: f64, lat: f64) -> Result<(f64, f64)> {
    let det = gt.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::InvalidTransform(det));
    }
    Ok((gt.a * lon + gt.b * lat + gt.c, gt.d * lon + gt.e * lat + gt.f))
}

/// Converts a ring of `(lon, lat)` pairs into a pixel-space polygon.
pub fn polygon_from_geo(gt: &GeoTransform, ring: &[[f64; 2]]) -> Result<Polygon> {
    let pts = ring
        .iter()
        .map(|p| geo_to_pixel(gt, p[0], p[1]).map(|(x, y)| [x, y]))
        .collect::<Result<Vec<_>>>()?;
    Polygon::new(pts)
}

/// RGB raster tile with its instance annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTile {
    pub tile_id: String,
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub annotations: Vec<Polygon>,
}

impl ImageTile {
    /// Resamples pixels bilinearly (pixel-center aligned) and scales polygons
    /// to a `size × size` tile.
    pub fn resampled(&self, size: usize) -> ImageTile {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let (sx, sy) = (self.width as f64 / size as f64, self.height as f64 / size as f64);
        let mut pixels = vec![0.0f32; size * size * 3];
        let sample = |x: usize, y: usize, c: usize| self.pixels[(y * self.width + x) * 3 + c] as f64;
        for oy in 0..size {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..size {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = sample(x0, y0, c) * (1.0 - tx) + sample(x1, y0, c) * tx;
                    let bottom = sample(x0, y1, c) * (1.0 - tx) + sample(x1, y1, c) * tx;
                    pixels[(oy * size + ox) * 3 + c] = (top * (1.0 - ty) + bottom * ty) as f32;
                }
            }
        }
        ImageTile {
            tile_id: self.tile_id.clone(),
            width: size,
            height: size,
            pixels,
            annotations: self
                .annotations
                .iter()
                .map(|p| p.scaled(1.0 / sx, 1.0 / sy))
                .collect(),
        }
    }

    /// Annotations whose polygon is not cut by the tile border.
    pub fn is_fully_captured(&self, index: usize) -> bool {
        self.annotations[index].fully_inside(self.width, self.height)
    }

    /// Tile-sized mask of one annotation.
    pub fn instance_mask(&self, index: usize) -> Result<InstanceMask> {
        assert_eq!(self.width, self.height, "tiles are square");
        rasterize_polygon(&self.annotations[index], self.width)
    }

    /// Union of all instance masks, thresholded.
    pub fn foreground(&self) -> Result<Vec<bool>> {
        let mut fg = vec![false; self.width * self.height];
        for i in 0..self.annotations.len() {
            let m = self.instance_mask(i)?;
            for (f, v) in fg.iter_mut().zip(&m.values) {
                *f |= *v >= MASK_THRESHOLD;
            }
        }
        Ok(fg)
    }

    /// Extent (max of width and height, in pixels) of the largest instance.
    pub fn max_instance_extent(&self) -> Result<usize> {
        let mut best = 0;
        for i in 0..self.annotations.len() {
            if let Some((x0, y0, x1, y1)) = self.instance_mask(i)?.bounding_box() {
                best = best.max(x1 - x0 + 1).max(y1 - y0 + 1);
            }
        }
        Ok(best)
    }
}

/// 32×32 map of instance centers, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidGrid {
    pub values: Vec<f32>,
    /// Instances whose cell was already marked by another instance.
    pub collisions: usize,
}

impl CentroidGrid {
    pub fn empty() -> Self {
        Self {
            values: vec![0.0; GRID_SIZE * GRID_SIZE],
            collisions: 0,
        }
    }

    pub fn marked(&self) -> usize {
        self.values.iter().filter(|&&v| v >= MASK_THRESHOLD).count()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * GRID_SIZE + col]
    }
}

/// Marks cell `(⌊x/8⌋, ⌊y/8⌋)` for the centroid of every annotation with
/// visible pixels, including instances cut by the tile border.
pub fn build_centroid_targets(tile: &ImageTile) -> Result<CentroidGrid> {
    let mut grid = CentroidGrid::empty();
    for i in 0..tile.annotations.len() {
        let mask = tile.instance_mask(i)?;
        let (x, y) = match compute_centroid(&mask) {
            Ok(c) => c,
            Err(Error::EmptyMask) => continue,
            Err(e) => return Err(e),
        };
        let scale = tile.width / GRID_SIZE;
        let idx = (y / scale) * GRID_SIZE + x / scale;
        if grid.values[idx] == 1.0 {
            grid.collisions += 1;
        }
        grid.values[idx] = 1.0;
    }
    Ok(grid)
}

/// 64×64 crop centered on one instance, with that instance's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePatch {
    pub source_tile: String,
    /// Instance centroid in tile pixels, `(x, y)`.
    pub center: (usize, usize),
    /// `64 × 64 × 3`
    pub image: Vec<f32>,
    pub mask: InstanceMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    PartiallyCaptured,
    TooLarge { extent: usize },
    Empty,
    OutsideWindow,
}

/// Copies the `size × size` window whose top-left corner is at `(x0, y0)`
/// (tile pixels, may be negative) out of an interleaved RGB raster,
/// zero-padding the part outside the tile.
pub fn crop_rgb(pixels: &[f32], width: usize, height: usize, x0: isize, y0: isize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size * 3];
    for wy in 0..size {
        let ty = y0 + wy as isize;
        if ty < 0 || ty >= height as isize {
            continue;
        }
        for wx in 0..size {
            let tx = x0 + wx as isize;
            if tx < 0 || tx >= width as isize {
                continue;
            }
            let src = (ty as usize * width + tx as usize) * 3;
            out[(wy * size + wx) * 3..][..3].copy_from_slice(&pixels[src..src + 3]);
        }
    }
    out
}

/// Patches for every fully captured instance that fits the 64×64 window.
/// Skipped instances are reported with their index and reason.
pub fn extract_instance_patches(tile: &ImageTile) -> Result<(Vec<InstancePatch>, Vec<(usize, SkipReason)>)> {
    let half = (PATCH_SIZE / 2) as isize;
    let mut patches = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..tile.annotations.len() {
        if !tile.is_fully_captured(i) {
            skipped.push((i, SkipReason::PartiallyCaptured));
            continue;
        }
        let mask = tile.instance_mask(i)?;
        let Some((bx0, by0, bx1, by1)) = mask.bounding_box() else {
            skipped.push((i, SkipReason::Empty));
            continue;
        };
        let extent = (bx1 - bx0 + 1).max(by1 - by0 + 1);
        if extent > PATCH_SIZE {
            skipped.push((i, SkipReason::TooLarge { extent }));
            continue;
        }
        let (cx, cy) = compute_centroid(&mask)?;
        let (x0, y0) = (cx as isize - half, cy as isize - half);
        let inside = |v: usize, lo: isize| v as isize >= lo && (v as isize) < lo + PATCH_SIZE as isize;
        if !(inside(bx0, x0) && inside(bx1, x0) && inside(by0, y0) && inside(by1, y0)) {
            skipped.push((i, SkipReason::OutsideWindow));
            continue;
        }
        let mut pmask = InstanceMask::zeros(PATCH_SIZE);
        for wy in 0..PATCH_SIZE {
            let ty = y0 + wy as isize;
            if ty < 0 || ty >= tile.height as isize {
                continue;
            }
            for wx in 0..PATCH_SIZE {
                let tx = x0 + wx as isize;
                if tx < 0 || tx >= tile.width as isize {
                    continue;
                }
                pmask.values[wy * PATCH_SIZE + wx] = mask.get(tx as usize, ty as usize);
            }
        }
        patches.push(InstancePatch {
            source_tile: tile.tile_id.clone(),
            center: (cx, cy),
            image: crop_rgb(&tile.pixels, tile.width, tile.height, x0, y0, PATCH_SIZE),
            mask: pmask,
        });
    }
    Ok((patches, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_buildings: usize,
    pub max_instance_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_buildings: 3,
            max_instance_size: PATCH_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tile_id: String,
    pub image: String,
    pub annotation: String,
    pub split: Split,
    pub instances: usize,
    pub max_instance_extent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub filter_config: FilterConfig,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Drops tiles with too few instances or with an instance larger than the
/// patch window.
pub fn filter_tiles(manifest: &DatasetManifest) -> DatasetManifest {
    let cfg = manifest.filter_config;
    DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.instances >= cfg.min_buildings && e.max_instance_extent <= cfg.max_instance_size)
            .cloned()
            .collect(),
        filter_config: cfg,
    }
}

/// Assigns the first ⌈2n/3⌉ tiles of a seeded permutation to training and
/// the rest to test.
pub fn assign_splits(entries: &mut [ManifestEntry], seed: u64) {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut order, &mut rng);
    let n_train = (2 * entries.len()).div_ceil(3);
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
}

/// Fisher-Yates shuffle.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    LShape,
    RotatedRectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tile_size: usize,
    /// Inclusive instance count range.
    pub count_range: (usize, usize),
    /// Inclusive side length range in pixels (at most 64).
    pub size_range: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    /// Standard deviation of per-pixel background noise.
    pub noise_sigma: f32,
    /// Minimum gap between instance bounding boxes.
    pub min_gap: usize,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tile_size: TILE_SIZE,
            count_range: (20, 30),
            size_range: (12, 32),
            shapes: vec![ShapeKind::Rectangle, ShapeKind::LShape, ShapeKind::RotatedRectangle],
            noise_sigma: 0.04,
            min_gap: 3,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if lo < 4 || lo > hi || hi > PATCH_SIZE {
            return Err(Error::Config(format!("size range {lo}..={hi} must lie in 4..=64")));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::Config("count range is inverted".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("no shapes enabled".into()));
        }
        if self.tile_size < hi + 2 {
            return Err(Error::Config("tile smaller than the largest instance".into()));
        }
        Ok(())
    }
}

/// A generated tile plus how many requested instances could not be placed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub tile: ImageTile,
    pub requested: usize,
    pub shortfall: usize,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn shape_polygon<R: Rng>(kind: ShapeKind, w: f64, h: f64, rng: &mut R) -> Vec<[f64; 2]> {
    match kind {
        ShapeKind::Rectangle => vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]],
        ShapeKind::LShape => {
            let cw = libm::round(w * rng.gen_range(0.35..0.65));
            let ch = libm::round(h * rng.gen_range(0.35..0.65));
            let l = vec![[0.0, 0.0], [w, 0.0], [w, h - ch], [w - cw, h - ch], [w - cw, h], [0.0, h]];
            // random orientation of the notch
            let flip_x = rng.gen::<bool>();
            let flip_y = rng.gen::<bool>();
            l.into_iter()
                .map(|[x, y]| [if flip_x { w - x } else { x }, if flip_y { h - y } else { y }])
                .collect()
        }
        ShapeKind::RotatedRectangle => {
            let theta = rng.gen_range(0.15..(core::f64::consts::FRAC_PI_2 - 0.15));
            // choose the rectangle so its rotated bounding box is w × h
            let (s, c) = (libm::sin(theta), libm::cos(theta));
            let rw = (w * 0.8).max(4.0);
            let rh = ((h - rw * s) / c).max(3.0).min(h);
            let corners = [[-rw / 2.0, -rh / 2.0], [rw / 2.0, -rh / 2.0], [rw / 2.0, rh / 2.0], [-rw / 2.0, rh / 2.0]];
            let rot: Vec<[f64; 2]> = corners.iter().map(|&[x, y]| [x * c - y * s, x * s + y * c]).collect();
            let minx = rot.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let miny = rot.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            rot.into_iter().map(|[x, y]| [x - minx, y - miny]).collect()
        }
    }
}

/// Deterministic synthetic tile: noisy textured ground with non-overlapping
/// flat-roofed buildings, each with a one-pixel darker outline and a cast
/// shadow.
pub fn generate_synthetic_tile(seed: u64, config: &SynthConfig) -> Result<SynthTile> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.tile_size;
    let requested = rng.gen_range(config.count_range.0..=config.count_range.1);

    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..requested {
        for _ in 0..config.max_retries {
            let kind = config.shapes[rng.gen_range(0..config.shapes.len())];
            let w = rng.gen_range(config.size_range.0..=config.size_range.1) as f64;
            let h = rng.gen_range(config.size_range.0..=config.size_range.1) as f64;
            let local = shape_polygon(kind, w, h, &mut rng);
            let bw = local.iter().map(|p| p[0]).fold(0.0, f64::max);
            let bh = local.iter().map(|p| p[1]).fold(0.0, f64::max);
            let margin = 1.0;
            let x = rng.gen_range(margin..(size as f64 - bw - margin));
            let y = rng.gen_range(margin..(size as f64 - bh - margin));
            let (x, y) = (libm::round(x * 2.0) / 2.0, libm::round(y * 2.0) / 2.0);
            let gap = config.min_gap as f64;
            let clash = boxes.iter().any(|&(x0, y0, x1, y1)| {
                x < x1 + gap && x + bw + gap > x0 && y < y1 + gap && y + bh + gap > y0
            });
            if clash {
                continue;
            }
            boxes.push((x, y, x + bw, y + bh));
            annotations.push(Polygon::new(local.into_iter().map(|[px, py]| [px + x, py + y]).collect())?);
            break;
        }
    }
    let shortfall = requested - annotations.len();

    // ground: base color, smooth gradient, per-pixel noise
    let base = [rng.gen_range(0.25..0.45), rng.gen_range(0.28..0.45), rng.gen_range(0.2..0.35)];
    let grad = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let shade = grad[0] * (x as f64 / size as f64 - 0.5) + grad[1] * (y as f64 / size as f64 - 0.5);
            for c in 0..3 {
                let v = base[c] + shade + config.noise_sigma as f64 * gaussian(&mut rng);
                pixels[(y * size + x) * 3 + c] = v as f32;
            }
        }
    }

    let tile = ImageTile {
        tile_id: String::new(),
        width: size,
        height: size,
        pixels,
        annotations,
    };
    let mut pixels = tile.pixels.clone();
    for i in 0..tile.annotations.len() {
        let mask = tile.instance_mask(i)?;
        let shadow = mask_shift(&mask, 2, 2);
        for (p, (&s, &m)) in pixels.chunks_exact_mut(3).zip(shadow.iter().zip(&mask.values)) {
            if s && m < MASK_THRESHOLD {
                p.iter_mut().for_each(|v| *v *= 0.55);
            }
        }
        let roof = if rng.gen::<bool>() {
            let g = rng.gen_range(0.7..0.95);
            [g, g, g * rng.gen_range(0.9..1.0)]
        } else {
            [rng.gen_range(0.55..0.9), rng.gen_range(0.3..0.6), rng.gen_range(0.2..0.45)]
        };
        for y in 0..size {
            for x in 0..size {
                if !mask.is_foreground(x, y) {
                    continue;
                }
                let edge = [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize || !mask.is_foreground(nx as usize, ny as usize)
                });
                let k = if edge { 0.75 } else { 1.0 };
                let p = &mut pixels[(y * size + x) * 3..][..3];
                for c in 0..3 {
                    p[c] = (roof[c] * k + 0.5 * config.noise_sigma as f64 * gaussian(&mut rng)) as f32;
                }
            }
        }
    }
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SynthTile {
        tile: ImageTile { pixels, ..tile },
        requested,
        shortfall,
    })
}

fn mask_shift(mask: &InstanceMask, dx: usize, dy: usize) -> Vec<bool> {
    let s = mask.size;
    let mut out = vec![false; s * s];
    for y in dy..s {
        for x in dx..s {
            out[y * s + x] = mask.is_foreground(x - dx, y - dy);
        }
    }
    out
}

/// Per-tile seed derived from a dataset seed (SplitMix64 step).
pub fn tile_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tile `index` of the synthetic dataset drawn with `seed`, named
/// `tile_0000`, `tile_0001`, ...
pub fn synthetic_dataset_tile(seed: u64, index: usize, config: &SynthConfig) -> Result<SynthTile> {
    let mut t = generate_synthetic_tile(tile_seed(seed, index as u64), config)?;
    t.tile.tile_id = format!("tile_{index:04}");
    Ok(t)
}

pub fn generate_synthetic_dataset(seed: u64, count: usize, config: &SynthConfig) -> Result<Vec<SynthTile>> {
    (0..count).map(|i| synthetic_dataset_tile(seed, i, config)).collect()
}

/// Tile with its centroid target, ready for the centroid network.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSample {
    pub tile_id: String,
    pub image: Vec<f32>,
    pub target: CentroidGrid,
}

pub fn centroid_sample(tile: &ImageTile) -> Result<CentroidSample> {
    if tile.width != TILE_SIZE || tile.height != TILE_SIZE {
        return Err(Error::ShapeMismatch {
            expected: TILE_SIZE,
            actual: tile.width,
        });
    }
    Ok(CentroidSample {
        tile_id: tile.tile_id.clone(),
        image: tile.pixels.clone(),
        target: build_centroid_targets(tile)?,
    })
}

/// Tile pixel at the center of grid cell `(row, col)`, as `(x, y)`.
pub fn cell_center(row: usize, col: usize) -> (usize, usize) {
    (CELL_STRIDE * col + CELL_STRIDE / 2, CELL_STRIDE * row + CELL_STRIDE / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Crossing-number point-in-polygon test evaluated independently at one point.
    fn brute_force_inside(v: &[[f64; 2]], px: f64, py: f64) -> bool {
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = (v[i][0], v[i][1]);
            let (xj, yj) = (v[j][0], v[j][1]);
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn brute_force_mask(poly: &Polygon, size: usize) -> Vec<f32> {
        let mut out = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                if brute_force_inside(poly.vertices(), j as f64 + 0.5, i as f64 + 0.5) {
                    out[i * size + j] = 1.0;
                }
            }
        }
        out
    }

    fn square(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::new(vec![[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]]).unwrap()
    }

    #[test]
    fn square_fills_grid() {
        let m = rasterize_polygon(&square(0.0, 0.0, 4.0), 4).unwrap();
        assert_eq!(m.values, vec![1.0; 16]);
    }

    #[test]
    fn triangle_matches_brute_force() {
        let t = Polygon::new(vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]).unwrap();
        let m = rasterize_polygon(&t, 4).unwrap();
        assert_eq!(m.values, brute_force_mask(&t, 4));
        // rows keep 3,2,1,0 pixels: centers on the diagonal count as outside
        assert_eq!(m.foreground_count(), 6);
    }

    #[test]
    fn degenerate_polygons_are_rejected() {
        assert!(matches!(Polygon::new(vec![[0.0, 0.0], [1.0, 1.0]]), Err(Error::InvalidPolygon(_))));
        assert!(matches!(
            Polygon::new(vec![[0.0, 0.0], [1.0, f64::NAN], [2.0, 0.0]]),
            Err(Error::InvalidPolygon(_))
        ));
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }

    #[test]
    fn centroid_rules() {
        let mut m = InstanceMask::zeros(32);
        m.values[20 * 32 + 10] = 1.0;
        assert_eq!(compute_centroid(&m).unwrap(), (10, 20));
        let mut b = InstanceMask::zeros(16);
        for y in 4..6 {
            for x in 4..6 {
                b.values[y * 16 + x] = 1.0;
            }
        }
        assert_eq!(compute_centroid(&b).unwrap(), (5, 5));
        assert_eq!(compute_centroid(&InstanceMask::zeros(8)), Err(Error::EmptyMask));
    }

    #[test]
    fn geotransform() {
        assert_eq!(geo_to_pixel(&GeoTransform::IDENTITY, 3.0, 7.0).unwrap(), (3.0, 7.0));
        let gt = GeoTransform::from([2.0, 0.0, 1.0, 0.0, 2.0, 1.0]);
        assert_eq!(geo_to_pixel(&gt, 3.0, 7.0).unwrap(), (7.0, 15.0));
        let singular = GeoTransform::from([1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(geo_to_pixel(&singular, 0.0, 0.0), Err(Error::InvalidTransform(_))));
    }

    fn tile_with(polys: Vec<Polygon>) -> ImageTile {
        ImageTile {
            tile_id: "t".into(),
            width: 256,
            height: 256,
            pixels: (0..256 * 256 * 3).map(|i| (i % 251) as f32 / 251.0).collect(),
            annotations: polys,
        }
    }

    #[test]
    fn centroid_targets() {
        // 2×2 block whose mean is 127.5 -> rounds to 128
        let g = build_centroid_targets(&tile_with(vec![square(127.0, 127.0, 2.0)])).unwrap();
        assert_eq!(g.get(16, 16), 1.0);
        assert_eq!(g.marked(), 1);
        let g = build_centroid_targets(&tile_with(vec![square(0.0, 0.0, 1.0), square(255.0, 255.0, 1.0)])).unwrap();
        assert_eq!((g.get(0, 0), g.get(31, 31), g.marked()), (1.0, 1.0, 2));
        let g = build_centroid_targets(&tile_with(vec![square(80.0, 80.0, 1.0), square(82.0, 82.0, 1.0)])).unwrap();
        assert_eq!((g.marked(), g.collisions), (1, 1));
        assert_eq!(build_centroid_targets(&tile_with(vec![])).unwrap().marked(), 0);
    }

    #[test]
    fn partially_captured_instances_still_get_centroids() {
        let g = build_centroid_targets(&tile_with(vec![square(-10.0, 100.0, 20.0)])).unwrap();
        assert_eq!(g.marked(), 1);
        let (patches, skipped) = extract_instance_patches(&tile_with(vec![square(-10.0, 100.0, 20.0)])).unwrap();
        assert!(patches.is_empty());
        assert_eq!(skipped, vec![(0, SkipReason::PartiallyCaptured)]);
    }

    #[test]
    fn patch_window_arithmetic() {
        let tile = tile_with(vec![square(95.0, 95.0, 10.0)]);
        let (patches, _) = extract_instance_patches(&tile).unwrap();
        assert_eq!(patches.len(), 1);
        let p = &patches[0];
        assert_eq!(p.center, (100, 100));
        assert_eq!(p.mask.foreground_count(), 100);
        // window starts at 68: patch pixel (0,0) is tile pixel (68,68)
        assert_eq!(&p.image[..3], &tile.pixels[(68 * 256 + 68) * 3..][..3]);
    }

    #[test]
    fn oversized_instances_are_skipped() {
        let (patches, skipped) = extract_instance_patches(&tile_with(vec![square(50.0, 50.0, 70.0)])).unwrap();
        assert!(patches.is_empty());
        assert_eq!(skipped, vec![(0, SkipReason::TooLarge { extent: 70 })]);
    }

    #[test]
    fn border_patches_are_zero_padded() {
        let tile = tile_with(vec![square(5.0, 100.0, 10.0)]);
        let (patches, _) = extract_instance_patches(&tile).unwrap();
        let p = &patches[0];
        assert_eq!(p.center.0, 10);
        // window starts at x = -22: the first 22 columns are padding
        for y in 0..64 {
            for x in 0..22 {
                assert_eq!(&p.image[(y * 64 + x) * 3..][..3], &[0.0, 0.0, 0.0]);
            }
            let ty = 105 - 32 + y;
            assert_eq!(&p.image[(y * 64 + 22) * 3..][..3], &tile.pixels[ty * 256 * 3..][..3]);
        }
    }

    fn entry(id: &str, instances: usize, extent: usize) -> ManifestEntry {
        ManifestEntry {
            tile_id: id.into(),
            image: format!("{id}.png"),
            annotation: format!("{id}.json"),
            split: Split::Train,
            instances,
            max_instance_extent: extent,
        }
    }

    #[test]
    fn tile_filter() {
        let m = DatasetManifest {
            entries: vec![entry("a", 0, 0), entry("b", 5, 70), entry("c", 12, 64)],
            filter_config: FilterConfig { min_buildings: 1, max_instance_size: 64 },
        };
        let f = filter_tiles(&m);
        assert_eq!(f.entries.len(), 1);
        assert_eq!(f.entries[0].tile_id, "c");
    }

    #[test]
    fn split_is_two_thirds_and_disjoint() {
        let mut entries: Vec<_> = (0..30).map(|i| entry(&format!("t{i}"), 5, 10)).collect();
        assign_splits(&mut entries, 9);
        let train = entries.iter().filter(|e| e.split == Split::Train).count();
        assert_eq!(train, 20);
        let mut again: Vec<_> = (0..30).map(|i| entry(&format!("t{i}"), 5, 10)).collect();
        assign_splits(&mut again, 9);
        assert_eq!(entries, again);
    }

    #[test]
    fn synthetic_tiles_are_deterministic_and_bounded() {
        let cfg = SynthConfig {
            count_range: (5, 10),
            ..SynthConfig::default()
        };
        let a = generate_synthetic_tile(0, &cfg).unwrap();
        let b = generate_synthetic_tile(0, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_tile(1, &cfg).unwrap());
        for seed in 0..5 {
            let t = generate_synthetic_tile(seed, &cfg).unwrap();
            let n = t.tile.annotations.len();
            assert_eq!(n + t.shortfall, t.requested);
            assert!((5..=10).contains(&t.requested));
            assert!(t.tile.max_instance_extent().unwrap() <= 64);
            assert!(t.tile.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let (patches, skipped) = extract_instance_patches(&t.tile).unwrap();
            assert_eq!(patches.len(), n, "{skipped:?}");
            // instances never overlap
            let fg = t.tile.foreground().unwrap().iter().filter(|&&f| f).count();
            let sum: usize = (0..n).map(|i| t.tile.instance_mask(i).unwrap().foreground_count()).sum();
            assert_eq!(fg, sum);
        }
    }

    #[test]
    fn crowded_config_reports_shortfall() {
        let cfg = SynthConfig {
            count_range: (60, 60),
            size_range: (40, 40),
            max_retries: 20,
            ..SynthConfig::default()
        };
        let t = generate_synthetic_tile(3, &cfg).unwrap();
        assert!(t.shortfall > 0);
        assert_eq!(t.tile.annotations.len() + t.shortfall, 60);
    }

    #[test]
    fn resampling_scales_annotations() {
        let tile = ImageTile {
            tile_id: "big".into(),
            width: 650,
            height: 650,
            pixels: vec![0.5; 650 * 650 * 3],
            annotations: vec![square(325.0, 325.0, 65.0)],
        };
        let r = tile.resampled(256);
        assert_eq!((r.width, r.height, r.pixels.len()), (256, 256, 256 * 256 * 3));
        assert!(r.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let (x0, y0, x1, _) = r.annotations[0].bounds();
        assert!((x0 - 128.0).abs() < 1e-9 && (y0 - 128.0).abs() < 1e-9);
        assert!((x1 - x0 - 25.6).abs() < 1e-9);
    }

    /// Star-shaped (hence simple) polygon with random angles and radii.
    fn star_polygon() -> impl Strategy<Value = (Polygon, usize)> {
        (4usize..=64, 3usize..12, any::<u64>()).prop_map(|(size, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = size as f64;
            let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..core::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let verts = angles
                .iter()
                .map(|&a| {
                    let r = rng.gen_range(0.5..s * 0.8);
                    [cx + r * libm::cos(a), cy + r * libm::sin(a)]
                })
                .collect();
            (Polygon::new(verts).unwrap(), size)
        })
    }

    proptest! {
        #[test]
        fn scanline_equals_brute_force((poly, size) in star_polygon()) {
            let m = rasterize_polygon(&poly, size).unwrap();
            prop_assert_eq!(m.values, brute_force_mask(&poly, size));
        }

        #[test]
        fn centroid_target_marks_distinct_cells(seed in 0u64..50) {
            let t = generate_synthetic_tile(seed, &SynthConfig::default()).unwrap().tile;
            let g = build_centroid_targets(&t).unwrap();
            let mut cells: Vec<(usize, usize)> = (0..t.annotations.len())
                .map(|i| compute_centroid(&t.instance_mask(i).unwrap()).unwrap())
                .map(|(x, y)| (y / 8, x / 8))
                .collect();
            let n = cells.len();
            cells.sort();
            cells.dedup();
            prop_assert_eq!(g.marked(), n.min(cells.len()));
            prop_assert_eq!(g.collisions, n - cells.len());
        }

        #[test]
        fn patch_mask_centroid_is_near_center(seed in 0u64..40) {
            let t = generate_synthetic_tile(seed, &SynthConfig::default()).unwrap().tile;
            let (patches, _) = extract_instance_patches(&t).unwrap();
            for p in patches {
                let (x, y) = compute_centroid(&p.mask).unwrap();
                prop_assert!(x.abs_diff(32) <= 1 && y.abs_diff(32) <= 1);
            }
        }
    }
}
