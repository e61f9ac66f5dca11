//! Confusion matrices, IoU, centroid matching, pipeline reports and the
//! decoder comparison.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::{build_centroid_targets, crop_rgb, extract_instance_patches, ImageTile, InstanceMask, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::inference::{assemble_labelmap, candidates_from_map, nms, InferenceConfig, ScoredInstanceMask};
use crate::models::{DecoderKind, GRID_SIZE, PATCH_SIZE, TILE_SIZE};
use crate::nn::Network;
use crate::tensor::Tensor;
use crate::training::{train_instance, Hooks, InstanceDataset, LossLog, LossRecord, TrainConfig};

/// Binary pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// `(tn + tp) / total`; an empty matrix counts as fully accurate.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 1.0,
            t => (self.tn + self.tp) as f64 / t as f64,
        }
    }

    /// `[tn, fp, fn, tp]` as percentages of the total.
    pub fn percentages(&self) -> [f64; 4] {
        let t = self.total().max(1) as f64;
        [self.tn, self.fp, self.fn_, self.tp].map(|v| 100.0 * v as f64 / t)
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tp: self.tp + o.tp,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_shapes<A, B>(pred: &[A], gt: &[B]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionMatrix> {
    check_shapes(pred, gt)?;
    let mut m = ConfusionMatrix::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (false, false) => m.tn += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (true, true) => m.tp += 1,
        }
    }
    Ok(m)
}

/// Confusion of a centroid activation map against a target grid, both
/// 32×32 and binarized at 0.5.
///
/// Within `distance` (Chebyshev, in cells) a predicted cell may claim one
/// target cell; pairs are matched greedily by distance, then by descending
/// prediction score, then by cell order. With `distance == 0` this is the
/// cellwise confusion.
pub fn centroid_confusion(pred: &[f32], gt: &[f32], distance: usize) -> Result<ConfusionMatrix> {
    if pred.len() != GRID_SIZE * GRID_SIZE {
        return Err(Error::ShapeMismatch {
            expected: GRID_SIZE * GRID_SIZE,
            actual: pred.len(),
        });
    }
    check_shapes(pred, gt)?;
    let cells = |m: &[f32]| -> Vec<usize> { (0..m.len()).filter(|&i| m[i] >= MASK_THRESHOLD).collect() };
    let (p, g) = (cells(pred), cells(gt));
    let cheb = |a: usize, b: usize| {
        let (ar, ac) = (a / GRID_SIZE, a % GRID_SIZE);
        let (br, bc) = (b / GRID_SIZE, b % GRID_SIZE);
        ar.abs_diff(br).max(ac.abs_diff(bc))
    };
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for &pi in &p {
        for &gi in &g {
            let d = cheb(pi, gi);
            if d <= distance {
                pairs.push((d, pi, gi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(pred[b.1].partial_cmp(&pred[a.1]).unwrap_or(core::cmp::Ordering::Equal))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_p = alloc::vec![false; pred.len()];
    let mut used_g = alloc::vec![false; pred.len()];
    let mut tp = 0u64;
    for (_, pi, gi) in pairs {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            tp += 1;
        }
    }
    let fp = p.len() as u64 - tp;
    let fn_ = g.len() as u64 - tp;
    Ok(ConfusionMatrix {
        tp,
        fp,
        fn_,
        tn: pred.len() as u64 - tp - fp - fn_,
    })
}

/// Summed intersections and unions; micro-aggregated IoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.intersection += (p && g) as u64;
            c.union += (p || g) as u64;
        }
        Ok(c)
    }

    /// 1 when the union is empty.
    pub fn iou(&self) -> f64 {
        match self.union {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }
}

impl AddAssign for IouCounts {
    fn add_assign(&mut self, o: Self) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

pub fn foreground_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(IouCounts::of(pred, gt)?.iou())
}

/// Source of centroid maps and instance masks for pipeline evaluation.
pub trait Predictor {
    /// 32×32 centroid activation map of a 256×256 tile.
    fn centroid_map(&self, tile: &ImageTile) -> Result<Vec<f32>>;
    /// One 64×64 soft mask per window center `(x, y)`.
    fn instance_masks(&self, tile: &ImageTile, centers: &[(usize, usize)]) -> Result<Vec<Vec<f32>>>;
}

/// Trained networks as a [`Predictor`].
pub struct NetworkPredictor<'a> {
    pub centroid: &'a Network<f32>,
    pub instance: &'a Network<f32>,
}

impl NetworkPredictor<'_> {
    /// Both networks are required; a missing one is a configuration error.
    pub fn new<'a>(
        centroid: Option<&'a Network<f32>>,
        instance: Option<&'a Network<f32>>,
    ) -> Result<NetworkPredictor<'a>> {
        match (centroid, instance) {
            (Some(centroid), Some(instance)) => Ok(NetworkPredictor { centroid, instance }),
            (None, _) => Err(Error::Config("missing centroid checkpoint".into())),
            (_, None) => Err(Error::Config("missing instance checkpoint".into())),
        }
    }
}

const EVAL_INSTANCE_BATCH: usize = 16;

impl Predictor for NetworkPredictor<'_> {
    fn centroid_map(&self, tile: &ImageTile) -> Result<Vec<f32>> {
        let y = self
            .centroid
            .forward(&Tensor::from_vec(1, tile.height, tile.width, 3, tile.pixels.clone()));
        Ok(y.data)
    }

    fn instance_masks(&self, tile: &ImageTile, centers: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
        let half = (PATCH_SIZE / 2) as isize;
        let mut out = Vec::with_capacity(centers.len());
        for chunk in centers.chunks(EVAL_INSTANCE_BATCH) {
            let mut input = Vec::new();
            for &(x, y) in chunk {
                input.extend(crop_rgb(&tile.pixels, tile.width, tile.height, x as isize - half, y as isize - half, PATCH_SIZE));
            }
            let y = self.instance.forward(&Tensor::from_vec(chunk.len(), PATCH_SIZE, PATCH_SIZE, 3, input));
            out.extend((0..chunk.len()).map(|i| y.item(i).to_vec()));
        }
        Ok(out)
    }
}

/// Thresholds used by [`evaluate_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub inference: InferenceConfig,
    /// Chebyshev tolerance for centroid matching, in cells.
    pub centroid_distance: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::default(),
            centroid_distance: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub tile_id: String,
    pub centroid: ConfusionMatrix,
    pub instance: ConfusionMatrix,
    pub overall: ConfusionMatrix,
    pub iou: IouCounts,
    pub detections: usize,
    pub kept_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Centroid grid against targets.
    pub centroid: ConfusionMatrix,
    /// Instance masks on ground-truth-centered patches.
    pub instance: ConfusionMatrix,
    /// End-to-end label map foreground against the tile foreground.
    pub overall: ConfusionMatrix,
    pub iou: f64,
    pub iou_counts: IouCounts,
    pub tiles: Vec<TileReport>,
    pub config: EvalConfig,
}

impl EvalReport {
    /// Sums per-tile reports in the given order.
    pub fn from_tiles(tiles: Vec<TileReport>, config: EvalConfig) -> Self {
        let mut centroid = ConfusionMatrix::default();
        let mut instance = ConfusionMatrix::default();
        let mut overall = ConfusionMatrix::default();
        let mut iou_counts = IouCounts::default();
        for t in &tiles {
            centroid += t.centroid;
            instance += t.instance;
            overall += t.overall;
            iou_counts += t.iou;
        }
        Self {
            centroid,
            instance,
            overall,
            iou: iou_counts.iou(),
            iou_counts,
            tiles,
            config,
        }
    }
}

fn binarize(values: &[f32]) -> Vec<bool> {
    values.iter().map(|&v| v >= MASK_THRESHOLD).collect()
}

/// All three stages for one tile.
pub fn evaluate_tile<P: Predictor + ?Sized>(predictor: &P, tile: &ImageTile, cfg: &EvalConfig) -> Result<TileReport> {
    if tile.width != TILE_SIZE || tile.height != TILE_SIZE {
        return Err(Error::ShapeMismatch {
            expected: TILE_SIZE,
            actual: tile.width,
        });
    }
    cfg.inference.validate()?;
    let map = predictor.centroid_map(tile)?;
    let target = build_centroid_targets(tile)?;
    let centroid = centroid_confusion(&map, &target.values, cfg.centroid_distance)?;

    let (patches, _) = extract_instance_patches(tile)?;
    let centers: Vec<(usize, usize)> = patches.iter().map(|p| p.center).collect();
    let mut instance = ConfusionMatrix::default();
    for (pred, patch) in predictor.instance_masks(tile, &centers)?.iter().zip(&patches) {
        instance += confusion(&binarize(pred), &patch.mask.thresholded())?;
    }

    let candidates = candidates_from_map(&map, cfg.inference.detection_threshold)?;
    let pixels: Vec<(usize, usize)> = candidates.iter().map(|c| c.pixel).collect();
    let half = (PATCH_SIZE / 2) as isize;
    let masks: Vec<ScoredInstanceMask> = predictor
        .instance_masks(tile, &pixels)?
        .into_iter()
        .zip(&candidates)
        .map(|(values, c)| ScoredInstanceMask {
            mask: InstanceMask {
                size: PATCH_SIZE,
                values,
            },
            origin: (c.pixel.0 as isize - half, c.pixel.1 as isize - half),
            score: c.score,
        })
        .collect();
    let kept = nms(&masks, cfg.inference.nms_iou);
    let pred_fg = assemble_labelmap(&kept, tile.width, tile.height).foreground();
    let gt_fg = tile.foreground()?;
    Ok(TileReport {
        tile_id: tile.tile_id.clone(),
        centroid,
        instance,
        overall: confusion(&pred_fg, &gt_fg)?,
        iou: IouCounts::of(&pred_fg, &gt_fg)?,
        detections: candidates.len(),
        kept_instances: kept.len(),
    })
}

/// Centroid, instance and end-to-end evaluation over test tiles.
pub fn evaluate_pipeline<P: Predictor + ?Sized>(predictor: &P, tiles: &[ImageTile], cfg: &EvalConfig) -> Result<EvalReport> {
    if tiles.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reports = tiles
        .iter()
        .map(|t| evaluate_tile(predictor, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_tiles(reports, *cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderRun {
    pub decoder: DecoderKind,
    pub trainable_params: usize,
    pub log: LossLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderComparison {
    pub runs: Vec<DecoderRun>,
}

impl DecoderComparison {
    /// Rows of `(epoch, test loss per run)`.
    pub fn test_curves(&self) -> Vec<(usize, Vec<f64>)> {
        let epochs = self.runs.iter().map(|r| r.log.len()).min().unwrap_or(0);
        (0..epochs)
            .map(|e| (e + 1, self.runs.iter().map(|r| r.log.records[e].test_loss).collect()))
            .collect()
    }

    pub fn final_test_loss(&self, decoder: &DecoderKind) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| &r.decoder == decoder)
            .and_then(|r| r.log.last())
            .map(|r| r.test_loss)
    }
}

/// Trains the fixed decoder model and one transpose-conv model per budget
/// with the same trunk initialization, loss, seed and data order.
pub fn compare_decoders(
    data: &InstanceDataset,
    budgets: &[usize],
    cfg: &TrainConfig,
    clock: Option<&dyn Fn() -> f64>,
    mut progress: Option<&mut dyn FnMut(&DecoderKind, &LossRecord)>,
) -> Result<DecoderComparison> {
    let mut kinds = alloc::vec![DecoderKind::Vec2Instance];
    kinds.extend(budgets.iter().map(|&budget| DecoderKind::TransposeConv { budget }));
    let mut runs = Vec::new();
    for kind in kinds {
        let mut report = |e: crate::training::EpochEnd<'_>| {
            if let Some(p) = progress.as_mut() {
                p(&kind, e.record);
            }
            Ok(())
        };
        let hooks = Hooks {
            clock,
            on_epoch: Some(&mut report),
        };
        let (net, log) = train_instance(data, cfg, kind, hooks)?;
        runs.push(DecoderRun {
            decoder: kind,
            trainable_params: net.param_count(),
            log,
        });
    }
    Ok(DecoderComparison { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_centroid, generate_synthetic_tile, ShapeKind, SynthConfig};
    use crate::models::CELL_STRIDE;
    use crate::training::instance_samples;
    use proptest::prelude::*;

    #[test]
    fn confusion_cases() {
        let zero = [false; 100];
        let m = confusion(&zero, &zero).unwrap();
        assert_eq!((m.accuracy(), m.tp), (1.0, 0));
        let gt: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let inv: Vec<bool> = gt.iter().map(|&g| !g).collect();
        assert_eq!(confusion(&inv, &gt).unwrap().accuracy(), 0.0);
        let gt9: Vec<bool> = (0..100).map(|i| i < 9).collect();
        let m = confusion(&zero, &gt9).unwrap();
        assert!((m.accuracy() - 0.91).abs() < 1e-12);
        assert_eq!(m.fn_, 9);
        assert_eq!(m.percentages(), [91.0, 0.0, 9.0, 0.0]);
        assert!(confusion(&zero[..5], &zero).is_err());
    }

    fn grid_with(cells: &[(usize, usize)]) -> Vec<f32> {
        let mut g = alloc::vec![0.0; 1024];
        for &(r, c) in cells {
            g[r * 32 + c] = 1.0;
        }
        g
    }

    #[test]
    fn centroid_matching_cases() {
        let a = grid_with(&[(3, 4), (20, 20)]);
        let m = centroid_confusion(&a, &a, 0).unwrap();
        assert_eq!((m.fp, m.fn_, m.tp), (0, 0, 2));
        let shifted = grid_with(&[(3, 5), (20, 20)]);
        let m0 = centroid_confusion(&shifted, &a, 0).unwrap();
        assert_eq!((m0.tp, m0.fp, m0.fn_), (1, 1, 1));
        let m1 = centroid_confusion(&shifted, &a, 1).unwrap();
        assert_eq!((m1.tp, m1.fp, m1.fn_), (2, 0, 0));
        assert_eq!(m1.total(), 1024);
    }

    #[test]
    fn iou_cases() {
        let full = [true; 10];
        assert_eq!(foreground_iou(&full, &full).unwrap(), 1.0);
        let a: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let b: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        assert_eq!(foreground_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(foreground_iou(&a, &full).unwrap(), 0.5);
        assert_eq!(foreground_iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
    }

    fn bits(n: usize) -> impl Strategy<Value = Vec<bool>> {
        proptest::collection::vec(any::<bool>(), n)
    }

    proptest! {
        #[test]
        fn confusion_invariants(p in bits(64), g in bits(64)) {
            let m = confusion(&p, &g).unwrap();
            prop_assert_eq!(m.total(), 64);
            prop_assert!((0.0..=1.0).contains(&m.accuracy()));
            prop_assert!((m.percentages().iter().sum::<f64>() - 100.0).abs() < 1e-9);
            let iou = foreground_iou(&p, &g).unwrap();
            if m.tp + m.fp > 0 {
                prop_assert!(iou <= m.tp as f64 / (m.tp + m.fp) as f64 + 1e-12);
            }
            if m.tp + m.fn_ > 0 {
                prop_assert!(iou <= m.tp as f64 / (m.tp + m.fn_) as f64 + 1e-12);
            }
        }

        #[test]
        fn centroid_threshold_zero_is_cellwise(p in bits(1024), g in bits(1024)) {
            let pf: Vec<f32> = p.iter().map(|&b| b as u8 as f32).collect();
            let gf: Vec<f32> = g.iter().map(|&b| b as u8 as f32).collect();
            prop_assert_eq!(centroid_confusion(&pf, &gf, 0).unwrap(), confusion(&p, &g).unwrap());
        }
    }

    /// Answers from the annotations: perfect or all-background.
    struct Oracle {
        perfect: bool,
    }

    impl Predictor for Oracle {
        fn centroid_map(&self, tile: &ImageTile) -> Result<Vec<f32>> {
            let t = build_centroid_targets(tile)?;
            Ok(if self.perfect { t.values } else { alloc::vec![0.0; t.values.len()] })
        }

        fn instance_masks(&self, tile: &ImageTile, centers: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
            let mut out = Vec::new();
            for &(cx, cy) in centers {
                let mut m = alloc::vec![0.0f32; PATCH_SIZE * PATCH_SIZE];
                if self.perfect {
                    for i in 0..tile.annotations.len() {
                        let mask = tile.instance_mask(i)?;
                        let (x, y) = compute_centroid(&mask)?;
                        let same_cell = x / CELL_STRIDE == cx / CELL_STRIDE && y / CELL_STRIDE == cy / CELL_STRIDE;
                        if !(same_cell || (x, y) == (cx, cy)) {
                            continue;
                        }
                        for wy in 0..PATCH_SIZE {
                            for wx in 0..PATCH_SIZE {
                                let tx = cx as isize - 32 + wx as isize;
                                let ty = cy as isize - 32 + wy as isize;
                                if tx >= 0 && ty >= 0 && tx < 256 && ty < 256 && mask.is_foreground(tx as usize, ty as usize) {
                                    m[wy * PATCH_SIZE + wx] = 1.0;
                                }
                            }
                        }
                    }
                }
                out.push(m);
            }
            Ok(out)
        }
    }

    fn rect_tiles() -> Vec<ImageTile> {
        let cfg = SynthConfig {
            shapes: alloc::vec![ShapeKind::Rectangle],
            ..SynthConfig::default()
        };
        (0..3).map(|s| generate_synthetic_tile(s, &cfg).unwrap().tile).collect()
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let tiles = rect_tiles();
        let r = evaluate_pipeline(&Oracle { perfect: true }, &tiles, &EvalConfig::default()).unwrap();
        assert_eq!(r.centroid.accuracy(), 1.0);
        assert_eq!(r.instance.accuracy(), 1.0);
        assert_eq!(r.overall.accuracy(), 1.0);
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.tiles.len(), 3);
    }

    #[test]
    fn background_predictions_score_background_fraction() {
        let tiles = rect_tiles();
        let r = evaluate_pipeline(&Oracle { perfect: false }, &tiles, &EvalConfig::default()).unwrap();
        let fg: usize = tiles.iter().map(|t| t.foreground().unwrap().iter().filter(|&&f| f).count()).sum();
        let total = (tiles.len() * 256 * 256) as f64;
        assert!((r.overall.accuracy() - (total - fg as f64) / total).abs() < 1e-12);
        assert_eq!(r.iou, 0.0);
        assert!((r.overall.accuracy() - r.overall.percentages()[0] / 100.0).abs() < 1e-12);
    }

    #[test]
    fn missing_networks_are_config_errors() {
        let net = crate::models::build_instance_net::<f32>(&Default::default());
        assert!(matches!(NetworkPredictor::new(None, Some(&net)), Err(Error::Config(_))));
        assert!(matches!(NetworkPredictor::new(Some(&net), None), Err(Error::Config(_))));
    }

    #[test]
    fn comparison_shares_data_order_and_length() {
        let tile = generate_synthetic_tile(1, &SynthConfig::default()).unwrap().tile;
        let (patches, _) = extract_instance_patches(&tile).unwrap();
        let data = InstanceDataset {
            train: patches[..2].to_vec(),
            test: patches[2..3].to_vec(),
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::instance_default()
        };
        let mut seen: Vec<DecoderKind> = Vec::new();
        let mut progress = |k: &DecoderKind, _: &LossRecord| seen.push(*k);
        let cmp = compare_decoders(&data, &[200_000, 300_000], &cfg, None, Some(&mut progress)).unwrap();
        assert_eq!(cmp.runs.len(), 3);
        assert!(cmp.runs.iter().all(|r| r.log.len() == 2));
        assert_eq!(seen.len(), 6);
        assert_eq!(cmp.test_curves().len(), 2);
        assert_eq!(cmp.runs[0].trainable_params, crate::models::INSTANCE_PARAMS);
        assert!(cmp.runs[1].trainable_params > cmp.runs[0].trainable_params);
        assert!(!instance_samples(&data.train).is_empty());
    }
}
