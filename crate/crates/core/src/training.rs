//! Losses, the Adam optimizer and the minibatch training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffle, CentroidSample, InstancePatch};
use crate::error::{Error, Result};
use crate::models::{build_centroid_net, build_instance_model, DecoderKind, NetConfig};
use crate::nn::{Gradients, Network};
use crate::tensor::{Real, Tensor};

/// `sqrt(mean((pred - target)²))`
pub fn rmse<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check_len(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(libm::sqrt(sum / pred.len() as f64))
}

/// `sqrt(Σ w·(pred - target)² / Σ w)` with `w = w_pos` on positive targets
/// and `w_neg` elsewhere. Targets must be exactly 0 or 1.
pub fn weighted_rmse<T: Real>(pred: &[T], target: &[T], w_pos: f64, w_neg: f64) -> Result<f64> {
    check_len(pred, target)?;
    let (num, den) = weighted_sums(pred, target, w_pos, w_neg)?;
    Ok(libm::sqrt(num / den))
}

fn check_len<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

fn target_weight<T: Real>(t: T, w_pos: f64, w_neg: f64) -> Result<f64> {
    let t = t.as_f64();
    if t == 1.0 {
        Ok(w_pos)
    } else if t == 0.0 {
        Ok(w_neg)
    } else {
        Err(Error::InvalidTarget(t))
    }
}

fn weighted_sums<T: Real>(pred: &[T], target: &[T], w_pos: f64, w_neg: f64) -> Result<(f64, f64)> {
    let (mut num, mut den) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let w = target_weight(t, w_pos, w_neg)?;
        let d = p.as_f64() - t.as_f64();
        num += w * d * d;
        den += w;
    }
    if den <= 0.0 || w_pos < 0.0 || w_neg < 0.0 {
        return Err(Error::InvalidWeights);
    }
    Ok((num, den))
}

/// Training criterion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    Rmse,
    WeightedRmse { w_pos: f64, w_neg: f64 },
}

impl Loss {
    pub fn value<T: Real>(&self, pred: &[T], target: &[T]) -> Result<f64> {
        match *self {
            Loss::Rmse => rmse(pred, target),
            Loss::WeightedRmse { w_pos, w_neg } => weighted_rmse(pred, target, w_pos, w_neg),
        }
    }

    /// Loss value and its gradient with respect to `pred`. At zero loss the
    /// gradient is defined as zero.
    pub fn value_and_grad<T: Real>(&self, pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
        check_len(pred, target)?;
        let (weights, den): (Vec<f64>, f64) = match *self {
            Loss::Rmse => (vec![1.0; pred.len()], pred.len() as f64),
            Loss::WeightedRmse { w_pos, w_neg } => {
                let w = target
                    .iter()
                    .map(|&t| target_weight(t, w_pos, w_neg))
                    .collect::<Result<Vec<_>>>()?;
                let den: f64 = w.iter().sum();
                if den <= 0.0 || w_pos < 0.0 || w_neg < 0.0 {
                    return Err(Error::InvalidWeights);
                }
                (w, den)
            }
        };
        let num: f64 = pred
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((&p, &t), &w)| {
                let d = p.as_f64() - t.as_f64();
                w * d * d
            })
            .sum();
        let loss = if den > 0.0 { libm::sqrt(num / den) } else { 0.0 };
        let scale = if loss > 0.0 { 1.0 / (den * loss) } else { 0.0 };
        let grad = pred
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((&p, &t), &w)| T::from_f64(w * (p.as_f64() - t.as_f64()) * scale))
            .collect();
        Ok((loss, grad))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, net: &mut Network<f32>, grads: &Gradients<f32>) {
        if self.m.is_empty() {
            self.m = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        let lr = self.learning_rate * libm::sqrtf(bc2) / bc1;
        let eps_hat = self.epsilon * libm::sqrtf(bc2);
        for (((p, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * m[i] / (libm::sqrtf(v[i]) + eps_hat);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub w_pos: f64,
    pub w_neg: f64,
    pub seed: u64,
    /// Checkpoint every N epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub device: String,
}

impl TrainConfig {
    pub fn centroid_default() -> Self {
        Self {
            epochs: 100,
            batch_size: 50,
            learning_rate: 1e-3,
            w_pos: 0.66,
            w_neg: 0.33,
            seed: 0,
            checkpoint_every: 10,
            device: "cpu".into(),
        }
    }

    pub fn instance_default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 500,
            learning_rate: 1e-4,
            ..Self::centroid_default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub seconds: f64,
}

/// Per-epoch losses, epochs numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// Losses only, for comparisons that must ignore wall-clock time.
    pub fn losses(&self) -> Vec<(usize, f64, f64)> {
        self.records.iter().map(|r| (r.epoch, r.train_loss, r.test_loss)).collect()
    }
}

/// One input/target pair borrowed from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub input: &'a [f32],
    pub target: &'a [f32],
}

/// What the training loop reports after each epoch.
pub struct EpochEnd<'a> {
    pub record: &'a LossRecord,
    pub network: &'a Network<f32>,
    /// Whether this epoch has the lowest test loss so far.
    pub best_test: bool,
    /// Whether the periodic checkpoint cadence falls on this epoch.
    pub periodic: bool,
}

/// Optional side channels of a training run: a wall clock (seconds) and an
/// end-of-epoch callback used for checkpointing and progress output.
#[derive(Default)]
pub struct Hooks<'h> {
    pub clock: Option<&'h dyn Fn() -> f64>,
    pub on_epoch: Option<&'h mut dyn FnMut(EpochEnd<'_>) -> Result<()>>,
}

fn batch_tensor(net: &Network<f32>, samples: &[Sample<'_>], indices: &[usize]) -> (Tensor<f32>, Vec<f32>) {
    let (h, w, c) = net.input_shape;
    let mut input = Vec::with_capacity(indices.len() * h * w * c);
    let mut target = Vec::new();
    for &i in indices {
        input.extend_from_slice(samples[i].input);
        target.extend_from_slice(samples[i].target);
    }
    (Tensor::from_vec(indices.len(), h, w, c, input), target)
}

/// One optimizer step on a batch; returns the batch loss before the update.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam,
    loss: &Loss,
    input: Tensor<f32>,
    target: &[f32],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    let trace = match dropout_rng {
        Some(rng) => net.forward_trace(input, Some(rng)),
        None => net.forward_trace::<ChaCha8Rng>(input, None),
    };
    let out = trace.output();
    let (value, grad) = loss.value_and_grad(&out.data, target)?;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("non-finite batch loss {value}")));
    }
    let grad = Tensor::from_vec(out.n, out.h, out.w, out.c, grad);
    let grads = net.backward(&trace, grad);
    adam.update(net, &grads);
    Ok(value)
}

/// Loss over a whole sample set in evaluation mode, as one aggregate (not a
/// mean of batch losses).
pub fn evaluate_loss(net: &Network<f32>, samples: &[Sample<'_>], loss: &Loss, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, t) = batch_tensor(net, samples, chunk);
        pred.extend(net.forward(&x).data);
        target.extend(t);
    }
    loss.value(&pred, &target)
}

const EVAL_BATCH: usize = 8;

/// Minibatch Adam over `train`, logging train and test loss every epoch.
///
/// Shuffling uses the run seed; dropout draws from an independent stream of
/// the same seed, so two runs with equal seeds produce identical logs.
pub fn train_network(
    net: &mut Network<f32>,
    train: &[Sample<'_>],
    test: &[Sample<'_>],
    loss: Loss,
    cfg: &TrainConfig,
    mut hooks: Hooks<'_>,
) -> Result<LossLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = LossLog::default();
    let start = hooks.clock.map(|c| c()).unwrap_or(0.0);
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t) = batch_tensor(net, train, chunk);
            let value = train_step(net, &mut adam, &loss, x, &t, Some(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, batch {b}: {msg}")),
                    other => other,
                })?;
            weighted += value * chunk.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        let test_loss = evaluate_loss(net, test, &loss, EVAL_BATCH)?;
        if !net.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let seconds = hooks.clock.map(|c| c() - start).unwrap_or(0.0);
        let record = LossRecord {
            epoch,
            train_loss,
            test_loss,
            seconds,
        };
        log.records.push(record);
        let best_test = test_loss < best;
        if best_test {
            best = test_loss;
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(EpochEnd {
                record: &record,
                network: net,
                best_test,
                periodic: cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0,
            })?;
        }
    }
    Ok(log)
}

/// Centroid-network training data split into train and test tiles.
#[derive(Clone, Debug, Default)]
pub struct CentroidDataset {
    pub train: Vec<CentroidSample>,
    pub test: Vec<CentroidSample>,
}

#[derive(Clone, Debug, Default)]
pub struct InstanceDataset {
    pub train: Vec<InstancePatch>,
    pub test: Vec<InstancePatch>,
}

fn centroid_samples(s: &[CentroidSample]) -> Vec<Sample<'_>> {
    s.iter()
        .map(|c| Sample {
            input: &c.image,
            target: &c.target.values,
        })
        .collect()
}

pub fn instance_samples(s: &[InstancePatch]) -> Vec<Sample<'_>> {
    s.iter()
        .map(|p| Sample {
            input: &p.image,
            target: &p.mask.values,
        })
        .collect()
}

pub fn train_centroid(data: &CentroidDataset, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<(Network<f32>, LossLog)> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = build_centroid_net(&NetConfig {
        seed: cfg.seed,
        ..NetConfig::default()
    });
    let loss = Loss::WeightedRmse {
        w_pos: cfg.w_pos,
        w_neg: cfg.w_neg,
    };
    let log = train_network(&mut net, &centroid_samples(&data.train), &centroid_samples(&data.test), loss, cfg, hooks)?;
    Ok((net, log))
}

pub fn train_instance(
    data: &InstanceDataset,
    cfg: &TrainConfig,
    decoder: DecoderKind,
    hooks: Hooks<'_>,
) -> Result<(Network<f32>, LossLog)> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = build_instance_model(
        decoder,
        &NetConfig {
            seed: cfg.seed,
            ..NetConfig::default()
        },
    )?;
    let log = train_network(&mut net, &instance_samples(&data.train), &instance_samples(&data.test), Loss::Rmse, cfg, hooks)?;
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_instance_patches, generate_synthetic_tile, SynthConfig};
    use crate::nn::{Conv2d, Layer};
    use crate::decoder::Activation;
    use proptest::prelude::*;
    use rand::RngCore;

    /// Scalar reference of the weighted loss, written out term by term.
    fn weighted_reference(pred: &[f64], target: &[f64], wp: f64, wn: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..pred.len() {
            let w = if target[i] == 1.0 { wp } else { wn };
            num += w * (pred[i] - target[i]) * (pred[i] - target[i]);
            den += w;
        }
        (num / den).sqrt()
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[0.3f64, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0f64; 5], &[1.0; 5]).unwrap(), 1.0);
        assert!((rmse(&[0.0f64, 0.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[0.0f64], &[1.0, 0.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn weighted_rmse_cases() {
        let t = [1.0f64, 0.0, 0.0, 0.0];
        let v = weighted_rmse(&[0.0f64; 4], &t, 0.66, 0.33).unwrap();
        assert!((v - 0.4f64.sqrt()).abs() < 1e-12);
        assert!((v - weighted_reference(&[0.0; 4], &t, 0.66, 0.33)).abs() < 1e-15);
        assert_eq!(weighted_rmse(&t, &t, 0.66, 0.33).unwrap(), 0.0);
        assert!(matches!(weighted_rmse(&[0.0f64], &[0.5], 0.66, 0.33), Err(Error::InvalidTarget(_))));
        assert_eq!(weighted_rmse(&[0.0f64], &[0.0], 1.0, 0.0), Err(Error::InvalidWeights));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pred = [0.2f64, 0.9, 0.4, 0.05];
        let target = [1.0f64, 0.0, 0.0, 1.0];
        for loss in [Loss::Rmse, Loss::WeightedRmse { w_pos: 0.66, w_neg: 0.33 }] {
            let (_, g) = loss.value_and_grad(&pred, &target).unwrap();
            for i in 0..4 {
                let mut p = pred;
                p[i] += 1e-7;
                let up = loss.value(&p, &target).unwrap();
                p[i] -= 2e-7;
                let down = loss.value(&p, &target).unwrap();
                assert!(((up - down) / 2e-7 - g[i]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn equal_weights_reduce_to_rmse(
            pred in proptest::collection::vec(-2.0f64..2.0, 1..40),
            bits in proptest::collection::vec(any::<bool>(), 40),
            w in 0.01f64..5.0,
        ) {
            let target: Vec<f64> = pred.iter().zip(&bits).map(|(_, &b)| if b { 1.0 } else { 0.0 }).collect();
            let a = weighted_rmse(&pred, &target, w, w).unwrap();
            let b = rmse(&pred, &target).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn loss_is_zero_iff_equal(pred in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            prop_assert_eq!(rmse(&pred, &pred).unwrap(), 0.0);
            let mut other = pred.clone();
            other[0] += 0.25;
            prop_assert!(rmse(&pred, &other).unwrap() > 0.0);
        }
    }

    fn tiny_net(seed: u64) -> Network<f32> {
        let mut net = Network::new(
            "tiny",
            (6, 6, 3),
            vec![
                Layer::Conv2d(Conv2d::new(3, 4, 3, 1, Activation::Relu)),
                Layer::Dropout(0.25),
                Layer::Conv2d(Conv2d::new(4, 1, 1, 1, Activation::Sigmoid)),
            ],
        );
        net.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        net
    }

    fn tiny_data(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f32>> = (0..n).map(|_| (0..108).map(|_| (rng.next_u32() % 100) as f32 / 100.0).collect()).collect();
        // target: pixel is on when its red channel exceeds 0.5
        let ys = xs.iter().map(|x| x.chunks(3).map(|p| if p[0] > 0.5 { 1.0 } else { 0.0 }).collect()).collect();
        (xs, ys)
    }

    fn as_samples<'a>(xs: &'a [Vec<f32>], ys: &'a [Vec<f32>]) -> Vec<Sample<'a>> {
        xs.iter().zip(ys).map(|(x, y)| Sample { input: x, target: y }).collect()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (xs, ys) = tiny_data(24, 1);
        let (tx, ty) = tiny_data(8, 2);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 5,
            learning_rate: 1e-2,
            ..TrainConfig::centroid_default()
        };
        let run = || {
            let mut net = tiny_net(3);
            let log = train_network(&mut net, &as_samples(&xs, &ys), &as_samples(&tx, &ty), Loss::Rmse, &cfg, Hooks::default()).unwrap();
            (net, log)
        };
        let (net_a, log_a) = run();
        let (net_b, log_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(net_a, net_b);
        assert_eq!(log_a.len(), 30);
        assert!(log_a.records.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
        assert!(log_a.last().unwrap().train_loss < log_a.records[0].train_loss);
    }

    #[test]
    fn oversized_batch_is_a_single_batch() {
        let (xs, ys) = tiny_data(4, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 100,
            ..TrainConfig::centroid_default()
        };
        let mut calls = 0;
        let mut cb = |e: EpochEnd<'_>| {
            calls += 1;
            assert!(e.record.test_loss.is_nan());
            Ok(())
        };
        let mut net = tiny_net(0);
        let log = train_network(
            &mut net,
            &as_samples(&xs, &ys),
            &[],
            Loss::Rmse,
            &cfg,
            Hooks {
                clock: None,
                on_epoch: Some(&mut cb),
            },
        )
        .unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(calls, 2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net = tiny_net(0);
        let r = train_network(&mut net, &[], &[], Loss::Rmse, &TrainConfig::centroid_default(), Hooks::default());
        assert_eq!(r.unwrap_err(), Error::EmptyDataset);
        assert_eq!(
            train_centroid(&CentroidDataset::default(), &TrainConfig::centroid_default(), Hooks::default()).unwrap_err(),
            Error::EmptyDataset
        );
    }

    #[test]
    fn diverging_run_reports_error() {
        let (xs, mut ys) = tiny_data(4, 1);
        ys[0][0] = f32::NAN;
        let mut net = tiny_net(0);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::centroid_default() };
        let r = train_network(&mut net, &as_samples(&xs, &ys), &[], Loss::Rmse, &cfg, Hooks::default());
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    /// A single Adam step with a tiny rate lowers the loss of the sample it
    /// was computed on, for ten different instance patches.
    #[test]
    fn single_adam_step_decreases_sample_loss() {
        let tile = generate_synthetic_tile(7, &SynthConfig { count_range: (10, 10), ..SynthConfig::default() })
            .unwrap()
            .tile;
        let (patches, _) = extract_instance_patches(&tile).unwrap();
        assert!(patches.len() >= 10);
        let base = crate::models::build_instance_net::<f32>(&NetConfig { seed: 5, dropout: 0.25 });
        for p in patches.iter().take(10) {
            let mut net = base.clone();
            let x = Tensor::from_vec(1, 64, 64, 3, p.image.clone());
            let before = rmse(&net.forward(&x).data, &p.mask.values).unwrap();
            let mut adam = Adam::new(1e-6);
            train_step(&mut net, &mut adam, &Loss::Rmse, x.clone(), &p.mask.values, None).unwrap();
            let after = rmse(&net.forward(&x).data, &p.mask.values).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }
}
