//! The fixed coordinate-MLP decoder.
//!
//! A parameter vector is interpreted as the weights and biases of a one hidden
//! layer perceptron that maps a normalized pixel coordinate to an output value
//! (a mask probability, or an RGB triple). The decoder has no state of its own;
//! everything it evaluates comes from the supplied vector, so gradients flow
//! straight back into whatever produced the vector.
//!
//! Vector layout, for input dimension `d`, hidden width `h` and output
//! dimension `o`:
//!
//! | block | length | layout                       |
//! |-------|--------|------------------------------|
//! | `W1`  | `d·h`  | row-major, `W1[i][j]` at `i·h + j` |
//! | `b1`  | `h`    |                              |
//! | `W2`  | `h·o`  | row-major, `W2[j][k]` at `j·o + k` |
//! | `b2`  | `o`    |                              |

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Op, Real};

/// Pointwise nonlinearity applied after an affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::Linear => v,
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, out: T) -> T {
        match self {
            Activation::Relu => {
                if out > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Linear => T::one(),
            Activation::Sigmoid => out * (T::one() - out),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Shape of the decoded perceptron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl DecoderConfig {
    /// 2-D coordinates, 64 hidden units, one sigmoid mask output: 257 values.
    pub const MASK: DecoderConfig = DecoderConfig {
        input_dim: 2,
        hidden_units: 64,
        output_dim: 1,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Sigmoid,
    };

    /// RGB image field: 2-D coordinates, 384 hidden units, 3 outputs (2,307 values).
    pub const RGB_FIELD: DecoderConfig = DecoderConfig {
        input_dim: 2,
        hidden_units: 384,
        output_dim: 3,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Sigmoid,
    };

    pub fn new(input_dim: usize, hidden_units: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_units == 0 || output_dim == 0 {
            return Err(Error::Config(
                "decoder dimensions must all be at least 1".into(),
            ));
        }
        Ok(Self {
            input_dim,
            hidden_units,
            output_dim,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
        })
    }

    /// `d·h + h + h·o + o`
    pub fn param_count(&self) -> usize {
        let (d, h, o) = (self.input_dim, self.hidden_units, self.output_dim);
        d * h + h + h * o + o
    }

    /// Start offsets of `b1`, `W2` and `b2`.
    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.input_dim * self.hidden_units;
        let w2 = b1 + self.hidden_units;
        (b1, w2, w2 + self.hidden_units * self.output_dim)
    }
}

/// Borrowed view of one parameter vector split into its four blocks.
#[derive(Clone, Copy, Debug)]
pub struct MaskParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

impl<'a, T: Real> MaskParams<'a, T> {
    pub fn split(cfg: &DecoderConfig, params: &'a [T]) -> Result<Self> {
        if params.len() != cfg.param_count() {
            return Err(Error::ShapeMismatch {
                expected: cfg.param_count(),
                actual: params.len(),
            });
        }
        let (b1, w2, b2) = cfg.offsets();
        Ok(Self {
            w1: &params[..b1],
            b1: &params[b1..w2],
            w2: &params[w2..b2],
            b2: &params[b2..],
        })
    }
}

/// Normalized coordinates of an `side × side` grid, `(x, y)` per point in
/// row-major pixel order, each axis spanning `[-1, 1]` inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T> {
    side: usize,
    coords: Vec<T>,
}

impl<T: Real> CoordinateGrid<T> {
    pub fn new(side: usize) -> Self {
        let axis = |i: usize| -> T {
            if side <= 1 {
                T::zero()
            } else {
                T::from_f64(-1.0 + 2.0 * i as f64 / (side - 1) as f64)
            }
        };
        let mut coords = Vec::with_capacity(side * side * 2);
        for row in 0..side {
            for col in 0..side {
                coords.push(axis(col));
                coords.push(axis(row));
            }
        }
        Self { side, coords }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn points(&self) -> usize {
        self.side * self.side
    }

    /// Flat `(x, y)` pairs.
    pub fn coords(&self) -> &[T] {
        &self.coords
    }
}

/// Decodes one parameter vector over every point of `coords` (row-major
/// `points × d`), writing `points × o` values into `out`.
pub fn decode_into<T: Real>(
    cfg: &DecoderConfig,
    params: &[T],
    coords: &[T],
    out: &mut [T],
) -> Result<()> {
    let p = MaskParams::split(cfg, params)?;
    let (d, h, o) = (cfg.input_dim, cfg.hidden_units, cfg.output_dim);
    let points = coords.len() / d;
    if out.len() != points * o {
        return Err(Error::ShapeMismatch {
            expected: points * o,
            actual: out.len(),
        });
    }
    let hidden = hidden_layer(cfg, &p, coords, points);
    matmul(points, h, o, &hidden, Op::N, p.w2, Op::N, out, false);
    for row in out.chunks_exact_mut(o) {
        for (v, b) in row.iter_mut().zip(p.b2) {
            *v = cfg.output_activation.apply(*v + *b);
        }
    }
    Ok(())
}

fn hidden_layer<T: Real>(cfg: &DecoderConfig, p: &MaskParams<'_, T>, coords: &[T], points: usize) -> Vec<T> {
    let (d, h) = (cfg.input_dim, cfg.hidden_units);
    let mut hidden = vec![T::zero(); points * h];
    matmul(points, d, h, coords, Op::N, p.w1, Op::N, &mut hidden, false);
    for row in hidden.chunks_exact_mut(h) {
        for (v, b) in row.iter_mut().zip(p.b1) {
            *v = cfg.hidden_activation.apply(*v + *b);
        }
    }
    hidden
}

/// Accumulates `∂L/∂params` into `grad_params` given the decoded output
/// `out` and the upstream gradient `grad_out` (both `points × o`).
pub fn decode_backward<T: Real>(
    cfg: &DecoderConfig,
    params: &[T],
    coords: &[T],
    out: &[T],
    grad_out: &[T],
    grad_params: &mut [T],
) -> Result<()> {
    let p = MaskParams::split(cfg, params)?;
    let (d, h, o) = (cfg.input_dim, cfg.hidden_units, cfg.output_dim);
    let points = coords.len() / d;
    debug_assert_eq!(grad_params.len(), params.len());
    let hidden = hidden_layer(cfg, &p, coords, points);

    let dz2: Vec<T> = out
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * cfg.output_activation.derivative_from_output(y))
        .collect();

    let (ob1, ow2, ob2) = cfg.offsets();
    let (g_w1, rest) = grad_params.split_at_mut(ob1);
    let (g_b1, rest) = rest.split_at_mut(ow2 - ob1);
    let (g_w2, g_b2) = rest.split_at_mut(ob2 - ow2);

    matmul(h, points, o, &hidden, Op::T, &dz2, Op::N, g_w2, true);
    for row in dz2.chunks_exact(o) {
        for (g, v) in g_b2.iter_mut().zip(row) {
            *g += *v;
        }
    }

    let mut dz1 = vec![T::zero(); points * h];
    matmul(points, o, h, &dz2, Op::N, p.w2, Op::T, &mut dz1, false);
    for (g, &a) in dz1.iter_mut().zip(&hidden) {
        *g *= cfg.hidden_activation.derivative_from_output(a);
    }
    matmul(d, points, h, coords, Op::T, &dz1, Op::N, g_w1, true);
    for row in dz1.chunks_exact(h) {
        for (g, v) in g_b1.iter_mut().zip(row) {
            *g += *v;
        }
    }
    Ok(())
}

/// Decodes a single mask vector on a square grid into an `side × side` mask.
pub fn decode_mask<T: Real>(params: &[T], grid: &CoordinateGrid<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); grid.points()];
    decode_into(&DecoderConfig::MASK, params, grid.coords(), &mut out)?;
    Ok(out)
}

/// A fixed decoder bound to its configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedDecoder {
    pub config: DecoderConfig,
}

impl FixedDecoder {
    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Evaluates the decoded function at arbitrary `d`-dimensional points.
    pub fn decode<T: Real>(&self, params: &[T], points: &[T]) -> Result<Vec<T>> {
        let d = self.config.input_dim;
        if points.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                expected: (points.len() / d + 1) * d,
                actual: points.len(),
            });
        }
        let mut out = vec![T::zero(); points.len() / d * self.config.output_dim];
        decode_into(&self.config, params, points, &mut out)?;
        Ok(out)
    }
}

pub fn build_decoder(config: DecoderConfig) -> Result<FixedDecoder> {
    DecoderConfig::new(config.input_dim, config.hidden_units, config.output_dim)?;
    Ok(FixedDecoder { config })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(DecoderConfig::MASK.param_count(), 257);
        assert_eq!(DecoderConfig::RGB_FIELD.param_count(), 2307);
        assert_eq!(DecoderConfig::new(3, 1, 1).unwrap().param_count(), 6);
        assert!(DecoderConfig::new(0, 4, 1).is_err());
    }

    #[test]
    fn grid_spans_unit_square() {
        let g = CoordinateGrid::<f32>::new(64);
        let c = g.coords();
        assert_eq!(c.len(), 64 * 64 * 2);
        assert_eq!((c[0], c[1]), (-1.0, -1.0));
        let last = c.len() - 2;
        assert_eq!((c[last], c[last + 1]), (1.0, 1.0));
        // second point moves along x
        assert!(c[2] > -1.0 && c[3] == -1.0);
    }

    #[test]
    fn zero_params_decode_to_half() {
        let g = CoordinateGrid::<f32>::new(64);
        let m = decode_mask(&[0.0f32; 257], &g).unwrap();
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn negative_output_bias_decodes_to_background() {
        let g = CoordinateGrid::<f64>::new(64);
        let mut p = [0.0f64; 257];
        p[256] = -20.0;
        let m = decode_mask(&p, &g).unwrap();
        assert!(m.iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn wrong_length_is_shape_mismatch() {
        let g = CoordinateGrid::<f32>::new(8);
        assert!(matches!(
            decode_mask(&[0.0f32; 256], &g),
            Err(Error::ShapeMismatch { expected: 257, actual: 256 })
        ));
    }

    #[test]
    fn rgb_decoder_emits_three_channels() {
        let dec = build_decoder(DecoderConfig::RGB_FIELD).unwrap();
        let g = CoordinateGrid::<f32>::new(4);
        let out = dec.decode(&[0.0f32; 2307], g.coords()).unwrap();
        assert_eq!(out.len(), 16 * 3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = DecoderConfig::new(2, 5, 2).unwrap();
        let g = CoordinateGrid::<f64>::new(6);
        let params: Vec<f64> = (0..cfg.param_count())
            .map(|i| ((i as f64) * 1.7).sin() * 0.8)
            .collect();
        let weights: Vec<f64> = (0..g.points() * 2).map(|i| ((i as f64) * 0.3).cos()).collect();
        let loss = |p: &[f64]| -> f64 {
            let mut out = vec![0.0; g.points() * 2];
            decode_into(&cfg, p, g.coords(), &mut out).unwrap();
            out.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut out = vec![0.0; g.points() * 2];
        decode_into(&cfg, &params, g.coords(), &mut out).unwrap();
        let mut grad = vec![0.0; params.len()];
        decode_backward(&cfg, &params, g.coords(), &out, &weights, &mut grad).unwrap();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += 1e-6;
            let up = loss(&p);
            p[i] -= 2e-6;
            let down = loss(&p);
            let fd = (up - down) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
