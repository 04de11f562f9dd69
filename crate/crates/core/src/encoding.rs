//! Sinusoidal positional encoding with per-band coarse-to-fine annealing.

use std::f64::consts::PI;

use monoview_autodiff::{lit, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_raw_input: bool,
    /// Steps over which the bands switch on, lowest first.
    pub anneal_duration: u64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { num_frequencies: 10, include_raw_input: true, anneal_duration: 1 }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anneal_duration == 0 {
            return Err(Error::Config("encoding anneal duration must be at least 1 step".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (usize::from(self.include_raw_input) + 2 * self.num_frequencies)
    }

    /// `clamp(step / anneal_duration, 0, 1)`.
    pub fn progress(&self, step: u64) -> f64 {
        (step as f64 / self.anneal_duration.max(1) as f64).clamp(0.0, 1.0)
    }
}

fn ramp(k: usize, progress: f64, bands: usize) -> f64 {
    let x = (progress * bands as f64 - k as f64).clamp(0.0, 1.0);
    (1.0 - (PI * x).cos()) / 2.0
}

/// Weight of band `k` at training progress in `[0, 1]`.
pub fn anneal_weight<T: Scalar>(k: usize, progress: T, num_frequencies: usize) -> Result<T> {
    if k >= num_frequencies {
        return Err(Error::Argument(format!("frequency index {k} out of range 0..{num_frequencies}")));
    }
    Ok(lit(ramp(k, progress.to_f64().unwrap(), num_frequencies)))
}

fn band_weights(cfg: &EncodingConfig, progress: f64) -> Vec<f64> {
    (0..cfg.num_frequencies).map(|k| ramp(k, progress, cfg.num_frequencies)).collect()
}

/// Row layout: `[raw x] ++ [w_k·sin(2^k π x_p), w_k·cos(2^k π x_p)]` for
/// `k` outer and coordinate `p` inner.
fn encode_row<T: Scalar>(x: &[T], weights: &[f64], raw: bool, out: &mut Vec<T>) {
    if raw {
        out.extend_from_slice(x);
    }
    let mut freq = PI;
    for &w in weights {
        let (f, wt) = (lit::<T>(freq), lit::<T>(w));
        for &p in x {
            let (s, c) = (f * p).sin_cos();
            out.push(wt * s);
            out.push(wt * c);
        }
        freq *= 2.0;
    }
}

pub fn positional_encode<T: Scalar>(x: &[T], cfg: &EncodingConfig, progress: T) -> Result<Vec<T>> {
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot encode non-finite coordinate {bad}")));
    }
    let mut out = Vec::with_capacity(cfg.output_dim(x.len()));
    encode_row(x, &band_weights(cfg, progress.to_f64().unwrap()), cfg.include_raw_input, &mut out);
    Ok(out)
}

/// Differentiable encoding of every row of an `[N, dim]` tensor.
pub fn encode_rows<'g, T: Scalar>(x: Var<'g, T>, cfg: &EncodingConfig, progress: f64) -> Var<'g, T> {
    let xv = x.value();
    let (rows, dim) = (xv.rows(), xv.cols());
    let weights = band_weights(cfg, progress);
    let raw = cfg.include_raw_input;
    let width = cfg.output_dim(dim);
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        encode_row(&xv.data()[r * dim..(r + 1) * dim], &weights, raw, &mut data);
    }
    let out = Tensor::from_parts([rows, width], data);
    let a = x.id();
    x.graph().custom(&[x], out, move |_, g, vals, grads| {
        let input = vals[a].clone();
        let slot = grads.slot(a, vals);
        for r in 0..rows {
            let g_row = &g.data()[r * width..(r + 1) * width];
            let x_row = &input.data()[r * dim..(r + 1) * dim];
            let s_row = &mut slot[r * dim..(r + 1) * dim];
            let mut col = 0;
            if raw {
                for p in 0..dim {
                    s_row[p] += g_row[p];
                }
                col = dim;
            }
            let mut freq = PI;
            for &w in &weights {
                let f = lit::<T>(freq);
                let wf = lit::<T>(w * freq);
                for p in 0..dim {
                    let (s, c) = (f * x_row[p]).sin_cos();
                    s_row[p] += wf * (c * g_row[col] - s * g_row[col + 1]);
                    col += 2;
                }
                freq *= 2.0;
            }
        }
    })
}
