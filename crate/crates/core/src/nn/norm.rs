//! Batch and group normalization.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const EPS: f64 = 1e-5;
pub(crate) const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Group,
}

/// Which elements share one mean/variance estimate.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Units {
    /// One unit per channel, spanning batch and space.
    PerChannel,
    /// One unit per (sample, group of `channels / groups` channels).
    PerGroup(usize),
}

impl Units {
    fn count(self, shape: [usize; 4]) -> usize {
        match self {
            Units::PerChannel => shape[1],
            Units::PerGroup(g) => shape[0] * g,
        }
    }

    /// Flat index ranges (start, len) of one unit.
    fn ranges(self, shape: [usize; 4], unit: usize) -> Vec<(usize, usize)> {
        let [n, c, h, w] = shape;
        let hw = h * w;
        match self {
            Units::PerChannel => (0..n).map(|s| ((s * c + unit) * hw, hw)).collect(),
            Units::PerGroup(g) => {
                let cg = c / g;
                let (s, gi) = (unit / g, unit % g);
                vec![((s * c + gi * cg) * hw, cg * hw)]
            }
        }
    }
}

pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub units: Units,
    /// `false` when normalized with frozen running statistics.
    pub batch_stats: bool,
}

/// Normalizes with statistics computed from `input`. Returns the output, cache and
/// the biased per-unit (mean, var).
pub(crate) fn forward_train<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    units: Units,
) -> (Tensor<T>, NormCache<T>, Vec<(T, T)>) {
    let shape = input.shape;
    let hw = input.plane();
    let c = shape[1];
    let eps = T::c(EPS);
    let mut xhat = Tensor::zeros(shape);
    let mut out = Tensor::zeros(shape);
    let nunits = units.count(shape);
    let mut inv_std = Vec::with_capacity(nunits);
    let mut stats = Vec::with_capacity(nunits);
    for u in 0..nunits {
        let ranges = units.ranges(shape, u);
        let m: usize = ranges.iter().map(|r| r.1).sum();
        let mf = T::of_count(m);
        let mut sum = T::zero();
        for &(s, l) in &ranges {
            sum += input.data[s..s + l].iter().copied().sum::<T>();
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for &(s, l) in &ranges {
            sq += input.data[s..s + l].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / mf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        stats.push((mean, var));
        for &(s, l) in &ranges {
            for i in s..s + l {
                let ch = (i / hw) % c;
                let xh = (input.data[i] - mean) * is;
                xhat.data[i] = xh;
                out.data[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            units,
            batch_stats: true,
        },
        stats,
    )
}

/// Normalizes with per-channel running statistics.
pub(crate) fn forward_eval<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor<T>, NormCache<T>) {
    let shape = input.shape;
    let (c, hw) = (shape[1], input.plane());
    let eps = T::c(EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(shape);
    let mut out = Tensor::zeros(shape);
    for i in 0..input.data.len() {
        let ch = (i / hw) % c;
        let xh = (input.data[i] - running_mean[ch]) * inv_std[ch];
        xhat.data[i] = xh;
        out.data[i] = scale[ch] * xh + shift[ch];
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            units: Units::PerChannel,
            batch_stats: false,
        },
    )
}

pub(crate) fn backward<T: Scalar>(
    cache: &NormCache<T>,
    scale: &[T],
    grad_out: &Tensor<T>,
    grad_scale: &mut [T],
    grad_shift: &mut [T],
) -> Tensor<T> {
    let shape = grad_out.shape;
    let (c, hw) = (shape[1], grad_out.plane());
    for (i, &g) in grad_out.data.iter().enumerate() {
        let ch = (i / hw) % c;
        grad_scale[ch] += g * cache.xhat.data[i];
        grad_shift[ch] += g;
    }
    let mut grad_in = Tensor::zeros(shape);
    if !cache.batch_stats {
        for (i, &g) in grad_out.data.iter().enumerate() {
            let ch = (i / hw) % c;
            grad_in.data[i] = g * scale[ch] * cache.inv_std[ch];
        }
        return grad_in;
    }
    for (u, &is) in cache.inv_std.iter().enumerate() {
        let ranges = cache.units.ranges(shape, u);
        let m = T::of_count(ranges.iter().map(|r| r.1).sum());
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for &(s, l) in &ranges {
            for i in s..s + l {
                let d = grad_out.data[i] * scale[(i / hw) % c];
                sum_d += d;
                sum_dx += d * cache.xhat.data[i];
            }
        }
        for &(s, l) in &ranges {
            for i in s..s + l {
                let d = grad_out.data[i] * scale[(i / hw) % c];
                grad_in.data[i] = is / m * (m * d - sum_d - cache.xhat.data[i] * sum_dx);
            }
        }
    }
    grad_in
}
