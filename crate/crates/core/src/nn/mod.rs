//! Minimal layer stack with hand-written backward passes.
//!
//! Layers hold no values of their own; they reference leaves of a
//! [`ModelParams`](crate::model::ModelParams) tree by index. A layer parameter
//! may be backed by several leaves, concatenated in order; this is how the
//! decoder is split into shape and appearance halves.

pub(crate) mod conv;
pub mod norm;

use std::borrow::Cow;

use crate::model::params::Leaf;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use norm::NormKind;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
}

/// Leaf indices whose values are concatenated into one flat layer parameter.
#[derive(Debug, Clone)]
pub(crate) struct ParamRef(pub Vec<usize>);

impl ParamRef {
    pub fn gather<'a, T: Scalar>(&self, leaves: &'a [Leaf<T>]) -> Cow<'a, [T]> {
        if let [only] = self.0[..] {
            Cow::Borrowed(&leaves[only].values)
        } else {
            Cow::Owned(self.0.iter().flat_map(|&i| leaves[i].values.iter().copied()).collect())
        }
    }

    pub fn len<T>(&self, leaves: &[Leaf<T>]) -> usize {
        self.0.iter().map(|&i| leaves[i].values.len()).sum()
    }

    /// Adds `flat` into the per-leaf gradient buffers.
    pub fn scatter_add<T: Scalar>(&self, flat: &[T], grads: &mut [Vec<T>]) {
        let mut offset = 0;
        for &i in &self.0 {
            let g = &mut grads[i];
            let n = g.len();
            for (dst, &src) in g.iter_mut().zip(&flat[offset..offset + n]) {
                *dst += src;
            }
            offset += n;
        }
    }

    /// Overwrites the referenced leaves with `flat`.
    pub fn scatter_set<T: Scalar>(&self, flat: &[T], leaves: &mut [Leaf<T>]) {
        let mut offset = 0;
        for &i in &self.0 {
            let v = &mut leaves[i].values;
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv {
        weight: ParamRef,
        bias: Option<ParamRef>,
        cout: usize,
    },
    Norm {
        scale: ParamRef,
        shift: ParamRef,
        /// Present for batch norm only.
        running: Option<(ParamRef, ParamRef)>,
        groups: usize,
    },
    LeakyRelu,
    AvgPool2,
    Upsample2,
    Sigmoid,
}

pub(crate) enum Cache<T> {
    Conv { input: Tensor<T> },
    Norm(norm::NormCache<T>),
    LeakyRelu { input: Tensor<T> },
    AvgPool2 { shape: [usize; 4] },
    Upsample2 { shape: [usize; 4] },
    Sigmoid { output: Tensor<T> },
}

/// Replacement running statistics produced by a training-mode batch-norm pass.
pub(crate) struct StatUpdate<T> {
    pub target: ParamRef,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    /// Runs the stack. Caches are kept only when `keep` is set; running-statistic
    /// updates are collected only when `stats` is given.
    pub fn forward<T: Scalar>(
        &self,
        leaves: &[Leaf<T>],
        mut x: Tensor<T>,
        mode: Mode,
        keep: bool,
        mut stats: Option<&mut Vec<StatUpdate<T>>>,
    ) -> (Tensor<T>, Vec<Cache<T>>) {
        let mut caches = Vec::new();
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv { weight, bias, cout } => {
                    let w = weight.gather(leaves);
                    let b = bias.as_ref().map(|b| b.gather(leaves));
                    let y = conv::forward(&x, &w, b.as_deref(), *cout);
                    (y, Cache::Conv { input: x })
                }
                Layer::Norm {
                    scale,
                    shift,
                    running,
                    groups,
                } => {
                    let s = scale.gather(leaves);
                    let b = shift.gather(leaves);
                    match (mode, running) {
                        (Mode::Eval, Some((rm, rv))) => {
                            let (y, c) = norm::forward_eval(&x, &s, &b, &rm.gather(leaves), &rv.gather(leaves));
                            (y, Cache::Norm(c))
                        }
                        (_, running) => {
                            let units = if running.is_some() {
                                norm::Units::PerChannel
                            } else {
                                norm::Units::PerGroup(*groups)
                            };
                            let (y, c, batch) = norm::forward_train(&x, &s, &b, units);
                            if let (Some(out), Some((rm, rv))) = (stats.as_deref_mut(), running) {
                                let m = (x.batch() * x.plane()) as f64;
                                let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                                let mom = T::c(norm::MOMENTUM);
                                let keep_w = T::one() - mom;
                                let old_m = rm.gather(leaves);
                                let old_v = rv.gather(leaves);
                                out.push(StatUpdate {
                                    target: rm.clone(),
                                    values: old_m
                                        .iter()
                                        .zip(&batch)
                                        .map(|(&o, &(mu, _))| keep_w * o + mom * mu)
                                        .collect(),
                                });
                                out.push(StatUpdate {
                                    target: rv.clone(),
                                    values: old_v
                                        .iter()
                                        .zip(&batch)
                                        .map(|(&o, &(_, var))| keep_w * o + mom * var * T::c(bessel))
                                        .collect(),
                                });
                            }
                            (y, Cache::Norm(c))
                        }
                    }
                }
                Layer::LeakyRelu => {
                    let slope = T::c(LEAKY_SLOPE);
                    let y = x.map(|v| if v > T::zero() { v } else { v * slope });
                    (y, Cache::LeakyRelu { input: x })
                }
                Layer::AvgPool2 => {
                    let shape = x.shape;
                    (avg_pool2(&x), Cache::AvgPool2 { shape })
                }
                Layer::Upsample2 => {
                    let shape = x.shape;
                    (upsample2(&x), Cache::Upsample2 { shape })
                }
                Layer::Sigmoid => {
                    let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                    let output = if keep { y.clone() } else { Tensor::zeros([0; 4]) };
                    (y, Cache::Sigmoid { output })
                }
            };
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        (x, caches)
    }

    /// Back-propagates `grad` through the stack, accumulating leaf gradients.
    pub fn backward<T: Scalar>(
        &self,
        leaves: &[Leaf<T>],
        caches: &[Cache<T>],
        mut grad: Tensor<T>,
        grads: &mut [Vec<T>],
    ) -> Tensor<T> {
        assert_eq!(caches.len(), self.layers.len(), "forward pass was run without caches");
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            grad = match (layer, cache) {
                (Layer::Conv { weight, bias, .. }, Cache::Conv { input }) => {
                    let w = weight.gather(leaves);
                    let mut gw = vec![T::zero(); w.len()];
                    let mut gb = bias.as_ref().map(|b| vec![T::zero(); b.len(leaves)]);
                    let gi = conv::backward(input, &w, &grad, &mut gw, gb.as_deref_mut());
                    weight.scatter_add(&gw, grads);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        b.scatter_add(&gb, grads);
                    }
                    gi
                }
                (Layer::Norm { scale, shift, .. }, Cache::Norm(c)) => {
                    let s = scale.gather(leaves);
                    let mut gs = vec![T::zero(); s.len()];
                    let mut gb = vec![T::zero(); s.len()];
                    let gi = norm::backward(c, &s, &grad, &mut gs, &mut gb);
                    scale.scatter_add(&gs, grads);
                    shift.scatter_add(&gb, grads);
                    gi
                }
                (Layer::LeakyRelu, Cache::LeakyRelu { input }) => {
                    let slope = T::c(LEAKY_SLOPE);
                    for (g, &v) in grad.data.iter_mut().zip(&input.data) {
                        if v <= T::zero() {
                            *g *= slope;
                        }
                    }
                    grad
                }
                (Layer::AvgPool2, Cache::AvgPool2 { shape }) => avg_pool2_backward(&grad, *shape),
                (Layer::Upsample2, Cache::Upsample2 { shape }) => upsample2_backward(&grad, *shape),
                (Layer::Sigmoid, Cache::Sigmoid { output }) => {
                    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
                        *g = *g * y * (T::one() - y);
                    }
                    grad
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        grad
    }
}

fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                dst[y * ow + xx] =
                    quarter * (src[r0 + 2 * xx] + src[r0 + 2 * xx + 1] + src[r1 + 2 * xx] + src[r1 + 2 * xx + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut out = Tensor::zeros(shape);
    for p in 0..n * c {
        let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = quarter * src[(y / 2) * ow + xx / 2];
            }
        }
    }
    out
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Scalar>(g: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros(shape);
    for p in 0..n * c {
        let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_and_upsampling_are_adjoint_up_to_scale() {
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = avg_pool2(&x);
        assert_eq!(p.shape, [1, 1, 2, 2]);
        assert_eq!(p.data, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p);
        assert_eq!(u.shape, [1, 1, 4, 4]);
        assert_eq!(u.data[5], 2.5);
        let g = upsample2_backward(&u, p.shape);
        assert_eq!(g.data, vec![10.0, 18.0, 42.0, 50.0]);
        let gp = avg_pool2_backward(&p, x.shape);
        assert_eq!(gp.data[0], 2.5 * 0.25);
    }
}
