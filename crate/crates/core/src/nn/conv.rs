//! 3×3 "same" convolution, stride 1, zero padding 1.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Valid ranges of output coordinates for a kernel offset `d` in a dimension of size `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: Option<&[T]>, cout: usize) -> Tensor<T> {
    let [n, cin, h, w] = input.shape;
    debug_assert_eq!(weight.len(), cout * cin * 9);
    let hw = h * w;
    let mut out = Tensor::zeros([n, cout, h, w]);
    for s in 0..n {
        let x = input.sample(s);
        let y = out.sample_mut(s);
        for co in 0..cout {
            let oplane = &mut y[co * hw..(co + 1) * hw];
            if let Some(b) = bias {
                oplane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..cin {
                let iplane = &x[ci * hw..(ci + 1) * hw];
                let k = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = k[ky * 3 + kx];
                        for row in y0..y1 {
                            let src_row = (row as isize + dy) as usize;
                            let src0 = (x0 as isize + dx) as usize;
                            let o = &mut oplane[row * w + x0..row * w + x1];
                            let i = &iplane[src_row * w + src0..src_row * w + src0 + (x1 - x0)];
                            for (ov, &iv) in o.iter_mut().zip(i) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient; accumulates weight and bias gradients in place.
pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
) -> Tensor<T> {
    let [n, cin, h, w] = input.shape;
    let cout = grad_out.channels();
    let hw = h * w;
    let mut grad_in = Tensor::zeros(input.shape);
    let mut gb = grad_bias;
    for s in 0..n {
        let x = input.sample(s);
        let g = grad_out.sample(s);
        let gi = grad_in.sample_mut(s);
        for co in 0..cout {
            let gplane = &g[co * hw..(co + 1) * hw];
            if let Some(b) = gb.as_deref_mut() {
                b[co] += gplane.iter().copied().sum::<T>();
            }
            for ci in 0..cin {
                let iplane = &x[ci * hw..(ci + 1) * hw];
                let giplane = &mut gi[ci * hw..(ci + 1) * hw];
                let base = (co * cin + ci) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = weight[base + ky * 3 + kx];
                        let mut acc = T::zero();
                        for row in y0..y1 {
                            let src_row = (row as isize + dy) as usize;
                            let src0 = (x0 as isize + dx) as usize;
                            let go = &gplane[row * w + x0..row * w + x1];
                            let i = &iplane[src_row * w + src0..src_row * w + src0 + (x1 - x0)];
                            let gi_row = &mut giplane[src_row * w + src0..src_row * w + src0 + (x1 - x0)];
                            for ((&gv, &iv), giv) in go.iter().zip(i).zip(gi_row.iter_mut()) {
                                acc += gv * iv;
                                *giv += wv * gv;
                            }
                        }
                        grad_weight[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor<f64>, weight: &[f64], bias: &[f64], cout: usize) -> Tensor<f64> {
        let [n, cin, h, w] = input.shape;
        let mut out = Tensor::zeros([n, cout, h, w]);
        for s in 0..n {
            for co in 0..cout {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, x + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data[((s * cin + ci) * h + sy as usize) * w + sx as usize];
                                    acc += weight[(co * cin + ci) * 9 + (ky * 3 + kx) as usize] * iv;
                                }
                            }
                        }
                        out.data[((s * cout + co) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let shape = [2, 3, 5, 4];
        let input = Tensor::from_vec(shape, (0..120).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect()).unwrap();
        let weight: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13 % 11) as f64 - 5.0) / 9.0).collect();
        let bias = [0.25, -0.5];
        let fast = forward(&input, &weight, Some(&bias), 2);
        let slow = naive(&input, &weight, &bias, 2);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> for a bias-free convolution.
        let input = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let g = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let y = forward(&input, &weight, None, 3);
        let mut gw = vec![0.0; weight.len()];
        let gi = backward(&input, &weight, &g, &mut gw, None);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = input.data.iter().zip(&gi.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let via_w: f64 = weight.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
