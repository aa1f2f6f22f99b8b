//! 2-d convolution, pooling and global pooling for NCHW tensors.
//!
//! Convolution is im2col + GEMM; the backward pass reuses the column buffers
//! via col2im. Good enough for desk-scale training on a CPU.

use ndarray::{Array2, Array4, Ix4};

use super::{Graph, Scalar, Var};

/// Static shape description of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output spatial size of a square-kernel convolution.
pub fn conv2d_output_hw(hw: (usize, usize), kernel: usize, stride: usize, padding: usize) -> (usize, usize) {
    let h = (hw.0 + 2 * padding - kernel) / stride + 1;
    let w = (hw.1 + 2 * padding - kernel) / stride + 1;
    (h, w)
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayView4<T>,
    n: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = (spec.in_channels, x.dim().2, x.dim().3);
    let k = spec.kernel;
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    let img = x.index_axis(ndarray::Axis(0), n);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = img[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &Array2<T>,
    spec: Conv2dSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let (c, k) = (spec.in_channels, spec.kernel);
    let mut img = ndarray::Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] =
                            img[[ci, ii as usize, jj as usize]] + cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    img
}

impl<T: Scalar> Graph<T> {
    /// Convolution of `x (N,Cin,H,W)` with `w (Cout,Cin,k,k)`, no bias.
    pub fn conv2d(&self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let value = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv input must be NCHW");
                let (n, cin, h, wdt) = x4.dim();
                assert_eq!(cin, spec.in_channels, "conv2d channel mismatch");
                let (oh, ow) = conv2d_output_hw((h, wdt), spec.kernel, spec.stride, spec.padding);
                let wm = wv
                    .view()
                    .into_shape_with_order((spec.out_channels, spec.in_channels * spec.kernel * spec.kernel))
                    .expect("conv weight shape");
                let mut out = Array4::<T>::zeros((n, spec.out_channels, oh, ow));
                for b in 0..n {
                    let cols = im2col(&x4, b, spec, oh, ow);
                    let res = wm.dot(&cols); // (Cout, oh*ow)
                    let res4 = res
                        .into_shape_with_order((spec.out_channels, oh, ow))
                        .expect("conv result shape");
                    out.index_axis_mut(ndarray::Axis(0), b).assign(&res4);
                }
                out.into_dyn()
            })
        });
        self.push(
            value,
            vec![x.0, w.0],
            Some(Box::new(move |g, parents, _| {
                let x4 = parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, _, h, wdt) = x4.dim();
                let (_, _, oh, ow) = g4.dim();
                let wm = parents[1]
                    .view()
                    .into_shape_with_order((spec.out_channels, spec.in_channels * spec.kernel * spec.kernel))
                    .unwrap();
                let mut gx = Array4::<T>::zeros(x4.dim());
                let mut gw = Array2::<T>::zeros((spec.out_channels, spec.in_channels * spec.kernel * spec.kernel));
                for b in 0..n {
                    let gout = g4
                        .index_axis(ndarray::Axis(0), b)
                        .into_shape_with_order((spec.out_channels, oh * ow))
                        .unwrap()
                        .to_owned();
                    // dW += gout . cols^T ; dcols = W^T . gout
                    let cols = im2col(&x4, b, spec, oh, ow);
                    gw = gw + gout.dot(&cols.t());
                    let gcols = wm.t().dot(&gout);
                    let gimg = col2im(&gcols, spec, h, wdt, oh, ow);
                    gx.index_axis_mut(ndarray::Axis(0), b).assign(&gimg);
                }
                let gw4 = gw
                    .into_shape_with_order((spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
                    .unwrap();
                vec![gx.into_dyn(), gw4.into_dyn()]
            })),
        )
    }

    /// Max pooling over square windows; ties break toward the first element
    /// in row-major window order.
    pub fn maxpool2d(&self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let (value, argmax) = self.with_value(x, |xv| {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("pool input must be NCHW");
            let (n, c, h, w) = x4.dim();
            let (oh, ow) = conv2d_output_hw((h, w), kernel, stride, padding);
            let mut out = Array4::<T>::zeros((n, c, oh, ow));
            let mut arg = ndarray::Array4::<(usize, usize)>::from_elem((n, c, oh, ow), (0, 0));
            for b in 0..n {
                for ci in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_idx = (0usize, 0usize);
                            for ki in 0..kernel {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..kernel {
                                    let jj = (oj * stride + kj) as isize - padding as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let v = x4[[b, ci, ii as usize, jj as usize]];
                                    if v > best {
                                        best = v;
                                        best_idx = (ii as usize, jj as usize);
                                    }
                                }
                            }
                            out[[b, ci, oi, oj]] = best;
                            arg[[b, ci, oi, oj]] = best_idx;
                        }
                    }
                }
            }
            (out.into_dyn(), arg)
        });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, parents, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, oh, ow) = g4.dim();
                let mut gx = Array4::<T>::zeros(
                    parents[0].view().into_dimensionality::<Ix4>().unwrap().dim(),
                );
                for b in 0..n {
                    for ci in 0..c {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let (ii, jj) = argmax[[b, ci, oi, oj]];
                                gx[[b, ci, ii, jj]] = gx[[b, ci, ii, jj]] + g4[[b, ci, oi, oj]];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Global average pool: `(N,C,H,W) -> (N,C)`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let value = self.with_value(x, |xv| {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("pool input must be NCHW");
            let (n, c, h, w) = x4.dim();
            let inv = T::of_f64(1.0 / (h * w) as f64);
            let mut out = Array2::<T>::zeros((n, c));
            for b in 0..n {
                for ci in 0..c {
                    let mut acc = T::zero();
                    for i in 0..h {
                        for j in 0..w {
                            acc = acc + x4[[b, ci, i, j]];
                        }
                    }
                    out[[b, ci]] = acc * inv;
                }
            }
            out.into_dyn()
        });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, parents, _| {
                let x4 = parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x4.dim();
                let inv = T::of_f64(1.0 / (h * w) as f64);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gx = Array4::<T>::zeros((n, c, h, w));
                for b in 0..n {
                    for ci in 0..c {
                        let gv = g2[[b, ci]] * inv;
                        for i in 0..h {
                            for j in 0..w {
                                gx[[b, ci, i, j]] = gv;
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{finite_difference, max_rel_err};
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, 2x2 kernel, stride 1, no padding: hand-check.
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(
            ndarray::arr3(&[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]])
                .insert_axis(ndarray::Axis(0))
                .into_dyn(),
        );
        let w = g.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, -1.0]).unwrap());
        let spec = Conv2dSpec { in_channels: 1, out_channels: 1, kernel: 2, stride: 1, padding: 0 };
        let y = g.conv2d(x, w, spec);
        let yv = g.value(y);
        // each output = x[i,j] - x[i+1,j+1]
        assert_eq!(yv.shape(), &[1, 1, 2, 2]);
        assert_eq!(yv[[0, 0, 0, 0]], 1.0 - 5.0);
        assert_eq!(yv[[0, 0, 1, 1]], 5.0 - 9.0);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = rand_arr(&[2, 2, 5, 5], &mut rng);
        let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
        let spec = Conv2dSpec { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1 };

        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let vx = g.leaf(x.clone());
            let vw = g.leaf(w.clone());
            let y = g.conv2d(vx, vw, spec);
            let y2 = g.mul(y, y);
            g.scalar_value(g.sum_all(y2))
        };

        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x0.clone());
        let vw = g.leaf(w0.clone());
        let y = g.conv2d(vx, vw, spec);
        let y2 = g.mul(y, y);
        let loss = g.sum_all(y2);
        let grads = g.backward(loss);

        let fd_x = finite_difference(&x0, 1e-6, |x| eval(x, &w0));
        let fd_w = finite_difference(&w0, 1e-6, |w| eval(&x0, w));
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(grads.get(vw).unwrap(), &fd_w) < 1e-6);
    }

    #[test]
    fn maxpool_and_gap_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_arr(&[1, 2, 6, 6], &mut rng);

        let eval = |x: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let vx = g.leaf(x.clone());
            let p = g.maxpool2d(vx, 3, 2, 1);
            let a = g.global_avg_pool(p);
            let sq = g.mul(a, a);
            g.scalar_value(g.sum_all(sq))
        };

        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x0.clone());
        let p = g.maxpool2d(vx, 3, 2, 1);
        let a = g.global_avg_pool(p);
        let sq = g.mul(a, a);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);

        let fd = finite_difference(&x0, 1e-6, eval);
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn output_hw_arithmetic() {
        assert_eq!(conv2d_output_hw((256, 256), 7, 2, 3), (128, 128));
        assert_eq!(conv2d_output_hw((128, 128), 3, 2, 1), (64, 64));
        assert_eq!(conv2d_output_hw((64, 64), 3, 1, 1), (64, 64));
    }
}
