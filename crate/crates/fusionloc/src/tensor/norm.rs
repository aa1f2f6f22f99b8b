//! Batch and layer normalization graph ops.
//!
//! Batch norm normalizes each channel over the batch (and spatial dims for
//! NCHW inputs); layer norm normalizes each sample over its features. Both
//! carry learnable affine parameters.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4};

use super::{Graph, Scalar, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance of a 2-d `(N,C)` or 4-d `(N,C,H,W)`
/// array, reducing over every axis except the channel axis 1.
pub fn batch_moments<T: Scalar>(x: &ArrayD<T>) -> (Vec<T>, Vec<T>) {
    let c = x.shape()[1];
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let count = T::of_f64((x.len() / c) as f64);
    match x.ndim() {
        2 => {
            let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
            for j in 0..c {
                let col = x2.column(j);
                let m = col.sum() / count;
                mean[j] = m;
                var[j] = col.fold(T::zero(), |acc, &v| acc + (v - m) * (v - m)) / count;
            }
        }
        4 => {
            let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
            for j in 0..c {
                let ch = x4.index_axis(Axis(1), j);
                let m = ch.sum() / count;
                mean[j] = m;
                var[j] = ch.fold(T::zero(), |acc, &v| acc + (v - m) * (v - m)) / count;
            }
        }
        n => panic!("batch_moments supports 2-d or 4-d inputs, got {n}-d"),
    }
    (mean, var)
}

fn per_channel_apply<T: Scalar>(
    x: &ArrayD<T>,
    f: impl Fn(usize, T) -> T,
) -> ArrayD<T> {
    let mut out = x.clone();
    match out.ndim() {
        2 => {
            let mut o2 = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (j, mut col) in o2.columns_mut().into_iter().enumerate() {
                col.mapv_inplace(|v| f(j, v));
            }
        }
        4 => {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for (j, mut ch) in o4.axis_iter_mut(Axis(1)).enumerate() {
                ch.mapv_inplace(|v| f(j, v));
            }
        }
        n => panic!("per-channel op supports 2-d or 4-d inputs, got {n}-d"),
    }
    out
}

fn per_channel_reduce<T: Scalar>(g: &ArrayD<T>, weight: &ArrayD<T>) -> Vec<T> {
    // sum over all non-channel axes of g * weight
    let c = g.shape()[1];
    let mut out = vec![T::zero(); c];
    match g.ndim() {
        2 => {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = weight.view().into_dimensionality::<Ix2>().unwrap();
            for j in 0..c {
                out[j] = g2
                    .column(j)
                    .iter()
                    .zip(w2.column(j).iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        4 => {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let w4 = weight.view().into_dimensionality::<Ix4>().unwrap();
            for j in 0..c {
                out[j] = g4
                    .index_axis(Axis(1), j)
                    .iter()
                    .zip(w4.index_axis(Axis(1), j).iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        _ => unreachable!(),
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Batch norm in training mode: normalize with the batch statistics.
    /// Gradients flow through the statistics. Returns the output node; the
    /// caller is responsible for updating any running statistics from
    /// [`batch_moments`].
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of_f64(NORM_EPS);
        let (value, xhat, invstd) = self.with_value(x, |xv| {
            self.with_value(gamma, |gv| {
                self.with_value(beta, |bv| {
                    let (mean, var) = batch_moments(xv);
                    let invstd: Vec<T> =
                        var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    let xhat = per_channel_apply(xv, |j, v| (v - mean[j]) * invstd[j]);
                    let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                    let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
                    let out = per_channel_apply(&xhat, |j, v| v * g1[j] + b1[j]);
                    (out, xhat, invstd)
                })
            })
        });
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, parents, _| {
                let c = g.shape()[1];
                let m = T::of_f64((g.len() / c) as f64);
                let gamma1 = parents[1].view().into_dimensionality::<Ix1>().unwrap();
                // dgamma_j = sum(g * xhat) over channel j; dbeta_j = sum(g)
                let dgamma = per_channel_reduce(g, &xhat);
                let ones = ArrayD::from_elem(g.raw_dim(), T::one());
                let dbeta = per_channel_reduce(g, &ones);
                // dx = gamma*invstd/m * (m*g - dbeta - xhat * dgamma)
                let mut tmp = g.mapv(|v| v * m);
                match tmp.ndim() {
                    2 => {
                        let mut t2 = tmp.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let x2 = xhat.view().into_dimensionality::<Ix2>().unwrap();
                        for (j, mut col) in t2.columns_mut().into_iter().enumerate() {
                            for (i, cell) in col.iter_mut().enumerate() {
                                *cell = *cell - dbeta[j] - x2[[i, j]] * dgamma[j];
                            }
                        }
                    }
                    4 => {
                        let mut t4 = tmp.view_mut().into_dimensionality::<Ix4>().unwrap();
                        let x4 = xhat.view().into_dimensionality::<Ix4>().unwrap();
                        let (n, cc, hh, ww) = t4.dim();
                        for j in 0..cc {
                            for b in 0..n {
                                for i in 0..hh {
                                    for k in 0..ww {
                                        t4[[b, j, i, k]] = t4[[b, j, i, k]]
                                            - dbeta[j]
                                            - x4[[b, j, i, k]] * dgamma[j];
                                    }
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                let gx = per_channel_apply(&tmp, |j, v| v * gamma1[j] * invstd[j] / m);
                vec![
                    gx,
                    ndarray::Array1::from(dgamma).into_dyn(),
                    ndarray::Array1::from(dbeta).into_dyn(),
                ]
            })),
        )
    }

    /// Batch norm in eval mode: normalize with frozen running statistics,
    /// which are treated as constants.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Var {
        let eps = T::of_f64(NORM_EPS);
        let invstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (value, xhat) = self.with_value(x, |xv| {
            self.with_value(gamma, |gv| {
                self.with_value(beta, |bv| {
                    let xhat = per_channel_apply(xv, |j, v| (v - mean[j]) * invstd[j]);
                    let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                    let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
                    let out = per_channel_apply(&xhat, |j, v| v * g1[j] + b1[j]);
                    (out, xhat)
                })
            })
        });
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, parents, _| {
                let gamma1 = parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let dgamma = per_channel_reduce(g, &xhat);
                let ones = ArrayD::from_elem(g.raw_dim(), T::one());
                let dbeta = per_channel_reduce(g, &ones);
                let invstd = invstd.clone();
                let gx = per_channel_apply(g, |j, v| v * gamma1[j] * invstd[j]);
                vec![
                    gx,
                    ndarray::Array1::from(dgamma).into_dyn(),
                    ndarray::Array1::from(dbeta).into_dyn(),
                ]
            })),
        )
    }

    /// Layer norm over the last axis of a 2-d `(N,D)` node with affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of_f64(NORM_EPS);
        let (value, xhat, invstd) = self.with_value(x, |xv| {
            self.with_value(gamma, |gv| {
                self.with_value(beta, |bv| {
                    let x2 = xv.view().into_dimensionality::<Ix2>().expect("layer_norm needs (N,D)");
                    let (n, d) = x2.dim();
                    let dn = T::of_f64(d as f64);
                    let mut xhat = ndarray::Array2::<T>::zeros((n, d));
                    let mut invstd = vec![T::zero(); n];
                    for i in 0..n {
                        let row = x2.row(i);
                        let m = row.sum() / dn;
                        let v = row.fold(T::zero(), |acc, &a| acc + (a - m) * (a - m)) / dn;
                        let is = T::one() / (v + eps).sqrt();
                        invstd[i] = is;
                        for j in 0..d {
                            xhat[[i, j]] = (x2[[i, j]] - m) * is;
                        }
                    }
                    let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                    let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
                    let mut out = xhat.clone();
                    for mut row in out.rows_mut() {
                        for (j, cell) in row.iter_mut().enumerate() {
                            *cell = *cell * g1[j] + b1[j];
                        }
                    }
                    (out.into_dyn(), xhat.into_dyn(), invstd)
                })
            })
        });
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = xhat.view().into_dimensionality::<Ix2>().unwrap();
                let gamma1 = parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let (n, d) = g2.dim();
                let dn = T::of_f64(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut gx = ndarray::Array2::<T>::zeros((n, d));
                for i in 0..n {
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for j in 0..d {
                        let gy = g2[[i, j]] * gamma1[j];
                        sum_gy = sum_gy + gy;
                        sum_gy_xhat = sum_gy_xhat + gy * x2[[i, j]];
                        dgamma[j] = dgamma[j] + g2[[i, j]] * x2[[i, j]];
                        dbeta[j] = dbeta[j] + g2[[i, j]];
                    }
                    for j in 0..d {
                        let gy = g2[[i, j]] * gamma1[j];
                        gx[[i, j]] =
                            invstd[i] * (gy - (sum_gy + x2[[i, j]] * sum_gy_xhat) / dn);
                    }
                }
                vec![
                    gx.into_dyn(),
                    ndarray::Array1::from(dgamma).into_dyn(),
                    ndarray::Array1::from(dbeta).into_dyn(),
                ]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{finite_difference, max_rel_err};
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
    }

    // The probe loss multiplies by a fixed random array before squaring;
    // plain sum(y^2) is nearly invariant to x through batch norm and makes
    // finite differences cancel to noise.
    fn bn_train_loss(x: &ArrayD<f64>, gm: &ArrayD<f64>, bt: &ArrayD<f64>, w: &ArrayD<f64>) -> f64 {
        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x.clone());
        let vg = g.leaf(gm.clone());
        let vb = g.leaf(bt.clone());
        let vw = g.leaf(w.clone());
        let y = g.batch_norm_train(vx, vg, vb);
        let yw = g.mul(y, vw);
        let y2 = g.mul(yw, yw);
        g.scalar_value(g.sum_all(y2))
    }

    #[test]
    fn batch_norm_train_gradients_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_arr(&[5, 3], &mut rng);
        let gm0 = rand_arr(&[3], &mut rng);
        let bt0 = rand_arr(&[3], &mut rng);
        let w0 = rand_arr(&[5, 3], &mut rng);

        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x0.clone());
        let vg = g.leaf(gm0.clone());
        let vb = g.leaf(bt0.clone());
        let vw = g.leaf(w0.clone());
        let y = g.batch_norm_train(vx, vg, vb);
        let yw = g.mul(y, vw);
        let y2 = g.mul(yw, yw);
        let loss = g.sum_all(y2);
        let grads = g.backward(loss);

        let fd_x = finite_difference(&x0, 1e-6, |x| bn_train_loss(x, &gm0, &bt0, &w0));
        let fd_g = finite_difference(&gm0, 1e-6, |gm| bn_train_loss(&x0, gm, &bt0, &w0));
        let fd_b = finite_difference(&bt0, 1e-6, |bt| bn_train_loss(&x0, &gm0, bt, &w0));
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd_x) < 1e-5);
        assert!(max_rel_err(grads.get(vg).unwrap(), &fd_g) < 1e-6);
        assert!(max_rel_err(grads.get(vb).unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn batch_norm_train_gradients_4d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[2, 2, 3, 3], &mut rng);
        let gm0 = rand_arr(&[2], &mut rng);
        let bt0 = rand_arr(&[2], &mut rng);
        let w0 = rand_arr(&[2, 2, 3, 3], &mut rng);

        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x0.clone());
        let vg = g.leaf(gm0.clone());
        let vb = g.leaf(bt0.clone());
        let vw = g.leaf(w0.clone());
        let y = g.batch_norm_train(vx, vg, vb);
        let yw = g.mul(y, vw);
        let y2 = g.mul(yw, yw);
        let loss = g.sum_all(y2);
        let grads = g.backward(loss);

        let fd_x = finite_difference(&x0, 1e-6, |x| bn_train_loss(x, &gm0, &bt0, &w0));
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd_x) < 1e-5);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(ndarray::arr2(&[[1.0, 10.0], [3.0, 30.0]]).into_dyn());
        let gm = g.vector(&[1.0, 1.0]);
        let bt = g.vector(&[0.0, 0.0]);
        let y = g.batch_norm_eval(x, gm, bt, &[2.0, 20.0], &[1.0, 100.0]);
        let yv = g.value(y);
        let e = (1.0_f64 + NORM_EPS).sqrt();
        assert!((yv[[0, 0]] - (1.0 - 2.0) / e).abs() < 1e-12);
        let e2 = (100.0_f64 + NORM_EPS).sqrt();
        assert!((yv[[1, 1]] - (30.0 - 20.0) / e2).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_arr(&[4, 6], &mut rng);
        let gm0 = rand_arr(&[6], &mut rng);
        let bt0 = rand_arr(&[6], &mut rng);

        let eval = |x: &ArrayD<f64>, gm: &ArrayD<f64>, bt: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let vx = g.leaf(x.clone());
            let vg = g.leaf(gm.clone());
            let vb = g.leaf(bt.clone());
            let y = g.layer_norm(vx, vg, vb);
            let y2 = g.mul(y, y);
            g.scalar_value(g.sum_all(y2))
        };

        let g: Graph<f64> = Graph::new();
        let vx = g.leaf(x0.clone());
        let vg = g.leaf(gm0.clone());
        let vb = g.leaf(bt0.clone());
        let y = g.layer_norm(vx, vg, vb);
        let y2 = g.mul(y, y);
        let loss = g.sum_all(y2);
        let grads = g.backward(loss);

        let fd_x = finite_difference(&x0, 1e-6, |x| eval(x, &gm0, &bt0));
        let fd_g = finite_difference(&gm0, 1e-6, |gm| eval(&x0, gm, &bt0));
        let fd_b = finite_difference(&bt0, 1e-6, |bt| eval(&x0, &gm0, bt));
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd_x) < 1e-5);
        assert!(max_rel_err(grads.get(vg).unwrap(), &fd_g) < 1e-6);
        assert!(max_rel_err(grads.get(vb).unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn moments_match_hand_values() {
        let x = ndarray::arr2(&[[1.0, 2.0], [3.0, 6.0]]).into_dyn();
        let (m, v) = batch_moments(&x);
        assert_eq!(m, vec![2.0, 4.0]);
        assert_eq!(v, vec![1.0, 4.0]);
    }
}
