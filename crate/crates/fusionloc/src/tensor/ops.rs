//! Elementwise, linear-algebra, reduction and indexing operations.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Zip};

use super::{Graph, Scalar, Var};

impl<T: Scalar> Graph<T> {
    /// Elementwise sum of two same-shape nodes.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av + bv));
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    /// `a - b` elementwise.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av - bv));
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.with_value(a, |av| self.with_value(b, |bv| av * bv));
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, parents, _| vec![g * parents[1], g * parents[0]])),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.with_value(a, |av| av.mapv(|x| x * c));
        self.push(v, vec![a.0], Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * c)])))
    }

    /// Add a bias vector to every row of a 2-d node.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let v = self.with_value(x, |xv| {
            self.with_value(bias, |bv| {
                let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
                let mut out = xv.clone();
                for mut row in out.view_mut().into_dimensionality::<Ix2>().expect("x must be 2-d").rows_mut() {
                    row += &b1;
                }
                out
            })
        });
        self.push(
            v,
            vec![x.0, bias.0],
            Some(Box::new(|g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Matrix product of two 2-d nodes.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.with_value(a, |av| {
            self.with_value(b, |bv| {
                let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
                let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
                a2.dot(&b2).into_dyn()
            })
        });
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let a2 = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Matrix-vector product: `a (M,K) . x (K) -> (M)`.
    pub fn matvec(&self, a: Var, x: Var) -> Var {
        let v = self.with_value(a, |av| {
            self.with_value(x, |xv| {
                let a2 = av.view().into_dimensionality::<Ix2>().expect("matvec lhs must be 2-d");
                let x1 = xv.view().into_dimensionality::<Ix1>().expect("matvec rhs must be 1-d");
                a2.dot(&x1).into_dyn()
            })
        });
        self.push(
            v,
            vec![a.0, x.0],
            Some(Box::new(|g, parents, _| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let a2 = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let x1 = parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let mut ga = Array2::<T>::zeros((a2.nrows(), a2.ncols()));
                for (i, gi) in g1.iter().enumerate() {
                    for (j, xj) in x1.iter().enumerate() {
                        ga[[i, j]] = *gi * *xj;
                    }
                }
                vec![ga.into_dyn(), a2.t().dot(&g1).into_dyn()]
            })),
        )
    }

    /// Outer product of two 1-d nodes: `u (M) x v (N) -> (M,N)`.
    pub fn outer(&self, u: Var, v: Var) -> Var {
        let val = self.with_value(u, |uv| {
            self.with_value(v, |vv| {
                let u1 = uv.view().into_dimensionality::<Ix1>().expect("outer lhs must be 1-d");
                let v1 = vv.view().into_dimensionality::<Ix1>().expect("outer rhs must be 1-d");
                let mut out = Array2::<T>::zeros((u1.len(), v1.len()));
                for (i, &ui) in u1.iter().enumerate() {
                    for (j, &vj) in v1.iter().enumerate() {
                        out[[i, j]] = ui * vj;
                    }
                }
                out.into_dyn()
            })
        });
        self.push(
            val,
            vec![u.0, v.0],
            Some(Box::new(|g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let u1 = parents[0].view().into_dimensionality::<Ix1>().unwrap();
                let v1 = parents[1].view().into_dimensionality::<Ix1>().unwrap();
                vec![g2.dot(&v1).into_dyn(), g2.t().dot(&u1).into_dyn()]
            })),
        )
    }

    /// Batched outer product: `u (N,P) x v (N,Q) -> (N,P,Q)`.
    pub fn outer_batch(&self, u: Var, v: Var) -> Var {
        let val = self.with_value(u, |uv| {
            self.with_value(v, |vv| {
                let u2 = uv.view().into_dimensionality::<Ix2>().expect("outer_batch lhs 2-d");
                let v2 = vv.view().into_dimensionality::<Ix2>().expect("outer_batch rhs 2-d");
                let (n, p) = u2.dim();
                let q = v2.ncols();
                let mut out = ArrayD::<T>::zeros(IxDyn(&[n, p, q]));
                for b in 0..n {
                    for i in 0..p {
                        for j in 0..q {
                            out[[b, i, j]] = u2[[b, i]] * v2[[b, j]];
                        }
                    }
                }
                out
            })
        });
        self.push(
            val,
            vec![u.0, v.0],
            Some(Box::new(|g, parents, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let u2 = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let v2 = parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let (n, p) = u2.dim();
                let q = v2.ncols();
                let mut gu = Array2::<T>::zeros((n, p));
                let mut gv = Array2::<T>::zeros((n, q));
                for b in 0..n {
                    for i in 0..p {
                        for j in 0..q {
                            gu[[b, i]] = gu[[b, i]] + g3[[b, i, j]] * v2[[b, j]];
                            gv[[b, j]] = gv[[b, j]] + g3[[b, i, j]] * u2[[b, i]];
                        }
                    }
                }
                vec![gu.into_dyn(), gv.into_dyn()]
            })),
        )
    }

    /// Batched matrix-vector product: `w (N,P,Q) . v (N,Q) -> (N,P)`.
    pub fn bmv(&self, w: Var, v: Var) -> Var {
        let val = self.with_value(w, |wv| {
            self.with_value(v, |vv| {
                let w3 = wv.view().into_dimensionality::<Ix3>().expect("bmv lhs 3-d");
                let v2 = vv.view().into_dimensionality::<Ix2>().expect("bmv rhs 2-d");
                let (n, p, q) = w3.dim();
                let mut out = Array2::<T>::zeros((n, p));
                for b in 0..n {
                    for i in 0..p {
                        let mut acc = T::zero();
                        for j in 0..q {
                            acc = acc + w3[[b, i, j]] * v2[[b, j]];
                        }
                        out[[b, i]] = acc;
                    }
                }
                out.into_dyn()
            })
        });
        self.push(
            val,
            vec![w.0, v.0],
            Some(Box::new(|g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let w3 = parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let v2 = parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let (n, p, q) = w3.dim();
                let mut gw = ArrayD::<T>::zeros(IxDyn(&[n, p, q]));
                let mut gv = Array2::<T>::zeros((n, q));
                for b in 0..n {
                    for i in 0..p {
                        for j in 0..q {
                            gw[[b, i, j]] = g2[[b, i]] * v2[[b, j]];
                            gv[[b, j]] = gv[[b, j]] + w3[[b, i, j]] * g2[[b, i]];
                        }
                    }
                }
                vec![gw, gv.into_dyn()]
            })),
        )
    }

    /// Rectified linear unit. The subgradient at zero is zero.
    pub fn relu(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| xv.mapv(|a| if a > T::zero() { a } else { T::zero() }));
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, parents, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(parents[0]).for_each(|gi, &xi| {
                    if xi <= T::zero() {
                        *gi = T::zero();
                    }
                });
                vec![gx]
            })),
        )
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| xv.mapv(|a| T::one() / (T::one() + (-a).exp())));
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, _, out| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(out).for_each(|gi, &yi| {
                    *gi = *gi * yi * (T::one() - yi);
                });
                vec![gx]
            })),
        )
    }

    /// Elementwise exponential.
    pub fn exp(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| xv.mapv(|a| a.exp()));
        self.push(v, vec![x.0], Some(Box::new(|g, _, out| vec![g * out])))
    }

    /// Elementwise absolute value. The subgradient at zero is zero.
    pub fn abs(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| xv.mapv(|a| a.abs()));
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, parents, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(parents[0]).for_each(|gi, &xi| {
                    *gi = if xi > T::zero() {
                        *gi
                    } else if xi < T::zero() {
                        -*gi
                    } else {
                        T::zero()
                    };
                });
                vec![gx]
            })),
        )
    }

    /// Sum of all elements, yielding a 0-d node.
    pub fn sum_all(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| ArrayD::from_elem(IxDyn(&[]), xv.sum()));
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, parents, _| {
                let gs = *g.iter().next().expect("scalar grad");
                vec![ArrayD::from_elem(parents[0].raw_dim(), gs)]
            })),
        )
    }

    /// Mean of all elements, yielding a 0-d node.
    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.with_value(x, |xv| xv.len());
        let s = self.sum_all(x);
        self.scale(s, T::of_f64(1.0 / n as f64))
    }

    /// Softmax over the last axis, computed with the max-subtraction trick.
    pub fn softmax_last(&self, x: Var) -> Var {
        let v = self.with_value(x, |xv| {
            let mut out = xv.clone();
            let last = out.ndim() - 1;
            for mut lane in out.lanes_mut(Axis(last)) {
                let mx = lane.iter().cloned().fold(T::neg_infinity(), T::max);
                lane.mapv_inplace(|a| (a - mx).exp());
                let s = lane.sum();
                lane.mapv_inplace(|a| a / s);
            }
            out
        });
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, _, out| {
                // dx = y * (g - sum(g * y)) per lane
                let mut gx = g.clone();
                let last = gx.ndim() - 1;
                Zip::from(gx.lanes_mut(Axis(last)))
                    .and(out.lanes(Axis(last)))
                    .for_each(|mut glane, ylane| {
                        let dot = glane
                            .iter()
                            .zip(ylane.iter())
                            .fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        Zip::from(&mut glane).and(&ylane).for_each(|gi, &yi| {
                            *gi = yi * (*gi - dot);
                        });
                    });
                vec![gx]
            })),
        )
    }

    /// Concatenate nodes along `axis`.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let (value, sizes) = {
            let views: Vec<ArrayD<T>> = parts.iter().map(|&p| self.value(p)).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (ndarray::concatenate(Axis(axis), &view_refs).expect("concat shapes"), sizes)
        };
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &sz in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .to_owned();
                    out.push(piece);
                    start += sz;
                }
                out
            })),
        )
    }

    /// Contiguous slice `[start, end)` along `axis`; the backward pass
    /// scatters into zeros.
    pub fn slice_axis_op(&self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self.with_value(x, |xv| {
            xv.slice_axis(Axis(axis), ndarray::Slice::from(start..end)).to_owned()
        });
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |g, parents, _| {
                let mut gx = ArrayD::zeros(parents[0].raw_dim());
                gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end)).assign(g);
                vec![gx]
            })),
        )
    }

    /// Reshape preserving element count.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let shape_vec = shape.to_vec();
        let v = self.with_value(x, |xv| {
            xv.clone()
                .into_shape_with_order(IxDyn(&shape_vec))
                .expect("reshape must preserve element count")
        });
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|g, parents, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(parents[0].raw_dim())
                    .expect("reshape grad")]
            })),
        )
    }

    /// Select rows of a 2-d node by index, with repetition allowed; the
    /// backward pass scatter-adds into the source rows.
    pub fn gather_rows(&self, x: Var, indices: Vec<usize>) -> Var {
        let v = self.with_value(x, |xv| {
            let x2 = xv.view().into_dimensionality::<Ix2>().expect("gather_rows needs 2-d");
            let mut out = Array2::<T>::zeros((indices.len(), x2.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).assign(&x2.row(i));
            }
            out.into_dyn()
        });
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let src = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<T>::zeros((src.nrows(), src.ncols()));
                for (r, &i) in indices.iter().enumerate() {
                    let mut dst = gx.row_mut(i);
                    dst += &g2.row(r);
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Maximum over `axis`, breaking ties toward the lowest index so training
    /// is deterministic; the backward pass routes gradient to the argmax.
    pub fn max_axis(&self, x: Var, axis: usize) -> Var {
        let (value, argmax) = self.with_value(x, |xv| {
            let reduced_shape: Vec<usize> = xv
                .shape()
                .iter()
                .enumerate()
                .filter_map(|(i, &s)| (i != axis).then_some(s))
                .collect();
            let mut value = ArrayD::<T>::from_elem(IxDyn(&reduced_shape), T::neg_infinity());
            let mut argmax = ArrayD::<usize>::zeros(IxDyn(&reduced_shape));
            for (k, lane) in xv.lanes(Axis(axis)).into_iter().enumerate() {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for (i, &v) in lane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                value.as_slice_mut().unwrap()[k] = best;
                argmax.as_slice_mut().unwrap()[k] = best_i;
            }
            (value, argmax)
        });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, parents, _| {
                let mut gx = ArrayD::<T>::zeros(parents[0].raw_dim());
                let gflat = g.as_slice().expect("contiguous grad");
                for (k, mut lane) in gx.lanes_mut(Axis(axis)).into_iter().enumerate() {
                    let i = argmax.as_slice().unwrap()[k];
                    lane[i] = gflat[k];
                }
                vec![gx]
            })),
        )
    }

    /// Stack 1-d nodes into a 2-d node, one row each.
    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        let reshaped: Vec<Var> = rows
            .iter()
            .map(|&r| {
                let len = self.with_value(r, |v| v.len());
                self.reshape(r, &[1, len])
            })
            .collect();
        self.concat(&reshaped, 0)
    }

    /// Dropout with keep-probability `1 - p`; scales kept activations by
    /// `1/(1-p)` so eval needs no rescaling. The mask is supplied by the
    /// caller so randomness stays outside the graph.
    pub fn dropout_with_mask(&self, x: Var, mask: ArrayD<T>, p: f64) -> Var {
        let keep = T::of_f64(1.0 / (1.0 - p));
        let scaled = mask.mapv(|m| m * keep);
        let m = self.leaf(scaled);
        self.mul(x, m)
    }

    /// L1 distance between two same-shape nodes.
    pub fn l1_distance(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.sum_all(ad)
    }

    /// Convenience: 1-d constant node.
    pub fn vector(&self, data: &[T]) -> Var {
        self.leaf(Array1::from(data.to_vec()).into_dyn())
    }
}
