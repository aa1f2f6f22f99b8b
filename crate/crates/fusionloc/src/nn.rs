//! Parameter storage, layer wrappers, and weight initialization.
//!
//! Parameters live in a [`ParamStore`] keyed by name; layers hold [`ParamId`]
//! handles and bind their current values into a fresh [`Graph`] each forward
//! pass. Batch-norm running statistics are stored as non-trainable buffers.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Conv2dSpec, Graph, Scalar, Var};

/// Handle to one parameter or buffer in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Forward-pass mode: training carries an rng for dropout and sampling
/// decisions; eval is fully deterministic.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer and subject to weight decay.
    Weight,
    /// Trained by the optimizer but exempt from weight decay
    /// (loss-balance scalars and normalization affine parameters).
    NoDecay,
    /// Not trained: running statistics and similar state.
    Buffer,
}

pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub kind: ParamKind,
}

/// Flat, insertion-ordered parameter store.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Bind every parameter into `graph` as a leaf; index by `ParamId`.
    pub fn bind_all(&self, graph: &Graph<T>) -> Bindings {
        Bindings { vars: self.entries.iter().map(|e| graph.leaf(e.value.clone())).collect() }
    }
}

/// Graph leaves for every parameter, produced by [`ParamStore::bind_all`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().copied()
    }
}

/// Kaiming-uniform fan-in initialization, the convnet default.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::of_f64(rng.gen_range(-bound..bound)))
}

/// Uniform bias initialization matched to the layer fan-in.
pub fn bias_uniform<T: Scalar>(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let bound = if fan_in > 0 { 1.0 / (fan_in as f64).sqrt() } else { 0.0 };
    ArrayD::from_shape_fn(IxDyn(&[len]), |_| T::of_f64(rng.gen_range(-bound..bound)))
}

/// Fully connected layer `y = x W + b`, weight stored `(in, out)`.
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_features, out_features], in_features, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), bias_uniform(out_features, in_features, rng), ParamKind::Weight)
        });
        Self { weight, bias, in_features, out_features }
    }

    /// Forward on a 2-d `(N, in)` node, producing `(N, out)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Var {
        let y = g.matmul(x, b.var(self.weight));
        match self.bias {
            Some(bias) => g.add_bias(y, b.var(bias)),
            None => y,
        }
    }
}

/// Transpose a 2-d node (as a differentiable op).
pub fn transpose2<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let v = g.with_value(x, |xv| {
        xv.view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("transpose2 needs a 2-d node")
            .t()
            .to_owned()
            .into_dyn()
    });
    g.push(
        v,
        vec![x.0],
        Some(Box::new(|grad, _, _| {
            vec![grad
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn()]
        })),
    )
}

/// 2-d convolution layer (no bias; batch norm follows in all users here).
pub struct Conv2d {
    pub weight: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv2dSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                fan_in,
                rng,
            ),
            ParamKind::Weight,
        );
        Self { weight, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Var {
        g.conv2d(x, b.var(self.weight), self.spec)
    }
}

/// Batch normalization with running statistics, usable on `(N,C)` and
/// `(N,C,H,W)` nodes.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Array1::from_elem(channels, T::one()).into_dyn(),
            ParamKind::NoDecay,
        );
        let beta = store.add(
            format!("{name}.beta"),
            Array1::from_elem(channels, T::zero()).into_dyn(),
            ParamKind::NoDecay,
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            Array1::from_elem(channels, T::zero()).into_dyn(),
            ParamKind::Buffer,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            Array1::from_elem(channels, T::one()).into_dyn(),
            ParamKind::Buffer,
        );
        Self { gamma, beta, running_mean, running_var, channels, momentum: 0.1 }
    }

    /// Training-mode forward: normalize by batch statistics and fold them
    /// into the running estimates (unbiased variance, torch convention).
    pub fn forward_train<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        x: Var,
    ) -> Var {
        let (mean, var) = g.with_value(x, |xv| crate::tensor::batch_moments(xv));
        let count = {
            let shape = g.shape(x);
            shape.iter().product::<usize>() / self.channels
        };
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        {
            let m = T::of_f64(self.momentum);
            let one_m = T::one() - m;
            let rm = store.value_mut(self.running_mean);
            for (r, &mj) in rm.iter_mut().zip(mean.iter()) {
                *r = one_m * *r + m * mj;
            }
            let rv = store.value_mut(self.running_var);
            for (r, &vj) in rv.iter_mut().zip(var.iter()) {
                *r = one_m * *r + m * vj * T::of_f64(unbias);
            }
        }
        g.batch_norm_train(x, b.var(self.gamma), b.var(self.beta))
    }

    /// Eval-mode forward: normalize by the frozen running statistics.
    pub fn forward_eval<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let rm: Vec<T> = store.value(self.running_mean).iter().copied().collect();
        let rv: Vec<T> = store.value(self.running_var).iter().copied().collect();
        g.batch_norm_eval(x, b.var(self.gamma), b.var(self.beta), &rm, &rv)
    }
}

/// Layer normalization over the feature axis of `(N,D)` nodes.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Array1::from_elem(features, T::one()).into_dyn(),
            ParamKind::NoDecay,
        );
        let beta = store.add(
            format!("{name}.beta"),
            Array1::from_elem(features, T::zero()).into_dyn(),
            ParamKind::NoDecay,
        );
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Var {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

/// Draw an inverted-dropout mask: 0 with probability `p`, 1 otherwise.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// A matrix parameter initialized to zeros (used for gated projections that
/// must start as the identity map through their residual connection).
pub fn zeros_matrix<T: Scalar>(rows: usize, cols: usize) -> ArrayD<T> {
    Array2::<T>::zeros((rows, cols)).into_dyn()
}
