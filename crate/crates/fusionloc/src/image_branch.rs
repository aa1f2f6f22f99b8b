//! Visual feature extraction: residual convolutional backbone, global
//! average pooling, projection to the feature width, and vector
//! self-attention over the projected feature.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    dropout_mask, kaiming_uniform, BatchNorm, Bindings, Conv2d, Linear, Mode, ParamId, ParamKind,
    ParamStore,
};
use crate::tensor::{Conv2dSpec, Graph, Scalar, Var};

/// The four learnable projections of one self-attention block.
///
/// The attention treats its d-dimensional input as d scalar tokens: the
/// score matrix is the outer product of the projected query and key vectors,
/// each row is softmax-normalized, and the weighted value is projected and
/// added back through the residual connection.
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_p: ParamId,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mat = |suffix: &str, rng: &mut ChaCha8Rng| {
            store.add(
                format!("{name}.{suffix}"),
                kaiming_uniform(&[dim, dim], dim, rng),
                ParamKind::Weight,
            )
        };
        let w_q = mat("w_q", rng);
        let w_k = mat("w_k", rng);
        let w_v = mat("w_v", rng);
        let w_p = mat("w_p", rng);
        Self { w_q, w_k, w_v, w_p, dim }
    }
}

/// Attention output plus the row-normalized weight matrices for inspection.
pub struct AttnOut {
    pub out: Var,
    /// `(N, d, d)` softmax weights, rows summing to one.
    pub weights: Var,
}

/// Vector self-attention on a batch of row vectors `x (N, d)`:
/// `f_att = softmax(outer(W_q x, W_k x)) (W_v x)`, `out = W_p f_att + x`.
/// No score scaling here; scaling appears only in the multi-head fusion.
pub fn vector_self_attention_batch<T: Scalar>(
    g: &Graph<T>,
    b: &Bindings,
    p: &AttentionParams,
    x: Var,
) -> AttnOut {
    let wq = crate::nn::transpose2(g, b.var(p.w_q));
    let wk = crate::nn::transpose2(g, b.var(p.w_k));
    let wv = crate::nn::transpose2(g, b.var(p.w_v));
    let wp = crate::nn::transpose2(g, b.var(p.w_p));
    let q = g.matmul(x, wq); // rows are (W_q f)^T
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let scores = g.outer_batch(q, k);
    let weights = g.softmax_last(scores);
    let f_att = g.bmv(weights, v);
    let proj = g.matmul(f_att, wp);
    let out = g.add(proj, x);
    AttnOut { out, weights }
}

/// Single-vector form of the attention; `f` is a 1-d node of length `d`.
pub fn vector_self_attention<T: Scalar>(
    g: &Graph<T>,
    b: &Bindings,
    p: &AttentionParams,
    f: Var,
) -> AttnOut {
    let row = g.reshape(f, &[1, p.dim]);
    let AttnOut { out, weights } = vector_self_attention_batch(g, b, p, row);
    AttnOut { out: g.reshape(out, &[p.dim]), weights }
}

/// Residual backbone topology: stem width, blocks per stage, stage widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
}

impl BackboneSpec {
    /// The standard 34-layer topology: stem 64, stages [3,4,6,3] of widths
    /// [64, 128, 256, 512].
    pub fn resnet34() -> Self {
        Self { stem_channels: 64, stage_blocks: [3, 4, 6, 3], stage_channels: [64, 128, 256, 512] }
    }

    /// Reduced-width variant for desk-scale training.
    pub fn tiny() -> Self {
        Self { stem_channels: 8, stage_blocks: [1, 1, 1, 1], stage_channels: [8, 16, 32, 64] }
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels[3]
    }

    /// Conv + affine-norm parameter count implied by the topology; used to
    /// cross-check constructed models against the layer arithmetic.
    pub fn conv_bn_param_count(&self) -> usize {
        let bn = |c: usize| 2 * c;
        let mut total = 7 * 7 * 3 * self.stem_channels + bn(self.stem_channels);
        let mut c_in = self.stem_channels;
        for (si, (&nblocks, &c_out)) in
            self.stage_blocks.iter().zip(self.stage_channels.iter()).enumerate()
        {
            for bi in 0..nblocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                total += 9 * c_in * c_out + bn(c_out); // conv1
                total += 9 * c_out * c_out + bn(c_out); // conv2
                if stride != 1 || c_in != c_out {
                    total += c_in * c_out + bn(c_out); // downsample
                }
                c_in = c_out;
            }
        }
        total
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            Conv2dSpec { in_channels: c_in, out_channels: c_out, kernel: 3, stride, padding: 1 },
            rng,
        );
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            Conv2dSpec { in_channels: c_out, out_channels: c_out, kernel: 3, stride: 1, padding: 1 },
            rng,
        );
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out);
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.down"),
                    Conv2dSpec { in_channels: c_in, out_channels: c_out, kernel: 1, stride, padding: 0 },
                    rng,
                ),
                BatchNorm::new(store, &format!("{name}.down_bn"), c_out),
            )
        });
        Self { conv1, bn1, conv2, bn2, down }
    }

    fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Var {
        let bn = |layer: &BatchNorm, g: &Graph<T>, store: &mut ParamStore<T>, v: Var| {
            if train {
                layer.forward_train(g, b, store, v)
            } else {
                layer.forward_eval(g, b, store, v)
            }
        };
        let mut y = self.conv1.forward(g, b, x);
        y = bn(&self.bn1, g, store, y);
        y = g.relu(y);
        y = self.conv2.forward(g, b, y);
        y = bn(&self.bn2, g, store, y);
        let skip = match &self.down {
            Some((conv, dbn)) => {
                let s = conv.forward(g, b, x);
                bn(dbn, g, store, s)
            }
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

/// Residual conv trunk: 7x7/2 stem, 3x3/2 max pool, four stages of basic
/// blocks, global average pool.
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    pub spec: BackboneSpec,
    name: String,
}

impl Backbone {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: BackboneSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv2d::new(
            store,
            &format!("{name}.stem"),
            Conv2dSpec { in_channels: 3, out_channels: spec.stem_channels, kernel: 7, stride: 2, padding: 3 },
            rng,
        );
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem_bn"), spec.stem_channels);
        let mut stages = Vec::new();
        let mut c_in = spec.stem_channels;
        for (si, (&nblocks, &c_out)) in
            spec.stage_blocks.iter().zip(spec.stage_channels.iter()).enumerate()
        {
            let mut blocks = Vec::new();
            for bi in 0..nblocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    &format!("{name}.s{si}.b{bi}"),
                    c_in,
                    c_out,
                    stride,
                    rng,
                ));
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Self { stem, stem_bn, stages, spec, name: name.to_string() }
    }

    /// `(N,3,H,W) -> (N, final_channels)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Var {
        let mut y = self.stem.forward(g, b, x);
        y = if train {
            self.stem_bn.forward_train(g, b, store, y)
        } else {
            self.stem_bn.forward_eval(g, b, store, y)
        };
        y = g.relu(y);
        y = g.maxpool2d(y, 3, 2, 1);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, b, store, y, train);
            }
        }
        g.global_avg_pool(y)
    }

    /// Conv and norm-affine parameters actually registered under this trunk.
    pub fn conv_bn_param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(&self.name) && e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Configuration of the image branch.
#[derive(Debug, Clone)]
pub struct ImageBranchConfig {
    /// Feature width d_I; the ablation grid uses {256, 512, 1024, 2048}.
    pub d_i: usize,
    pub backbone: BackboneSpec,
    /// Dropout probability before the attention (train mode only); disabled
    /// by the model assembly when the fusion stack uses batch norm.
    pub dropout_p: f64,
}

/// Feature widths the ablation grid allows.
pub const FEATURE_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];

/// Backbone + projection + dropout + vector self-attention.
pub struct ImageBranch {
    pub backbone: Backbone,
    pub proj: Linear,
    pub attn: AttentionParams,
    pub dropout_p: f64,
    pub d_i: usize,
}

impl ImageBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ImageBranchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let backbone = Backbone::new(store, &format!("{name}.backbone"), cfg.backbone.clone(), rng);
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            cfg.backbone.final_channels(),
            cfg.d_i,
            true,
            rng,
        );
        let attn = AttentionParams::new(store, &format!("{name}.attn"), cfg.d_i, rng);
        Self { backbone, proj, attn, dropout_p: cfg.dropout_p, d_i: cfg.d_i }
    }

    /// `(N,3,H,W) -> (N, d_I)` plus attention weights.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        images: Var,
        mode: &mut Mode<'_>,
    ) -> AttnOut {
        let train = mode.is_train();
        let feat = self.backbone.forward(g, b, store, images, train);
        let mut f = self.proj.forward(g, b, feat);
        if let Mode::Train { rng } = mode {
            if self.dropout_p > 0.0 {
                let shape = g.shape(f);
                let mask = dropout_mask::<T>(&shape, self.dropout_p, rng);
                f = g.dropout_with_mask(f, mask, self.dropout_p);
            }
        }
        vector_self_attention_batch(g, b, &self.attn, f)
    }
}

/// Copy arrays from a flat named-array file into matching backbone
/// parameters (the optional pretrained-weight hook). Returns the number of
/// parameters that were filled.
pub fn load_pretrained_backbone<T: Scalar>(
    store: &mut ParamStore<T>,
    arrays: &[(String, ndarray::ArrayD<f32>)],
) -> Result<usize, crate::tensor::TensorError> {
    let mut filled = 0;
    for (name, data) in arrays {
        let Some(id) = store.id_by_name(name) else { continue };
        let current = store.value(id);
        if current.shape() != data.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "load_pretrained",
                lhs: current.shape().to_vec(),
                rhs: data.shape().to_vec(),
            });
        }
        let converted = data.mapv(|v| T::of_f64(v as f64));
        *store.value_mut(id) = converted.into_shape_with_order(IxDyn(data.shape())).unwrap();
        filled += 1;
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{finite_difference, max_rel_err};
    use ndarray::{Array1, Array2, ArrayD};
    use rand::{Rng, SeedableRng};

    fn attention_fixture(d: usize, seed: u64) -> (ParamStore<f64>, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "attn", d, &mut rng);
        (store, attn)
    }

    #[test]
    fn zero_projection_is_exact_identity() {
        let (mut store, attn) = attention_fixture(16, 1);
        *store.value_mut(attn.w_p) = Array2::<f64>::zeros((16, 16)).into_dyn();
        let g = Graph::new();
        let b = store.bind_all(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f0: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = g.vector(&f0);
        let out = vector_self_attention(&g, &b, &attn, f);
        let ov = g.value(out.out);
        assert_eq!(ov.as_slice().unwrap(), f0.as_slice(), "residual identity must be float-exact");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (store, attn) = attention_fixture(8, 3);
        let g = Graph::new();
        let b = store.bind_all(&g);
        let f = g.vector(&[0.3, -1.0, 2.0, 0.1, 0.0, -0.5, 1.5, 0.7]);
        let out = vector_self_attention(&g, &b, &attn, f);
        let w = g.value(out.weights);
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_oracle_d2_identity_matrices() {
        // d = 2, f = [1, 0], all projections identity: brute-force the two
        // equations with scalar arithmetic.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = AttentionParams::new(&mut store, "attn", 2, &mut rng);
        let eye = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        *store.value_mut(attn.w_q) = eye.clone();
        *store.value_mut(attn.w_k) = eye.clone();
        *store.value_mut(attn.w_v) = eye.clone();
        *store.value_mut(attn.w_p) = eye;

        let g = Graph::new();
        let b = store.bind_all(&g);
        let f = g.vector(&[1.0, 0.0]);
        let out = vector_self_attention(&g, &b, &attn, f);
        let ov = g.value(out.out);

        // scores = outer([1,0],[1,0]) = [[1,0],[0,0]]
        // row softmax: [e/(e+1), 1/(e+1)] and [0.5, 0.5]
        // f_att = weights . v = [e/(e+1), 0.5]; out = f_att + f
        let e = std::f64::consts::E;
        assert!((ov[[0]] - (e / (e + 1.0) + 1.0)).abs() < 1e-12);
        assert!((ov[[1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_attention_d8() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f0: ArrayD<f64> =
            Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let probe: ArrayD<f64> =
            Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let (store, attn) = attention_fixture(d, 12);

        let eval = |store: &ParamStore<f64>, f: &ArrayD<f64>| -> f64 {
            let g = Graph::new();
            let b = store.bind_all(&g);
            let fv = g.leaf(f.clone());
            let out = vector_self_attention(&g, &b, &attn, fv);
            let pv = g.leaf(probe.clone());
            let weighted = g.mul(out.out, pv);
            g.scalar_value(g.sum_all(weighted))
        };

        let g = Graph::new();
        let b = store.bind_all(&g);
        let fv = g.leaf(f0.clone());
        let out = vector_self_attention(&g, &b, &attn, fv);
        let pv = g.leaf(probe.clone());
        let weighted = g.mul(out.out, pv);
        let loss = g.sum_all(weighted);
        let grads = g.backward(loss);

        // input gradient
        let fd_f = finite_difference(&f0, 1e-6, |f| eval(&store, f));
        assert!(max_rel_err(grads.get(fv).unwrap(), &fd_f) < 1e-4);

        // all four projection matrices
        for id in [attn.w_q, attn.w_k, attn.w_v, attn.w_p] {
            let w0 = store.value(id).clone();
            let fd = finite_difference(&w0, 1e-6, |w| {
                let mut s2 = ParamStore::new();
                for e in store.entries() {
                    s2.add(e.name.clone(), e.value.clone(), e.kind);
                }
                *s2.value_mut(id) = w.clone();
                eval(&s2, &f0)
            });
            let analytic = grads.get(b.var(id)).unwrap();
            assert!(
                max_rel_err(analytic, &fd) < 1e-4,
                "projection gradient mismatch for param {id:?}"
            );
        }
    }

    #[test]
    fn backbone_param_count_matches_topology_arithmetic() {
        let spec = BackboneSpec::resnet34();
        // independent arithmetic oracle, summed stage by stage
        let expected = spec.conv_bn_param_count();
        assert_eq!(expected, 21_284_672);
        assert!((expected as f64 / 1e6 - 21.28).abs() < 0.01);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f32> = ParamStore::new();
        let bb = Backbone::new(&mut store, "bb", spec, &mut rng);
        assert_eq!(bb.conv_bn_param_count(&store), expected);
    }

    #[test]
    fn tiny_backbone_forward_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store: ParamStore<f32> = ParamStore::new();
        let cfg = ImageBranchConfig { d_i: 32, backbone: BackboneSpec::tiny(), dropout_p: 0.5 };
        let branch = ImageBranch::new(&mut store, "img", &cfg, &mut rng);

        let img = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 32, 32]), |ix| {
            ((ix[1] + ix[2] * 3 + ix[3]) % 7) as f32 * 0.1
        });
        let run = |store: &mut ParamStore<f32>| -> ArrayD<f32> {
            let g = Graph::new();
            let b = store.bind_all(&g);
            let x = g.leaf(img.clone());
            let mut mode = Mode::Eval;
            let out = branch.forward(&g, &b, store, x, &mut mode);
            g.value(out.out)
        };
        let a = run(&mut store);
        let b2 = run(&mut store);
        assert_eq!(a.shape(), &[2, 32]);
        assert_eq!(a, b2, "eval forward must be deterministic");
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_dropout_changes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store: ParamStore<f32> = ParamStore::new();
        let cfg = ImageBranchConfig { d_i: 16, backbone: BackboneSpec::tiny(), dropout_p: 0.5 };
        let branch = ImageBranch::new(&mut store, "img", &cfg, &mut rng);
        let img = ArrayD::from_elem(ndarray::IxDyn(&[2, 3, 32, 32]), 0.3f32);

        let mut run = |seed: u64| -> ArrayD<f32> {
            let g = Graph::new();
            let b = store.bind_all(&g);
            let x = g.leaf(img.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mode = Mode::Train { rng: &mut rng };
            let out = branch.forward(&g, &b, &mut store, x, &mut mode);
            g.value(out.out)
        };
        let a = run(1);
        let b = run(2);
        assert_ne!(a, b, "different dropout rng must change the output");
    }

    #[test]
    fn pretrained_hook_fills_matching_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f32> = ParamStore::new();
        let bb = Backbone::new(&mut store, "bb", BackboneSpec::tiny(), &mut rng);
        let shape = store.value(bb.stem.weight).shape().to_vec();
        let arrays = vec![(
            "bb.stem.weight".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&shape), 0.25f32),
        )];
        let filled = load_pretrained_backbone(&mut store, &arrays).unwrap();
        assert_eq!(filled, 1);
        assert!(store.value(bb.stem.weight).iter().all(|&v| v == 0.25));
    }
}
