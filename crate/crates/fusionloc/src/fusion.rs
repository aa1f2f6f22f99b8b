//! Feature fusion: concatenate the image and point features, then pass the
//! fusion vector through repeated multi-head self-attention blocks with
//! pre-normalization and residual connections. No positional encoding: the
//! fusion feature has no meaningful element order.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::nn::{kaiming_uniform, BatchNorm, Bindings, LayerNorm, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// Normalization applied before each attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Per-coordinate statistics across the batch (the paper's choice).
    Batch,
    /// Per-sample statistics across coordinates.
    Layer,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::Batch => "bn",
            NormKind::Layer => "ln",
        }
    }
}

/// Head and layer counts the ablation grid allows.
pub const HEAD_COUNTS: [usize; 4] = [1, 2, 4, 8];
pub const LAYER_COUNTS: [usize; 4] = [1, 2, 4, 6];

#[derive(Debug, Clone, PartialEq)]
pub enum FusionError {
    BadConfig(String),
    /// Batch statistics are undefined for a single sample.
    BatchNormBatchOne,
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::BadConfig(m) => write!(f, "bad fusion config: {m}"),
            FusionError::BatchNormBatchOne => {
                write!(f, "batch norm in train mode needs batch size >= 2")
            }
        }
    }
}

impl std::error::Error for FusionError {}

/// Architecture of the fusion stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub d_i: usize,
    pub d_p: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub norm: NormKind,
}

impl FusionConfig {
    pub fn dim(&self) -> usize {
        self.d_i + self.d_p
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.n_layers == 0 {
            return Err(FusionError::BadConfig("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.dim() % self.n_heads != 0 {
            return Err(FusionError::BadConfig(format!(
                "feature dim {} must be divisible by n_heads {}",
                self.dim(),
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Concatenate image and point features, image first: `(N, d_I + d_P)`.
pub fn fuse_concat<T: Scalar>(g: &Graph<T>, f_i: Var, f_p: Var) -> Var {
    g.concat(&[f_i, f_p], 1)
}

/// Query/key/value projections of one attention head (no per-head output
/// projection; the block-level projection integrates the heads).
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

enum BlockNorm {
    Batch(BatchNorm),
    Layer(LayerNorm),
}

/// One pre-norm MHSA block with a residual connection from the
/// un-normalized input.
pub struct MhsaBlock {
    norm: BlockNorm,
    heads: Vec<HeadParams>,
    pub w_p: ParamId,
    pub dim: usize,
    pub head_dim: usize,
}

/// Attention-weight probes from one forward pass: one `(N, d_h, d_h)` node
/// per head per block.
pub struct FusionProbe {
    pub head_weights: Vec<Var>,
}

impl MhsaBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dim = cfg.dim();
        let head_dim = dim / cfg.n_heads;
        let norm = match cfg.norm {
            NormKind::Batch => BlockNorm::Batch(BatchNorm::new(store, &format!("{name}.bn"), dim)),
            NormKind::Layer => BlockNorm::Layer(LayerNorm::new(store, &format!("{name}.ln"), dim)),
        };
        let heads = (0..cfg.n_heads)
            .map(|h| HeadParams {
                w_q: store.add(
                    format!("{name}.h{h}.w_q"),
                    kaiming_uniform(&[head_dim, head_dim], head_dim, rng),
                    ParamKind::Weight,
                ),
                w_k: store.add(
                    format!("{name}.h{h}.w_k"),
                    kaiming_uniform(&[head_dim, head_dim], head_dim, rng),
                    ParamKind::Weight,
                ),
                w_v: store.add(
                    format!("{name}.h{h}.w_v"),
                    kaiming_uniform(&[head_dim, head_dim], head_dim, rng),
                    ParamKind::Weight,
                ),
            })
            .collect();
        let w_p = store.add(
            format!("{name}.w_p"),
            kaiming_uniform(&[dim, dim], dim, rng),
            ParamKind::Weight,
        );
        Self { norm, heads, w_p, dim, head_dim }
    }

    /// Forward on `(N, d)`; scaled dot-product attention per head over that
    /// head's segment of scalar tokens, `1/sqrt(d_h)` scaling.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        probe: &mut FusionProbe,
    ) -> Result<Var, FusionError> {
        let n = g.shape(x)[0];
        let normed = match &self.norm {
            BlockNorm::Batch(bn) => {
                if train {
                    if n < 2 {
                        return Err(FusionError::BatchNormBatchOne);
                    }
                    bn.forward_train(g, b, store, x)
                } else {
                    bn.forward_eval(g, b, store, x)
                }
            }
            BlockNorm::Layer(ln) => ln.forward(g, b, x),
        };

        let scale = T::of_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for (h, params) in self.heads.iter().enumerate() {
            let seg = g.slice_axis_op(normed, 1, h * self.head_dim, (h + 1) * self.head_dim);
            let wq = crate::nn::transpose2(g, b.var(params.w_q));
            let wk = crate::nn::transpose2(g, b.var(params.w_k));
            let wv = crate::nn::transpose2(g, b.var(params.w_v));
            let q = g.matmul(seg, wq);
            let k = g.matmul(seg, wk);
            let v = g.matmul(seg, wv);
            let scores = g.outer_batch(q, k);
            let scaled = g.scale(scores, scale);
            let weights = g.softmax_last(scaled);
            probe.head_weights.push(weights);
            head_outs.push(g.bmv(weights, v));
        }
        let merged = g.concat(&head_outs, 1);
        let wp = crate::nn::transpose2(g, b.var(self.w_p));
        let projected = g.matmul(merged, wp);
        Ok(g.add(projected, x))
    }
}

/// `N_l` identically shaped blocks with independent parameters.
pub struct FusionStack {
    pub blocks: Vec<MhsaBlock>,
    pub cfg: FusionConfig,
}

impl FusionStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FusionError> {
        cfg.validate()?;
        let blocks = (0..cfg.n_layers)
            .map(|l| MhsaBlock::new(store, &format!("{name}.block{l}"), cfg, rng))
            .collect();
        Ok(Self { blocks, cfg: cfg.clone() })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Result<(Var, FusionProbe), FusionError> {
        let mut probe = FusionProbe { head_weights: Vec::new() };
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(g, b, store, y, train, &mut probe)?;
        }
        Ok((y, probe))
    }
}
