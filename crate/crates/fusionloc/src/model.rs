//! Full model assembly: image branch, point branch, fusion stack and
//! regression head, with single-branch and plain-concatenation baselines
//! selectable for comparison runs.

use std::fmt;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::fusion::{fuse_concat, FusionConfig, FusionError, FusionProbe, FusionStack, NormKind};
use crate::image_branch::{BackboneSpec, ImageBranch, ImageBranchConfig};
use crate::nn::{Bindings, Mode, ParamStore};
use crate::point_branch::{PointBranch, PointBranchConfig, PointError, SetAbstractionParams};
use crate::regression::{LossState, RegressionHead};
use crate::tensor::{Graph, Scalar, Var};

/// Which inputs feed the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Image branch only (the visual baseline).
    ImageOnly,
    /// Point branch only (the range baseline).
    PointOnly,
    /// Concatenated features without any attention stack.
    ConcatOnly,
    /// Concatenation followed by the multi-head self-attention stack.
    Fusion,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::ImageOnly => "image",
            ModelKind::PointOnly => "point",
            ModelKind::ConcatOnly => "concat",
            ModelKind::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Self::ImageOnly),
            "point" => Some(Self::PointOnly),
            "concat" => Some(Self::ConcatOnly),
            "fusion" => Some(Self::Fusion),
            _ => None,
        }
    }

    pub fn uses_image(&self) -> bool {
        !matches!(self, ModelKind::PointOnly)
    }

    pub fn uses_point(&self) -> bool {
        !matches!(self, ModelKind::ImageOnly)
    }
}

/// Complete architecture description.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_i: usize,
    pub d_p: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub norm: NormKind,
    pub backbone: BackboneSpec,
    pub sa: [SetAbstractionParams; 3],
    /// Dropout before the image attention; automatically disabled when the
    /// fusion stack normalizes with BN.
    pub dropout_p: f64,
    /// Fixed scan size fed to the point branch.
    pub n_points: usize,
    /// Square crop size of preprocessed images.
    pub crop: u32,
}

impl ModelConfig {
    /// The paper-sized default: ResNet-34 backbone, published set-abstraction
    /// table, 256-wide features, BN fusion.
    pub fn paper_default() -> Self {
        Self {
            kind: ModelKind::Fusion,
            d_i: 256,
            d_p: 256,
            n_heads: 2,
            n_layers: 2,
            norm: NormKind::Batch,
            backbone: BackboneSpec::resnet34(),
            sa: SetAbstractionParams::table(),
            dropout_p: 0.5,
            n_points: 1024,
            crop: 256,
        }
    }

    /// Small configuration for desk-scale runs and tests.
    pub fn tiny() -> Self {
        Self {
            kind: ModelKind::Fusion,
            d_i: 64,
            d_p: 64,
            n_heads: 2,
            n_layers: 2,
            norm: NormKind::Batch,
            backbone: BackboneSpec::tiny(),
            sa: SetAbstractionParams::scaled(256),
            dropout_p: 0.5,
            n_points: 256,
            crop: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        match self.kind {
            ModelKind::ImageOnly => self.d_i,
            ModelKind::PointOnly => self.d_p,
            ModelKind::ConcatOnly | ModelKind::Fusion => self.d_i + self.d_p,
        }
    }

    fn fusion_cfg(&self) -> FusionConfig {
        FusionConfig {
            d_i: self.d_i,
            d_p: self.d_p,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            norm: self.norm,
        }
    }
}

#[derive(Debug)]
pub enum ModelError {
    Fusion(FusionError),
    Point(PointError),
    Input(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Fusion(e) => write!(f, "{e}"),
            ModelError::Point(e) => write!(f, "{e}"),
            ModelError::Input(m) => write!(f, "bad model input: {m}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<FusionError> for ModelError {
    fn from(e: FusionError) -> Self {
        ModelError::Fusion(e)
    }
}

impl From<PointError> for ModelError {
    fn from(e: PointError) -> Self {
        ModelError::Point(e)
    }
}

/// Batch forward output with attention probes for inspection.
pub struct ModelOutput {
    /// `(N, 2)` regressed positions.
    pub p: Var,
    /// `(N, 2)` raw orientation vectors.
    pub q: Var,
    /// Image-attention weights, when the image branch ran.
    pub image_attn: Option<Var>,
    /// Fusion-attention weights, when the stack ran.
    pub fusion_probe: Option<FusionProbe>,
}

pub struct FusionLocModel {
    pub cfg: ModelConfig,
    pub image: Option<ImageBranch>,
    pub point: Option<PointBranch>,
    pub stack: Option<FusionStack>,
    pub head: RegressionHead,
    pub loss_state: LossState,
}

impl FusionLocModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        // the paper drops dropout when BN normalizes the fusion stack
        let uses_bn_stack = cfg.kind == ModelKind::Fusion && cfg.norm == NormKind::Batch;
        let dropout_p = if uses_bn_stack { 0.0 } else { cfg.dropout_p };

        let image = cfg.kind.uses_image().then(|| {
            ImageBranch::new(
                store,
                "image",
                &ImageBranchConfig { d_i: cfg.d_i, backbone: cfg.backbone.clone(), dropout_p },
                rng,
            )
        });
        let point = cfg.kind.uses_point().then(|| {
            PointBranch::new(
                store,
                "point",
                &PointBranchConfig { d_p: cfg.d_p, sa: cfg.sa.clone() },
                rng,
            )
        });
        let stack = match cfg.kind {
            ModelKind::Fusion => Some(FusionStack::new(store, "fusion", &cfg.fusion_cfg(), rng)?),
            _ => None,
        };
        let head = RegressionHead::new(store, "head", cfg.head_dim(), rng);
        let loss_state = LossState::new(store, "loss");
        Ok(Self { cfg: cfg.clone(), image, point, stack, head, loss_state })
    }

    /// Forward a batch. `images` is `(N,3,H,W)` when the image branch is
    /// active; `scans` holds one fixed-size point list per sample when the
    /// point branch is active.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        store: &mut ParamStore<T>,
        images: Option<ArrayD<T>>,
        scans: Option<&[Vec<[f64; 2]>]>,
        mode: &mut Mode<'_>,
    ) -> Result<ModelOutput, ModelError> {
        let mut image_attn = None;
        let f_i = match &self.image {
            Some(branch) => {
                let imgs = images
                    .ok_or_else(|| ModelError::Input("model needs an image batch".into()))?;
                let x = g.leaf(imgs);
                let out = branch.forward(g, b, store, x, mode);
                image_attn = Some(out.weights);
                Some(out.out)
            }
            None => None,
        };
        let f_p = match &self.point {
            Some(branch) => {
                let scans =
                    scans.ok_or_else(|| ModelError::Input("model needs a scan batch".into()))?;
                let rows: Vec<Var> = scans
                    .iter()
                    .map(|scan| branch.forward(g, b, scan, mode))
                    .collect::<Result<_, _>>()?;
                Some(g.stack_rows(&rows))
            }
            None => None,
        };

        let mut fusion_probe = None;
        let feature = match (f_i, f_p) {
            (Some(fi), Some(fp)) => {
                let fused = fuse_concat(g, fi, fp);
                match &self.stack {
                    Some(stack) => {
                        let (y, probe) = stack.forward(g, b, store, fused, mode.is_train())?;
                        fusion_probe = Some(probe);
                        y
                    }
                    None => fused,
                }
            }
            (Some(fi), None) => fi,
            (None, Some(fp)) => fp,
            (None, None) => unreachable!("at least one branch is always constructed"),
        };

        let (p, q) = self.head.forward(g, b, feature);
        Ok(ModelOutput { p, q, image_attn, fusion_probe })
    }
}
