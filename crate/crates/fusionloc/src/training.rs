//! Optimization loop: Adam over all parameters (network weights plus the
//! loss-balance scalars), mini-batch shuffling, loss-curve recording,
//! periodic evaluation, checkpointing, and the ablation-grid driver.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    color_jitter, preprocess_image, sample_scan, ChannelNorm, JitterConfig, PreprocessMode,
    Sequence, Split,
};
use crate::fusion::NormKind;
use crate::geom::Pose2D;
use crate::model::{FusionLocModel, ModelConfig, ModelError, ModelKind};
use crate::nn::{Mode, ParamKind, ParamStore};
use crate::point_branch::array_to_points;
use crate::regression::{evaluate, pose_loss, predictions_from_vars, EvalReport, PosePrediction};
use crate::tensor::Graph;
use crate::weights::{manifest_get, read_archive, write_archive, Manifest};

/// Optimizer and schedule settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the eval split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Color jitter + random crop during training.
    pub augment: bool,
    /// Optional hard cap on optimization steps (0 = no cap).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 16,
            seed: 1,
            eval_every: 100,
            augment: true,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 && self.epochs > 0 && self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if model.kind == ModelKind::Fusion
            && model.norm == NormKind::Batch
            && self.batch_size < 2
        {
            return Err(TrainError::Config(
                "batch norm in train mode needs batch size >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    NoTrainingData,
    /// Loss became non-finite; carries the step and last finite loss.
    Diverged { step: usize, last_loss: f64 },
    Model(ModelError),
    Io(std::io::Error),
    Checkpoint(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "train config error: {m}"),
            TrainError::NoTrainingData => write!(f, "no training samples"),
            TrainError::Diverged { step, last_loss } => {
                write!(f, "loss diverged at step {step} (last finite loss {last_loss})")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "{e}"),
            TrainError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Adam with decoupled parameter classes: `Weight` entries get L2 decay
/// added to their gradient, `NoDecay` entries (loss scalars, norm affine)
/// do not, `Buffer` entries are never touched.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, weight_decay: f64) -> Self {
        let m = store.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        let v = store.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m, v }
    }

    /// Apply one update given per-parameter gradients (by store index).
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<ArrayD<f32>>]) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f32).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f32).powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        let wd = self.weight_decay as f32;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind == ParamKind::Buffer {
                continue;
            }
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, mi, vi, &gi| {
                    let g = if entry.kind == ParamKind::Weight { gi + wd * *p } else { gi };
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    fn moment_arrays(&self, store: &ParamStore<f32>) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            out.push((format!("adam.m.{}", e.name), self.m[i].clone()));
            out.push((format!("adam.v.{}", e.name), self.v[i].clone()));
        }
        out
    }

    fn restore_moments(
        &mut self,
        store: &ParamStore<f32>,
        arrays: &[(String, ArrayD<f32>)],
    ) -> Result<(), TrainError> {
        for (i, e) in store.entries().iter().enumerate() {
            let mname = format!("adam.m.{}", e.name);
            let vname = format!("adam.v.{}", e.name);
            let find = |n: &str| {
                arrays
                    .iter()
                    .find(|(an, _)| an == n)
                    .map(|(_, a)| a.clone())
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing moment {n}")))
            };
            self.m[i] = find(&mname)?;
            self.v[i] = find(&vname)?;
        }
        Ok(())
    }
}

/// One training or evaluation item, decoupled from the on-disk layout.
#[derive(Debug, Clone)]
pub struct Item {
    pub image: image::RgbImage,
    pub scan: Vec<[f64; 2]>,
    pub pose: Pose2D,
    pub seq: String,
}

/// In-memory corpus split into train and eval items.
pub struct Corpus {
    pub train: Vec<Item>,
    pub eval: Vec<Item>,
    pub norm: ChannelNorm,
}

impl Corpus {
    pub fn from_sequences(sequences: &[Sequence], norm: ChannelNorm) -> Self {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for seq in sequences {
            let bucket = if seq.split == Split::Train { &mut train } else { &mut eval };
            for s in &seq.samples {
                bucket.push(Item {
                    image: s.image.clone(),
                    scan: s.scan.clone(),
                    pose: s.pose,
                    seq: seq.id.clone(),
                });
            }
        }
        Self { train, eval, norm }
    }
}

/// Loss-curve row: `step, loss, beta, gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Outcome of a training run.
pub struct TrainRecord {
    pub steps: usize,
    pub epochs_run: usize,
    pub curve: Vec<CurvePoint>,
    /// (epoch, report) at each periodic evaluation.
    pub reports: Vec<(usize, EvalReport)>,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,beta,gamma\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.beta, p.gamma));
    }
    out
}

fn batch_inputs(
    model: &ModelConfig,
    items: &[&Item],
    norm: &ChannelNorm,
    mode_is_train: bool,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<ArrayD<f32>>, Option<Vec<Vec<[f64; 2]>>>), TrainError> {
    let images = if model.kind.uses_image() {
        let s = model.crop as usize;
        let mut batch = ArrayD::<f32>::zeros(IxDyn(&[items.len(), 3, s, s]));
        for (i, item) in items.iter().enumerate() {
            let img = if mode_is_train && augment {
                color_jitter(&item.image, &JitterConfig::default(), rng)
            } else {
                item.image.clone()
            };
            let mode = if mode_is_train && augment {
                PreprocessMode::Train
            } else {
                PreprocessMode::Eval
            };
            let tensor = preprocess_image::<f32>(&img, mode, rng, norm, model.crop);
            batch.index_axis_mut(Axis(0), i).assign(&tensor);
        }
        Some(batch)
    } else {
        None
    };
    let scans = if model.kind.uses_point() {
        let mode = if mode_is_train { PreprocessMode::Train } else { PreprocessMode::Eval };
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let arr = sample_scan(&item.scan, model.n_points, mode, rng)
                .map_err(|e| TrainError::Config(format!("scan sampling failed: {e}")))?;
            out.push(array_to_points(&arr));
        }
        Some(out)
    } else {
        None
    };
    Ok((images, scans))
}

fn pose_targets(items: &[&Item]) -> (Array2<f32>, Array2<f32>) {
    let n = items.len();
    let mut p = Array2::<f32>::zeros((n, 2));
    let mut q = Array2::<f32>::zeros((n, 2));
    for (i, item) in items.iter().enumerate() {
        p[[i, 0]] = item.pose.x as f32;
        p[[i, 1]] = item.pose.y as f32;
        let hv = item.pose.heading_vec();
        q[[i, 0]] = hv[0] as f32;
        q[[i, 1]] = hv[1] as f32;
    }
    (p, q)
}

/// Run eval-mode inference over `items` in batches; returns per-item
/// predictions in order.
pub fn evaluate_model(
    model: &FusionLocModel,
    store: &mut ParamStore<f32>,
    items: &[Item],
    norm: &ChannelNorm,
    batch_size: usize,
) -> Result<Vec<PosePrediction>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval paths
    let mut preds = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let (images, scans) = batch_inputs(&model.cfg, &refs, norm, false, false, &mut rng)?;
        let g: Graph<f32> = Graph::new();
        let b = store.bind_all(&g);
        let mut mode = Mode::Eval;
        let out = model.forward(&g, &b, store, images, scans.as_deref(), &mut mode)?;
        preds.extend(predictions_from_vars(&g, out.p, out.q));
    }
    Ok(preds)
}

/// Evaluate and reduce to the per-sequence median/mean report.
pub fn evaluation_report(
    model: &FusionLocModel,
    store: &mut ParamStore<f32>,
    items: &[Item],
    norm: &ChannelNorm,
) -> Result<EvalReport, TrainError> {
    let preds = evaluate_model(model, store, items, norm, 32)?;
    let gts: Vec<Pose2D> = items.iter().map(|i| i.pose).collect();
    let ids: Vec<String> = items.iter().map(|i| i.seq.clone()).collect();
    evaluate(&preds, &gts, &ids).map_err(|e| TrainError::Config(e.to_string()))
}

/// Train `model` on the corpus. Mini-batches are reshuffled every epoch; the
/// balance parameters are optimized jointly with the network weights.
pub fn train(
    model: &FusionLocModel,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    corpus: &Corpus,
    cfg: &TrainConfig,
    start_epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainRecord, TrainError> {
    cfg.validate(&model.cfg)?;
    if corpus.train.is_empty() {
        return Err(TrainError::NoTrainingData);
    }

    let mut curve = Vec::new();
    let mut reports = Vec::new();
    let mut step = adam.t as usize;
    let mut last_finite = f64::NAN;
    let mut epochs_run = 0;

    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            // skip a trailing singleton batch when BN needs pairs
            if chunk.len() < 2
                && model.cfg.kind == ModelKind::Fusion
                && model.cfg.norm == NormKind::Batch
            {
                continue;
            }
            let items: Vec<&Item> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let (images, scans) =
                batch_inputs(&model.cfg, &items, &corpus.norm, true, cfg.augment, rng)?;
            let (p_gt, q_gt) = pose_targets(&items);

            let g: Graph<f32> = Graph::new();
            let b = store.bind_all(&g);
            let mut mode = Mode::Train { rng };
            let out = model.forward(&g, &b, store, images, scans.as_deref(), &mut mode)?;
            let p_t = g.leaf(p_gt.into_dyn());
            let q_t = g.leaf(q_gt.into_dyn());
            let loss = pose_loss(
                &g,
                p_t,
                q_t,
                out.p,
                out.q,
                b.var(model.loss_state.beta),
                b.var(model.loss_state.gamma),
            );
            let loss_val = g.scalar_value(loss) as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { step, last_loss: last_finite });
            }
            last_finite = loss_val;

            let grads = g.backward(loss);
            let grad_list: Vec<Option<ArrayD<f32>>> = store
                .entries()
                .iter()
                .enumerate()
                .map(|(i, _)| grads.get(b.var(crate::nn::ParamId(i))).cloned())
                .collect();
            adam.step(store, &grad_list);
            step += 1;

            curve.push(CurvePoint {
                step,
                loss: loss_val,
                beta: store.value(model.loss_state.beta)[[]] as f64,
                gamma: store.value(model.loss_state.gamma)[[]] as f64,
            });
        }
        epochs_run = epoch + 1;
        if cfg.eval_every > 0 && !corpus.eval.is_empty() && (epoch + 1) % cfg.eval_every == 0 {
            reports.push((epoch + 1, evaluation_report(model, store, &corpus.eval, &corpus.norm)?));
        }
    }
    Ok(TrainRecord { steps: step, epochs_run, curve, reports })
}

/// Serialized rng position, for bit-exact resume: the full 32-byte seed as
/// hex, plus the word position within the stream.
fn rng_state(rng: &ChaCha8Rng) -> (String, u128) {
    let seed = rng.get_seed();
    let hex: String = seed.iter().map(|b| format!("{b:02x}")).collect();
    (hex, rng.get_word_pos())
}

fn rng_from_state(hex: &str, stream: u64, word_pos: u128) -> Option<ChaCha8Rng> {
    if hex.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).ok()?;
        seed[i] = u8::from_str_radix(s, 16).ok()?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Some(rng)
}

/// Save everything needed for bit-identical resume: parameters, buffers,
/// optimizer moments, epoch/step counters and the rng position.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    adam: &Adam,
    epoch: usize,
    config_text: &str,
    config_hash: &str,
    rng: &ChaCha8Rng,
) -> Result<(), TrainError> {
    let mut arrays: Vec<(String, ArrayD<f32>)> =
        store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
    arrays.extend(adam.moment_arrays(store));
    let (seed_hex, word_pos) = rng_state(rng);
    let manifest: Manifest = vec![
        ("format".into(), "fusionloc-checkpoint-1".into()),
        ("epoch".into(), epoch.to_string()),
        ("adam_t".into(), adam.t.to_string()),
        ("config_hash".into(), config_hash.to_string()),
        ("config".into(), config_text.to_string()),
        ("rng_seed_hex".into(), seed_hex),
        ("rng_word_pos".into(), word_pos.to_string()),
        ("rng_stream".into(), rng.get_stream().to_string()),
    ];
    write_archive(path, &manifest, &arrays)?;
    Ok(())
}

/// Restored checkpoint state.
pub struct LoadedCheckpoint {
    pub epoch: usize,
    pub config_text: String,
    pub config_hash: String,
    pub rng: ChaCha8Rng,
}

/// Load a checkpoint into an existing store/optimizer pair (which must have
/// been built from the same configuration).
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
) -> Result<LoadedCheckpoint, TrainError> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest_get(&manifest, "format") != Some("fusionloc-checkpoint-1") {
        return Err(TrainError::Checkpoint("unrecognized checkpoint format".into()));
    }
    for e in store.entries_mut() {
        let found = arrays
            .iter()
            .find(|(n, _)| n == &e.name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing parameter {}", e.name)))?;
        if found.1.shape() != e.value.shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                e.name,
                e.value.shape(),
                found.1.shape()
            )));
        }
        e.value = found.1.clone();
    }
    adam.restore_moments(store, &arrays)?;
    adam.t = manifest_get(&manifest, "adam_t")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Checkpoint("missing adam_t".into()))?;

    let epoch: usize = manifest_get(&manifest, "epoch")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Checkpoint("missing epoch".into()))?;
    let seed_hex = manifest_get(&manifest, "rng_seed_hex")
        .ok_or_else(|| TrainError::Checkpoint("missing rng_seed_hex".into()))?;
    let word_pos: u128 = manifest_get(&manifest, "rng_word_pos")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Checkpoint("missing rng_word_pos".into()))?;
    let stream: u64 = manifest_get(&manifest, "rng_stream")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Checkpoint("missing rng_stream".into()))?;
    let rng = rng_from_state(seed_hex, stream, word_pos)
        .ok_or_else(|| TrainError::Checkpoint("bad rng seed encoding".into()))?;

    Ok(LoadedCheckpoint {
        epoch,
        config_text: manifest_get(&manifest, "config").unwrap_or_default().to_string(),
        config_hash: manifest_get(&manifest, "config_hash").unwrap_or_default().to_string(),
        rng,
    })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub d_i: usize,
    pub d_p: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub norm: NormKind,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "d_i={} d_p={} heads={} layers={} norm={}",
            self.d_i,
            self.d_p,
            self.n_heads,
            self.n_layers,
            self.norm.as_str()
        )
    }
}

/// Per-cell outcome: a report, or the error that stopped the cell.
pub struct AblationRow {
    pub cell: AblationCell,
    pub outcome: Result<EvalReport, String>,
}

/// Train and evaluate one model per grid cell; cell failures are recorded
/// and the grid continues.
pub fn run_ablation(
    cells: &[AblationCell],
    base_model: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Vec<AblationRow> {
    let allowed_dim = |d: usize| crate::image_branch::FEATURE_WIDTHS.contains(&d);
    cells
        .iter()
        .map(|cell| {
            let valid_grid = (allowed_dim(cell.d_i) || cell.d_i == base_model.d_i)
                && (allowed_dim(cell.d_p) || cell.d_p == base_model.d_p)
                && crate::fusion::HEAD_COUNTS.contains(&cell.n_heads)
                && crate::fusion::LAYER_COUNTS.contains(&cell.n_layers);
            if !valid_grid {
                return AblationRow {
                    cell: cell.clone(),
                    outcome: Err(format!("cell outside the ablation grid: {}", cell.label())),
                };
            }
            let model_cfg = ModelConfig {
                d_i: cell.d_i,
                d_p: cell.d_p,
                n_heads: cell.n_heads,
                n_layers: cell.n_layers,
                norm: cell.norm,
                ..base_model.clone()
            };
            let outcome = (|| -> Result<EvalReport, TrainError> {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut store: ParamStore<f32> = ParamStore::new();
                let model = FusionLocModel::new(&mut store, &model_cfg, &mut rng)?;
                let mut adam = Adam::new(&store, cfg.learning_rate, cfg.weight_decay);
                train(&model, &mut store, &mut adam, corpus, cfg, 0, &mut rng)?;
                evaluation_report(&model, &mut store, &corpus.eval, &corpus.norm)
            })()
            .map_err(|e| e.to_string());
            AblationRow { cell: cell.clone(), outcome }
        })
        .collect()
}

/// Text table over ablation rows, one line per cell.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<44} {:>12} {:>12} {:>14} {:>14}\n",
        "cell", "median_pos_m", "mean_pos_m", "median_ori_deg", "mean_ori_deg"
    );
    for row in rows {
        match &row.outcome {
            Ok(report) => out.push_str(&format!(
                "{:<44} {:>12.4} {:>12.4} {:>14.3} {:>14.3}\n",
                row.cell.label(),
                report.avg.median_pos_m,
                report.avg.mean_pos_m,
                report.avg.median_ori_deg,
                report.avg.mean_ori_deg
            )),
            Err(e) => out.push_str(&format!("{:<44} failed: {e}\n", row.cell.label())),
        }
    }
    out
}
