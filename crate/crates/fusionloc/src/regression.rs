//! Pose regression head, the learnable-balance L1 loss, and the
//! median/mean evaluation protocol.

use std::fmt;

use ndarray::{Array2, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::geom::{angular_error_deg, position_error_m, vec_to_yaw, Pose2D};
use crate::nn::{Bindings, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// One regressed pose: position in meters plus the raw orientation vector
/// (the network output is not constrained to the unit circle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub p: [f64; 2],
    pub q_raw: [f64; 2],
}

impl PosePrediction {
    /// Normalized orientation vector, when the raw output is not degenerate.
    pub fn q_unit(&self) -> Option<[f64; 2]> {
        let n = (self.q_raw[0] * self.q_raw[0] + self.q_raw[1] * self.q_raw[1]).sqrt();
        (n > 1e-8).then(|| [self.q_raw[0] / n, self.q_raw[1] / n])
    }

    /// Heading angle via atan2 (scale-invariant in `q_raw`).
    pub fn theta(&self) -> Result<f64, crate::geom::GeomError> {
        vec_to_yaw(self.q_raw)
    }
}

/// Two independent MLP branches mapping the fused feature to position and
/// orientation: d -> d/2 -> 128 -> 2, ReLU after all but the last layer.
pub struct RegressionHead {
    pos: [Linear; 3],
    ori: [Linear; 3],
    pub in_dim: usize,
}

impl RegressionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = (in_dim / 2).max(2);
        let mut branch = |tag: &str, rng: &mut ChaCha8Rng| {
            [
                Linear::new(store, &format!("{name}.{tag}.0"), in_dim, mid, true, rng),
                Linear::new(store, &format!("{name}.{tag}.1"), mid, 128, true, rng),
                Linear::new(store, &format!("{name}.{tag}.2"), 128, 2, true, rng),
            ]
        };
        let pos = branch("pos", rng);
        let ori = branch("ori", rng);
        Self { pos, ori, in_dim }
    }

    /// `(N, d) -> (p (N,2), q_raw (N,2))`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, f: Var) -> (Var, Var) {
        let run = |layers: &[Linear; 3]| {
            let mut y = f;
            for (i, layer) in layers.iter().enumerate() {
                y = layer.forward(g, b, y);
                if i + 1 < layers.len() {
                    y = g.relu(y);
                }
            }
            y
        };
        (run(&self.pos), run(&self.ori))
    }

    /// Final-layer parameter ids, exposed for probing tests.
    pub fn final_layers(&self) -> (&Linear, &Linear) {
        (&self.pos[2], &self.ori[2])
    }

    pub fn orientation_param_ids(&self) -> Vec<ParamId> {
        self.ori
            .iter()
            .flat_map(|l| [Some(l.weight), l.bias].into_iter().flatten())
            .collect()
    }
}

/// The learnable loss-balance parameters, initialized to `beta = 0.0`,
/// `gamma = -3.0`.
pub struct LossState {
    pub beta: ParamId,
    pub gamma: ParamId,
}

pub const BETA_INIT: f64 = 0.0;
pub const GAMMA_INIT: f64 = -3.0;

impl LossState {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        let beta = store.add(
            format!("{name}.beta"),
            ndarray::arr0(T::of_f64(BETA_INIT)).into_dyn(),
            ParamKind::NoDecay,
        );
        let gamma = store.add(
            format!("{name}.gamma"),
            ndarray::arr0(T::of_f64(GAMMA_INIT)).into_dyn(),
            ParamKind::NoDecay,
        );
        Self { beta, gamma }
    }
}

/// Mean L1 distance over the batch between `(N,2)` nodes.
fn mean_l1<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Var {
    let n = g.shape(a)[0];
    let d = g.sub(a, b);
    let ad = g.abs(d);
    let s = g.sum_all(ad);
    g.scale(s, T::of_f64(1.0 / n as f64))
}

/// The training loss
/// `|p - p_hat|_1 e^{-beta} + beta + |q - q_hat|_1 e^{-gamma} + gamma`,
/// averaged over the batch. Ground truth `q` is the exact unit heading
/// vector; the prediction enters raw.
pub fn pose_loss<T: Scalar>(
    g: &Graph<T>,
    p: Var,
    q: Var,
    p_hat: Var,
    q_hat: Var,
    beta: Var,
    gamma: Var,
) -> Var {
    let l1p = mean_l1(g, p, p_hat);
    let l1q = mean_l1(g, q, q_hat);
    let neg_beta = g.scale(beta, T::of_f64(-1.0));
    let neg_gamma = g.scale(gamma, T::of_f64(-1.0));
    let wp = g.exp(neg_beta);
    let wq = g.exp(neg_gamma);
    let tp = g.mul(l1p, wp);
    let tq = g.mul(l1q, wq);
    let a = g.add(tp, beta);
    let b = g.add(tq, gamma);
    g.add(a, b)
}

/// Analytic gradients of the loss w.r.t. the balance parameters:
/// `dL/dbeta = 1 - |p - p_hat|_1 e^{-beta}` and the same for gamma.
pub fn loss_grad_state(l1_pos: f64, l1_ori: f64, beta: f64, gamma: f64) -> (f64, f64) {
    (1.0 - l1_pos * (-beta).exp(), 1.0 - l1_ori * (-gamma).exp())
}

/// Median as the midpoint of the two central order statistics.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaNs in error lists"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of an empty list");
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-sequence statistics row of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeqStats {
    pub id: String,
    pub median_pos_m: f64,
    pub mean_pos_m: f64,
    pub median_ori_deg: f64,
    pub mean_ori_deg: f64,
}

/// Median/mean position and orientation errors per evaluation sequence, plus
/// their unweighted averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SeqStats>,
    pub avg: SeqStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    LengthMismatch { predictions: usize, ground_truths: usize, ids: usize },
    Empty,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { predictions, ground_truths, ids } => write!(
                f,
                "evaluate needs aligned lists, got {predictions} predictions, {ground_truths} ground truths, {ids} sequence ids"
            ),
            EvalError::Empty => write!(f, "evaluate needs at least one sample"),
        }
    }
}

impl std::error::Error for EvalError {}

/// Group errors by sequence id, take per-sequence median and mean, then
/// average the statistics over sequences without weighting.
pub fn evaluate(
    predictions: &[PosePrediction],
    ground_truths: &[Pose2D],
    sequence_ids: &[String],
) -> Result<EvalReport, EvalError> {
    if predictions.len() != ground_truths.len() || predictions.len() != sequence_ids.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            ground_truths: ground_truths.len(),
            ids: sequence_ids.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    // preserve first-appearance order of sequence ids
    let mut order: Vec<&String> = Vec::new();
    for id in sequence_ids {
        if !order.contains(&id) {
            order.push(id);
        }
    }
    let mut rows = Vec::with_capacity(order.len());
    for id in order {
        let mut pos_errors = Vec::new();
        let mut ori_errors = Vec::new();
        for ((pred, gt), sid) in predictions.iter().zip(ground_truths).zip(sequence_ids) {
            if sid != id {
                continue;
            }
            pos_errors.push(position_error_m(pred.p, gt.position()));
            let theta_pred = pred.theta().unwrap_or(0.0);
            ori_errors.push(angular_error_deg(theta_pred, gt.theta()));
        }
        rows.push(SeqStats {
            id: id.clone(),
            median_pos_m: median(&pos_errors),
            mean_pos_m: mean(&pos_errors),
            median_ori_deg: median(&ori_errors),
            mean_ori_deg: mean(&ori_errors),
        });
    }
    let avg = SeqStats {
        id: "avg".to_string(),
        median_pos_m: mean(&rows.iter().map(|r| r.median_pos_m).collect::<Vec<_>>()),
        mean_pos_m: mean(&rows.iter().map(|r| r.mean_pos_m).collect::<Vec<_>>()),
        median_ori_deg: mean(&rows.iter().map(|r| r.median_ori_deg).collect::<Vec<_>>()),
        mean_ori_deg: mean(&rows.iter().map(|r| r.mean_ori_deg).collect::<Vec<_>>()),
    };
    Ok(EvalReport { rows, avg })
}

impl EvalReport {
    /// Flat key-value text: one row per sequence plus the `avg` row, columns
    /// exactly `median_pos_m mean_pos_m median_ori_deg mean_ori_deg`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# sequence median_pos_m mean_pos_m median_ori_deg mean_ori_deg\n");
        for row in self.rows.iter().chain(std::iter::once(&self.avg)) {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                row.id, row.median_pos_m, row.mean_pos_m, row.median_ori_deg, row.mean_ori_deg
            ));
        }
        out
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>14} {:>12} {:>16} {:>14}\n",
            "sequence", "median_pos_m", "mean_pos_m", "median_ori_deg", "mean_ori_deg"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.avg)) {
            out.push_str(&format!(
                "{:<10} {:>14.4} {:>12.4} {:>16.3} {:>14.3}\n",
                row.id, row.median_pos_m, row.mean_pos_m, row.median_ori_deg, row.mean_ori_deg
            ));
        }
        out
    }
}

/// Extract per-sample predictions from `(N,2)` output arrays.
pub fn predictions_from_arrays<T: Scalar>(p: &Array2<T>, q: &Array2<T>) -> Vec<PosePrediction> {
    p.rows()
        .into_iter()
        .zip(q.rows())
        .map(|(pr, qr)| PosePrediction {
            p: [pr[0].into_f64(), pr[1].into_f64()],
            q_raw: [qr[0].into_f64(), qr[1].into_f64()],
        })
        .collect()
}

/// Convenience wrapper for graph outputs.
pub fn predictions_from_vars<T: Scalar>(g: &Graph<T>, p: Var, q: Var) -> Vec<PosePrediction> {
    let pv = g.value(p).into_dimensionality::<Ix2>().expect("(N,2) positions");
    let qv = g.value(q).into_dimensionality::<Ix2>().expect("(N,2) orientations");
    predictions_from_arrays(&pv, &qv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{finite_difference, max_rel_err};
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};

    fn head_fixture(d: usize) -> (ParamStore<f64>, RegressionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = RegressionHead::new(&mut store, "head", d, &mut rng);
        (store, head)
    }

    #[test]
    fn head_output_shapes() {
        let (store, head) = head_fixture(16);
        let g = Graph::new();
        let b = store.bind_all(&g);
        let f = g.leaf(Array2::<f64>::ones((3, 16)).into_dyn());
        let (p, q) = head.forward(&g, &b, f);
        assert_eq!(g.shape(p), vec![3, 2]);
        assert_eq!(g.shape(q), vec![3, 2]);
    }

    #[test]
    fn zero_final_layer_gives_constant_bias_prediction() {
        let (mut store, head) = head_fixture(8);
        let (pos_final, _) = head.final_layers();
        *store.value_mut(pos_final.weight) = Array2::<f64>::zeros((128, 2)).into_dyn();
        *store.value_mut(pos_final.bias.unwrap()) = ndarray::arr1(&[3.5, -1.25]).into_dyn();
        let g = Graph::new();
        let b = store.bind_all(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = g.leaf(Array2::from_shape_fn((5, 8), |_| rng.gen_range(-2.0..2.0)).into_dyn());
        let (p, _) = head.forward(&g, &b, f);
        let pv = g.value(p);
        for i in 0..5 {
            assert_eq!(pv[[i, 0]], 3.5);
            assert_eq!(pv[[i, 1]], -1.25);
        }
    }

    #[test]
    fn position_gradient_ignores_orientation_branch() {
        let (store, head) = head_fixture(8);
        let g = Graph::new();
        let b = store.bind_all(&g);
        let f = g.leaf(Array2::<f64>::from_elem((2, 8), 0.7).into_dyn());
        let (p, _q) = head.forward(&g, &b, f);
        let loss = g.sum_all(p);
        let grads = g.backward(loss);
        for id in head.orientation_param_ids() {
            assert!(
                grads.get(b.var(id)).is_none(),
                "orientation branch must not receive gradient from the position output"
            );
        }
    }

    #[test]
    fn loss_anchors() {
        // perfect prediction at (beta, gamma) = (0, -3) -> exactly -3
        let g: Graph<f64> = Graph::new();
        let p = g.leaf(Array2::from_elem((1, 2), 1.0).into_dyn());
        let ph = g.leaf(Array2::from_elem((1, 2), 1.0).into_dyn());
        let q = g.leaf(Array2::from_elem((1, 2), 0.5).into_dyn());
        let qh = g.leaf(Array2::from_elem((1, 2), 0.5).into_dyn());
        let beta = g.scalar(0.0);
        let gamma = g.scalar(-3.0);
        let loss = pose_loss(&g, p, q, ph, qh, beta, gamma);
        assert_eq!(g.scalar_value(loss), -3.0);

        // |p-ph|_1 = 1, |q-qh|_1 = 0, beta = gamma = 0 -> 1
        let g: Graph<f64> = Graph::new();
        let p = g.leaf(ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        let ph = g.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let q = g.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let qh = g.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let beta = g.scalar(0.0);
        let gamma = g.scalar(0.0);
        let loss = pose_loss(&g, p, q, ph, qh, beta, gamma);
        assert!((g.scalar_value(loss) - 1.0).abs() < 1e-15);

        // |p-ph|_1 = 2, beta = 0, |q-qh|_1 = 1, gamma = -3
        //   -> 2 + 0 + e^3 - 3
        let g: Graph<f64> = Graph::new();
        let p = g.leaf(ndarray::arr2(&[[1.0, 1.0]]).into_dyn());
        let ph = g.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let q = g.leaf(ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        let qh = g.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let beta = g.scalar(0.0);
        let gamma = g.scalar(-3.0);
        let loss = pose_loss(&g, p, q, ph, qh, beta, gamma);
        let expect = 2.0 + 3.0_f64.exp() - 3.0;
        assert!((g.scalar_value(loss) - expect).abs() < 1e-9);
        assert!((expect - 19.085536923187668).abs() < 1e-9);
    }

    #[test]
    fn loss_grad_state_examples_and_fd() {
        // perfect prediction -> (1, 1)
        assert_eq!(loss_grad_state(0.0, 0.0, 0.0, -3.0), (1.0, 1.0));
        // l1 = 1, beta = 0 -> stationary in beta
        let (db, _) = loss_grad_state(1.0, 0.0, 0.0, 0.0);
        assert_eq!(db, 0.0);

        // matches central finite differences of the loss in (beta, gamma)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let l1p: f64 = rng.gen_range(0.0..3.0);
            let l1q: f64 = rng.gen_range(0.0..2.0);
            let beta: f64 = rng.gen_range(-2.0..2.0);
            let gamma: f64 = rng.gen_range(-4.0..1.0);
            let f = |b: f64, g0: f64| l1p * (-b).exp() + b + l1q * (-g0).exp() + g0;
            let h = 1e-6;
            let fd_b = (f(beta + h, gamma) - f(beta - h, gamma)) / (2.0 * h);
            let fd_g = (f(beta, gamma + h) - f(beta, gamma - h)) / (2.0 * h);
            let (db, dg) = loss_grad_state(l1p, l1q, beta, gamma);
            assert!((db - fd_b).abs() < 1e-6);
            assert!((dg - fd_g).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_autodiff_matches_analytic_state_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p0 = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-2.0..2.0));
        let ph0 = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-2.0..2.0));
        let q0 = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let qh0 = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let beta0 = 0.4;
        let gamma0 = -1.7;

        let g: Graph<f64> = Graph::new();
        let p = g.leaf(p0.clone().into_dyn());
        let ph = g.leaf(ph0.clone().into_dyn());
        let q = g.leaf(q0.clone().into_dyn());
        let qh = g.leaf(qh0.clone().into_dyn());
        let beta = g.scalar(beta0);
        let gamma = g.scalar(gamma0);
        let loss = pose_loss(&g, p, q, ph, qh, beta, gamma);
        let grads = g.backward(loss);

        let l1p = (&p0 - &ph0).mapv(f64::abs).sum() / 4.0;
        let l1q = (&q0 - &qh0).mapv(f64::abs).sum() / 4.0;
        let (db, dg) = loss_grad_state(l1p, l1q, beta0, gamma0);
        let adb = grads.get(beta).unwrap()[[]];
        let adg = grads.get(gamma).unwrap()[[]];
        assert!((adb - db).abs() < 1e-12);
        assert!((adg - dg).abs() < 1e-12);

        // input gradients vs finite differences
        let eval = |ph: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let p = g.leaf(p0.clone().into_dyn());
            let phv = g.leaf(ph.clone());
            let q = g.leaf(q0.clone().into_dyn());
            let qh = g.leaf(qh0.clone().into_dyn());
            let beta = g.scalar(beta0);
            let gamma = g.scalar(gamma0);
            g.scalar_value(pose_loss(&g, p, q, phv, qh, beta, gamma))
        };
        let fd = finite_difference(&ph0.clone().into_dyn(), 1e-6, eval);
        assert!(max_rel_err(grads.get(ph).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn beta_stationary_point_is_log_error() {
        // the loss in beta is minimized at beta* = ln(l1)
        let l1 = 2.5_f64;
        let (db, _) = loss_grad_state(l1, 0.0, l1.ln(), 0.0);
        assert!(db.abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_in_errors() {
        let loss = |l1p: f64, l1q: f64| l1p * 1.0_f64 + 0.0 + l1q * 3.0_f64.exp() - 3.0;
        assert!(loss(1.0, 0.5) < loss(2.0, 0.5));
        assert!(loss(1.0, 0.5) < loss(1.0, 0.9));
    }

    #[test]
    fn evaluate_hand_examples() {
        let ids: Vec<String> = vec!["a".into(), "a".into(), "a".into()];
        let gts: Vec<Pose2D> = (0..3).map(|_| Pose2D::new(0.0, 0.0, 0.0).unwrap()).collect();
        // errors 1, 2, 3 meters -> median 2, mean 2
        let preds = vec![
            PosePrediction { p: [1.0, 0.0], q_raw: [1.0, 0.0] },
            PosePrediction { p: [2.0, 0.0], q_raw: [1.0, 0.0] },
            PosePrediction { p: [3.0, 0.0], q_raw: [1.0, 0.0] },
        ];
        let report = evaluate(&preds, &gts, &ids).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].median_pos_m, 2.0);
        assert_eq!(report.rows[0].mean_pos_m, 2.0);
        assert_eq!(report.rows[0].median_ori_deg, 0.0);

        // two sequences with medians 1 and 3 -> averaged median 2
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let gts: Vec<Pose2D> = (0..2).map(|_| Pose2D::new(0.0, 0.0, 0.0).unwrap()).collect();
        let preds = vec![
            PosePrediction { p: [1.0, 0.0], q_raw: [1.0, 0.0] },
            PosePrediction { p: [3.0, 0.0], q_raw: [1.0, 0.0] },
        ];
        let report = evaluate(&preds, &gts, &ids).unwrap();
        assert_eq!(report.avg.median_pos_m, 2.0);

        // identity predictions -> all zeros
        let preds = vec![PosePrediction { p: [0.0, 0.0], q_raw: [1.0, 0.0] }; 2];
        let report = evaluate(&preds, &gts, &ids).unwrap();
        assert_eq!(report.avg.median_pos_m, 0.0);
        assert_eq!(report.avg.mean_ori_deg, 0.0);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let ids: Vec<String> =
            (0..n).map(|i| if i % 2 == 0 { "s1".into() } else { "s2".into() }).collect();
        let gts: Vec<Pose2D> = (0..n)
            .map(|_| {
                Pose2D::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
                    .unwrap()
            })
            .collect();
        let preds: Vec<PosePrediction> = (0..n)
            .map(|_| PosePrediction {
                p: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                q_raw: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0) + 1.5],
            })
            .collect();
        let r1 = evaluate(&preds, &gts, &ids).unwrap();

        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let preds2: Vec<_> = order.iter().map(|&i| preds[i]).collect();
        let gts2: Vec<_> = order.iter().map(|&i| gts[i]).collect();
        let ids2: Vec<_> = order.iter().map(|&i| ids[i].clone()).collect();
        let r2 = evaluate(&preds2, &gts2, &ids2).unwrap();
        assert!((r1.avg.median_pos_m - r2.avg.median_pos_m).abs() < 1e-12);
        assert!((r1.avg.mean_ori_deg - r2.avg.mean_ori_deg).abs() < 1e-12);
    }

    #[test]
    fn angular_metric_scale_invariant_in_q() {
        let gt = Pose2D::new(0.0, 0.0, 0.7).unwrap();
        let base = PosePrediction { p: [0.0, 0.0], q_raw: [0.3, 0.4] };
        let scaled = PosePrediction { p: [0.0, 0.0], q_raw: [3.0, 4.0] };
        let e1 = angular_error_deg(base.theta().unwrap(), gt.theta());
        let e2 = angular_error_deg(scaled.theta().unwrap(), gt.theta());
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_length_mismatch_is_an_error() {
        let preds = vec![PosePrediction { p: [0.0; 2], q_raw: [1.0, 0.0] }];
        let gts: Vec<Pose2D> = vec![];
        let ids: Vec<String> = vec!["a".into()];
        assert!(matches!(evaluate(&preds, &gts, &ids), Err(EvalError::LengthMismatch { .. })));
    }
}
