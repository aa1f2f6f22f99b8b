//! Point-cloud feature extraction: farthest point sampling, ball-query
//! grouping, shared-MLP set abstraction, sigmoid-gated self-attention, and
//! a global group-all pooling stage.

use std::fmt;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Bindings, Linear, Mode, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum PointError {
    /// Requested more samples than points are available.
    SampleCount { requested: usize, available: usize },
    BadConfig(String),
}

impl fmt::Display for PointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointError::SampleCount { requested, available } => {
                write!(f, "cannot sample {requested} of {available} points")
            }
            PointError::BadConfig(m) => write!(f, "bad point-branch config: {m}"),
        }
    }
}

impl std::error::Error for PointError {}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Greedy max-min farthest point sampling. The first index is `start`; each
/// following index maximizes the minimum distance to the chosen set, with
/// ties broken toward the lowest index.
pub fn farthest_point_sample(
    points: &[[f64; 2]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>, PointError> {
    let n = points.len();
    if m > n {
        return Err(PointError::SampleCount { requested: m, available: n });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(PointError::BadConfig(format!("start index {start} out of range {n}")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    chosen.push(start);
    let mut last = start;
    while chosen.len() < m {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0usize;
        for i in 0..n {
            let d = dist2(points[i], points[last]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        chosen.push(best_i);
        last = best_i;
    }
    Ok(chosen)
}

/// For each center: the first `k` points (by index order) within `radius`.
/// Fewer matches repeat the first qualifying index; no match repeats the
/// nearest point's index.
pub fn ball_query(
    points: &[[f64; 2]],
    centers: &[[f64; 2]],
    radius: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>, PointError> {
    if radius <= 0.0 {
        return Err(PointError::BadConfig("ball_query radius must be > 0".into()));
    }
    if k == 0 {
        return Err(PointError::BadConfig("ball_query k must be >= 1".into()));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len());
    for &c in centers {
        let mut group = Vec::with_capacity(k);
        for (i, &p) in points.iter().enumerate() {
            if group.len() == k {
                break;
            }
            if dist2(p, c) <= r2 {
                group.push(i);
            }
        }
        if group.is_empty() {
            // nearest point, ties toward the lowest index
            let mut best = f64::INFINITY;
            let mut best_i = 0usize;
            for (i, &p) in points.iter().enumerate() {
                let d = dist2(p, c);
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            group.push(best_i);
        }
        let fill = group[0];
        while group.len() < k {
            group.push(fill);
        }
        out.push(group);
    }
    Ok(out)
}

/// Table-driven set-abstraction layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAbstractionParams {
    pub point_num: usize,
    pub radius: f64,
    pub sample_num: usize,
    pub mlp_widths: Vec<usize>,
}

impl SetAbstractionParams {
    pub fn new(point_num: usize, radius: f64, sample_num: usize, mlp_widths: &[usize]) -> Self {
        Self { point_num, radius, sample_num, mlp_widths: mlp_widths.to_vec() }
    }

    /// The published three-layer configuration: SA1 (256, 0.2, 32,
    /// [16,16,32]), SA2 (128, 0.4, 16, [32,32,64]), SA3 (64, 0.8, 8,
    /// [64,64,64]).
    pub fn table() -> [SetAbstractionParams; 3] {
        [
            Self::new(256, 0.2, 32, &[16, 16, 32]),
            Self::new(128, 0.4, 16, &[32, 32, 64]),
            Self::new(64, 0.8, 8, &[64, 64, 64]),
        ]
    }

    /// Scaled-down chain for `n_points` inputs, keeping the published MLP
    /// widths and radii but shrinking the point counts proportionally.
    pub fn scaled(n_points: usize) -> [SetAbstractionParams; 3] {
        let p1 = (n_points / 4).max(4);
        let p2 = (p1 / 2).max(2);
        let p3 = (p2 / 2).max(1);
        [
            Self::new(p1, 0.2, 32.min(n_points), &[16, 16, 32]),
            Self::new(p2, 0.4, 16, &[32, 32, 64]),
            Self::new(p3, 0.8, 8, &[64, 64, 64]),
        ]
    }
}

/// Centers plus per-center features produced by one abstraction level.
pub struct PointFeatureMatrix {
    pub centers: Vec<[f64; 2]>,
    /// `(M, C)` feature node in the graph.
    pub features: Var,
}

/// One set-abstraction layer: sample centers, group neighbors, encode each
/// group with a shared MLP on center-relative coordinates concatenated with
/// inherited features, then max-pool over the group.
pub struct SetAbstractionLayer {
    pub params: SetAbstractionParams,
    mlps: Vec<Linear>,
}

impl SetAbstractionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        params: SetAbstractionParams,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!params.mlp_widths.is_empty(), "mlp_widths must be nonempty");
        let mut mlps = Vec::new();
        let mut c_in = 2 + in_features; // relative coords + inherited features
        for (i, &w) in params.mlp_widths.iter().enumerate() {
            mlps.push(Linear::new(store, &format!("{name}.mlp{i}"), c_in, w, true, rng));
            c_in = w;
        }
        Self { params, mlps }
    }

    pub fn out_features(&self) -> usize {
        *self.params.mlp_widths.last().expect("nonempty")
    }

    /// Apply to `coords` (length N) with optional `(N, C)` features.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        coords: &[[f64; 2]],
        features: Option<Var>,
        fps_start: usize,
    ) -> Result<PointFeatureMatrix, PointError> {
        let m = self.params.point_num;
        let k = self.params.sample_num;
        let center_idx = farthest_point_sample(coords, m, fps_start)?;
        let centers: Vec<[f64; 2]> = center_idx.iter().map(|&i| coords[i]).collect();
        let groups = ball_query(coords, &centers, self.params.radius, k)?;

        // (M*K, 2) center-relative coordinates as a constant leaf
        let mut rel = Array2::<T>::zeros((m * k, 2));
        let mut flat_idx = Vec::with_capacity(m * k);
        for (gi, group) in groups.iter().enumerate() {
            for (slot, &pi) in group.iter().enumerate() {
                rel[[gi * k + slot, 0]] = T::of_f64(coords[pi][0] - centers[gi][0]);
                rel[[gi * k + slot, 1]] = T::of_f64(coords[pi][1] - centers[gi][1]);
                flat_idx.push(pi);
            }
        }
        let rel = g.leaf(rel.into_dyn());
        let grouped = match features {
            Some(f) => {
                let gathered = g.gather_rows(f, flat_idx);
                g.concat(&[rel, gathered], 1)
            }
            None => rel,
        };

        let mut y = grouped;
        for mlp in &self.mlps {
            y = mlp.forward(g, b, y);
            y = g.relu(y);
        }
        let c_out = self.out_features();
        let y = g.reshape(y, &[m, k, c_out]);
        let pooled = g.max_axis(y, 1);
        Ok(PointFeatureMatrix { centers, features: pooled })
    }
}

/// Gated self-attention: `out = F * sigmoid(sharedMLP(F))`, shapes preserved.
pub struct PointSelfAttention {
    mlp1: Linear,
    mlp2: Linear,
}

impl PointSelfAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            mlp1: Linear::new(store, &format!("{name}.mlp1"), channels, hidden, true, rng),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), hidden, channels, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, f: Var) -> Var {
        let h = self.mlp1.forward(g, b, f);
        let h = g.relu(h);
        let h = self.mlp2.forward(g, b, h);
        let w = g.sigmoid(h);
        g.mul(f, w)
    }
}

/// Group-all stage: shared per-point MLP to `d_P` channels, then a global
/// max-pool over the points.
pub struct GroupAll {
    mlp: Linear,
    pub d_p: usize,
}

impl GroupAll {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_p: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self { mlp: Linear::new(store, &format!("{name}.mlp"), channels, d_p, true, rng), d_p }
    }

    /// `(M, C) -> (d_P,)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, f: Var) -> Var {
        let y = self.mlp.forward(g, b, f);
        let y = g.relu(y);
        g.max_axis(y, 0)
    }
}

/// Configuration of the point branch.
#[derive(Debug, Clone)]
pub struct PointBranchConfig {
    pub d_p: usize,
    pub sa: [SetAbstractionParams; 3],
}

impl PointBranchConfig {
    pub fn with_table(d_p: usize) -> Self {
        Self { d_p, sa: SetAbstractionParams::table() }
    }
}

/// SA1 -> SA2 -> SA3 -> gated self-attention -> group-all.
pub struct PointBranch {
    pub sa: Vec<SetAbstractionLayer>,
    pub attn: PointSelfAttention,
    pub group: GroupAll,
    pub d_p: usize,
}

impl PointBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &PointBranchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut sa = Vec::new();
        let mut in_features = 0usize;
        for (i, params) in cfg.sa.iter().enumerate() {
            let layer =
                SetAbstractionLayer::new(store, &format!("{name}.sa{}", i + 1), in_features, params.clone(), rng);
            in_features = layer.out_features();
            sa.push(layer);
        }
        let attn = PointSelfAttention::new(store, &format!("{name}.attn"), in_features, rng);
        let group = GroupAll::new(store, &format!("{name}.group"), in_features, cfg.d_p, rng);
        Self { sa, attn, group, d_p: cfg.d_p }
    }

    /// Extract `f_P` for one scan of fixed size; the FPS start index is 0 in
    /// eval mode and seed-drawn in train mode.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        scan: &[[f64; 2]],
        mode: &mut Mode<'_>,
    ) -> Result<Var, PointError> {
        let mut coords: Vec<[f64; 2]> = scan.to_vec();
        let mut features: Option<Var> = None;
        for layer in &self.sa {
            let start = match mode {
                Mode::Train { rng } => rng.gen_range(0..coords.len()),
                Mode::Eval => 0,
            };
            let out = layer.forward(g, b, &coords, features, start)?;
            coords = out.centers;
            features = Some(out.features);
        }
        let f = features.expect("at least one abstraction layer");
        let gated = self.attn.forward(g, b, f);
        Ok(self.group.forward(g, b, gated))
    }
}

/// Scan rows as a point slice (helper for `(N,2)` arrays).
pub fn array_to_points(scan: &Array2<f64>) -> Vec<[f64; 2]> {
    scan.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Scan points as a `(N, 2)` graph leaf.
pub fn points_to_leaf<T: Scalar>(g: &Graph<T>, points: &[[f64; 2]]) -> Var {
    let mut arr = ArrayD::<T>::zeros(IxDyn(&[points.len(), 2]));
    for (i, p) in points.iter().enumerate() {
        arr[[i, 0]] = T::of_f64(p[0]);
        arr[[i, 1]] = T::of_f64(p[1]);
    }
    g.leaf(arr)
}
