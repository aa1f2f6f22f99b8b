//! Synthetic planar world: a rectangular room with axis-aligned box
//! obstacles, a 2D range scanner and a column-raycast pseudo-camera.
//!
//! Every surface carries a color id so rendered views vary distinctively
//! with pose; ray casting against the same segments produces the scans.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::DataError;
use crate::geom::Pose2D;

/// One axis-aligned surface segment with a paintable color id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub color_id: u32,
}

/// Axis-aligned rectangular obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Obstacle {
    fn contains(&self, p: [f64; 2], margin: f64) -> bool {
        p[0] >= self.min[0] - margin
            && p[0] <= self.max[0] + margin
            && p[1] >= self.min[1] - margin
            && p[1] <= self.max[1] + margin
    }

    fn overlaps(&self, other: &Obstacle, clearance: f64) -> bool {
        self.min[0] - clearance < other.max[0]
            && self.max[0] + clearance > other.min[0]
            && self.min[1] - clearance < other.max[1]
            && self.max[1] + clearance > other.min[1]
    }
}

/// Sensor and generator configuration for one synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    /// Room extent in meters, `[width, height]`.
    pub extent: [f64; 2],
    pub obstacle_count: usize,
    /// LiDAR field of view in degrees (360 = full sweep).
    pub lidar_fov: f64,
    /// LiDAR angular resolution in degrees.
    pub lidar_angular_res: f64,
    /// Maximum LiDAR range in meters; farther returns are dropped.
    pub lidar_max_range: f64,
    /// Rendered image size `(width, height)` in pixels.
    pub image_size: (u32, u32),
    /// Camera horizontal field of view in degrees.
    pub camera_hfov: f64,
    /// Distance between consecutive trajectory poses, meters.
    pub trajectory_step: f64,
    /// Standard deviation of the range noise, meters (clamped at 3 sigma).
    pub noise_sigma_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: [12.0, 10.0],
            obstacle_count: 6,
            lidar_fov: 360.0,
            lidar_angular_res: 0.35,
            lidar_max_range: 12.0,
            image_size: (420, 240),
            camera_hfov: 87.0,
            trajectory_step: 0.12,
            noise_sigma_range: 0.01,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(DataError::Config("world extent must be positive".into()));
        }
        if self.lidar_angular_res <= 0.0 {
            return Err(DataError::Config("lidar angular resolution must be > 0".into()));
        }
        if !(self.camera_hfov > 0.0 && self.camera_hfov < 180.0) {
            return Err(DataError::Config("camera hfov must be in (0, 180) degrees".into()));
        }
        if self.lidar_max_range <= 0.0 {
            return Err(DataError::Config("lidar max range must be > 0".into()));
        }
        if self.trajectory_step <= 0.0 {
            return Err(DataError::Config("trajectory step must be > 0".into()));
        }
        Ok(())
    }
}

/// The generated world: boundary plus obstacles, flattened into colored
/// segments for ray casting.
#[derive(Debug, Clone)]
pub struct World {
    pub extent: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub segments: Vec<Segment>,
}

impl World {
    /// True if `p` lies in free space with the given clearance from all
    /// obstacles and the boundary.
    pub fn is_free(&self, p: [f64; 2], clearance: f64) -> bool {
        if p[0] < clearance
            || p[1] < clearance
            || p[0] > self.extent[0] - clearance
            || p[1] > self.extent[1] - clearance
        {
            return false;
        }
        !self.obstacles.iter().any(|o| o.contains(p, clearance))
    }

    /// Nearest intersection of the ray `origin + t * dir` (t > 0) with any
    /// segment: returns `(range, segment index, hit point)`.
    pub fn cast_ray(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<(f64, usize, [f64; 2])> {
        let mut best: Option<(f64, usize, [f64; 2])> = None;
        for (si, seg) in self.segments.iter().enumerate() {
            let e = [seg.b[0] - seg.a[0], seg.b[1] - seg.a[1]];
            let denom = dir[0] * e[1] - dir[1] * e[0];
            if denom.abs() < 1e-15 {
                continue; // parallel
            }
            let diff = [seg.a[0] - origin[0], seg.a[1] - origin[1]];
            let t = (diff[0] * e[1] - diff[1] * e[0]) / denom;
            let u = (diff[0] * dir[1] - diff[1] * dir[0]) / denom;
            if t > 1e-9 && (0.0..=1.0).contains(&u) {
                let better = match best {
                    Some((bt, _, _)) => t < bt,
                    None => true,
                };
                if better {
                    let hit = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
                    best = Some((t, si, hit));
                }
            }
        }
        best
    }
}

fn rect_segments(min: [f64; 2], max: [f64; 2], first_color: u32, max_piece: f64) -> Vec<Segment> {
    // Walls are split into pieces of at most `max_piece` meters so each piece
    // gets its own color id; this is what makes views pose-discriminative.
    let corners = [
        ([min[0], min[1]], [max[0], min[1]]),
        ([max[0], min[1]], [max[0], max[1]]),
        ([max[0], max[1]], [min[0], max[1]]),
        ([min[0], max[1]], [min[0], min[1]]),
    ];
    let mut segs = Vec::new();
    let mut color = first_color;
    for (a, b) in corners {
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let pieces = (len / max_piece).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let t0 = k as f64 / pieces as f64;
            let t1 = (k + 1) as f64 / pieces as f64;
            segs.push(Segment {
                a: [a[0] + t0 * (b[0] - a[0]), a[1] + t0 * (b[1] - a[1])],
                b: [a[0] + t1 * (b[0] - a[0]), a[1] + t1 * (b[1] - a[1])],
                color_id: color,
            });
            color += 1;
        }
    }
    segs
}

/// Build a world from the config; deterministic under the config seed.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64_stream(cfg.seed, 0);
    let clearance = cfg.trajectory_step.max(0.3);

    let mut world = World {
        extent: cfg.extent,
        obstacles: Vec::new(),
        segments: rect_segments([0.0, 0.0], cfg.extent, 0, 2.5),
    };
    let mut next_color = world.segments.len() as u32;

    for oi in 0..cfg.obstacle_count {
        let mut placed = false;
        for _attempt in 0..200 {
            let w = rng.gen_range(0.4..1.4);
            let h = rng.gen_range(0.4..1.4);
            let margin = clearance + 0.2;
            if cfg.extent[0] - w - 2.0 * margin <= 0.0 || cfg.extent[1] - h - 2.0 * margin <= 0.0 {
                continue;
            }
            let x = rng.gen_range(margin..cfg.extent[0] - w - margin);
            let y = rng.gen_range(margin..cfg.extent[1] - h - margin);
            let cand = Obstacle { min: [x, y], max: [x + w, y + h] };
            // Keep a traversable corridor between obstacles and the walls.
            if world.obstacles.iter().any(|o| o.overlaps(&cand, 2.0 * clearance + 0.2)) {
                continue;
            }
            world.segments.extend(rect_segments(cand.min, cand.max, next_color, 1.0));
            next_color = world.segments.len() as u32;
            world.obstacles.push(cand);
            placed = true;
            break;
        }
        if !placed {
            return Err(DataError::Generation(format!(
                "could not place obstacle {oi} of {} after 200 attempts; extent {:?} too crowded",
                cfg.obstacle_count, cfg.extent
            )));
        }
    }
    Ok(world)
}

/// Angles of the LiDAR sweep relative to the robot heading, radians.
pub fn scan_angles(cfg: &WorldConfig) -> Vec<f64> {
    let res = cfg.lidar_angular_res.to_radians();
    let fov = cfg.lidar_fov.to_radians();
    let full = 2.0 * std::f64::consts::PI;
    if fov >= full - 1e-12 {
        let n = (full / res).floor() as usize;
        (0..n).map(|k| k as f64 * res).collect()
    } else {
        let n = (fov / res).floor() as usize;
        (0..=n).map(|k| -fov / 2.0 + k as f64 * res).collect()
    }
}

/// Simulate one scan from `pose`. Points are in the sensor frame; returns
/// beyond the max range are dropped; range noise is Gaussian clamped at
/// three sigma so points stay near the surfaces they sample.
pub fn raycast_scan(
    world: &World,
    pose: &Pose2D,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 2]>, DataError> {
    if !world.is_free([pose.x, pose.y], 1e-9) {
        return Err(DataError::InvalidPose { x: pose.x, y: pose.y });
    }
    let normal = if cfg.noise_sigma_range > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma_range).expect("sigma > 0"))
    } else {
        None
    };
    let mut points = Vec::new();
    for rel in scan_angles(cfg) {
        let ang = pose.theta() + rel;
        let dir = [ang.cos(), ang.sin()];
        let Some((range, _, _)) = world.cast_ray([pose.x, pose.y], dir) else {
            continue;
        };
        if range > cfg.lidar_max_range {
            continue;
        }
        let mut r = range;
        if let Some(n) = &normal {
            let eps = n.sample(rng).clamp(-3.0 * cfg.noise_sigma_range, 3.0 * cfg.noise_sigma_range);
            r = (r + eps).max(1e-3);
            if r > cfg.lidar_max_range {
                continue;
            }
        }
        points.push([r * rel.cos(), r * rel.sin()]);
    }
    Ok(points)
}

/// Color palette: distinct hues per surface id, full saturation.
pub fn surface_color(color_id: u32) -> [u8; 3] {
    let hue = (color_id as f64 * 49.0) % 360.0;
    hsv_to_rgb(hue, 0.85, 1.0)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((g + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((b + m) * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Render the pseudo-camera view: one ray per pixel column over the camera
/// fov, painting the hit surface's color shaded by distance, with sky and
/// floor bands around a horizon whose wall-band height scales with 1/range.
pub fn render_view(world: &World, pose: &Pose2D, cfg: &WorldConfig) -> Result<image::RgbImage, DataError> {
    if !world.is_free([pose.x, pose.y], 1e-9) {
        return Err(DataError::InvalidPose { x: pose.x, y: pose.y });
    }
    let (w, h) = cfg.image_size;
    let hfov = cfg.camera_hfov.to_radians();
    let mut img = image::RgbImage::new(w, h);
    let half_h = h as f64 / 2.0;

    for col in 0..w {
        // left edge of the image looks toward +hfov/2
        let frac = (col as f64 + 0.5) / w as f64;
        let ang = pose.theta() + hfov * (0.5 - frac);
        let dir = [ang.cos(), ang.sin()];
        let hit = world.cast_ray([pose.x, pose.y], dir);

        let (band, color) = match hit {
            Some((range, si, hitp)) => {
                let seg = &world.segments[si];
                let base = surface_color(seg.color_id);
                // distance shading plus a stripe pattern along the surface so
                // lateral motion changes the view, not just rotation
                let along = ((hitp[0] - seg.a[0]).powi(2) + (hitp[1] - seg.a[1]).powi(2)).sqrt();
                let stripe = 0.8 + 0.2 * (along * 2.0 * std::f64::consts::PI / 1.5).sin();
                let shade = stripe / (1.0 + 0.12 * range);
                let color = [
                    (base[0] as f64 * shade).round().clamp(0.0, 255.0) as u8,
                    (base[1] as f64 * shade).round().clamp(0.0, 255.0) as u8,
                    (base[2] as f64 * shade).round().clamp(0.0, 255.0) as u8,
                ];
                let band = (half_h * 1.1 / range.max(0.05)).min(half_h);
                (band, color)
            }
            None => (0.0, [0, 0, 0]),
        };

        for row in 0..h {
            let y = row as f64 + 0.5;
            let px = if (y - half_h).abs() <= band {
                color
            } else if y < half_h {
                // sky gradient
                let t = y / half_h;
                [(110.0 + 60.0 * t) as u8, (150.0 + 40.0 * t) as u8, 235]
            } else {
                // floor gradient
                let t = (y - half_h) / half_h;
                let v = 120.0 - 60.0 * t;
                [v as u8, (v * 0.9) as u8, (v * 0.8) as u8]
            };
            img.put_pixel(col, row, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Smoothed random-waypoint walk through free space; one pose per step.
pub fn generate_trajectory(
    world: &World,
    cfg: &WorldConfig,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pose2D>, DataError> {
    let clearance = cfg.trajectory_step.max(0.3);
    let sample_free = |rng: &mut ChaCha8Rng| -> Result<[f64; 2], DataError> {
        for _ in 0..1000 {
            let p = [
                rng.gen_range(clearance..world.extent[0] - clearance),
                rng.gen_range(clearance..world.extent[1] - clearance),
            ];
            if world.is_free(p, clearance) {
                return Ok(p);
            }
        }
        Err(DataError::Generation("could not sample a free position".into()))
    };
    let segment_free = |a: [f64; 2], b: [f64; 2]| -> bool {
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = (len / (cfg.trajectory_step * 0.5)).ceil().max(1.0) as usize;
        (0..=steps).all(|k| {
            let t = k as f64 / steps as f64;
            world.is_free([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], clearance * 0.9)
        })
    };

    let mut pos = sample_free(rng)?;
    let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut poses = Vec::with_capacity(length);
    let mut target = pos;
    let max_turn = 0.35; // radians per step

    while poses.len() < length {
        // pick a new reachable waypoint when close to the current one
        let dist = ((target[0] - pos[0]).powi(2) + (target[1] - pos[1]).powi(2)).sqrt();
        if dist < 2.0 * cfg.trajectory_step {
            let mut found = false;
            for _ in 0..200 {
                let cand = sample_free(rng)?;
                let d = ((cand[0] - pos[0]).powi(2) + (cand[1] - pos[1]).powi(2)).sqrt();
                if d > 1.0 && segment_free(pos, cand) {
                    target = cand;
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(DataError::Generation(
                    "could not find a reachable waypoint; world too crowded".into(),
                ));
            }
        }
        let desired = (target[1] - pos[1]).atan2(target[0] - pos[0]);
        let diff = crate::geom::wrap_angle(desired - heading);
        heading = crate::geom::wrap_angle(heading + diff.clamp(-max_turn, max_turn));
        let step = [heading.cos() * cfg.trajectory_step, heading.sin() * cfg.trajectory_step];
        let next = [pos[0] + step[0], pos[1] + step[1]];
        if world.is_free(next, clearance * 0.9) {
            pos = next;
        }
        // heading wobble so orientation is not a pure function of position
        let wobble = rng.gen_range(-0.02..0.02);
        poses.push(Pose2D::new(pos[0], pos[1], heading + wobble).expect("finite pose"));
    }
    Ok(poses)
}

/// Seed helper: independent deterministic streams per (seed, stream).
pub trait SeedStream {
    fn seed_from_u64_stream(seed: u64, stream: u64) -> Self;
}

impl SeedStream for ChaCha8Rng {
    fn seed_from_u64_stream(seed: u64, stream: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn centered_pose(world: &World) -> Pose2D {
        Pose2D::new(world.extent[0] / 2.0, world.extent[1] / 2.0, 0.0).unwrap()
    }

    #[test]
    fn world_is_deterministic_under_seed() {
        let cfg = WorldConfig { seed: 0, ..WorldConfig::default() };
        let w1 = generate_world(&cfg).unwrap();
        let w2 = generate_world(&cfg).unwrap();
        assert_eq!(w1.obstacles.len(), w2.obstacles.len());
        for (a, b) in w1.obstacles.iter().zip(&w2.obstacles) {
            assert_eq!(a, b);
        }
        assert_eq!(w1.segments.len(), w2.segments.len());
    }

    #[test]
    fn zero_obstacles_gives_empty_room() {
        let cfg = WorldConfig { obstacle_count: 0, ..WorldConfig::default() };
        let w = generate_world(&cfg).unwrap();
        assert!(w.obstacles.is_empty());
        // 2*(12+10) meters of wall in <=2.5 m pieces
        assert!(w.segments.len() >= 18);
    }

    #[test]
    fn obstacles_strictly_inside_extent() {
        for seed in 0..5 {
            let cfg = WorldConfig { seed, obstacle_count: 5, ..WorldConfig::default() };
            let w = generate_world(&cfg).unwrap();
            for o in &w.obstacles {
                assert!(o.min[0] > 0.0 && o.min[1] > 0.0);
                assert!(o.max[0] < cfg.extent[0] && o.max[1] < cfg.extent[1]);
            }
        }
    }

    #[test]
    fn empty_room_ranges_match_wall_distances() {
        let cfg = WorldConfig {
            obstacle_count: 0,
            extent: [10.0, 10.0],
            noise_sigma_range: 0.0,
            lidar_max_range: 50.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let pose = centered_pose(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = raycast_scan(&w, &pose, &cfg, &mut rng).unwrap();
        assert_eq!(scan.len(), scan_angles(&cfg).len());
        for p in &scan {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let ang = p[1].atan2(p[0]);
            // analytic distance from the room center to the walls
            let dx = if ang.cos() > 0.0 { 5.0 / ang.cos() } else if ang.cos() < 0.0 { -5.0 / ang.cos() } else { f64::INFINITY };
            let dy = if ang.sin() > 0.0 { 5.0 / ang.sin() } else if ang.sin() < 0.0 { -5.0 / ang.sin() } else { f64::INFINITY };
            let expect = dx.min(dy);
            assert!((r - expect).abs() < 1e-9, "range {r} vs analytic {expect}");
        }
    }

    #[test]
    fn scan_count_bound_at_default_resolution() {
        let cfg = WorldConfig { obstacle_count: 0, noise_sigma_range: 0.0, ..WorldConfig::default() };
        let w = generate_world(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = raycast_scan(&w, &centered_pose(&w), &cfg, &mut rng).unwrap();
        assert!(scan.len() <= (360.0_f64 / 0.35).ceil() as usize); // 1029
        assert_eq!(scan_angles(&cfg).len(), 1028);
    }

    #[test]
    fn max_range_drops_far_walls() {
        let cfg = WorldConfig {
            obstacle_count: 0,
            extent: [30.0, 30.0],
            lidar_max_range: 12.0,
            noise_sigma_range: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = raycast_scan(&w, &centered_pose(&w), &cfg, &mut rng).unwrap();
        assert!(scan.is_empty(), "center of a 30x30 room sees nothing within 12 m");
    }

    #[test]
    fn pose_inside_obstacle_is_rejected() {
        let cfg = WorldConfig { seed: 3, obstacle_count: 4, ..WorldConfig::default() };
        let w = generate_world(&cfg).unwrap();
        let o = w.obstacles[0];
        let inside = Pose2D::new((o.min[0] + o.max[0]) / 2.0, (o.min[1] + o.max[1]) / 2.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match raycast_scan(&w, &inside, &cfg, &mut rng) {
            Err(DataError::InvalidPose { .. }) => {}
            other => panic!("expected invalid-pose error, got {other:?}"),
        }
    }

    #[test]
    fn render_is_deterministic_and_sized() {
        let cfg = WorldConfig { seed: 1, obstacle_count: 3, ..WorldConfig::default() };
        let w = generate_world(&cfg).unwrap();
        let pose = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            generate_trajectory(&w, &cfg, 1, &mut rng).unwrap()[0]
        };
        let i1 = render_view(&w, &pose, &cfg).unwrap();
        let i2 = render_view(&w, &pose, &cfg).unwrap();
        assert_eq!(i1.dimensions(), (420, 240));
        assert_eq!(i1.as_raw(), i2.as_raw());
    }

    #[test]
    fn rotating_by_hfov_shifts_surfaces_out_of_frame() {
        // Single marked wall piece in an otherwise huge room: after rotating
        // the camera by its full fov, the piece's hue must vanish.
        let mut world = World {
            extent: [40.0, 40.0],
            obstacles: vec![],
            segments: rect_segments([0.0, 0.0], [40.0, 40.0], 0, 1000.0),
        };
        let marked = 500;
        world.segments.push(Segment { a: [19.0, 30.0], b: [21.0, 30.0], color_id: marked });
        let cfg = WorldConfig { extent: [40.0, 40.0], ..WorldConfig::default() };
        let pose1 = Pose2D::new(20.0, 20.0, std::f64::consts::FRAC_PI_2).unwrap();
        let img1 = render_view(&world, &pose1, &cfg).unwrap();
        let pose2 = Pose2D::new(20.0, 20.0, std::f64::consts::FRAC_PI_2 + cfg.camera_hfov.to_radians()).unwrap();
        let img2 = render_view(&world, &pose2, &cfg).unwrap();

        let target = surface_color(marked);
        let hue_of = |p: &image::Rgb<u8>| -> f64 {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let mx = r.max(g).max(b);
            let mn = r.min(g).min(b);
            if mx == mn {
                return -1.0;
            }
            let d = mx - mn;
            60.0 * if mx == r {
                ((g - b) / d).rem_euclid(6.0)
            } else if mx == g {
                (b - r) / d + 2.0
            } else {
                (r - g) / d + 4.0
            }
        };
        let target_hue = hue_of(&image::Rgb(target));
        let count_hits = |img: &image::RgbImage| -> usize {
            let mid = img.height() / 2;
            (0..img.width())
                .filter(|&c| {
                    let h = hue_of(img.get_pixel(c, mid));
                    h >= 0.0 && (h - target_hue).abs() < 4.0
                })
                .count()
        };
        assert!(count_hits(&img1) > 0, "marked wall visible before rotation");
        assert_eq!(count_hits(&img2), 0, "marked wall gone after rotating by hfov");
    }

    #[test]
    fn trajectory_stays_in_free_space() {
        let cfg = WorldConfig { seed: 5, obstacle_count: 5, ..WorldConfig::default() };
        let w = generate_world(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let poses = generate_trajectory(&w, &cfg, 300, &mut rng).unwrap();
        assert_eq!(poses.len(), 300);
        for p in &poses {
            assert!(w.is_free([p.x, p.y], 0.0));
        }
    }
}
