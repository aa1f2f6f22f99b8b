//! On-disk dataset format, loading, preprocessing, and the synthetic
//! planar-world generator.
//!
//! Layout (all text files UTF-8, newline-terminated):
//!
//! ```text
//! <root>/<set-id>/<seq-id>/
//!     rgb/<frame:06>.png      8-bit RGB
//!     scan/<frame:06>.txt     one point per line: "<x> <y>" (meters, sensor frame)
//!     poses.txt               one line per frame: "<frame> <x> <y> <theta>"
//!     split.txt               "train" or "eval"
//! <root>/norm.txt             6 floats: per-channel mean and std
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand_chacha::ChaCha8Rng;

pub mod image_ops;
pub mod scan_ops;
pub mod world;

pub use image_ops::{
    color_jitter, compute_norm, preprocess_image, resize_short_side, scale_and_crop, ChannelNorm,
    JitterConfig, PreprocessMode,
};
pub use scan_ops::sample_scan;
pub use world::{
    generate_trajectory, generate_world, raycast_scan, render_view, scan_angles, SeedStream,
    Segment, World, WorldConfig,
};

use crate::geom::Pose2D;

/// Upper bound on points per scan (the sensor's 0.313 degree floor at 360
/// degrees yields about 1150 returns).
pub const SCAN_POINT_CAP: usize = 1150;

/// Errors from dataset generation, loading and preprocessing.
#[derive(Debug)]
pub enum DataError {
    Config(String),
    Generation(String),
    /// A pose outside free space was given to a sensor simulation.
    InvalidPose { x: f64, y: f64 },
    DegenerateInput(String),
    /// Missing or mismatched files for a frame.
    Consistency { path: PathBuf, frame: Option<u64>, message: String },
    /// Unparseable file contents.
    Format { path: PathBuf, message: String },
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Config(m) => write!(f, "config error: {m}"),
            DataError::Generation(m) => write!(f, "generation error: {m}"),
            DataError::InvalidPose { x, y } => {
                write!(f, "pose ({x:.3}, {y:.3}) is not in free space")
            }
            DataError::DegenerateInput(m) => write!(f, "degenerate input: {m}"),
            DataError::Consistency { path, frame, message } => match frame {
                Some(fr) => write!(f, "{}: frame {fr}: {message}", path.display()),
                None => write!(f, "{}: {message}", path.display()),
            },
            DataError::Format { path, message } => write!(f, "{}: {message}", path.display()),
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One synchronized (image, scan, pose) tuple.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    /// Scan points in the sensor frame, meters.
    pub scan: Vec<[f64; 2]>,
    /// Ground-truth pose in the map frame.
    pub pose: Pose2D,
    pub frame_index: u64,
}

/// Train / eval split marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// An ordered run of samples sharing one trajectory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// Length and split request for one generated sequence.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub id: String,
    pub length: usize,
    pub split: Split,
}

impl SequenceSpec {
    /// The ten-sequence layout of the paper's small indoor set: lengths
    /// 394..416 with sequences 3, 6 and 9 held out for evaluation.
    pub fn set01() -> Vec<SequenceSpec> {
        let lengths = [394, 374, 389, 359, 429, 401, 390, 404, 408, 416];
        let eval = [2usize, 5, 8];
        lengths
            .iter()
            .enumerate()
            .map(|(i, &length)| SequenceSpec {
                id: format!("seq-{:02}", i + 1),
                length,
                split: if eval.contains(&i) { Split::Eval } else { Split::Train },
            })
            .collect()
    }

    /// Desk-scale variant: `train` + `eval` sequences of `length` frames.
    pub fn desk(train: usize, eval: usize, length: usize) -> Vec<SequenceSpec> {
        (0..train + eval)
            .map(|i| SequenceSpec {
                id: format!("seq-{:02}", i + 1),
                length,
                split: if i < train { Split::Train } else { Split::Eval },
            })
            .collect()
    }
}

fn format_float(v: f64) -> String {
    // shortest round-trip representation; parses back bit-identically
    format!("{v}")
}

/// Write one generated sequence to `<set_dir>/<id>/`.
fn write_sequence(set_dir: &Path, seq: &Sequence) -> Result<(), DataError> {
    let dir = set_dir.join(&seq.id);
    let rgb = dir.join("rgb");
    let scan = dir.join("scan");
    fs::create_dir_all(&rgb).map_err(io_err(&rgb))?;
    fs::create_dir_all(&scan).map_err(io_err(&scan))?;

    let mut poses = String::new();
    for s in &seq.samples {
        let img_path = rgb.join(format!("{:06}.png", s.frame_index));
        s.image
            .save(&img_path)
            .map_err(|e| DataError::Format { path: img_path.clone(), message: e.to_string() })?;

        let scan_path = scan.join(format!("{:06}.txt", s.frame_index));
        let mut body = String::new();
        for p in &s.scan {
            body.push_str(&format!("{} {}\n", format_float(p[0]), format_float(p[1])));
        }
        fs::write(&scan_path, body).map_err(io_err(&scan_path))?;

        poses.push_str(&format!(
            "{} {} {} {}\n",
            s.frame_index,
            format_float(s.pose.x),
            format_float(s.pose.y),
            format_float(s.pose.theta())
        ));
    }
    let poses_path = dir.join("poses.txt");
    fs::write(&poses_path, poses).map_err(io_err(&poses_path))?;
    let split_path = dir.join("split.txt");
    fs::write(&split_path, format!("{}\n", seq.split.as_str())).map_err(io_err(&split_path))?;
    Ok(())
}

/// Write `norm.txt` at the dataset root.
pub fn write_norm(root: &Path, norm: &ChannelNorm) -> Result<(), DataError> {
    let path = root.join("norm.txt");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(
        f,
        "{} {} {} {} {} {}",
        norm.mean[0], norm.mean[1], norm.mean[2], norm.std[0], norm.std[1], norm.std[2]
    )
    .map_err(io_err(&path))?;
    Ok(())
}

/// Read `norm.txt` from the dataset root.
pub fn read_norm(root: &Path) -> Result<ChannelNorm, DataError> {
    let path = root.join("norm.txt");
    let body = fs::read_to_string(&path).map_err(io_err(&path))?;
    let vals: Vec<f64> = body.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if vals.len() != 6 {
        return Err(DataError::Format {
            path,
            message: format!("expected 6 floats in norm.txt, found {}", vals.len()),
        });
    }
    Ok(ChannelNorm { mean: [vals[0], vals[1], vals[2]], std: [vals[3], vals[4], vals[5]] })
}

/// Write the world geometry for later plotting (one segment per line).
pub fn write_world(root: &Path, w: &World) -> Result<(), DataError> {
    let path = root.join("world.txt");
    let mut body = format!("extent {} {}\n", format_float(w.extent[0]), format_float(w.extent[1]));
    for s in &w.segments {
        body.push_str(&format!(
            "segment {} {} {} {} {}\n",
            format_float(s.a[0]),
            format_float(s.a[1]),
            format_float(s.b[0]),
            format_float(s.b[1]),
            s.color_id
        ));
    }
    fs::write(&path, body).map_err(io_err(&path))
}

/// Generate a full dataset: one world per set, one trajectory per sequence,
/// rendered images and simulated scans per frame, plus normalization
/// constants computed from the training split.
pub fn generate_dataset(
    cfg: &WorldConfig,
    set_id: &str,
    specs: &[SequenceSpec],
    out_root: &Path,
) -> Result<Vec<Sequence>, DataError> {
    cfg.validate()?;
    let world = generate_world(cfg)?;
    let set_dir = out_root.join(set_id);
    fs::create_dir_all(&set_dir).map_err(io_err(&set_dir))?;

    let mut sequences = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        // one independent rng stream per sequence
        let mut rng = ChaCha8Rng::seed_from_u64_stream(cfg.seed, 1000 + si as u64);
        let poses = generate_trajectory(&world, cfg, spec.length, &mut rng)?;
        let mut samples = Vec::with_capacity(spec.length);
        for (fi, pose) in poses.iter().enumerate() {
            let scan = raycast_scan(&world, pose, cfg, &mut rng)?;
            let scan = if scan.len() > SCAN_POINT_CAP {
                scan[..SCAN_POINT_CAP].to_vec()
            } else {
                scan
            };
            let image = render_view(&world, pose, cfg)?;
            samples.push(Sample { image, scan, pose: *pose, frame_index: fi as u64 });
        }
        let seq = Sequence { id: spec.id.clone(), samples, split: spec.split };
        write_sequence(&set_dir, &seq)?;
        sequences.push(seq);
    }

    let norm = compute_norm(
        sequences
            .iter()
            .filter(|s| s.split == Split::Train)
            .flat_map(|s| s.samples.iter().map(|x| &x.image)),
    );
    write_norm(out_root, &norm)?;
    write_world(out_root, &world)?;
    Ok(sequences)
}

/// Load one sequence directory written in the layout above.
pub fn load_sequence(dir: &Path) -> Result<Sequence, DataError> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".to_string());

    let split_path = dir.join("split.txt");
    let split_body = fs::read_to_string(&split_path).map_err(io_err(&split_path))?;
    let split = match split_body.trim() {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => {
            return Err(DataError::Format {
                path: split_path,
                message: format!("split must be 'train' or 'eval', found '{other}'"),
            })
        }
    };

    let poses_path = dir.join("poses.txt");
    let poses_body = fs::read_to_string(&poses_path).map_err(io_err(&poses_path))?;
    let mut samples = Vec::new();
    let mut last_frame: Option<u64> = None;
    for (lineno, line) in poses_body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(DataError::Format {
                path: poses_path.clone(),
                message: format!("line {}: expected '<frame> <x> <y> <theta>'", lineno + 1),
            });
        }
        let parse = |t: &str, what: &str| -> Result<f64, DataError> {
            t.parse::<f64>().map_err(|_| DataError::Format {
                path: poses_path.clone(),
                message: format!("line {}: bad {what} '{t}'", lineno + 1),
            })
        };
        let frame: u64 = toks[0].parse().map_err(|_| DataError::Format {
            path: poses_path.clone(),
            message: format!("line {}: bad frame index '{}'", lineno + 1, toks[0]),
        })?;
        if let Some(prev) = last_frame {
            if frame <= prev {
                return Err(DataError::Consistency {
                    path: poses_path.clone(),
                    frame: Some(frame),
                    message: format!("frame indices must strictly increase (previous {prev})"),
                });
            }
        }
        last_frame = Some(frame);
        let pose = Pose2D::new(parse(toks[1], "x")?, parse(toks[2], "y")?, parse(toks[3], "theta")?)
            .map_err(|e| DataError::Format {
                path: poses_path.clone(),
                message: format!("line {}: {e}", lineno + 1),
            })?;

        let img_path = dir.join("rgb").join(format!("{frame:06}.png"));
        if !img_path.exists() {
            return Err(DataError::Consistency {
                path: img_path,
                frame: Some(frame),
                message: "missing rgb frame".into(),
            });
        }
        let image = image::open(&img_path)
            .map_err(|e| DataError::Format { path: img_path.clone(), message: e.to_string() })?
            .into_rgb8();

        let scan_path = dir.join("scan").join(format!("{frame:06}.txt"));
        if !scan_path.exists() {
            return Err(DataError::Consistency {
                path: scan_path,
                frame: Some(frame),
                message: "missing scan frame".into(),
            });
        }
        let scan_body = fs::read_to_string(&scan_path).map_err(io_err(&scan_path))?;
        let mut scan = Vec::new();
        for (sl, sline) in scan_body.lines().enumerate() {
            let sline = sline.trim();
            if sline.is_empty() {
                continue;
            }
            let mut it = sline.split_whitespace();
            let (Some(xs), Some(ys)) = (it.next(), it.next()) else {
                return Err(DataError::Format {
                    path: scan_path.clone(),
                    message: format!("line {}: expected '<x> <y>'", sl + 1),
                });
            };
            let x: f64 = xs.parse().map_err(|_| DataError::Format {
                path: scan_path.clone(),
                message: format!("line {}: bad x '{xs}'", sl + 1),
            })?;
            let y: f64 = ys.parse().map_err(|_| DataError::Format {
                path: scan_path.clone(),
                message: format!("line {}: bad y '{ys}'", sl + 1),
            })?;
            scan.push([x, y]);
        }
        samples.push(Sample { image, scan, pose, frame_index: frame });
    }
    if samples.is_empty() {
        return Err(DataError::Consistency {
            path: poses_path,
            frame: None,
            message: "no frames in poses.txt".into(),
        });
    }
    Ok(Sequence { id, samples, split })
}

/// Load every sequence under `<root>/<set-id>/`, sorted by id.
pub fn load_set(root: &Path, set_id: &str) -> Result<Vec<Sequence>, DataError> {
    let set_dir = root.join(set_id);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&set_dir)
        .map_err(io_err(&set_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Discover set ids (directories) under the dataset root, sorted.
pub fn list_sets(root: &Path) -> Result<Vec<String>, DataError> {
    let mut out: Vec<String> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}
