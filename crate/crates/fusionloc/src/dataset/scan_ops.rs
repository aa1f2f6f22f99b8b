//! Fixed-size scan sampling for the point branch.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::DataError;
use crate::dataset::image_ops::PreprocessMode;

/// Resample a variable-length scan to exactly `n_fixed` points.
///
/// With enough points, train mode subsamples uniformly at random without
/// replacement and eval mode takes a deterministic stride subsample. Short
/// scans keep every original point and pad by resampling with replacement
/// (cyclically in eval mode).
pub fn sample_scan(
    scan: &[[f64; 2]],
    n_fixed: usize,
    mode: PreprocessMode,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, DataError> {
    if scan.is_empty() {
        return Err(DataError::DegenerateInput("cannot resample an empty scan".into()));
    }
    let n = scan.len();
    let mut out = Array2::<f64>::zeros((n_fixed, 2));
    if n >= n_fixed {
        match mode {
            PreprocessMode::Eval => {
                for i in 0..n_fixed {
                    let idx = i * n / n_fixed;
                    out[[i, 0]] = scan[idx][0];
                    out[[i, 1]] = scan[idx][1];
                }
            }
            PreprocessMode::Train => {
                let mut indices: Vec<usize> = (0..n).collect();
                indices.shuffle(rng);
                indices.truncate(n_fixed);
                indices.sort_unstable();
                for (i, &idx) in indices.iter().enumerate() {
                    out[[i, 0]] = scan[idx][0];
                    out[[i, 1]] = scan[idx][1];
                }
            }
        }
    } else {
        for (i, p) in scan.iter().enumerate() {
            out[[i, 0]] = p[0];
            out[[i, 1]] = p[1];
        }
        for i in n..n_fixed {
            let idx = match mode {
                PreprocessMode::Eval => (i - n) % n,
                PreprocessMode::Train => rng.gen_range(0..n),
            };
            out[[i, 0]] = scan[idx][0];
            out[[i, 1]] = scan[idx][1];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn line_scan(n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| [i as f64, -(i as f64)]).collect()
    }

    #[test]
    fn eval_subsample_is_deterministic() {
        let scan = line_scan(1150);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = sample_scan(&scan, 1024, PreprocessMode::Eval, &mut r1).unwrap();
        let b = sample_scan(&scan, 1024, PreprocessMode::Eval, &mut r2).unwrap();
        assert_eq!(a, b, "eval sampling must ignore the rng");
        assert_eq!(a.nrows(), 1024);
    }

    #[test]
    fn short_scan_keeps_all_originals() {
        let scan = line_scan(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = sample_scan(&scan, 1024, PreprocessMode::Train, &mut rng).unwrap();
        assert_eq!(out.nrows(), 1024);
        for (i, p) in scan.iter().enumerate() {
            assert_eq!(out[[i, 0]], p[0]);
            assert_eq!(out[[i, 1]], p[1]);
        }
        // the 1014 fills are copies of originals
        for i in 10..1024 {
            let x = out[[i, 0]];
            assert!(scan.iter().any(|p| p[0] == x));
        }
    }

    #[test]
    fn exact_length_eval_is_identity() {
        let scan = line_scan(1024);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_scan(&scan, 1024, PreprocessMode::Eval, &mut rng).unwrap();
        for (i, p) in scan.iter().enumerate() {
            assert_eq!(out[[i, 0]], p[0]);
            assert_eq!(out[[i, 1]], p[1]);
        }
    }

    #[test]
    fn empty_scan_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_scan(&[], 16, PreprocessMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn train_subsample_deterministic_under_seed() {
        let scan = line_scan(500);
        let a = sample_scan(&scan, 256, PreprocessMode::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_scan(&scan, 256, PreprocessMode::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }
}
