//! Feature and image similarity measures. All accumulate in `f64`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("image {h}x{w} is smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::ShapeMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Channel-mean grayscale of a `(C, H, W)` image.
pub fn grayscale(img: &[f32], shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let plane = h * w;
    (0..plane)
        .map(|i| (0..c).map(|ch| img[ch * plane + i] as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Mean SSIM over non-overlapping `window x window` tiles of the grayscale
/// images. Partial tiles at the right and bottom edges are skipped.
pub fn ssim_with(
    a: &[f32],
    b: &[f32],
    shape: [usize; 3],
    window: usize,
    c1: f64,
    c2: f64,
) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    let [_, h, w] = shape;
    if window == 0 || h < window || w < window {
        return Err(MetricError::TooSmall { h, w, window });
    }
    let (ga, gb) = (grayscale(a, shape), grayscale(b, shape));
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut tiles = 0usize;
    for ty in 0..h / window {
        for tx in 0..w / window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in ty * window..(ty + 1) * window {
                for x in tx * window..(tx + 1) * window {
                    sa += ga[y * w + x];
                    sb += gb[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in ty * window..(ty + 1) * window {
                for x in tx * window..(tx + 1) * window {
                    let (da, db) = (ga[y * w + x] - ma, gb[y * w + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

pub fn ssim(a: &[f32], b: &[f32], shape: [usize; 3]) -> Result<f64, MetricError> {
    ssim_with(a, b, shape, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_cases() {
        let v = [1.0f32, -2.0, 3.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(MetricError::ZeroVector)
        );
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = vec![0.25f32; 64];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&[0.0; 16], &[1.0; 16]).unwrap(), 0.0);
        assert!(psnr(&a, &a[..3]).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen()).collect();
        let inv: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        assert!((ssim(&a, &a, [3, 16, 16]).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &inv, [3, 16, 16]).unwrap() < 1.0);
        assert!(matches!(
            ssim(&a[..48], &a[..48], [3, 4, 4]),
            Err(MetricError::TooSmall { .. })
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
