//! Fréchet distance between Gaussian fits of two feature populations.
//!
//! ```text
//! FID = ‖μa − μb‖² + Tr Σa + Tr Σb − 2·Tr √(Σa^½ Σb Σa^½)
//! ```
//!
//! The conjugated product is symmetric PSD and has the same square-root
//! trace as `Σa·Σb`, so only symmetric eigendecompositions are needed.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::dataset::{load_rgb, resize_rgb, scan};
use crate::error::{Error, Result};
use crate::extractor::{EmbeddingExtractor, EXTRACTOR_INPUT};
use crate::tensor::Tensor;

/// Relative asymmetry tolerated by [`sqrtm_psd`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;
/// Negative FID values down to `−NEGATIVE_CLAMP` are round-off and become 0.
pub const NEGATIVE_CLAMP: f64 = 1e-6;
/// Images per extractor call.
const EMBED_BATCH: usize = 8;

/// Mean and unbiased covariance of a feature population.
#[derive(Debug, Clone, PartialEq)]
pub struct FidStats {
    pub n: usize,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl FidStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Streaming Welford accumulator with an associative merge.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("accumulate_stats", format!("vector of length {} vs dim {}", x.len(), self.mean.len())));
        }
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2.ger(1.0, &delta, &delta2, 1.0);
        Ok(())
    }

    /// Combine two partial accumulations (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::shape("merge", format!("dim {} vs {}", self.mean.len(), other.mean.len())));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.m2 += &other.m2;
        self.m2.ger(na * nb / n, &delta, &delta, 1.0);
        self.n += other.n;
        Ok(())
    }

    pub fn finish(&self) -> Result<FidStats> {
        if self.n < 2 {
            return Err(Error::Data(format!("FID statistics need at least 2 samples, got {}", self.n)));
        }
        let sigma = &self.m2 / (self.n as f64 - 1.0);
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(FidStats {
            n: self.n,
            mu: self.mean.clone(),
            sigma,
        })
    }
}

/// Mean and unbiased covariance of a stream of equal-length vectors.
pub fn accumulate_stats<I, V>(features: I) -> Result<FidStats>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[f64]>,
{
    let mut iter = features.into_iter().peekable();
    let dim = iter.peek().map(|v| v.as_ref().len()).unwrap_or(0);
    let mut acc = StatsAccumulator::new(dim);
    for v in iter {
        acc.push(v.as_ref())?;
    }
    acc.finish()
}

/// Principal square root of a symmetric PSD matrix; eigenvalues are
/// clamped at 0 first.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::shape("sqrtm_psd", format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::arg("sqrtm_psd", format!("matrix is not symmetric (max |M − Mᵀ| = {asym:e})")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Fréchet distance between two populations.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("fid", format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let root_a = sqrtm_psd(&a.sigma)?;
    let inner = &root_a * &b.sigma * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner)?.trace();
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    if value < 0.0 {
        if value >= -NEGATIVE_CLAMP * (1.0 + a.sigma.trace() + b.sigma.trace()) {
            return Ok(0.0);
        }
        return Err(Error::NonFinite(format!("FID evaluated to {value:e}")));
    }
    Ok(value)
}

/// Extractor input for one colour image: bilinear 299×299, values in `[0, 1]`.
pub fn rgb_extractor_input(img: &RgbImage) -> Vec<f32> {
    let r = resize_rgb(img, EXTRACTOR_INPUT, EXTRACTOR_INPUT);
    let plane = EXTRACTOR_INPUT * EXTRACTOR_INPUT;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in r.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// Embeddings of a set of images, in order, as f64 rows.
pub fn embed_images(extractor: &dyn EmbeddingExtractor, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * EXTRACTOR_INPUT * EXTRACTOR_INPUT);
        for img in chunk {
            data.extend(rgb_extractor_input(img));
        }
        let x = Tensor::new(&[chunk.len(), 3, EXTRACTOR_INPUT, EXTRACTOR_INPUT], data)?;
        let emb = extractor.embed(&x)?;
        let d = extractor.embed_dim();
        rows.extend(emb.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    Ok(rows)
}

/// Statistics of a population of images through `extractor`. Images are
/// split across worker threads and the partial accumulators merged.
pub fn image_stats(extractor: &dyn EmbeddingExtractor, images: &[RgbImage]) -> Result<FidStats> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(images.len().max(1));
    let chunk = images.len().div_ceil(workers).max(1);
    let partials: Vec<Result<StatsAccumulator>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut acc = StatsAccumulator::new(extractor.embed_dim());
                    for row in embed_images(extractor, part)? {
                        acc.push(&row)?;
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("feature worker panicked")).collect()
    });
    let mut total = StatsAccumulator::new(extractor.embed_dim());
    for p in partials {
        total.merge(&p?)?;
    }
    total.finish()
}

/// Decodable images under `dir` (recursive) plus the skipped paths.
pub fn load_image_dir(dir: &Path) -> Result<(Vec<(PathBuf, RgbImage)>, Vec<PathBuf>)> {
    let manifest = scan(dir, 0)?;
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for e in manifest.entries {
        match load_rgb(&e.path) {
            Ok(img) => ok.push((e.path, img)),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped.push(e.path);
            }
        }
    }
    Ok((ok, skipped))
}

/// Summary written next to an FID evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    /// Extractor label; stub values are self-consistent but not comparable
    /// with published numbers.
    pub backend: String,
    pub feature_dim: usize,
    pub n_real: usize,
    pub n_generated: usize,
    pub skipped: usize,
    pub fid: f64,
}

/// FID between two sets of decoded images.
pub fn evaluate_images(extractor: &dyn EmbeddingExtractor, real: &[RgbImage], generated: &[RgbImage], skipped: usize) -> Result<FidReport> {
    for (side, n) in [("real", real.len()), ("generated", generated.len())] {
        if n < 2 {
            return Err(Error::Data(format!("{side} side has {n} decodable images; FID needs at least 2")));
        }
    }
    let a = image_stats(extractor, real)?;
    let b = image_stats(extractor, generated)?;
    Ok(FidReport {
        backend: extractor.backend().to_string(),
        feature_dim: extractor.embed_dim(),
        n_real: real.len(),
        n_generated: generated.len(),
        skipped,
        fid: fid(&a, &b)?,
    })
}

/// FID between the images of two directories.
pub fn evaluate_fid(real_dir: &Path, generated_dir: &Path, extractor: &dyn EmbeddingExtractor) -> Result<FidReport> {
    let (real, s1) = load_image_dir(real_dir)?;
    let (generated, s2) = load_image_dir(generated_dir)?;
    let real: Vec<RgbImage> = real.into_iter().map(|(_, i)| i).collect();
    let generated: Vec<RgbImage> = generated.into_iter().map(|(_, i)| i).collect();
    evaluate_images(extractor, &real, &generated, s1.len() + s2.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
    }

    /// Two-pass mean and covariance, straight from the definition.
    fn two_pass(v: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (n, d) = (v.len() as f64, v[0].len());
        let mu: Vec<f64> = (0..d).map(|j| v.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| v.iter().map(|x| (x[i] - mu[i]) * (x[j] - mu[j])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        (mu, cov)
    }

    /// Dense oracle: trace of the square root of the non-symmetric product
    /// via its general (complex) eigenvalues.
    fn naive_fid(a: &FidStats, b: &FidStats) -> f64 {
        let prod = &a.sigma * &b.sigma;
        let tr: f64 = prod.complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
        (&a.mu - &b.mu).norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr
    }

    fn random_stats(d: usize, seed: u64) -> FidStats {
        accumulate_stats(random_vectors(3 * d, d, seed).iter().map(|v| {
            // Correlate coordinates so the covariance is not near-diagonal.
            let mut w = v.clone();
            for j in 1..d {
                w[j] += 0.5 * v[j - 1];
            }
            w
        }))
        .unwrap()
    }

    #[test]
    fn two_point_example() {
        let s = accumulate_stats([[0.0, 0.0], [2.0, 2.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn identical_vectors_have_zero_covariance() {
        let s = accumulate_stats(vec![vec![1.5, -2.0, 3.0]; 5]).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_samples() {
        assert!(accumulate_stats([[1.0, 2.0]]).is_err());
        assert!(accumulate_stats(Vec::<Vec<f64>>::new()).is_err());
    }

    #[test]
    fn streaming_matches_two_pass() {
        let v = random_vectors(1000, 6, 1);
        let s = accumulate_stats(&v).unwrap();
        let (mu, cov) = two_pass(&v);
        for i in 0..6 {
            assert!((s.mu[i] - mu[i]).abs() < 1e-10);
            for j in 0..6 {
                assert!((s.sigma[(i, j)] - cov[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn merge_is_associative() {
        let v = random_vectors(300, 5, 2);
        let whole = accumulate_stats(&v).unwrap();
        for split in [1, 2, 77, 150, 298] {
            let mut a = StatsAccumulator::new(5);
            let mut b = StatsAccumulator::new(5);
            v[..split].iter().for_each(|x| a.push(x).unwrap());
            v[split..].iter().for_each(|x| b.push(x).unwrap());
            a.merge(&b).unwrap();
            let m = a.finish().unwrap();
            assert_eq!(m.n, whole.n);
            assert!((m.mu.clone() - &whole.mu).amax() < 1e-10);
            assert!((m.sigma.clone() - &whole.sigma).amax() < 1e-10);
        }
    }

    #[test]
    fn sqrtm_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&i).unwrap() - &i).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-12);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(sqrtm_psd(&asym).is_err());
    }

    #[test]
    fn sqrtm_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let m = &a * a.transpose();
            let r = sqrtm_psd(&m).unwrap();
            assert!((&r * &r - &m).amax() < 1e-8);
        }
    }

    #[test]
    fn fid_identities() {
        let s = random_stats(4, 4);
        assert!(fid(&s, &s).unwrap().abs() < 1e-6);
        let eye = DMatrix::<f64>::identity(2, 2);
        let a = FidStats { n: 10, mu: DVector::from_vec(vec![0.0, 0.0]), sigma: eye.clone() };
        let b = FidStats { n: 10, mu: DVector::from_vec(vec![1.0, 0.0]), sigma: eye };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fid_matches_dense_oracle_and_is_symmetric() {
        for seed in 0..10 {
            let a = random_stats(4, 10 + seed);
            let b = random_stats(4, 100 + seed);
            let f = fid(&a, &b).unwrap();
            assert!((f - naive_fid(&a, &b)).abs() < 1e-6, "seed {seed}");
            assert!((f - fid(&b, &a).unwrap()).abs() < 1e-8);
            assert!(f >= 0.0);
        }
    }

    #[test]
    fn fid_is_translation_invariant() {
        let va = random_vectors(50, 3, 5);
        let vb = random_vectors(50, 3, 6);
        let shift = [10.0, -4.0, 2.5];
        let moved = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            v.iter().map(|x| x.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect()
        };
        let f0 = fid(&accumulate_stats(&va).unwrap(), &accumulate_stats(&vb).unwrap()).unwrap();
        let f1 = fid(&accumulate_stats(moved(&va)).unwrap(), &accumulate_stats(moved(&vb)).unwrap()).unwrap();
        assert!((f0 - f1).abs() < 1e-8);
    }

    #[test]
    fn dimension_mismatch() {
        let a = random_stats(3, 1);
        let b = random_stats(4, 2);
        assert!(fid(&a, &b).is_err());
    }
}
