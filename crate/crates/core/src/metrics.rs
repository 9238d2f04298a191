//! Evaluation metrics: PSNR, a feature-space perceptual proxy, a Fréchet
//! distance proxy over pooled video features, and temporal error maps.
//!
//! `lpips_proxy` and `fvd_proxy` use the trained VAE encoder as the feature
//! network. Their values are only comparable between runs that share an
//! encoder.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Video4D;
use crate::tensor::Tensor;
use crate::vae::Vae;

/// Diagonal jitter added to every covariance estimate.
pub const COVARIANCE_EPS: f64 = 1e-6;

/// Anything that maps a volume to a list of `[C, ...]` activations.
pub trait FeatureEncoder {
    fn features(&self, frame: &Tensor) -> Result<Vec<Tensor>>;
}

impl FeatureEncoder for Vae {
    fn features(&self, frame: &Tensor) -> Result<Vec<Tensor>> {
        let feats = Vae::features(self, frame)?;
        // [C, 1, d, h, w] -> [C, d*h*w]
        feats
            .into_iter()
            .map(|f| {
                let c = f.shape()[0];
                let len = f.len() / c;
                f.reshape(&[c, len])
            })
            .collect()
    }
}

fn check_pair(pred: &Video4D, gt: &Video4D) -> Result<()> {
    if pred.frame_number() != gt.frame_number() || pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {}x{:?} vs ground truth {}x{:?}",
            pred.frame_number(),
            pred.dims(),
            gt.frame_number(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Video4D, gt: &Video4D) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut se, mut n) = (0.0, 0usize);
    for (a, b) in pred.frames().iter().zip(gt.frames()) {
        se += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += a.len();
    }
    Ok(se / n as f64)
}

/// `10 log10(1 / MSE)` with peak 1. Identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &Video4D, gt: &Video4D) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Per-site unit normalization over channels of a `[C, S]` activation.
fn unit_normalize(f: &Tensor) -> Vec<f64> {
    let (c, s) = (f.shape()[0], f.len() / f.shape()[0]);
    let d = f.data();
    let mut out = d.to_vec();
    for site in 0..s {
        let norm = (0..c).map(|ch| d[ch * s + site].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for ch in 0..c {
            out[ch * s + site] /= norm;
        }
    }
    out
}

/// Mean over frames and layers of the squared distance between
/// channel-normalized encoder activations, averaged over sites.
pub fn lpips_proxy(pred: &Video4D, gt: &Video4D, enc: &dyn FeatureEncoder) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut total = 0.0;
    let mut layers = 0;
    for (a, b) in pred.frames().iter().zip(gt.frames()) {
        let (fa, fb) = (enc.features(a)?, enc.features(b)?);
        for (x, y) in fa.iter().zip(&fb) {
            let sites = x.len() / x.shape()[0];
            let (nx, ny) = (unit_normalize(x), unit_normalize(y));
            total += nx.iter().zip(&ny).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / sites as f64;
            layers += 1;
        }
    }
    if layers == 0 {
        return Err(Error::Empty("encoder features".into()));
    }
    Ok(total / layers as f64)
}

/// Pooled descriptor of one video: per encoder layer, the channel means over
/// frames and sites and the channel means of absolute frame-to-frame feature
/// changes; then the mean and peak absolute intensity change between frames.
pub fn video_features(video: &Video4D, enc: &dyn FeatureEncoder) -> Result<Vec<f64>> {
    let per_frame: Vec<Vec<Tensor>> = video.frames().iter().map(|f| enc.features(f)).collect::<Result<_>>()?;
    let n = per_frame.len();
    let mut out = Vec::new();
    for layer in 0..per_frame[0].len() {
        let c = per_frame[0][layer].shape()[0];
        let s = per_frame[0][layer].len() / c;
        for ch in 0..c {
            let mean = per_frame.iter().map(|f| f[layer].data()[ch * s..(ch + 1) * s].iter().sum::<f64>()).sum::<f64>()
                / (n * s) as f64;
            out.push(mean);
        }
        for ch in 0..c {
            let mut motion = 0.0;
            for w in per_frame.windows(2) {
                let (a, b) = (&w[0][layer].data()[ch * s..(ch + 1) * s], &w[1][layer].data()[ch * s..(ch + 1) * s]);
                motion += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / s as f64;
            }
            out.push(motion / (n - 1).max(1) as f64);
        }
    }
    let diffs: Vec<f64> = video
        .frames()
        .windows(2)
        .map(|w| w[0].data().iter().zip(w[1].data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / w[0].len() as f64)
        .collect();
    out.push(diffs.iter().sum::<f64>() / diffs.len().max(1) as f64);
    out.push(diffs.iter().copied().fold(0.0, f64::max));
    Ok(out)
}

/// Sample mean and covariance (`n - 1` normalization) plus
/// `COVARIANCE_EPS` on the diagonal.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::Empty(format!("need at least 2 feature vectors, got {}", samples.len())));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(samples.len(), d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(samples.len(), d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (samples.len() - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += COVARIANCE_EPS;
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μ1 − μ2|² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`. The trace of the root is
/// taken from the symmetric product `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape(format!("Gaussian fits of dimension {d} and {}", mu2.len())));
    }
    let r = psd_sqrt(s1);
    let inner = &r * s2 * &r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dm = mu1 - mu2;
    Ok((dm.dot(&dm) + s1.trace() + s2.trace() - 2.0 * tr_root).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetReport {
    pub distance: f64,
    pub dim: usize,
    pub samples: usize,
    /// Fewer sequences than feature dimensions: the covariances are singular
    /// without the diagonal jitter.
    pub regularized: bool,
}

pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetReport> {
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    let distance = frechet_distance(&mu1, &s1, &mu2, &s2)?;
    let dim = mu1.len();
    let samples = a.len().min(b.len());
    let regularized = samples <= dim;
    if regularized {
        log::warn!("fvd_proxy: {samples} sequences for {dim} features, covariance regularized by {COVARIANCE_EPS}");
    }
    Ok(FrechetReport { distance, dim, samples, regularized })
}

/// Fréchet distance between Gaussian fits of `video_features` over two sets.
pub fn fvd_proxy(pred: &[Video4D], gt: &[Video4D], enc: &dyn FeatureEncoder) -> Result<FrechetReport> {
    let feats = |set: &[Video4D]| set.iter().map(|v| video_features(v, enc)).collect::<Result<Vec<_>>>();
    frechet_from_features(&feats(pred)?, &feats(gt)?)
}

/// `|pred_i − gt_i|` for the interior frames `2..N-1`. Sequences shorter
/// than four frames give no maps.
pub fn temporal_error_maps(pred: &Video4D, gt: &Video4D) -> Result<Vec<Tensor>> {
    check_pair(pred, gt)?;
    let n = pred.frame_number();
    if n < 4 {
        log::warn!("temporal error maps need at least 4 frames, got {n}");
        return Ok(Vec::new());
    }
    (1..n - 1)
        .map(|i| pred.frame(i).zip_map(gt.frame(i), |a, b| (a - b).abs()))
        .collect()
}

/// Static baseline: the first frame repeated `n` times.
pub fn static_video(first_frame: &Tensor, n: usize) -> Result<Video4D> {
    Video4D::new(vec![first_frame.clone(); n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub lpips_proxy: f64,
    pub fvd_proxy: FrechetReport,
}

/// Paired evaluation of predictions against ground truth.
pub fn evaluate(pred: &[Video4D], gt: &[Video4D], enc: &dyn FeatureEncoder) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} references", pred.len(), gt.len())));
    }
    let psnr: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| psnr(p, g)).collect::<Result<_>>()?;
    let finite: Vec<f64> = psnr.iter().copied().filter(|x| x.is_finite()).collect();
    let mean_psnr =
        if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    let mut lp = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        lp += lpips_proxy(p, g, enc)?;
    }
    Ok(EvalReport {
        psnr,
        mean_psnr,
        lpips_proxy: lp / pred.len().max(1) as f64,
        fvd_proxy: fvd_proxy(pred, gt, enc)?,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::phantom::{generate_sequence, PhantomConfig};

    /// Fixed two-layer encoder: the volume itself and a 2x average pool,
    /// each with an extra squared channel.
    struct PoolEncoder;

    impl FeatureEncoder for PoolEncoder {
        fn features(&self, frame: &Tensor) -> Result<Vec<Tensor>> {
            let layer = |t: &Tensor| {
                let sq = t.map(|x| x * x);
                let c = Tensor::cat(&[t, &sq], 0)?;
                let n = t.len();
                c.reshape(&[2, n])
            };
            let d = frame.shape().to_vec();
            let mut v = frame.clone().reshape(&[1, 1, d[0], d[1], d[2]])?;
            let l0 = layer(&v)?;
            v = v.avg_pool3(2)?;
            Ok(vec![l0, layer(&v)?])
        }
    }

    fn phantom(seed: u64) -> Video4D {
        let cfg = PhantomConfig { seed, grid: [16, 16, 16], frame_number: 6, ..Default::default() };
        generate_sequence(&cfg).unwrap()
    }

    fn noisy(v: &Video4D, amp: f64, seed: u64) -> Video4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = v.frames().iter().map(|f| f.add(&Tensor::randn(f.shape(), &mut rng).scale(amp)).unwrap());
        Video4D::new(frames.collect()).unwrap()
    }

    fn const_video(value: f64) -> Video4D {
        Video4D::new(vec![Tensor::full(&[2, 2, 2], value); 3]).unwrap()
    }

    #[test]
    fn psnr_analytic_cases() {
        let gt = const_video(0.5);
        assert!((psnr(&const_video(0.6), &gt).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&const_video(0.51), &gt).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_literal_formula_on_block_perturbation() {
        let gt = phantom(3);
        let mut pred = gt.clone();
        let mut f = pred.frame(2).clone();
        for i in 0..64 {
            f.data_mut()[i * 17] += 0.25;
        }
        pred.set_frame(2, f).unwrap();
        let total = (gt.frame_number() * 16 * 16 * 16) as f64;
        let expect = 10.0 * (1.0 / (64.0 * 0.0625 / total)).log10();
        assert!((psnr(&pred, &gt).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let gt = phantom(4);
        let vals: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2].iter().map(|&a| psnr(&noisy(&gt, a, 1), &gt).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn lpips_proxy_zero_symmetric_monotone() {
        let gt = phantom(5);
        assert_eq!(lpips_proxy(&gt, &gt, &PoolEncoder).unwrap(), 0.0);
        let a = noisy(&gt, 0.1, 2);
        let ab = lpips_proxy(&a, &gt, &PoolEncoder).unwrap();
        assert!((ab - lpips_proxy(&gt, &a, &PoolEncoder).unwrap()).abs() < 1e-9);
        let vals: Vec<f64> =
            [0.01, 0.03, 0.1, 0.3, 1.0].iter().map(|&s| lpips_proxy(&noisy(&gt, s, 1), &gt, &PoolEncoder).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    }

    #[test]
    fn frechet_matches_closed_form_for_commuting_gaussians() {
        // Diagonal covariances: (Σ1Σ2)^{1/2} is elementwise sqrt(a b).
        let mu1 = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let mu2 = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let a = [1.0, 2.0, 0.5];
        let b = [4.0, 0.5, 0.5];
        let s1 = DMatrix::from_diagonal(&DVector::from_row_slice(&a));
        let s2 = DMatrix::from_diagonal(&DVector::from_row_slice(&b));
        let expect = 0.25 + 4.0 + a.iter().zip(&b).map(|(x, y): (&f64, &f64)| x + y - 2.0 * (x * y).sqrt()).sum::<f64>();
        assert!((frechet_distance(&mu1, &s1, &mu2, &s2).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn frechet_matches_closed_form_for_rotated_gaussians() {
        // Σ2 = R Σ1 Rᵀ in 2-D: trace of the root from the eigenvalues of Σ1 Σ2
        // via tr(√M) = √(tr M + 2√det M).
        let s1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let th: f64 = 0.7;
        let r = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let s2 = &r * &s1 * r.transpose();
        let prod = &s1 * &s2;
        let tr_root = (prod.trace() + 2.0 * prod.determinant().sqrt()).sqrt();
        let expect = s1.trace() + s2.trace() - 2.0 * tr_root;
        let mu = DVector::zeros(2);
        assert!((frechet_distance(&mu, &s1, &mu, &s2).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn frechet_of_identical_and_shifted_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set: Vec<Vec<f64>> = (0..12).map(|_| Tensor::randn(&[5], &mut rng).into_data()).collect();
        assert!(frechet_from_features(&set, &set).unwrap().distance < 1e-6);
        let c = 0.7;
        let shifted: Vec<Vec<f64>> = set.iter().map(|v| v.iter().map(|x| x + c).collect()).collect();
        let d = frechet_from_features(&set, &shifted).unwrap().distance;
        assert!((d - c * c * 5.0).abs() < 1e-6, "{d}");
        let rev: Vec<Vec<f64>> = set.iter().rev().cloned().collect();
        assert!((frechet_from_features(&rev, &shifted).unwrap().distance - d).abs() < 1e-9);
    }

    #[test]
    fn fvd_proxy_needs_two_sequences_and_grows_with_noise() {
        let gt: Vec<Video4D> = (0..4).map(phantom).collect();
        assert!(fvd_proxy(&gt[..1], &gt[..1], &PoolEncoder).is_err());
        let report = fvd_proxy(&gt, &gt, &PoolEncoder).unwrap();
        assert!(report.distance < 1e-6 && report.regularized);
        let vals: Vec<f64> = [0.02, 0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&a| {
                let pred: Vec<Video4D> = gt.iter().enumerate().map(|(i, v)| noisy(v, a, i as u64)).collect();
                fvd_proxy(&pred, &gt, &PoolEncoder).unwrap().distance
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    }

    #[test]
    fn error_maps_cover_interior_frames() {
        let gt = phantom(6);
        let maps = temporal_error_maps(&gt, &gt).unwrap();
        assert_eq!(maps.len(), 4);
        assert!(maps.iter().all(|m| m.max() == 0.0));

        let mut pred = gt.clone();
        let mut f = pred.frame(2).clone();
        f.data_mut()[100] += 0.3;
        pred.set_frame(2, f).unwrap();
        let maps = temporal_error_maps(&pred, &gt).unwrap();
        for (k, m) in maps.iter().enumerate() {
            let nonzero: Vec<usize> = (0..m.len()).filter(|&i| m.data()[i] != 0.0).collect();
            if k == 1 {
                assert_eq!(nonzero, vec![100]);
            } else {
                assert!(nonzero.is_empty());
            }
        }

        let pred = noisy(&gt, 0.05, 3);
        let maps = temporal_error_maps(&pred, &gt).unwrap();
        for (k, m) in maps.iter().enumerate() {
            let (a, b) = (pred.frame(k + 1).data(), gt.frame(k + 1).data());
            let mut mae = 0.0;
            for i in 0..a.len() {
                mae += (a[i] - b[i]).abs();
            }
            assert!((m.mean() - mae / a.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn short_sequences_have_no_maps() {
        let v = const_video(0.2);
        assert!(temporal_error_maps(&v, &v).unwrap().is_empty());
    }
}
