//! Synthetic deformable 4D phantoms.
//!
//! A textured ellipsoidal "organ" contracts along half a cosine cycle over the
//! sequence: frame 1 is the fully expanded phase and frame N the fully
//! contracted one. A smooth background may translate slowly over the same
//! period. Everything is a pure function of [`PhantomConfig`].

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Number of random-phase sinusoids summed into each texture.
const TEXTURE_WAVES: usize = 4;
/// Width of the organ boundary, in voxels.
const EDGE_WIDTH: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    /// (L, H, W)
    pub grid: [usize; 3],
    pub frame_number: usize,
    /// Radius excursion as a fraction of the half extent, in `[0, 0.3]`.
    pub amplitude: f64,
    /// Background translation over the sequence, as a fraction of the extent.
    pub background_drift: f64,
    pub texture_scale: f64,
    /// Grid dims must be divisible by this (the VAE downsampling factor).
    pub downsample_factor: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: [32, 32, 32],
            frame_number: 8,
            amplitude: 0.2,
            background_drift: 0.0,
            texture_scale: 1.0,
            downsample_factor: 4,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || self.grid.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "grid {:?} must be positive and divisible by {f}",
                self.grid
            )));
        }
        if self.frame_number < 2 {
            return Err(Error::FrameNumber { n: self.frame_number, min: 2, max: usize::MAX });
        }
        if !(0.0..=0.3).contains(&self.amplitude) {
            return Err(Error::Config(format!("amplitude {} outside [0, 0.3]", self.amplitude)));
        }
        if !(0.0..=0.05).contains(&self.background_drift) {
            return Err(Error::Config(format!(
                "background_drift {} outside [0, 0.05]",
                self.background_drift
            )));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return Err(Error::Config(format!("texture_scale {} must be positive", self.texture_scale)));
        }
        Ok(())
    }
}

/// A sequence of N volumes of shape (L, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Video4D {
    frames: Vec<Tensor>,
    pub voxel_spacing: [f64; 3],
}

impl Video4D {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::FrameNumber { n: frames.len(), min: 2, max: usize::MAX });
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return shape_err(format!("frames must be rank 3, got {shape:?}"));
        }
        if let Some(bad) = frames.iter().find(|f| f.shape() != shape.as_slice()) {
            return shape_err(format!("frame shape {:?} differs from {shape:?}", bad.shape()));
        }
        Ok(Self { frames, voxel_spacing: [1.0; 3] })
    }

    /// Splits a `[N, L, H, W]` tensor into frames.
    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return shape_err(format!("stacked video must be rank 4, got {:?}", t.shape()));
        }
        let n = t.shape()[0];
        let dims = &t.shape()[1..];
        let vol: usize = dims.iter().product();
        let frames = (0..n)
            .map(|i| Tensor::new(dims, t.data()[i * vol..(i + 1) * vol].to_vec()))
            .collect::<Result<_>>()?;
        Self::new(frames)
    }

    pub fn to_stacked(&self) -> Tensor {
        let dims = self.frames[0].shape();
        let mut shape = vec![self.frames.len()];
        shape.extend_from_slice(dims);
        let data = self.frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        Tensor::new(&shape, data).expect("consistent frames")
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn frame_number(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.frames[0].shape();
        [s[0], s[1], s[2]]
    }

    pub fn set_frame(&mut self, i: usize, frame: Tensor) -> Result<()> {
        self.frames[i].check_same_shape(&frame)?;
        self.frames[i] = frame;
        Ok(())
    }

    /// Video with every frame mapped through `f`.
    pub fn map_frames(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self { frames: self.frames.iter().map(f).collect(), voxel_spacing: self.voxel_spacing }
    }

    pub fn reversed(&self) -> Self {
        let mut frames = self.frames.clone();
        frames.reverse();
        Self { frames, voxel_spacing: self.voxel_spacing }
    }

    /// Every frame mean-pooled by `factor`.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let frames = self.frames.iter().map(|f| f.avg_pool3(factor)).collect::<Result<_>>()?;
        Ok(Self { frames, voxel_spacing: self.voxel_spacing.map(|s| s * factor as f64) })
    }

    pub fn min(&self) -> f64 {
        self.frames.iter().map(Tensor::min).fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.frames.iter().map(Tensor::max).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
struct Wave {
    dir: [f64; 3],
    freq: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct Texture(Vec<Wave>);

impl Texture {
    fn random(rng: &mut ChaCha8Rng, freq_lo: f64, freq_hi: f64) -> Self {
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                let dir = unit_vector(rng);
                Wave { dir, freq: rng.random_range(freq_lo..freq_hi), phase: rng.random_range(0.0..2.0 * PI) }
            })
            .collect();
        Self(waves)
    }

    /// Value in [-1, 1].
    fn eval(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .0
            .iter()
            .map(|w| (2.0 * PI * w.freq * dot(w.dir, p) + w.phase).cos())
            .sum();
        s / self.0.len() as f64
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = dot(v, v).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

/// Geometry and appearance drawn once per sequence from the seed.
#[derive(Clone, Debug)]
struct Anatomy {
    center: [f64; 3],
    /// Semi-axes at full expansion, before contraction.
    half_extent: [f64; 3],
    radius_fraction: f64,
    aspect: [f64; 3],
    organ_level: f64,
    organ_texture: Texture,
    background_texture: Texture,
    drift_dir: [f64; 3],
}

impl Anatomy {
    fn draw(cfg: &PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let half_extent = cfg.grid.map(|d| d as f64 / 2.0);
        let center = [0, 1, 2].map(|i| {
            let jitter = rng.random_range(-0.04..0.04) * cfg.grid[i] as f64;
            half_extent[i] - 0.5 + jitter
        });
        let radius_fraction = rng.random_range(0.55..0.62);
        let aspect = [1.0, rng.random_range(0.85..0.95), rng.random_range(0.75..0.9)];
        let organ_level = rng.random_range(0.7..0.76);
        let ts = cfg.texture_scale;
        let organ_texture = Texture::random(&mut rng, 0.4 * ts, 0.9 * ts);
        let background_texture = Texture::random(&mut rng, 0.6 * ts, 1.4 * ts);
        let drift_dir = unit_vector(&mut rng);
        Self {
            center,
            half_extent,
            radius_fraction,
            aspect,
            organ_level,
            organ_texture,
            background_texture,
            drift_dir,
        }
    }

    /// Radius scale at phase φ ∈ [0, 1]: half a cosine cycle from 1 to 1 − amplitude/fraction.
    fn radius_scale(&self, cfg: &PhantomConfig, phase: f64) -> f64 {
        self.radius_fraction - cfg.amplitude * (1.0 - (PI * phase).cos()) / 2.0
    }

    fn semi_axes(&self, cfg: &PhantomConfig, phase: f64) -> [f64; 3] {
        let s = self.radius_scale(cfg, phase);
        [0, 1, 2].map(|i| self.half_extent[i] * s * self.aspect[i])
    }

    fn check_fits(&self, cfg: &PhantomConfig) -> Result<()> {
        let expanded = self.semi_axes(cfg, 0.0);
        let contracted = self.semi_axes(cfg, 1.0);
        for i in 0..3 {
            let lo = self.center[i] - expanded[i] - EDGE_WIDTH;
            let hi = self.center[i] + expanded[i] + EDGE_WIDTH;
            if lo < 0.0 || hi > (cfg.grid[i] - 1) as f64 {
                return Err(Error::Sizing(format!(
                    "organ spans [{lo:.1}, {hi:.1}] on axis {i} of a {}-voxel grid",
                    cfg.grid[i]
                )));
            }
            if contracted[i] < 1.5 {
                return Err(Error::Sizing(format!(
                    "contracted semi-axis {:.2} voxels on axis {i}; grid {:?} too small",
                    contracted[i], cfg.grid
                )));
            }
        }
        Ok(())
    }

    fn render(&self, cfg: &PhantomConfig, phase: f64) -> Tensor {
        let [l, h, w] = cfg.grid;
        let axes = self.semi_axes(cfg, phase);
        let mean_axis = (axes[0] + axes[1] + axes[2]) / 3.0;
        let extent = cfg.grid.iter().copied().max().unwrap_or(1) as f64;
        let shift = self.drift_dir.map(|d| d * cfg.background_drift * extent * phase);
        let mut out = Vec::with_capacity(l * h * w);
        for z in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let u = [0, 1, 2].map(|i| (p[i] - self.center[i]) / axes[i]);
                    let rho = dot(u, u).sqrt();
                    let mask = 1.0 / (1.0 + (-(1.0 - rho) * mean_axis / EDGE_WIDTH).exp());
                    let organ = self.organ_level + 0.1 * self.organ_texture.eval(u);
                    let bp = [0, 1, 2].map(|i| (p[i] - shift[i]) / extent);
                    let background = 0.13 + 0.07 * self.background_texture.eval(bp);
                    out.push(((1.0 - mask) * background + mask * organ).clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(&[l, h, w], out).expect("grid shape")
    }
}

/// Phase of frame `i` (zero-based) in a sequence of `n` frames.
pub fn frame_phase(i: usize, n: usize) -> f64 {
    i as f64 / (n - 1) as f64
}

/// Renders the volume at an arbitrary phase φ ∈ [0, 1].
pub fn render_phase(cfg: &PhantomConfig, phase: f64) -> Result<Tensor> {
    cfg.validate()?;
    let anatomy = Anatomy::draw(cfg);
    anatomy.check_fits(cfg)?;
    Ok(anatomy.render(cfg, phase))
}

/// Organ radius scale of every frame (strictly decreasing when amplitude > 0).
pub fn radius_schedule(cfg: &PhantomConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let anatomy = Anatomy::draw(cfg);
    Ok((0..cfg.frame_number).map(|i| anatomy.radius_scale(cfg, frame_phase(i, cfg.frame_number))).collect())
}

pub fn generate_sequence(cfg: &PhantomConfig) -> Result<Video4D> {
    cfg.validate()?;
    let anatomy = Anatomy::draw(cfg);
    anatomy.check_fits(cfg)?;
    let n = cfg.frame_number;
    let frames = (0..n).map(|i| anatomy.render(cfg, frame_phase(i, n))).collect();
    Video4D::new(frames)
}

#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub config: PhantomConfig,
    pub video: Video4D,
}

#[derive(Clone, Debug, Default)]
pub struct PhantomDataset {
    pub train: Vec<PhantomSample>,
    pub val: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

impl PhantomDataset {
    pub fn splits(&self) -> [(&'static str, &[PhantomSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Generates the three splits with distinct per-sequence seeds and frame
/// numbers drawn uniformly from `frame_range` (inclusive).
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base: &PhantomConfig,
    frame_range: (usize, usize),
    seed: u64,
) -> Result<PhantomDataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let (lo, hi) = frame_range;
    if lo < 2 || hi < lo {
        return Err(Error::Config(format!("frame range {lo}..={hi} invalid")));
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut draw = |count: usize| -> Result<Vec<PhantomSample>> {
        (0..count)
            .map(|_| {
                let seq_seed = loop {
                    let s: u64 = rng.random();
                    if used.insert(s) {
                        break s;
                    }
                };
                let frame_number = rng.random_range(lo..=hi);
                let config = PhantomConfig { seed: seq_seed, frame_number, ..base.clone() };
                let video = generate_sequence(&config)?;
                Ok(PhantomSample { config, video })
            })
            .collect()
    };
    let train = draw(n_train)?;
    let val = draw(n_val)?;
    let test = draw(n_test)?;
    Ok(PhantomDataset { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64, n: usize, amplitude: f64) -> PhantomConfig {
        PhantomConfig { seed, frame_number: n, amplitude, ..Default::default() }
    }

    #[test]
    fn zero_amplitude_gives_identical_frames() {
        let v = generate_sequence(&cfg(1, 6, 0.0)).unwrap();
        for f in v.frames() {
            assert_eq!(f, v.frame(0));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let c = PhantomConfig { background_drift: 0.03, ..cfg(5, 7, 0.2) };
        assert_eq!(generate_sequence(&c).unwrap(), generate_sequence(&c).unwrap());
        let other = PhantomConfig { seed: 6, ..c.clone() };
        assert_ne!(generate_sequence(&c).unwrap(), generate_sequence(&other).unwrap());
    }

    #[test]
    fn organ_volume_is_non_increasing() {
        let v = generate_sequence(&cfg(7, 8, 0.2)).unwrap();
        let counts: Vec<usize> =
            v.frames().iter().map(|f| f.data().iter().filter(|&&x| x > 0.5).count()).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert!(counts[0] > counts[7], "{counts:?}");
    }

    #[test]
    fn radius_strictly_decreases() {
        let r = radius_schedule(&cfg(3, 10, 0.15)).unwrap();
        assert!(r.windows(2).all(|w| w[1] < w[0]), "{r:?}");
    }

    #[test]
    fn intensities_in_unit_interval() {
        let c = PhantomConfig { background_drift: 0.05, texture_scale: 2.0, ..cfg(11, 6, 0.3) };
        let v = generate_sequence(&c).unwrap();
        assert!(v.min() >= 0.0 && v.max() <= 1.0);
    }

    #[test]
    fn first_frame_is_phase_zero() {
        let c = cfg(2, 9, 0.25);
        let v = generate_sequence(&c).unwrap();
        assert_eq!(&render_phase(&c, 0.0).unwrap(), v.frame(0));
    }

    #[test]
    fn undersized_grid_is_rejected() {
        let c = PhantomConfig { grid: [4, 4, 4], ..cfg(0, 6, 0.3) };
        assert!(matches!(generate_sequence(&c), Err(Error::Sizing(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PhantomConfig { grid: [30, 32, 32], ..Default::default() }.validate().is_err());
        assert!(PhantomConfig { amplitude: 0.31, ..Default::default() }.validate().is_err());
        assert!(PhantomConfig { frame_number: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn dataset_seeds_are_distinct_and_reproducible() {
        let base = PhantomConfig { grid: [16, 16, 16], ..Default::default() };
        let a = generate_dataset(2, 1, 1, &base, (6, 16), 0).unwrap();
        let b = generate_dataset(2, 1, 1, &base, (6, 16), 0).unwrap();
        let seeds: HashSet<u64> =
            a.splits().iter().flat_map(|(_, s)| s.iter().map(|p| p.config.seed)).collect();
        assert_eq!(seeds.len(), 4);
        for ((_, x), (_, y)) in a.splits().iter().zip(b.splits().iter()) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert_eq!(p.video, q.video);
            }
        }
    }

    #[test]
    fn frame_numbers_cover_range() {
        let base = PhantomConfig { grid: [16, 16, 16], ..Default::default() };
        let d = generate_dataset(40, 1, 1, &base, (6, 16), 3).unwrap();
        let ns: HashSet<usize> = d.train.iter().map(|p| p.video.frame_number()).collect();
        assert!(ns.iter().all(|n| (6..=16).contains(n)));
        assert!(ns.len() >= 8, "{ns:?}");
    }
}
