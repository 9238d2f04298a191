//! Stage 2: field-guided image-to-video latent diffusion. The denoiser sees
//! the noisy latents of all N frames with the first-frame latent
//! concatenated on channels, and fuses the fields through the FAL at both
//! U-Net resolutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::diffusion::{forward_perturb, prior_eps, sample_loop, score_loss_var, NoiseSchedule, ScheduleConfig};
use crate::error::{shape_err, Error, Result};
use crate::fields::{compute_fields, cumulate, FieldStack};
use crate::io::Checkpoint;
use crate::layers::{CondEmbedding, Fal, StBlock, WarpConfig};
use crate::nn::{Bound, Conv, Init, Norm, ParamStore};
use crate::phantom::Video4D;
use crate::tddm::{check_frame_number, Tddm};
use crate::tensor::Tensor;
use crate::trainer::{batch_mean, deterministic_mean, Objective};
use crate::vae::{LatentVideo, Vae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2vConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub emb_dim: usize,
    /// Full FAL; otherwise per-step fields are concatenated to the features.
    pub use_fal: bool,
    pub use_frame_number: bool,
    /// Field grid divided by latent grid (1 when fields live on the latent grid).
    pub field_stride: usize,
    #[serde(default = "default_true")]
    pub warp_bias: bool,
    pub schedule: ScheduleConfig,
}

fn default_true() -> bool {
    true
}

impl Default for I2vConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 8,
            emb_dim: 16,
            use_fal: true,
            use_frame_number: true,
            field_stride: 1,
            warp_bias: true,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl I2vConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.width == 0 || self.emb_dim < 2 || self.field_stride == 0 {
            return Err(Error::Config(format!("invalid I2V config {self:?}")));
        }
        self.schedule.build().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct I2vNet {
    pub config: I2vConfig,
    emb: CondEmbedding,
    conv_in: Conv,
    block1: StBlock,
    fal1: Fal,
    down: Conv,
    block2: StBlock,
    fal2: Fal,
    mid: StBlock,
    up: Conv,
    block3: StBlock,
    out_norm: Norm,
    out: Conv,
    alpha_bar: Vec<f64>,
    /// Per-element variance of `z_i − z_1` over later frames.
    pub motion_var: f64,
}

/// Field conditioning in the form each FAL variant consumes, `[1, N, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldInput(pub Tensor);

impl FieldInput {
    /// Cumulative fields for the full FAL, per-step fields for the ablated one.
    pub fn new(fields: &FieldStack, scale: f64, cumulative: bool) -> Result<Self> {
        let stacked = if cumulative { cumulate(fields).to_stacked() } else { fields.to_stacked() };
        let mut shape = vec![1];
        shape.extend_from_slice(stacked.shape());
        Ok(Self(stacked.scale(scale).reshape(&shape)?))
    }
}

impl I2vNet {
    pub fn new<R: Rng + ?Sized>(config: I2vConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, w, e) = (config.latent_channels, config.width, config.emb_dim);
        let init = Init::default();
        let warp = |stride| WarpConfig { stride, bias: config.warp_bias, zero_init: true };
        let emb = CondEmbedding::new(store, "emb", e, config.use_frame_number, rng);
        let conv_in = Conv::new(store, "conv_in", 2 * c, w, ConvGeometry::same3(), true, init, rng);
        let block1 = StBlock::new(store, "block1", w, e, rng);
        let fal1 = Fal::new(store, "fal1", w, warp(config.field_stride), config.use_fal, rng);
        let down = Conv::new(store, "down", w, 2 * w, ConvGeometry::cube(3, 2, 1), true, init, rng);
        let block2 = StBlock::new(store, "block2", 2 * w, e, rng);
        let fal2 = Fal::new(store, "fal2", 2 * w, warp(2 * config.field_stride), config.use_fal, rng);
        let mid = StBlock::new(store, "mid", 2 * w, e, rng);
        let up = Conv::new(store, "up", 2 * w, w, ConvGeometry::pointwise(), true, init, rng);
        let block3 = StBlock::new(store, "block3", w, e, rng);
        let out_norm = Norm::new(store, "out.norm", w, false);
        let out = Conv::new(store, "out.conv", w, c, ConvGeometry::same3(), true, Init::Kaiming { gain: 0.3 }, rng);
        let alpha_bar = config.schedule.build()?.alpha_bars().to_vec();
        Ok(Self { config, emb, conv_in, block1, fal1, down, block2, fal2, mid, up, block3, out_norm, out, alpha_bar, motion_var: 1.0 })
    }

    /// `z_t: [C, N, l, h, w]`, `z1: [C, 1, l, h, w]`, `fields: [1, N, ...]`.
    /// The network output is a residual on the closed-form estimate that
    /// treats every frame as `z1` plus motion of variance `motion_var`.
    pub fn denoise<'t>(
        &self,
        p: &Bound<'t>,
        z_t: Var<'t>,
        t: usize,
        z1: Var<'t>,
        fields: Var<'t>,
    ) -> Result<Var<'t>> {
        let (zs, fs, ones) = (z_t.shape(), fields.shape(), z1.shape());
        if zs.len() != 5 || zs[0] != self.config.latent_channels || ones.len() != 5 || ones[1] != 1 || ones[0] != zs[0] || ones[2..] != zs[2..] {
            return shape_err(format!("I2V latents {zs:?} with first frame {ones:?}"));
        }
        let n = zs[1];
        check_frame_number(n)?;
        if fs.len() != 5 || fs[0] != 1 || fs[1] != n {
            return Err(Error::FrameNumber { n: fs.get(1).copied().unwrap_or(0), min: n, max: n });
        }
        if zs[2..].iter().any(|d| d % 2 != 0) {
            return shape_err(format!("latent grid {:?} must be even", &zs[2..]));
        }
        let ab = *self.alpha_bar.get(t.wrapping_sub(1)).ok_or(Error::Timestep { t, max: self.alpha_bar.len() })?;
        let var: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { self.motion_var }).collect();
        let skip = prior_eps(z_t, Some(z1), &var, ab)?;
        let emb = self.emb.forward(p, t, n)?;
        let x = Var::cat(&[z_t, z1.broadcast_axis(1, n)?], 0)?;
        let h1 = self.block1.forward(p, self.conv_in.forward(p, x)?, emb)?;
        let h1 = self.fal1.forward(p, h1, fields)?;
        let h2 = self.block2.forward(p, self.down.forward(p, h1)?, emb)?;
        let h2 = self.fal2.forward(p, h2, fields)?;
        let m = self.mid.forward(p, h2, emb)?;
        let u = self.up.forward(p, m.upsample2()?)?.add(h1)?;
        let u = self.block3.forward(p, u, emb)?;
        self.out.forward(p, self.out_norm.forward(p, u)?.silu())?.add(skip)
    }
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct I2vSample {
    /// Scaled latents `[C, N, l, h, w]`.
    pub latents: Tensor,
    pub fields: FieldInput,
}

pub struct I2vObjective<'a> {
    pub net: &'a I2vNet,
    pub schedule: NoiseSchedule,
}

impl I2vObjective<'_> {
    pub fn sample_loss<'t>(&self, p: &Bound<'t>, s: &I2vSample, t: usize, eps: &Tensor) -> Result<Var<'t>> {
        let zt = forward_perturb(&s.latents, t, eps, &self.schedule)?.z;
        let tape = p.tape();
        let z1 = tape.constant(s.latents.slice_axis(1, 0, 1)?);
        let pred = self.net.denoise(p, tape.constant(zt), t, z1, tape.constant(s.fields.0.clone()))?;
        score_loss_var(eps, pred, None)
    }

    fn draw(&self, s: &I2vSample, rng: &mut ChaCha8Rng) -> (usize, Tensor) {
        let t = rng.random_range(1..=self.schedule.steps());
        (t, Tensor::randn(s.latents.shape(), rng))
    }
}

impl Objective<I2vSample> for I2vObjective<'_> {
    fn loss<'t>(&self, p: &Bound<'t>, batch: &[&I2vSample], rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        batch_mean(batch, |s| {
            let (t, eps) = self.draw(s, rng);
            self.sample_loss(p, s, t, &eps)
        })
    }

    fn val_loss(&self, params: &ParamStore, samples: &[I2vSample]) -> Result<f64> {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        deterministic_mean(samples, 29, |s, rng| {
            let (t, eps) = self.draw(s, rng);
            Ok(self.sample_loss(&p, s, t, &eps)?.item())
        })
    }
}

#[derive(Clone, Debug)]
pub struct I2v {
    pub net: I2vNet,
    pub params: ParamStore,
    pub field_scale: f64,
    /// Image grid divided by the field grid.
    pub field_downsample: usize,
}

impl I2v {
    pub fn new<R: Rng + ?Sized>(config: I2vConfig, field_downsample: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = I2vNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, field_scale: 1.0, field_downsample })
    }

    pub fn config(&self) -> &I2vConfig {
        &self.net.config
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.net.config.schedule.build()
    }

    fn ground_truth_fields(&self, video: &Video4D) -> Result<FieldStack> {
        let f = self.field_downsample;
        let small = if f == 1 { video.clone() } else { video.downsample(f)? };
        compute_fields(&small)
    }

    /// Sets `field_scale` to `1 / rms` of the non-trivial fields.
    pub fn calibrate(&mut self, videos: &[Video4D]) -> Result<f64> {
        let (mut n, mut sq) = (0usize, 0.0);
        for v in videos {
            for f in &self.ground_truth_fields(v)?.fields()[1..] {
                n += f.len();
                sq += f.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        if n == 0 {
            return Err(Error::Empty("calibration set".into()));
        }
        self.field_scale = 1.0 / (sq / n as f64).sqrt().max(1e-8);
        Ok(self.field_scale)
    }

    /// Sets the motion variance from teacher-forced samples.
    pub fn calibrate_motion(&mut self, samples: &[I2vSample]) -> Result<f64> {
        let (mut n, mut sq) = (0usize, 0.0);
        for s in samples {
            let frames = s.latents.shape()[1];
            let z1 = s.latents.slice_axis(1, 0, 1)?;
            for i in 1..frames {
                let d = s.latents.slice_axis(1, i, 1)?.sub(&z1)?;
                n += d.len();
                sq += d.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        if n == 0 {
            return Err(Error::Empty("calibration set".into()));
        }
        self.net.motion_var = sq / n as f64;
        Ok(self.net.motion_var)
    }

    pub fn field_input(&self, fields: &FieldStack) -> Result<FieldInput> {
        FieldInput::new(fields, self.field_scale, self.net.config.use_fal)
    }

    /// Teacher-forced sample: VAE latents and ground-truth fields.
    pub fn make_sample(&self, vae: &Vae, video: &Video4D) -> Result<I2vSample> {
        let latents = vae.encode_video::<ChaCha8Rng>(video, None)?.latents;
        Ok(I2vSample { latents, fields: self.field_input(&self.ground_truth_fields(video)?)? })
    }

    pub fn objective(&self) -> Result<I2vObjective<'_>> {
        Ok(I2vObjective { net: &self.net, schedule: self.schedule()? })
    }

    pub fn predict(&self, z_t: &Tensor, t: usize, z1: &Tensor, fields: &FieldInput) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let out = self.net.denoise(
            &p,
            tape.constant(z_t.clone()),
            t,
            tape.constant(z1.clone()),
            tape.constant(fields.0.clone()),
        )?;
        Ok(out.to_tensor())
    }

    /// Samples scaled latents for all N frames.
    pub fn sample_latents(&self, z1: &Tensor, fields: &FieldStack, seed: u64) -> Result<LatentVideo> {
        let n = fields.frame_number();
        check_frame_number(n)?;
        let input = self.field_input(fields)?;
        let s = z1.shape();
        let shape = [s[0], n, s[2], s[3], s[4]];
        let sched = self.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = sample_loop(|z, t| self.predict(z, t, z1, &input), &shape, &sched, &mut rng)?;
        Ok(LatentVideo { latents })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.net.config,
            "field_scale": self.field_scale,
            "field_downsample": self.field_downsample,
            "motion_var": self.net.motion_var,
        });
        let mut ck = Checkpoint::new("i2v", meta);
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("i2v")?;
        let bad = |m: &str| Error::Format { what: "i2v checkpoint", msg: m.to_string() };
        let config: I2vConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let fd = ck.meta["field_downsample"].as_u64().ok_or_else(|| bad("missing field_downsample"))? as usize;
        let mut model = Self::new(config, fd, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params.load_from(&ck.store(""))?;
        model.net.motion_var = ck.meta["motion_var"].as_f64().ok_or_else(|| bad("missing motion_var"))?;
        model.field_scale = ck.meta["field_scale"].as_f64().ok_or_else(|| bad("missing field_scale"))?;
        Ok(model)
    }
}

/// Tags an error with the pipeline stage it came from.
fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|source| match source {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: name, source: Box::new(e) },
    })
}

/// Full two-stage synthesis from a prompting frame. Frame 1 of the result is
/// the prompt itself.
pub fn synthesize_video(
    first_frame: &Tensor,
    n: usize,
    vae: &Vae,
    tddm: &Tddm,
    i2v: &I2v,
    seed: u64,
) -> Result<Video4D> {
    stage("tddm", check_frame_number(n))?;
    let fields = stage("tddm", tddm.sample_fields(first_frame, n, seed))?;
    synthesize_with_fields(first_frame, &fields, vae, i2v, seed)
}

/// Stage 2 alone, given fields (sampled or ground truth).
pub fn synthesize_with_fields(
    first_frame: &Tensor,
    fields: &FieldStack,
    vae: &Vae,
    i2v: &I2v,
    seed: u64,
) -> Result<Video4D> {
    let prompt = stage("vae", Video4D::new(vec![first_frame.clone(), first_frame.clone()]))?;
    let z1 = stage("vae", vae.encode_video::<ChaCha8Rng>(&prompt, None))?.latents;
    let z1 = stage("vae", z1.slice_axis(1, 0, 1))?;
    let latents = stage("i2v", i2v.sample_latents(&z1, fields, seed.wrapping_add(1)))?;
    let mut video = stage("vae", vae.decode_video(&latents))?;
    stage("i2v", video.set_frame(0, first_frame.clone()))?;
    Ok(video.map_frames(|f| f.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(use_fal: bool) -> I2v {
        let cfg = I2vConfig {
            latent_channels: 2,
            width: 4,
            emb_dim: 8,
            use_fal,
            schedule: ScheduleConfig { steps: 10, ..Default::default() },
            ..Default::default()
        };
        I2v::new(cfg, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn random_fields(n: usize, seed: u64) -> FieldStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldStack::new((0..n).map(|_| Tensor::randn(&[4, 4, 4], &mut rng).scale(0.1)).collect()).unwrap()
    }

    #[test]
    fn shape_contract() {
        let m = small(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [6, 10, 16] {
            let z = Tensor::randn(&[2, n, 4, 4, 4], &mut rng);
            let z1 = z.slice_axis(1, 0, 1).unwrap();
            let f = m.field_input(&random_fields(n, 2)).unwrap();
            assert_eq!(m.predict(&z, 3, &z1, &f).unwrap().shape(), z.shape());
        }
    }

    #[test]
    fn inconsistent_frame_numbers_rejected() {
        let m = small(true);
        let z = Tensor::zeros(&[2, 5, 4, 4, 4]);
        let z1 = Tensor::zeros(&[2, 1, 4, 4, 4]);
        let f = m.field_input(&random_fields(6, 3)).unwrap();
        assert!(matches!(m.predict(&z, 3, &z1, &f), Err(Error::FrameNumber { .. })));
    }

    #[test]
    fn ablated_arm_runs() {
        let m = small(false);
        let z = Tensor::zeros(&[2, 4, 4, 4, 4]);
        let z1 = Tensor::zeros(&[2, 1, 4, 4, 4]);
        let f = m.field_input(&random_fields(4, 3)).unwrap();
        assert_eq!(m.predict(&z, 3, &z1, &f).unwrap().shape(), z.shape());
    }

    #[test]
    fn full_arm_uses_cumulative_fields() {
        let f = random_fields(3, 4);
        let full = FieldInput::new(&f, 1.0, true).unwrap().0;
        let steps = FieldInput::new(&f, 1.0, false).unwrap().0;
        let last = |t: &Tensor| t.slice_axis(1, 2, 1).unwrap();
        let expect = f.fields()[1].add(&f.fields()[2]).unwrap();
        assert!(last(&full).reshape(&[4, 4, 4]).unwrap().max_abs_diff(&expect) < 1e-12);
        assert!(last(&steps).reshape(&[4, 4, 4]).unwrap().max_abs_diff(&f.fields()[2]) < 1e-12);
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let mut m = small(true);
        for (k, t) in m.params.tensors_mut().iter_mut().enumerate() {
            let noise = Tensor::randn(t.shape(), &mut ChaCha8Rng::seed_from_u64(100 + k as u64));
            *t = t.add(&noise.scale(0.2)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::randn(&[2, 2, 4, 4, 4], &mut rng);
        let z1 = Tensor::randn(&[2, 1, 4, 4, 4], &mut rng);
        let target = Tensor::randn(z.shape(), &mut rng);
        let f = m.field_input(&random_fields(2, 8)).unwrap();
        let net = &m.net;
        let report = crate::nn::check_param_grads(&m.params, 60, 1e-3, 11, |p| {
            let tape = p.tape();
            let out = net.denoise(p, tape.constant(z.clone()), 4, tape.constant(z1.clone()), tape.constant(f.0.clone()))?;
            out.mse(tape.constant(target.clone()))
        })
        .unwrap();
        assert!(report.pass_fraction() >= 0.95, "{report:?}");
    }

    #[test]
    fn warp_reaches_latent_grid_from_image_fields() {
        let cfg = I2vConfig { latent_channels: 2, width: 4, emb_dim: 8, field_stride: 4, ..Default::default() };
        let m = I2v::new(cfg, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fields = FieldStack::new((0..3).map(|_| Tensor::randn(&[32, 32, 32], &mut rng)).collect()).unwrap();
        let z = Tensor::randn(&[2, 3, 8, 8, 8], &mut rng);
        let z1 = z.slice_axis(1, 0, 1).unwrap();
        let f = m.field_input(&fields).unwrap();
        assert_eq!(m.predict(&z, 5, &z1, &f).unwrap().shape(), z.shape());
    }
}
