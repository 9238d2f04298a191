//! Stage 1: the temporal differential diffusion model. A factorized
//! spatial/temporal U-Net denoises a stack of 16 field channels, conditioned
//! on the prompting frame (through PAL) and on the frame number N.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::diffusion::{forward_perturb, prior_eps, sample_loop, score_loss_var, FrameMask, NoiseSchedule, ScheduleConfig};
use crate::error::{shape_err, Error, Result};
use crate::fields::{compute_fields, FieldStack};
use crate::io::Checkpoint;
use crate::layers::{CondEmbedding, Pal, PromptBranch, StBlock};
use crate::nn::{Bound, Conv, Init, Norm, ParamStore};
use crate::phantom::Video4D;
use crate::tensor::Tensor;
use crate::trainer::{batch_mean, deterministic_mean, Objective};

/// Temporal channels of the field stack; frames beyond N are padding.
pub const TEMPORAL_CHANNELS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TddmConfig {
    pub width: usize,
    pub emb_dim: usize,
    /// Fuse the prompt through PAL; otherwise it is concatenated as an input channel.
    pub use_pal: bool,
    pub use_frame_number: bool,
    /// Image grid divided by the working grid the fields live on.
    pub working_downsample: usize,
    pub schedule: ScheduleConfig,
}

impl Default for TddmConfig {
    fn default() -> Self {
        Self {
            width: 8,
            emb_dim: 16,
            use_pal: true,
            use_frame_number: true,
            working_downsample: 4,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TddmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.emb_dim < 2 || self.working_downsample == 0 {
            return Err(Error::Config(format!("invalid TDDM config {self:?}")));
        }
        self.schedule.build().map(|_| ())
    }
}

pub fn check_frame_number(n: usize) -> Result<()> {
    if !(2..=TEMPORAL_CHANNELS).contains(&n) {
        return Err(Error::FrameNumber { n, min: 2, max: TEMPORAL_CHANNELS });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TddmNet {
    pub config: TddmConfig,
    emb: CondEmbedding,
    prompt: Option<PromptBranch>,
    conv_in: Conv,
    block1: StBlock,
    pal1: Option<Pal>,
    down: Conv,
    block2: StBlock,
    pal2: Option<Pal>,
    mid: StBlock,
    up: Conv,
    block3: StBlock,
    out_norm: Norm,
    out: Conv,
    alpha_bar: Vec<f64>,
}

impl TddmNet {
    pub fn new<R: Rng + ?Sized>(config: TddmConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (w, e) = (config.width, config.emb_dim);
        let init = Init::default();
        let emb = CondEmbedding::new(store, "emb", e, config.use_frame_number, rng);
        let in_ch = if config.use_pal { 1 } else { 2 };
        let conv_in = Conv::new(store, "conv_in", in_ch, w, ConvGeometry::same3(), true, init, rng);
        let prompt = config.use_pal.then(|| PromptBranch::new(store, "prompt", &[w, 2 * w], rng));
        let block1 = StBlock::new(store, "block1", w, e, rng);
        let pal1 = config.use_pal.then(|| Pal::new(store, "pal1", w, w, rng));
        let down = Conv::new(store, "down", w, 2 * w, ConvGeometry::cube(3, 2, 1), true, init, rng);
        let block2 = StBlock::new(store, "block2", 2 * w, e, rng);
        let pal2 = config.use_pal.then(|| Pal::new(store, "pal2", 2 * w, 2 * w, rng));
        let mid = StBlock::new(store, "mid", 2 * w, e, rng);
        let up = Conv::new(store, "up", 2 * w, w, ConvGeometry::pointwise(), true, init, rng);
        let block3 = StBlock::new(store, "block3", w, e, rng);
        let out_norm = Norm::new(store, "out.norm", w, false);
        let out = Conv::new(store, "out.conv", w, 1, ConvGeometry::same3(), true, Init::Kaiming { gain: 0.3 }, rng);
        let alpha_bar = config.schedule.build()?.alpha_bars().to_vec();
        Ok(Self { config, emb, prompt, conv_in, block1, pal1, down, block2, pal2, mid, up, block3, out_norm, out, alpha_bar })
    }

    /// Unit variance on supervised channels, zero on the first field and,
    /// when N is known, on the padding.
    fn prior_var(&self, n: usize) -> Vec<f64> {
        (0..TEMPORAL_CHANNELS)
            .map(|c| if c == 0 || (self.config.use_frame_number && c >= n) { 0.0 } else { 1.0 })
            .collect()
    }

    /// `z_t: [1, 16, D, H, W]`, `prompt: [1, 1, D, H, W]` → ε̂ of the same shape as `z_t`.
    /// The network output is a residual on the closed-form prior estimate.
    pub fn denoise<'t>(&self, p: &Bound<'t>, z_t: Var<'t>, t: usize, prompt: Var<'t>, n: usize) -> Result<Var<'t>> {
        check_frame_number(n)?;
        let zs = z_t.shape();
        let ps = prompt.shape();
        if zs.len() != 5 || zs[0] != 1 || zs[1] != TEMPORAL_CHANNELS || ps.len() != 5 || ps[..2] != [1, 1] || zs[2..] != ps[2..] {
            return shape_err(format!("TDDM input {zs:?} with prompt {ps:?}"));
        }
        if zs[2..].iter().any(|d| d % 2 != 0) {
            return shape_err(format!("TDDM working grid {:?} must be even", &zs[2..]));
        }
        let ab = *self.alpha_bar.get(t.wrapping_sub(1)).ok_or(Error::Timestep { t, max: self.alpha_bar.len() })?;
        let skip = prior_eps(z_t, None, &self.prior_var(n), ab)?;
        let emb = self.emb.forward(p, t, n)?;
        let input = match self.prompt {
            Some(_) => z_t,
            None => Var::cat(&[z_t, prompt.broadcast_axis(1, TEMPORAL_CHANNELS)?], 0)?,
        };
        let pf = match &self.prompt {
            Some(branch) => branch.forward(p, prompt)?,
            None => Vec::new(),
        };
        let mut h1 = self.block1.forward(p, self.conv_in.forward(p, input)?, emb)?;
        if let Some(pal) = &self.pal1 {
            h1 = pal.forward(p, h1, pf[0])?;
        }
        let mut h2 = self.block2.forward(p, self.down.forward(p, h1)?, emb)?;
        if let Some(pal) = &self.pal2 {
            h2 = pal.forward(p, h2, pf[1])?;
        }
        let m = self.mid.forward(p, h2, emb)?;
        let u = self.up.forward(p, m.upsample2()?)?.add(h1)?;
        let u = self.block3.forward(p, u, emb)?;
        self.out.forward(p, self.out_norm.forward(p, u)?.silu())?.add(skip)
    }
}

/// One training example at working resolution.
#[derive(Clone, Debug)]
pub struct TddmSample {
    /// `[1, 1, D, H, W]`
    pub prompt: Tensor,
    /// Scaled fields padded with zeros to `[1, 16, D, H, W]`.
    pub fields: Tensor,
    pub frame_number: usize,
}

/// Stacks the first N fields into 16 zero-padded channels.
pub fn pad_fields(stack: &FieldStack, scale: f64) -> Result<Tensor> {
    let n = stack.frame_number();
    check_frame_number(n)?;
    let [d, h, w] = stack.dims();
    let mut data = stack.to_stacked().scale(scale).into_data();
    data.resize(TEMPORAL_CHANNELS * d * h * w, 0.0);
    Tensor::new(&[1, TEMPORAL_CHANNELS, d, h, w], data)
}

fn as_prompt(frame: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    frame.clone().reshape(&[1, 1, s[0], s[1], s[2]])
}

/// Training objective over [`TddmSample`]s.
pub struct TddmObjective<'a> {
    pub net: &'a TddmNet,
    pub schedule: NoiseSchedule,
}

impl TddmObjective<'_> {
    /// Masked ε loss of one sample at timestep `t` with noise `eps`.
    pub fn sample_loss<'t>(&self, p: &Bound<'t>, s: &TddmSample, t: usize, eps: &Tensor) -> Result<Var<'t>> {
        let mask = FrameMask::leading(s.frame_number, TEMPORAL_CHANNELS);
        let inner = s.fields.len() / TEMPORAL_CHANNELS;
        let mut z0 = s.fields.clone();
        z0.data_mut()[s.frame_number * inner..].iter_mut().for_each(|x| *x = 0.0);
        let zt = forward_perturb(&z0, t, eps, &self.schedule)?.z;
        let tape = p.tape();
        let pred = self.net.denoise(p, tape.constant(zt), t, tape.constant(s.prompt.clone()), s.frame_number)?;
        score_loss_var(eps, pred, Some(&mask))
    }

    fn draw(&self, s: &TddmSample, rng: &mut ChaCha8Rng) -> (usize, Tensor) {
        let t = rng.random_range(1..=self.schedule.steps());
        (t, Tensor::randn(s.fields.shape(), rng))
    }
}

impl Objective<TddmSample> for TddmObjective<'_> {
    fn loss<'t>(&self, p: &Bound<'t>, batch: &[&TddmSample], rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        batch_mean(batch, |s| {
            let (t, eps) = self.draw(s, rng);
            self.sample_loss(p, s, t, &eps)
        })
    }

    fn val_loss(&self, params: &ParamStore, samples: &[TddmSample]) -> Result<f64> {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        deterministic_mean(samples, 17, |s, rng| {
            let (t, eps) = self.draw(s, rng);
            Ok(self.sample_loss(&p, s, t, &eps)?.item())
        })
    }
}

/// A trained TDDM with its field normalization.
#[derive(Clone, Debug)]
pub struct Tddm {
    pub net: TddmNet,
    pub params: ParamStore,
    /// Multiplier applied to raw fields so they have unit variance in training.
    pub field_scale: f64,
}

impl Tddm {
    pub fn new<R: Rng + ?Sized>(config: TddmConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = TddmNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, field_scale: 1.0 })
    }

    pub fn config(&self) -> &TddmConfig {
        &self.net.config
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.net.config.schedule.build()
    }

    /// Working-resolution fields of a video.
    pub fn working_fields(&self, video: &Video4D) -> Result<(Tensor, FieldStack)> {
        let f = self.net.config.working_downsample;
        let small = if f == 1 { video.clone() } else { video.downsample(f)? };
        Ok((small.frame(0).clone(), compute_fields(&small)?))
    }

    /// Sets `field_scale` to `1 / rms` of the supervised field channels.
    pub fn calibrate(&mut self, videos: &[Video4D]) -> Result<f64> {
        let (mut n, mut sq) = (0usize, 0.0);
        for v in videos {
            let (_, fs) = self.working_fields(v)?;
            for f in &fs.fields()[1..] {
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

    pub fn make_sample(&self, video: &Video4D) -> Result<TddmSample> {
        let (first, fs) = self.working_fields(video)?;
        Ok(TddmSample {
            prompt: as_prompt(&first)?,
            fields: pad_fields(&fs, self.field_scale)?,
            frame_number: video.frame_number(),
        })
    }

    pub fn objective(&self) -> Result<TddmObjective<'_>> {
        Ok(TddmObjective { net: &self.net, schedule: self.schedule()? })
    }

    /// ε̂ for a single state without recording gradients.
    pub fn predict(&self, z_t: &Tensor, t: usize, prompt: &Tensor, n: usize) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        Ok(self.net.denoise(&p, tape.constant(z_t.clone()), t, tape.constant(prompt.clone()), n)?.to_tensor())
    }

    /// Samples N fields at working resolution for a full-resolution prompt frame.
    pub fn sample_fields(&self, first_frame: &Tensor, n: usize, seed: u64) -> Result<FieldStack> {
        check_frame_number(n)?;
        let f = self.net.config.working_downsample;
        let small = if f == 1 { first_frame.clone() } else { first_frame.avg_pool3(f)? };
        let prompt = as_prompt(&small)?;
        let s = small.shape();
        let shape = [1, TEMPORAL_CHANNELS, s[0], s[1], s[2]];
        let sched = self.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_loop(|z, t| self.predict(z, t, &prompt, n), &shape, &sched, &mut rng)?;
        let first_n = z.slice_axis(1, 0, n)?.reshape(&[n, s[0], s[1], s[2]])?;
        FieldStack::from_stacked(&first_n.scale(1.0 / self.field_scale))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.net.config, "field_scale": self.field_scale });
        let mut ck = Checkpoint::new("tddm", meta);
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("tddm")?;
        let bad = |m: String| Error::Format { what: "tddm checkpoint", msg: m };
        let config: TddmConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params.load_from(&ck.store(""))?;
        model.field_scale = ck.meta["field_scale"].as_f64().ok_or_else(|| bad("missing field_scale".into()))?;
        Ok(model)
    }
}
