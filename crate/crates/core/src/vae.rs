//! Per-frame volumetric VAE. Each frame `(L, H, W)` maps to a latent of shape
//! `(C_lat, L/f, H/f, W/f)`; frames are batched along axis 1 and never mix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::io::Checkpoint;
use crate::nn::{Bound, Conv, Init, Norm, ParamStore};
use crate::phantom::Video4D;
use crate::tensor::Tensor;
use crate::trainer::{deterministic_mean, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub kl_weight: f64,
    pub downsample_factor: usize,
    /// Frames per training sample drawn from each sequence.
    #[serde(default = "default_frames_per_sample")]
    pub frames_per_sample: usize,
}

fn default_frames_per_sample() -> usize {
    2
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_channels: 4, base_width: 8, kl_weight: 1e-6, downsample_factor: 4, frames_per_sample: 2 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {f} must be a power of two >= 2")));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.kl_weight < 0.0 || self.frames_per_sample == 0 {
            return Err(Error::Config(format!("invalid VAE config {self:?}")));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

/// Layer layout of the VAE; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VaeNet {
    pub config: VaeConfig,
    enc_in: Conv,
    enc_down: Vec<(Norm, Conv)>,
    enc_out: (Norm, Conv),
    dec_in: Conv,
    dec_up: Vec<(Norm, Conv)>,
    dec_out: (Norm, Conv),
}

/// Encoder outputs for a batch of frames `[1, B, L, H, W]`.
pub struct Encoded<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
    /// Activations after each downsampling stage.
    pub features: Vec<Var<'t>>,
}

impl VaeNet {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = config.stages();
        let same = ConvGeometry::same3();
        let down = ConvGeometry::cube(3, 2, 1);
        let init = Init::default();
        let enc_in = Conv::new(store, "enc.in", 1, config.width(0), same, true, init, rng);
        let enc_down = (0..s)
            .map(|i| {
                let (a, b) = (config.width(i), config.width(i + 1));
                (
                    Norm::new(store, &format!("enc.down{i}.norm"), a, true),
                    Conv::new(store, &format!("enc.down{i}.conv"), a, b, down, true, init, rng),
                )
            })
            .collect();
        let top = config.width(s);
        let enc_out = (
            Norm::new(store, "enc.out.norm", top, true),
            Conv::new(store, "enc.out.conv", top, 2 * config.latent_channels, same, true, init, rng),
        );
        let dec_in = Conv::new(store, "dec.in", config.latent_channels, top, same, true, init, rng);
        let dec_up = (0..s)
            .rev()
            .map(|i| {
                let (a, b) = (config.width(i + 1), config.width(i));
                (
                    Norm::new(store, &format!("dec.up{i}.norm"), a, true),
                    Conv::new(store, &format!("dec.up{i}.conv"), a, b, same, true, init, rng),
                )
            })
            .collect();
        let w0 = config.width(0);
        let dec_out = (
            Norm::new(store, "dec.out.norm", w0, true),
            Conv::new(store, "dec.out.conv", w0, 1, same, true, init, rng),
        );
        Ok(Self { config, enc_in, enc_down, enc_out, dec_in, dec_up, dec_out })
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.downsample_factor;
        if shape.len() != 5 || shape[0] != 1 || shape[2..].iter().any(|&d| d == 0 || d % f != 0) {
            return shape_err(format!("VAE expects [1, B, L, H, W] with dims divisible by {f}, got {shape:?}"));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, frames: Var<'t>) -> Result<Encoded<'t>> {
        self.check_frames(&frames.shape())?;
        let mut h = self.enc_in.forward(p, frames)?;
        let mut features = Vec::with_capacity(self.enc_down.len());
        for (norm, conv) in &self.enc_down {
            h = conv.forward(p, norm.forward(p, h)?.silu())?;
            features.push(h);
        }
        let out = self.enc_out.1.forward(p, self.enc_out.0.forward(p, h)?.silu())?;
        let c = self.config.latent_channels;
        Ok(Encoded { mean: out.slice(0, 0, c)?, log_var: out.slice(0, c, c)?, features })
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let s = latent.shape();
        if s.len() != 5 || s[0] != self.config.latent_channels {
            return shape_err(format!(
                "latent must be [{}, B, l, h, w], got {s:?}",
                self.config.latent_channels
            ));
        }
        let mut h = self.dec_in.forward(p, latent)?;
        for (norm, conv) in &self.dec_up {
            h = conv.forward(p, norm.forward(p, h)?.silu().upsample2()?)?;
        }
        Ok(self.dec_out.1.forward(p, self.dec_out.0.forward(p, h)?.silu())?.sigmoid())
    }

    /// Reconstruction MSE + `kl_weight` · KL (mean per latent element) for
    /// frames `[1, B, L, H, W]`, sampling the posterior with `rng`.
    pub fn loss<'t>(&self, p: &Bound<'t>, frames: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let enc = self.encode(p, frames)?;
        let noise = p.tape().constant(Tensor::randn(&enc.mean.shape(), rng));
        let std = enc.log_var.scale(0.5).exp();
        let z = enc.mean.add(std.mul(noise)?)?;
        let recon = self.decode(p, z)?.mse(frames)?;
        if self.config.kl_weight == 0.0 {
            return Ok(recon);
        }
        recon.add(kl_divergence(enc.mean, enc.log_var)?.scale(self.config.kl_weight))
    }
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` averaged over latent elements.
pub fn kl_divergence<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let terms = mean.square().add(log_var.exp())?.sub(log_var)?.add_scalar(-1.0);
    Ok(terms.mean().scale(0.5))
}

fn frames_tensor(frames: &[&Tensor]) -> Result<Tensor> {
    let t = Tensor::cat(frames, 0)?;
    let s = frames[0].shape();
    t.reshape(&[1, frames.len(), s[0], s[1], s[2]])
}

/// Training objective: each sample contributes `frames_per_sample` random frames.
impl Objective<Video4D> for VaeNet {
    fn loss<'t>(&self, p: &Bound<'t>, batch: &[&Video4D], rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let k = self.config.frames_per_sample;
        let mut frames = Vec::with_capacity(batch.len() * k);
        for v in batch {
            for _ in 0..k {
                frames.push(v.frame(rng.random_range(0..v.frame_number())));
            }
        }
        let x = p.tape().constant(frames_tensor(&frames)?);
        VaeNet::loss(self, p, x, rng)
    }

    fn val_loss(&self, params: &ParamStore, samples: &[Video4D]) -> Result<f64> {
        let tape = Tape::no_grad();
        let p = params.bind(&tape);
        deterministic_mean(samples, 0, |v, _| {
            let frames: Vec<&Tensor> = v.frames().iter().collect();
            let x = tape.constant(frames_tensor(&frames)?);
            let z = self.encode(&p, x)?.mean;
            Ok(self.decode(&p, z)?.mse(x)?.item())
        })
    }
}

/// A VAE with its parameters and latent calibration.
#[derive(Clone, Debug)]
pub struct Vae {
    pub net: VaeNet,
    pub params: ParamStore,
    /// Multiplier that gives encoder means unit variance on the training data.
    pub latent_scale: f64,
    pub data_hash: String,
}

/// Per-frame latents `[C_lat, N, l, h, w]` (already multiplied by the latent scale).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub latents: Tensor,
}

impl LatentVideo {
    pub fn frame_number(&self) -> usize {
        self.latents.shape()[1]
    }
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = VaeNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, latent_scale: 1.0, data_hash: String::new() })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.net.config
    }

    /// Latent dims for an image grid.
    pub fn latent_dims(&self, grid: [usize; 3]) -> [usize; 3] {
        grid.map(|d| d / self.net.config.downsample_factor)
    }

    fn check_grid(&self, dims: &[usize]) -> Result<()> {
        let f = self.net.config.downsample_factor;
        if dims.len() != 3 || dims.iter().any(|&d| d == 0 || d % f != 0) {
            return shape_err(format!("frame dims {dims:?} must be divisible by {f}"));
        }
        Ok(())
    }

    /// Posterior mean and log-variance of one frame, each `[C_lat, l, h, w]`.
    pub fn encode(&self, frame: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_grid(frame.shape())?;
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let x = tape.constant(frames_tensor(&[frame])?);
        let e = self.net.encode(&p, x)?;
        let squeeze = |v: Var| {
            let s = v.shape();
            v.to_tensor().reshape(&[s[0], s[2], s[3], s[4]])
        };
        Ok((squeeze(e.mean)?, squeeze(e.log_var)?))
    }

    /// Decodes one unscaled latent `[C_lat, l, h, w]` to a frame in `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 4 || s[0] != self.net.config.latent_channels {
            return shape_err(format!("latent must be [C_lat, l, h, w], got {s:?}"));
        }
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let z = tape.constant(latent.clone().reshape(&[s[0], 1, s[1], s[2], s[3]])?);
        let f = self.net.config.downsample_factor;
        self.net.decode(&p, z)?.to_tensor().reshape(&[s[1] * f, s[2] * f, s[3] * f])
    }

    /// Scaled latents of every frame. With `sample_posterior`, draws from the
    /// posterior instead of taking its mean.
    pub fn encode_video<R: Rng + ?Sized>(
        &self,
        video: &Video4D,
        sample_posterior: Option<&mut R>,
    ) -> Result<LatentVideo> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let frames: Vec<&Tensor> = video.frames().iter().collect();
        self.check_grid(frames[0].shape())?;
        let x = tape.constant(frames_tensor(&frames)?);
        let e = self.net.encode(&p, x)?;
        let mut z = e.mean.to_tensor();
        if let Some(rng) = sample_posterior {
            let std = e.log_var.to_tensor().map(|lv| (0.5 * lv).exp());
            let noise = Tensor::randn(z.shape(), rng);
            z = z.add(&std.zip_map(&noise, |s, n| s * n)?)?;
        }
        Ok(LatentVideo { latents: z.scale(self.latent_scale) })
    }

    pub fn decode_video(&self, lv: &LatentVideo) -> Result<Video4D> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let z = tape.constant(lv.latents.scale(1.0 / self.latent_scale));
        let out = self.net.decode(&p, z)?.to_tensor();
        let s = out.shape().to_vec();
        Video4D::from_stacked(&out.reshape(&s[1..])?)
    }

    /// Encoder activations of one frame after each downsampling stage.
    pub fn features(&self, frame: &Tensor) -> Result<Vec<Tensor>> {
        self.check_grid(frame.shape())?;
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let x = tape.constant(frames_tensor(&[frame])?);
        let e = self.net.encode(&p, x)?;
        let mut out: Vec<Tensor> = e.features.iter().map(|f| f.to_tensor()).collect();
        out.push(e.mean.to_tensor());
        Ok(out)
    }

    /// Sets the latent scale to `1 / std` of encoder means over `videos`.
    pub fn calibrate(&mut self, videos: &[Video4D]) -> Result<f64> {
        self.latent_scale = 1.0;
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in videos {
            let z = self.encode_video::<ChaCha8Rng>(v, None)?.latents;
            n += z.len();
            sum += z.sum();
            sq += z.data().iter().map(|x| x * x).sum::<f64>();
        }
        if n == 0 {
            return Err(Error::Empty("calibration set".into()));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
        self.latent_scale = 1.0 / std;
        Ok(self.latent_scale)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.net.config,
            "latent_scale": self.latent_scale,
            "data_hash": self.data_hash,
        });
        let mut ck = Checkpoint::new("vae", meta);
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("vae")?;
        let bad = |m: String| Error::Format { what: "vae checkpoint", msg: m };
        let config: VaeConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let latent_scale = ck.meta["latent_scale"].as_f64().ok_or_else(|| bad("missing latent_scale".into()))?;
        let data_hash = ck.meta["data_hash"].as_str().unwrap_or_default().to_string();
        let mut vae = Self::new(config, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        vae.params.load_from(&ck.store(""))?;
        vae.latent_scale = latent_scale;
        vae.data_hash = data_hash;
        Ok(vae)
    }
}
