//! Stage training drivers, test-set synthesis and the ablation grid.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::i2v::{synthesize_video, I2v, I2vConfig};
use crate::io::data_hash;
use crate::metrics::{evaluate, static_video, EvalReport};
use crate::phantom::{generate_dataset, PhantomDataset, Video4D};
use crate::tddm::{Tddm, TddmConfig};
use crate::trainer::{fit, RunReport, TrainerConfig};
use crate::vae::{Vae, VaeConfig};

pub fn dataset(cfg: &RunConfig) -> Result<PhantomDataset> {
    let p = &cfg.phantom;
    generate_dataset(p.n_train, p.n_val, p.n_test, &cfg.phantom_base(), (p.frame_min, p.frame_max), cfg.seed)
}

pub fn videos(split: &[crate::phantom::PhantomSample]) -> Vec<Video4D> {
    split.iter().map(|s| s.video.clone()).collect()
}

pub fn train_vae(config: &VaeConfig, trainer: &TrainerConfig, train: &[Video4D], val: &[Video4D]) -> Result<(Vae, RunReport)> {
    let mut vae = Vae::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(trainer.seed))?;
    let (params, report) = fit(&vae.net, vae.params.clone(), train, val, trainer)?;
    vae.params = params;
    vae.calibrate(train)?;
    vae.data_hash = data_hash(train);
    Ok((vae, report))
}

pub fn train_tddm(
    config: &TddmConfig,
    trainer: &TrainerConfig,
    train: &[Video4D],
    val: &[Video4D],
) -> Result<(Tddm, RunReport)> {
    let mut tddm = Tddm::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(trainer.seed))?;
    tddm.calibrate(train)?;
    let tr = train.iter().map(|v| tddm.make_sample(v)).collect::<Result<Vec<_>>>()?;
    let va = val.iter().map(|v| tddm.make_sample(v)).collect::<Result<Vec<_>>>()?;
    let (params, report) = fit(&tddm.objective()?, tddm.params.clone(), &tr, &va, trainer)?;
    tddm.params = params;
    Ok((tddm, report))
}

/// Teacher-forced Stage-2 training on ground-truth fields at the TDDM's
/// working resolution.
pub fn train_i2v(
    config: &I2vConfig,
    trainer: &TrainerConfig,
    field_downsample: usize,
    vae: &Vae,
    train: &[Video4D],
    val: &[Video4D],
) -> Result<(I2v, RunReport)> {
    let mut i2v = I2v::new(config.clone(), field_downsample, &mut ChaCha8Rng::seed_from_u64(trainer.seed))?;
    i2v.calibrate(train)?;
    let tr = train.iter().map(|v| i2v.make_sample(vae, v)).collect::<Result<Vec<_>>>()?;
    i2v.calibrate_motion(&tr)?;
    let va = val.iter().map(|v| i2v.make_sample(vae, v)).collect::<Result<Vec<_>>>()?;
    let (params, report) = fit(&i2v.objective()?, i2v.params.clone(), &tr, &va, trainer)?;
    i2v.params = params;
    Ok((i2v, report))
}

/// Sampling seed of the `i`-th test sequence; shared by every arm so
/// comparisons are paired.
pub fn eval_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1000 + i as u64)
}

/// Synthesizes one video per reference, prompted by its first frame and
/// frame number.
pub fn synthesize_set(vae: &Vae, tddm: &Tddm, i2v: &I2v, refs: &[Video4D], seed: u64) -> Result<Vec<Video4D>> {
    refs.par_iter()
        .enumerate()
        .map(|(i, v)| {
            synthesize_video(v.frame(0), v.frame_number(), vae, tddm, i2v, eval_seed(seed, i))
        })
        .collect()
}

/// First frame repeated N times for every reference.
pub fn static_baseline(refs: &[Video4D]) -> Result<Vec<Video4D>> {
    refs.iter().map(|v| static_video(v.frame(0), v.frame_number())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Full,
    NoFal,
    NoN,
    NoPal,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoFal, Arm::NoN, Arm::NoPal];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoFal => "no-fal",
            Arm::NoN => "no-n",
            Arm::NoPal => "no-pal",
        }
    }

    pub fn tddm_config(self, base: &TddmConfig) -> TddmConfig {
        let mut c = base.clone();
        match self {
            Arm::NoN => c.use_frame_number = false,
            Arm::NoPal => c.use_pal = false,
            Arm::Full | Arm::NoFal => {}
        }
        c
    }

    pub fn i2v_config(self, base: &I2vConfig) -> I2vConfig {
        let mut c = base.clone();
        match self {
            Arm::NoN => c.use_frame_number = false,
            Arm::NoFal => c.use_fal = false,
            Arm::Full | Arm::NoPal => {}
        }
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}; expected full, no-fal, no-n or no-pal")))
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    let arms: Vec<Arm> = list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
    if arms.is_empty() {
        return Err(Error::Config("no arms given".into()));
    }
    Ok(arms)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub eval: EvalReport,
    pub tddm_final_loss: f64,
    pub i2v_final_loss: f64,
}

fn last_loss(r: &RunReport) -> f64 {
    r.losses.last().copied().unwrap_or(f64::NAN)
}

/// Trained stage models for a set of arms. Arms whose stage configs coincide
/// share one trained model.
pub struct ArmModels {
    pub tddm: Vec<(TddmConfig, Tddm, RunReport)>,
    pub i2v: Vec<(I2vConfig, I2v, RunReport)>,
}

impl ArmModels {
    pub fn train(cfg: &RunConfig, arms: &[Arm], vae: &Vae, train: &[Video4D], val: &[Video4D]) -> Result<Self> {
        let mut out = Self { tddm: Vec::new(), i2v: Vec::new() };
        for &arm in arms {
            let tc = arm.tddm_config(&cfg.tddm);
            if !out.tddm.iter().any(|(c, _, _)| *c == tc) {
                log::info!("training TDDM for arm {arm}");
                let (m, r) = train_tddm(&tc, &cfg.trainer.tddm, train, val)?;
                out.tddm.push((tc, m, r));
            }
            let ic = arm.i2v_config(&cfg.i2v);
            if !out.i2v.iter().any(|(c, _, _)| *c == ic) {
                log::info!("training I2V for arm {arm}");
                let (m, r) = train_i2v(&ic, &cfg.trainer.i2v, cfg.tddm.working_downsample, vae, train, val)?;
                out.i2v.push((ic, m, r));
            }
        }
        Ok(out)
    }

    pub fn get(&self, arm: Arm, cfg: &RunConfig) -> Option<(&Tddm, &RunReport, &I2v, &RunReport)> {
        let tc = arm.tddm_config(&cfg.tddm);
        let ic = arm.i2v_config(&cfg.i2v);
        let (_, t, tr) = self.tddm.iter().find(|(c, _, _)| *c == tc)?;
        let (_, i, ir) = self.i2v.iter().find(|(c, _, _)| *c == ic)?;
        Some((t, tr, i, ir))
    }
}

/// Synthesizes the test references with every arm (paired seeds) and
/// evaluates each against ground truth.
pub fn evaluate_arms(
    cfg: &RunConfig,
    arms: &[Arm],
    models: &ArmModels,
    vae: &Vae,
    refs: &[Video4D],
) -> Result<Vec<ArmResult>> {
    arms.iter()
        .map(|&arm| {
            let (tddm, tr, i2v, ir) =
                models.get(arm, cfg).ok_or_else(|| Error::Config(format!("arm {arm} was not trained")))?;
            log::info!("synthesizing {} test sequences for arm {arm}", refs.len());
            let preds = synthesize_set(vae, tddm, i2v, refs, cfg.seed)?;
            Ok(ArmResult {
                arm,
                eval: evaluate(&preds, refs, vae)?,
                tddm_final_loss: last_loss(tr),
                i2v_final_loss: last_loss(ir),
            })
        })
        .collect()
}

/// Test references capped at `metrics.eval_sequences`.
pub fn eval_refs(cfg: &RunConfig, ds: &PhantomDataset) -> Vec<Video4D> {
    let k = cfg.metrics.eval_sequences;
    let n = if k == 0 { ds.test.len() } else { k.min(ds.test.len()) };
    videos(&ds.test[..n])
}

pub const CSV_HEADER: &str = "arm,psnr,lpips_proxy,fvd_proxy";

pub fn csv_row(name: &str, e: &EvalReport) -> String {
    format!("{name},{:.4},{:.6},{:.6}", e.mean_psnr, e.lpips_proxy, e.fvd_proxy.distance)
}

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&csv_row(r.arm.name(), &r.eval));
        s.push('\n');
    }
    s
}

/// Counts how many of (psnr, lpips_proxy, fvd_proxy) rank `a` strictly ahead of `b`.
pub fn metrics_won(a: &EvalReport, b: &EvalReport) -> usize {
    [a.mean_psnr > b.mean_psnr, a.lpips_proxy < b.lpips_proxy, a.fvd_proxy.distance < b.fvd_proxy.distance]
        .into_iter()
        .filter(|&x| x)
        .count()
}
