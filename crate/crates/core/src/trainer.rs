//! Training harness: AdamW, linear warmup then cosine decay, best-validation
//! tracking, divergence detection and bit-exact resume.
//!
//! Every source of randomness is derived from `(seed, epoch)` for the data
//! order and `(seed, step)` for per-step draws, so a resumed run replays the
//! exact same sequence as an uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{hex, Checkpoint};
use crate::nn::{Bound, ParamStore};
use crate::optim::{clip_grad_norm, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    /// Steps between trainer-state snapshots; 0 disables mid-epoch snapshots.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 500,
            epochs: 500,
            batch_size: 2,
            seed: 0,
            grad_clip_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("trainer settings must be positive: {self:?}")));
        }
        let total = self.total_steps(n_train);
        if self.warmup_steps >= total {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below the {total} total steps",
                self.warmup_steps
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex(&Sha256::digest(json))
    }
}

/// Linear ramp `0 → lr` over the warmup, then cosine decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainerConfig, total_steps: usize) -> f64 {
    let lr = cfg.learning_rate;
    let w = cfg.warmup_steps;
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if total_steps <= w {
        return lr;
    }
    let progress = ((step - w) as f64 / (total_steps - w) as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A model's training loss over a batch and its deterministic validation loss.
pub trait Objective<S> {
    /// Mean loss over `batch`; `rng` supplies every random draw of the step.
    fn loss<'t>(&self, p: &Bound<'t>, batch: &[&S], rng: &mut ChaCha8Rng) -> Result<Var<'t>>;

    /// Must depend only on the parameters and the samples.
    fn val_loss(&self, params: &ParamStore, samples: &[S]) -> Result<f64>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub wall_clock_secs: f64,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub final_step: usize,
    pub config_hash: String,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub report: RunReport,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    epoch: usize,
    optimizer_step: u64,
    report: RunReport,
    config: TrainerConfig,
}

impl TrainerState {
    fn fresh(params: ParamStore, cfg: &TrainerConfig) -> Self {
        let optimizer = AdamW::new(params.tensors(), cfg.weight_decay);
        Self {
            best_params: params.clone(),
            params,
            optimizer,
            step: 0,
            epoch: 0,
            report: RunReport { config_hash: cfg.hash(), ..Default::default() },
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainerConfig) -> Checkpoint {
        let meta = StateMeta {
            step: self.step,
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            report: self.report.clone(),
            config: cfg.clone(),
        };
        let mut ck = Checkpoint::new("trainer-state", serde_json::to_value(meta).expect("serializable"));
        ck.push_store("params/", &self.params);
        ck.push_store("best/", &self.best_params);
        let (m, v) = self.optimizer.moments();
        for (k, name) in self.params.names().iter().enumerate() {
            ck.tensors.push((format!("adam_m/{name}"), m[k].clone()));
            ck.tensors.push((format!("adam_v/{name}"), v[k].clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainerConfig)> {
        ck.expect_kind("trainer-state")?;
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format { what: "trainer state", msg: e.to_string() })?;
        let params = ck.store("params/");
        let best_params = ck.store("best/");
        let m = ck.store("adam_m/");
        let v = ck.store("adam_v/");
        let mut optimizer = AdamW::new(params.tensors(), meta.config.weight_decay);
        optimizer.set_moments(m.tensors(), v.tensors(), meta.optimizer_step)?;
        let state = Self { params, best_params, optimizer, step: meta.step, epoch: meta.epoch, report: meta.report };
        Ok((state, meta.config))
    }
}

fn derived_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((stream << 48) ^ index as u64);
    r
}

/// RNG for the data order of `epoch`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    derived_rng(seed, 1, epoch)
}

/// RNG for the random draws of optimizer step `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    derived_rng(seed, 2, step)
}

pub struct Trainer<'a, S, O: Objective<S>> {
    cfg: TrainerConfig,
    objective: &'a O,
    train: &'a [S],
    val: &'a [S],
    state: TrainerState,
    snapshot: Option<PathBuf>,
}

impl<'a, S, O: Objective<S>> Trainer<'a, S, O> {
    pub fn new(cfg: TrainerConfig, objective: &'a O, params: ParamStore, train: &'a [S], val: &'a [S]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        cfg.validate(train.len())?;
        let state = TrainerState::fresh(params, &cfg);
        Ok(Self { cfg, objective, train, val, state, snapshot: None })
    }

    pub fn resume(state: TrainerState, cfg: TrainerConfig, objective: &'a O, train: &'a [S], val: &'a [S]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        cfg.validate(train.len())?;
        Ok(Self { cfg, objective, train, val, state, snapshot: None })
    }

    /// Writes the trainer state to `path` after every epoch (and every
    /// `checkpoint_every` steps).
    pub fn with_snapshot(mut self, path: &Path) -> Self {
        self.snapshot = Some(path.to_path_buf());
        self
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn save_snapshot(&self) -> Result<()> {
        if let Some(path) = &self.snapshot {
            self.state.to_checkpoint(&self.cfg).write(path)?;
        }
        Ok(())
    }

    /// Runs up to `max_epochs` more epochs (all remaining when `None`).
    pub fn run(&mut self, max_epochs: Option<usize>) -> Result<()> {
        let started = Instant::now();
        let total = self.cfg.total_steps(self.train.len());
        let stop = max_epochs.map_or(self.cfg.epochs, |k| (self.state.epoch + k).min(self.cfg.epochs));
        let result = self.run_until(stop, total);
        self.state.report.wall_clock_secs += started.elapsed().as_secs_f64();
        result
    }

    fn run_until(&mut self, stop_epoch: usize, total: usize) -> Result<()> {
        while self.state.epoch < stop_epoch {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut epoch_rng(self.cfg.seed, self.state.epoch));
            for chunk in order.chunks(self.cfg.batch_size) {
                self.step(chunk, total)?;
                if self.cfg.checkpoint_every > 0 && self.state.step % self.cfg.checkpoint_every == 0 {
                    self.save_snapshot()?;
                }
            }
            self.state.epoch += 1;
            self.validate_epoch()?;
            self.save_snapshot()?;
        }
        Ok(())
    }

    fn step(&mut self, indices: &[usize], total: usize) -> Result<()> {
        let batch: Vec<&S> = indices.iter().map(|&i| &self.train[i]).collect();
        let mut rng = step_rng(self.cfg.seed, self.state.step);
        let tape = Tape::new();
        let p = self.state.params.bind(&tape);
        let loss = self.objective.loss(&p, &batch, &mut rng)?;
        let value = loss.item();
        if !value.is_finite() {
            self.save_snapshot()?;
            return Err(Error::Diverged { step: self.state.step, loss: value });
        }
        let mut grads = tape.backward(loss);
        let mut g = p.collect_grads(&mut grads);
        drop(p);
        if let Some(max) = self.cfg.grad_clip_norm {
            clip_grad_norm(&mut g, max);
        }
        if g.iter().any(|t| !t.is_finite()) {
            self.save_snapshot()?;
            return Err(Error::Diverged { step: self.state.step, loss: f64::NAN });
        }
        let lr = lr_at_step(self.state.step + 1, &self.cfg, total);
        self.state.optimizer.update(self.state.params.tensors_mut(), &g, lr);
        self.state.step += 1;
        self.state.report.losses.push(value);
        self.state.report.learning_rates.push(lr);
        self.state.report.final_step = self.state.step;
        Ok(())
    }

    fn validate_epoch(&mut self) -> Result<()> {
        let report = &mut self.state.report;
        let epoch = self.state.epoch;
        if self.val.is_empty() {
            self.state.best_params = self.state.params.clone();
            report.best_epoch = Some(epoch);
            return Ok(());
        }
        let v = self.objective.val_loss(&self.state.params, self.val)?;
        report.val_losses.push(v);
        if v.is_finite() && report.best_val_loss.is_none_or(|b| v < b) {
            report.best_val_loss = Some(v);
            report.best_epoch = Some(epoch);
            self.state.best_params = self.state.params.clone();
        }
        Ok(())
    }
}

/// Trains from `params` to completion; returns the best-validation parameters.
pub fn fit<S, O: Objective<S>>(
    objective: &O,
    params: ParamStore,
    train: &[S],
    val: &[S],
    cfg: &TrainerConfig,
) -> Result<(ParamStore, RunReport)> {
    let mut t = Trainer::new(cfg.clone(), objective, params, train, val)?;
    t.run(None)?;
    let state = t.into_state();
    Ok((state.best_params, state.report))
}

/// Mean of `f` over samples with a fixed RNG per sample, so repeated
/// evaluations see identical noise.
pub fn deterministic_mean<S>(
    samples: &[S],
    seed: u64,
    mut f: impl FnMut(&S, &mut ChaCha8Rng) -> Result<f64>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut acc = 0.0;
    for (i, s) in samples.iter().enumerate() {
        acc += f(s, &mut derived_rng(seed, 3, i))?;
    }
    Ok(acc / samples.len() as f64)
}

/// Mean of per-sample losses on one tape.
pub fn batch_mean<'t, S>(
    batch: &[&S],
    mut f: impl FnMut(&S) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for s in batch {
        let l = f(s)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("batch".into()))?;
    Ok(total.scale(1.0 / batch.len() as f64))
}

/// Numerically evaluates a loss without recording gradients.
pub fn eval_loss<S>(
    params: &ParamStore,
    f: impl for<'t> FnOnce(&Bound<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::no_grad();
    let p = params.bind(&tape);
    Ok(f(&p)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// `Σ (p_i − c_i)²` with a target per sample.
    struct Quadratic;

    impl Objective<Tensor> for Quadratic {
        fn loss<'t>(&self, p: &Bound<'t>, batch: &[&Tensor], _rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
            let id = crate::nn::ParamId::first();
            batch_mean(batch, |c| {
                let target = p.tape().constant((*c).clone());
                Ok(p.get(id).sub(target)?.square().sum())
            })
        }

        fn val_loss(&self, params: &ParamStore, samples: &[Tensor]) -> Result<f64> {
            let p = &params.tensors()[0];
            Ok(samples.iter().map(|c| p.sub(c).unwrap().data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
                / samples.len() as f64)
        }
    }

    fn cfg(epochs: usize) -> TrainerConfig {
        TrainerConfig { learning_rate: 0.05, weight_decay: 0.0, warmup_steps: 5, epochs, batch_size: 2, seed: 3, ..Default::default() }
    }

    fn init() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[3], vec![2.0, -1.0, 0.5]).unwrap());
        s
    }

    fn targets() -> Vec<Tensor> {
        (0..4).map(|i| Tensor::new(&[3], vec![1.0 + 0.1 * i as f64, 0.0, -1.0]).unwrap()).collect()
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainerConfig { warmup_steps: 100, ..Default::default() };
        assert_eq!(lr_at_step(0, &c, 1100), 0.0);
        assert_eq!(lr_at_step(100, &c, 1100), 1e-4);
        assert!((lr_at_step(600, &c, 1100) - 5e-5).abs() < 1e-12);
        assert!(lr_at_step(1100, &c, 1100).abs() < 1e-20);
    }

    #[test]
    fn warmup_must_fit() {
        let c = TrainerConfig { warmup_steps: 10, epochs: 2, batch_size: 2, ..Default::default() };
        assert!(c.validate(4).is_err());
        assert!(c.validate(20).is_ok());
    }

    #[test]
    fn quadratic_converges_to_mean_target() {
        let data = targets();
        let c = TrainerConfig { batch_size: 4, warmup_steps: 20, ..cfg(1500) };
        let (p, report) = fit(&Quadratic, init(), &data, &data, &c).unwrap();
        let got = &p.tensors()[0];
        let opt = [1.15, 0.0, -1.0];
        for (g, o) in got.data().iter().zip(opt) {
            assert!((g - o).abs() < 1e-6, "{g} vs {o}");
        }
        assert_eq!(report.losses.len(), 1500);
    }

    #[test]
    fn resume_matches_straight_run() {
        let data = targets();
        let (_, straight) = fit(&Quadratic, init(), &data, &data, &cfg(10)).unwrap();
        let mut t = Trainer::new(cfg(10), &Quadratic, init(), &data, &data).unwrap();
        t.run(Some(5)).unwrap();
        let ck = t.into_state().to_checkpoint(&cfg(10));
        let bytes = ck.to_bytes().unwrap();
        let (state, c) = TrainerState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let mut t = Trainer::resume(state, c, &Quadratic, &data, &data).unwrap();
        t.run(None).unwrap();
        let resumed = t.into_state().report;
        assert_eq!(resumed.losses, straight.losses);
        assert_eq!(resumed.val_losses, straight.val_losses);
    }

    #[test]
    fn weight_decay_changes_result() {
        let data = targets();
        let (a, _) = fit(&Quadratic, init(), &data, &data, &cfg(3)).unwrap();
        let c = TrainerConfig { weight_decay: 1e-5, ..cfg(3) };
        let (b, _) = fit(&Quadratic, init(), &data, &data, &c).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn nan_loss_aborts_with_last_good_params() {
        struct Nan;
        impl Objective<Tensor> for Nan {
            fn loss<'t>(&self, p: &Bound<'t>, _: &[&Tensor], _: &mut ChaCha8Rng) -> Result<Var<'t>> {
                Ok(p.get(crate::nn::ParamId::first()).sum().scale(f64::NAN))
            }
            fn val_loss(&self, _: &ParamStore, _: &[Tensor]) -> Result<f64> {
                Ok(0.0)
            }
        }
        let data = targets();
        let mut t = Trainer::new(cfg(5), &Nan, init(), &data, &data).unwrap();
        assert!(matches!(t.run(None), Err(Error::Diverged { step: 0, .. })));
        assert_eq!(t.state().params, init());
    }
}
