//! Noise schedule, forward perturbation, ε-prediction loss and DDPM ancestral
//! sampling shared by both diffusion stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// Shorter chain whose betas are stretched so that the total noise
    /// injected roughly matches the 1000-step default.
    pub fn compressed(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self { steps, beta_start: 1e-4 * k, beta_end: (0.02 * k).min(0.5) }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β_t and ᾱ_t tables. Timesteps are 1-based: index `t − 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `z_t` together with its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub z: Tensor,
    pub t: usize,
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·ε`.
pub fn forward_perturb(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<DiffusionState> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z = z0.zip_map(eps, |x, e| a * x + b * e)?;
    Ok(DiffusionState { z, t })
}

/// Linear MMSE estimate of ε from `z_t` when `z0` has a known mean and
/// per-frame variance `var` (axis 1 of `[C, F, ...]`):
/// `ε̂ = sqrt(1 − ᾱ)·(z_t − sqrt(ᾱ)·mean) / (ᾱ·var_f + 1 − ᾱ)`.
/// `mean` is `[C, 1, ...]` and broadcast over frames; `None` means zero.
pub fn prior_eps<'t>(z_t: Var<'t>, mean: Option<Var<'t>>, var: &[f64], alpha_bar: f64) -> Result<Var<'t>> {
    let s = z_t.shape();
    if s.len() < 2 || var.len() != s[1] {
        return shape_err(format!("prior variance of {} frames for {s:?}", var.len()));
    }
    let inner: usize = s[2..].iter().product();
    let b = 1.0 - alpha_bar;
    let mut coef = Vec::with_capacity(s[0] * s[1] * inner);
    for _ in 0..s[0] {
        for v in var {
            coef.extend(std::iter::repeat_n(b.sqrt() / (alpha_bar * v + b), inner));
        }
    }
    let centered = match mean {
        Some(m) => z_t.sub(m.broadcast_axis(1, s[1])?.scale(alpha_bar.sqrt()))?,
        None => z_t,
    };
    centered.mul_const(&Tensor::new(&s, coef)?)
}

/// Which frames (axis 1 of a `[C, F, ...]` tensor) contribute to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask(pub Vec<bool>);

impl FrameMask {
    /// First `n` of `total` frames.
    pub fn leading(n: usize, total: usize) -> Self {
        Self((0..total).map(|i| i < n).collect())
    }

    fn weights(&self, shape: &[usize]) -> Result<(Tensor, usize)> {
        if shape.len() < 2 || shape[1] != self.0.len() {
            return shape_err(format!("mask of {} frames for shape {shape:?}", self.0.len()));
        }
        let (c, f) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut w = Vec::with_capacity(c * f * inner);
        for _ in 0..c {
            for &keep in &self.0 {
                w.extend(std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, inner));
            }
        }
        let active = self.0.iter().filter(|&&k| k).count() * c * inner;
        if active == 0 {
            return Err(Error::Empty("frame mask selects nothing".into()));
        }
        Ok((Tensor::new(shape, w)?, active))
    }
}

/// Mean of `(ε − ε̂)²` over the unmasked entries.
pub fn score_loss(eps: &Tensor, eps_pred: &Tensor, mask: Option<&FrameMask>) -> Result<f64> {
    let sq = eps.zip_map(eps_pred, |a, b| (a - b) * (a - b))?;
    match mask {
        None => Ok(sq.mean()),
        Some(m) => {
            let (w, active) = m.weights(sq.shape())?;
            Ok(sq.zip_map(&w, |s, k| s * k)?.sum() / active as f64)
        }
    }
}

/// Differentiable [`score_loss`]; masked entries receive exactly zero gradient.
pub fn score_loss_var<'t>(eps: &Tensor, eps_pred: Var<'t>, mask: Option<&FrameMask>) -> Result<Var<'t>> {
    let target = eps_pred.tape().constant(eps.clone());
    let diff = eps_pred.sub(target)?;
    match mask {
        None => Ok(diff.square().mean()),
        Some(m) => {
            let (w, active) = m.weights(&diff.shape())?;
            Ok(diff.mul_const(&w)?.square().sum().scale(1.0 / active as f64))
        }
    }
}

/// One ancestral step `z_t → z_{t−1}` with σ_t² = β_t; no noise at t = 1.
pub fn reverse_step(
    state: &DiffusionState,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<DiffusionState> {
    let t = state.t;
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / (1.0 - beta).sqrt();
    let c = beta / (1.0 - ab).sqrt();
    let mut z = state.z.zip_map(eps_pred, |z, e| inv * (z - c * e))?;
    if t > 1 {
        let sigma = beta.sqrt();
        z = z.zip_map(noise, |z, n| z + sigma * n)?;
    }
    Ok(DiffusionState { z, t: t - 1 })
}

/// Runs `t = T..1` from a standard normal draw. The condition is whatever
/// `denoiser` captures.
pub fn sample_loop<R: Rng + ?Sized>(
    mut denoiser: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    shape: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut state = DiffusionState { z: Tensor::randn(shape, rng), t: sched.steps() };
    while state.t >= 1 {
        let eps = denoiser(&state.z, state.t)?;
        if eps.shape() != shape {
            return shape_err(format!("denoiser returned {:?} for state {shape:?}", eps.shape()));
        }
        let noise = if state.t > 1 { Tensor::randn(shape, rng) } else { Tensor::zeros(shape) };
        state = reverse_step(&state, &eps, sched, &noise)?;
    }
    Ok(state.z)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(2).is_err());
    }

    #[test]
    fn prior_eps_is_exact_for_a_known_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = ScheduleConfig::compressed(20).build().unwrap();
        let mean = Tensor::randn(&[2, 1, 2, 2, 2], &mut rng);
        let z0 = Tensor::cat(&[&mean, &mean.scale(3.0)], 1).unwrap();
        let eps = Tensor::randn(z0.shape(), &mut rng);
        let zt = forward_perturb(&z0, 7, &eps, &sched).unwrap().z;
        let tape = Tape::no_grad();
        let ab = sched.alpha_bar(7).unwrap();
        let est = prior_eps(tape.constant(zt.clone()), Some(tape.constant(mean.clone())), &[0.0, 1.0], ab).unwrap().to_tensor();
        assert!(est.slice_axis(1, 0, 1).unwrap().max_abs_diff(&eps.slice_axis(1, 0, 1).unwrap()) < 1e-9);
        let other = est.slice_axis(1, 1, 1).unwrap();
        let expect = zt.slice_axis(1, 1, 1).unwrap().sub(&mean.scale(ab.sqrt())).unwrap().scale((1.0 - ab).sqrt());
        assert!(other.max_abs_diff(&expect) < 1e-12);
        assert!(prior_eps(tape.constant(zt), None, &[1.0], ab).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - s.beta(1).unwrap());
        let c = ScheduleConfig::compressed(100).build().unwrap();
        assert!(c.alpha_bar(100).unwrap() < 1e-3);
    }

    #[test]
    fn perturb_branches() {
        let s = make_linear_schedule(1, 0.75, 0.75).unwrap();
        let z0 = Tensor::full(&[3], 2.0);
        let st = forward_perturb(&z0, 1, &Tensor::zeros(&[3]), &s).unwrap();
        assert!(st.z.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let eps = Tensor::full(&[3], 4.0);
        let st = forward_perturb(&Tensor::zeros(&[3]), 1, &eps, &s).unwrap();
        assert!(st.z.data().iter().all(|&v| (v - 4.0 * 0.75f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn loss_basics() {
        let e = Tensor::zeros(&[1, 2, 3]);
        assert_eq!(score_loss(&e, &e, None).unwrap(), 0.0);
        assert_eq!(score_loss(&e, &Tensor::ones(&[1, 2, 3]), None).unwrap(), 1.0);
        assert!(score_loss(&e, &e, Some(&FrameMask(vec![false, false]))).is_err());
    }

    #[test]
    fn var_loss_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Tensor::randn(&[2, 5, 3], &mut rng);
        let pred = Tensor::randn(&[2, 5, 3], &mut rng);
        let mask = FrameMask::leading(3, 5);
        let tape = Tape::new();
        let l = score_loss_var(&eps, tape.leaf(pred.clone()), Some(&mask)).unwrap();
        assert!((l.item() - score_loss(&eps, &pred, Some(&mask)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = ScheduleConfig { steps: 10, ..Default::default() }.build().unwrap();
        let st = DiffusionState { z: Tensor::ones(&[4]), t: 1 };
        let a = reverse_step(&st, &Tensor::zeros(&[4]), &s, &Tensor::full(&[4], 100.0)).unwrap();
        let b = reverse_step(&st, &Tensor::zeros(&[4]), &s, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, 0);
        let scale = 1.0 / (1.0 - s.beta(1).unwrap()).sqrt();
        assert!(a.z.data().iter().all(|&v| (v - scale).abs() < 1e-15));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = ScheduleConfig { steps: 20, ..Default::default() }.build().unwrap();
        let den = |z: &Tensor, _t: usize| Ok(z.scale(0.1));
        let a = sample_loop(den, &[3, 2], &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_loop(den, &[3, 2], &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let bad = |_: &Tensor, _: usize| Ok(Tensor::zeros(&[1]));
        assert!(sample_loop(bad, &[3, 2], &s, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}
