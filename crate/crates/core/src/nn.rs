//! Parameter storage and the basic layers every network here is built from.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Grads, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Id of the first parameter added to a store.
    pub fn first() -> Self {
        ParamId(0)
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { tape, vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Replaces values by name. Every parameter of `self` must be present in
    /// `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(id) = other.id_of(name) else {
                return Err(Error::Format { what: "parameters", msg: format!("missing {name}") });
            };
            let src = other.get(id);
            if src.shape() != t.shape() {
                return shape_err(format!("{name}: stored {:?}, model {:?}", src.shape(), t.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in parameter order; parameters the loss did not touch get zeros.
    pub fn collect_grads(&self, grads: &mut Grads) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in) scaled by `gain`.
    Kaiming { gain: f64 },
    Zeros,
    Constant(f64),
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Kaiming { gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data).expect("shape")
            }
        }
    }
}

impl Default for Init {
    fn default() -> Self {
        Init::Kaiming { gain: 1.0 }
    }
}

/// Largest group count ≤ 4 that divides `channels`.
pub fn groups_for(channels: usize) -> usize {
    (1..=4.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// 3-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeometry,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let shape = [cout, cin, kd, kh, kw];
        let w = store.add(format!("{name}.weight"), init.tensor(&shape, cin * geom.taps(), rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { w, b, geom, cin, cout }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3d(p.get(self.w), self.b.map(|b| p.get(b)), self.geom)
    }
}

/// 1-D convolution along the frame axis of a `[C, F, D, H, W]` tensor,
/// applied independently at every spatial site with zero padding.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub conv: Conv,
}

impl TemporalConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let geom = ConvGeometry { kernel: [kernel, 1, 1], stride: [1; 3], pad: [kernel / 2, 0, 0] };
        Self { conv: Conv::new(store, name, cin, cout, geom, true, init, rng) }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 5 {
            return shape_err(format!("temporal conv expects [C, F, D, H, W], got {s:?}"));
        }
        let sites = s[2] * s[3] * s[4];
        let y = x.reshape(&[s[0], 1, s[1], 1, sites])?;
        let y = self.conv.forward(p, y)?;
        y.reshape(&[self.conv.cout, s[1], s[2], s[3], s[4]])
    }
}

/// Dense layer on rank-1 vectors.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.tensor(&[output, input], input, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(self.w), p.get(self.b))
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub per_item: bool,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, per_item: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: groups_for(channels), per_item }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.group_norm(p.get(self.gamma), p.get(self.beta), self.groups, self.per_item)
    }
}

/// Outcome of [`check_param_grads`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub probed: usize,
    pub passed: usize,
    pub worst_relative: f64,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        if self.probed == 0 {
            return 0.0;
        }
        self.passed as f64 / self.probed as f64
    }
}

/// Compares backprop gradients of `loss` with central differences at
/// `probes` randomly chosen scalar parameters. A probe passes when the
/// relative error is below `rel_tol`.
pub fn check_param_grads(
    store: &ParamStore,
    probes: usize,
    rel_tol: f64,
    seed: u64,
    loss: impl for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let l = loss(&p)?;
    let mut grads = tape.backward(l);
    let analytic = p.collect_grads(&mut grads);
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        Ok(loss(&s.bind(&tape))?.item())
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total = store.num_scalars();
    let mut report = GradCheck { probed: 0, passed: 0, worst_relative: 0.0 };
    let h = 1e-5;
    for _ in 0..probes.min(total) {
        let mut flat = rng.random_range(0..total);
        let k = store.tensors().iter().position(|t| {
            if flat < t.len() {
                true
            } else {
                flat -= t.len();
                false
            }
        });
        let k = k.expect("index within parameter count");
        let mut s = store.clone();
        s.tensors_mut()[k].data_mut()[flat] += h;
        let up = eval(&s)?;
        s.tensors_mut()[k].data_mut()[flat] -= 2.0 * h;
        let down = eval(&s)?;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k].data()[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.probed += 1;
        if rel < rel_tol {
            report.passed += 1;
        }
        report.worst_relative = report.worst_relative.max(rel);
    }
    Ok(report)
}

/// Sinusoidal embedding of a scalar position (timestep or frame count).
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    Tensor::new(&[dim], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn groups_divide_channels() {
        for c in 1..40 {
            let g = groups_for(c);
            assert!(g >= 1 && g <= 4 && c % g == 0);
        }
        assert_eq!(groups_for(8), 4);
        assert_eq!(groups_for(6), 3);
    }

    #[test]
    fn load_from_matches_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        let conv = Conv::new(&mut a, "c", 2, 3, ConvGeometry::same3(), true, Init::default(), &mut rng);
        let mut b = a.clone();
        b.get_mut(conv.w).data_mut()[0] = 42.0;
        a.load_from(&b).unwrap();
        assert_eq!(a.get(conv.w).data()[0], 42.0);
        let mut other = ParamStore::new();
        other.add("c.weight", Tensor::zeros(&[1]));
        assert!(a.load_from(&other).is_err());
    }

    #[test]
    fn embedding_is_bounded_and_distinguishes_positions() {
        let a = sinusoidal_embedding(7.0, 16);
        let b = sinusoidal_embedding(12.0, 16);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.max_abs_diff(&b) > 0.1);
    }
}
