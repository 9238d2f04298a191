//! Building blocks shared by the two denoisers: factorized spatial/temporal
//! layers, timestep and frame-number embeddings, prompt fusion (PAL) and the
//! field augmented layer (FAL).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Var};
use crate::error::{shape_err, Result};
use crate::nn::{sinusoidal_embedding, Bound, Conv, Dense, Init, Norm, ParamStore, TemporalConv};

/// Spatial 3-D convolution per frame followed by a 1-D convolution over
/// frames per site: `T(S(x)) + x` when `residual` is set, else `T(S(x))`.
#[derive(Clone, Debug)]
pub struct SpatialTemporalLayer {
    pub spatial: Conv,
    pub temporal: TemporalConv,
    pub residual: bool,
}

impl SpatialTemporalLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        let spatial = Conv::new(
            store,
            &format!("{name}.spatial"),
            channels,
            channels,
            ConvGeometry::same3(),
            true,
            Init::default(),
            rng,
        );
        let temporal =
            TemporalConv::new(store, &format!("{name}.temporal"), channels, channels, 3, Init::default(), rng);
        Self { spatial, temporal, residual }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.temporal.forward(p, self.spatial.forward(p, x)?)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Residual block `x + T(SiLU(GN(S(SiLU(GN(x))) + e)))` where `e` is the
/// per-channel projection of the conditioning embedding.
#[derive(Clone, Debug)]
pub struct StBlock {
    norm1: Norm,
    norm2: Norm,
    spatial: Conv,
    temporal: TemporalConv,
    emb: Dense,
}

impl StBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), channels, false),
            spatial: Conv::new(
                store,
                &format!("{name}.spatial"),
                channels,
                channels,
                ConvGeometry::same3(),
                true,
                Init::default(),
                rng,
            ),
            emb: Dense::new(store, &format!("{name}.emb"), emb_dim, channels, Init::default(), rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), channels, false),
            temporal: TemporalConv::new(
                store,
                &format!("{name}.temporal"),
                channels,
                channels,
                3,
                Init::Kaiming { gain: 0.5 },
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, x)?.silu();
        let h = self.spatial.forward(p, h)?;
        let h = h.add_channel(self.emb.forward(p, emb.silu())?)?;
        let h = self.norm2.forward(p, h)?.silu();
        x.add(self.temporal.forward(p, h)?)
    }
}

/// Sinusoidal embeddings of the timestep and (optionally) the frame number,
/// each through a two-layer MLP, summed.
#[derive(Clone, Debug)]
pub struct CondEmbedding {
    pub dim: usize,
    t_mlp: (Dense, Dense),
    n_mlp: Option<(Dense, Dense)>,
}

impl CondEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        with_frame_number: bool,
        rng: &mut R,
    ) -> Self {
        let mut mlp = |store: &mut ParamStore, sub: &str| {
            (
                Dense::new(store, &format!("{name}.{sub}.0"), dim, dim, Init::default(), rng),
                Dense::new(store, &format!("{name}.{sub}.1"), dim, dim, Init::default(), rng),
            )
        };
        let t_mlp = mlp(store, "t");
        let n_mlp = with_frame_number.then(|| mlp(store, "n"));
        Self { dim, t_mlp, n_mlp }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, t: usize, n: usize) -> Result<Var<'t>> {
        let tape = p.tape();
        let run = |mlp: &(Dense, Dense), pos: f64| -> Result<Var<'t>> {
            let e = tape.constant(sinusoidal_embedding(pos, self.dim));
            mlp.1.forward(p, mlp.0.forward(p, e)?.silu())
        };
        let e = run(&self.t_mlp, t as f64)?;
        match &self.n_mlp {
            Some(mlp) => e.add(run(mlp, n as f64)?),
            None => Ok(e),
        }
    }
}

/// Prompt mapping M: conv → ReLU → group norm at the first resolution and a
/// strided conv → ReLU → group norm for each coarser one.
#[derive(Clone, Debug)]
pub struct PromptBranch {
    stages: Vec<(Conv, Norm)>,
}

impl PromptBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let mut cin = 1;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let geom = if i == 0 { ConvGeometry::same3() } else { ConvGeometry::cube(3, 2, 1) };
                let conv = Conv::new(store, &format!("{name}.{i}.conv"), cin, w, geom, true, Init::default(), rng);
                let norm = Norm::new(store, &format!("{name}.{i}.norm"), w, false);
                cin = w;
                (conv, norm)
            })
            .collect();
        Self { stages }
    }

    /// `prompt: [1, 1, D, H, W]` → one `[C_l, 1, D_l, H_l, W_l]` per level.
    pub fn forward<'t>(&self, p: &Bound<'t>, prompt: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut h = prompt;
        let mut out = Vec::with_capacity(self.stages.len());
        for (conv, norm) in &self.stages {
            h = norm.forward(p, conv.forward(p, h)?.relu())?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Prompt attention layer: `x ⊙ (1 + P_mul(pf)) + P_add(pf)` with the prompt
/// features broadcast over frames.
#[derive(Clone, Debug)]
pub struct Pal {
    pub mul: Conv,
    pub add: Conv,
}

impl Pal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        prompt_ch: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let head = |store: &mut ParamStore, sub: &str, rng: &mut R| {
            Conv::new(
                store,
                &format!("{name}.{sub}"),
                prompt_ch,
                channels,
                ConvGeometry::pointwise(),
                true,
                Init::Zeros,
                rng,
            )
        };
        let mul = head(store, "mul", rng);
        let add = head(store, "add", rng);
        Self { mul, add }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, prompt: Var<'t>) -> Result<Var<'t>> {
        pal_fuse(x, self.mul.forward(p, prompt)?, self.add.forward(p, prompt)?)
    }
}

/// `x ⊙ (1 + m) + a`, broadcasting single-frame `m` and `a` over the frames of `x`.
pub fn pal_fuse<'t>(x: Var<'t>, m: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let frames = x.shape()[1];
    let spread = |v: Var<'t>| if v.shape()[1] == frames { Ok(v) } else { v.broadcast_axis(1, frames) };
    let (m, a) = (spread(m)?, spread(a)?);
    x.add(x.mul(m)?)?.add(a)
}

/// How the field volumes reach a feature resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpConfig {
    /// Field resolution divided by feature resolution.
    pub stride: usize,
    pub bias: bool,
    pub zero_init: bool,
}

/// Additive warp `z'_i = z_1 + Proj(C_i)` with a patchifying convolution
/// (kernel = stride) from field volumes to feature channels.
#[derive(Clone, Debug)]
pub struct Warp {
    pub proj: Conv,
}

impl Warp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: WarpConfig,
        rng: &mut R,
    ) -> Self {
        let s = cfg.stride.max(1);
        let geom = ConvGeometry { kernel: [s; 3], stride: [s; 3], pad: [0; 3] };
        let init = if cfg.zero_init { Init::Zeros } else { Init::default() };
        Self { proj: Conv::new(store, &format!("{name}.proj"), 1, channels, geom, cfg.bias, init, rng) }
    }

    /// Projects `[1, F, ...]` field volumes to `[C, F, d, h, w]` features.
    pub fn project<'t>(&self, p: &Bound<'t>, fields: Var<'t>) -> Result<Var<'t>> {
        self.proj.forward(p, fields)
    }

    /// `z1: [C, 1, d, h, w]`, `cum: [1, F, ...]` → `[C, F, d, h, w]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, z1: Var<'t>, cum: Var<'t>) -> Result<Var<'t>> {
        let proj = self.project(p, cum)?;
        let (zs, ps) = (z1.shape(), proj.shape());
        if zs.len() != 5 || zs[1] != 1 || zs[0] != ps[0] || zs[2..] != ps[2..] {
            return shape_err(format!("warp: z1 {zs:?} vs projected field {ps:?}"));
        }
        z1.broadcast_axis(1, ps[1])?.add(proj)
    }
}

/// Temporal attention projections shared by both FAL variants.
#[derive(Clone, Debug)]
struct AttentionHeads {
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

impl AttentionHeads {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        let pw = |store: &mut ParamStore, sub: &str, init: Init, rng: &mut R| {
            Conv::new(store, &format!("{name}.{sub}"), c, c, ConvGeometry::pointwise(), true, init, rng)
        };
        Self {
            q: pw(store, "q", Init::default(), rng),
            k: pw(store, "k", Init::default(), rng),
            v: pw(store, "v", Init::default(), rng),
            out: pw(store, "out", Init::Zeros, rng),
        }
    }

    fn attend<'t>(&self, p: &Bound<'t>, query: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, memory)?;
        let v = self.v.forward(p, memory)?;
        self.out.forward(p, q.temporal_attention(k, v)?)
    }
}

/// Field augmented layer. The full form attends from the frame features to
/// the interleaved sequence `[z_1, z_2, z'_2, ..., z_N, z'_N]`; the ablated
/// form concatenates per-step projected fields to the features and runs
/// plain temporal self-attention.
#[derive(Clone, Debug)]
pub struct Fal {
    norm: Norm,
    warp: Warp,
    heads: AttentionHeads,
    fuse: Option<Conv>,
}

impl Fal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        warp: WarpConfig,
        augmented: bool,
        rng: &mut R,
    ) -> Self {
        let norm = Norm::new(store, &format!("{name}.norm"), channels, false);
        let warp = Warp::new(store, &format!("{name}.warp"), channels, warp, rng);
        let heads = AttentionHeads::new(store, &format!("{name}.attn"), channels, rng);
        let fuse = (!augmented).then(|| {
            Conv::new(
                store,
                &format!("{name}.fuse"),
                2 * channels,
                channels,
                ConvGeometry::pointwise(),
                true,
                Init::default(),
                rng,
            )
        });
        Self { norm, warp, heads, fuse }
    }

    pub fn is_augmented(&self) -> bool {
        self.fuse.is_none()
    }

    /// `x: [C, N, d, h, w]`. `fields` are cumulative fields for the full
    /// layer and per-step fields for the ablated one, shaped `[1, N, ...]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, fields: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[1];
        if n < 2 || fields.shape().get(1) != Some(&n) {
            return shape_err(format!("FAL: features {:?}, fields {:?}", x.shape(), fields.shape()));
        }
        let h = self.norm.forward(p, x)?;
        let update = match &self.fuse {
            None => {
                let z1 = h.slice(1, 0, 1)?;
                let warped = self.warp.forward(p, z1, fields.slice(1, 1, n - 1)?)?;
                self.heads.attend(p, h, h.interleave_frames(warped)?)?
            }
            Some(fuse) => {
                let f = self.warp.project(p, fields)?;
                let joint = fuse.forward(p, Var::cat(&[h, f], 0)?)?;
                self.heads.attend(p, joint, joint)?
            }
        };
        x.add(update)
    }
}
