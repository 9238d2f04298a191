//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(format!("{op}: {sa:?} vs {sb:?}"));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.push(value, &[self], Box::new(move |g| vec![Some(backward(g))]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(&self, &other, "add")?;
        let v = self.value().add(&other.value())?;
        Ok(self.tape.push(v, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(&self, &other, "sub")?;
        let v = self.value().sub(&other.value())?;
        Ok(self.tape.push(v, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(&self, &other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push(
            v,
            &[self, other],
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |g, y| g * y).expect("shape")),
                    Some(g.zip_map(&a, |g, x| g * x).expect("shape")),
                ]
            }),
        ))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, |g| g.clone())
    }

    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|x| x / (1.0 + (-x).exp()));
        self.unary(v, move |g| {
            g.zip_map(&x, |g, x| {
                let s = 1.0 / (1.0 + (-x).exp());
                g * s * (1.0 + x * (1.0 - s))
            })
            .expect("shape")
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|x| x.max(0.0));
        self.unary(v, move |g| g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }).expect("shape"))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(|x| 1.0 / (1.0 + (-x).exp())));
        let out = Rc::clone(&y);
        self.unary((*y).clone(), move |g| g.zip_map(&out, |g, s| g * s * (1.0 - s)).expect("shape"))
    }

    pub fn exp(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::exp));
        let out = Rc::clone(&y);
        self.unary((*y).clone(), move |g| g.zip_map(&out, |g, e| g * e).expect("shape"))
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|x| x * x);
        self.unary(v, move |g| g.zip_map(&x, |g, x| 2.0 * g * x).expect("shape"))
    }

    pub fn sum(self) -> Var<'t> {
        let shape = self.shape();
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        let v = self.to_tensor().reshape(shape)?;
        Ok(self.unary(v, move |g| g.clone().reshape(&old).expect("shape")))
    }

    /// Mean squared error against another var of the same shape.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(target)?.square().mean())
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let k = self.tape.constant(c.clone());
        self.mul(k)
    }

    /// Strided 3-D convolution over `[Ci, B, D, H, W]`.
    pub fn conv3d(self, w: Var<'t>, b: Option<Var<'t>>, g: ConvGeometry) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let y = conv3d_forward(&x, &wv, bv.as_deref(), &g)?;
        let has_bias = b.is_some();
        let mut parents = vec![self, w];
        parents.extend(b);
        Ok(self.tape.push(
            y,
            &parents,
            Box::new(move |gy| {
                let (gx, gw, gb) = conv3d_backward(&x, &wv, gy, &g);
                let mut out = vec![Some(gx), Some(gw)];
                if has_bias {
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    /// Nearest-neighbour upsampling by 2 on the last three axes.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 3 {
            return shape_err(format!("upsample2 needs rank >= 3, got {shape:?}"));
        }
        let (d, h, w) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        let lead: usize = shape[..r - 3].iter().product();
        let x = self.value();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; lead * od * oh * ow];
        for l in 0..lead {
            let src = &x.data()[l * d * h * w..];
            let dst = &mut out[l * od * oh * ow..(l + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((z / 2) * h + y / 2) * w;
                    let drow = (z * oh + y) * ow;
                    for xx in 0..ow {
                        dst[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[r - 3] = od;
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        let v = Tensor::new(&oshape, out)?;
        Ok(self.unary(v, move |g| {
            let pooled = g.avg_pool3(2).expect("even dims");
            pooled.scale(8.0)
        }))
    }

    /// Adds a per-channel vector `b` of shape `[C]` to a `[C, ...]` tensor.
    pub fn add_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let c = shape[0];
        if b.shape() != [c] {
            return shape_err(format!("add_channel: {:?} onto {shape:?}", b.shape()));
        }
        let inner = self.value().len() / c;
        let mut v = self.to_tensor();
        let bv = b.value();
        for (ch, row) in v.data_mut().chunks_mut(inner).enumerate() {
            row.iter_mut().for_each(|x| *x += bv.data()[ch]);
        }
        Ok(self.tape.push(
            v,
            &[self, b],
            Box::new(move |g| {
                let gb: Vec<f64> = g.data().chunks(inner).map(|r| r.iter().sum()).collect();
                vec![Some(g.clone()), Some(Tensor::new(&[c], gb).expect("shape"))]
            }),
        ))
    }

    /// Group normalization of a `[C, B, ...]` tensor with per-channel affine
    /// parameters. With `per_item`, statistics are taken separately for each
    /// index of axis 1 (e.g. each frame); otherwise over all of it.
    pub fn group_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        groups: usize,
        per_item: bool,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return shape_err(format!("group_norm needs rank >= 2, got {shape:?}"));
        }
        let (c, b) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err(format!("group_norm: {c} channels into {groups} groups"));
        }
        let inner: usize = shape[2..].iter().product();
        let cg = c / groups;
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let n_sets = if per_item { groups * b } else { groups };
        // Element (ch, bi, p) lives at (ch * b + bi) * inner + p.
        let set_of = move |ch: usize, bi: usize| {
            if per_item {
                (ch / cg) * b + bi
            } else {
                ch / cg
            }
        };
        let count = if per_item { cg * inner } else { cg * b * inner } as f64;
        let mut mean = vec![0.0; n_sets];
        let mut var = vec![0.0; n_sets];
        for ch in 0..c {
            for bi in 0..b {
                let s = set_of(ch, bi);
                let row = &x.data()[(ch * b + bi) * inner..(ch * b + bi + 1) * inner];
                mean[s] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for ch in 0..c {
            for bi in 0..b {
                let s = set_of(ch, bi);
                let row = &x.data()[(ch * b + bi) * inner..(ch * b + bi + 1) * inner];
                var[s] += row.iter().map(|v| (v - mean[s]).powi(2)).sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for ch in 0..c {
            for bi in 0..b {
                let s = set_of(ch, bi);
                let off = (ch * b + bi) * inner;
                for p in 0..inner {
                    let h = (x.data()[off + p] - mean[s]) * inv_std[s];
                    xhat[off + p] = h;
                    y[off + p] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        let value = Tensor::new(&shape, y)?;
        let gshape = shape.clone();
        Ok(self.tape.push(
            value,
            &[self, gamma, beta],
            Box::new(move |g| {
                let gd = g.data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_dh = vec![0.0; n_sets];
                let mut sum_dh_h = vec![0.0; n_sets];
                for ch in 0..c {
                    for bi in 0..b {
                        let s = set_of(ch, bi);
                        let off = (ch * b + bi) * inner;
                        for p in 0..inner {
                            let (gy, h) = (gd[off + p], xhat[off + p]);
                            ggamma[ch] += gy * h;
                            gbeta[ch] += gy;
                            let dh = gy * gv.data()[ch];
                            sum_dh[s] += dh;
                            sum_dh_h[s] += dh * h;
                        }
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for ch in 0..c {
                    for bi in 0..b {
                        let s = set_of(ch, bi);
                        let off = (ch * b + bi) * inner;
                        let (m1, m2) = (sum_dh[s] / count, sum_dh_h[s] / count);
                        for p in 0..inner {
                            let dh = gd[off + p] * gv.data()[ch];
                            gx[off + p] = inv_std[s] * (dh - m1 - xhat[off + p] * m2);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&gshape, gx).expect("shape")),
                    Some(Tensor::new(&[c], ggamma).expect("shape")),
                    Some(Tensor::new(&[c], gbeta).expect("shape")),
                ]
            }),
        ))
    }

    /// Concatenation along `axis`.
    pub fn cat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts.first().ok_or_else(|| crate::Error::Empty("cat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::cat(&refs, axis)?;
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape.push(
            v,
            parts,
            Box::new(move |g| {
                let mut start = 0;
                lens.iter()
                    .map(|&len| {
                        let s = g.slice_axis(axis, start, len).expect("shape");
                        start += len;
                        Some(s)
                    })
                    .collect()
            }),
        ))
    }

    /// Range `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let v = self.value().slice_axis(axis, start, len)?;
        Ok(self.unary(v, move |g| {
            let (outer, n, inner) = Tensor::axis_split(&shape, axis);
            let mut full = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                full[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::new(&shape, full).expect("shape")
        }))
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn broadcast_axis(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.get(axis) != Some(&1) {
            return shape_err(format!("broadcast_axis: axis {axis} of {shape:?} is not 1"));
        }
        let x = self.value();
        let (outer, _, inner) = Tensor::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&x.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = n;
        let v = Tensor::new(&oshape, data)?;
        Ok(self.unary(v, move |g| {
            let mut acc = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    let src = &g.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (a, s) in acc[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *a += s;
                    }
                }
            }
            Tensor::new(&shape, acc).expect("shape")
        }))
    }

    /// Dense layer on a rank-1 input: `w [out, in] · x + b`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (o, i) = match wv.shape() {
            [o, i] => (*o, *i),
            s => return shape_err(format!("linear weight must be rank 2, got {s:?}")),
        };
        if x.shape() != [i] || bv.shape() != [o] {
            return shape_err(format!("linear: x {:?}, w {:?}, b {:?}", x.shape(), wv.shape(), bv.shape()));
        }
        let y: Vec<f64> = (0..o)
            .map(|r| bv.data()[r] + wv.data()[r * i..(r + 1) * i].iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(self.tape.push(
            Tensor::new(&[o], y)?,
            &[self, w, b],
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; i];
                let mut gw = vec![0.0; o * i];
                for r in 0..o {
                    for c in 0..i {
                        gx[c] += gd[r] * wv.data()[r * i + c];
                        gw[r * i + c] = gd[r] * x.data()[c];
                    }
                }
                vec![
                    Some(Tensor::new(&[i], gx).expect("shape")),
                    Some(Tensor::new(&[o, i], gw).expect("shape")),
                    Some(g.clone()),
                ]
            }),
        ))
    }

    /// Builds `[h_1, h_2, w_2, h_3, w_3, ..., h_N, w_N]` along axis 1 from
    /// `h: [C, N, ...]` and `w: [C, N-1, ...]`.
    pub fn interleave_frames(self, warped: Var<'t>) -> Result<Var<'t>> {
        let (hs, ws) = (self.shape(), warped.shape());
        if hs.len() < 2 || hs[1] < 1 || ws.len() != hs.len() || ws[1] + 1 != hs[1] || hs[0] != ws[0] || hs[2..] != ws[2..] {
            return shape_err(format!("interleave_frames: {hs:?} with {ws:?}"));
        }
        let (c, n) = (hs[0], hs[1]);
        let inner: usize = hs[2..].iter().product();
        let order = interleave_order(n);
        let (h, w) = (self.value(), warped.value());
        let len = order.len();
        let mut data = Vec::with_capacity(c * len * inner);
        for ch in 0..c {
            for &(from_warped, f) in &order {
                let (src, frames) = if from_warped { (&w, n - 1) } else { (&h, n) };
                let off = (ch * frames + f) * inner;
                data.extend_from_slice(&src.data()[off..off + inner]);
            }
        }
        let mut oshape = hs.clone();
        oshape[1] = len;
        let v = Tensor::new(&oshape, data)?;
        Ok(self.tape.push(
            v,
            &[self, warped],
            Box::new(move |g| {
                let mut gh = vec![0.0; c * n * inner];
                let mut gw = vec![0.0; c * (n - 1) * inner];
                for ch in 0..c {
                    for (pos, &(from_warped, f)) in order.iter().enumerate() {
                        let src = &g.data()[(ch * len + pos) * inner..(ch * len + pos + 1) * inner];
                        let (dst, frames) = if from_warped { (&mut gw, n - 1) } else { (&mut gh, n) };
                        let off = (ch * frames + f) * inner;
                        dst[off..off + inner].copy_from_slice(src);
                    }
                }
                vec![Some(Tensor::new(&hs, gh).expect("shape")), Some(Tensor::new(&ws, gw).expect("shape"))]
            }),
        ))
    }

    /// Single-head attention along axis 1, independently at every site of the
    /// trailing axes. `q: [C, F, ...]`, `k, v: [C, G, ...]`.
    pub fn temporal_attention(self, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (qs, ks, vs) = (self.shape(), k.shape(), v.shape());
        if qs.len() < 2 || ks != vs || ks[0] != qs[0] || ks[2..] != qs[2..] {
            return shape_err(format!("temporal_attention: q {qs:?}, k {ks:?}, v {vs:?}"));
        }
        let (q, kv, vv) = (self.value(), k.value(), v.value());
        let att = AttentionMaps::compute(&q, &kv);
        let out = att.apply(&vv);
        let att = Rc::new(att);
        Ok(self.tape.push(
            out,
            &[self, k, v],
            Box::new(move |g| {
                let (gq, gk, gv) = att.backward(&q, &kv, &vv, g);
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        ))
    }
}

/// Source of each position of the interleaved sequence: `(from_warped, frame)`
/// with zero-based frame indices into the respective stream.
pub fn interleave_order(n: usize) -> Vec<(bool, usize)> {
    let mut order = vec![(false, 0)];
    for i in 1..n {
        order.push((false, i));
        order.push((true, i - 1));
    }
    order
}

/// Softmax attention weights per site: `weights[s][i * G + j]`.
pub struct AttentionMaps {
    pub c: usize,
    pub f: usize,
    pub g: usize,
    pub sites: usize,
    pub scale: f64,
    pub weights: Vec<f64>,
}

impl AttentionMaps {
    pub fn compute(q: &Tensor, k: &Tensor) -> Self {
        let (c, f) = (q.shape()[0], q.shape()[1]);
        let g = k.shape()[1];
        let sites = q.len() / (c * f);
        let scale = 1.0 / (c as f64).sqrt();
        let mut weights = vec![0.0; sites * f * g];
        let (qd, kd) = (q.data(), k.data());
        let mut logits = vec![0.0; g];
        for s in 0..sites {
            for i in 0..f {
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += qd[(ch * f + i) * sites + s] * kd[(ch * g + j) * sites + s];
                    }
                    *l = acc * scale;
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let row = &mut weights[(s * f + i) * g..(s * f + i + 1) * g];
                let mut z = 0.0;
                for (w, l) in row.iter_mut().zip(&logits) {
                    *w = (l - m).exp();
                    z += *w;
                }
                row.iter_mut().for_each(|w| *w /= z);
            }
        }
        Self { c, f, g, sites, scale, weights }
    }

    /// Row `i` of the attention matrix at site `s`.
    pub fn row(&self, s: usize, i: usize) -> &[f64] {
        &self.weights[(s * self.f + i) * self.g..(s * self.f + i + 1) * self.g]
    }

    pub fn apply(&self, v: &Tensor) -> Tensor {
        let (c, f, g, sites) = (self.c, self.f, self.g, self.sites);
        let mut shape = v.shape().to_vec();
        shape[1] = f;
        let mut out = vec![0.0; c * f * sites];
        let vd = v.data();
        for s in 0..sites {
            for i in 0..f {
                let row = self.row(s, i);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, w) in row.iter().enumerate() {
                        acc += w * vd[(ch * g + j) * sites + s];
                    }
                    out[(ch * f + i) * sites + s] = acc;
                }
            }
        }
        Tensor::new(&shape, out).expect("shape")
    }

    fn backward(&self, q: &Tensor, k: &Tensor, v: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (c, f, g, sites) = (self.c, self.f, self.g, self.sites);
        let (qd, kd, vd, god) = (q.data(), k.data(), v.data(), gout.data());
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut da = vec![0.0; g];
        for s in 0..sites {
            for i in 0..f {
                let row = self.row(s, i);
                for (j, d) in da.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let go = god[(ch * f + i) * sites + s];
                        acc += go * vd[(ch * g + j) * sites + s];
                        gv[(ch * g + j) * sites + s] += row[j] * go;
                    }
                    *d = acc;
                }
                let dot: f64 = row.iter().zip(&da).map(|(a, d)| a * d).sum();
                for j in 0..g {
                    let dl = row[j] * (da[j] - dot) * self.scale;
                    if dl == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        gq[(ch * f + i) * sites + s] += dl * kd[(ch * g + j) * sites + s];
                        gk[(ch * g + j) * sites + s] += dl * qd[(ch * f + i) * sites + s];
                    }
                }
            }
        }
        (
            Tensor::new(q.shape(), gq).expect("shape"),
            Tensor::new(k.shape(), gk).expect("shape"),
            Tensor::new(v.shape(), gv).expect("shape"),
        )
    }
}
