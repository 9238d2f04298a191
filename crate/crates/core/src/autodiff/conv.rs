//! Strided 3-D convolution kernels (im2col + GEMM).
//!
//! Input layout is `[Ci, B, D, H, W]` where `B` is an independent batch axis
//! (frames, for video features). Weights are `[Co, Ci, kd, kh, kw]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    /// Cubic kernel with the same stride and padding on every axis.
    pub fn cube(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [kernel; 3], stride: [stride; 3], pad: [pad; 3] }
    }

    /// "Same" 3x3x3 convolution.
    pub fn same3() -> Self {
        Self::cube(3, 1, 1)
    }

    pub fn pointwise() -> Self {
        Self::cube(1, 1, 0)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = dims[i] + 2 * self.pad[i];
            if padded < self.kernel[i] || self.stride[i] == 0 {
                return None;
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }
}

struct Layout {
    ci: usize,
    co: usize,
    batch: usize,
    dims: [usize; 3],
    out: [usize; 3],
}

impl Layout {
    fn new(x: &[usize], w: &[usize], g: &ConvGeometry) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return shape_err(format!("conv3d expects rank-5 input and weight, got {x:?} / {w:?}"));
        }
        if w[1] != x[0] || w[2..] != g.kernel {
            return shape_err(format!("conv3d weight {w:?} does not match input {x:?} / {g:?}"));
        }
        let dims = [x[2], x[3], x[4]];
        let Some(out) = g.out_dims(dims) else {
            return shape_err(format!("conv3d kernel {g:?} larger than input {x:?}"));
        };
        Ok(Self { ci: x[0], co: w[0], batch: x[1], dims, out })
    }

    fn in_vol(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn chunk(&self, taps: usize) -> usize {
        let per_item = self.ci * taps * self.out_vol();
        (COL_BUDGET / per_item.max(1)).clamp(1, self.batch)
    }
}

/// Visits every (column-row, output-position, input-offset) triple that
/// falls inside the input for batch items `b0..b1`.
#[inline]
fn for_each_tap(
    l: &Layout,
    g: &ConvGeometry,
    b0: usize,
    b1: usize,
    mut f: impl FnMut(usize, usize, Option<usize>),
) {
    let [d, h, w] = l.dims;
    let [od, oh, ow] = l.out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = l.out_vol();
    let nb = b1 - b0;
    let ncols = nb * p;
    for ci in 0..l.ci {
        for a in 0..kd {
            for bb in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + bb) * kw + c;
                    for bi in 0..nb {
                        let src = (ci * l.batch + b0 + bi) * l.in_vol();
                        let col_base = row * ncols + bi * p;
                        for oz in 0..od {
                            let iz = (oz * sd + a) as isize - pd as isize;
                            let z_ok = iz >= 0 && (iz as usize) < d;
                            for oy in 0..oh {
                                let iy = (oy * sh + bb) as isize - ph as isize;
                                let y_ok = z_ok && iy >= 0 && (iy as usize) < h;
                                let out_row = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * sw + c) as isize - pw as isize;
                                    let idx = (y_ok && ix >= 0 && (ix as usize) < w).then(|| {
                                        src + (iz as usize * h + iy as usize) * w + ix as usize
                                    });
                                    f(col_base + out_row + ox, row, idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], l: &Layout, g: &ConvGeometry, b0: usize, b1: usize, col: &mut [f64]) {
    for_each_tap(l, g, b0, b1, |ci, _, src| {
        col[ci] = src.map_or(0.0, |s| x[s]);
    });
}

fn col2im(col: &[f64], l: &Layout, g: &ConvGeometry, b0: usize, b1: usize, gx: &mut [f64]) {
    for_each_tap(l, g, b0, b1, |ci, _, src| {
        if let Some(s) = src {
            gx[s] += col[ci];
        }
    });
}

/// `c = alpha * a @ b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // maintains; matrixmultiply only reads/writes within those strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain (non-differentiable) strided 3-D convolution.
pub fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let l = Layout::new(x.shape(), w.shape(), g)?;
    if let Some(b) = bias {
        if b.shape() != [l.co] {
            return shape_err(format!("conv3d bias {:?} for {} outputs", b.shape(), l.co));
        }
    }
    let taps = g.taps();
    let k = l.ci * taps;
    let p = l.out_vol();
    let total = l.batch * p;
    let mut out = vec![0.0; l.co * total];
    let chunk = l.chunk(taps);
    let mut col = vec![0.0; k * chunk * p];
    let mut b0 = 0;
    while b0 < l.batch {
        let b1 = (b0 + chunk).min(l.batch);
        let ncols = (b1 - b0) * p;
        im2col(x.data(), &l, g, b0, b1, &mut col[..k * ncols]);
        gemm(
            l.co,
            k,
            ncols,
            w.data(),
            (k, 1),
            &col[..k * ncols],
            (ncols, 1),
            0.0,
            &mut out[b0 * p..],
            (total, 1),
        );
        b0 = b1;
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(total).enumerate() {
            let bv = b.data()[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(&[l.co, l.batch, l.out[0], l.out[1], l.out[2]], out)
}

/// Gradients of a 3-D convolution: `(d input, d weight, d bias)`.
pub(crate) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    g: &ConvGeometry,
) -> (Tensor, Tensor, Tensor) {
    let l = Layout::new(x.shape(), w.shape(), g).expect("validated in forward");
    let taps = g.taps();
    let k = l.ci * taps;
    let p = l.out_vol();
    let total = l.batch * p;
    let gy = gy.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = gy.chunks(total).map(|r| r.iter().sum()).collect();
    let chunk = l.chunk(taps);
    let mut col = vec![0.0; k * chunk * p];
    let mut b0 = 0;
    while b0 < l.batch {
        let b1 = (b0 + chunk).min(l.batch);
        let ncols = (b1 - b0) * p;
        let gy_chunk = &gy[b0 * p..];
        // dW += dY · colᵀ
        im2col(x.data(), &l, g, b0, b1, &mut col[..k * ncols]);
        gemm(
            l.co,
            ncols,
            k,
            gy_chunk,
            (total, 1),
            &col[..k * ncols],
            (1, ncols),
            1.0,
            &mut gw,
            (k, 1),
        );
        // dcol = Wᵀ · dY, scattered back onto the input.
        gemm(
            k,
            l.co,
            ncols,
            w.data(),
            (1, k),
            gy_chunk,
            (total, 1),
            0.0,
            &mut col[..k * ncols],
            (ncols, 1),
        );
        col2im(&col[..k * ncols], &l, g, b0, b1, &mut gx);
        b0 = b1;
    }
    (
        Tensor::new(x.shape(), gx).expect("shape"),
        Tensor::new(w.shape(), gw).expect("shape"),
        Tensor::new(&[l.co], gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
        let (ci, b, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let co = w.shape()[0];
        let out = g.out_dims([d, h, wd]).unwrap();
        let mut y = Tensor::zeros(&[co, b, out[0], out[1], out[2]]);
        for o in 0..co {
            for bi in 0..b {
                for z in 0..out[0] {
                    for yy in 0..out[1] {
                        for xx in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                for a in 0..g.kernel[0] {
                                    for bb in 0..g.kernel[1] {
                                        for cc in 0..g.kernel[2] {
                                            let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let iy = (yy * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                            let ix = (xx * g.stride[2] + cc) as isize - g.pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            let xv = x.data()[(((c * b + bi) * d + iz) * h + iy) * wd + ix];
                                            let wv = w.data()[(((o * ci + c) * g.kernel[0] + a) * g.kernel[1] + bb)
                                                * g.kernel[2]
                                                + cc];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            let idx = (((o * b + bi) * out[0] + z) * out[1] + yy) * out[2] + xx;
                            y.data_mut()[idx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [
            ConvGeometry::same3(),
            ConvGeometry::cube(3, 2, 1),
            ConvGeometry::cube(2, 2, 0),
            ConvGeometry { kernel: [3, 1, 1], stride: [1, 1, 1], pad: [1, 0, 0] },
        ] {
            let x = Tensor::randn(&[2, 3, 4, 5, 6], &mut rng);
            let w = Tensor::randn(&[3, 2, g.kernel[0], g.kernel[1], g.kernel[2]], &mut rng);
            let y = conv3d_forward(&x, &w, None, &g).unwrap();
            assert!(y.max_abs_diff(&naive(&x, &w, &g)) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> == <x, conv_backward(gy)> and likewise for w.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeometry::cube(3, 2, 1);
        let x = Tensor::randn(&[2, 2, 5, 4, 4], &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3, 3], &mut rng);
        let y = conv3d_forward(&x, &w, None, &g).unwrap();
        let gy = Tensor::randn(y.shape(), &mut rng);
        let (gx, gw, _) = conv3d_backward(&x, &w, &gy, &g);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rw).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
