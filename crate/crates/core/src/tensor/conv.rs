//! 2-D cross-correlation with zero padding, via im2col + gemm.

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::exec;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Output indices `o` in `0..out` whose input coordinate
    /// `o·stride + k − pad` falls inside `0..size`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.pad > k {
            ((size - 1 + self.pad - k) / self.stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Unfolds one `(cin, h, w)` image into a `(cin·kh·kw, ho·wo)` matrix.
    fn im2col(&self, img: &[Real]) -> Vec<Real> {
        let n = self.positions();
        let mut cols = vec![0.0 as Real; self.patch() * n];
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let rows = self.valid_range(ki, self.h, self.ho);
                for kj in 0..self.kw {
                    let xs = self.valid_range(kj, self.w, self.wo);
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in rows.clone() {
                        let y = oy * self.stride + ki - self.pad;
                        let src = &plane[y * self.w..(y + 1) * self.w];
                        let out = &mut dst[oy * self.wo + xs.start..oy * self.wo + xs.end];
                        let x0 = xs.start * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            out.copy_from_slice(&src[x0..x0 + out.len()]);
                        } else {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = src[x0 + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters column gradients back onto the image.
    fn col2im(&self, cols: &[Real]) -> Vec<Real> {
        let n = self.positions();
        let mut img = vec![0.0 as Real; self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let rows = self.valid_range(ki, self.h, self.ho);
                for kj in 0..self.kw {
                    let xs = self.valid_range(kj, self.w, self.wo);
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in rows.clone() {
                        let y = oy * self.stride + ki - self.pad;
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        let from = &src[oy * self.wo + xs.start..oy * self.wo + xs.end];
                        let x0 = xs.start * self.stride + kj - self.pad;
                        for (i, &v) in from.iter().enumerate() {
                            dst[x0 + i * self.stride] += v;
                        }
                    }
                }
            }
        }
        img
    }
}

/// Convolves `x: (b, cin, h, w)` with `weight: (cout, cin, kh, kw)` and an
/// optional `bias: (cout)`. Output spatial size is
/// `(in + 2·padding − k) / stride + 1` (floor).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let &[b, cin, h, w] = x.shape() else {
        return Err(Error::Usage(format!(
            "conv2d input must be (b,c,h,w), got {:?}",
            x.shape()
        )));
    };
    let &[cout, wcin, kh, kw] = weight.shape() else {
        return Err(Error::Usage(format!(
            "conv2d weight must be (out,in,kh,kw), got {:?}",
            weight.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::dim("conv2d", x.shape(), weight.shape()));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::dim("conv2d bias", bias.shape(), &[cout]));
        }
    }
    if stride == 0 {
        return Err(Error::Usage("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dim("conv2d", x.shape(), weight.shape()));
    }
    let geo = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    };
    let (k, n) = (geo.patch(), geo.positions());
    let in_len = cin * h * w;

    let mut out = vec![0.0 as Real; b * cout * n];
    exec::for_each_chunk(&mut out, cout * n, |s, dst| {
        let cols = geo.im2col(&x.data()[s * in_len..(s + 1) * in_len]);
        gemm(weight.data(), &cols, dst, cout, k, n);
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_exact_mut(n).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });

    let mut parents = vec![x.clone(), weight.clone()];
    parents.extend(bias.cloned());
    Ok(Tensor::from_op(
        vec![b, cout, geo.ho, geo.wo],
        out,
        parents,
        move |ctx| {
            let (x, weight) = (&ctx.parents[0], &ctx.parents[1]);
            let want_x = x.requires_grad();
            let want_w = weight.requires_grad();
            let per_sample = exec::map_indexed(b, |s| {
                let g = &ctx.grad[s * cout * n..(s + 1) * cout * n];
                let gw = want_w.then(|| {
                    let cols = geo.im2col(&x.data()[s * in_len..(s + 1) * in_len]);
                    let mut gw = vec![0.0 as Real; cout * k];
                    gemm_nt(g, &cols, &mut gw, cout, n, k);
                    gw
                });
                let gx = want_x.then(|| {
                    let mut gcols = vec![0.0 as Real; k * n];
                    gemm_tn(weight.data(), g, &mut gcols, k, cout, n);
                    geo.col2im(&gcols)
                });
                (gw, gx)
            });

            let mut grad_x = want_x.then(|| Vec::with_capacity(b * in_len));
            let mut grad_w = want_w.then(|| vec![0.0 as Real; cout * k]);
            for (gw, gx) in per_sample {
                if let (Some(acc), Some(gw)) = (grad_w.as_mut(), gw) {
                    acc.iter_mut().zip(&gw).for_each(|(a, v)| *a += *v);
                }
                if let (Some(acc), Some(gx)) = (grad_x.as_mut(), gx) {
                    acc.extend_from_slice(&gx);
                }
            }
            let mut grads = vec![grad_x, grad_w];
            if ctx.parents.len() == 3 {
                let mut gb = vec![0.0 as Real; cout];
                for sample in ctx.grad.chunks_exact(cout * n) {
                    for (acc, row) in gb.iter_mut().zip(sample.chunks_exact(n)) {
                        *acc += row.iter().map(|&v| v as f64).sum::<f64>() as Real;
                    }
                }
                grads.push(Some(gb));
            }
            grads
        },
    ))
}
