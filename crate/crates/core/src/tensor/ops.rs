use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::{exec, Error, Real, Result};

/// exp/erf/ln go through `libm` so transcendental results do not depend on
/// the platform's C library.
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
fn ln(x: f64) -> f64 {
    libm::log(x)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn last_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Usage(format!("{op} needs rank >= 1")))
}

impl Tensor {
    /// Elementwise sum. `other` may also be a trailing suffix of `self`'s
    /// shape (or vice versa), in which case it is broadcast over the
    /// leading dimensions.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (big, small, swapped) = if self.rank() >= other.rank() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        if !big.shape().ends_with(small.shape()) {
            return Err(Error::dim("add", self.shape(), other.shape()));
        }
        let inner = small.numel();
        let data: Vec<Real> = big
            .data()
            .chunks_exact(inner)
            .flat_map(|c| c.iter().zip(small.data()).map(|(a, b)| a + b))
            .collect();
        let parents = if swapped {
            vec![small.clone(), big.clone()]
        } else {
            vec![big.clone(), small.clone()]
        };
        Ok(Tensor::from_op(big.shape().to_vec(), data, parents, move |ctx| {
            let mut reduced = vec![0.0 as Real; inner];
            for c in ctx.grad.chunks_exact(inner) {
                reduced.iter_mut().zip(c).for_each(|(r, g)| *r += *g);
            }
            let full = ctx.grad.to_vec();
            if swapped {
                vec![Some(reduced), Some(full)]
            } else {
                vec![Some(full), Some(reduced)]
            }
        }))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::dim("mul", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let ga = ctx.grad.iter().zip(b).map(|(g, b)| g * b).collect();
            let gb = ctx.grad.iter().zip(a).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, s: Real) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![s as Real], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = last_dim(self, "softmax_lastdim")?;
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input to softmax".into()));
        }
        let mut data = vec![0.0 as Real; self.numel()];
        for (row, out) in self.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(row, out);
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let mut gx = vec![0.0 as Real; ctx.out.len()];
            for ((y, g), dx) in ctx
                .out
                .chunks_exact(n)
                .zip(ctx.grad.chunks_exact(n))
                .zip(gx.chunks_exact_mut(n))
            {
                let dot: f64 = y.iter().zip(g).map(|(&y, &g)| y as f64 * g as f64).sum();
                for ((d, &y), &g) in dx.iter_mut().zip(y).zip(g) {
                    *d = (y as f64 * (g as f64 - dot)) as Real;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// GELU with the exact Gaussian CDF: `x · Φ(x)`.
    pub fn gelu(&self) -> Tensor {
        const CHUNK: usize = 1 << 14;
        let x = self.data();
        let mut data = vec![0.0 as Real; x.len()];
        if !(self.requires_grad() && super::grad_enabled()) {
            exec::for_each_chunk(&mut data, CHUNK, |c, out| {
                for (o, &x) in out.iter_mut().zip(&x[c * CHUNK..]) {
                    let x = x as f64;
                    *o = (x * gauss_cdf(x)) as Real;
                }
            });
            return Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |_| unreachable!());
        }
        // The local derivative Φ(x) + x·φ(x) is kept from the forward pass.
        let mut slope = vec![0.0f64; x.len()];
        let mut pairs: Vec<(&mut [Real], &mut [f64])> = data.chunks_mut(CHUNK).zip(slope.chunks_mut(CHUNK)).collect();
        exec::for_each_chunk(&mut pairs, 1, |c, pair| {
            let (out, d) = &mut pair[0];
            for ((o, d), &x) in out.iter_mut().zip(d.iter_mut()).zip(&x[c * CHUNK..]) {
                let x = x as f64;
                let cdf = gauss_cdf(x);
                *o = (x * cdf) as Real;
                *d = cdf + x * FRAC_1_SQRT_2PI * exp(-0.5 * x * x);
            }
        });
        drop(pairs);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let g = ctx.grad.iter().zip(&slope).map(|(&g, &d)| (g as f64 * d) as Real).collect();
            vec![Some(g)]
        })
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// Keeps the first axis and merges the rest: `(d0, d1, ..) -> (d0, d1·..)`.
    pub fn flatten(&self) -> Result<Tensor> {
        match self.shape() {
            [] => Err(Error::Usage("flatten needs rank >= 1".into())),
            [d0, rest @ ..] => {
                let inner = rest.iter().product::<usize>();
                self.reshape(&[*d0, inner])
            }
        }
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Usage("transpose_last2 needs rank >= 2".into()));
        }
        let (rows, cols) = (self.shape()[r - 2], self.shape()[r - 1]);
        let data = transpose_batched(self.data(), rows, cols);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |ctx| {
            vec![Some(transpose_batched(ctx.grad, cols, rows))]
        }))
    }

    /// Averages a `(b, c, h, w)` map over its spatial axes, giving `(b, c)`.
    pub fn mean_spatial(&self) -> Result<Tensor> {
        let &[b, c, h, w] = self.shape() else {
            return Err(Error::Usage(format!(
                "mean_spatial needs a (b,c,h,w) map, got {:?}",
                self.shape()
            )));
        };
        let hw = h * w;
        let data = self
            .data()
            .chunks_exact(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as Real)
            .collect();
        Ok(Tensor::from_op(vec![b, c], data, vec![self.clone()], move |ctx| {
            let inv = 1.0 / hw as f64;
            let g = ctx
                .grad
                .iter()
                .flat_map(|&g| std::iter::repeat_n((g as f64 * inv) as Real, hw))
                .collect();
            vec![Some(g)]
        }))
    }

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal, or absent on one side, which is then shared by every batch item.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        let lead_a = &self.shape()[..ra - 2];
        let lead_b = &other.shape()[..rb - 2];
        if k != k2 || !(lead_a == lead_b || lead_a.is_empty() || lead_b.is_empty()) {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }

        // A batched `a` against a shared `b` is one tall gemm.
        if lead_b.is_empty() {
            let rows = self.numel() / k;
            let mut data = vec![0.0 as Real; rows * n];
            gemm(self.data(), other.data(), &mut data, rows, k, n);
            let mut shape = self.shape().to_vec();
            shape[ra - 1] = n;
            return Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), other.clone()],
                move |ctx| {
                    let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                    let ga = a.requires_grad().then(|| {
                        let mut ga = vec![0.0 as Real; rows * k];
                        gemm_nt(ctx.grad, b.data(), &mut ga, rows, n, k);
                        ga
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![0.0 as Real; k * n];
                        gemm_tn(a.data(), ctx.grad, &mut gb, k, rows, n);
                        gb
                    });
                    vec![ga, gb]
                },
            ));
        }

        let lead = if lead_a.is_empty() { lead_b } else { lead_a };
        let batch: usize = lead.iter().product();
        let (sa, sb) = (
            if lead_a.is_empty() { 0 } else { m * k },
            k * n,
        );
        let mut data = vec![0.0 as Real; batch * m * n];
        for (bi, c) in data.chunks_exact_mut(m * n).enumerate() {
            gemm(
                &self.data()[bi * sa..bi * sa + m * k],
                &other.data()[bi * sb..bi * sb + k * n],
                c,
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(shape, data, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let mut ga = a.requires_grad().then(|| vec![0.0 as Real; a.numel()]);
            let mut gb = b.requires_grad().then(|| vec![0.0 as Real; b.numel()]);
            let mut tmp_a = vec![0.0 as Real; m * k];
            let mut tmp_b = vec![0.0 as Real; k * n];
            for bi in 0..batch {
                let g = &ctx.grad[bi * m * n..(bi + 1) * m * n];
                let a_blk = &a.data()[bi * sa..bi * sa + m * k];
                let b_blk = &b.data()[bi * sb..bi * sb + k * n];
                if let Some(ga) = ga.as_mut() {
                    gemm_nt(g, b_blk, &mut tmp_a, m, n, k);
                    // sa == 0 means `a` is shared: accumulate in batch order.
                    ga[bi * sa..bi * sa + m * k]
                        .iter_mut()
                        .zip(&tmp_a)
                        .for_each(|(d, s)| *d += *s);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_tn(a_blk, g, &mut tmp_b, k, m, n);
                    gb[bi * sb..bi * sb + k * n]
                        .iter_mut()
                        .zip(&tmp_b)
                        .for_each(|(d, s)| *d += *s);
                }
            }
            vec![ga, gb]
        }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let &[b, classes] = self.shape() else {
            return Err(Error::Usage(format!(
                "cross_entropy needs (batch, classes) logits, got {:?}",
                self.shape()
            )));
        };
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![0.0 as Real; b * classes];
        let mut total = 0.0f64;
        for ((row, p), &y) in self
            .data()
            .chunks_exact(classes)
            .zip(probs.chunks_exact_mut(classes))
            .zip(labels)
        {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + ln(row.iter().map(|&v| exp(v as f64 - max)).sum::<f64>());
            total += lse - row[y] as f64;
            softmax_row(row, p);
        }
        let labels = labels.to_vec();
        let loss = (total / b as f64) as Real;
        Ok(Tensor::from_op(Vec::new(), vec![loss], vec![self.clone()], move |ctx| {
            let scale = ctx.grad[0] as f64 / b as f64;
            let mut g = vec![0.0 as Real; b * classes];
            for (i, (row, p)) in g.chunks_exact_mut(classes).zip(probs.chunks_exact(classes)).enumerate() {
                for (j, (d, &p)) in row.iter_mut().zip(p).enumerate() {
                    let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                    *d = ((p as f64 - onehot) * scale) as Real;
                }
            }
            vec![Some(g)]
        }))
    }
}

/// Concatenates along the last axis; all leading axes must agree.
pub fn concat_lastdim(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    if first.rank() == 0 {
        return Err(Error::Usage("concat_lastdim needs rank >= 1".into()));
    }
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim("concat_lastdim", first.shape(), p.shape()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.rank() - 1]).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let parents = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op(shape, data, parents, move |ctx| {
        let mut grads: Vec<Vec<Real>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
        for row in ctx.grad.chunks_exact(total) {
            let mut off = 0;
            for (g, &w) in grads.iter_mut().zip(&widths) {
                g.extend_from_slice(&row[off..off + w]);
                off += w;
            }
        }
        grads
            .into_iter()
            .zip(ctx.parents)
            .map(|(g, p)| p.requires_grad().then_some(g))
            .collect()
    }))
}

fn softmax_row(row: &[Real], out: &mut [Real]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut sum = 0.0f64;
    let mut tmp = Vec::with_capacity(row.len());
    for &v in row {
        let e = exp(v as f64 - max);
        sum += e;
        tmp.push(e);
    }
    for (o, e) in out.iter_mut().zip(tmp) {
        *o = (e / sum) as Real;
    }
}

fn transpose_batched(x: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0 as Real; x.len()];
    for (src, dst) in x.chunks_exact(rows * cols).zip(out.chunks_exact_mut(rows * cols)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}
