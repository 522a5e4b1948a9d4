//! Channel-token self-attention branch.
//!
//! A tapped feature map `(b, c, h, w)` becomes `c` tokens per sample: each
//! channel is flattened to `h·w` values and mapped by one shared linear
//! projection to `d_embed`. Tokens go through multi-head scaled dot-product
//! attention (separate bias-free `W^Q_i, W^K_i, W^V_i` per head, concat,
//! bias-free `W^O` back to `d_embed`), then a per-token
//! `Linear → GELU → Linear` MLP to `d_out`, and are flattened to
//! `(b, c·d_out)`. There is no positional encoding, residual path or
//! normalization, so the branch is equivariant to channel permutations.

use serde::{Deserialize, Serialize};

use crate::nn::{join, Linear, Module};
use crate::tensor::concat_lastdim;
use crate::{exec, Error, Real, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Index of the backbone block whose output feeds this branch.
    pub tap_id: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_mlp_hidden: usize,
    /// Embedding length per channel token.
    pub d_out: usize,
}

impl BranchConfig {
    /// Desk-scale defaults: 3 heads, `d_k = d_embed / n_heads` (floored),
    /// 32 values per re-weighted channel.
    pub fn desk(tap_id: usize) -> Self {
        let d_embed = 64;
        let n_heads = 3;
        BranchConfig {
            tap_id,
            d_embed,
            n_heads,
            d_k: d_embed / n_heads,
            d_mlp_hidden: 128,
            d_out: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_embed", self.d_embed),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_mlp_hidden", self.d_mlp_hidden),
            ("d_out", self.d_out),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("branch {}: {name} must be positive", self.tap_id))),
            None => Ok(()),
        }
    }
}

/// Per-head query/key/value projections, each `d_embed → d_k`, bias-free.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub config: BranchConfig,
    /// Shared `h·w → d_embed` projection applied to every channel.
    pub token_proj: Linear,
    pub heads: Vec<AttentionHead>,
    /// `n_heads·d_k → d_embed`, bias-free.
    pub w_o: Linear,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

/// Result of one attention call; `weights` is `(b, c, c)` with rows over keys.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Tensor,
    pub weights: Tensor,
}

impl AttentionBranch {
    /// `spatial` is `h·w` of the tapped feature map.
    pub fn new(rng: &mut Rng, config: BranchConfig, spatial: usize) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let token_proj = Linear::new(rng, spatial, c.d_embed, true)?;
        let heads = (0..c.n_heads)
            .map(|_| {
                Ok(AttentionHead {
                    w_q: Linear::new(rng, c.d_embed, c.d_k, false)?,
                    w_k: Linear::new(rng, c.d_embed, c.d_k, false)?,
                    w_v: Linear::new(rng, c.d_embed, c.d_k, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_o = Linear::new(rng, c.n_heads * c.d_k, c.d_embed, false)?;
        let mlp_hidden = Linear::new(rng, c.d_embed, c.d_mlp_hidden, true)?;
        let mlp_out = Linear::new(rng, c.d_mlp_hidden, c.d_out, true)?;
        Ok(AttentionBranch {
            config,
            token_proj,
            heads,
            w_o,
            mlp_hidden,
            mlp_out,
        })
    }

    /// Checks that every weight shape agrees with `config`.
    pub fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        let bad = |what: &str| Err(Error::Config(format!("branch {}: {what}", c.tap_id)));
        if self.heads.len() != c.n_heads {
            return bad("head count differs from n_heads");
        }
        for h in &self.heads {
            for p in [&h.w_q, &h.w_k, &h.w_v] {
                if p.in_dim() != c.d_embed || p.out_dim() != c.d_k {
                    return bad("head projection shape differs from (d_embed, d_k)");
                }
            }
        }
        if self.token_proj.out_dim() != c.d_embed {
            return bad("token projection width differs from d_embed");
        }
        if self.w_o.in_dim() != c.n_heads * c.d_k || self.w_o.out_dim() != c.d_embed {
            return bad("W^O shape differs from (n_heads*d_k, d_embed)");
        }
        if self.mlp_hidden.in_dim() != c.d_embed
            || self.mlp_hidden.out_dim() != c.d_mlp_hidden
            || self.mlp_out.in_dim() != c.d_mlp_hidden
            || self.mlp_out.out_dim() != c.d_out
        {
            return bad("MLP shapes differ from config");
        }
        Ok(())
    }

    /// Full branch: tokenize, attend, embed, flatten to `(b, c·d_out)`.
    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        branch_forward(m, self)
    }
}

/// Flattens each channel of `(b, c, h, w)` and projects it to
/// `(b, c, d_embed)` with the shared `proj`.
pub fn tokenize(m: &Tensor, proj: &Linear) -> Result<Tensor> {
    let &[b, c, h, w] = m.shape() else {
        return Err(Error::Usage(format!("tokenize needs a (b,c,h,w) map, got {:?}", m.shape())));
    };
    if h * w != proj.in_dim() {
        return Err(Error::dim("tokenize", m.shape(), proj.weight.shape()));
    }
    proj.forward(&m.reshape(&[b, c, h * w])?)
}

/// `softmax(q·kᵀ / √d_k) · v` over `(b, c, d_k)` inputs.
///
/// Sums over the key axis run in a canonical key order (tokens sorted by
/// their `(k, v)` rows) rather than storage order, so permuting the tokens
/// permutes the output rows bit for bit. `weights` is a constant tensor.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Attention> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::dim("scaled_dot_attention", q.shape(), k.shape()));
    }
    let &[b, c, d] = q.shape() else { unreachable!() };
    let scale = 1.0 / (d as f64).sqrt();
    let per = exec::map_indexed(b, |s| {
        let r = s * c * d..(s + 1) * c * d;
        attend_one(&q.data()[r.clone()], &k.data()[r.clone()], &v.data()[r], c, d, scale)
    });
    let mut output = Vec::with_capacity(b * c * d);
    let mut weights = Vec::with_capacity(b * c * c);
    for (o, w) in &per {
        output.extend_from_slice(o);
        weights.extend(w.iter().map(|&x| x as Real));
    }
    let weights = Tensor::new(weights, &[b, c, c])?;
    let saved = per.into_iter().map(|(_, w)| w).collect::<Vec<_>>();
    let output = Tensor::from_op(
        vec![b, c, d],
        output,
        vec![q.clone(), k.clone(), v.clone()],
        move |ctx| {
            let (q, k, v) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.parents[2].data());
            let mut gq = vec![0.0 as Real; b * c * d];
            let mut gk = vec![0.0 as Real; b * c * d];
            let mut gv = vec![0.0 as Real; b * c * d];
            for (s, w) in saved.iter().enumerate() {
                let r = s * c * d..(s + 1) * c * d;
                let (q, k, v, g) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &ctx.grad[r.clone()]);
                // dL/dw[i][j] = g_i · v_j, then through the softmax.
                let mut gs = vec![0.0f64; c * c];
                for i in 0..c {
                    let gw: Vec<f64> = (0..c)
                        .map(|j| (0..d).map(|t| g[i * d + t] as f64 * v[j * d + t] as f64).sum())
                        .collect();
                    let dot: f64 = (0..c).map(|j| w[i * c + j] * gw[j]).sum();
                    for j in 0..c {
                        gs[i * c + j] = w[i * c + j] * (gw[j] - dot) * scale;
                    }
                }
                for j in 0..c {
                    for t in 0..d {
                        let (mut acc_v, mut acc_k) = (0.0f64, 0.0f64);
                        for i in 0..c {
                            acc_v += w[i * c + j] * g[i * d + t] as f64;
                            acc_k += gs[i * c + j] * q[i * d + t] as f64;
                        }
                        gv[r.start + j * d + t] = acc_v as Real;
                        gk[r.start + j * d + t] = acc_k as Real;
                    }
                }
                for i in 0..c {
                    for t in 0..d {
                        let acc: f64 = (0..c).map(|j| gs[i * c + j] * k[j * d + t] as f64).sum();
                        gq[r.start + i * d + t] = acc as Real;
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        },
    );
    Ok(Attention { output, weights })
}

/// One sample: returns the `(c, d)` output and the `(c, c)` weights.
fn attend_one(q: &[Real], k: &[Real], v: &[Real], c: usize, d: usize, scale: f64) -> (Vec<Real>, Vec<f64>) {
    let rows = |j: usize| k[j * d..(j + 1) * d].iter().chain(&v[j * d..(j + 1) * d]);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        rows(a)
            .zip(rows(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut weights = vec![0.0f64; c * c];
    let mut out = vec![0.0 as Real; c * d];
    for i in 0..c {
        let scores: Vec<f64> = (0..c)
            .map(|j| (0..d).map(|t| q[i * d + t] as f64 * k[j * d + t] as f64).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|&s| libm::exp(s - max)).collect();
        let z: f64 = order.iter().map(|&j| e[j]).sum();
        let w = &mut weights[i * c..(i + 1) * c];
        for j in 0..c {
            w[j] = e[j] / z;
        }
        for t in 0..d {
            let acc: f64 = order.iter().map(|&j| w[j] * v[j * d + t] as f64).sum();
            out[i * d + t] = acc as Real;
        }
    }
    (out, weights)
}

/// Multi-head attention over `(b, c, d_embed)` tokens; also returns each
/// head's attention weights.
pub fn multi_head_with_weights(x: &Tensor, branch: &AttentionBranch) -> Result<(Tensor, Vec<Tensor>)> {
    branch.check_consistency()?;
    if x.rank() != 3 || x.shape()[2] != branch.config.d_embed {
        return Err(Error::dim("multi_head", x.shape(), &[branch.config.d_embed]));
    }
    let mut outputs = Vec::with_capacity(branch.heads.len());
    let mut weights = Vec::with_capacity(branch.heads.len());
    for head in &branch.heads {
        let att = scaled_dot_attention(&head.w_q.forward(x)?, &head.w_k.forward(x)?, &head.w_v.forward(x)?)?;
        outputs.push(att.output);
        weights.push(att.weights);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    let concat = concat_lastdim(&refs)?;
    Ok((branch.w_o.forward(&concat)?, weights))
}

pub fn multi_head(x: &Tensor, branch: &AttentionBranch) -> Result<Tensor> {
    multi_head_with_weights(x, branch).map(|(y, _)| y)
}

pub fn branch_forward(m: &Tensor, branch: &AttentionBranch) -> Result<Tensor> {
    let tokens = tokenize(m, &branch.token_proj)?;
    let attended = multi_head(&tokens, branch)?;
    let embedded = branch
        .mlp_out
        .forward(&branch.mlp_hidden.forward(&attended)?.gelu())?;
    embedded.flatten()
}

impl Module for AttentionBranch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.token_proj.visit_params(&join(prefix, "token_proj"), f);
        for (i, h) in self.heads.iter().enumerate() {
            let p = join(prefix, &format!("heads.{i}"));
            h.w_q.visit_params(&join(&p, "w_q"), f);
            h.w_k.visit_params(&join(&p, "w_k"), f);
            h.w_v.visit_params(&join(&p, "w_v"), f);
        }
        self.w_o.visit_params(&join(prefix, "w_o"), f);
        self.mlp_hidden.visit_params(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit_params(&join(prefix, "mlp_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.token_proj.visit_params_mut(&join(prefix, "token_proj"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            let p = join(prefix, &format!("heads.{i}"));
            h.w_q.visit_params_mut(&join(&p, "w_q"), f);
            h.w_k.visit_params_mut(&join(&p, "w_k"), f);
            h.w_v.visit_params_mut(&join(&p, "w_v"), f);
        }
        self.w_o.visit_params_mut(&join(prefix, "w_o"), f);
        self.mlp_hidden.visit_params_mut(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit_params_mut(&join(prefix, "mlp_out"), f);
    }
}
