//! Multi-head attention, the feed-forward block, and the prefix diagnostics.
//!
//! The training path runs on tape ops so gradients flow. The diagnostic
//! functions (`lambda_gate`, `decompose_head`, `prefix_correlation_map`)
//! recompute attention in plain f64 instead; they exist to split an extended
//! attention output into its context and prefix contributions and are never
//! differentiated.
//!
//! Causality is bitwise: a masked key is skipped outright rather than fed a
//! large negative logit, so perturbing a masked position cannot move even the
//! last float of an earlier row.

use std::rc::Rc;

use crate::tensor::{no_grad, Mask, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttentionError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One transformer block's parameters. Heads keep separate projection
/// matrices; `h * d_h == d` and the FFN hidden width is `4 * d`.
pub struct AttentionWeights {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl AttentionWeights {
    pub fn init<R: rand::Rng>(d: usize, heads: usize, rng: &mut R) -> AttentionWeights {
        assert!(heads > 0 && d % heads == 0, "head count must divide the model width");
        let d_h = d / heads;
        let d_m = 4 * d;
        let proj_std = (1.0 / d as f32).sqrt();
        let mat = |rows, cols, std, rng: &mut R| Tensor::randn(rows, cols, std, rng).with_grad();
        AttentionWeights {
            w_q: (0..heads).map(|_| mat(d, d_h, proj_std, rng)).collect(),
            w_k: (0..heads).map(|_| mat(d, d_h, proj_std, rng)).collect(),
            w_v: (0..heads).map(|_| mat(d, d_h, proj_std, rng)).collect(),
            w_o: mat(d, d, proj_std, rng),
            ffn_w1: mat(d, d_m, proj_std, rng),
            ffn_b1: Tensor::zeros(1, d_m).with_grad(),
            ffn_w2: mat(d_m, d, (1.0 / d_m as f32).sqrt(), rng),
            ffn_b2: Tensor::zeros(1, d).with_grad(),
            ln1_gain: Tensor::full(1, d, 1.0).with_grad(),
            ln1_bias: Tensor::zeros(1, d).with_grad(),
            ln2_gain: Tensor::full(1, d, 1.0).with_grad(),
            ln2_bias: Tensor::zeros(1, d).with_grad(),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn width(&self) -> usize {
        self.w_o.cols()
    }

    /// Named parameters, stable order. Callers prefix the names.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (q, (k, v))) in self.w_q.iter().zip(self.w_k.iter().zip(&self.w_v)).enumerate() {
            out.push((format!("wq{i}"), q.clone()));
            out.push((format!("wk{i}"), k.clone()));
            out.push((format!("wv{i}"), v.clone()));
        }
        out.push(("wo".into(), self.w_o.clone()));
        out.push(("ffn_w1".into(), self.ffn_w1.clone()));
        out.push(("ffn_b1".into(), self.ffn_b1.clone()));
        out.push(("ffn_w2".into(), self.ffn_w2.clone()));
        out.push(("ffn_b2".into(), self.ffn_b2.clone()));
        out.push(("ln1_gain".into(), self.ln1_gain.clone()));
        out.push(("ln1_bias".into(), self.ln1_bias.clone()));
        out.push(("ln2_gain".into(), self.ln2_gain.clone()));
        out.push(("ln2_bias".into(), self.ln2_bias.clone()));
        out
    }
}

/// Scaled dot-product attention. Returns the output and the row-stochastic
/// attention map (masked entries exactly zero).
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Rc<Mask>>,
) -> Result<(Tensor, Tensor), AttentionError> {
    if q.cols() != k.cols() {
        return Err(AttentionError::ShapeMismatch {
            what: "key width",
            expected: (k.rows(), q.cols()),
            got: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(AttentionError::ShapeMismatch {
            what: "value rows",
            expected: (k.rows(), v.cols()),
            got: v.shape(),
        });
    }
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (q.rows(), k.rows()) {
            return Err(AttentionError::ShapeMismatch {
                what: "mask",
                expected: (q.rows(), k.rows()),
                got: (m.rows(), m.cols()),
            });
        }
    }
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let scores = q.matmul(&k.transpose()).scale(scale);
    let map = match mask {
        Some(m) => scores.softmax_rows_masked(m)?,
        None => scores.softmax_rows(),
    };
    let out = map.matmul(v);
    Ok((out, map))
}

pub fn multi_head(
    x: &Tensor,
    ctx: &Tensor,
    w: &AttentionWeights,
    mask: Option<&Rc<Mask>>,
) -> Result<Tensor, AttentionError> {
    multi_head_with_maps(x, ctx, w, mask).map(|(out, _)| out)
}

pub fn multi_head_with_maps(
    x: &Tensor,
    ctx: &Tensor,
    w: &AttentionWeights,
    mask: Option<&Rc<Mask>>,
) -> Result<(Tensor, Vec<Tensor>), AttentionError> {
    let d = w.width();
    if x.cols() != d {
        return Err(AttentionError::ShapeMismatch {
            what: "query width",
            expected: (x.rows(), d),
            got: x.shape(),
        });
    }
    if ctx.cols() != d {
        return Err(AttentionError::ShapeMismatch {
            what: "context width",
            expected: (ctx.rows(), d),
            got: ctx.shape(),
        });
    }
    let mut heads = Vec::with_capacity(w.heads());
    let mut maps = Vec::with_capacity(w.heads());
    for i in 0..w.heads() {
        let (out, map) = scaled_attention(
            &x.matmul(&w.w_q[i]),
            &ctx.matmul(&w.w_k[i]),
            &ctx.matmul(&w.w_v[i]),
            mask,
        )?;
        heads.push(out);
        maps.push(map);
    }
    let mut cat = heads[0].clone();
    for h in &heads[1..] {
        cat = cat.concat_cols(h);
    }
    Ok((cat.matmul(&w.w_o), maps))
}

pub fn ffn(z: &Tensor, w: &AttentionWeights) -> Result<Tensor, AttentionError> {
    let d = w.ffn_w1.rows();
    if z.cols() != d {
        return Err(AttentionError::ShapeMismatch {
            what: "ffn input width",
            expected: (z.rows(), d),
            got: z.shape(),
        });
    }
    let hidden = z.matmul(&w.ffn_w1).add(&w.ffn_b1.tile_rows(z.rows())).relu();
    Ok(hidden.matmul(&w.ffn_w2).add(&w.ffn_b2.tile_rows(z.rows())))
}

/// Decoder block over an extended sequence (prefix rows first): causal
/// self-attention and FFN, each behind a residual then layer norm.
pub fn transformer_block(x_ext: &Tensor, w: &AttentionWeights) -> Result<Tensor, AttentionError> {
    transformer_block_with_maps(x_ext, w).map(|(out, _)| out)
}

pub fn transformer_block_with_maps(
    x_ext: &Tensor,
    w: &AttentionWeights,
) -> Result<(Tensor, Vec<Tensor>), AttentionError> {
    let mask = Rc::new(Mask::causal(x_ext.rows()));
    let (attn, maps) = multi_head_with_maps(x_ext, x_ext, w, Some(&mask))?;
    let y = x_ext.add(&attn).layer_norm_rows(&w.ln1_gain, &w.ln1_bias);
    let z = y.add(&ffn(&y, w)?).layer_norm_rows(&w.ln2_gain, &w.ln2_bias);
    Ok((z, maps))
}

/// Per-query-row share of softmax mass landing on prefix keys when prefix
/// and context keys are scored jointly, for one head's projections. Diagnostic,
/// f64, no masking; `decompose_head` is the masked variant.
pub fn lambda_gate(
    x: &Tensor,
    prefix: &Tensor,
    ctx: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
) -> Result<Vec<f64>, AttentionError> {
    let q = matmul64(&dense(x), &dense(w_q));
    let kp = matmul64(&dense(prefix), &dense(w_k));
    let kc = matmul64(&dense(ctx), &dense(w_k));
    let scale = 1.0 / (w_q.cols() as f64).sqrt();
    let mut out = Vec::with_capacity(x.rows());
    for qi in q.rows() {
        let sp: Vec<f64> = kp.rows().map(|kj| dot(qi, kj) * scale).collect();
        let sc: Vec<f64> = kc.rows().map(|kj| dot(qi, kj) * scale).collect();
        out.push(prefix_mass(&sp, &sc));
    }
    Ok(out)
}

/// An extended attention head split into context and prefix contributions.
/// `recombined = self_part + prefix_part` matches the monolithic attention
/// over concatenated keys; `lambda` is the per-row prefix mass.
pub struct HeadDecomposition {
    pub self_part: Tensor,
    pub prefix_part: Tensor,
    pub lambda: Vec<f64>,
    pub recombined: Tensor,
}

/// Splits one head of extended attention. Masks, when given, are per query
/// row over prefix and context keys respectively. A row whose prefix keys
/// are all hidden gets `lambda == 0` and a zero prefix row; a row that sees
/// no key at all is an error.
pub fn decompose_head(
    x: &Tensor,
    prefix: &Tensor,
    ctx: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    prefix_mask: Option<&Mask>,
    ctx_mask: Option<&Mask>,
) -> Result<HeadDecomposition, AttentionError> {
    let m = x.rows();
    let n_c = prefix.rows();
    let l = ctx.rows();
    for (mask, cols, what) in [(prefix_mask, n_c, "prefix mask"), (ctx_mask, l, "context mask")] {
        if let Some(mk) = mask {
            if (mk.rows(), mk.cols()) != (m, cols) {
                return Err(AttentionError::ShapeMismatch {
                    what,
                    expected: (m, cols),
                    got: (mk.rows(), mk.cols()),
                });
            }
        }
    }
    let q = matmul64(&dense(x), &dense(w_q));
    let kp = matmul64(&dense(prefix), &dense(w_k));
    let kc = matmul64(&dense(ctx), &dense(w_k));
    let vp = matmul64(&dense(prefix), &dense(w_v));
    let vc = matmul64(&dense(ctx), &dense(w_v));
    let d_h = w_v.cols();
    let scale = 1.0 / (w_q.cols() as f64).sqrt();

    let mut self_part = vec![0f32; m * d_h];
    let mut prefix_part = vec![0f32; m * d_h];
    let mut recombined = vec![0f32; m * d_h];
    let mut lambda = Vec::with_capacity(m);

    for (i, qi) in q.rows().enumerate() {
        let sp: Vec<(usize, f64)> = (0..n_c)
            .filter(|&j| prefix_mask.is_none_or(|mk| mk.allowed(i, j)))
            .map(|j| (j, dot(qi, kp.row(j)) * scale))
            .collect();
        let sc: Vec<(usize, f64)> = (0..l)
            .filter(|&j| ctx_mask.is_none_or(|mk| mk.allowed(i, j)))
            .map(|j| (j, dot(qi, kc.row(j)) * scale))
            .collect();
        if sp.is_empty() && sc.is_empty() {
            return Err(TensorError::AllMaskedRow { row: i }.into());
        }
        let lam = prefix_mass(
            &sp.iter().map(|&(_, s)| s).collect::<Vec<_>>(),
            &sc.iter().map(|&(_, s)| s).collect::<Vec<_>>(),
        );
        lambda.push(lam);

        let mut self_row = vec![0f64; d_h];
        group_attend(&sc, &vc, &mut self_row);
        let mut prefix_row = vec![0f64; d_h];
        group_attend(&sp, &vp, &mut prefix_row);
        for c in 0..d_h {
            let s = (1.0 - lam) * self_row[c];
            let p = lam * prefix_row[c];
            self_part[i * d_h + c] = s as f32;
            prefix_part[i * d_h + c] = p as f32;
            recombined[i * d_h + c] = (s + p) as f32;
        }
    }

    Ok(HeadDecomposition {
        self_part: Tensor::from_vec(m, d_h, self_part),
        prefix_part: Tensor::from_vec(m, d_h, prefix_part),
        lambda,
        recombined: Tensor::from_vec(m, d_h, recombined),
    })
}

/// Attention restricted to the prefix rows under the causal mask, for one
/// head. Sequence keys sit behind the prefix, so they are invisible here and
/// contribute exactly nothing; entries above the diagonal are exactly zero.
pub fn prefix_correlation_map(
    prefix: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
) -> Result<Tensor, AttentionError> {
    let _quiet = no_grad();
    let q = prefix.matmul(w_q);
    let k = prefix.matmul(w_k);
    let scale = 1.0 / (w_q.cols() as f32).sqrt();
    let scores = q.matmul(&k.transpose()).scale(scale);
    let mask = Rc::new(Mask::causal(prefix.rows()));
    Ok(scores.softmax_rows_masked(&mask)?)
}

/// Softmax mass of the `prefix` score group against both groups pooled,
/// with one shared max subtraction so the two exponential sums are the same
/// ones the extended softmax uses.
fn prefix_mass(prefix_scores: &[f64], ctx_scores: &[f64]) -> f64 {
    if prefix_scores.is_empty() {
        return 0.0;
    }
    let max = prefix_scores
        .iter()
        .chain(ctx_scores)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let num: f64 = prefix_scores.iter().map(|s| (s - max).exp()).sum();
    let den: f64 = num + ctx_scores.iter().map(|s| (s - max).exp()).sum::<f64>();
    num / den
}

/// Normalized attention over one key group alone, accumulated into `out`.
/// An empty group leaves `out` zero.
fn group_attend(scores: &[(usize, f64)], values: &Mat64, out: &mut [f64]) {
    if scores.is_empty() {
        return;
    }
    let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = scores.iter().map(|&(_, s)| (s - max).exp()).sum();
    for &(j, s) in scores {
        let w = (s - max).exp() / den;
        for (o, v) in out.iter_mut().zip(values.row(j)) {
            *o += w * v;
        }
    }
}

// Minimal f64 matrix for the diagnostic path.
struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

fn dense(t: &Tensor) -> Mat64 {
    Mat64 {
        rows: t.rows(),
        cols: t.cols(),
        data: t.data().iter().map(|&x| x as f64).collect(),
    }
}

fn matmul64(a: &Mat64, b: &Mat64) -> Mat64 {
    assert_eq!(a.cols, b.rows);
    let mut data = vec![0f64; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for j in 0..b.cols {
                data[i * b.cols + j] += aik * b.data[k * b.cols + j];
            }
        }
    }
    Mat64 { rows: a.rows, cols: b.cols, data }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
