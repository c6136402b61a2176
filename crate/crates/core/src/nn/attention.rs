use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

use super::Linear;

/// Which source tokens each destination token may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("attention mask", &[rows * cols], &[allowed.len()]));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].contains(&true)) {
            return Err(Error::config(format!("attention mask row {r} allows no source")));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Mask over `frames × tokens_per_frame` tokens laid out frame-major: a token at frame
    /// `t` sees frame `t'` iff `|t - t'| <= half_width`. `None` gives global attention.
    pub fn temporal_window(frames: usize, tokens_per_frame: usize, half_width: Option<usize>) -> Self {
        let n = frames * tokens_per_frame;
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            let t = r / tokens_per_frame;
            for c in 0..n {
                let s = c / tokens_per_frame;
                allowed[r * n + c] = half_width.map_or(true, |w| t.abs_diff(s) <= w);
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
///
/// Destination tokens produce queries; source tokens produce keys and values. Passing the
/// same tensor twice gives self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x_dst: Tensor<T>,
    x_src: Tensor<T>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Per head, `n_dst × n_src` attention weights; masked entries are exactly zero.
    pub probs: Vec<Vec<T>>,
    merged: Tensor<T>,
    plan: Vec<RowGroup>,
}

/// Consecutive destination rows `r0..r1` whose allowed sources all lie in `lo..hi`.
/// Scores outside the span are never computed; `masked` marks spans with holes.
#[derive(Debug, Clone, PartialEq)]
struct RowGroup {
    r0: usize,
    r1: usize,
    lo: usize,
    hi: usize,
    masked: bool,
}

fn row_plan(mask: Option<&AttentionMask>, nd: usize, ns: usize) -> Vec<RowGroup> {
    let Some(m) = mask else {
        return vec![RowGroup { r0: 0, r1: nd, lo: 0, hi: ns, masked: false }];
    };
    let mut plan: Vec<RowGroup> = Vec::new();
    for r in 0..nd {
        let row = m.row(r);
        let lo = row.iter().position(|&a| a).unwrap_or(0);
        let hi = ns - row.iter().rev().position(|&a| a).unwrap_or(0);
        let masked = row[lo..hi].contains(&false);
        match plan.last_mut() {
            Some(g) if g.lo == lo && g.hi == hi && !g.masked && !masked => g.r1 = r + 1,
            _ => plan.push(RowGroup { r0: r, r1: r + 1, lo, hi, masked }),
        }
    }
    plan
}

fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Vec<Vec<T>> {
    let c = x.cols();
    let dk = c / heads;
    (0..heads)
        .map(|h| {
            x.data()
                .chunks_exact(c)
                .flat_map(|row| row[h * dk..(h + 1) * dk].iter().copied())
                .collect()
        })
        .collect()
}

fn merge_heads<T: Real>(parts: &[Vec<T>], rows: usize, dim: usize) -> Tensor<T> {
    let heads = parts.len();
    let dk = dim / heads;
    let mut out = Tensor::zeros(&[rows, dim]);
    for (h, part) in parts.iter().enumerate() {
        for (r, chunk) in part.chunks_exact(dk).enumerate() {
            out.data_mut()[r * dim + h * dk..r * dim + (h + 1) * dk].copy_from_slice(chunk);
        }
    }
    out
}

impl MultiHeadAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "{heads} attention heads do not divide channel width {dim}"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.scoped("q"), dim, dim),
            k: Linear::new(&mut pb.scoped("k"), dim, dim),
            v: Linear::new(&mut pb.scoped("v"), dim, dim),
            o: Linear::new(&mut pb.scoped("o"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        x_dst: &Tensor<T>,
        x_src: &Tensor<T>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        if x_dst.cols() != self.dim || x_src.cols() != self.dim {
            return Err(Error::shape(
                "attention channels",
                &[self.dim, self.dim],
                &[x_dst.cols(), x_src.cols()],
            ));
        }
        let (nd, ns) = (x_dst.rows(), x_src.rows());
        if let Some(m) = mask {
            if m.rows != nd || m.cols != ns {
                return Err(Error::shape("attention mask", &[nd, ns], &[m.rows, m.cols]));
            }
        }
        let dk = self.dim / self.heads;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let q = split_heads(&self.q.forward(p, x_dst), self.heads);
        let k = split_heads(&self.k.forward(p, x_src), self.heads);
        let v = split_heads(&self.v.forward(p, x_src), self.heads);

        let plan = row_plan(mask, nd, ns);
        let mut probs = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = vec![T::zero(); nd * ns];
            let mut o = vec![T::zero(); nd * dk];
            for g in &plan {
                let (rows, w) = (g.r1 - g.r0, g.hi - g.lo);
                let mut blk = vec![T::zero(); rows * w];
                gemm_nt(rows, dk, w, &q[h][g.r0 * dk..g.r1 * dk], &k[h][g.lo * dk..g.hi * dk], &mut blk);
                for (i, row) in blk.chunks_exact_mut(w).enumerate() {
                    softmax_row(row, scale, g.masked.then(|| &mask.unwrap().row(g.r0 + i)[g.lo..g.hi]));
                    let r = g.r0 + i;
                    s[r * ns + g.lo..r * ns + g.hi].copy_from_slice(row);
                }
                gemm_nn(rows, w, dk, &blk, &v[h][g.lo * dk..g.hi * dk], &mut o[g.r0 * dk..g.r1 * dk]);
            }
            probs.push(s);
            outs.push(o);
        }
        let merged = merge_heads(&outs, nd, self.dim);
        let out = self.o.forward(p, &merged);
        Ok((
            out,
            AttentionCache {
                x_dst: x_dst.clone(),
                x_src: x_src.clone(),
                q,
                k,
                v,
                probs,
                merged,
                plan,
            },
        ))
    }

    /// Returns gradients with respect to the destination and source token inputs.
    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let (nd, ns) = (cache.x_dst.rows(), cache.x_src.rows());
        let dk = self.dim / self.heads;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let d_merged = self.o.backward(p, &cache.merged, dy, g);
        let d_out = split_heads(&d_merged, self.heads);

        let mut dq = Vec::with_capacity(self.heads);
        let mut dk_heads = Vec::with_capacity(self.heads);
        let mut dv = Vec::with_capacity(self.heads);
        let plan = cache.plan.clone();
        for h in 0..self.heads {
            let a = &cache.probs[h];
            let mut dqh = vec![T::zero(); nd * dk];
            let mut dkh = vec![T::zero(); ns * dk];
            let mut dvh = vec![T::zero(); ns * dk];
            for g in &plan {
                let (rows, w) = (g.r1 - g.r0, g.hi - g.lo);
                let mut a_blk = Vec::with_capacity(rows * w);
                for r in g.r0..g.r1 {
                    a_blk.extend_from_slice(&a[r * ns + g.lo..r * ns + g.hi]);
                }
                let d_rows = &d_out[h][g.r0 * dk..g.r1 * dk];
                let mut da = vec![T::zero(); rows * w];
                gemm_nt(rows, dk, w, d_rows, &cache.v[h][g.lo * dk..g.hi * dk], &mut da);
                gemm_tn(rows, w, dk, &a_blk, d_rows, &mut dvh[g.lo * dk..g.hi * dk]);
                // softmax backward, folded with the logit scale
                for (da_row, a_row) in da.chunks_exact_mut(w).zip(a_blk.chunks_exact(w)) {
                    let dot: T = da_row.iter().zip(a_row).map(|(&x, &y)| x * y).sum();
                    for (d, &pa) in da_row.iter_mut().zip(a_row) {
                        *d = pa * (*d - dot) * scale;
                    }
                }
                gemm_nn(rows, w, dk, &da, &cache.k[h][g.lo * dk..g.hi * dk], &mut dqh[g.r0 * dk..g.r1 * dk]);
                gemm_tn(rows, w, dk, &da, &cache.q[h][g.r0 * dk..g.r1 * dk], &mut dkh[g.lo * dk..g.hi * dk]);
            }
            dq.push(dqh);
            dk_heads.push(dkh);
            dv.push(dvh);
        }
        let dq = merge_heads(&dq, nd, self.dim);
        let dk_m = merge_heads(&dk_heads, ns, self.dim);
        let dv = merge_heads(&dv, ns, self.dim);
        let dx_dst = self.q.backward(p, &cache.x_dst, &dq, g);
        let mut dx_src = self.k.backward(p, &cache.x_src, &dk_m, g);
        dx_src.add_assign(&self.v.backward(p, &cache.x_src, &dv, g));
        (dx_dst, dx_src)
    }
}

/// Scaled softmax over one row of logits, in place. Disallowed positions get weight 0 and
/// do not take part in the normalization.
fn softmax_row<T: Real>(row: &mut [T], scale: T, allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.map_or(true, |a| a[j]);
    let mut max = T::neg_infinity();
    for (j, v) in row.iter_mut().enumerate() {
        *v *= scale;
        if ok(j) && *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
