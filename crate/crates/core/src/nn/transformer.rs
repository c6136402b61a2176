use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{Real, Tensor};

use super::{
    gelu, gelu_backward, AttentionCache, AttentionMask, Conv2d, Conv2dCache, LayerNorm,
    LayerNormCache, Linear, MultiHeadAttention,
};

/// Two-layer MLP with GELU applied token-wise.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    x: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl FeedForward {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut pb.scoped("fc1"), dim, hidden),
            fc2: Linear::new(&mut pb.scoped("fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, FeedForwardCache<T>) {
        let hidden_pre = self.fc1.forward(p, x);
        let hidden = gelu(&hidden_pre);
        let y = self.fc2.forward(p, &hidden);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                hidden_pre,
                hidden,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &FeedForwardCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let dh = self.fc2.backward(p, &cache.hidden, dy, g);
        let dh = gelu_backward(&cache.hidden_pre, &dh);
        self.fc1.backward(p, &cache.x, &dh, g)
    }
}

/// Pre-norm cross-attention block: frame tokens attend to query tokens, then an FFN, each
/// wrapped in a residual connection. The token count and order of the frame are preserved.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub norm_dst: LayerNorm,
    pub norm_src: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct CrossBlockCache<T> {
    norm_dst: LayerNormCache<T>,
    norm_src: LayerNormCache<T>,
    pub attn: AttentionCache<T>,
    norm_ffn: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

impl CrossAttentionBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            norm_dst: LayerNorm::new(&mut pb.scoped("norm_dst"), dim),
            norm_src: LayerNorm::new(&mut pb.scoped("norm_src"), dim),
            attn: MultiHeadAttention::new(&mut pb.scoped("attn"), dim, heads)?,
            norm_ffn: LayerNorm::new(&mut pb.scoped("norm_ffn"), dim),
            ffn: FeedForward::new(&mut pb.scoped("ffn"), dim, dim * ffn_mult),
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        frame: &Tensor<T>,
        query: &Tensor<T>,
    ) -> Result<(Tensor<T>, CrossBlockCache<T>)> {
        if frame.cols() != query.cols() {
            return Err(Error::config(format!(
                "frame tokens have {} channels but query tokens have {}",
                frame.cols(),
                query.cols()
            )));
        }
        let (a, norm_dst) = self.norm_dst.forward(p, frame);
        let (s, norm_src) = self.norm_src.forward(p, query);
        let (att, attn) = self.attn.forward(p, &a, &s, None)?;
        let mut x1 = frame.clone();
        x1.add_assign(&att);
        let (b, norm_ffn) = self.norm_ffn.forward(p, &x1);
        let (f, ffn) = self.ffn.forward(p, &b);
        x1.add_assign(&f);
        Ok((
            x1,
            CrossBlockCache {
                norm_dst,
                norm_src,
                attn,
                norm_ffn,
                ffn,
            },
        ))
    }

    /// Returns gradients with respect to the frame tokens and the query tokens.
    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &CrossBlockCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let df = self.ffn.backward(p, &cache.ffn, dy, g);
        let mut dx1 = self.norm_ffn.backward(p, &cache.norm_ffn, &df, g);
        dx1.add_assign(dy);
        let (da, ds) = self.attn.backward(p, &cache.attn, &dx1, g);
        let mut dframe = self.norm_dst.backward(p, &cache.norm_dst, &da, g);
        dframe.add_assign(&dx1);
        let dquery = self.norm_src.backward(p, &cache.norm_src, &ds, g);
        (dframe, dquery)
    }
}

/// Pre-norm self-attention block with an optional attention mask.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct SelfBlockCache<T> {
    norm_attn: LayerNormCache<T>,
    pub attn: AttentionCache<T>,
    norm_ffn: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

impl SelfAttentionBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(&mut pb.scoped("norm_attn"), dim),
            attn: MultiHeadAttention::new(&mut pb.scoped("attn"), dim, heads)?,
            norm_ffn: LayerNorm::new(&mut pb.scoped("norm_ffn"), dim),
            ffn: FeedForward::new(&mut pb.scoped("ffn"), dim, dim * ffn_mult),
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        x: &Tensor<T>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Tensor<T>, SelfBlockCache<T>)> {
        let (a, norm_attn) = self.norm_attn.forward(p, x);
        let (att, attn) = self.attn.forward(p, &a, &a, mask)?;
        let mut x1 = x.clone();
        x1.add_assign(&att);
        let (b, norm_ffn) = self.norm_ffn.forward(p, &x1);
        let (f, ffn) = self.ffn.forward(p, &b);
        x1.add_assign(&f);
        Ok((
            x1,
            SelfBlockCache {
                norm_attn,
                attn,
                norm_ffn,
                ffn,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &SelfBlockCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let df = self.ffn.backward(p, &cache.ffn, dy, g);
        let mut dx1 = self.norm_ffn.backward(p, &cache.norm_ffn, &df, g);
        dx1.add_assign(dy);
        let (da_dst, da_src) = self.attn.backward(p, &cache.attn, &dx1, g);
        let mut da = da_dst;
        da.add_assign(&da_src);
        let mut dx = self.norm_attn.backward(p, &cache.norm_attn, &da, g);
        dx.add_assign(&dx1);
        dx
    }
}

/// Convolutional query fusion (ablation variant of the cross-attention block): the query
/// map is convolved, average-pooled to one vector, tiled over the frame, concatenated
/// channel-wise with the frame tokens and mixed by a token-wise MLP with a residual path.
#[derive(Debug, Clone)]
pub struct ConvFusion {
    pub query_conv: Conv2d,
    pub mix1: Linear,
    pub mix2: Linear,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct ConvFusionCache<T> {
    conv: Conv2dCache<T>,
    conv_pre: Tensor<T>,
    concat: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl ConvFusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Self {
        Self {
            query_conv: Conv2d::new(&mut pb.scoped("query_conv"), dim, dim, 3, 1, 1.0),
            mix1: Linear::new(&mut pb.scoped("mix1"), 2 * dim, dim),
            mix2: Linear::new(&mut pb.scoped("mix2"), dim, dim),
            dim,
        }
    }

    /// `frame`: `HW×C` tokens; `query`: `H×W×C` map.
    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        frame: &Tensor<T>,
        query: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvFusionCache<T>)> {
        let c = self.dim;
        if frame.cols() != c {
            return Err(Error::shape("fusion frame channels", &[c], &[frame.cols()]));
        }
        let (conv_pre, conv) = self.query_conv.forward(p, query)?;
        let act = gelu(&conv_pre);
        let n_q = T::of(act.rows() as f64);
        let mut pooled = vec![T::zero(); c];
        for row in act.data().chunks_exact(c) {
            for (s, &v) in pooled.iter_mut().zip(row) {
                *s += v;
            }
        }
        for s in &mut pooled {
            *s /= n_q;
        }
        let n = frame.rows();
        let mut concat = Tensor::zeros(&[n, 2 * c]);
        for (dst, src) in concat
            .data_mut()
            .chunks_exact_mut(2 * c)
            .zip(frame.data().chunks_exact(c))
        {
            dst[..c].copy_from_slice(src);
            dst[c..].copy_from_slice(&pooled);
        }
        let hidden_pre = self.mix1.forward(p, &concat);
        let hidden = gelu(&hidden_pre);
        let mut out = self.mix2.forward(p, &hidden);
        out.add_assign(frame);
        Ok((
            out,
            ConvFusionCache {
                conv,
                conv_pre,
                concat,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ConvFusionCache<T>,
        dy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let c = self.dim;
        let dh = self.mix2.backward(p, &cache.hidden, dy, g);
        let dh = gelu_backward(&cache.hidden_pre, &dh);
        let dconcat = self.mix1.backward(p, &cache.concat, &dh, g);
        let n = dconcat.rows();
        let mut dframe = Tensor::zeros(&[n, c]);
        let mut dpooled = vec![T::zero(); c];
        for (src, dst) in dconcat
            .data()
            .chunks_exact(2 * c)
            .zip(dframe.data_mut().chunks_exact_mut(c))
        {
            dst.copy_from_slice(&src[..c]);
            for (s, &v) in dpooled.iter_mut().zip(&src[c..]) {
                *s += v;
            }
        }
        dframe.add_assign(dy);
        let rows = cache.conv_pre.rows();
        let inv = T::one() / T::of(rows as f64);
        let mut dact = Tensor::zeros(cache.conv_pre.shape());
        for row in dact.data_mut().chunks_exact_mut(c) {
            for (d, &s) in row.iter_mut().zip(&dpooled) {
                *d = s * inv;
            }
        }
        let dconv = gelu_backward(&cache.conv_pre, &dact);
        let dquery = self.query_conv.backward(p, &cache.conv, &dconv, g);
        (dframe, dquery)
    }
}

/// Adds the spatio-temporal positional embedding to a `T×h×w×c` volume and flattens
/// `(t, i, j)` row-major into `T·h·w` tokens of width `c`.
pub fn add_positional_and_flatten<T: Real>(volume: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    volume.expect_shape("positional embedding", pos.shape())?;
    let mut out = volume.clone();
    out.add_assign(pos);
    let c = out.cols();
    let n = out.rows();
    out.reshape(&[n, c])
}

/// Inverse of the flatten step: `T·h·w × c` tokens back to `T×h×w×c`.
pub fn unflatten_tokens<T: Real>(tokens: Tensor<T>, frames: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = tokens.cols();
    tokens.reshape(&[frames, h, w, c])
}
