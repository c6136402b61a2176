//! The end-to-end network: shared encoder, per-frame query fusion, downsampling,
//! windowed spatio-temporal transformer, and the probability/regression heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_grid, AnchorConfig, AnchorGrid};
use crate::error::{Error, Result};
use crate::nn::{
    add_positional_and_flatten, unflatten_tokens, AttentionMask, Conv2d, ConvFusion,
    ConvFusionCache, ConvStack, ConvStackCache, CrossAttentionBlock, CrossBlockCache, LayerNorm,
    LayerNormCache, PatchEncoder, SelfAttentionBlock, SelfBlockCache,
};
use crate::params::{Init, ParamBuilder, ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// How query features are fused into each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    CrossAttention,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input frames and query image, in pixels.
    pub input_side: usize,
    /// Frames per clip.
    pub clip_len: usize,
    /// Patch stride of the encoder; the encoder map is `input_side / encoder_stride` wide.
    pub encoder_stride: usize,
    /// Encoder and spatial-transformer channel width.
    pub channels: usize,
    /// Strides of the 3×3 downsampling convolutions.
    pub downsample_strides: Vec<usize>,
    /// Channel width of the spatio-temporal stage and heads.
    pub st_channels: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub spatial_layers: usize,
    pub st_layers: usize,
    /// Temporal half-width of the self-attention window; `None` attends globally.
    pub window_half_width: Option<usize>,
    pub head_channels: usize,
    /// Convolution blocks per prediction head.
    pub head_depth: usize,
    pub fusion: Fusion,
    pub anchors: AnchorConfig,
    /// Pixels per unit of regression-head output.
    pub reg_scale: f64,
    /// Initial occurrence probability encoded in the probability head's output bias.
    pub prob_prior: f64,
}

impl ModelConfig {
    /// Full-resolution configuration: 448 px inputs, 32×32×256 encoder maps downsampled
    /// twice to 8×8, clips of 30 frames, window length 5.
    pub fn full() -> Self {
        Self {
            input_side: 448,
            clip_len: 30,
            encoder_stride: 14,
            channels: 256,
            downsample_strides: vec![2, 2],
            st_channels: 256,
            heads: 8,
            ffn_mult: 4,
            spatial_layers: 1,
            st_layers: 3,
            window_half_width: Some(2),
            head_channels: 256,
            head_depth: 3,
            fusion: Fusion::CrossAttention,
            anchors: AnchorConfig::default(),
            reg_scale: 1.0,
            prob_prior: 0.01,
        }
    }

    /// Desk-scale configuration: 64 px inputs, 8×8 maps, 8-frame clips.
    pub fn toy() -> Self {
        Self {
            input_side: 64,
            clip_len: 8,
            encoder_stride: 8,
            channels: 16,
            downsample_strides: vec![1],
            st_channels: 16,
            heads: 2,
            ffn_mult: 4,
            spatial_layers: 1,
            st_layers: 1,
            window_half_width: Some(2),
            head_channels: 16,
            head_depth: 3,
            fusion: Fusion::CrossAttention,
            anchors: AnchorConfig {
                base_sizes: vec![8.0, 16.0, 32.0, 64.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
                theta: 0.2,
            },
            reg_scale: 4.0,
            prob_prior: 0.01,
        }
    }

    pub fn window_len(&self) -> Option<usize> {
        self.window_half_width.map(|w| 2 * w + 1)
    }

    /// Encoder map side `H = W`.
    pub fn feature_side(&self) -> usize {
        self.input_side / self.encoder_stride
    }

    /// Prediction map side `h = w`.
    pub fn pred_side(&self) -> usize {
        self.feature_side() / self.downsample_strides.iter().product::<usize>()
    }

    pub fn anchors_per_frame(&self) -> usize {
        self.pred_side() * self.pred_side() * self.anchors.anchors_per_cell()
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let positive = [
            ("input_side", self.input_side),
            ("clip_len", self.clip_len),
            ("encoder_stride", self.encoder_stride),
            ("channels", self.channels),
            ("st_channels", self.st_channels),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("spatial_layers", self.spatial_layers),
            ("head_channels", self.head_channels),
            ("head_depth", self.head_depth),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.input_side % self.encoder_stride != 0 {
            return Err(Error::config(format!(
                "input side {} not divisible by encoder stride {}",
                self.input_side, self.encoder_stride
            )));
        }
        let total: usize = self.downsample_strides.iter().product();
        if self.downsample_strides.is_empty() || total == 0 || self.feature_side() % total != 0 {
            return Err(Error::config(format!(
                "feature side {} not divisible by downsample stride product {total}",
                self.feature_side()
            )));
        }
        for (name, width) in [("channels", self.channels), ("st_channels", self.st_channels)] {
            if width % self.heads != 0 {
                return Err(Error::config(format!(
                    "{} heads do not divide {name} = {width}",
                    self.heads
                )));
            }
        }
        if !(self.prob_prior > 0.0 && self.prob_prior < 1.0) || !(self.reg_scale > 0.0) {
            return Err(Error::config("prob_prior must be in (0, 1) and reg_scale positive"));
        }
        Ok(())
    }
}

/// Per-frame head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePredictionRaw<T> {
    /// `h×w×n` pre-sigmoid scores.
    pub logits: Tensor<T>,
    /// `h×w×n` occurrence probabilities.
    pub probs: Tensor<T>,
    /// `h×w×n×4` refinements in pixels, ordered `(cx, cy, w, h)`.
    pub deltas: Tensor<T>,
}

#[derive(Debug, Clone)]
enum FusionLayer {
    Cross(CrossAttentionBlock),
    Conv(ConvFusion),
}

#[derive(Debug, Clone)]
enum FusionCache<T> {
    Cross(Box<CrossBlockCache<T>>),
    Conv(Box<ConvFusionCache<T>>),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub grid: AnchorGrid,
    encoder: PatchEncoder,
    fusion: Vec<FusionLayer>,
    downsample: ConvStack,
    pos: ParamId,
    st_blocks: Vec<SelfAttentionBlock>,
    st_norm: LayerNorm,
    prob_head: ConvStack,
    reg_head: ConvStack,
    mask: AttentionMask,
}

/// Everything the backward pass needs from one clip forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    query_enc: Option<ConvStackCache<T>>,
    frame_enc: Vec<ConvStackCache<T>>,
    query_feat: Tensor<T>,
    fusion: Vec<Vec<FusionCache<T>>>,
    down: Vec<ConvStackCache<T>>,
    st: Vec<SelfBlockCache<T>>,
    st_norm: LayerNormCache<T>,
    prob: Vec<ConvStackCache<T>>,
    reg: Vec<ConvStackCache<T>>,
}

impl<T: Real> ForwardTrace<T> {
    /// Attention weights of every spatio-temporal layer, one `n×n` matrix per head.
    pub fn st_attention(&self) -> impl Iterator<Item = &[Vec<T>]> {
        self.st.iter().map(|c| c.attn.probs.as_slice())
    }
}

/// Upstream gradients of one clip: with respect to the logits and the pixel deltas.
#[derive(Debug, Clone)]
pub struct ClipGrads<T> {
    pub d_logits: Vec<Vec<T>>,
    pub d_deltas: Vec<Vec<T>>,
}

impl<T: Real> ClipGrads<T> {
    pub fn zeros(frames: usize, anchors: usize) -> Self {
        Self {
            d_logits: vec![vec![T::zero(); anchors]; frames],
            d_deltas: vec![vec![T::zero(); anchors * 4]; frames],
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Model {
    /// Builds the layer graph and draws initial parameters from `seed`.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut set = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut set, &mut rng);
        let c = config.channels;
        let sc = config.st_channels;

        let encoder = PatchEncoder::new(&mut pb.scoped("encoder"), 3, c, config.encoder_stride);
        let mut fusion = Vec::with_capacity(config.spatial_layers);
        for l in 0..config.spatial_layers {
            let mut scope = pb.scoped(&format!("spatial.{l}"));
            fusion.push(match config.fusion {
                Fusion::CrossAttention => FusionLayer::Cross(CrossAttentionBlock::new(
                    &mut scope,
                    c,
                    config.heads,
                    config.ffn_mult,
                )?),
                Fusion::Conv => FusionLayer::Conv(ConvFusion::new(&mut scope, c)),
            });
        }
        let n_down = config.downsample_strides.len();
        let layers = config
            .downsample_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let out = if i + 1 == n_down { sc } else { c };
                Conv2d::new(&mut pb.scoped(&format!("downsample.{i}")), c, out, 3, s, 1.0)
            })
            .collect();
        let downsample = ConvStack { layers };

        let side = config.pred_side();
        let pos = pb.add("pos_embed", &[config.clip_len, side, side, sc], Init::Zeros);
        let st_blocks = (0..config.st_layers)
            .map(|l| {
                SelfAttentionBlock::new(
                    &mut pb.scoped(&format!("st.{l}")),
                    sc,
                    config.heads,
                    config.ffn_mult,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let st_norm = LayerNorm::new(&mut pb.scoped("st_norm"), sc);

        let n = config.anchors.anchors_per_cell();
        let prob_head = Self::head(&mut pb.scoped("prob_head"), config, n);
        let reg_head = Self::head(&mut pb.scoped("reg_head"), config, 4 * n);
        let prior = config.prob_prior;
        let bias = prob_head.layers.last().unwrap().bias;
        set.get_mut(bias)
            .data_mut()
            .fill(T::of((prior / (1.0 - prior)).ln()));

        let grid = build_grid(
            &config.anchors,
            side,
            side,
            config.input_side as f64 / side as f64,
        )?;
        let mask = AttentionMask::temporal_window(config.clip_len, side * side, config.window_half_width);
        Ok((
            Self {
                config: config.clone(),
                grid,
                encoder,
                fusion,
                downsample,
                pos,
                st_blocks,
                st_norm,
                prob_head,
                reg_head,
                mask,
            },
            set,
        ))
    }

    fn head<T: Real>(pb: &mut ParamBuilder<'_, T>, config: &ModelConfig, out: usize) -> ConvStack {
        let depth = config.head_depth;
        let layers = (0..depth)
            .map(|i| {
                let c_in = if i == 0 { config.st_channels } else { config.head_channels };
                let last = i + 1 == depth;
                let c_out = if last { out } else { config.head_channels };
                let gain = if last { 0.1 } else { 1.0 };
                Conv2d::new(&mut pb.scoped(&format!("{i}")), c_in, c_out, 3, 1, gain)
            })
            .collect();
        ConvStack { layers }
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Final layers of the two heads (weights, biases), for zero-initialization.
    pub fn head_output_params(&self) -> [ParamId; 4] {
        let p = self.prob_head.layers.last().unwrap();
        let r = self.reg_head.layers.last().unwrap();
        [p.weight, p.bias, r.weight, r.bias]
    }

    pub fn encode<T: Real>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let s = self.config.input_side;
        image.expect_shape("input image", &[s, s, 3])?;
        self.encoder.forward(p, image)
    }

    /// Full pipeline from a `T×S×S×3` clip and an `S×S×3` query.
    pub fn forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        clip: &Tensor<T>,
        query: &Tensor<T>,
    ) -> Result<(Vec<FramePredictionRaw<T>>, ForwardTrace<T>)> {
        let cfg = &self.config;
        let s = cfg.input_side;
        clip.expect_shape("clip", &[cfg.clip_len, s, s, 3])?;
        let (query_feat, query_enc) = self.encode(p, query)?;
        let mut frames = Vec::with_capacity(cfg.clip_len);
        let mut frame_enc = Vec::with_capacity(cfg.clip_len);
        for t in 0..cfg.clip_len {
            let (f, c) = self.encode(p, &clip.slice_outer(t))?;
            frames.push(f);
            frame_enc.push(c);
        }
        let frame_feats = Tensor::stack(&frames)?;
        let (out, mut trace) = self.forward_features(p, &frame_feats, &query_feat)?;
        trace.query_enc = Some(query_enc);
        trace.frame_enc = frame_enc;
        Ok((out, trace))
    }

    /// Pipeline from precomputed `T×H×W×C` frame features and `H×W×C` query features.
    pub fn forward_features<T: Real>(
        &self,
        p: &ParamSet<T>,
        frame_feats: &Tensor<T>,
        query_feat: &Tensor<T>,
    ) -> Result<(Vec<FramePredictionRaw<T>>, ForwardTrace<T>)> {
        let cfg = &self.config;
        let (t_len, fs, c) = (cfg.clip_len, cfg.feature_side(), cfg.channels);
        frame_feats.expect_shape("frame features", &[t_len, fs, fs, c])?;
        query_feat.expect_shape("query features", &[fs, fs, c])?;
        let query_tokens = query_feat.clone().reshape(&[fs * fs, c])?;

        let mut fusion_caches = Vec::with_capacity(t_len);
        let mut down_caches = Vec::with_capacity(t_len);
        let mut down_out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut x = frame_feats.slice_outer(t).reshape(&[fs * fs, c])?;
            let mut caches = Vec::with_capacity(self.fusion.len());
            for layer in &self.fusion {
                let (y, cache) = match layer {
                    FusionLayer::Cross(b) => {
                        let (y, c) = b.forward(p, &x, &query_tokens)?;
                        (y, FusionCache::Cross(Box::new(c)))
                    }
                    FusionLayer::Conv(b) => {
                        let (y, c) = b.forward(p, &x, query_feat)?;
                        (y, FusionCache::Conv(Box::new(c)))
                    }
                };
                x = y;
                caches.push(cache);
            }
            let (d, dc) = self.downsample.forward(p, &x.reshape(&[fs, fs, c])?)?;
            fusion_caches.push(caches);
            down_caches.push(dc);
            down_out.push(d);
        }
        let volume = Tensor::stack(&down_out)?;
        let mut tokens = add_positional_and_flatten(&volume, p.get(self.pos))?;
        let mut st_caches = Vec::with_capacity(self.st_blocks.len());
        for block in &self.st_blocks {
            let (y, cache) = block.forward(p, &tokens, Some(&self.mask))?;
            tokens = y;
            st_caches.push(cache);
        }
        let (normed, st_norm) = self.st_norm.forward(p, &tokens);
        let side = cfg.pred_side();
        let v_star = unflatten_tokens(normed, t_len, side, side)?;

        let mut outputs = Vec::with_capacity(t_len);
        let mut prob_caches = Vec::with_capacity(t_len);
        let mut reg_caches = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (out, pc, rc) = self.heads_forward(p, &v_star.slice_outer(t))?;
            outputs.push(out);
            prob_caches.push(pc);
            reg_caches.push(rc);
        }
        Ok((
            outputs,
            ForwardTrace {
                query_enc: None,
                frame_enc: Vec::new(),
                query_feat: query_feat.clone(),
                fusion: fusion_caches,
                down: down_caches,
                st: st_caches,
                st_norm,
                prob: prob_caches,
                reg: reg_caches,
            },
        ))
    }

    fn heads_forward<T: Real>(
        &self,
        p: &ParamSet<T>,
        v_star: &Tensor<T>,
    ) -> Result<(FramePredictionRaw<T>, ConvStackCache<T>, ConvStackCache<T>)> {
        let side = self.config.pred_side();
        let n = self.config.anchors.anchors_per_cell();
        v_star.expect_shape("head input", &[side, side, self.config.st_channels])?;
        let (logits, pc) = self.prob_head.forward(p, v_star)?;
        let (raw, rc) = self.reg_head.forward(p, v_star)?;
        let mut probs = logits.clone();
        for v in probs.data_mut() {
            *v = sigmoid(*v);
        }
        let scale = T::of(self.config.reg_scale);
        let mut deltas = raw.reshape(&[side, side, n, 4])?;
        deltas.scale(scale);
        Ok((
            FramePredictionRaw {
                logits,
                probs,
                deltas,
            },
            pc,
            rc,
        ))
    }

    /// Applies both heads to one frame of `v*` (`h×w×c`).
    pub fn prediction_heads<T: Real>(&self, p: &ParamSet<T>, v_star: &Tensor<T>) -> Result<FramePredictionRaw<T>> {
        Ok(self.heads_forward(p, v_star)?.0)
    }

    /// Backward pass of [`Model::prediction_heads`]; returns the gradient w.r.t. `v*`.
    pub fn prediction_heads_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        v_star: &Tensor<T>,
        d_logits: &[T],
        d_deltas: &[T],
        g: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let (_, pc, rc) = self.heads_forward(p, v_star)?;
        self.heads_backward(p, &pc, &rc, d_logits, d_deltas, g)
    }

    fn heads_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        pc: &ConvStackCache<T>,
        rc: &ConvStackCache<T>,
        d_logits: &[T],
        d_deltas: &[T],
        g: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let side = self.config.pred_side();
        let n = self.config.anchors.anchors_per_cell();
        let dl = Tensor::new(&[side, side, n], d_logits.to_vec())?;
        let scale = T::of(self.config.reg_scale);
        let dr = Tensor::new(&[side, side, 4 * n], d_deltas.iter().map(|&d| d * scale).collect())?;
        let mut dv = self.prob_head.backward(p, pc, &dl, g);
        dv.add_assign(&self.reg_head.backward(p, rc, &dr, g));
        Ok(dv)
    }

    /// Accumulates parameter gradients for one clip given upstream gradients w.r.t. the
    /// logits and deltas of every frame.
    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        trace: &ForwardTrace<T>,
        grads: &ClipGrads<T>,
        g: &mut ParamSet<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let (t_len, fs, c) = (cfg.clip_len, cfg.feature_side(), cfg.channels);
        let side = cfg.pred_side();
        let sc = cfg.st_channels;

        let mut dv = Vec::with_capacity(t_len);
        for t in 0..t_len {
            dv.push(self.heads_backward(
                p,
                &trace.prob[t],
                &trace.reg[t],
                &grads.d_logits[t],
                &grads.d_deltas[t],
                g,
            )?);
        }
        let d_tokens = Tensor::stack(&dv)?.reshape(&[t_len * side * side, sc])?;
        let mut d_tokens = self.st_norm.backward(p, &trace.st_norm, &d_tokens, g);
        for (block, cache) in self.st_blocks.iter().zip(&trace.st).rev() {
            d_tokens = block.backward(p, cache, &d_tokens, g);
        }
        // positional embedding gradient equals the gradient of the summed volume
        g.get_mut(self.pos).add_assign(&d_tokens.clone().reshape(&[t_len, side, side, sc])?);
        let d_volume = d_tokens.reshape(&[t_len, side, side, sc])?;

        let mut d_query = Tensor::<T>::zeros(&[fs, fs, c]);
        for t in 0..t_len {
            let dd = self.downsample.backward(p, &trace.down[t], &d_volume.slice_outer(t), g);
            let mut dx = dd.reshape(&[fs * fs, c])?;
            for (layer, cache) in self.fusion.iter().zip(&trace.fusion[t]).rev() {
                let (df, dq) = match (layer, cache) {
                    (FusionLayer::Cross(b), FusionCache::Cross(c)) => b.backward(p, c, &dx, g),
                    (FusionLayer::Conv(b), FusionCache::Conv(c)) => b.backward(p, c, &dx, g),
                    _ => unreachable!("fusion cache does not match its layer"),
                };
                dx = df;
                for (a, &b) in d_query.data_mut().iter_mut().zip(dq.data()) {
                    *a += b;
                }
            }
            if let Some(enc) = trace.frame_enc.get(t) {
                self.encoder
                    .backward(p, enc, &dx.reshape(&[fs, fs, c])?, g);
            }
        }
        if let Some(enc) = &trace.query_enc {
            self.encoder.backward(p, enc, &d_query, g);
        }
        debug_assert_eq!(trace.query_feat.shape(), d_query.shape());
        Ok(())
    }
}
