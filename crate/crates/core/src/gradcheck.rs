//! Central finite-difference checks of every analytic backward pass, in `f64`.
//!
//! Each block is reduced to a scalar by a fixed random projection of its outputs, so the
//! upstream gradient is that projection. Parameters and inputs are perturbed one scalar at
//! a time (a seeded sample of at most [`MAX_COORDS`] scalars per tensor).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::{assign_labels, AnchorLabels};
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::losses::{total_loss, BboxReduction, LossConfig, PairPrediction, ProbLoss};
use crate::model::{ClipGrads, FramePredictionRaw, Fusion, Model, ModelConfig};
use crate::nn::{AttentionMask, ConvFusion, CrossAttentionBlock, PatchEncoder, SelfAttentionBlock};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to rounding
/// compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;
pub const MAX_COORDS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, MAX_COORDS).into_vec()
    }
}

struct Checker {
    block: String,
    seed: u64,
    rng: ChaCha8Rng,
    checked: usize,
    max_rel_err: f64,
    worst: String,
}

impl Checker {
    fn new(block: &str, seed: u64) -> Self {
        Self {
            block: block.to_string(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9),
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || !e.is_finite() {
            self.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = label;
        }
    }

    /// Compares `grads`/`dinputs` against central differences of `objective`.
    fn run(
        mut self,
        params: &ParamSet<f64>,
        inputs: &[Tensor<f64>],
        grads: &ParamSet<f64>,
        dinputs: &[Tensor<f64>],
        objective: impl Fn(&ParamSet<f64>, &[Tensor<f64>]) -> f64,
    ) -> BlockReport {
        let mut p = params.clone();
        for id in params.ids() {
            for k in coords(&mut self.rng, params.get(id).len()) {
                let x0 = p.get(id).data()[k];
                p.get_mut(id).data_mut()[k] = x0 + STEP;
                let plus = objective(&p, inputs);
                p.get_mut(id).data_mut()[k] = x0 - STEP;
                let minus = objective(&p, inputs);
                p.get_mut(id).data_mut()[k] = x0;
                let numeric = (plus - minus) / (2.0 * STEP);
                self.record(format!("{}[{k}]", params.name(id)), grads.get(id).data()[k], numeric);
            }
        }
        let mut xs = inputs.to_vec();
        for i in 0..inputs.len() {
            for k in coords(&mut self.rng, inputs[i].len()) {
                let x0 = xs[i].data()[k];
                xs[i].data_mut()[k] = x0 + STEP;
                let plus = objective(params, &xs);
                xs[i].data_mut()[k] = x0 - STEP;
                let minus = objective(params, &xs);
                xs[i].data_mut()[k] = x0;
                let numeric = (plus - minus) / (2.0 * STEP);
                self.record(format!("input{i}[{k}]"), dinputs[i].data()[k], numeric);
            }
        }
        BlockReport {
            block: self.block,
            seed: self.seed,
            checked: self.checked,
            max_rel_err: self.max_rel_err,
            worst: self.worst,
        }
    }
}

fn new_params(seed: u64) -> (ParamSet<f64>, ChaCha8Rng) {
    (ParamSet::default(), ChaCha8Rng::seed_from_u64(seed))
}

/// Randomizes every parameter so zero/one initializations (norm scales, biases,
/// positional embeddings) are exercised away from their special values.
fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn check_encoder(seed: u64) -> Result<BlockReport> {
    let (mut params, mut rng) = new_params(seed);
    let enc = PatchEncoder::new(&mut ParamBuilder::new(&mut params, &mut rng), 3, 8, 4);
    jitter(&mut params, &mut rng, 0.1);
    let image = random_tensor(&mut rng, &[12, 12, 3], 1.0);
    let r = random_tensor(&mut rng, &[3, 3, 8], 1.0);
    let (_, cache) = enc.forward(&params, &image)?;
    let mut g = params.zeros_like();
    let dx = enc.backward(&params, &cache, &r, &mut g);
    let objective = |p: &ParamSet<f64>, x: &[Tensor<f64>]| dot(&enc.forward(p, &x[0]).unwrap().0, &r);
    Ok(Checker::new("encoder", seed).run(&params, &[image], &g, &[dx], objective))
}

pub fn check_spatial_transformer(seed: u64) -> Result<BlockReport> {
    let (mut params, mut rng) = new_params(seed);
    let block = CrossAttentionBlock::new(&mut ParamBuilder::new(&mut params, &mut rng), 8, 2, 4)?;
    jitter(&mut params, &mut rng, 0.1);
    let frame = random_tensor(&mut rng, &[6, 8], 1.0);
    let query = random_tensor(&mut rng, &[5, 8], 1.0);
    let r = random_tensor(&mut rng, &[6, 8], 1.0);
    let (_, cache) = block.forward(&params, &frame, &query)?;
    let mut g = params.zeros_like();
    let (df, dq) = block.backward(&params, &cache, &r, &mut g);
    let objective = |p: &ParamSet<f64>, x: &[Tensor<f64>]| dot(&block.forward(p, &x[0], &x[1]).unwrap().0, &r);
    Ok(Checker::new("spatial_transformer", seed).run(&params, &[frame, query], &g, &[df, dq], objective))
}

pub fn check_conv_fusion(seed: u64) -> Result<BlockReport> {
    let (mut params, mut rng) = new_params(seed);
    let block = ConvFusion::new(&mut ParamBuilder::new(&mut params, &mut rng), 4);
    jitter(&mut params, &mut rng, 0.1);
    let frame = random_tensor(&mut rng, &[9, 4], 1.0);
    let query = random_tensor(&mut rng, &[3, 3, 4], 1.0);
    let r = random_tensor(&mut rng, &[9, 4], 1.0);
    let (_, cache) = block.forward(&params, &frame, &query)?;
    let mut g = params.zeros_like();
    let (df, dq) = block.backward(&params, &cache, &r, &mut g);
    let objective = |p: &ParamSet<f64>, x: &[Tensor<f64>]| dot(&block.forward(p, &x[0], &x[1]).unwrap().0, &r);
    Ok(Checker::new("conv_fusion", seed).run(&params, &[frame, query], &g, &[df, dq], objective))
}

pub fn check_spatiotemporal_transformer(seed: u64) -> Result<BlockReport> {
    let (mut params, mut rng) = new_params(seed);
    let block = SelfAttentionBlock::new(&mut ParamBuilder::new(&mut params, &mut rng), 8, 2, 4)?;
    jitter(&mut params, &mut rng, 0.1);
    let mask = AttentionMask::temporal_window(4, 2, Some(1));
    let x = random_tensor(&mut rng, &[8, 8], 1.0);
    let r = random_tensor(&mut rng, &[8, 8], 1.0);
    let (_, cache) = block.forward(&params, &x, Some(&mask))?;
    let mut g = params.zeros_like();
    let dx = block.backward(&params, &cache, &r, &mut g);
    let objective = |p: &ParamSet<f64>, x: &[Tensor<f64>]| dot(&block.forward(p, &x[0], Some(&mask)).unwrap().0, &r);
    Ok(Checker::new("spatiotemporal_transformer", seed).run(&params, &[x], &g, &[dx], objective))
}

/// Small end-to-end configuration: 16 px inputs, 4×4 encoder maps, 2×2 prediction maps.
pub fn tiny_config(fusion: Fusion) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.input_side = 16;
    cfg.clip_len = 3;
    cfg.encoder_stride = 4;
    cfg.channels = 4;
    cfg.st_channels = 4;
    cfg.downsample_strides = vec![2];
    cfg.head_channels = 4;
    cfg.window_half_width = Some(1);
    cfg.fusion = fusion;
    cfg.anchors.base_sizes = vec![4.0, 8.0];
    cfg.anchors.aspect_ratios = vec![1.0, 2.0];
    cfg
}

pub fn check_heads(seed: u64) -> Result<BlockReport> {
    let cfg = tiny_config(Fusion::CrossAttention);
    let (model, mut params) = Model::init::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    jitter(&mut params, &mut rng, 0.1);
    let side = cfg.pred_side();
    let n = model.grid.len();
    let v = random_tensor(&mut rng, &[side, side, cfg.st_channels], 1.0);
    let rl = random_tensor(&mut rng, &[n], 1.0);
    let rd = random_tensor(&mut rng, &[n * 4], 1.0);
    let mut g = params.zeros_like();
    let dv = model.prediction_heads_backward(&params, &v, rl.data(), rd.data(), &mut g)?;
    // only head parameters are reachable from v*
    let head_only = |p: &ParamSet<f64>, x: &[Tensor<f64>]| {
        let out = model.prediction_heads(p, &x[0]).unwrap();
        dot(&out.logits.reshape(&[n]).unwrap(), &rl) + dot(&out.deltas.reshape(&[4 * n]).unwrap(), &rd)
    };
    Ok(Checker::new("heads", seed).run(&params, &[v], &g, &[dv], head_only))
}

/// The composed model (encoder through heads, positional embedding and window mask
/// included) under a random projection of logits and deltas.
pub fn check_model(seed: u64, fusion: Fusion) -> Result<BlockReport> {
    let cfg = tiny_config(fusion);
    let (model, mut params) = Model::init::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    jitter(&mut params, &mut rng, 0.1);
    let s = cfg.input_side;
    let clip = random_tensor(&mut rng, &[cfg.clip_len, s, s, 3], 1.0);
    let query = random_tensor(&mut rng, &[s, s, 3], 1.0);
    let n = model.grid.len();
    let mut proj = ClipGrads::zeros(cfg.clip_len, n);
    for t in 0..cfg.clip_len {
        // small weights keep the objective near unit scale, so rounding noise in the
        // differences stays well below the relative-error floor
        proj.d_logits[t] = random_tensor(&mut rng, &[n], 0.2).into_data();
        proj.d_deltas[t] = random_tensor(&mut rng, &[4 * n], 0.05).into_data();
    }
    let (_, trace) = model.forward(&params, &clip, &query)?;
    let mut g = params.zeros_like();
    model.backward(&params, &trace, &proj, &mut g)?;
    let objective = |p: &ParamSet<f64>, x: &[Tensor<f64>]| {
        let (out, _) = model.forward(p, &x[0], &x[1]).unwrap();
        out.iter()
            .enumerate()
            .map(|(t, f)| {
                let l: f64 = f.logits.data().iter().zip(&proj.d_logits[t]).map(|(a, b)| a * b).sum();
                let d: f64 = f.deltas.data().iter().zip(&proj.d_deltas[t]).map(|(a, b)| a * b).sum();
                l + d
            })
            .sum()
    };
    let name = match fusion {
        Fusion::CrossAttention => "model",
        Fusion::Conv => "model_conv_fusion",
    };
    // inputs are not differentiated by `Model::backward`; only parameters are checked
    let report = Checker::new(name, seed).run(&params, &[], &g, &[], |p, _| objective(p, &[clip.clone(), query.clone()]));
    Ok(report)
}

/// Loss gradients with respect to logits and deltas, for every occurrence-loss mode.
pub fn check_losses(seed: u64, mode: ProbLoss) -> Result<BlockReport> {
    let cfg = tiny_config(Fusion::CrossAttention);
    let (model, _) = Model::init::<f64>(&cfg, seed)?;
    let grid = &model.grid;
    let n = grid.len();
    let side = cfg.pred_side();
    let per_cell = cfg.anchors.anchors_per_cell();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let frames = 3;
    let mut inputs = Vec::new();
    let mut labels: Vec<AnchorLabels> = Vec::new();
    for pair in 0..2 {
        for t in 0..frames {
            inputs.push(random_tensor(&mut rng, &[n], 3.0));
            inputs.push(random_tensor(&mut rng, &[4 * n], 1.5));
            if pair == 0 {
                let gt = (t != 1).then(|| {
                    BoundingBox::new(rng.gen_range(5.0..11.0), rng.gen_range(5.0..11.0), rng.gen_range(4.0..9.0), rng.gen_range(4.0..9.0))
                });
                labels.push(assign_labels(grid, gt.as_ref(), cfg.anchors.theta)?);
            }
        }
    }
    let loss_cfg = LossConfig {
        prob_loss: mode,
        neg_per_pos: 2,
        bbox_reduction: BboxReduction::Mean,
        ..LossConfig::default()
    };
    let valid = vec![true; frames];
    let build = |x: &[Tensor<f64>]| -> Vec<Vec<FramePredictionRaw<f64>>> {
        (0..2)
            .map(|pair| {
                (0..frames)
                    .map(|t| {
                        let logits = x[2 * (pair * frames + t)].clone();
                        let probs = Tensor::from_fn(&[n], |i| 1.0 / (1.0 + (-logits.data()[i]).exp()));
                        FramePredictionRaw {
                            logits: logits.reshape(&[side, side, per_cell]).unwrap(),
                            probs: probs.reshape(&[side, side, per_cell]).unwrap(),
                            deltas: x[2 * (pair * frames + t) + 1].clone().reshape(&[side, side, per_cell, 4]).unwrap(),
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let evaluate = |x: &[Tensor<f64>]| {
        let preds = build(x);
        let batch = [
            PairPrediction { query_video: 0, clip_video: 0, frames: &preds[0], labels: &labels, valid: &valid },
            PairPrediction { query_video: 0, clip_video: 1, frames: &preds[1], labels: &[], valid: &valid },
        ];
        total_loss(&batch, grid, cfg.input_side as f64, &loss_cfg).unwrap()
    };
    let (_, grads) = evaluate(&inputs);
    let mut dinputs = Vec::new();
    for g in &grads {
        for t in 0..frames {
            dinputs.push(Tensor::new(&[n], g.d_logits[t].clone())?);
            dinputs.push(Tensor::new(&[4 * n], g.d_deltas[t].clone())?);
        }
    }
    let name = match mode {
        ProbLoss::BceHnm => "loss_bce_hnm",
        ProbLoss::Bce => "loss_bce",
        ProbLoss::Focal => "loss_focal",
    };
    let empty = ParamSet::default();
    Ok(Checker::new(name, seed).run(&empty, &inputs, &empty, &dinputs, |_, x| evaluate(x).0.total))
}

/// Every block on every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<BlockReport>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.push(check_encoder(seed)?);
        out.push(check_spatial_transformer(seed)?);
        out.push(check_conv_fusion(seed)?);
        out.push(check_spatiotemporal_transformer(seed)?);
        out.push(check_heads(seed)?);
        out.push(check_model(seed, Fusion::CrossAttention)?);
        out.push(check_model(seed, Fusion::Conv)?);
        for mode in [ProbLoss::BceHnm, ProbLoss::Bce, ProbLoss::Focal] {
            out.push(check_losses(seed, mode)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn single_seed_passes() {
        for r in run_suite(&[11]).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
