//! Training loop. Each iteration draws a batch of queries, samples one clip per query that
//! overlaps its response track, augments it, and evaluates the model on every own
//! (query, clip) pair plus — for hard-negative mining — cross pairs whose clip comes from
//! another video and therefore holds only negatives.

mod augment;
mod optim;
mod sampling;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_to_clip, augment, crop_box, flip_box, AugmentConfig, AugmentParams, Crop};
pub use optim::{lr_at, AdamW, AdamWConfig};
pub use sampling::{sample_training_clip, valid_starts, ClipSample};

use crate::anchors::{assign_labels, AnchorLabels};
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, PairPrediction, ProbLoss};
use crate::model::{ClipGrads, Model};
use crate::parallel::par_map;
use crate::params::{save_checkpoint, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub clip_len: usize,
    /// Sampling rate of training clips; must divide the annotated video rate.
    pub fps: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Cross pairs per query for hard-negative mining; `None` pairs every query with every
    /// other clip of the batch.
    pub cross_pairs: Option<usize>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// 60k iterations of batch 24, clips of 30 frames at 5 fps.
    pub fn full() -> Self {
        Self {
            iterations: 60_000,
            batch_size: 24,
            peak_lr: 1e-4,
            weight_decay: 0.05,
            warmup_iters: 1000,
            seed: 0,
            clip_len: 30,
            fps: 5.0,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            cross_pairs: None,
            checkpoint_every: 5000,
            augment: AugmentConfig::default(),
        }
    }

    /// Desk-scale schedule for the toy model.
    pub fn toy() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            peak_lr: 2e-3,
            warmup_iters: 100,
            clip_len: 8,
            cross_pairs: Some(1),
            checkpoint_every: 0,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.clip_len == 0 {
            return Err(Error::config("iterations, batch_size and clip_len must be positive"));
        }
        if self.warmup_iters > self.iterations {
            return Err(Error::config(format!(
                "warmup_iters {} exceeds iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.fps > 0.0) {
            return Err(Error::config("peak_lr and weight_decay must be non-negative, fps positive"));
        }
        if self.cross_pairs == Some(0) {
            return Err(Error::config("cross_pairs must be positive; omit it to use all pairs"));
        }
        self.augment.validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Frame step between sampled frames for a video annotated at `video_fps`.
    pub fn frame_stride(&self, video_fps: f64) -> Result<usize> {
        let ratio = video_fps / self.fps;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-6 {
            return Err(Error::config(format!(
                "sampling rate {} does not divide video rate {video_fps}",
                self.fps
            )));
        }
        Ok(stride as usize)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub l_bbox: f64,
    pub l_prob: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Set when a non-finite gradient made the optimizer skip the update.
    pub skipped: bool,
}

struct Sample {
    slot_video: usize,
    clip: Tensor<f32>,
    query: Tensor<f32>,
    labels: Vec<AnchorLabels>,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub params: ParamSet<f32>,
    dataset: &'a Dataset,
    config: TrainConfig,
    loss: LossConfig,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iter: usize,
    workers: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        params: ParamSet<f32>,
        dataset: &'a Dataset,
        config: TrainConfig,
        loss: LossConfig,
        workers: usize,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        if config.clip_len != model.config.clip_len {
            return Err(Error::config(format!(
                "train clip_len {} differs from model clip_len {}",
                config.clip_len, model.config.clip_len
            )));
        }
        if dataset.side != model.config.input_side {
            return Err(Error::config(format!(
                "dataset frames are {} px, model expects {}",
                dataset.side, model.config.input_side
            )));
        }
        if dataset.queries.is_empty() {
            return Err(Error::config("dataset has no queries"));
        }
        for q in &dataset.queries {
            config.frame_stride(q.record.fps)?;
            dataset.video_index(q)?;
        }
        let opt = AdamW::new(&params, config.optimizer());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            params,
            dataset,
            config,
            loss,
            opt,
            rng,
            order: Vec::new(),
            cursor: 0,
            iter: 0,
            workers: workers.max(1),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn next_query(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.dataset.queries.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn prepare(&mut self, qi: usize) -> Result<Sample> {
        let q = &self.dataset.queries[qi];
        let vi = self.dataset.video_index(q)?;
        let video = &self.dataset.videos[vi];
        let track: Vec<_> = q.record.response_track.iter().map(|b| b.bbox).collect();
        let stride = self.config.frame_stride(q.record.fps)?;
        let s = q.record.response_track[0].frame;
        let ClipSample { frames, mut gt } =
            sample_training_clip(video.len(), s, &track, self.config.clip_len, stride, &mut self.rng)?;
        let mut images: Vec<Image> = frames.iter().map(|&f| video.frames[f].clone()).collect();
        let mut query = q.image.clone();
        augment(&mut images, &mut gt, &mut query, &self.config.augment, &mut self.rng)?;
        let theta = self.model.config.anchors.theta;
        let labels = gt
            .iter()
            .map(|g| assign_labels(&self.model.grid, g.as_ref(), theta))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<Tensor<f32>> = images.iter().map(Image::to_tensor).collect();
        Ok(Sample {
            slot_video: vi,
            clip: Tensor::stack(&parts)?,
            query: query.to_tensor(),
            labels,
        })
    }

    /// `(query slot, clip slot)` pairs: own pairs first, then cross pairs.
    fn pairs(&mut self, samples: &[Sample]) -> Vec<(usize, usize)> {
        let b = samples.len();
        let mut pairs: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
        if self.loss.prob_loss != ProbLoss::BceHnm {
            return pairs;
        }
        for i in 0..b {
            let mut others: Vec<usize> = (0..b).filter(|&j| samples[j].slot_video != samples[i].slot_video).collect();
            if let Some(k) = self.config.cross_pairs {
                if k < others.len() {
                    others.shuffle(&mut self.rng);
                    others.truncate(k);
                    others.sort_unstable();
                }
            }
            pairs.extend(others.into_iter().map(|j| (i, j)));
        }
        pairs
    }

    /// One optimizer iteration.
    pub fn step(&mut self) -> Result<IterLog> {
        let ids: Vec<usize> = (0..self.config.batch_size).map(|_| self.next_query()).collect();
        let samples = ids.into_iter().map(|qi| self.prepare(qi)).collect::<Result<Vec<_>>>()?;
        let pairs = self.pairs(&samples);
        let model = self.model;
        let params = &self.params;

        let forwards = par_map(self.workers, &pairs, |&(i, j)| model.forward(params, &samples[j].clip, &samples[i].query));
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
        let valid = vec![true; self.config.clip_len];
        let batch: Vec<PairPrediction<'_, f32>> = pairs
            .iter()
            .zip(&forwards)
            .map(|(&(i, j), (frames, _))| PairPrediction {
                query_video: i,
                clip_video: j,
                frames: frames.as_slice(),
                labels: &samples[j].labels,
                valid: &valid,
            })
            .collect();
        let side = self.model.config.input_side as f64;
        let (report, clip_grads) = total_loss(&batch, &self.model.grid, side, &self.loss)?;

        let work: Vec<usize> = (0..pairs.len()).filter(|&k| !is_zero(&clip_grads[k])).collect();
        let grads = par_map(self.workers, &work, |&k| {
            let mut g = params.zeros_like();
            model.backward(params, &forwards[k].1, &clip_grads[k], &mut g).map(|_| g)
        });
        let mut total = self.params.zeros_like();
        for g in grads {
            total.add_assign(&g?);
        }

        self.iter += 1;
        let lr = lr_at(self.iter, self.config.peak_lr, self.config.warmup_iters, self.config.iterations);
        let applied = self.opt.step(&mut self.params, &total, lr)?;
        Ok(IterLog {
            iter: self.iter,
            lr,
            l_bbox: report.l_bbox,
            l_prob: report.l_prob,
            total: report.total,
            n_pos: report.n_pos,
            n_neg: report.n_neg_sampled,
            skipped: !applied,
        })
    }

    /// Runs the remaining iterations. With `out`, appends the log to `out/train_log.jsonl`,
    /// writes periodic checkpoints under `out/checkpoints/` and the final weights to
    /// `out/model.{bin,json}`.
    pub fn run(&mut self, out: Option<&Path>, mut on_log: impl FnMut(&IterLog)) -> Result<Vec<IterLog>> {
        let mut writer = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut logs = Vec::with_capacity(self.config.iterations - self.iter);
        while self.iter < self.config.iterations {
            let log = self.step()?;
            if let Some((w, path)) = writer.as_mut() {
                let line = serde_json::to_string(&log).map_err(|e| Error::json(path.as_path(), e))?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let (Some(dir), true) = (out, self.config.checkpoint_every > 0) {
                if log.iter % self.config.checkpoint_every == 0 && log.iter < self.config.iterations {
                    save_checkpoint(&self.params, &dir.join("checkpoints").join(format!("iter_{:06}", log.iter)))?;
                }
            }
            on_log(&log);
            logs.push(log);
        }
        if let Some((mut w, path)) = writer {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = out {
            save_checkpoint(&self.params, &dir.join("model"))?;
        }
        Ok(logs)
    }
}

fn is_zero<T: Real>(g: &ClipGrads<T>) -> bool {
    g.d_logits.iter().chain(&g.d_deltas).all(|v| v.iter().all(|x| *x == T::zero()))
}

/// Trains `params` for the configured number of iterations.
pub fn train(
    model: &Model,
    params: ParamSet<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    loss: &LossConfig,
    workers: usize,
    out: Option<&Path>,
) -> Result<(ParamSet<f32>, Vec<IterLog>)> {
    let mut trainer = Trainer::new(model, params, dataset, config.clone(), loss.clone(), workers)?;
    let logs = trainer.run(out, |_| {})?;
    Ok((trainer.params, logs))
}
