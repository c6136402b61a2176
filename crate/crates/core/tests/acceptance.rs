//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! `ACCEPTANCE_ONLY=1,3,8` restricts the run to the listed criteria; `ACCEPTANCE_STRICT=1`
//! turns any FAIL into a non-zero exit status.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vql_core::data::{generate_dataset, Dataset, SyntheticConfig};
use vql_core::geometry::{giou, iou, BoundingBox};
use vql_core::gradcheck::run_suite;
use vql_core::inference::{
    detect_peaks, localize, predict_dataset, predict_frames, smooth_scores, FramePrediction, InferenceConfig, ResponseTrack,
};
use vql_core::losses::{mine_hard_negatives, LossConfig, NegativeCandidate, ProbLoss};
use vql_core::metrics::{average_precision, evaluate, spatiotemporal_iou, temporal_track_iou, EvalPair, MetricsReport};
use vql_core::model::{Model, ModelConfig};
use vql_core::params::ParamSet;
use vql_core::tensor::Tensor;
use vql_core::trainer::{train, IterLog, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const TAIL_FRAMES: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1: gradients

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(&[0, 1, 2, 3, 4]).expect("gradient suite runs");
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} seed {} err {:.2e}", r.block, r.seed, r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let blocks: std::collections::BTreeSet<&str> = reports.iter().map(|r| r.block.as_str()).collect();
    let elapsed = start.elapsed();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} checks over {} blocks x 5 seeds, worst rel err {worst:.2e}, {:.0}s{}",
            reports.len(),
            blocks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2: window locality

fn locality_case(layers: usize, half_width: usize, clip_len: usize, seed: u64) -> Result<(), String> {
    let cfg = ModelConfig {
        input_side: 32,
        clip_len,
        encoder_stride: 8,
        channels: 8,
        st_channels: 8,
        heads: 2,
        ffn_mult: 2,
        spatial_layers: 1,
        st_layers: layers,
        window_half_width: Some(half_width),
        head_channels: 8,
        head_depth: 1,
        ..ModelConfig::toy()
    };
    let (model, params) = Model::init::<f64>(&cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = Tensor::<f64>::from_fn(&[clip_len, 32, 32, 3], |_| rng.gen_range(0.0..1.0));
    let query = Tensor::<f64>::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
    let (base, _) = model.forward(&params, &clip, &query).map_err(|e| e.to_string())?;
    let reach = layers * half_width;
    for t in 0..clip_len {
        let mut perturbed = clip.clone();
        let per_frame = 32 * 32 * 3;
        for v in &mut perturbed.data_mut()[t * per_frame..(t + 1) * per_frame] {
            *v = 1.0 - *v;
        }
        let (out, _) = model.forward(&params, &perturbed, &query).map_err(|e| e.to_string())?;
        for (t2, (a, b)) in base.iter().zip(&out).enumerate() {
            let same = a.probs.data() == b.probs.data() && a.deltas.data() == b.deltas.data();
            let inside = t.abs_diff(t2) <= reach;
            if !inside && !same {
                return Err(format!("L={layers} w={half_width}: frame {t} changed frame {t2}"));
            }
            if inside && same {
                return Err(format!("L={layers} w={half_width}: frame {t} did not reach frame {t2}"));
            }
        }
    }
    Ok(())
}

fn window_locality() -> Outcome {
    let start = Instant::now();
    let cases = [(1, 1, 8), (2, 1, 8), (1, 2, 8), (3, 1, 10), (2, 2, 12)];
    let mut errors = Vec::new();
    for (i, &(l, w, t)) in cases.iter().enumerate() {
        if let Err(e) = locality_case(l, w, t, 40 + i as u64) {
            errors.push(e);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        errors.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} (layers, half-width, frames) configs, every frame perturbed; outputs change exactly within L*w, {:.1}s{}",
            cases.len(),
            elapsed.as_secs_f64(),
            if errors.is_empty() { String::new() } else { format!("; {}", errors.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 3: oracles

fn raster_iou_giou(a: [i64; 4], b: [i64; 4]) -> (f64, f64) {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (x0, y0) = (a[0].min(b[0]), a[1].min(b[1]));
    let (x1, y1) = (a[2].max(b[2]), a[3].max(b[3]));
    let (mut inter, mut union, mut hull) = (0u64, 0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
            hull += 1;
        }
    }
    let iou = inter as f64 / union as f64;
    (iou, iou - (hull - union) as f64 / hull as f64)
}

fn oracle_median(x: &[f64], kernel: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let r = kernel as isize / 2;
            let mut w: Vec<f64> = (i as isize - r..=i as isize + r)
                .filter_map(|j| usize::try_from(j).ok().and_then(|j| x.get(j).copied()))
                .collect();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            w[(w.len() - 1) / 2]
        })
        .collect()
}

/// Peak frames by plateau: a maximal run of equal values whose outside neighbours are both
/// lower (or absent) counts once, at its first frame.
fn oracle_peaks(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..x.len() {
        if i > 0 && x[i - 1] == x[i] {
            continue;
        }
        let end = (i..x.len()).take_while(|&j| x[j] == x[i]).last().unwrap();
        let left = i == 0 || x[i - 1] < x[i];
        let right = end + 1 == x.len() || x[end + 1] < x[i];
        if left && right {
            out.push(i);
        }
    }
    out
}

fn oracle_track(preds: &[FramePrediction], cfg: &InferenceConfig) -> Option<(usize, usize)> {
    let probs: Vec<f64> = preds.iter().map(|p| if p.prob >= cfg.phi { p.prob } else { 0.0 }).collect();
    let sm = oracle_median(&probs, cfg.median_kernel);
    let peaks = oracle_peaks(&sm);
    let s = peaks.iter().map(|&i| sm[i]).fold(f64::NEG_INFINITY, f64::max);
    let tp = *peaks.iter().filter(|&&i| sm[i] >= cfg.peak_ratio * s).max()?;
    if sm[tp] <= 0.0 {
        return None;
    }
    let above: Vec<bool> = sm.iter().map(|&v| v >= cfg.extent_ratio * sm[tp]).collect();
    // maximal run of `above` containing tp
    let runs = (0..above.len()).filter(|&i| above[i] && (i == 0 || !above[i - 1])).map(|st| {
        let en = (st..above.len()).take_while(|&j| above[j]).last().unwrap();
        (st, en)
    });
    runs.into_iter().find(|&(st, en)| st <= tp && tp <= en)
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<FramePrediction> {
    (0..n)
        .map(|i| FramePrediction {
            frame_idx: i,
            bbox: BoundingBox::new(rng.gen_range(10.0..50.0), rng.gen_range(10.0..50.0), rng.gen_range(2.0..20.0), rng.gen_range(2.0..20.0)),
            // coarse levels make plateaus and ties common
            prob: rng.gen_range(0..=levels) as f64 / levels as f64,
        })
        .collect()
}

/// AP from the operating points of every distinct score threshold.
fn sweep_ap(pairs: &[EvalPair], iou_fn: fn(&ResponseTrack, &ResponseTrack) -> f64) -> f64 {
    let mut taus: Vec<f64> = pairs.iter().filter_map(|p| p.prediction.as_ref().map(|t| t.score)).collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    let points: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            let kept: Vec<bool> = pairs
                .iter()
                .filter_map(|p| p.prediction.as_ref().filter(|t| t.score >= tau).map(|t| iou_fn(t, &p.ground_truth) >= 0.25))
                .collect();
            let tp = kept.iter().filter(|h| **h).count() as f64;
            (tp / pairs.len() as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    for r in levels {
        ap += (r - prev) * points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        prev = r;
    }
    ap
}

fn random_track(rng: &mut ChaCha8Rng, score: f64) -> ResponseTrack {
    let s = rng.gen_range(0..20);
    let len = rng.gen_range(1..8);
    ResponseTrack {
        s,
        e: s + len - 1,
        boxes: (0..len)
            .map(|_| BoundingBox::new(rng.gen_range(10.0..30.0), rng.gen_range(10.0..30.0), rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0)))
            .collect(),
        score,
    }
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let mut r = || {
            let (x, y) = (rng.gen_range(0..30), rng.gen_range(0..30));
            [x, y, x + rng.gen_range(1..20), y + rng.gen_range(1..20)]
        };
        let (a, b) = (r(), r());
        let (ri, rg) = raster_iou_giou(a, b);
        let ba = BoundingBox::from_corners(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
        let bb = BoundingBox::from_corners(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
        worst = worst.max((iou(&ba, &bb).unwrap() - ri).abs()).max((giou(&ba, &bb).unwrap() - rg).abs());
    }
    if worst > 1e-9 {
        failures.push(format!("IoU/GIoU off raster by {worst:.1e}"));
    }

    for _ in 0..1000 {
        let n = rng.gen_range(0..200);
        let pool: Vec<NegativeCandidate> = (0..n)
            .map(|i| NegativeCandidate {
                loss: rng.gen_range(0..20) as f64 / 4.0,
                key: (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..8), i),
            })
            .collect();
        let k = rng.gen_range(0..=n + 5);
        let mut sorted = pool.clone();
        sorted.sort_by(|a, b| b.loss.partial_cmp(&a.loss).unwrap().then(a.key.cmp(&b.key)));
        sorted.truncate(k);
        if mine_hard_negatives(pool, k) != sorted {
            failures.push("hard-negative top-K differs from full sort".into());
            break;
        }
    }

    let cfg = InferenceConfig::default();
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = rng.gen_range(1..60);
        let preds = random_preds(&mut rng, n, [3, 10, 1000][i % 3]);
        let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        let sm = smooth_scores(&probs, 5);
        let peaks = detect_peaks(&sm, cfg.peak_ratio).unwrap();
        let got = localize(&preds, &cfg).unwrap();
        let want = oracle_track(&preds, &cfg);
        let boxes_ok = got.as_ref().is_none_or(|t| t.boxes.iter().zip(&preds[t.s..=t.e]).all(|(a, p)| *a == p.bbox));
        if sm != oracle_median(&probs, 5) || peaks.all != oracle_peaks(&sm) || got.as_ref().map(|t| (t.s, t.e)) != want || !boxes_ok {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        failures.push(format!("{mismatches}/1000 sequences differ from the brute-force post-processing"));
    }

    let mut ap_gap = 0.0f64;
    for _ in 0..500 {
        let n = rng.gen_range(1..=10);
        let mut scores: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(0.0..0.9)) / n as f64).collect();
        for i in (1..n).rev() {
            scores.swap(i, rng.gen_range(0..=i));
        }
        let pairs: Vec<EvalPair> = (0..n)
            .map(|i| {
                let gt = random_track(&mut rng, 1.0);
                let prediction = rng.gen_bool(0.8).then(|| {
                    if rng.gen_bool(0.4) {
                        ResponseTrack { score: scores[i], ..gt.clone() }
                    } else {
                        random_track(&mut rng, scores[i])
                    }
                });
                EvalPair { query_id: format!("q{i}"), prediction, ground_truth: gt }
            })
            .collect();
        for f in [temporal_track_iou as fn(&ResponseTrack, &ResponseTrack) -> f64, spatiotemporal_iou] {
            ap_gap = ap_gap.max((average_precision(&pairs, f, 0.25) - sweep_ap(&pairs, f)).abs());
        }
    }
    if ap_gap > 1e-12 {
        failures.push(format!("AP differs from threshold sweep by {ap_gap:.1e}"));
    }

    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "IoU/GIoU max |diff| {worst:.1e} on 2000 integer pairs; HNM 1000 pools; post-processing 1000 sequences; AP max |diff| {ap_gap:.1e} on 500 instances; {:.1}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 4-6: training runs

/// Training setups. Every run uses 4 videos, 2000 iterations and the toy model; the
/// held-out set appends query-free clips (new frames of the scene's distractors) to each
/// training video, so its main part is identical to the training data.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    /// Window 5, BCE with hard-negative mining.
    Reference,
    /// Same, attending over the whole clip.
    Global,
    /// Reference setup on distractor-heavy videos.
    HeavyHnm,
    /// Plain BCE on distractor-heavy videos.
    HeavyBce,
}

struct Run {
    train_set: MetricsReport,
    held_out: MetricsReport,
    seconds: f64,
}

type Runs = BTreeMap<(Variant, u64), Run>;

fn synthetic(variant: Variant) -> SyntheticConfig {
    match variant {
        Variant::Reference | Variant::Global => SyntheticConfig::default(),
        Variant::HeavyHnm | Variant::HeavyBce => SyntheticConfig { distractors: 4, ..SyntheticConfig::default() },
    }
}

fn datasets(seed: u64, syn: &SyntheticConfig) -> (Dataset, Dataset) {
    let (train_set, _) = generate_dataset(seed, 4, syn).unwrap();
    let (held_out, _) = generate_dataset(seed, 4, &SyntheticConfig { tail_frames: TAIL_FRAMES, ..syn.clone() }).unwrap();
    (train_set, held_out)
}

fn configs(seed: u64, variant: Variant) -> (ModelConfig, TrainConfig, LossConfig) {
    let mut model = ModelConfig::toy();
    let mut loss = LossConfig::default();
    match variant {
        Variant::Reference | Variant::HeavyHnm => {}
        Variant::Global => model.window_half_width = None,
        Variant::HeavyBce => loss.prob_loss = ProbLoss::Bce,
    }
    let train = TrainConfig { seed, ..TrainConfig::toy() };
    (model, train, loss)
}

fn score(model: &Model, params: &ParamSet<f32>, ds: &Dataset) -> MetricsReport {
    let preds = predict_dataset(model, params, ds, &InferenceConfig::default(), 1).unwrap();
    let pairs: Vec<EvalPair> = preds
        .into_iter()
        .zip(&ds.queries)
        .map(|((query_id, prediction), q)| EvalPair { query_id, prediction, ground_truth: q.record.track() })
        .collect();
    evaluate(&pairs).unwrap()
}

fn trained(seed: u64, variant: Variant) -> (Model, ParamSet<f32>, Run) {
    let start = Instant::now();
    let (train_set, held_out) = datasets(seed, &synthetic(variant));
    let (mcfg, tcfg, lcfg) = configs(seed, variant);
    let (model, init) = Model::init::<f32>(&mcfg, seed).unwrap();
    let (params, _) = train(&model, init, &train_set, &tcfg, &lcfg, 1, None).unwrap();
    let run = Run {
        train_set: score(&model, &params, &train_set),
        held_out: score(&model, &params, &held_out),
        seconds: start.elapsed().as_secs_f64(),
    };
    eprintln!(
        "  [{variant:?} seed {seed}] train tAP {:.3} stAP {:.3} rec {:.1}% | held-out tAP {:.3} stAP {:.3} | {:.0}s",
        run.train_set.tap25, run.train_set.stap25, run.train_set.recovery_pct, run.held_out.tap25, run.held_out.stap25, run.seconds
    );
    (model, params, run)
}

fn overfit(runs: &Runs) -> Outcome {
    let r = &runs[&(Variant::Reference, 0)];
    let m = &r.train_set;
    outcome(
        m.stap25 >= 0.9 && m.recovery_pct >= 90.0 && r.seconds < 1800.0,
        format!(
            "4 videos, 64px, T=8, 2000 iterations: stAP25 {:.3} (>= 0.9), recovery {:.1}% (>= 90), tAP25 {:.3}, {:.0}s",
            m.stap25, m.recovery_pct, m.tap25, r.seconds
        ),
    )
}

/// Held-out tAP25 of `better` strictly above `worse` on every seed.
fn strictly_better(runs: &Runs, better: Variant, worse: Variant, name: &str) -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    let mut seconds = 0.0;
    for seed in SEEDS {
        let (b, w) = (&runs[&(better, seed)], &runs[&(worse, seed)]);
        all &= b.held_out.tap25 > w.held_out.tap25;
        parts.push(format!("seed {seed}: {:.3} vs {:.3}", b.held_out.tap25, w.held_out.tap25));
        seconds += b.seconds + w.seconds;
    }
    outcome(all && seconds < 3600.0, format!("held-out tAP25 {name}: {}; {seconds:.0}s of training", parts.join(", ")))
}

// ---------------------------------------------------------------- 7: determinism

fn determinism() -> Outcome {
    let run = || -> (Vec<IterLog>, Vec<(String, Option<ResponseTrack>)>) {
        let (train_set, held_out) = datasets(5, &SyntheticConfig::default());
        let (mcfg, mut tcfg, lcfg) = configs(5, Variant::Reference);
        tcfg.iterations = 40;
        tcfg.warmup_iters = 10;
        let (model, init) = Model::init::<f32>(&mcfg, 5).unwrap();
        let (params, logs) = train(&model, init, &train_set, &tcfg, &lcfg, 1, None).unwrap();
        (logs, predict_dataset(&model, &params, &held_out, &InferenceConfig::default(), 1).unwrap())
    };
    let (a, b) = (run(), run());
    let bits = |logs: &[IterLog]| logs.iter().map(|l| (l.total.to_bits(), l.l_bbox.to_bits(), l.l_prob.to_bits(), l.lr.to_bits())).collect::<Vec<_>>();
    let same_logs = a.0 == b.0 && bits(&a.0) == bits(&b.0);
    let same_preds = serde_json::to_string(&a.1).unwrap() == serde_json::to_string(&b.1).unwrap() && a.1 == b.1;
    outcome(
        same_logs && same_preds,
        format!(
            "two 40-iteration runs from seed 5: logs {}, predictions {}",
            if same_logs { "bit-identical" } else { "DIFFER" },
            if same_preds { "bit-identical" } else { "DIFFER" }
        ),
    )
}

// ---------------------------------------------------------------- 8: scale invariance

fn same_track(a: &Option<ResponseTrack>, b: &Option<ResponseTrack>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.s == b.s && a.e == b.e && a.boxes == b.boxes,
        (None, None) => true,
        _ => false,
    }
}

fn halved(preds: &[FramePrediction]) -> Vec<FramePrediction> {
    preds.iter().map(|p| FramePrediction { prob: p.prob * 0.5, ..*p }).collect()
}

fn scale_invariance(trained: Option<&(Model, ParamSet<f32>)>) -> Outcome {
    let cfg = InferenceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut broken = 0;
    let mut found = 0;
    for i in 0..1000 {
        let n = rng.gen_range(1..80);
        let preds = random_preds(&mut rng, n, [4, 16, 1 << 20][i % 3]);
        let a = localize(&preds, &cfg).unwrap();
        found += a.is_some() as usize;
        broken += !same_track(&a, &localize(&halved(&preds), &cfg).unwrap()) as usize;
    }
    let mut model_tracks = 0;
    if let Some((model, params)) = trained {
        let (_, held_out) = datasets(0, &SyntheticConfig::default());
        for q in &held_out.queries {
            let video = &held_out.videos[held_out.video_index(q).unwrap()];
            let preds = predict_frames(model, params, &video.frames, &q.image).unwrap();
            model_tracks += 1;
            broken += !same_track(&localize(&preds, &cfg).unwrap(), &localize(&halved(&preds), &cfg).unwrap()) as usize;
        }
    }
    outcome(
        broken == 0,
        format!("1000 random sequences ({found} with a track) and {model_tracks} trained-model videos: {broken} changed under p -> 0.5p"),
    )
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));
    let names = [
        "gradient suite",
        "window locality",
        "oracle equivalence",
        "overfit end-to-end",
        "global window ablation",
        "HNM vs plain BCE",
        "determinism",
        "probability-scale invariance",
    ];
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut report = |c: usize, o: Outcome| {
        println!("criterion {c} ({}): {} - {}", names[c - 1], if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.insert(c, o);
    };

    if wanted(1) {
        report(1, gradients());
    }
    if wanted(2) {
        report(2, window_locality());
    }
    if wanted(3) {
        report(3, oracles());
    }

    let mut runs = BTreeMap::new();
    let mut reference = None;
    let mut plan: Vec<(Variant, u64)> = Vec::new();
    if wanted(4) || wanted(5) || wanted(8) {
        plan.push((Variant::Reference, 0));
    }
    if wanted(5) {
        plan.extend(SEEDS.iter().skip(1).map(|&s| (Variant::Reference, s)));
    }
    if wanted(5) {
        plan.extend(SEEDS.map(|s| (Variant::Global, s)));
    }
    if wanted(6) {
        plan.extend(SEEDS.into_iter().flat_map(|s| [(Variant::HeavyHnm, s), (Variant::HeavyBce, s)]));
    }
    for (variant, seed) in plan {
        let (model, params, run) = trained(seed, variant);
        if (variant, seed) == (Variant::Reference, 0) {
            reference = Some((model, params));
        }
        runs.insert((variant, seed), run);
    }
    if wanted(4) {
        report(4, overfit(&runs));
    }
    if wanted(5) {
        report(5, strictly_better(&runs, Variant::Reference, Variant::Global, "window-5 vs global"));
    }
    if wanted(6) {
        report(6, strictly_better(&runs, Variant::HeavyHnm, Variant::HeavyBce, "BCE+HNM vs BCE, 4 distractors per video"));
    }
    if wanted(7) {
        report(7, determinism());
    }
    if wanted(8) {
        report(8, scale_invariance(reference.as_ref()));
    }

    let failed = results.values().filter(|o| !o.pass).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 || std::env::var_os("ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
