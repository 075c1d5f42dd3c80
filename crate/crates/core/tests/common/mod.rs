//! Shared helpers for the integration tests: finite-difference gradient
//! checks, random tiny batches, and brute-force reference evaluators.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relcap::geometry::{geometric_feature, BBox};
use relcap::metrics::{GroundTruth, ImageEval, Prediction};
use relcap::model::{
    total_loss, Bound, DetectionBatch, FusionMode, ModelConfig, ModelParams, PairFeatures,
    TrainBatch,
};
use relcap::tensor::{Tape, Tensor, Var};
use relcap::text::{PosTag, TaggedCaption};
use relcap::Result;

pub const STEP: f64 = 1e-5;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap()
}

/// Values bounded away from zero, for inputs that pass through a kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest relative error between backprop and central differences for a
/// scalar function of `inputs`.
pub fn check_op<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let mut grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[i].data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Contracts a tensor-valued op to a scalar with fixed random weights, so
/// every output element contributes to the gradient.
pub fn contract(tape: &mut Tape, y: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), weights.to_vec())?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn tiny_config(fusion: FusionMode, use_pos_loss: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        region_dim: 8,
        hidden: 8,
        embed: 8,
        geo_dim: 8,
        vocab_size: 12,
        fusion,
        use_pos_loss,
        max_caption_len: 6,
        ..ModelConfig::default()
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
    )
    .unwrap()
}

pub fn random_pair(rng: &mut ChaCha8Rng, feature_dim: usize) -> PairFeatures {
    let (s, o) = (random_box(rng), random_box(rng));
    PairFeatures {
        subject: uniform(rng, feature_dim, -1.0, 1.0),
        object: uniform(rng, feature_dim, -1.0, 1.0),
        union: uniform(rng, feature_dim, -1.0, 1.0),
        geometry: geometric_feature(&s, &o),
    }
}

/// Caption of 1 to 4 real words with monotone subject/predicate/object tags.
pub fn random_caption(rng: &mut ChaCha8Rng, vocab_size: usize) -> TaggedCaption {
    let len = rng.random_range(1..=4);
    let tokens = (0..len).map(|_| rng.random_range(4..vocab_size)).collect();
    let mut tags: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
    tags.sort_unstable();
    let tags = tags.into_iter().map(|t| PosTag::from_index(t).unwrap()).collect();
    TaggedCaption::new(tokens, tags).unwrap()
}

pub fn random_detection(rng: &mut ChaCha8Rng, feature_dim: usize) -> DetectionBatch {
    let gt: Vec<BBox> = (0..rng.random_range(1..=2)).map(|_| random_box(rng)).collect();
    let mut boxes = vec![BBox::new(gt[0].x + 0.01, gt[0].y - 0.01, gt[0].w, gt[0].h * 1.05).unwrap()];
    for _ in 0..rng.random_range(1..=4) {
        boxes.push(random_box(rng));
    }
    let features = boxes.iter().map(|_| uniform(rng, feature_dim, -1.0, 1.0)).collect();
    DetectionBatch::label(features, boxes, &gt).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TrainBatch {
    let n = rng.random_range(1..=3);
    TrainBatch {
        pairs: (0..n).map(|_| random_pair(rng, cfg.feature_dim)).collect(),
        captions: (0..n).map(|_| random_caption(rng, cfg.vocab_size)).collect(),
        detection: random_detection(rng, cfg.feature_dim),
    }
}

pub fn loss_value(params: &ModelParams, cfg: &ModelConfig, batch: &TrainBatch) -> f64 {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let lv = total_loss(&mut tape, &bound, cfg, batch).unwrap();
    tape.value(lv.total).data()[0]
}

/// Gradcheck of a scalar function of the model parameters on `per_tensor`
/// random entries of every parameter tensor.
pub fn check_params<F>(params: &ModelParams, per_tensor: usize, rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let out = f(&mut tape, &bound).unwrap();
    let mut grads = tape.backward(out).unwrap();
    let analytic = bound.gradients(params, &mut grads);
    let eval = |p: &ModelParams| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, p, false);
        let out = f(&mut tape, &bound).unwrap();
        tape.value(out).data()[0]
    };
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.random_range(0..n);
            let orig = params.get(&name).unwrap().data()[j];
            p.get_mut(&name).unwrap().data_mut()[j] = orig + STEP;
            let up = eval(&p);
            p.get_mut(&name).unwrap().data_mut()[j] = orig - STEP;
            let down = eval(&p);
            p.get_mut(&name).unwrap().data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[&name].data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

pub fn check_total_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    check_params(params, per_tensor, rng, |tape, bound| {
        Ok(total_loss(tape, bound, cfg, batch)?.total)
    })
}

// Reference evaluators. Boxes on an integer grid keep every IoU an exact
// ratio of integers, so threshold comparisons agree bit for bit.

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.x - a.w / 2.0, a.x + a.w / 2.0, a.y - a.h / 2.0, a.y + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.x - b.w / 2.0, b.x + b.w / 2.0, b.y - b.h / 2.0, b.y + b.h / 2.0);
    let iw = f64::max(0.0, ax1.min(bx1) - ax0.max(bx0));
    let ih = f64::max(0.0, ay1.min(by1) - ay0.max(by0));
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

pub fn ref_meteor(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut taken = vec![false; reference.len()];
    let mut aligned: Vec<Option<usize>> = Vec::new();
    for c in cand {
        let mut hit = None;
        for (j, r) in reference.iter().enumerate() {
            if !taken[j] && r == c {
                taken[j] = true;
                hit = Some(j);
                break;
            }
        }
        aligned.push(hit);
    }
    let m = aligned.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    for i in 0..aligned.len() {
        if let Some(j) = aligned[i] {
            let continues = i > 0 && aligned[i - 1] == Some(j.wrapping_sub(1)) && j > 0;
            if !continues {
                chunks += 1;
            }
        }
    }
    let m = m as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

fn ref_ranked(images: &[ImageEval]) -> Vec<(usize, usize)> {
    let mut left: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.predictions.len()).map(move |p| (i, p)))
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (i, p) = left[k];
            let (bi, bp) = left[best];
            if images[i].predictions[p].score > images[bi].predictions[bp].score {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// AP as the sum over hits of `1/n_gt` times the best precision at or below
/// that rank.
fn ref_ap(hits: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    ap
}

pub fn ref_map(images: &[ImageEval], language: &[f64], localization: &[f64]) -> f64 {
    let n_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    let ranked = ref_ranked(images);
    let mut total = 0.0;
    for &lang in language {
        for &loc in localization {
            let mut claimed: Vec<Vec<bool>> =
                images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
            let mut hits = Vec::new();
            for &(i, p) in &ranked {
                let pred = &images[i].predictions[p];
                let mut pick: Option<(usize, f64)> = None;
                for (g, gt) in images[i].ground_truth.iter().enumerate() {
                    let (si, oi) = (ref_iou(&pred.subject, &gt.subject), ref_iou(&pred.object, &gt.object));
                    if claimed[i][g] || !(si > loc && oi > loc) {
                        continue;
                    }
                    if ref_meteor(&pred.tokens, &gt.tokens) < lang {
                        continue;
                    }
                    let ov = si.min(oi);
                    if pick.is_none_or(|(_, b)| ov > b) {
                        pick = Some((g, ov));
                    }
                }
                if let Some((g, _)) = pick {
                    claimed[i][g] = true;
                }
                hits.push(pick.is_some());
            }
            total += ref_ap(&hits, n_gt);
        }
    }
    100.0 * total / (language.len() * localization.len()) as f64
}

pub fn ref_recall(images: &[ImageEval], language: &[f64]) -> f64 {
    let n_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    let mut total = 0.0;
    for &t in language {
        let mut recalled = 0;
        for im in images {
            for g in &im.ground_truth {
                if im.predictions.iter().any(|p| ref_meteor(&p.tokens, &g.tokens) >= t) {
                    recalled += 1;
                }
            }
        }
        total += recalled as f64 / n_gt as f64;
    }
    100.0 * total / language.len() as f64
}

pub fn ref_avg_meteor(images: &[ImageEval]) -> f64 {
    let scores: Vec<f64> = images
        .iter()
        .flat_map(|im| {
            im.predictions.iter().map(move |p| {
                im.ground_truth
                    .iter()
                    .map(|g| ref_meteor(&p.tokens, &g.tokens))
                    .fold(0.0, f64::max)
            })
        })
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn distinct(words: impl Iterator<Item = String>) -> usize {
    let mut v: Vec<String> = words.collect();
    v.sort();
    v.dedup();
    v.len()
}

pub fn ref_vocab(images: &[ImageEval]) -> (f64, f64) {
    if images.is_empty() {
        return (0.0, 0.0);
    }
    let mut per_img = 0.0;
    let mut box_counts = Vec::new();
    for im in images {
        per_img += distinct(im.predictions.iter().flat_map(|p| p.tokens.clone())) as f64;
        let max_id = im
            .predictions
            .iter()
            .map(|p| p.subject_id.max(p.object_id))
            .max();
        for id in 0..max_id.map_or(0, |m| m + 1) {
            let involved: Vec<&Prediction> = im
                .predictions
                .iter()
                .filter(|p| p.subject_id == id || p.object_id == id)
                .collect();
            if !involved.is_empty() {
                box_counts.push(distinct(involved.iter().flat_map(|p| p.tokens.clone())) as f64);
            }
        }
    }
    let per_box = if box_counts.is_empty() {
        0.0
    } else {
        box_counts.iter().sum::<f64>() / box_counts.len() as f64
    };
    (per_img / images.len() as f64, per_box)
}

pub fn ref_counts(images: &[ImageEval]) -> (f64, f64) {
    if images.is_empty() {
        return (0.0, 0.0);
    }
    let mut captions = 0.0;
    let mut ratio = 0.0;
    let mut with_boxes = 0;
    for im in images {
        captions += im.predictions.len() as f64;
        if im.n_boxes > 0 {
            ratio += im.predictions.len() as f64 / im.n_boxes as f64;
            with_boxes += 1;
        }
    }
    let per_box = if with_boxes == 0 { 0.0 } else { ratio / with_boxes as f64 };
    (captions / images.len() as f64, per_box)
}

const WORDS: [&str; 5] = ["red", "cup", "on", "table", "left"];

fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let sizes = [2.0, 4.0];
    BBox::new(
        rng.random_range(0..=4) as f64,
        rng.random_range(0..=4) as f64,
        sizes[rng.random_range(0..2)],
        sizes[rng.random_range(0..2)],
    )
    .unwrap()
}

fn words(rng: &mut ChaCha8Rng, min: usize) -> Vec<String> {
    (0..rng.random_range(min..=4))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect()
}

/// Up to three images of at most five ground-truth and five predicted
/// captions, on a coarse grid so that score, IoU and caption ties occur.
pub fn random_eval_instance(seed: u64) -> Vec<ImageEval> {
    let mut rng = rng(seed);
    let n_images = rng.random_range(1..=3);
    let mut images: Vec<ImageEval> = (0..n_images)
        .map(|_| {
            let ground_truth: Vec<GroundTruth> = (0..rng.random_range(0..=5))
                .map(|_| GroundTruth {
                    subject: grid_box(&mut rng),
                    object: grid_box(&mut rng),
                    tokens: words(&mut rng, 1),
                })
                .collect();
            let predictions = (0..rng.random_range(0..=5))
                .map(|_| {
                    let copy = (!ground_truth.is_empty() && rng.random_bool(0.5))
                        .then(|| ground_truth[rng.random_range(0..ground_truth.len())].clone());
                    let (subject, object) = match &copy {
                        Some(g) if rng.random_bool(0.7) => (g.subject, g.object),
                        _ => (grid_box(&mut rng), grid_box(&mut rng)),
                    };
                    let tokens = match &copy {
                        Some(g) if rng.random_bool(0.6) => g.tokens.clone(),
                        _ => words(&mut rng, 0),
                    };
                    let subject_id = rng.random_range(0..4);
                    let object_id = (subject_id + rng.random_range(1..4)) % 4;
                    Prediction {
                        subject,
                        object,
                        tokens,
                        score: rng.random_range(1..=5) as f64 / 10.0,
                        subject_id,
                        object_id,
                    }
                })
                .collect();
            ImageEval {
                predictions,
                ground_truth,
                n_boxes: rng.random_range(0..=4),
            }
        })
        .collect();
    if images.iter().all(|im| im.ground_truth.is_empty()) {
        images[0].ground_truth.push(GroundTruth {
            subject: grid_box(&mut rng),
            object: grid_box(&mut rng),
            tokens: words(&mut rng, 1),
        });
    }
    images
}

/// Exhaustive NMS reference: a box survives iff no higher-ranked survivor
/// overlaps it beyond the threshold, evaluated by fixed-point over ranks.
pub fn ref_nms(props: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let n = props.len();
    let outranks = |i: usize, j: usize| props[i].1 > props[j].1 || (props[i].1 == props[j].1 && i < j);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by_key(|&i| (0..n).filter(|&j| outranks(j, i)).count());
    let mut alive = vec![false; n];
    for &i in &rank {
        alive[i] = !(0..n).any(|j| alive[j] && outranks(j, i) && ref_iou(&props[i].0, &props[j].0) > thr);
    }
    rank.into_iter().filter(|&i| alive[i]).collect()
}
