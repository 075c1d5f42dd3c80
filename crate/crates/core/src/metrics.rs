//! Caption similarity and the relational dense-captioning evaluation suite.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Similarity between a candidate caption and a reference caption in `[0, 1]`.
pub trait CaptionScorer: Sync {
    fn score(&self, candidate: &[String], reference: &[String]) -> f64;
}

/// Exact-match METEOR: unigram alignment, recall-weighted F-mean and a
/// fragmentation penalty.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeteorLite;

impl CaptionScorer for MeteorLite {
    fn score(&self, candidate: &[String], reference: &[String]) -> f64 {
        meteor_lite(candidate, reference)
    }
}

/// Candidate tokens are aligned left to right, each to the first unused
/// reference token with the same text. With `m` matches,
/// `P = m/|cand|`, `R = m/|ref|`, `Fmean = 10PR/(R+9P)`, and a chunk is a
/// maximal run of matches adjacent in both sequences:
///
/// ```text
/// score = Fmean · (1 − 0.5·(chunks/m)³)
/// ```
pub fn meteor_lite<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    let mut align: Vec<usize> = Vec::new();
    for c in candidate {
        let hit = reference
            .iter()
            .enumerate()
            .position(|(j, r)| !used[j] && r.as_ref() == c.as_ref());
        if let Some(j) = hit {
            used[j] = true;
            align.push(j);
        } else {
            align.push(usize::MAX);
        }
    }
    let matches = align.iter().filter(|&&j| j != usize::MAX).count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for &j in &align {
        if j == usize::MAX {
            prev = None;
            continue;
        }
        if prev.is_none_or(|p| j != p + 1) {
            chunks += 1;
        }
        prev = Some(j);
    }
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// Caption-similarity gates, inclusive.
    pub language: Vec<f64>,
    /// Box-overlap gates, strict, applied to subject and object alike.
    pub localization: Vec<f64>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            language: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
            localization: vec![0.2, 0.3, 0.4, 0.5, 0.6],
        }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("language", &self.language), ("localization", &self.localization)] {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} thresholds are empty")));
            }
            if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config(format!(
                    "{name} thresholds must be finite and ascending: {v:?}"
                )));
            }
        }
        Ok(())
    }
}

/// A predicted relational caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject: BBox,
    pub object: BBox,
    pub tokens: Vec<String>,
    pub score: f64,
    /// Indices of the source boxes among the image's surviving proposals.
    pub subject_id: usize,
    pub object_id: usize,
}

/// A ground-truth relational caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject: BBox,
    pub object: BBox,
    pub tokens: Vec<String>,
}

/// Predictions and ground truth for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<GroundTruth>,
    /// Proposals left after NMS.
    pub n_boxes: usize,
}

fn total_gt(images: &[ImageEval]) -> usize {
    images.iter().map(|im| im.ground_truth.len()).sum()
}

fn check_scores(images: &[ImageEval]) -> Result<()> {
    for (i, im) in images.iter().enumerate() {
        if let Some(p) = im.predictions.iter().position(|p| !p.score.is_finite()) {
            return Err(Error::Eval(format!("image {i} prediction {p} has a non-finite score")));
        }
    }
    Ok(())
}

/// All-points interpolated average precision for a ranked list of hits.
pub fn average_precision(hits: &[bool], n_positive: usize) -> f64 {
    if n_positive == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_positive as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

struct PairCache {
    /// `(image, prediction)` in ranked order.
    order: Vec<(usize, usize)>,
    /// Per image, per prediction, per gt: `(min IoU, language score)`.
    cells: Vec<Vec<Vec<(f64, f64)>>>,
}

fn pair_cache(images: &[ImageEval], scorer: &dyn CaptionScorer) -> PairCache {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.predictions.len()).map(move |p| (i, p)))
        .collect();
    order.sort_by(|a, b| {
        let sa = images[a.0].predictions[a.1].score;
        let sb = images[b.0].predictions[b.1].score;
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let cells = images
        .iter()
        .map(|im| {
            im.predictions
                .iter()
                .map(|p| {
                    im.ground_truth
                        .iter()
                        .map(|g| {
                            let ov = iou(&p.subject, &g.subject).min(iou(&p.object, &g.object));
                            (ov, scorer.score(&p.tokens, &g.tokens))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    PairCache { order, cells }
}

fn ap_at(images: &[ImageEval], cache: &PairCache, lang: f64, loc: f64, n_gt: usize) -> f64 {
    let mut claimed: Vec<Vec<bool>> =
        images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let hits: Vec<bool> = cache
        .order
        .iter()
        .map(|&(i, p)| {
            let best = cache.cells[i][p]
                .iter()
                .enumerate()
                .filter(|(g, &(ov, sim))| !claimed[i][*g] && ov > loc && sim >= lang)
                .fold(None::<(usize, f64)>, |acc, (g, &(ov, _))| match acc {
                    Some((_, b)) if b >= ov => acc,
                    _ => Some((g, ov)),
                });
            match best {
                Some((g, _)) => {
                    claimed[i][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    average_precision(&hits, n_gt)
}

/// Mean AP over every (language, localization) threshold pair, as a
/// percentage. Predictions are ranked by descending score across all images,
/// ties by image then prediction index. A prediction claims the unclaimed
/// ground truth in its image whose subject and object IoUs both exceed the
/// localization gate and whose caption similarity reaches the language gate;
/// among several, the one with the largest smaller-IoU, then the lower index.
pub fn relational_map(
    images: &[ImageEval],
    thresholds: &EvalThresholds,
    scorer: &dyn CaptionScorer,
) -> Result<f64> {
    thresholds.validate()?;
    check_scores(images)?;
    let n_gt = total_gt(images);
    if n_gt == 0 {
        return Err(Error::Eval("mAP is undefined without ground truth".into()));
    }
    let cache = pair_cache(images, scorer);
    let mut sum = 0.0;
    for &lang in &thresholds.language {
        for &loc in &thresholds.localization {
            sum += ap_at(images, &cache, lang, loc, n_gt);
        }
    }
    let n = (thresholds.language.len() * thresholds.localization.len()) as f64;
    Ok(100.0 * sum / n)
}

/// Box-free recall: a ground-truth caption is recalled at a language gate
/// when any prediction of the same image reaches it. Mean over gates, as a
/// percentage.
pub fn image_level_recall(
    images: &[ImageEval],
    language: &[f64],
    scorer: &dyn CaptionScorer,
) -> Result<f64> {
    let n_gt = total_gt(images);
    if n_gt == 0 {
        return Err(Error::Eval("recall is undefined without ground truth".into()));
    }
    if language.is_empty() {
        return Err(Error::Config("no language thresholds".into()));
    }
    let best: Vec<f64> = images
        .iter()
        .flat_map(|im| {
            im.ground_truth.iter().map(move |g| {
                im.predictions
                    .iter()
                    .map(|p| scorer.score(&p.tokens, &g.tokens))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
        })
        .collect();
    let mut sum = 0.0;
    for &t in language {
        let recalled = best.iter().filter(|&&s| s >= t).count();
        sum += recalled as f64 / n_gt as f64;
    }
    Ok(100.0 * sum / language.len() as f64)
}

/// Mean over predictions of the similarity to the best-matching ground truth
/// of the same image, as a percentage. Zero when there are no predictions.
pub fn average_meteor(images: &[ImageEval], scorer: &dyn CaptionScorer) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for im in images {
        for p in &im.predictions {
            let best = im
                .ground_truth
                .iter()
                .map(|g| scorer.score(&p.tokens, &g.tokens))
                .fold(0.0, f64::max);
            sum += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

/// `(words/img, words/box)`: distinct predicted words per image, averaged
/// over images; distinct words across the captions each box takes part in,
/// averaged over boxes that appear in some caption.
pub fn vocab_stats(images: &[ImageEval]) -> (f64, f64) {
    if images.is_empty() {
        return (0.0, 0.0);
    }
    let mut img_sum = 0usize;
    let mut box_sum = 0usize;
    let mut n_box = 0usize;
    for im in images {
        let words: BTreeSet<&str> = im
            .predictions
            .iter()
            .flat_map(|p| p.tokens.iter().map(String::as_str))
            .collect();
        img_sum += words.len();
        let mut per_box: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        for p in &im.predictions {
            for id in [p.subject_id, p.object_id] {
                per_box
                    .entry(id)
                    .or_default()
                    .extend(p.tokens.iter().map(String::as_str));
            }
        }
        box_sum += per_box.values().map(BTreeSet::len).sum::<usize>();
        n_box += per_box.len();
    }
    let per_img = img_sum as f64 / images.len() as f64;
    let per_box = if n_box == 0 { 0.0 } else { box_sum as f64 / n_box as f64 };
    (per_img, per_box)
}

/// `(#Caption, Caption/Box)`: mean captions per image, and mean ratio of
/// captions to surviving boxes over images that have boxes.
pub fn caption_counts(images: &[ImageEval]) -> (f64, f64) {
    if images.is_empty() {
        return (0.0, 0.0);
    }
    let n_caption =
        images.iter().map(|im| im.predictions.len()).sum::<usize>() as f64 / images.len() as f64;
    let ratios: Vec<f64> = images
        .iter()
        .filter(|im| im.n_boxes > 0)
        .map(|im| im.predictions.len() as f64 / im.n_boxes as f64)
        .collect();
    let per_box = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    (n_caption, per_box)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub img_recall: f64,
    pub meteor: f64,
    pub words_per_img: f64,
    pub words_per_box: f64,
    pub n_caption: f64,
    pub caption_per_box: f64,
}

pub fn evaluate(
    images: &[ImageEval],
    thresholds: &EvalThresholds,
    scorer: &dyn CaptionScorer,
) -> Result<EvalReport> {
    let map = relational_map(images, thresholds, scorer)?;
    let img_recall = image_level_recall(images, &thresholds.language, scorer)?;
    let (words_per_img, words_per_box) = vocab_stats(images);
    let (n_caption, caption_per_box) = caption_counts(images);
    Ok(EvalReport {
        map,
        img_recall,
        meteor: average_meteor(images, scorer),
        words_per_img,
        words_per_box,
        n_caption,
        caption_per_box,
    })
}
