//! Run configuration, training loop, and the trained-model bundle used for
//! captioning and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{evaluate, EvalReport, EvalThresholds, GroundTruth, ImageEval, MeteorLite, Prediction};
use crate::model::{
    caption_scene, total_loss, Bound, DetectionBatch, LossValues, ModelConfig, ModelParams,
    PairFeatures, TrainBatch,
};
use crate::tensor::{optimizer_step, OptimizerState, Tape};
use crate::text::{PosTag, TaggedCaption, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub min_count: usize,
    /// Random background proposals per scene per step.
    pub negatives: usize,
    /// Relative std-dev of the jitter applied to ground-truth proposals.
    pub jitter: f64,
    pub n_before_nms: usize,
    pub nms_iou: f64,
    /// Keep only the highest-scoring pairs per image when set.
    pub max_pairs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 1,
            lr: 5e-3,
            seed: 0,
            min_count: 1,
            negatives: 4,
            jitter: 0.05,
            n_before_nms: 50,
            nms_iou: 0.5,
            max_pairs: None,
        }
    }
}

impl RunConfig {
    /// Checks the run fields. The model itself is checked once the
    /// vocabulary size is known.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if self.n_before_nms == 0 {
            return Err(Error::Config("n_before_nms must be at least 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou must lie in (0, 1], got {}", self.nms_iou)));
        }
        if self.max_pairs == Some(0) {
            return Err(Error::Config("max_pairs must be at least 1 when set".into()));
        }
        Ok(())
    }

    /// Rejects datasets whose features do not match the model input width.
    pub fn check_dataset(&self, scenes: &[Scene]) -> Result<()> {
        for s in scenes {
            s.validate()?;
            if s.feature_dim() != self.model.feature_dim {
                return Err(Error::Config(format!(
                    "scene {} has {}-dim features, model expects {}",
                    s.id,
                    s.feature_dim(),
                    self.model.feature_dim
                )));
            }
        }
        Ok(())
    }
}

pub fn corpus_vocabulary(scenes: &[Scene], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(
        scenes.iter().flat_map(|s| s.records.iter().map(|r| r.tokens.as_slice())),
        min_count,
    )
}

struct SceneExamples {
    pairs: Vec<PairFeatures>,
    captions: Vec<TaggedCaption>,
}

fn scene_examples(scene: &Scene, vocab: &Vocabulary) -> Result<SceneExamples> {
    let mut pairs = Vec::with_capacity(scene.records.len());
    let mut captions = Vec::with_capacity(scene.records.len());
    for r in &scene.records {
        pairs.push(PairFeatures::from_scene(scene, r.subject, r.object));
        captions.push(TaggedCaption::new(vocab.encode(&r.tokens), r.tags.clone())?);
    }
    Ok(SceneExamples { pairs, captions })
}

/// Jittered ground-truth boxes carrying their object's feature, plus random
/// background boxes carrying the pooled feature of the region they cover.
pub fn sample_proposals(
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    jitter: f64,
    negatives: usize,
) -> Result<DetectionBatch> {
    let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let mut features = Vec::new();
    let mut boxes = Vec::new();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    for o in &scene.objects {
        let b = &o.bbox;
        let mut n = || std.sample(rng) * jitter;
        let jb = BBox::new(
            b.x + n() * b.w,
            b.y + n() * b.h,
            b.w * n().exp(),
            b.h * n().exp(),
        )?;
        boxes.push(jb);
        features.push(o.feature.clone());
    }
    for _ in 0..negatives {
        let w = rng.random_range(0.05..0.5);
        let h = rng.random_range(0.05..0.5);
        let x = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let y = rng.random_range(h / 2.0..1.0 - h / 2.0);
        let b = BBox::new(x, y, w, h)?;
        features.push(scene.pooled_region_feature(&b));
        boxes.push(b);
    }
    DetectionBatch::label(features, boxes, &gt)
}

/// Mean losses over the optimizer steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cap: f64,
    pub pos: f64,
    pub det: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub total: f64,
}

/// Parameters, vocabulary and the configuration they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Captioner {
    pub run: RunConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

/// One decoded pair in caller-facing form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaptionLine {
    pub subject: usize,
    pub object: usize,
    pub subject_box: BBox,
    pub object_box: BBox,
    pub words: Vec<String>,
    pub tags: Vec<PosTag>,
    pub score: f64,
}

/// Captions of one scene plus the number of proposals that survived NMS.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCaptions {
    pub n_boxes: usize,
    /// Descending score, ties in pair order.
    pub lines: Vec<CaptionLine>,
}

impl Captioner {
    /// Freshly initialized model over `vocab`; the model's vocabulary size is
    /// overwritten to match.
    pub fn init(mut run: RunConfig, vocab: Vocabulary) -> Result<Self> {
        run.validate()?;
        run.model.vocab_size = vocab.len();
        let params = ModelParams::init(&run.model, run.seed)?;
        Ok(Captioner { run, vocab, params })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.run.model
    }

    pub fn words(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.vocab.word(i).map(str::to_string)).collect()
    }

    pub fn caption(&self, scene: &Scene) -> Result<SceneCaptions> {
        if scene.feature_dim() != self.run.model.feature_dim {
            return Err(Error::Config(format!(
                "scene {} has {}-dim features, model expects {}",
                scene.id,
                scene.feature_dim(),
                self.run.model.feature_dim
            )));
        }
        let (props, pairs) = caption_scene(
            scene,
            &self.params,
            &self.run.model,
            self.run.n_before_nms,
            self.run.nms_iou,
        )?;
        let mut lines = pairs
            .into_iter()
            .map(|p| {
                Ok(CaptionLine {
                    subject: p.subject,
                    object: p.object,
                    subject_box: p.subject_box,
                    object_box: p.object_box,
                    words: self.words(&p.output.tokens)?,
                    tags: p.output.pos_tags,
                    score: p.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        lines.sort_by(|a, b| b.score.total_cmp(&a.score));
        if let Some(m) = self.run.max_pairs {
            lines.truncate(m);
        }
        Ok(SceneCaptions {
            n_boxes: props.len(),
            lines,
        })
    }

    pub fn predict(&self, scene: &Scene) -> Result<ImageEval> {
        let caps = self.caption(scene)?;
        let predictions = caps
            .lines
            .into_iter()
            .map(|l| Prediction {
                subject: l.subject_box,
                object: l.object_box,
                tokens: l.words,
                score: l.score,
                subject_id: l.subject,
                object_id: l.object,
            })
            .collect();
        let ground_truth = scene
            .records
            .iter()
            .map(|r| GroundTruth {
                subject: scene.objects[r.subject].bbox,
                object: scene.objects[r.object].bbox,
                tokens: r.tokens.clone(),
            })
            .collect();
        Ok(ImageEval {
            predictions,
            ground_truth,
            n_boxes: caps.n_boxes,
        })
    }

    /// Predictions for every scene, in scene order. `jobs > 1` spreads scenes
    /// over a thread pool.
    pub fn predict_all(&self, scenes: &[Scene], jobs: usize) -> Result<Vec<ImageEval>> {
        par_map(jobs, scenes, |s| self.predict(s))
    }

    pub fn evaluate(&self, scenes: &[Scene], jobs: usize) -> Result<EvalReport> {
        let images = self.predict_all(scenes, jobs)?;
        evaluate(&images, &EvalThresholds::default(), &MeteorLite)
    }
}

/// Order-preserving map, parallel when `jobs > 1`.
pub fn par_map<T, U, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Trains from scratch. `on_epoch` sees every epoch's mean losses as soon as
/// the epoch ends; an error from it aborts training.
pub fn train<F>(scenes: &[Scene], run: &RunConfig, mut on_epoch: F) -> Result<Captioner>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    run.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    run.check_dataset(scenes)?;
    let vocab = corpus_vocabulary(scenes, run.min_count)?;
    let mut model = Captioner::init(run.clone(), vocab)?;
    let examples = scenes
        .iter()
        .map(|s| scene_examples(s, &model.vocab))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptimizerState::new(run.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        let mut steps = 0usize;
        for chunk in order.chunks(run.batch_size) {
            let mut batch = TrainBatch::default();
            for &i in chunk {
                batch.pairs.extend_from_slice(&examples[i].pairs);
                batch.captions.extend_from_slice(&examples[i].captions);
                batch
                    .detection
                    .extend(sample_proposals(&scenes[i], &mut rng, run.jitter, run.negatives)?);
            }
            let lv = train_step(&mut model.params, &run.model, &batch, &mut opt)?;
            sum.cap += lv.cap;
            sum.pos += lv.pos;
            sum.det += lv.det;
            sum.bbox += lv.bbox;
            sum.total += lv.total;
            steps += 1;
        }
        let n = steps as f64;
        let log = EpochLog {
            epoch,
            cap: sum.cap / n,
            pos: sum.pos / n,
            det: sum.det / n,
            bbox: sum.bbox / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch} cap={:.4} pos={:.4} det={:.4} box={:.4} total={:.4}",
            log.cap,
            log.pos,
            log.det,
            log.bbox,
            log.total
        );
        on_epoch(&log)?;
    }
    Ok(model)
}

/// One forward/backward/update on `batch`; returns the losses before the
/// update.
pub fn train_step(
    params: &mut ModelParams,
    config: &ModelConfig,
    batch: &TrainBatch,
    opt: &mut OptimizerState,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let lv = total_loss(&mut tape, &bound, config, batch)?;
    let values = lv.values(&tape);
    let mut grads = tape.backward(lv.total)?;
    let grads = bound.gradients(params, &mut grads);
    optimizer_step(params.tensors_mut(), &grads, opt)?;
    if !params.is_finite() {
        return Err(Error::NonFinite { op: "optimizer_step" });
    }
    Ok(values)
}

/// Training examples of one scene, for callers assembling their own batches.
pub fn scene_batch(scene: &Scene, vocab: &Vocabulary) -> Result<TrainBatch> {
    let ex = scene_examples(scene, vocab)?;
    Ok(TrainBatch {
        pairs: ex.pairs,
        captions: ex.captions,
        detection: DetectionBatch::default(),
    })
}
