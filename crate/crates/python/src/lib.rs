//! Python bindings. Boxes cross the boundary as `(x, y, w, h)` tuples.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyIndexError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use relcap::data::{generate_world as gen_world, load_jsonl, save_jsonl, write_jsonl, Scene, WorldConfig};
use relcap::geometry::{self, BBox};
use relcap::metrics::meteor_lite;
use relcap::pipeline::{self, RunConfig};
use relcap::tasks::{build_caption_graph, emit_dot, retrieval_score as score_query};
use relcap::{checkpoint, Error};

type PyBox = (f64, f64, f64, f64);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Index(_) => PyIndexError::new_err(e.to_string()),
        Error::Lookup(_) => PyKeyError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: PyBox) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn tuple(b: &BBox) -> PyBox {
    (b.x, b.y, b.w, b.h)
}

#[pyfunction]
fn iou(a: PyBox, b: PyBox) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

#[pyfunction]
fn union_box(a: PyBox, b: PyBox) -> PyResult<PyBox> {
    Ok(tuple(&geometry::union_box(&bbox(a)?, &bbox(b)?)))
}

#[pyfunction]
fn geometric_feature(subject: PyBox, object: PyBox) -> PyResult<Vec<f64>> {
    Ok(geometry::geometric_feature(&bbox(subject)?, &bbox(object)?).to_vec())
}

#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold = 0.5))]
fn nms(boxes: Vec<PyBox>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let props = boxes
        .into_iter()
        .zip(scores)
        .map(|(b, s)| Ok((bbox(b)?, s)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::nms(&props, iou_threshold))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    relcap::text::tokenize(text)
}

#[pyfunction]
fn meteor(candidate: Vec<String>, reference: Vec<String>) -> f64 {
    meteor_lite(&candidate, &reference)
}

#[pyfunction]
fn pair_combinations(n: usize) -> Vec<(usize, usize)> {
    relcap::model::pair_combinations(n)
}

/// A list of synthetic scenes.
#[pyclass]
struct World {
    scenes: Vec<Scene>,
}

impl World {
    fn scene(&self, index: usize) -> PyResult<&Scene> {
        self.scenes.get(index).ok_or_else(|| {
            PyIndexError::new_err(format!("scene {index} out of range for {}", self.scenes.len()))
        })
    }
}

#[pymethods]
impl World {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(World {
            scenes: load_jsonl(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_jsonl(path, &self.scenes).map_err(err)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &self.scenes).map_err(|e| PyIOError::new_err(e.to_string()))?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn scene_ids(&self) -> Vec<String> {
        self.scenes.iter().map(|s| s.id.clone()).collect()
    }

    /// `(box, category, attributes)` per object of one scene.
    fn objects(&self, index: usize) -> PyResult<Vec<(PyBox, String, Vec<String>)>> {
        Ok(self
            .scene(index)?
            .objects
            .iter()
            .map(|o| (tuple(&o.bbox), o.category.clone(), o.attributes.clone()))
            .collect())
    }

    /// `(subject index, object index, caption)` per ground-truth record.
    fn captions(&self, index: usize) -> PyResult<Vec<(usize, usize, String)>> {
        Ok(self
            .scene(index)?
            .records
            .iter()
            .map(|r| (r.subject, r.object, r.tokens.join(" ")))
            .collect())
    }

    fn __len__(&self) -> usize {
        self.scenes.len()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, n_scenes, noise = None, feature_dim = None))]
fn generate_world(
    seed: u64,
    n_scenes: usize,
    noise: Option<f64>,
    feature_dim: Option<usize>,
) -> PyResult<World> {
    let mut cfg = WorldConfig::default();
    if let Some(v) = noise {
        cfg.noise = v;
    }
    if let Some(v) = feature_dim {
        cfg.feature_dim = v;
    }
    Ok(World {
        scenes: gen_world(seed, n_scenes, &cfg).map_err(err)?,
    })
}

/// Trained (or freshly initialized) model with its vocabulary.
#[pyclass]
struct Captioner {
    inner: pipeline::Captioner,
}

#[pymethods]
impl Captioner {
    /// Trains on `world`. `config` is a JSON run configuration; `epochs`
    /// overrides its epoch count.
    #[staticmethod]
    #[pyo3(signature = (world, config = None, epochs = None))]
    fn train(world: &World, config: Option<&str>, epochs: Option<usize>) -> PyResult<Self> {
        let mut run: RunConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(e) = epochs {
            run.epochs = e;
        }
        let inner = pipeline::train(&world.scenes, &run, |_| Ok(())).map_err(err)?;
        Ok(Captioner { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Captioner {
            inner: checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(path, &self.inner).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.run).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocab.words().to_vec()
    }

    /// `(score, subject box, object box, caption, tags)` per region pair,
    /// highest score first.
    #[allow(clippy::type_complexity)]
    fn caption(&self, world: &World, index: usize) -> PyResult<Vec<(f64, PyBox, PyBox, String, Vec<String>)>> {
        let caps = self.inner.caption(world.scene(index)?).map_err(err)?;
        Ok(caps
            .lines
            .into_iter()
            .map(|l| {
                (
                    l.score,
                    tuple(&l.subject_box),
                    tuple(&l.object_box),
                    l.words.join(" "),
                    l.tags.iter().map(|t| t.as_str().to_string()).collect(),
                )
            })
            .collect())
    }

    fn evaluate(&self, world: &World) -> PyResult<BTreeMap<String, f64>> {
        let r = self.inner.evaluate(&world.scenes, 1).map_err(err)?;
        Ok(BTreeMap::from([
            ("map".to_string(), r.map),
            ("img_recall".to_string(), r.img_recall),
            ("meteor".to_string(), r.meteor),
            ("words_per_img".to_string(), r.words_per_img),
            ("words_per_box".to_string(), r.words_per_box),
            ("n_caption".to_string(), r.n_caption),
            ("caption_per_box".to_string(), r.caption_per_box),
        ]))
    }

    fn graph_dot(&self, world: &World, index: usize) -> PyResult<String> {
        let g = build_caption_graph(world.scene(index)?, &self.inner).map_err(err)?;
        Ok(emit_dot(&g))
    }

    /// Mean per-token log-likelihood of `query` for ground-truth objects
    /// `subject` and `object` of one scene.
    fn retrieval_score(
        &self,
        world: &World,
        index: usize,
        subject: usize,
        object: usize,
        query: &str,
    ) -> PyResult<f64> {
        let scene = world.scene(index)?;
        let n = scene.objects.len();
        if subject >= n || object >= n {
            return Err(PyIndexError::new_err(format!("object index out of range for {n}")));
        }
        let pair = relcap::model::PairFeatures::from_scene(scene, subject, object);
        score_query(&self.inner, &pair, &relcap::text::tokenize(query)).map_err(err)
    }
}

#[pymodule]
fn relcap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(union_box, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_feature, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(pair_combinations, m)?)?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_class::<World>()?;
    m.add_class::<Captioner>()?;
    Ok(())
}
