//! Synthetic scene world, attribute augmentation and JSONL dataset I/O.
//!
//! The world stands in for a detector backbone: every object carries a flat
//! feature vector that linearly encodes its category, attribute and box plus
//! Gaussian noise, and every ordered object pair carries a caption whose
//! predicate follows from the two boxes alone. Captions are therefore
//! recoverable from features and geometry.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::text::{tags_monotone, PosTag};

pub const NOUNS: [&str; 12] = [
    "man", "woman", "dog", "cat", "car", "tree", "table", "cup", "ball", "chair", "lamp", "book",
];
pub const ATTRIBUTES: [&str; 8] = [
    "red", "blue", "green", "small", "large", "wooden", "white", "black",
];

/// Length of the unprojected feature: category one-hot, attribute one-hot,
/// box coordinates.
pub const RAW_FEATURE_DIM: usize = NOUNS.len() + ATTRIBUTES.len() + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
    pub attributes: Vec<String>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    #[serde(rename = "s")]
    pub subject: usize,
    #[serde(rename = "o")]
    pub object: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<SceneObject>,
    pub records: Vec<RelationRecord>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::Contract(format!(
                "scene {} has {} objects, need at least 2",
                self.id,
                self.objects.len()
            )));
        }
        let dim = self.objects[0].feature.len();
        for (i, o) in self.objects.iter().enumerate() {
            if o.feature.len() != dim || dim == 0 {
                return Err(Error::Contract(format!(
                    "scene {} object {i} feature has {} dims, expected {dim}",
                    self.id,
                    o.feature.len()
                )));
            }
            if o.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "scene {} object {i} has a non-finite feature",
                    self.id
                )));
            }
        }
        let n = self.objects.len();
        for (k, r) in self.records.iter().enumerate() {
            if r.subject >= n || r.object >= n || r.subject == r.object {
                return Err(Error::Contract(format!(
                    "scene {} record {k} references objects ({}, {}) of {n}",
                    self.id, r.subject, r.object
                )));
            }
            if r.tokens.len() != r.tags.len() || r.tokens.is_empty() {
                return Err(Error::Contract(format!(
                    "scene {} record {k} has {} tokens and {} tags",
                    self.id,
                    r.tokens.len(),
                    r.tags.len()
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.objects.first().map_or(0, |o| o.feature.len())
    }

    /// Feature of an arbitrary region: every object's feature weighted by the
    /// fraction of that object covered by `region`.
    pub fn pooled_region_feature(&self, region: &BBox) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        for o in &self.objects {
            let frac = o.bbox.intersection(region) / o.bbox.area();
            if frac > 0.0 {
                for (acc, &f) in out.iter_mut().zip(&o.feature) {
                    *acc += frac * f;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub noise: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Seed of the raw-to-feature projection. Shared across datasets so that
    /// separately generated splits live in the same feature space.
    pub projection_seed: u64,
    /// Placement rejects a box whose IoU with an earlier box exceeds this.
    pub max_overlap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            feature_dim: 64,
            noise: 0.05,
            objects_min: 2,
            objects_max: 6,
            projection_seed: 0x5eed_f00d,
            max_overlap: 0.45,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.objects_min < 2 || self.objects_max < self.objects_min {
            return Err(Error::Config(format!(
                "object count range {}..={} must satisfy 2 <= min <= max",
                self.objects_min, self.objects_max
            )));
        }
        if self.objects_max > 12 {
            return Err(Error::Config("objects_max above 12 cannot be placed".into()));
        }
        if !(self.max_overlap > 0.0 && self.max_overlap <= 1.0) {
            return Err(Error::Config("max_overlap must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn projection(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        let normal = Normal::new(0.0, 1.0 / (RAW_FEATURE_DIM as f64).sqrt()).unwrap();
        (0..RAW_FEATURE_DIM * self.feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect()
    }
}

/// Predicate words for a subject/object pair, from the boxes alone.
///
/// The subject strictly inside the object gives `inside`; otherwise IoU above
/// 0.3 gives `overlapping`; otherwise the dominant axis of the center offset
/// decides (horizontal wins ties). Image coordinates: y grows downward.
pub fn derive_predicate(subject: &BBox, object: &BBox) -> Vec<&'static str> {
    let strictly_inside = subject.x0() > object.x0()
        && subject.x1() < object.x1()
        && subject.y0() > object.y0()
        && subject.y1() < object.y1();
    if strictly_inside {
        return vec!["inside"];
    }
    if iou(subject, object) > 0.3 {
        return vec!["overlapping"];
    }
    let dx = object.x - subject.x;
    let dy = object.y - subject.y;
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            vec!["left", "of"]
        } else {
            vec!["right", "of"]
        }
    } else if dy > 0.0 {
        vec!["above"]
    } else {
        vec!["below"]
    }
}

fn noun_phrase(o: &SceneObject) -> Vec<String> {
    let mut words = o.attributes.clone();
    words.push(o.category.clone());
    words
}

/// `[attr] noun pred [attr] noun` with matching POS tags.
pub fn relation_caption(subject: &SceneObject, object: &SceneObject) -> (Vec<String>, Vec<PosTag>) {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for w in noun_phrase(subject) {
        tokens.push(w);
        tags.push(PosTag::Subj);
    }
    for w in derive_predicate(&subject.bbox, &object.bbox) {
        tokens.push(w.to_string());
        tags.push(PosTag::Pred);
    }
    for w in noun_phrase(object) {
        tokens.push(w);
        tags.push(PosTag::Obj);
    }
    (tokens, tags)
}

/// Feature vector for a category/attribute/box triple under `config`.
pub fn object_feature(
    config: &WorldConfig,
    projection: &[f64],
    category: usize,
    attribute: Option<usize>,
    bbox: &BBox,
    noise: &mut dyn FnMut() -> f64,
) -> Vec<f64> {
    let mut raw = [0.0; RAW_FEATURE_DIM];
    raw[category] = 1.0;
    if let Some(a) = attribute {
        raw[NOUNS.len() + a] = 1.0;
    }
    raw[NOUNS.len() + ATTRIBUTES.len()..].copy_from_slice(&bbox.to_array());
    for v in raw.iter_mut() {
        *v += noise();
    }
    let f = config.feature_dim;
    let mut out = vec![0.0; f];
    for (i, &r) in raw.iter().enumerate() {
        for (o, &p) in out.iter_mut().zip(&projection[i * f..(i + 1) * f]) {
            *o += r * p;
        }
    }
    out
}

pub fn generate_world(seed: u64, n_scenes: usize, config: &WorldConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    let projection = config.projection();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut scenes = Vec::with_capacity(n_scenes);
    for s in 0..n_scenes {
        let target = rng.random_range(config.objects_min..=config.objects_max);
        let mut boxes: Vec<BBox> = Vec::with_capacity(target);
        let mut attempts = 0;
        while boxes.len() < target && attempts < 1000 {
            attempts += 1;
            let w = rng.random_range(0.1..0.4);
            let h = rng.random_range(0.1..0.4);
            let x = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let y = rng.random_range(h / 2.0..1.0 - h / 2.0);
            let b = BBox::new(x, y, w, h)?;
            if boxes.iter().all(|o| iou(o, &b) <= config.max_overlap) {
                boxes.push(b);
            }
        }
        let mut objects = Vec::with_capacity(boxes.len());
        for bbox in boxes {
            let category = rng.random_range(0..NOUNS.len());
            let attribute = if rng.random_bool(0.5) {
                Some(rng.random_range(0..ATTRIBUTES.len()))
            } else {
                None
            };
            let mut draw = || {
                if config.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                }
            };
            let feature = object_feature(config, &projection, category, attribute, &bbox, &mut draw);
            objects.push(SceneObject {
                bbox,
                category: NOUNS[category].to_string(),
                attributes: attribute.map(|a| ATTRIBUTES[a].to_string()).into_iter().collect(),
                feature,
            });
        }
        let mut records = Vec::new();
        for i in 0..objects.len() {
            for j in 0..objects.len() {
                if i == j {
                    continue;
                }
                let (tokens, tags) = relation_caption(&objects[i], &objects[j]);
                debug_assert!(tags_monotone(&tags));
                records.push(RelationRecord {
                    subject: i,
                    object: j,
                    tokens,
                    tags,
                });
            }
        }
        scenes.push(Scene {
            id: format!("scene-{s:05}"),
            objects,
            records,
        });
    }
    Ok(scenes)
}

/// Attribute annotation of a region, as found in region-attribute datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub noun: String,
    pub attributes: Vec<String>,
}

/// A relationship label with explicit subject/object boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxedRelation {
    pub subject_box: BBox,
    pub object_box: BBox,
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
}

/// Prepends matching attribute words to the subject and object spans.
///
/// An attribute record matches an endpoint when its noun equals the
/// endpoint's head noun (last word of the span) and its box overlaps the
/// endpoint box with IoU at least `iou_threshold`. The best-overlapping
/// record wins; earlier records win ties.
pub fn attribute_augment(
    relations: &[BoxedRelation],
    attributes: &[AttributeRecord],
    iou_threshold: f64,
) -> Result<Vec<BoxedRelation>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "attribute IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    Ok(relations
        .iter()
        .map(|rel| {
            let mut out = rel.clone();
            for (tag, bbox) in [(PosTag::Obj, &rel.object_box), (PosTag::Subj, &rel.subject_box)] {
                let Some(end) = out.tags.iter().rposition(|&t| t == tag) else {
                    continue;
                };
                let start = out.tags.iter().position(|&t| t == tag).unwrap();
                let head = &out.tokens[end];
                let mut best: Option<(&AttributeRecord, f64)> = None;
                for a in attributes.iter().filter(|a| &a.noun == head) {
                    let v = iou(&a.bbox, bbox);
                    if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((a, v));
                    }
                }
                if let Some((a, _)) = best {
                    let n = a.attributes.len();
                    out.tokens.splice(start..start, a.attributes.iter().cloned());
                    out.tags.splice(start..start, std::iter::repeat_n(tag, n));
                }
            }
            out
        })
        .collect())
}

pub fn write_jsonl<W: Write>(mut w: W, scenes: &[Scene]) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_jsonl(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), scenes).map_err(|e| Error::io(path, e))
}

/// Parses one scene per non-blank line; `origin` labels errors.
pub fn read_jsonl<R: BufRead>(reader: R, origin: &str) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        scene.validate().map_err(|e| parse_err(e.to_string()))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn jsonl(scenes: &[Scene]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, scenes).unwrap();
        buf
    }

    #[test]
    fn world_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_world(7, 5, &cfg).unwrap();
        let b = generate_world(7, 5, &cfg).unwrap();
        assert_eq!(jsonl(&a), jsonl(&b));
        let c = generate_world(8, 5, &cfg).unwrap();
        assert_ne!(jsonl(&a), jsonl(&c));
    }

    #[test]
    fn world_record_counts_and_tags() {
        let scenes = generate_world(3, 30, &WorldConfig::default()).unwrap();
        for s in &scenes {
            let k = s.objects.len();
            assert!((2..=6).contains(&k));
            assert_eq!(s.records.len(), k * (k - 1));
            s.validate().unwrap();
            for r in &s.records {
                assert!(tags_monotone(&r.tags));
                for t in PosTag::ALL {
                    assert!(r.tags.contains(&t));
                }
            }
            for o in &s.objects {
                assert!(o.bbox.x0() >= 0.0 && o.bbox.x1() <= 1.0);
                assert!(o.bbox.y0() >= 0.0 && o.bbox.y1() <= 1.0);
                assert_eq!(o.feature.len(), 64);
            }
        }
    }

    #[test]
    fn zero_noise_features_are_exact() {
        let cfg = WorldConfig {
            noise: 0.0,
            ..WorldConfig::default()
        };
        let proj = cfg.projection();
        let scenes = generate_world(11, 4, &cfg).unwrap();
        for o in scenes.iter().flat_map(|s| &s.objects) {
            let cat = NOUNS.iter().position(|n| *n == o.category).unwrap();
            let attr = o
                .attributes
                .first()
                .map(|a| ATTRIBUTES.iter().position(|x| x == a).unwrap());
            let expect = object_feature(&cfg, &proj, cat, attr, &o.bbox, &mut || 0.0);
            assert_eq!(o.feature, expect);
        }
    }

    #[test]
    fn invalid_world_config() {
        assert!(generate_world(1, 0, &WorldConfig::default()).is_err());
        let bad = WorldConfig {
            objects_min: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(1, 1, &bad), Err(Error::Config(_))));
        let bad = WorldConfig {
            noise: -1.0,
            ..WorldConfig::default()
        };
        assert!(generate_world(1, 1, &bad).is_err());
    }

    #[test]
    fn predicate_rules() {
        let outer = b(0.5, 0.5, 0.6, 0.6);
        let inner = b(0.5, 0.5, 0.2, 0.2);
        assert_eq!(derive_predicate(&inner, &outer), vec!["inside"]);
        assert_ne!(derive_predicate(&outer, &inner), vec!["inside"]);
        assert_eq!(
            derive_predicate(&b(0.2, 0.5, 0.1, 0.1), &b(0.8, 0.5, 0.1, 0.1)),
            vec!["left", "of"]
        );
        assert_eq!(
            derive_predicate(&b(0.8, 0.5, 0.1, 0.1), &b(0.2, 0.5, 0.1, 0.1)),
            vec!["right", "of"]
        );
        assert_eq!(
            derive_predicate(&b(0.5, 0.2, 0.1, 0.1), &b(0.5, 0.8, 0.1, 0.1)),
            vec!["above"]
        );
        assert_eq!(
            derive_predicate(&b(0.5, 0.8, 0.1, 0.1), &b(0.5, 0.2, 0.1, 0.1)),
            vec!["below"]
        );
        // equal offsets on both axes go horizontal
        assert_eq!(
            derive_predicate(&b(0.2, 0.2, 0.1, 0.1), &b(0.6, 0.6, 0.1, 0.1)),
            vec!["left", "of"]
        );
        assert_eq!(derive_predicate(&outer, &outer), vec!["overlapping"]);
    }

    fn rel(tokens: &str, tags: &[u8], s: BBox, o: BBox) -> BoxedRelation {
        BoxedRelation {
            subject_box: s,
            object_box: o,
            tokens: tokens.split_whitespace().map(String::from).collect(),
            tags: tags.iter().map(|&t| PosTag::try_from(t).unwrap()).collect(),
        }
    }

    fn attr(word: &str, noun: &str, bbox: BBox) -> AttributeRecord {
        AttributeRecord {
            bbox,
            noun: noun.into(),
            attributes: vec![word.into()],
        }
    }

    #[test]
    fn augment_exact_box_match() {
        let cup = b(0.3, 0.3, 0.2, 0.2);
        let table = b(0.5, 0.7, 0.6, 0.3);
        let r = rel("cup on table", &[0, 1, 2], cup, table);
        let out = attribute_augment(&[r], &[attr("red", "cup", cup)], 0.5).unwrap();
        assert_eq!(out[0].tokens.join(" "), "red cup on table");
        assert_eq!(
            out[0].tags,
            vec![PosTag::Subj, PosTag::Subj, PosTag::Pred, PosTag::Obj]
        );

        let out = attribute_augment(
            &[rel("cup on table", &[0, 1, 2], cup, table)],
            &[attr("wooden", "table", table)],
            0.5,
        )
        .unwrap();
        assert_eq!(out[0].tokens.join(" "), "cup on wooden table");
        assert_eq!(out[0].tags[2], PosTag::Obj);
    }

    #[test]
    fn augment_noun_mismatch_and_argmax() {
        let cup = b(0.3, 0.3, 0.2, 0.2);
        let table = b(0.5, 0.7, 0.6, 0.3);
        let r = rel("cup on table", &[0, 1, 2], cup, table);
        let out = attribute_augment(
            std::slice::from_ref(&r),
            &[attr("red", "mug", cup)],
            0.5,
        )
        .unwrap();
        assert_eq!(out[0], r);

        // IoU 0.9 vs 0.6 against the cup box
        let near = b(0.3, 0.3, 0.2, 0.2 * 0.9);
        let far = b(0.3, 0.3, 0.2, 0.2 * 0.6);
        assert!((iou(&near, &cup) - 0.9).abs() < 1e-12);
        assert!((iou(&far, &cup) - 0.6).abs() < 1e-12);
        let out = attribute_augment(
            &[r],
            &[attr("blue", "cup", far), attr("red", "cup", near)],
            0.5,
        )
        .unwrap();
        assert_eq!(out[0].tokens.join(" "), "red cup on table");
    }

    #[test]
    fn augment_keeps_predicate_and_lengths() {
        let scenes = generate_world(5, 10, &WorldConfig::default()).unwrap();
        for s in &scenes {
            let rels: Vec<BoxedRelation> = s
                .records
                .iter()
                .map(|r| BoxedRelation {
                    subject_box: s.objects[r.subject].bbox,
                    object_box: s.objects[r.object].bbox,
                    tokens: r.tokens.clone(),
                    tags: r.tags.clone(),
                })
                .collect();
            let attrs: Vec<AttributeRecord> = s
                .objects
                .iter()
                .map(|o| attr("shiny", &o.category, o.bbox))
                .collect();
            let out = attribute_augment(&rels, &attrs, 0.5).unwrap();
            for (before, after) in rels.iter().zip(&out) {
                assert_eq!(after.tokens.len(), after.tags.len());
                let pred = |r: &BoxedRelation| -> Vec<String> {
                    r.tokens
                        .iter()
                        .zip(&r.tags)
                        .filter(|(_, &t)| t == PosTag::Pred)
                        .map(|(w, _)| w.clone())
                        .collect()
                };
                assert_eq!(pred(before), pred(after));
                assert!(tags_monotone(&after.tags));
                assert_eq!(after.tokens.len(), before.tokens.len() + 2);
            }
        }
        assert!(attribute_augment(&[], &[], 0.0).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let scenes = generate_world(2, 3, &WorldConfig::default()).unwrap();
        let buf = jsonl(&scenes);
        let back = read_jsonl(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, scenes);

        assert!(read_jsonl(&b""[..], "mem").unwrap().is_empty());

        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        let broken = lines.join("\n");
        match read_jsonl(broken.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_schema_field_names() {
        let scenes = generate_world(2, 1, &WorldConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&scenes[0]).unwrap();
        assert!(v["objects"][0]["box"].is_array());
        assert!(v["records"][0]["s"].is_number());
        assert!(v["records"][0]["o"].is_number());
        assert!(v["records"][0]["tags"][0].is_number());
    }

    #[test]
    fn pooled_feature_of_object_box() {
        let s = &generate_world(9, 1, &WorldConfig::default()).unwrap()[0];
        let far = BBox::new(5.0, 5.0, 0.1, 0.1).unwrap();
        assert!(s.pooled_region_feature(&far).iter().all(|&v| v == 0.0));
    }
}
