//! Region encoders, the combination layer, the triple-stream LSTM decoder with
//! word and POS heads, the detection head, and the weighted training loss.
//!
//! Everything here is batched over rows: a batch of `B` subject/object pairs
//! becomes `B×·` matrices on the tape. Parameters live in a [`ModelParams`]
//! map and are bound onto a [`Tape`] once per forward pass via [`Bound`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{geometric_feature, iou, nms, union_box, BBox, GEOMETRIC_FEATURE_DIM};
use crate::tensor::{argmax, log_softmax, sigmoid, Tape, Tensor, TensorMap, Var};
use crate::text::{PosTag, TaggedCaption, EOS, PAD, SOS};

/// How the subject, object and union codes reach the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionMode {
    /// Three LSTMs (subject, union, object) fused after recurrence.
    TripleStream,
    /// One LSTM over subject, object, union and coordinate codes.
    EarlyFusion,
    UnionOnly,
    SubjObj,
    SubjObjCoord,
    SubjObjUnion,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::TripleStream,
        FusionMode::EarlyFusion,
        FusionMode::UnionOnly,
        FusionMode::SubjObj,
        FusionMode::SubjObjCoord,
        FusionMode::SubjObjUnion,
    ];

    pub fn is_triple(self) -> bool {
        self == FusionMode::TripleStream
    }

    fn uses_regions(self) -> bool {
        self != FusionMode::UnionOnly
    }

    fn uses_union(self) -> bool {
        matches!(
            self,
            FusionMode::TripleStream
                | FusionMode::EarlyFusion
                | FusionMode::UnionOnly
                | FusionMode::SubjObjUnion
        )
    }

    fn uses_coord(self) -> bool {
        matches!(self, FusionMode::EarlyFusion | FusionMode::SubjObjCoord)
    }

    fn uses_geo(self) -> bool {
        self.uses_union() || self.uses_coord()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::TripleStream => "TRIPLE_STREAM",
            FusionMode::EarlyFusion => "EARLY_FUSION",
            FusionMode::UnionOnly => "UNION_ONLY",
            FusionMode::SubjObj => "SUBJ_OBJ",
            FusionMode::SubjObjCoord => "SUBJ_OBJ_COORD",
            FusionMode::SubjObjUnion => "SUBJ_OBJ_UNION",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Region-code width.
    pub region_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Width of the projected geometric feature.
    pub geo_dim: usize,
    pub vocab_size: usize,
    pub fusion: FusionMode,
    pub use_pos_loss: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            region_dim: 64,
            hidden: 128,
            embed: 64,
            geo_dim: 64,
            vocab_size: 0,
            fusion: FusionMode::TripleStream,
            use_pos_loss: true,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            max_caption_len: 16,
        }
    }
}

impl ModelConfig {
    /// Full-width layout: 512-wide region codes and LSTM states.
    pub fn paper() -> Self {
        ModelConfig {
            region_dim: 512,
            hidden: 512,
            embed: 512,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("region_dim", self.region_dim),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("geo_dim", self.geo_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved ids",
                self.vocab_size
            )));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Width of the code fed to a single early-fusion LSTM.
    pub fn early_code_width(&self) -> usize {
        let d = self.region_dim;
        match self.fusion {
            FusionMode::TripleStream => 0,
            FusionMode::UnionOnly => d,
            FusionMode::SubjObj => 2 * d,
            FusionMode::SubjObjCoord => 2 * d + self.geo_dim,
            FusionMode::SubjObjUnion => 3 * d,
            FusionMode::EarlyFusion => 3 * d + self.geo_dim,
        }
    }

    fn fused_width(&self) -> usize {
        if self.fusion.is_triple() {
            3 * self.hidden
        } else {
            self.hidden
        }
    }

    /// `(name, stream code width)` for every LSTM.
    fn streams(&self) -> Vec<(&'static str, usize)> {
        if self.fusion.is_triple() {
            vec![
                ("lstm.subj", self.region_dim),
                ("lstm.union", self.region_dim),
                ("lstm.obj", self.region_dim),
            ]
        } else {
            vec![("lstm.fused", self.early_code_width())]
        }
    }

    /// Every parameter tensor with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, d, h, e, g, v) = (
            self.feature_dim,
            self.region_dim,
            self.hidden,
            self.embed,
            self.geo_dim,
            self.vocab_size,
        );
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut lin = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        if self.fusion.uses_regions() {
            lin("enc.fc1", f, d);
            lin("enc.subj.fc2", d, d);
            lin("enc.obj.fc2", d, d);
        }
        if self.fusion.uses_geo() {
            lin("geo.fc", GEOMETRIC_FEATURE_DIM, g);
        }
        if self.fusion.uses_union() {
            lin("union.feat", f, d);
            lin("union.fc", d + g, d);
        }
        for (name, width) in self.streams() {
            lin(name, e + width + h, 4 * h);
        }
        lin("head.word", self.fused_width(), v);
        lin("head.pos", self.fused_width(), PosTag::COUNT);
        lin("det", f, 5);
        out.push(("embed".into(), vec![v, e]));
        out
    }
}

/// Named parameter tensors. The subject and object encoders share the single
/// `enc.fc1` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: TensorMap,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Uniform `±1/√fan_in` weights, zero biases except a unit LSTM forget
    /// gate bias, small uniform embeddings.
    ///
    /// Each tensor draws from its own stream keyed by name, so a tensor with
    /// the same name and shape starts identical under every fusion mode.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut tensors = TensorMap::new();
        for (name, shape) in config.param_shapes() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&name));
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "embed" {
                (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
            } else if name.ends_with(".w") {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.starts_with("lstm.") {
                (0..n).map(|j| if (h..2 * h).contains(&j) { 1.0 } else { 0.0 }).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorMap {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> TensorMap {
        self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// FNV-1a of a parameter name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every parameter; `trainable` decides whether gradients flow.
    pub fn new(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    /// Parameter gradients by name after [`Tape::backward`]. Parameters the
    /// loss does not reach get zero tensors.
    pub fn gradients(
        &self,
        params: &ModelParams,
        grads: &mut crate::tensor::Gradients,
    ) -> TensorMap {
        self.vars
            .iter()
            .map(|(n, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(params.tensors[n].shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Every ordered `(subject, object)` pair of distinct indices, lexicographic.
pub fn pair_combinations(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect()
}

/// Inputs for one subject/object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
    pub union: Vec<f64>,
    pub geometry: [f64; GEOMETRIC_FEATURE_DIM],
}

impl PairFeatures {
    /// Pair of regions in `scene` with the given features and boxes. The union
    /// feature is pooled from the scene over the union box.
    pub fn from_regions(
        scene: &Scene,
        subject: (&[f64], &BBox),
        object: (&[f64], &BBox),
    ) -> Self {
        let ub = union_box(subject.1, object.1);
        PairFeatures {
            subject: subject.0.to_vec(),
            object: object.0.to_vec(),
            union: scene.pooled_region_feature(&ub),
            geometry: geometric_feature(subject.1, object.1),
        }
    }

    /// Ground-truth objects `s` and `o` of `scene`.
    pub fn from_scene(scene: &Scene, s: usize, o: usize) -> Self {
        let (so, oo) = (&scene.objects[s], &scene.objects[o]);
        PairFeatures::from_regions(scene, (&so.feature, &so.bbox), (&oo.feature, &oo.bbox))
    }
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != width {
            return Err(Error::Shape(format!(
                "feature row has {} values, model expects {width}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Tensor::matrix(n, width, data)
}

/// Region codes for a batch of pairs. Absent entries are not used by the
/// configured fusion mode.
#[derive(Clone, Copy, Debug)]
pub struct PairCodes {
    pub subject: Option<Var>,
    pub object: Option<Var>,
    pub union: Option<Var>,
    pub coord: Option<Var>,
}

/// Subject and object region codes: a shared first FC layer with ReLU, then
/// a stream-specific second FC layer.
pub fn encode_regions(
    tape: &mut Tape,
    bound: &Bound,
    subject_feat: Var,
    object_feat: Var,
) -> Result<(Var, Var)> {
    let hs = linear(tape, bound, "enc.fc1", subject_feat)?;
    let hs = tape.relu(hs)?;
    let ho = linear(tape, bound, "enc.fc1", object_feat)?;
    let ho = tape.relu(ho)?;
    let s = linear(tape, bound, "enc.subj.fc2", hs)?;
    let o = linear(tape, bound, "enc.obj.fc2", ho)?;
    Ok((s, o))
}

/// Projected geometric feature, `geo_dim` wide.
pub fn encode_geometry(tape: &mut Tape, bound: &Bound, geometry: Var) -> Result<Var> {
    let g = linear(tape, bound, "geo.fc", geometry)?;
    tape.relu(g)
}

/// Union code: the union feature and the projected geometric feature are
/// concatenated (`D + geo_dim` wide) and reduced back to `D`.
pub fn encode_union(tape: &mut Tape, bound: &Bound, union_feat: Var, geometry: Var) -> Result<Var> {
    let u = linear(tape, bound, "union.feat", union_feat)?;
    let u = tape.relu(u)?;
    let g = encode_geometry(tape, bound, geometry)?;
    let cat = tape.concat(&[u, g])?;
    linear(tape, bound, "union.fc", cat)
}

pub fn encode_pairs(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    pairs: &[PairFeatures],
) -> Result<PairCodes> {
    let f = config.feature_dim;
    let mode = config.fusion;
    let mut codes = PairCodes {
        subject: None,
        object: None,
        union: None,
        coord: None,
    };
    if mode.uses_regions() {
        let s = tape.constant(stack_rows(pairs.iter().map(|p| p.subject.as_slice()), f)?);
        let o = tape.constant(stack_rows(pairs.iter().map(|p| p.object.as_slice()), f)?);
        let (cs, co) = encode_regions(tape, bound, s, o)?;
        codes.subject = Some(cs);
        codes.object = Some(co);
    }
    let geo = if mode.uses_geo() {
        Some(tape.constant(stack_rows(
            pairs.iter().map(|p| p.geometry.as_slice()),
            GEOMETRIC_FEATURE_DIM,
        )?))
    } else {
        None
    };
    if mode.uses_union() {
        let u = tape.constant(stack_rows(pairs.iter().map(|p| p.union.as_slice()), f)?);
        codes.union = Some(encode_union(tape, bound, u, geo.unwrap())?);
    }
    if mode.uses_coord() {
        codes.coord = Some(encode_geometry(tape, bound, geo.unwrap())?);
    }
    Ok(codes)
}

/// Per-LSTM input codes in stream order.
pub fn stream_codes(tape: &mut Tape, config: &ModelConfig, codes: &PairCodes) -> Result<Vec<Var>> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Config(format!("{what} code missing for {:?}", config.fusion)))
    };
    Ok(match config.fusion {
        FusionMode::TripleStream => vec![
            need(codes.subject, "subject")?,
            need(codes.union, "union")?,
            need(codes.object, "object")?,
        ],
        FusionMode::UnionOnly => vec![need(codes.union, "union")?],
        FusionMode::SubjObj => {
            vec![tape.concat(&[need(codes.subject, "subject")?, need(codes.object, "object")?])?]
        }
        FusionMode::SubjObjCoord => vec![tape.concat(&[
            need(codes.subject, "subject")?,
            need(codes.object, "object")?,
            need(codes.coord, "coord")?,
        ])?],
        FusionMode::SubjObjUnion => vec![tape.concat(&[
            need(codes.subject, "subject")?,
            need(codes.object, "object")?,
            need(codes.union, "union")?,
        ])?],
        FusionMode::EarlyFusion => vec![tape.concat(&[
            need(codes.subject, "subject")?,
            need(codes.object, "object")?,
            need(codes.union, "union")?,
            need(codes.coord, "coord")?,
        ])?],
    })
}

/// Hidden and cell state of every LSTM, batched over rows.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl DecoderState {
    pub fn zeros(tape: &mut Tape, config: &ModelConfig, rows: usize) -> Self {
        let n = config.streams().len();
        let mut h = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            h.push(tape.constant(Tensor::zeros(&[rows, config.hidden])));
            c.push(tape.constant(Tensor::zeros(&[rows, config.hidden])));
        }
        DecoderState { h, c }
    }
}

pub struct StepOutput {
    pub word_logits: Var,
    pub pos_logits: Var,
    pub state: DecoderState,
}

fn lstm_cell(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    hidden: usize,
    input: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let x = tape.concat(&[input, h])?;
    let z = linear(tape, bound, name, x)?;
    let i = tape.slice(z, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice(z, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice(z, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g)?;
    let o = tape.slice(z, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2)?;
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

fn step_any(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    words: &[usize],
    state: &DecoderState,
    codes: &[Var],
) -> Result<StepOutput> {
    let streams = config.streams();
    if codes.len() != streams.len() || state.h.len() != streams.len() {
        return Err(Error::Shape(format!(
            "{} streams but {} codes and {} states",
            streams.len(),
            codes.len(),
            state.h.len()
        )));
    }
    let embed = bound.var("embed")?;
    let x = tape.gather(embed, words)?;
    let mut h = Vec::with_capacity(streams.len());
    let mut c = Vec::with_capacity(streams.len());
    for (k, (name, _)) in streams.iter().enumerate() {
        let input = tape.concat(&[x, codes[k]])?;
        let (hk, ck) = lstm_cell(tape, bound, name, config.hidden, input, state.h[k], state.c[k])?;
        h.push(hk);
        c.push(ck);
    }
    let fused = if h.len() == 1 { h[0] } else { tape.concat(&h)? };
    let word_logits = linear(tape, bound, "head.word", fused)?;
    let pos_logits = linear(tape, bound, "head.pos", fused)?;
    Ok(StepOutput {
        word_logits,
        pos_logits,
        state: DecoderState { h, c },
    })
}

/// One step of the triple-stream decoder. Every stream sees the previous
/// word's embedding next to its own code; the word and POS heads read the
/// concatenated hidden states `[h_subj, h_union, h_obj]`.
pub fn decode_step(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    words: &[usize],
    state: &DecoderState,
    codes: &[Var],
) -> Result<StepOutput> {
    if !config.fusion.is_triple() {
        return Err(Error::Config(format!(
            "decode_step needs TRIPLE_STREAM, model is {}",
            config.fusion.as_str()
        )));
    }
    step_any(tape, bound, config, words, state, codes)
}

/// One step of a single-LSTM baseline whose input is the word embedding next
/// to the mode's concatenated code set.
pub fn early_fusion_decode_step(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    words: &[usize],
    state: &DecoderState,
    codes: &[Var],
) -> Result<StepOutput> {
    if config.fusion.is_triple() {
        return Err(Error::Config(
            "early_fusion_decode_step cannot run a TRIPLE_STREAM model".into(),
        ));
    }
    step_any(tape, bound, config, words, state, codes)
}

/// Dispatches to the decoder matching the configured fusion mode.
pub fn step(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    words: &[usize],
    state: &DecoderState,
    codes: &[Var],
) -> Result<StepOutput> {
    if config.fusion.is_triple() {
        decode_step(tape, bound, config, words, state, codes)
    } else {
        early_fusion_decode_step(tape, bound, config, words, state, codes)
    }
}

/// Teacher-forced pass: step `t` is fed SOS then ground-truth words, and must
/// predict word `t` (EOS after the last one). Rows shorter than the longest
/// caption are padded with zero-weight steps.
pub struct TeacherForced {
    pub steps: Vec<StepOutput>,
    /// `inputs[t][row]`
    pub inputs: Vec<Vec<usize>>,
    /// `targets[t][row]`; PAD past the end of a row.
    pub targets: Vec<Vec<usize>>,
}

pub fn teacher_force(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    codes: &[Var],
    sequences: &[&[usize]],
) -> Result<TeacherForced> {
    let rows = sequences.len();
    let longest = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut state = DecoderState::zeros(tape, config, rows);
    let mut steps = Vec::with_capacity(longest + 1);
    let mut inputs = Vec::with_capacity(longest + 1);
    let mut targets = Vec::with_capacity(longest + 1);
    for t in 0..=longest {
        let input: Vec<usize> = sequences
            .iter()
            .map(|s| match t {
                0 => SOS,
                _ if t - 1 < s.len() => s[t - 1],
                _ => PAD,
            })
            .collect();
        let target: Vec<usize> = sequences
            .iter()
            .map(|s| match t.cmp(&s.len()) {
                std::cmp::Ordering::Less => s[t],
                std::cmp::Ordering::Equal => EOS,
                std::cmp::Ordering::Greater => PAD,
            })
            .collect();
        let out = step(tape, bound, config, &input, &state, codes)?;
        state = out.state.clone();
        steps.push(out);
        inputs.push(input);
        targets.push(target);
    }
    Ok(TeacherForced {
        steps,
        inputs,
        targets,
    })
}

/// Captioning and POS losses for a batch of pairs with ground-truth captions.
///
/// The caption loss is the mean over rows of each row's mean word
/// cross-entropy over its tokens plus EOS. The POS loss is the mean over rows
/// of the mean 3-class cross-entropy over the row's tokens; special tokens
/// carry no POS target.
pub fn teacher_forced_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    pairs: &[PairFeatures],
    captions: &[TaggedCaption],
) -> Result<(Var, Var)> {
    if pairs.is_empty() && captions.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok((z, z));
    }
    if pairs.len() != captions.len() {
        return Err(Error::Shape(format!(
            "{} pairs but {} captions",
            pairs.len(),
            captions.len()
        )));
    }
    if let Some(i) = captions.iter().position(TaggedCaption::is_empty) {
        return Err(Error::Contract(format!("caption {i} is empty")));
    }
    let codes = encode_pairs(tape, bound, config, pairs)?;
    let codes = stream_codes(tape, config, &codes)?;
    let seqs: Vec<&[usize]> = captions.iter().map(|c| c.tokens()).collect();
    let tf = teacher_force(tape, bound, config, &codes, &seqs)?;
    let b = captions.len() as f64;
    let mut cap_terms = Vec::with_capacity(tf.steps.len());
    let mut pos_terms = Vec::with_capacity(tf.steps.len());
    for (t, out) in tf.steps.iter().enumerate() {
        let cap_w: Vec<f64> = captions
            .iter()
            .map(|c| if t <= c.len() { 1.0 / ((c.len() + 1) as f64 * b) } else { 0.0 })
            .collect();
        cap_terms.push(tape.softmax_cross_entropy_rows(out.word_logits, &tf.targets[t], &cap_w)?);

        let (pos_t, pos_w): (Vec<usize>, Vec<f64>) = captions
            .iter()
            .map(|c| {
                if t < c.len() {
                    (c.tags()[t].index(), 1.0 / (c.len() as f64 * b))
                } else {
                    (0, 0.0)
                }
            })
            .unzip();
        if pos_w.iter().any(|&w| w > 0.0) {
            pos_terms.push(tape.softmax_cross_entropy_rows(out.pos_logits, &pos_t, &pos_w)?);
        }
    }
    let cap = sum_scalars(tape, &cap_terms)?;
    let pos = sum_scalars(tape, &pos_terms)?;
    Ok((cap, pos))
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => Ok(tape.constant(Tensor::scalar(0.0))),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Foreground IoU threshold for labelling proposals.
pub const FG_IOU: f64 = 0.5;

/// Center/size offsets that move `proposal` onto `target`.
pub fn box_deltas(proposal: &BBox, target: &BBox) -> [f64; 4] {
    [
        (target.x - proposal.x) / proposal.w,
        (target.y - proposal.y) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
    ]
}

pub fn apply_deltas(proposal: &BBox, d: &[f64; 4]) -> Result<BBox> {
    BBox::new(
        proposal.x + d[0] * proposal.w,
        proposal.y + d[1] * proposal.h,
        proposal.w * d[2].exp(),
        proposal.h * d[3].exp(),
    )
}

/// Proposals labelled against ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionBatch {
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
    pub foreground: Vec<bool>,
    /// Regression targets; zero for background rows.
    pub targets: Vec<[f64; 4]>,
}

impl DetectionBatch {
    /// A proposal is foreground when its best IoU with any ground-truth box
    /// reaches [`FG_IOU`]; its regression target points at that box.
    pub fn label(features: Vec<Vec<f64>>, boxes: Vec<BBox>, gt: &[BBox]) -> Result<Self> {
        if features.len() != boxes.len() {
            return Err(Error::Shape(format!(
                "{} proposal features for {} boxes",
                features.len(),
                boxes.len()
            )));
        }
        let mut foreground = Vec::with_capacity(boxes.len());
        let mut targets = Vec::with_capacity(boxes.len());
        for b in &boxes {
            let best = gt
                .iter()
                .map(|g| (iou(b, g), g))
                .fold(None::<(f64, &BBox)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((v, g)) if v >= FG_IOU => {
                    foreground.push(true);
                    targets.push(box_deltas(b, g));
                }
                _ => {
                    foreground.push(false);
                    targets.push([0.0; 4]);
                }
            }
        }
        Ok(DetectionBatch {
            features,
            boxes,
            foreground,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn extend(&mut self, other: DetectionBatch) {
        self.features.extend(other.features);
        self.boxes.extend(other.boxes);
        self.foreground.extend(other.foreground);
        self.targets.extend(other.targets);
    }
}

/// Objectness and box losses. The detection loss is the mean binary logistic
/// loss over all proposals; the box loss is the mean over foreground
/// proposals of the smooth-L1 loss summed over the four offsets.
pub fn detection_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    batch: &DetectionBatch,
) -> Result<(Var, Var)> {
    if batch.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok((z, z));
    }
    let feats = tape.constant(stack_rows(
        batch.features.iter().map(Vec::as_slice),
        config.feature_dim,
    )?);
    let out = linear(tape, bound, "det", feats)?;
    let logits = tape.slice(out, 0, 1)?;
    let deltas = tape.slice(out, 1, 5)?;
    let n = batch.len() as f64;
    let labels: Vec<f64> = batch.foreground.iter().map(|&f| f as u8 as f64).collect();
    let det = tape.sigmoid_bce(logits, &labels, &vec![1.0 / n; batch.len()])?;
    let n_fg = batch.foreground.iter().filter(|&&f| f).count();
    let targets: Vec<f64> = batch.targets.iter().flatten().copied().collect();
    let weights: Vec<f64> = batch
        .foreground
        .iter()
        .flat_map(|&f| {
            let w = if f { 1.0 / n_fg as f64 } else { 0.0 };
            [w; 4]
        })
        .collect();
    let bx = tape.smooth_l1(deltas, &targets, &weights)?;
    Ok((det, bx))
}

/// A training batch: captioned pairs plus labelled detection proposals.
#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    pub pairs: Vec<PairFeatures>,
    pub captions: Vec<TaggedCaption>,
    pub detection: DetectionBatch,
}

/// Individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cap: Var,
    pub pos: Var,
    pub det: Var,
    pub bbox: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cap: f64,
    pub pos: f64,
    pub det: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub total: f64,
}

/// `cap + α·pos + β·det + γ·box`, with the POS term dropped when the POS loss
/// is disabled.
pub fn combine_losses(config: &ModelConfig, cap: f64, pos: f64, det: f64, bbox: f64) -> f64 {
    let alpha = if config.use_pos_loss { config.alpha } else { 0.0 };
    cap + alpha * pos + config.beta * det + config.gamma * bbox
}

pub fn total_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    batch: &TrainBatch,
) -> Result<LossVars> {
    let (cap, pos) = teacher_forced_loss(tape, bound, config, &batch.pairs, &batch.captions)?;
    let (det, bbox) = detection_loss(tape, bound, config, &batch.detection)?;
    let mut total = cap;
    let alpha = if config.use_pos_loss { config.alpha } else { 0.0 };
    for (term, w) in [(pos, alpha), (det, config.beta), (bbox, config.gamma)] {
        if w != 0.0 {
            let scaled = tape.scale(term, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(LossVars {
        cap,
        pos,
        det,
        bbox,
        total,
    })
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues {
            cap: v(self.cap),
            pos: v(self.pos),
            det: v(self.det),
            bbox: v(self.bbox),
            total: v(self.total),
        }
    }
}

/// Greedy decoding result for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Emitted word ids, EOS excluded.
    pub tokens: Vec<usize>,
    /// Argmax POS class for each emitted word.
    pub pos_tags: Vec<PosTag>,
    /// Log-probability of the chosen word at every step taken, EOS included.
    pub log_probs: Vec<f64>,
    /// Whether decoding stopped on EOS rather than the length limit.
    pub terminated: bool,
}

/// Greedy decoding of a batch of pairs: start from SOS, feed back the argmax
/// word (lower id on ties), stop at EOS or `max_len` steps.
pub fn greedy_decode_batch(
    params: &ModelParams,
    config: &ModelConfig,
    pairs: &[PairFeatures],
    max_len: usize,
) -> Result<Vec<DecodeOutput>> {
    let mut outs: Vec<DecodeOutput> = (0..pairs.len())
        .map(|_| DecodeOutput {
            tokens: Vec::new(),
            pos_tags: Vec::new(),
            log_probs: Vec::new(),
            terminated: false,
        })
        .collect();
    if pairs.is_empty() || max_len == 0 {
        return Ok(outs);
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let codes = encode_pairs(&mut tape, &bound, config, pairs)?;
    let codes = stream_codes(&mut tape, config, &codes)?;
    let mut state = DecoderState::zeros(&mut tape, config, pairs.len());
    let mut words = vec![SOS; pairs.len()];
    let mut done = vec![false; pairs.len()];
    for _ in 0..max_len {
        let out = step(&mut tape, &bound, config, &words, &state, &codes)?;
        let logits = tape.value(out.word_logits).clone();
        let pos = tape.value(out.pos_logits).clone();
        for r in 0..pairs.len() {
            if done[r] {
                words[r] = PAD;
                continue;
            }
            let lp = log_softmax(logits.row(r));
            let w = argmax(&lp);
            outs[r].log_probs.push(lp[w]);
            if w == EOS {
                done[r] = true;
                outs[r].terminated = true;
                words[r] = PAD;
            } else {
                outs[r].tokens.push(w);
                outs[r].pos_tags.push(PosTag::from_index(argmax(pos.row(r)))?);
                words[r] = w;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
        state = out.state;
    }
    Ok(outs)
}

pub fn greedy_decode(
    params: &ModelParams,
    config: &ModelConfig,
    pair: &PairFeatures,
    max_len: usize,
) -> Result<DecodeOutput> {
    Ok(greedy_decode_batch(params, config, std::slice::from_ref(pair), max_len)?
        .pop()
        .expect("one output per pair"))
}

/// Mean per-token log-likelihood (EOS included) of each `(pair, sequence)`
/// row under teacher forcing. `rows[i] = (pair index, sequence)`.
pub fn sequence_log_likelihood(
    params: &ModelParams,
    config: &ModelConfig,
    pairs: &[PairFeatures],
    rows: &[(usize, &[usize])],
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&(p, _)) = rows.iter().find(|(p, _)| *p >= pairs.len()) {
        return Err(Error::Index(format!("pair {p} out of range for {}", pairs.len())));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let codes = encode_pairs(&mut tape, &bound, config, pairs)?;
    let codes = stream_codes(&mut tape, config, &codes)?;
    let row_pairs: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let codes = codes
        .into_iter()
        .map(|c| tape.gather(c, &row_pairs))
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<&[usize]> = rows.iter().map(|r| r.1).collect();
    let tf = teacher_force(&mut tape, &bound, config, &codes, &seqs)?;
    let mut totals = vec![0.0; rows.len()];
    for (t, out) in tf.steps.iter().enumerate() {
        let logits = tape.value(out.word_logits);
        for (r, s) in seqs.iter().enumerate() {
            if t <= s.len() {
                totals[r] += log_softmax(logits.row(r))[tf.targets[t][r]];
            }
        }
    }
    Ok(totals
        .into_iter()
        .zip(&seqs)
        .map(|(tot, s)| tot / (s.len() + 1) as f64)
        .collect())
}

/// Objectness logit and box offsets for each feature row, without a tape.
pub fn detect(params: &ModelParams, config: &ModelConfig, features: &[&[f64]]) -> Result<Vec<(f64, [f64; 4])>> {
    let w = params.get("det.w").ok_or_else(|| Error::Config("missing det.w".into()))?;
    let b = params.get("det.b").ok_or_else(|| Error::Config("missing det.b".into()))?;
    features
        .iter()
        .map(|f| {
            if f.len() != config.feature_dim {
                return Err(Error::Shape(format!(
                    "feature has {} values, model expects {}",
                    f.len(),
                    config.feature_dim
                )));
            }
            let mut out = b.data().to_vec();
            for (i, &x) in f.iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                    *o += x * wv;
                }
            }
            Ok((out[0], [out[1], out[2], out[3], out[4]]))
        })
        .collect()
}

/// Proposal after detection-head refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub feature: Vec<f64>,
}

/// Scene objects as proposals: boxes refined by the detection head and
/// scored by objectness, the top `n_before_nms` kept, then greedy NMS.
/// Returned in descending score order.
pub fn propose(
    scene: &Scene,
    params: &ModelParams,
    config: &ModelConfig,
    n_before_nms: usize,
    nms_iou: f64,
) -> Result<Vec<Proposal>> {
    let feats: Vec<&[f64]> = scene.objects.iter().map(|o| o.feature.as_slice()).collect();
    let heads = detect(params, config, &feats)?;
    let mut props = Vec::with_capacity(heads.len());
    for (obj, (logit, d)) in scene.objects.iter().zip(heads) {
        props.push(Proposal {
            bbox: apply_deltas(&obj.bbox, &d)?,
            score: sigmoid(logit),
            feature: obj.feature.clone(),
        });
    }
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&i, &j| props[j].score.total_cmp(&props[i].score).then(i.cmp(&j)));
    order.truncate(n_before_nms);
    let top: Vec<(BBox, f64)> = order.iter().map(|&i| (props[i].bbox, props[i].score)).collect();
    Ok(nms(&top, nms_iou)
        .into_iter()
        .map(|k| props[order[k]].clone())
        .collect())
}

/// One decoded region pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedPair {
    /// Indices into the surviving proposal list.
    pub subject: usize,
    pub object: usize,
    pub subject_box: BBox,
    pub object_box: BBox,
    pub output: DecodeOutput,
    /// Product of subject and object objectness.
    pub score: f64,
}

/// Proposals, NMS, every ordered pair of survivors decoded. Output follows
/// [`pair_combinations`] order over the survivors.
pub fn caption_scene(
    scene: &Scene,
    params: &ModelParams,
    config: &ModelConfig,
    n_before_nms: usize,
    nms_iou: f64,
) -> Result<(Vec<Proposal>, Vec<CaptionedPair>)> {
    let props = propose(scene, params, config, n_before_nms, nms_iou)?;
    let combos = pair_combinations(props.len());
    if combos.is_empty() {
        return Ok((props, Vec::new()));
    }
    let pairs: Vec<PairFeatures> = combos
        .iter()
        .map(|&(s, o)| {
            PairFeatures::from_regions(
                scene,
                (&props[s].feature, &props[s].bbox),
                (&props[o].feature, &props[o].bbox),
            )
        })
        .collect();
    let outs = greedy_decode_batch(params, config, &pairs, config.max_caption_len)?;
    let captions = combos
        .into_iter()
        .zip(outs)
        .map(|((s, o), output)| CaptionedPair {
            subject: s,
            object: o,
            subject_box: props[s].bbox,
            object_box: props[o].bbox,
            output,
            score: props[s].score * props[o].score,
        })
        .collect();
    Ok((props, captions))
}
