//! Caption graphs over ground-truth boxes and sentence-based retrieval.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{
    detect, greedy_decode_batch, pair_combinations, propose, sequence_log_likelihood,
    PairFeatures,
};
use crate::pipeline::{par_map, Captioner};
use crate::tensor::sigmoid;
use crate::text::split_spans;

/// Label used when a decoded span is empty.
pub const UNKNOWN_LABEL: &str = "unk";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    /// Other labels decoded for this box, most confident first.
    pub alternatives: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

fn span_label(span: &[String]) -> String {
    if span.is_empty() {
        UNKNOWN_LABEL.to_string()
    } else {
        span.join(" ")
    }
}

/// Decodes every ordered pair of ground-truth boxes and splits each caption
/// by its predicted tags. A node takes the subject or object span of its
/// highest-scoring caption (earlier pair on ties); an edge carries the
/// predicate span of its pair.
pub fn build_caption_graph(scene: &Scene, model: &Captioner) -> Result<CaptionGraph> {
    let k = scene.objects.len();
    if k < 2 {
        return Ok(CaptionGraph::default());
    }
    let cfg = model.model();
    let feats: Vec<&[f64]> = scene.objects.iter().map(|o| o.feature.as_slice()).collect();
    let objectness: Vec<f64> = detect(&model.params, cfg, &feats)?
        .into_iter()
        .map(|(logit, _)| sigmoid(logit))
        .collect();
    let combos = pair_combinations(k);
    let pairs: Vec<PairFeatures> = combos
        .iter()
        .map(|&(s, o)| PairFeatures::from_scene(scene, s, o))
        .collect();
    let outs = greedy_decode_batch(&model.params, cfg, &pairs, cfg.max_caption_len)?;

    // (score, pair index, label) candidates per box
    let mut candidates: Vec<Vec<(f64, usize, String)>> = vec![Vec::new(); k];
    let mut edges = Vec::with_capacity(combos.len());
    for (p, (&(s, o), out)) in combos.iter().zip(&outs).enumerate() {
        let words = model.words(&out.tokens)?;
        let [subj, pred, obj] = split_spans(&words, &out.pos_tags);
        let score = objectness[s] * objectness[o];
        candidates[s].push((score, p, span_label(&subj)));
        candidates[o].push((score, p, span_label(&obj)));
        edges.push(GraphEdge {
            from: s,
            to: o,
            label: span_label(&pred),
        });
    }
    let nodes = scene
        .objects
        .iter()
        .zip(candidates)
        .map(|(obj, mut cands)| {
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let label = cands[0].2.clone();
            let mut alternatives: Vec<String> = Vec::new();
            for (_, _, l) in &cands[1..] {
                if *l != label && !alternatives.contains(l) {
                    alternatives.push(l.clone());
                }
            }
            GraphNode {
                bbox: obj.bbox,
                label,
                alternatives,
            }
        })
        .collect();
    Ok(CaptionGraph { nodes, edges })
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Graphviz text. Nodes are `n0, n1, …` in node order, edges follow in edge
/// order. The empty graph is `digraph g { }`.
pub fn emit_dot(graph: &CaptionGraph) -> String {
    if graph.nodes.is_empty() && graph.edges.is_empty() {
        return "digraph g { }".to_string();
    }
    let mut out = String::from("digraph g {\n");
    for (i, n) in graph.nodes.iter().enumerate() {
        let _ = writeln!(out, "  n{i} [label={}];", dot_escape(&n.label));
    }
    for e in &graph.edges {
        let _ = writeln!(out, "  n{} -> n{} [label={}];", e.from, e.to, dot_escape(&e.label));
    }
    out.push('}');
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub tokens: Vec<String>,
    /// Index of the source scene in the pool.
    pub image: usize,
}

/// Picks `ceil(n/4)` random scenes and up to four random ground-truth
/// captions from each, in draw order, until `n` queries are collected.
pub fn sample_queries(scenes: &[Scene], n: usize, seed: u64) -> Result<Vec<RetrievalQuery>> {
    let available: usize = scenes.iter().map(|s| s.records.len().min(4)).sum();
    if n > available {
        return Err(Error::Config(format!(
            "{n} queries requested but the pool supplies at most {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for img in order {
        if out.len() == n {
            break;
        }
        let recs = &scenes[img].records;
        let take = recs.len().min(4).min(n - out.len());
        for r in index::sample(&mut rng, recs.len(), take) {
            out.push(RetrievalQuery {
                tokens: recs[r].tokens.clone(),
                image: img,
            });
        }
    }
    Ok(out)
}

/// Mean per-token log-likelihood (EOS included) of the query under the
/// pair; OOV words count as UNK.
pub fn retrieval_score(model: &Captioner, pair: &PairFeatures, query: &[String]) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Contract("retrieval query is empty".into()));
    }
    let ids = model.vocab.encode(query);
    Ok(sequence_log_likelihood(
        &model.params,
        model.model(),
        std::slice::from_ref(pair),
        &[(0, ids.as_slice())],
    )?[0])
}

/// Per-query image score: the best retrieval score over the region pairs
/// of the image's proposals. `-inf` when fewer than two proposals survive.
pub fn image_scores(
    model: &Captioner,
    scene: &Scene,
    queries: &[Vec<usize>],
    n_proposals: usize,
) -> Result<Vec<f64>> {
    let cfg = model.model();
    let props = propose(scene, &model.params, cfg, n_proposals, model.run.nms_iou)?;
    let combos = pair_combinations(props.len());
    let mut best = vec![f64::NEG_INFINITY; queries.len()];
    if combos.is_empty() || queries.is_empty() {
        return Ok(best);
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
    let rows: Vec<(usize, &[usize])> = queries
        .iter()
        .flat_map(|q| (0..pairs.len()).map(move |p| (p, q.as_slice())))
        .collect();
    let ll = sequence_log_likelihood(&model.params, cfg, &pairs, &rows)?;
    for (q, chunk) in ll.chunks(pairs.len()).enumerate() {
        best[q] = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median: f64,
}

/// 1-based rank of `source` when images are ordered by descending score,
/// lower index first on ties.
pub fn rank_of(scores: &[f64], source: usize) -> usize {
    let s = scores[source];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < source))
        .count()
}

/// Recall at 1/5/10 and median rank from per-query ranks.
pub fn summarize_ranks(ranks: &[usize]) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::Eval("no retrieval queries".into()));
    }
    let n = ranks.len() as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    Ok(RetrievalReport {
        r1: at(1),
        r5: at(5),
        r10: at(10),
        median,
    })
}

/// Ranks the pool for every query and summarizes. Scenes are scored in
/// parallel when `jobs > 1`; results do not depend on `jobs`.
pub fn retrieve(
    model: &Captioner,
    queries: &[RetrievalQuery],
    scenes: &[Scene],
    n_proposals: usize,
    jobs: usize,
) -> Result<(RetrievalReport, Vec<usize>)> {
    if let Some(q) = queries.iter().find(|q| q.image >= scenes.len()) {
        return Err(Error::Lookup(format!(
            "query source image {} is outside the pool of {}",
            q.image,
            scenes.len()
        )));
    }
    if queries.iter().any(|q| q.tokens.is_empty()) {
        return Err(Error::Contract("retrieval query is empty".into()));
    }
    let encoded: Vec<Vec<usize>> = queries.iter().map(|q| model.vocab.encode(&q.tokens)).collect();
    // scores[image][query]
    let scores = par_map(jobs, scenes, |s| image_scores(model, s, &encoded, n_proposals))?;
    let ranks: Vec<usize> = queries
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let col: Vec<f64> = scores.iter().map(|row| row[q]).collect();
            rank_of(&col, query.image)
        })
        .collect();
    Ok((summarize_ranks(&ranks)?, ranks))
}
