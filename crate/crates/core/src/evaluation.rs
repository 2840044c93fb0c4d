//! Nearest-pair inference and the three evaluation protocols: closed world
//! (unseen-pair candidates only), open world (all pairs), and the object
//! oracle (open candidates restricted to the true object), consolidated by
//! the harmonic mean of open and closed accuracy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{euclidean_distance, Vector};
use crate::model::{ModelParams, PairId};

/// Which pairs are admissible at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum World {
    /// Unseen pairs only.
    Closed,
    /// All of seen ∪ unseen.
    Open,
}

/// Precomputed embeddings for every candidate pair.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub pairs: Vec<PairId>,
    pub embeddings: Vec<Vector>,
    pub world: World,
}

/// Embed the candidate pairs for a world: closed uses the unseen pairs only,
/// open uses seen ∪ unseen (in that order).
pub fn build_candidates(
    params: &ModelParams,
    seen: &[PairId],
    unseen: &[PairId],
    world: World,
) -> Result<CandidateSet> {
    if seen.iter().any(|p| unseen.contains(p)) {
        return Err(Error::validation(
            "seen and unseen pair sets overlap",
        ));
    }
    let pairs: Vec<PairId> = match world {
        World::Closed => unseen.to_vec(),
        World::Open => seen.iter().chain(unseen.iter()).copied().collect(),
    };
    if pairs.is_empty() {
        return Err(Error::validation("candidate set is empty"));
    }
    let embeddings = params.compose_all(&pairs);
    Ok(CandidateSet {
        pairs,
        embeddings,
        world,
    })
}

/// Argmin over Euclidean distance between the embedded image and the
/// candidate embeddings, optionally restricted to one object. Ties break to
/// the lowest candidate index.
pub fn predict_pair(
    params: &ModelParams,
    feat: &Vector,
    cands: &CandidateSet,
    restrict_obj: Option<usize>,
) -> Result<PairId> {
    let emb = params.embed_image(feat);
    let mut best: Option<(f64, usize)> = None;
    for (i, (pair, cand)) in cands.pairs.iter().zip(&cands.embeddings).enumerate() {
        if let Some(obj) = restrict_obj {
            if pair.obj != obj {
                continue;
            }
        }
        let d = euclidean_distance(&emb, cand);
        match best {
            Some((bd, _)) if bd <= d => {}
            _ => best = Some((d, i)),
        }
    }
    match best {
        Some((_, i)) => Ok(cands.pairs[i]),
        None => Err(Error::validation(format!(
            "object restriction {} leaves no candidates",
            restrict_obj.map(|o| params.vocab.objects[o].clone()).unwrap_or_default()
        ))),
    }
}

/// Per-protocol accuracy counts for one unseen pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairAccuracy {
    pub total: usize,
    pub closed_correct: usize,
    pub open_correct: usize,
    pub oracle_correct: usize,
}

/// Top-1 accuracies under the three protocols plus their harmonic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub closed_top1: f64,
    pub open_top1: f64,
    pub obj_oracle_top1: f64,
    pub h_mean: f64,
    pub per_pair: BTreeMap<PairId, PairAccuracy>,
}

/// h-mean = 2·open·closed / (open + closed), zero when the denominator is.
pub fn harmonic_mean(open: f64, closed: f64) -> f64 {
    if open + closed > 0.0 {
        2.0 * open * closed / (open + closed)
    } else {
        0.0
    }
}

impl EvalReport {
    /// Human-readable table with percentages at one decimal.
    pub fn to_table(&self) -> String {
        format!(
            "closed {:5.1}%  open {:5.1}%  +obj {:5.1}%  h-mean {:5.1}%",
            self.closed_top1 * 100.0,
            self.open_top1 * 100.0,
            self.obj_oracle_top1 * 100.0,
            self.h_mean * 100.0
        )
    }

    /// CSV with `metric,value` rows followed by per-pair accuracy rows.
    pub fn to_csv(&self, params: &ModelParams) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("closed_top1,{:.6}\n", self.closed_top1));
        out.push_str(&format!("open_top1,{:.6}\n", self.open_top1));
        out.push_str(&format!("obj_oracle_top1,{:.6}\n", self.obj_oracle_top1));
        out.push_str(&format!("h_mean,{:.6}\n", self.h_mean));
        out.push_str("pair_attr,pair_obj,n,closed,open,oracle\n");
        for (pair, acc) in &self.per_pair {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                params.vocab.attributes[pair.attr],
                params.vocab.objects[pair.obj],
                acc.total,
                acc.closed_correct,
                acc.open_correct,
                acc.oracle_correct
            ));
        }
        out
    }
}

/// Evaluate a test set of (feature, unseen pair label) under all three
/// protocols.
///
/// Every test label must be an unseen pair; anything else signals split
/// leakage and is a hard error.
pub fn evaluate(
    params: &ModelParams,
    test: &[(Vector, PairId)],
    seen: &[PairId],
    unseen: &[PairId],
) -> Result<EvalReport> {
    for (_, pair) in test {
        if !unseen.contains(pair) {
            return Err(Error::validation(format!(
                "test label ({}, {}) is not an unseen pair (split leakage)",
                params.vocab.attributes[pair.attr], params.vocab.objects[pair.obj]
            )));
        }
    }
    if test.is_empty() {
        return Err(Error::validation("empty test set"));
    }

    let closed = build_candidates(params, seen, unseen, World::Closed)?;
    let open = build_candidates(params, seen, unseen, World::Open)?;

    let mut per_pair: BTreeMap<PairId, PairAccuracy> = BTreeMap::new();
    let (mut n_closed, mut n_open, mut n_oracle) = (0usize, 0usize, 0usize);
    for (feat, label) in test {
        let entry = per_pair.entry(*label).or_default();
        entry.total += 1;
        if predict_pair(params, feat, &closed, None)? == *label {
            n_closed += 1;
            entry.closed_correct += 1;
        }
        if predict_pair(params, feat, &open, None)? == *label {
            n_open += 1;
            entry.open_correct += 1;
        }
        if predict_pair(params, feat, &open, Some(label.obj))? == *label {
            n_oracle += 1;
            entry.oracle_correct += 1;
        }
    }

    let n = test.len() as f64;
    let closed_top1 = n_closed as f64 / n;
    let open_top1 = n_open as f64 / n;
    let obj_oracle_top1 = n_oracle as f64 / n;

    // the true label is present in both restricted candidate sets, which
    // are subsets of the open set
    debug_assert!(closed_top1 >= open_top1);
    debug_assert!(obj_oracle_top1 >= open_top1);

    Ok(EvalReport {
        closed_top1,
        open_top1,
        obj_oracle_top1,
        h_mean: harmonic_mean(open_top1, closed_top1),
        per_pair,
    })
}

/// Embed a composition query (attribute operator applied to an injectable
/// object vector) and return the ids of the `k` nearest pool features,
/// ascending by distance with index-order ties.
pub fn retrieve_topk(
    params: &ModelParams,
    attr: usize,
    obj_vec: &Vector,
    pool: &[(String, Vector)],
    k: usize,
) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::validation("retrieval pool is empty"));
    }
    assert!(k <= pool.len(), "retrieve_topk: k {} > pool size {}", k, pool.len());
    let query = params.compose_with_vector(attr, obj_vec);
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, (_, feat))| (euclidean_distance(&params.embed_image(feat), &query), i))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, i)| pool[i].0.clone()).collect())
}

/// Plain-text embedding dump, one row per pair: `attr obj v1 ... vD`.
pub fn dump_embeddings(params: &ModelParams) -> String {
    let mut out = String::new();
    for pair in params.vocab.all_pairs() {
        let emb = params.compose(pair);
        out.push_str(&params.vocab.attributes[pair.attr]);
        out.push(' ');
        out.push_str(&params.vocab.objects[pair.obj]);
        for x in &emb.data {
            out.push_str(&format!(" {:.16e}", x));
        }
        out.push('\n');
    }
    out
}
