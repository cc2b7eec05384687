//! Cross-camera query/gallery evaluation: CMC Rank-k and mAP.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data::{group_average, CameraId, Dataset, PersonId};
use crate::error::{Error, Result};
use crate::losses::pairwise_distances;
use crate::model::Model;

/// Identity and camera of one query or gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalMeta {
    pub person_id: PersonId,
    pub camera_id: CameraId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exclusion {
    /// Drop gallery entries sharing both identity and camera with the query.
    #[default]
    SameCameraSameId,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub k_max: usize,
    pub exclusion: Exclusion,
    /// Average embeddings per tracklet before matching.
    pub tracklet_level: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k_max: 20,
            exclusion: Exclusion::SameCameraSameId,
            tracklet_level: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Position of the query in the query list.
    pub query: usize,
    pub average_precision: f64,
    /// 1-based rank of the first correct match.
    pub first_match: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `cmc[k - 1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    /// `rank<k> <v>` lines for k in {1, 5, 10, 20} up to `k_max`, then
    /// `map <v>` and `queries <n>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in [1, 5, 10, 20] {
            if k <= self.cmc.len() {
                let _ = writeln!(out, "rank{k} {:.6}", self.cmc[k - 1]);
            }
        }
        let _ = writeln!(out, "map {:.6}", self.map);
        let _ = writeln!(out, "queries {}", self.num_queries);
        out
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query,ap,first_match\n");
        for q in &self.per_query {
            let _ = writeln!(
                out,
                "{},{:.6},{}",
                q.query, q.average_precision, q.first_match
            );
        }
        out
    }
}

/// Mean of precision@i over the relevant positions of a ranked list.
/// `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Ranks gallery entries for every query and scores the ranking.
///
/// Distance ties are broken by gallery index. Queries left without a
/// correct gallery entry after exclusion are skipped.
pub fn cmc_map(
    query_emb: ArrayView2<'_, f64>,
    query_meta: &[EvalMeta],
    gallery_emb: ArrayView2<'_, f64>,
    gallery_meta: &[EvalMeta],
    protocol: &ProtocolConfig,
) -> Result<EvalReport> {
    if query_emb.nrows() != query_meta.len() || gallery_emb.nrows() != gallery_meta.len() {
        return Err(Error::Shape("embedding rows and metadata differ".into()));
    }
    if query_emb.ncols() != gallery_emb.ncols() {
        return Err(Error::Shape(
            "query and gallery embedding widths differ".into(),
        ));
    }
    if query_emb
        .iter()
        .chain(gallery_emb.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("evaluation embeddings"));
    }
    if protocol.k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be at least 1".into()));
    }
    let dist = pairwise_distances(query_emb, gallery_emb);

    let results: Vec<Option<QueryResult>> = (0..query_meta.len())
        .into_par_iter()
        .map(|qi| {
            let q = query_meta[qi];
            let mut order: Vec<usize> = (0..gallery_meta.len())
                .filter(|&g| {
                    let m = gallery_meta[g];
                    protocol.exclusion == Exclusion::None
                        || !(m.person_id == q.person_id && m.camera_id == q.camera_id)
                })
                .collect();
            order.sort_by(|&a, &b| dist[[qi, a]].total_cmp(&dist[[qi, b]]).then(a.cmp(&b)));
            let relevance: Vec<bool> = order
                .iter()
                .map(|&g| gallery_meta[g].person_id == q.person_id)
                .collect();
            let ap = average_precision(&relevance)?;
            let first = relevance
                .iter()
                .position(|&r| r)
                .expect("ap implies a match")
                + 1;
            Some(QueryResult {
                query: qi,
                average_precision: ap,
                first_match: first,
            })
        })
        .collect();
    let per_query: Vec<QueryResult> = results.into_iter().flatten().collect();
    if per_query.is_empty() {
        return Err(Error::Eval("no query has a valid gallery match".into()));
    }
    let n = per_query.len() as f64;
    let cmc = (1..=protocol.k_max)
        .map(|k| per_query.iter().filter(|r| r.first_match <= k).count() as f64 / n)
        .collect();
    let map = per_query.iter().map(|r| r.average_precision).sum::<f64>() / n;
    Ok(EvalReport {
        cmc,
        map,
        num_queries: per_query.len(),
        per_query,
    })
}

/// Embeds a labeled dataset, optionally averaged per tracklet.
pub fn embed_for_eval(
    model: &Model,
    dataset: &Dataset,
    tracklet_level: bool,
) -> Result<(Array2<f64>, Vec<EvalMeta>)> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    if !dataset.is_labeled() {
        return Err(Error::Unlabeled("evaluation needs person ids".into()));
    }
    let emb = model.embed(dataset.feature_matrix().view())?;
    if tracklet_level {
        let ids: Vec<_> = dataset.samples().iter().map(|s| s.tracklet_id).collect();
        let (avg, order) = group_average(emb.view(), &ids)?;
        let meta = order
            .iter()
            .map(|t| {
                let info = dataset.tracklet(*t).expect("tracklet exists");
                EvalMeta {
                    person_id: info.person_id.expect("labeled"),
                    camera_id: info.camera_id,
                }
            })
            .collect();
        Ok((avg, meta))
    } else {
        let meta = dataset
            .samples()
            .iter()
            .map(|s| EvalMeta {
                person_id: s.person_id.expect("labeled"),
                camera_id: s.camera_id,
            })
            .collect();
        Ok((emb, meta))
    }
}

pub fn evaluate_model(
    model: &Model,
    query: &Dataset,
    gallery: &Dataset,
    protocol: &ProtocolConfig,
) -> Result<EvalReport> {
    let (qe, qm) = embed_for_eval(model, query, protocol.tracklet_level)?;
    let (ge, gm) = embed_for_eval(model, gallery, protocol.tracklet_level)?;
    cmc_map(qe.view(), &qm, ge.view(), &gm, protocol)
}
