//! Presumed-positive cross-camera pairs, co-occurrence negatives and the
//! fine-tuning batch layout built from them.
//!
//! Nothing here reads person ids except [`measure_purity`] and
//! [`annotate_truth`], which exist for auditing mined pairs against ground
//! truth.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{group_average, CameraId, CooccurrenceIndex, Dataset, TrackletId};
use crate::error::{Error, Result};
use crate::losses::pairwise_distances;
use crate::model::Model;
use crate::sampler::{BatchLayout, BatchSource};

#[derive(Debug, Clone, PartialEq)]
pub struct MinedPair {
    pub tracklet_a: TrackletId,
    pub tracklet_b: TrackletId,
    pub camera_a: CameraId,
    pub camera_b: CameraId,
    pub distance: f64,
    pub negatives: Vec<TrackletId>,
    /// Filled only by [`annotate_truth`].
    pub true_positive: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedPairSet {
    pub cameras: (CameraId, CameraId),
    /// Ascending by distance.
    pub pairs: Vec<MinedPair>,
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSelection {
    /// Globally closest pair first, both tracklets then removed.
    #[default]
    Greedy,
    /// The `N_p` smallest matrix entries, tracklets may repeat.
    RawTopN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub alpha: f64,
    pub negatives_per_pair: usize,
    pub selection: PairSelection,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            negatives_per_pair: 10,
            selection: PairSelection::Greedy,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if self.negatives_per_pair == 0 {
            return Err(Error::InvalidConfig(
                "need at least one negative per pair".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image embeddings (evaluation mode) averaged per tracklet, rows in
/// first-appearance order of the tracklets.
pub fn compute_tracklet_embeddings(
    model: &Model,
    dataset: &Dataset,
) -> Result<(Array2<f64>, Vec<TrackletId>)> {
    if dataset.is_empty() {
        return Err(Error::Mining("empty dataset".into()));
    }
    let emb = model.embed(dataset.feature_matrix().view())?;
    let ids: Vec<TrackletId> = dataset.samples().iter().map(|s| s.tracklet_id).collect();
    group_average(emb.view(), &ids)
}

/// `floor(alpha * min(n1, n2))`, at least 1 unless a camera is empty.
pub fn compute_np(n1: usize, n2: usize, alpha: f64) -> usize {
    let m = n1.min(n2);
    if m == 0 {
        return 0;
    }
    // The small slack keeps e.g. 0.1 * 70 from flooring to 6.
    (((alpha * m as f64) + 1e-9).floor() as usize).clamp(1, m)
}

/// Cross-camera pairs `(row in e1, row in e2, distance)` in selection order.
pub fn mine_positive_pairs(
    e1: ArrayView2<'_, f64>,
    e2: ArrayView2<'_, f64>,
    np: usize,
    selection: PairSelection,
) -> Result<Vec<(usize, usize, f64)>> {
    let (n1, n2) = (e1.nrows(), e2.nrows());
    if np > n1.min(n2) {
        return Err(Error::Mining(format!("N_p = {np} exceeds min({n1}, {n2})")));
    }
    if np == 0 {
        return Ok(Vec::new());
    }
    let d = pairwise_distances(e1, e2);
    let mut entries: Vec<(f64, usize, usize)> =
        d.indexed_iter().map(|((i, j), &v)| (v, i, j)).collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut out = Vec::with_capacity(np);
    match selection {
        PairSelection::RawTopN => {
            out.extend(entries.into_iter().take(np).map(|(v, i, j)| (i, j, v)))
        }
        PairSelection::Greedy => {
            let mut used1 = vec![false; n1];
            let mut used2 = vec![false; n2];
            for (v, i, j) in entries {
                if used1[i] || used2[j] {
                    continue;
                }
                used1[i] = true;
                used2[j] = true;
                out.push((i, j, v));
                if out.len() == np {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Negatives for a pair: tracklets from `pool` observed at the same time as
/// either pair member, uniform without replacement. When fewer than `count`
/// exist the rest is filled with uniform draws from the remaining pool.
pub fn mine_negatives<R: Rng + ?Sized>(
    pair: &MinedPair,
    coocc: &CooccurrenceIndex,
    pool: &BTreeSet<TrackletId>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TrackletId>> {
    if pool.len() < 3 {
        return Err(Error::Mining(format!(
            "camera pair has {} tracklets, need at least 3",
            pool.len()
        )));
    }
    let excluded = |t: &TrackletId| *t == pair.tracklet_a || *t == pair.tracklet_b;
    let linked: Vec<TrackletId> = coocc
        .neighbors(pair.tracklet_a)
        .union(coocc.neighbors(pair.tracklet_b))
        .filter(|t| pool.contains(t) && !excluded(t))
        .copied()
        .collect();
    if linked.len() >= count {
        return Ok(index::sample(rng, linked.len(), count)
            .into_iter()
            .map(|i| linked[i])
            .collect());
    }
    let mut chosen = linked;
    let taken: BTreeSet<TrackletId> = chosen.iter().copied().collect();
    let rest: Vec<TrackletId> = pool
        .iter()
        .filter(|t| !excluded(t) && !taken.contains(t))
        .copied()
        .collect();
    let extra = (count - chosen.len()).min(rest.len());
    chosen.extend(
        index::sample(rng, rest.len(), extra)
            .into_iter()
            .map(|i| rest[i]),
    );
    Ok(chosen)
}

/// Rows `0..k`: presumed positives drawn with replacement from both
/// tracklets of the pair (each represented at least once). Rows
/// `k..p*k`: draws with replacement from the negative tracklets' images.
pub fn build_finetune_batch<R: Rng + ?Sized>(
    pair: &MinedPair,
    dataset: &Dataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<BatchLayout> {
    if p < 2 || k < 2 {
        return Err(Error::InvalidConfig(format!(
            "fine-tune batch needs P, K >= 2 (P={p}, K={k})"
        )));
    }
    let a = dataset.tracklet_indices(pair.tracklet_a);
    let b = dataset.tracklet_indices(pair.tracklet_b);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Mining("pair refers to an empty tracklet".into()));
    }
    let negatives: Vec<usize> = pair
        .negatives
        .iter()
        .flat_map(|t| dataset.tracklet_indices(*t).iter().copied())
        .collect();
    if negatives.is_empty() {
        return Err(Error::Mining("pair has no negative images".into()));
    }
    let union: Vec<usize> = a.iter().chain(b).copied().collect();
    let mut positives = vec![
        a[rng.random_range(0..a.len())],
        b[rng.random_range(0..b.len())],
    ];
    positives.extend((2..k).map(|_| union[rng.random_range(0..union.len())]));
    positives.shuffle(rng);

    let mut refs: Vec<(usize, usize)> = positives.into_iter().map(|i| (0, i)).collect();
    refs.extend((0..(p - 1) * k).map(|_| (0, negatives[rng.random_range(0..negatives.len())])));
    let labels = (0..p)
        .flat_map(|block| std::iter::repeat_n(block as u64, k))
        .collect();
    Ok(BatchLayout {
        refs,
        labels,
        p,
        k,
        source: BatchSource::Finetune,
    })
}

/// Mines one camera pair from precomputed tracklet embeddings.
#[allow(clippy::too_many_arguments)]
pub fn mine_camera_pair<R: Rng + ?Sized>(
    embeddings: ArrayView2<'_, f64>,
    tracklet_ids: &[TrackletId],
    dataset: &Dataset,
    cameras: (CameraId, CameraId),
    coocc: &CooccurrenceIndex,
    config: &MiningConfig,
    rng: &mut R,
) -> Result<MinedPairSet> {
    let (c1, c2) = cameras;
    let camera_of = |t: TrackletId| dataset.tracklet(t).map(|i| i.camera_id);
    let rows_of = |c: CameraId| -> Vec<usize> {
        (0..tracklet_ids.len())
            .filter(|&r| camera_of(tracklet_ids[r]) == Some(c))
            .collect()
    };
    let (r1, r2) = (rows_of(c1), rows_of(c2));
    let (n1, n2) = (r1.len(), r2.len());
    let e1 = embeddings.select(ndarray::Axis(0), &r1);
    let e2 = embeddings.select(ndarray::Axis(0), &r2);
    let np = compute_np(n1, n2, config.alpha);
    let selected = mine_positive_pairs(e1.view(), e2.view(), np, config.selection)?;

    let pool: BTreeSet<TrackletId> = r1.iter().chain(&r2).map(|&r| tracklet_ids[r]).collect();
    let mut pairs = Vec::with_capacity(selected.len());
    for (i, j, distance) in selected {
        let mut pair = MinedPair {
            tracklet_a: tracklet_ids[r1[i]],
            tracklet_b: tracklet_ids[r2[j]],
            camera_a: c1,
            camera_b: c2,
            distance,
            negatives: Vec::new(),
            true_positive: None,
        };
        pair.negatives = mine_negatives(&pair, coocc, &pool, config.negatives_per_pair, rng)?;
        pairs.push(pair);
    }
    Ok(MinedPairSet {
        cameras,
        pairs,
        n1,
        n2,
    })
}

/// Mines every unordered camera pair of `dataset`, in parallel, merged in
/// camera-pair order. Each pair draws from its own stream of `seed`, so the
/// result does not depend on the thread count.
pub fn mine_all_camera_pairs(
    model: &Model,
    dataset: &Dataset,
    coocc: &CooccurrenceIndex,
    config: &MiningConfig,
    seed: u64,
) -> Result<Vec<MinedPairSet>> {
    config.validate()?;
    let cameras: Vec<CameraId> = dataset.camera_ids().collect();
    if cameras.len() < 2 {
        return Err(Error::Mining(format!(
            "need at least two cameras, found {}",
            cameras.len()
        )));
    }
    let (emb, ids) = compute_tracklet_embeddings(model, dataset)?;
    let camera_pairs: Vec<(CameraId, CameraId)> = cameras
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| cameras[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    camera_pairs
        .par_iter()
        .enumerate()
        .map(|(stream, &cams)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64 + 1);
            mine_camera_pair(emb.view(), &ids, dataset, cams, coocc, config, &mut rng)
        })
        .collect()
}

/// Fraction of pairs whose tracklets share a person id in `ground_truth`.
pub fn measure_purity(mined: &MinedPairSet, ground_truth: &Dataset) -> Result<f64> {
    if mined.pairs.is_empty() {
        return Err(Error::Mining("no pairs to measure".into()));
    }
    let person = |t: TrackletId| {
        ground_truth
            .tracklet(t)
            .and_then(|i| i.person_id)
            .ok_or_else(|| Error::Unlabeled(format!("tracklet {t} has no person id")))
    };
    let mut correct = 0usize;
    for pair in &mined.pairs {
        if person(pair.tracklet_a)? == person(pair.tracklet_b)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / mined.pairs.len() as f64)
}

/// Fills `true_positive` on every pair from ground-truth labels.
pub fn annotate_truth(sets: &mut [MinedPairSet], ground_truth: &Dataset) -> Result<()> {
    let labels: HashMap<TrackletId, Option<u64>> = ground_truth
        .tracklets()
        .iter()
        .map(|t| (t.id, t.person_id))
        .collect();
    for set in sets {
        for pair in &mut set.pairs {
            let a = labels.get(&pair.tracklet_a).copied().flatten();
            let b = labels.get(&pair.tracklet_b).copied().flatten();
            pair.true_positive = match (a, b) {
                (Some(a), Some(b)) => Some(a == b),
                _ => return Err(Error::Unlabeled("pair tracklet without person id".into())),
            };
        }
    }
    Ok(())
}

/// One line per pair: `c1 c2 tracklet_a tracklet_b distance [truth]`.
pub fn pair_report(sets: &[MinedPairSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for p in &set.pairs {
            let _ = write!(
                out,
                "{} {} {} {} {:.6}",
                p.camera_a, p.camera_b, p.tracklet_a, p.tracklet_b, p.distance
            );
            if let Some(t) = p.true_positive {
                let _ = write!(out, " {}", u8::from(t));
            }
            out.push('\n');
        }
    }
    out
}
