//! P x K batch construction and the two multi-dataset schedules.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, PersonId, Sample, TrackletId};
use crate::error::{Error, Result};

/// Where the rows of a batch come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Dataset(usize),
    Merged,
    /// Fine-tuning layout: rows `0..K` are presumed positives, the rest
    /// presumed negatives. Labels beyond the first block carry no identity.
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayout {
    /// `(dataset index, sample index)` per row.
    pub refs: Vec<(usize, usize)>,
    pub labels: Vec<u64>,
    pub p: usize,
    pub k: usize,
    pub source: BatchSource,
}

impl BatchLayout {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Exactly `p` distinct labels, each appearing `k` times.
    pub fn satisfies_pk(&self) -> bool {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_default() += 1;
        }
        self.refs.len() == self.p * self.k
            && self.labels.len() == self.refs.len()
            && counts.len() == self.p
            && counts.values().all(|&c| c == self.k)
    }

    pub fn datasets(&self) -> impl Iterator<Item = usize> + '_ {
        self.refs.iter().map(|r| r.0)
    }
}

/// Draws `p` identities uniformly without replacement and `k` images of each
/// (with replacement only when an identity has fewer than `k`).
pub fn sample_pk<R: Rng + ?Sized>(
    dataset: &Dataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<BatchLayout> {
    sample_pk_from(dataset, 0, p, k, rng)
}

/// [`sample_pk`] with rows tagged as coming from dataset `source`.
pub fn sample_pk_from<R: Rng + ?Sized>(
    dataset: &Dataset,
    source: usize,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<BatchLayout> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidConfig("P and K must be positive".into()));
    }
    let ids: Vec<PersonId> = dataset.person_ids().collect();
    if ids.len() < p {
        return Err(Error::InvalidDataset(format!(
            "need {p} labeled identities, dataset has {}",
            ids.len()
        )));
    }
    let mut refs = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for pick in index::sample(rng, ids.len(), p) {
        let person = ids[pick];
        let members = dataset.person_indices(person);
        if members.len() >= k {
            for j in index::sample(rng, members.len(), k) {
                refs.push((source, members[j]));
            }
        } else {
            for _ in 0..k {
                refs.push((source, members[rng.random_range(0..members.len())]));
            }
        }
        labels.extend(std::iter::repeat_n(person, k));
    }
    Ok(BatchLayout {
        refs,
        labels,
        p,
        k,
        source: BatchSource::Dataset(source),
    })
}

/// Union for BH-merge training.
///
/// Person and tracklet ids are renumbered densely: source datasets in list
/// order and, within one source, ascending original id. Two sources never
/// share a label. Samples keep their order (sources concatenated).
pub fn merge_for_bh_merge(datasets: &[Dataset]) -> Result<Dataset> {
    let Some(first) = datasets.first() else {
        return Err(Error::InvalidDataset("nothing to merge".into()));
    };
    let f = first.feature_dim();
    if let Some(bad) = datasets.iter().position(|d| d.feature_dim() != f) {
        return Err(Error::Shape(format!(
            "dataset {bad} has feature dim {}, expected {f}",
            datasets[bad].feature_dim()
        )));
    }
    let mut samples: Vec<Sample> = Vec::with_capacity(datasets.iter().map(Dataset::len).sum());
    let mut next_person: PersonId = 0;
    let mut next_tracklet: TrackletId = 0;
    for ds in datasets {
        let persons: BTreeMap<PersonId, PersonId> = ds
            .person_ids()
            .map(|p| {
                next_person += 1;
                (p, next_person - 1)
            })
            .collect();
        let mut tracklet_ids: Vec<TrackletId> = ds.tracklets().iter().map(|t| t.id).collect();
        tracklet_ids.sort_unstable();
        let tracklets: BTreeMap<TrackletId, TrackletId> = tracklet_ids
            .into_iter()
            .map(|t| {
                next_tracklet += 1;
                (t, next_tracklet - 1)
            })
            .collect();
        samples.extend(ds.samples().iter().map(|s| Sample {
            person_id: s.person_id.map(|p| persons[&p]),
            tracklet_id: tracklets[&s.tracklet_id],
            ..s.clone()
        }));
    }
    Dataset::new(f, samples)
}

/// Offsets of each source inside the merged sample list.
pub fn merge_offsets(datasets: &[Dataset]) -> Vec<usize> {
    let mut acc = 0;
    datasets
        .iter()
        .map(|d| {
            let o = acc;
            acc += d.len();
            o
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwitchPolicy {
    #[default]
    RoundRobin,
    /// Visits each dataset in proportion to its sample count (smooth
    /// weighted round-robin, still deterministic).
    Proportional,
}

/// Dataset index for each step of one epoch of BH-switch training.
pub fn switch_schedule(datasets: &[Dataset], steps: usize, policy: SwitchPolicy) -> Vec<usize> {
    let n = datasets.len();
    if n == 0 {
        return Vec::new();
    }
    match policy {
        SwitchPolicy::RoundRobin => (0..steps).map(|b| b % n).collect(),
        SwitchPolicy::Proportional => {
            let weights: Vec<i64> = datasets.iter().map(|d| d.len().max(1) as i64).collect();
            let total: i64 = weights.iter().sum();
            let mut current = vec![0i64; n];
            (0..steps)
                .map(|_| {
                    for (c, w) in current.iter_mut().zip(&weights) {
                        *c += w;
                    }
                    let best = (0..n)
                        .max_by_key(|&i| (current[i], std::cmp::Reverse(i)))
                        .unwrap();
                    current[best] -= total;
                    best
                })
                .collect()
        }
    }
}

/// `floor(N_total / (P K))`, at least 1.
pub fn steps_per_epoch(datasets: &[Dataset], p: usize, k: usize) -> usize {
    let total: usize = datasets.iter().map(Dataset::len).sum();
    (total / (p * k).max(1)).max(1)
}
