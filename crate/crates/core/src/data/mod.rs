//! Samples, datasets and the indices built over them.
//!
//! A [`Dataset`] is built once from a list of [`Sample`]s and then frozen; the
//! per-person, per-camera and per-tracklet indices are exact inverses of the
//! sample list.

mod cooccurrence;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use cooccurrence::{build_cooccurrence, CooccurrenceIndex, CooccurrenceScope};
pub use io::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};
pub use synth::{generate_synthetic, SynthConfig};

pub type DatasetId = u32;
pub type CameraId = u32;
pub type PersonId = u64;
pub type TrackletId = u64;

/// One observation: a feature vector plus where and when it was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub dataset_id: DatasetId,
    pub camera_id: CameraId,
    /// `None` for unlabeled observations.
    pub person_id: Option<PersonId>,
    pub tracklet_id: TrackletId,
    pub time_start: f64,
    pub time_end: f64,
}

/// Per-tracklet summary derived from its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletInfo {
    pub id: TrackletId,
    pub camera_id: CameraId,
    pub person_id: Option<PersonId>,
    pub time_start: f64,
    pub time_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    samples: Vec<Sample>,
    by_person: BTreeMap<PersonId, Vec<usize>>,
    by_camera: BTreeMap<CameraId, Vec<usize>>,
    by_tracklet: BTreeMap<TrackletId, Vec<usize>>,
    /// Tracklets in order of first appearance in `samples`.
    tracklets: Vec<TrackletInfo>,
    tracklet_pos: HashMap<TrackletId, usize>,
}

impl Dataset {
    /// Validates the samples and builds every index.
    pub fn new(feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut by_person: BTreeMap<PersonId, Vec<usize>> = BTreeMap::new();
        let mut by_camera: BTreeMap<CameraId, Vec<usize>> = BTreeMap::new();
        let mut by_tracklet: BTreeMap<TrackletId, Vec<usize>> = BTreeMap::new();
        let mut tracklets: Vec<TrackletInfo> = Vec::new();
        let mut tracklet_pos: HashMap<TrackletId, usize> = HashMap::new();

        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has a non-finite feature"
                )));
            }
            if !(s.time_start.is_finite() && s.time_end.is_finite()) || s.time_start > s.time_end {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has invalid interval [{}, {}]",
                    s.time_start, s.time_end
                )));
            }
            if let Some(p) = s.person_id {
                by_person.entry(p).or_default().push(i);
            }
            by_camera.entry(s.camera_id).or_default().push(i);
            by_tracklet.entry(s.tracklet_id).or_default().push(i);

            match tracklet_pos.get(&s.tracklet_id) {
                Some(&pos) => {
                    let t = &mut tracklets[pos];
                    if t.camera_id != s.camera_id || t.person_id != s.person_id {
                        return Err(Error::InvalidDataset(format!(
                            "tracklet {} mixes cameras or persons (sample {i})",
                            s.tracklet_id
                        )));
                    }
                    t.time_start = t.time_start.min(s.time_start);
                    t.time_end = t.time_end.max(s.time_end);
                }
                None => {
                    tracklet_pos.insert(s.tracklet_id, tracklets.len());
                    tracklets.push(TrackletInfo {
                        id: s.tracklet_id,
                        camera_id: s.camera_id,
                        person_id: s.person_id,
                        time_start: s.time_start,
                        time_end: s.time_end,
                    });
                }
            }
        }

        Ok(Self {
            feature_dim,
            samples,
            by_person,
            by_camera,
            by_tracklet,
            tracklets,
            tracklet_pos,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self::new(feature_dim, Vec::new()).expect("empty dataset is valid")
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// True when every sample carries a person id.
    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.person_id.is_some())
    }

    /// Person ids in ascending order.
    pub fn person_ids(&self) -> impl Iterator<Item = PersonId> + '_ {
        self.by_person.keys().copied()
    }

    pub fn num_persons(&self) -> usize {
        self.by_person.len()
    }

    pub fn person_indices(&self, person: PersonId) -> &[usize] {
        self.by_person
            .get(&person)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Camera ids in ascending order.
    pub fn camera_ids(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.by_camera.keys().copied()
    }

    pub fn camera_indices(&self, camera: CameraId) -> &[usize] {
        self.by_camera
            .get(&camera)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn tracklet_indices(&self, tracklet: TrackletId) -> &[usize] {
        self.by_tracklet
            .get(&tracklet)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Tracklets in order of first appearance.
    pub fn tracklets(&self) -> &[TrackletInfo] {
        &self.tracklets
    }

    pub fn tracklet(&self, tracklet: TrackletId) -> Option<&TrackletInfo> {
        self.tracklet_pos
            .get(&tracklet)
            .map(|&p| &self.tracklets[p])
    }

    /// All features as an `n x F` matrix in sample order.
    pub fn feature_matrix(&self) -> Array2<f64> {
        self.gather(0..self.samples.len())
    }

    /// Features of the given samples, one row each.
    pub fn gather(&self, indices: impl IntoIterator<Item = usize>) -> Array2<f64> {
        let mut data = Vec::new();
        let mut rows = 0;
        for i in indices {
            data.extend_from_slice(&self.samples[i].features);
            rows += 1;
        }
        Array2::from_shape_vec((rows, self.feature_dim), data)
            .expect("row width equals feature_dim")
    }

    /// A copy with every person id removed.
    pub fn without_labels(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.person_id = None;
                s
            })
            .collect();
        Dataset::new(self.feature_dim, samples).expect("stripping labels keeps a dataset valid")
    }

    /// Keeps the samples for which `keep` holds, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        let samples = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        Dataset::new(self.feature_dim, samples).expect("a subset of a valid dataset is valid")
    }
}

/// Drops every person seen by only one camera.
pub fn filter_single_camera_ids(dataset: &Dataset) -> Result<Dataset> {
    if !dataset.is_labeled() {
        return Err(Error::Unlabeled(
            "single-camera filtering needs every sample labeled".into(),
        ));
    }
    let mut cameras: BTreeMap<PersonId, BTreeSet<CameraId>> = BTreeMap::new();
    for s in dataset.samples() {
        cameras
            .entry(s.person_id.unwrap_or_default())
            .or_default()
            .insert(s.camera_id);
    }
    Ok(dataset.filter(|s| cameras[&s.person_id.unwrap_or_default()].len() >= 2))
}

/// Mean row per group, groups in order of first appearance.
pub fn group_average<G>(
    embeddings: ArrayView2<'_, f64>,
    group_ids: &[G],
) -> Result<(Array2<f64>, Vec<G>)>
where
    G: Copy + Eq + std::hash::Hash,
{
    if embeddings.nrows() != group_ids.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} group ids",
            embeddings.nrows(),
            group_ids.len()
        )));
    }
    let mut slot: HashMap<G, usize> = HashMap::new();
    let mut order = Vec::new();
    for &g in group_ids {
        slot.entry(g).or_insert_with(|| {
            order.push(g);
            order.len() - 1
        });
    }
    let mut sums = Array2::<f64>::zeros((order.len(), embeddings.ncols()));
    let mut counts = vec![0usize; order.len()];
    for (row, g) in embeddings.rows().into_iter().zip(group_ids) {
        let k = slot[g];
        let mut acc = sums.row_mut(k);
        acc += &row;
        counts[k] += 1;
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        row /= c as f64;
    }
    Ok((sums, order))
}

/// Splits by person: a `test_fraction` of the person ids (rounded) goes to
/// the second dataset. Unlabeled samples stay in the first.
pub fn split_by_person(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} outside [0, 1]"
        )));
    }
    let mut ids: Vec<PersonId> = dataset.person_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    let test_ids: BTreeSet<PersonId> = ids.into_iter().take(n_test).collect();
    let is_test = |s: &Sample| s.person_id.is_some_and(|p| test_ids.contains(&p));
    Ok((dataset.filter(|s| !is_test(s)), dataset.filter(is_test)))
}

/// Query/gallery protocol split: for every person one random tracklet becomes
/// the query, everything else is gallery.
pub fn query_gallery_split(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if !dataset.is_labeled() {
        return Err(Error::Unlabeled("query/gallery split needs labels".into()));
    }
    let mut per_person: BTreeMap<PersonId, Vec<TrackletId>> = BTreeMap::new();
    for t in dataset.tracklets() {
        per_person
            .entry(t.person_id.unwrap_or_default())
            .or_default()
            .push(t.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query: BTreeSet<TrackletId> = per_person
        .values()
        .map(|ts| *ts.choose(&mut rng).expect("every person has a tracklet"))
        .collect();
    Ok((
        dataset.filter(|s| query.contains(&s.tracklet_id)),
        dataset.filter(|s| !query.contains(&s.tracklet_id)),
    ))
}
