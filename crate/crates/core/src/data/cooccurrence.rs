use std::collections::{BTreeMap, BTreeSet};

use super::{CameraId, Dataset, TrackletId};

/// Which camera relation two overlapping tracklets need to be linked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CooccurrenceScope {
    SameCamera,
    CrossCamera,
    #[default]
    Both,
}

impl CooccurrenceScope {
    fn admits(self, a: CameraId, b: CameraId) -> bool {
        match self {
            CooccurrenceScope::SameCamera => a == b,
            CooccurrenceScope::CrossCamera => a != b,
            CooccurrenceScope::Both => true,
        }
    }
}

/// Symmetric, irreflexive "observed at the same time" relation on tracklets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CooccurrenceIndex {
    scope: CooccurrenceScope,
    links: BTreeMap<TrackletId, BTreeSet<TrackletId>>,
}

static NO_LINKS: BTreeSet<TrackletId> = BTreeSet::new();

impl CooccurrenceIndex {
    pub fn scope(&self) -> CooccurrenceScope {
        self.scope
    }

    pub fn neighbors(&self, tracklet: TrackletId) -> &BTreeSet<TrackletId> {
        self.links.get(&tracklet).unwrap_or(&NO_LINKS)
    }

    pub fn linked(&self, a: TrackletId, b: TrackletId) -> bool {
        self.neighbors(a).contains(&b)
    }

    /// Number of unordered linked pairs.
    pub fn num_links(&self) -> usize {
        self.links.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn iter(&self) -> impl Iterator<Item = (TrackletId, &BTreeSet<TrackletId>)> {
        self.links.iter().map(|(k, v)| (*k, v))
    }
}

/// Links tracklets whose closed time intervals overlap and whose cameras
/// satisfy `scope`. Sweep over tracklets sorted by start time.
pub fn build_cooccurrence(dataset: &Dataset, scope: CooccurrenceScope) -> CooccurrenceIndex {
    let mut order: Vec<_> = dataset.tracklets().iter().collect();
    order.sort_by(|a, b| a.time_start.total_cmp(&b.time_start).then(a.id.cmp(&b.id)));

    let mut links: BTreeMap<TrackletId, BTreeSet<TrackletId>> = BTreeMap::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            if b.time_start > a.time_end {
                break;
            }
            if a.id != b.id && scope.admits(a.camera_id, b.camera_id) {
                links.entry(a.id).or_default().insert(b.id);
                links.entry(b.id).or_default().insert(a.id);
            }
        }
    }
    CooccurrenceIndex { scope, links }
}
