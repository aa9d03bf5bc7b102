use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    /// Cumulative distance from the owning segment, in miles.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Segment adjacency with distance-ordered upstream and downstream lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub segments: Vec<String>,
    pub upstream: BTreeMap<String, Vec<Neighbor>>,
    pub downstream: BTreeMap<String, Vec<Neighbor>>,
}

impl RoadGraph {
    /// Builds the graph from `(segment, neighbor, direction, miles)` edges.
    ///
    /// Each neighbor list is sorted by distance and must be strictly
    /// increasing; self-loops are rejected.
    pub fn from_edges<I>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, Direction, f64)>,
    {
        let mut segments = BTreeSet::new();
        let mut upstream: BTreeMap<String, Vec<Neighbor>> = BTreeMap::new();
        let mut downstream: BTreeMap<String, Vec<Neighbor>> = BTreeMap::new();
        for (seg, nb, dir, distance) in edges {
            if seg == nb {
                return Err(Error::InvalidGraph(format!("self-loop on {seg}")));
            }
            if !(distance > 0.0) || !distance.is_finite() {
                return Err(Error::InvalidGraph(format!(
                    "distance {distance} from {seg} to {nb} must be positive"
                )));
            }
            segments.insert(seg.clone());
            segments.insert(nb.clone());
            let list = match dir {
                Direction::Up => upstream.entry(seg).or_default(),
                Direction::Down => downstream.entry(seg).or_default(),
            };
            list.push(Neighbor { id: nb, distance });
        }
        for (seg, list) in upstream.iter_mut().chain(downstream.iter_mut()) {
            list.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            if list.windows(2).any(|w| w[0].distance >= w[1].distance) {
                return Err(Error::InvalidGraph(format!(
                    "neighbor distances of {seg} are not strictly increasing"
                )));
            }
        }
        Ok(Self {
            segments: segments.into_iter().collect(),
            upstream,
            downstream,
        })
    }

    pub fn contains(&self, segment: &str) -> bool {
        self.segments.iter().any(|s| s == segment)
    }

    pub fn upstream_of(&self, segment: &str) -> &[Neighbor] {
        self.upstream.get(segment).map_or(&[], Vec::as_slice)
    }

    pub fn downstream_of(&self, segment: &str) -> &[Neighbor] {
        self.downstream.get(segment).map_or(&[], Vec::as_slice)
    }

    /// Upstream segments within `max_miles`, nearest first.
    pub fn upstream_within(&self, segment: &str, max_miles: f64) -> Vec<&Neighbor> {
        self.upstream_of(segment)
            .iter()
            .take_while(|n| n.distance <= max_miles)
            .collect()
    }
}
