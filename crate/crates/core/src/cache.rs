//! Content placement: sum predicted popularity over a MEN's users, then cache
//! the top-R contents that fit in its storage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::AxisIndex;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// 200 MB.
pub const DEFAULT_CONTENT_SIZE: u64 = 200_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentCatalog {
    pub ids: Vec<u32>,
    /// Uniform size of every content, in bytes.
    pub content_size: u64,
}

impl ContentCatalog {
    pub fn new(mut ids: Vec<u32>, content_size: u64) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if content_size == 0 {
            return Err(Error::Config("content size must be > 0".into()));
        }
        Ok(Self { ids, content_size })
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Aggregated predicted popularity per content id.
pub type Scores = BTreeMap<u32, f64>;

/// `f̂_n^i = Σ_{u ∈ users} f̂_u^i` for every content `i`.
pub fn aggregate_popularity(
    pred: &Matrix,
    user_axis: &AxisIndex,
    content_axis: &AxisIndex,
    users: &[u32],
) -> Result<Scores> {
    if users.is_empty() {
        return Err(Error::Contract(
            "cannot aggregate over an empty user set".into(),
        ));
    }
    if pred.shape() != (user_axis.len(), content_axis.len()) {
        return Err(Error::Shape {
            op: "aggregate_popularity",
            left: pred.shape(),
            right: (user_axis.len(), content_axis.len()),
        });
    }
    let mut sums = vec![0.0; content_axis.len()];
    for &u in users {
        let row = user_axis
            .position(u)
            .ok_or_else(|| Error::Contract(format!("unknown user id {u}")))?;
        for (s, v) in sums.iter_mut().zip(pred.row(row)) {
            *s += v;
        }
    }
    Ok(content_axis.ids().iter().copied().zip(sums).collect())
}

/// Cached contents of one MEN, most popular first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MenPlacement {
    pub capacity_bytes: u64,
    pub contents: Vec<u32>,
}

/// Picks the `R = ⌊capacity / size⌋` highest scores, descending, ties broken
/// by ascending content id.
pub fn place_top_r(
    scores: &Scores,
    capacity_bytes: u64,
    content_size: u64,
) -> Result<MenPlacement> {
    if content_size == 0 {
        return Err(Error::Config("content size must be > 0".into()));
    }
    let r = (capacity_bytes / content_size) as usize;
    let mut ranked: Vec<(u32, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(MenPlacement {
        capacity_bytes,
        contents: ranked.into_iter().take(r).map(|(id, _)| id).collect(),
    })
}

/// Per-MEN placements keyed by `men_id`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlacementPlan(pub BTreeMap<usize, MenPlacement>);

impl PlacementPlan {
    pub fn get(&self, men_id: usize) -> Option<&MenPlacement> {
        self.0.get(&men_id)
    }

    pub fn caches(&self, men_id: usize, content: u32) -> bool {
        self.0
            .get(&men_id)
            .is_some_and(|p| p.contents.contains(&content))
    }

    /// Capacity and duplicate checks for every MEN.
    pub fn validate(&self, content_size: u64) -> Result<()> {
        for (men, p) in &self.0 {
            if p.contents.len() as u64 * content_size > p.capacity_bytes {
                return Err(Error::Contract(format!("MEN {men} exceeds its capacity")));
            }
            let mut ids = p.contents.clone();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != p.contents.len() {
                return Err(Error::Contract(format!("MEN {men} caches a content twice")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a plan with one score table per MEN and a shared capacity.
pub fn plan_from_scores(
    scores: &BTreeMap<usize, Scores>,
    capacity_bytes: u64,
    content_size: u64,
) -> Result<PlacementPlan> {
    scores
        .iter()
        .map(|(&men, s)| Ok((men, place_top_r(s, capacity_bytes, content_size)?)))
        .collect::<Result<BTreeMap<_, _>>>()
        .map(PlacementPlan)
}
