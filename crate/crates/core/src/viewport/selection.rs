use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ViewportError;
use crate::embedding::Embedding;
use crate::rollout::{ExperienceId, Session};

/// Points closer than this to a polygon edge count as inside.
pub const EDGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrigin {
    Lasso,
    Click,
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub id: String,
    pub members: Vec<ExperienceId>,
    pub origin: SelectionOrigin,
}

impl Selection {
    /// Selection from explicit ids. Duplicates are dropped (first occurrence
    /// kept) and every id must resolve in `session`.
    pub fn from_ids(
        session: &Session,
        ids: impl IntoIterator<Item = ExperienceId>,
        origin: SelectionOrigin,
    ) -> Result<Self, ViewportError> {
        let mut seen = HashSet::new();
        let mut members = Vec::new();
        for id in ids {
            session.resolve(id)?;
            if seen.insert(id) {
                members.push(id);
            }
        }
        Ok(Self {
            id: String::new(),
            members,
            origin,
        })
    }

    pub fn episode(session: &Session, index: usize) -> Result<Self, ViewportError> {
        let ep = session
            .episode(index)
            .ok_or(ViewportError::EpisodeNotFound(index))?;
        Ok(Self {
            id: String::new(),
            members: ep.steps.iter().map(|s| s.id()).collect(),
            origin: SelectionOrigin::Episode,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Twice the signed area of a closed polygon.
fn doubled_area(polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let a = polygon[i];
            let b = polygon[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let s = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (apx - s * abx, apy - s * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Even-odd (ray casting) membership; points on or within
/// [`EDGE_TOLERANCE`] of an edge are inside.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let n = polygon.len();
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if segment_distance(p, a, b) <= EDGE_TOLERANCE {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn validate_polygon(polygon: &[[f64; 2]]) -> Result<(), ViewportError> {
    if polygon.len() < 3 {
        return Err(ViewportError::DegeneratePolygon(format!(
            "{} vertices, need at least 3",
            polygon.len()
        )));
    }
    if polygon.iter().flatten().any(|c| !c.is_finite()) {
        return Err(ViewportError::DegeneratePolygon("non-finite vertex".into()));
    }
    if doubled_area(polygon) == 0.0 {
        return Err(ViewportError::DegeneratePolygon("zero area".into()));
    }
    Ok(())
}

/// Embedding points inside the (implicitly closed) polygon, in embedding
/// order.
pub fn lasso_select(embedding: &Embedding, polygon: &[[f64; 2]]) -> Result<Selection, ViewportError> {
    validate_polygon(polygon)?;
    let members = embedding
        .coords
        .iter()
        .zip(&embedding.ids)
        .filter(|(c, _)| point_in_polygon(**c, polygon))
        .map(|(_, id)| *id)
        .collect();
    Ok(Selection {
        id: String::new(),
        members,
        origin: SelectionOrigin::Lasso,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SelectionRegistry {
    next: u64,
    selections: BTreeMap<String, Selection>,
}

impl SelectionRegistry {
    /// Stores the selection under a fresh id and returns it.
    pub fn insert(&mut self, mut selection: Selection) -> String {
        self.next += 1;
        let id = format!("sel-{}", self.next);
        selection.id = id.clone();
        self.selections.insert(id.clone(), selection);
        id
    }

    pub fn get(&self, id: &str) -> Result<&Selection, ViewportError> {
        self.selections
            .get(id)
            .ok_or_else(|| ViewportError::UnknownSelection(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }
}
