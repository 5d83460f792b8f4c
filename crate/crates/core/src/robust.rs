//! Box-in-polytope containment through the box support function, box intersections and the
//! closed-loop history used to relax constraints with past confidence sets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::model_bank::{ModelBank, StateBox};

/// Half-space representation `{x | normals·x ≤ offsets}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl Polytope {
    pub fn new(normals: Vec<Vec<f64>>, offsets: Vec<f64>) -> Result<Self> {
        let p = Polytope { normals, offsets };
        p.validate()?;
        Ok(p)
    }

    /// Axis-aligned set `lower ≤ x ≤ upper`; infinite bounds produce no half-space.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(KpcError::dim("polytope bounds", lower.len(), upper.len()));
        }
        let n = lower.len();
        let mut normals = Vec::new();
        let mut offsets = Vec::new();
        for j in 0..n {
            if upper[j].is_finite() {
                let mut row = vec![0.0; n];
                row[j] = 1.0;
                normals.push(row);
                offsets.push(upper[j]);
            }
            if lower[j].is_finite() {
                let mut row = vec![0.0; n];
                row[j] = -1.0;
                normals.push(row);
                offsets.push(-lower[j]);
            }
        }
        if normals.is_empty() {
            return Ok(Polytope { normals, offsets });
        }
        Polytope::new(normals, offsets)
    }

    /// The whole space (no half-spaces).
    pub fn unconstrained() -> Self {
        Polytope {
            normals: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn num_constraints(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.normals.first().map(Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.offsets.len() {
            return Err(KpcError::dim("polytope offsets", self.normals.len(), self.offsets.len()));
        }
        let Some(n) = self.dim() else { return Ok(()) };
        for (i, row) in self.normals.iter().enumerate() {
            if row.len() != n {
                return Err(KpcError::dim("polytope normal", n, row.len()));
            }
            if row.iter().all(|v| *v == 0.0) || row.iter().any(|v| !v.is_finite()) {
                return Err(KpcError::InvalidArgument(format!("half-space {i} has a degenerate normal")));
            }
            if !self.offsets[i].is_finite() {
                return Err(KpcError::InvalidArgument(format!("half-space {i} has a non-finite offset")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &[f64], tol: f64) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(h, o)| dot(h, x) - o <= tol)
    }

    /// Largest half-space violation `max_i (H_iᵀx − h_i)`, or −∞ for the whole space.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(h, o)| dot(h, x) - o)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bounds `(lower, upper)` if every half-space is axis aligned.
    pub fn as_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.dim()?;
        let mut lower = vec![f64::NEG_INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        for (h, o) in self.normals.iter().zip(&self.offsets) {
            let nz: Vec<usize> = (0..n).filter(|&j| h[j] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let j = nz[0];
            if h[j] > 0.0 {
                upper[j] = upper[j].min(o / h[j]);
            } else {
                lower[j] = lower[j].max(o / h[j]);
            }
        }
        Some((lower, upper))
    }

    /// Searches for a point of the polytope by cyclic projection onto the half-spaces.
    ///
    /// Returns the point found, or `None` if no point with violation ≤ 1e−9 appeared.
    pub fn feasibility_probe(&self) -> Option<Vec<f64>> {
        let n = self.dim()?;
        let mut x = vec![0.0; n];
        for _ in 0..10_000 {
            let mut worst: f64 = 0.0;
            for (h, o) in self.normals.iter().zip(&self.offsets) {
                let viol = dot(h, &x) - o;
                if viol > 0.0 {
                    let scale = viol / dot(h, h);
                    for j in 0..n {
                        x[j] -= scale * h[j];
                    }
                    worst = worst.max(viol);
                }
            }
            if worst <= 1e-12 {
                break;
            }
        }
        (self.max_violation(&x) <= 1e-9).then_some(x)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max{Hᵀx | x ∈ box} − h`.
///
/// Closed form: each coordinate takes its upper bound where `H_j > 0` and its lower bound
/// otherwise. For a box centered at F with half-widths β this equals `Σ|H_j|β_j + HᵀF − h`.
pub fn box_support_margin(normal: &[f64], offset: f64, b: &StateBox) -> Result<f64> {
    if normal.len() != b.dim() {
        return Err(KpcError::dim("support margin", b.dim(), normal.len()));
    }
    if let Some(dim) = b.empty_dim() {
        return Err(KpcError::EmptyBox { dim });
    }
    Ok(support_unchecked(normal, offset, b))
}

#[inline]
pub(crate) fn support_unchecked(normal: &[f64], offset: f64, b: &StateBox) -> f64 {
    normal
        .iter()
        .enumerate()
        .map(|(j, h)| if *h > 0.0 { h * b.upper[j] } else { h * b.lower[j] })
        .sum::<f64>()
        - offset
}

/// Support margins of every half-space; all ≤ 0 iff the box lies in the polytope.
pub fn robustify_step(polytope: &Polytope, b: &StateBox) -> Result<Vec<f64>> {
    polytope
        .normals
        .iter()
        .zip(&polytope.offsets)
        .map(|(h, o)| box_support_margin(h, *o, b))
        .collect()
}

/// Intersection of boxes; an empty result is reported as [`KpcError::EmptyIntersection`].
pub fn intersect_boxes(boxes: &[StateBox]) -> Result<StateBox> {
    let first = boxes
        .first()
        .ok_or_else(|| KpcError::InvalidArgument("cannot intersect an empty list of boxes".into()))?;
    let mut out = first.clone();
    for b in &boxes[1..] {
        if b.dim() != out.dim() {
            return Err(KpcError::dim("box intersection", out.dim(), b.dim()));
        }
        for j in 0..out.dim() {
            out.lower[j] = out.lower[j].max(b.lower[j]);
            out.upper[j] = out.upper[j].min(b.upper[j]);
        }
    }
    match out.empty_dim() {
        Some(dim) => Err(KpcError::EmptyIntersection { dim }),
        None => Ok(out),
    }
}

/// One applied closed-loop step: the state at time `time` and the input applied there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub time: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

/// The last (at most N − 1) consecutive feasible closed-loop steps, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SrsHistory {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl SrsHistory {
    /// History for a bank of horizon N keeps N − 1 entries.
    pub fn for_horizon(horizon: usize) -> Self {
        SrsHistory {
            capacity: horizon.saturating_sub(1),
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends a step; a gap in time restarts the history from this entry.
    pub fn push(&mut self, entry: HistoryEntry) {
        if self.capacity == 0 {
            return;
        }
        if let Some(last) = self.entries.back() {
            if last.time + 1 != entry.time {
                self.entries.clear();
            }
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Builds a history from raw entries without repairing gaps.
    pub fn from_entries(capacity: usize, entries: Vec<HistoryEntry>) -> Self {
        SrsHistory {
            capacity,
            entries: entries.into(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    /// Checks that the entries are consecutive and end right before `now`.
    pub fn validate(&self, now: usize) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(KpcError::History(format!(
                "{} entries exceed capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        for (k, e) in self.entries.iter().rev().enumerate() {
            if e.time + k + 1 != now {
                return Err(KpcError::History(format!(
                    "entry at time {} is not consecutive with current time {now}",
                    e.time
                )));
            }
        }
        Ok(())
    }

    /// Entry `k` steps in the past (k = 1 is the previous step).
    pub fn back(&self, k: usize) -> Option<&HistoryEntry> {
        let n = self.entries.len();
        (k >= 1 && k <= n).then(|| &self.entries[n - k])
    }

    /// Prefix `(x_{−k}, u_{−k}, …, u_{−1})` of the feature of a past confidence set.
    pub fn feature_prefix(&self, k: usize) -> Option<Vec<f64>> {
        let start = self.back(k)?;
        let mut z = start.state.clone();
        for j in (1..=k).rev() {
            z.extend_from_slice(&self.back(j)?.input);
        }
        Some(z)
    }
}

/// Every confidence set known to contain the true `t`-step successor of `x0` under `u_seq`.
///
/// The first element is the current box `𝒳_t(x₀, u₀, …, u_{t−1})`; it is followed by
/// `𝒳_i(x_{−i+t}, u_{−i+t}, …, u_{−1}, u₀, …, u_{t−1})` for each usable past step,
/// `i = t+1, …, min(N, t + M)` with M the history length.
pub fn srs_collect(
    bank: &ModelBank,
    history: &SrsHistory,
    now: usize,
    t: usize,
    x0: &[f64],
    u_seq: &[f64],
) -> Result<Vec<StateBox>> {
    history.validate(now)?;
    let mut boxes = vec![bank.confidence_box(t, x0, u_seq)?];
    let last = bank.horizon().min(t + history.len());
    for i in (t + 1)..=last {
        let mut z = history
            .feature_prefix(i - t)
            .ok_or_else(|| KpcError::History(format!("missing entry {} steps back", i - t)))?;
        z.extend_from_slice(u_seq);
        boxes.push(bank.box_at_feature(i, &z)?);
    }
    Ok(boxes)
}
