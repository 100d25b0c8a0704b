//! Splits the frames of a motion into generation stages by their distance to the
//! nearest given frame.
//!
//! With `dis(i)` the distance from position `i` to the closest given position and
//! `max_dis` its maximum over the sequence, position `i` belongs to stage
//! `ceil(dis(i) / max_dis * K)`. Given positions have distance 0 and form stage 0.

use serde::{Deserialize, Serialize};

use crate::error::{PmgError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Number of stages actually planned (1 in zero-frame mode).
    pub stages: usize,
    pub requested_stages: usize,
    pub len: usize,
    /// Sorted 1-based given positions.
    pub given: Vec<usize>,
    /// `groups[k - 1]` holds the sorted positions of stage `k`. May be empty.
    pub groups: Vec<Vec<usize>>,
    /// Distance of each position (index `i - 1`) to the nearest given frame.
    pub dis: Vec<usize>,
    pub max_dis: usize,
}

/// Plans `stages` generation stages for a motion of `len` frames.
///
/// Without given frames every frame forms one text-only stage; the distance table then
/// reads 1 everywhere so that the stage formula still holds with a single stage.
pub fn plan_stages(len: usize, given: &[usize], stages: usize) -> Result<StagePlan> {
    if stages == 0 {
        return Err(PmgError::Config("stage count must be at least 1".into()));
    }
    if len == 0 {
        return Err(PmgError::InvalidMotion("motion length must be positive".into()));
    }
    let mut sorted = given.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(PmgError::DuplicatePosition(w[0]));
        }
    }
    if let Some(&p) = sorted.iter().find(|&&p| p == 0 || p > len) {
        return Err(PmgError::InvalidPosition { position: p, len });
    }
    if sorted.len() == len {
        return Err(PmgError::NothingToGenerate);
    }
    if sorted.is_empty() {
        return Ok(StagePlan {
            stages: 1,
            requested_stages: stages,
            len,
            given: sorted,
            groups: vec![(1..=len).collect()],
            dis: vec![1; len],
            max_dis: 1,
        });
    }

    let dis = distance_table(len, &sorted);
    let max_dis = dis.iter().copied().max().unwrap_or(0);
    let mut groups = vec![Vec::new(); stages];
    for (idx, &d) in dis.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let k = (d * stages).div_ceil(max_dis);
        groups[k - 1].push(idx + 1);
    }
    Ok(StagePlan {
        stages,
        requested_stages: stages,
        len,
        given: sorted,
        groups,
        dis,
        max_dis,
    })
}

/// Two sweeps: distance to the closest given frame on the left, then on the right.
fn distance_table(len: usize, sorted_given: &[usize]) -> Vec<usize> {
    let mut dis = vec![usize::MAX; len];
    let mut last: Option<usize> = None;
    let mut g = sorted_given.iter().peekable();
    for (idx, d) in dis.iter_mut().enumerate() {
        let pos = idx + 1;
        if g.peek() == Some(&&pos) {
            last = Some(pos);
            g.next();
        }
        if let Some(l) = last {
            *d = pos - l;
        }
    }
    let mut next: Option<usize> = None;
    let mut g = sorted_given.iter().rev().peekable();
    for idx in (0..len).rev() {
        let pos = idx + 1;
        if g.peek() == Some(&&pos) {
            next = Some(pos);
            g.next();
        }
        if let Some(n) = next {
            dis[idx] = dis[idx].min(n - pos);
        }
    }
    dis
}

impl StagePlan {
    /// Positions of stage `k` (1-based).
    pub fn stage_positions(&self, k: usize) -> Result<&[usize]> {
        if k == 0 || k > self.stages {
            return Err(PmgError::StageOutOfRange {
                stage: k,
                max: self.stages,
            });
        }
        Ok(&self.groups[k - 1])
    }

    /// Stage of a 1-based position; 0 for given frames.
    pub fn stage_of(&self, position: usize) -> usize {
        if self.given.binary_search(&position).is_ok() {
            return 0;
        }
        self.groups
            .iter()
            .position(|g| g.binary_search(&position).is_ok())
            .map(|k| k + 1)
            .expect("every position belongs to a stage")
    }

    /// Sorted positions available as context when generating stage `k`.
    pub fn obtained_positions(&self, k: usize) -> Vec<usize> {
        let mut out = self.given.clone();
        for g in self.groups.iter().take(k.saturating_sub(1)) {
            out.extend_from_slice(g);
        }
        out.sort_unstable();
        out
    }

    pub fn is_zero_frame(&self) -> bool {
        self.given.is_empty()
    }
}
