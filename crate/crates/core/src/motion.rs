//! Skeleton, per-frame feature layout, motion sequences and keyframes.
//!
//! Every frame is a flat vector of `d_m = 6J + 5` features:
//!
//! | range                         | content                                        |
//! |-------------------------------|------------------------------------------------|
//! | `0`                           | root yaw velocity (rad/frame)                  |
//! | `1..3`                        | root planar velocity, in the previous heading  |
//! | `3`                           | root height                                    |
//! | `4..4+3(J-1)`                 | local positions of the non-root joints         |
//! | next `3J`                     | joint velocities in the current heading frame  |
//! | `6J+1`                        | absolute root yaw                              |
//! | `6J+2..6J+5`                  | absolute root position                         |
//!
//! Velocities at the first frame are zero. The absolute block is redundant with the
//! integrated root velocities and pins the root of a frame that is seen in isolation.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{PmgError, Result};

pub const DEFAULT_FPS: u32 = 20;
pub const DEFAULT_MAX_LEN: usize = 196;
/// Tolerance for the root-velocity integration check.
pub const ROOT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let skeleton = Self {
            joint_names,
            parents,
            offsets,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    /// Root, head, two hands and two feet, all attached to the root.
    pub fn toy() -> Self {
        let names = ["pelvis", "head", "left_hand", "right_hand", "left_foot", "right_foot"];
        Self {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            parents: vec![None, Some(0), Some(0), Some(0), Some(0), Some(0)],
            offsets: vec![
                [0.0, 0.0, 0.0],
                [0.0, 0.6, 0.0],
                [0.3, -0.15, 0.0],
                [-0.3, -0.15, 0.0],
                [0.1, -0.9, 0.0],
                [-0.1, -0.9, 0.0],
            ],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.num_joints())
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_names.len();
        if j < 2 {
            return Err(PmgError::InvalidSkeleton("need at least two joints".into()));
        }
        if self.parents.len() != j || self.offsets.len() != j {
            return Err(PmgError::InvalidSkeleton(
                "joint_names, parents and offsets differ in length".into(),
            ));
        }
        if self.parents[0].is_some() {
            return Err(PmgError::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for idx in 1..j {
            // walking up must reach the root within j hops
            let mut cur = idx;
            let mut hops = 0;
            while let Some(p) = self.parents[cur] {
                if p >= j {
                    return Err(PmgError::InvalidSkeleton(format!(
                        "joint {idx} has out-of-range parent {p}"
                    )));
                }
                cur = p;
                hops += 1;
                if hops > j {
                    return Err(PmgError::InvalidSkeleton(format!("cycle through joint {idx}")));
                }
            }
            if cur != 0 {
                return Err(PmgError::InvalidSkeleton(format!(
                    "joint {idx} is not connected to the root"
                )));
            }
            if norm3(self.offsets[idx]) <= 0.0 {
                return Err(PmgError::InvalidSkeleton(format!(
                    "joint {idx} has a zero-length offset"
                )));
            }
        }
        Ok(())
    }

    /// Rest-pose position of every joint relative to the root.
    pub fn rest_positions(&self) -> Vec<[f64; 3]> {
        (0..self.num_joints())
            .map(|j| {
                let mut acc = [0.0; 3];
                let mut cur = j;
                while let Some(p) = self.parents[cur] {
                    for c in 0..3 {
                        acc[c] += self.offsets[cur][c];
                    }
                    cur = p;
                }
                acc
            })
            .collect()
    }

    /// Longest chain length from the root; no local joint position of a rigid pose exceeds it.
    pub fn reach(&self) -> f64 {
        (0..self.num_joints())
            .map(|j| {
                let mut len = 0.0;
                let mut cur = j;
                while let Some(p) = self.parents[cur] {
                    len += norm3(self.offsets[cur]);
                    cur = p;
                }
                len
            })
            .fold(0.0, f64::max)
    }
}

/// Channel offsets of the per-frame feature vector for a skeleton with `J` joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub const ROOT_YAW_VEL: usize = 0;
    pub const ROOT_PLANAR_VEL: usize = 1;
    pub const ROOT_HEIGHT: usize = 3;
    pub const LOCAL_POS: usize = 4;

    pub fn new(joints: usize) -> Self {
        Self { joints }
    }

    pub fn dim(&self) -> usize {
        6 * self.joints + 5
    }

    pub fn local_pos_len(&self) -> usize {
        3 * (self.joints - 1)
    }

    pub fn joint_vel(&self) -> usize {
        Self::LOCAL_POS + self.local_pos_len()
    }

    pub fn abs_yaw(&self) -> usize {
        self.joint_vel() + 3 * self.joints
    }

    pub fn abs_pos(&self) -> usize {
        self.abs_yaw() + 1
    }

    /// Channels a keyframe provides: absolute root and local joint positions.
    pub fn keyframe_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dim()];
        for m in &mut mask[Self::LOCAL_POS..Self::LOCAL_POS + self.local_pos_len()] {
            *m = true;
        }
        for m in &mut mask[self.abs_yaw()..self.dim()] {
            *m = true;
        }
        mask
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Maps a planar `(x, z)` vector from the heading frame of `yaw` to world axes.
/// Yaw 0 faces +z; positive yaw turns toward +x, which is the character's left.
#[inline]
pub fn rotate_planar(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (x * c + z * s, -x * s + z * c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub features: Array2<f64>,
    pub fps: u32,
    pub skeleton: Skeleton,
}

impl MotionSequence {
    pub fn new(features: Array2<f64>, fps: u32, skeleton: Skeleton) -> Result<Self> {
        let motion = Self {
            features,
            fps,
            skeleton,
        };
        motion.validate(DEFAULT_MAX_LEN)?;
        Ok(motion)
    }

    /// Builds a motion from absolute root trajectories and local joint positions,
    /// deriving every velocity channel.
    pub fn from_positions(
        root_yaw: &[f64],
        root_pos: &[[f64; 3]],
        local: &[Vec<[f64; 3]>],
        fps: u32,
        skeleton: Skeleton,
    ) -> Result<Self> {
        let layout = skeleton.layout();
        let n = root_yaw.len();
        if root_pos.len() != n || local.len() != n {
            return Err(PmgError::InvalidMotion("trajectory lengths differ".into()));
        }
        let mut features = Array2::zeros((n, layout.dim()));
        for i in 0..n {
            let mut row = features.row_mut(i);
            if local[i].len() != layout.joints - 1 {
                return Err(PmgError::InvalidMotion(format!(
                    "frame {i} has {} local joints, expected {}",
                    local[i].len(),
                    layout.joints - 1
                )));
            }
            for (j, p) in local[i].iter().enumerate() {
                for c in 0..3 {
                    row[FeatureLayout::LOCAL_POS + 3 * j + c] = p[c];
                }
            }
            row[layout.abs_yaw()] = root_yaw[i];
            for c in 0..3 {
                row[layout.abs_pos() + c] = root_pos[i][c];
            }
        }
        recompute_derived(&mut features, &layout);
        Self::new(features, fps, skeleton)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn layout(&self) -> FeatureLayout {
        self.skeleton.layout()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        self.skeleton.validate()?;
        let n = self.len();
        if n == 0 || n > max_len {
            return Err(PmgError::InvalidMotion(format!(
                "length {n} outside 1..={max_len}"
            )));
        }
        if self.fps == 0 {
            return Err(PmgError::InvalidMotion("fps must be positive".into()));
        }
        let d = self.layout().dim();
        if self.features.ncols() != d {
            return Err(PmgError::InvalidMotion(format!(
                "{} feature channels, skeleton requires {d}",
                self.features.ncols()
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(PmgError::InvalidMotion(format!(
                "non-finite feature at frame {}",
                i / d
            )));
        }
        Ok(())
    }

    pub fn root_yaw(&self, frame: usize) -> f64 {
        self.features[[frame, self.layout().abs_yaw()]]
    }

    pub fn root_position(&self, frame: usize) -> [f64; 3] {
        let a = self.layout().abs_pos();
        let row = self.features.row(frame);
        [row[a], row[a + 1], row[a + 2]]
    }

    /// Largest deviation between the absolute root block and the root trajectory
    /// obtained by integrating velocities from the first frame.
    pub fn root_integration_error(&self) -> f64 {
        let layout = self.layout();
        let f = &self.features;
        let mut yaw = f[[0, layout.abs_yaw()]];
        let mut x = f[[0, layout.abs_pos()]];
        let mut z = f[[0, layout.abs_pos() + 2]];
        let mut err: f64 = 0.0;
        for i in 0..self.len() {
            if i > 0 {
                let (dx, dz) = rotate_planar(
                    yaw,
                    f[[i, FeatureLayout::ROOT_PLANAR_VEL]],
                    f[[i, FeatureLayout::ROOT_PLANAR_VEL + 1]],
                );
                x += dx;
                z += dz;
                yaw += f[[i, FeatureLayout::ROOT_YAW_VEL]];
            }
            let y = f[[i, FeatureLayout::ROOT_HEIGHT]];
            let abs = [
                f[[i, layout.abs_yaw()]],
                f[[i, layout.abs_pos()]],
                f[[i, layout.abs_pos() + 1]],
                f[[i, layout.abs_pos() + 2]],
            ];
            for (a, b) in abs.iter().zip([yaw, x, y, z]) {
                err = err.max((a - b).abs());
            }
        }
        err
    }
}

/// World positions `N × J × 3` of every joint.
pub fn forward_kinematics(motion: &MotionSequence) -> Array3<f64> {
    world_positions(&motion.features, &motion.layout())
}

pub(crate) fn world_positions(features: &Array2<f64>, layout: &FeatureLayout) -> Array3<f64> {
    let n = features.nrows();
    let j = layout.joints;
    let mut out = Array3::zeros((n, j, 3));
    for (i, row) in features.axis_iter(Axis(0)).enumerate() {
        let yaw = row[layout.abs_yaw()];
        let root = [
            row[layout.abs_pos()],
            row[layout.abs_pos() + 1],
            row[layout.abs_pos() + 2],
        ];
        for c in 0..3 {
            out[[i, 0, c]] = root[c];
        }
        for jj in 1..j {
            let base = FeatureLayout::LOCAL_POS + 3 * (jj - 1);
            let (wx, wz) = rotate_planar(yaw, row[base], row[base + 2]);
            out[[i, jj, 0]] = root[0] + wx;
            out[[i, jj, 1]] = root[1] + row[base + 1];
            out[[i, jj, 2]] = root[2] + wz;
        }
    }
    out
}

/// Rewrites every velocity channel and the root height from the absolute root block
/// and the local joint positions.
pub fn recompute_derived(features: &mut Array2<f64>, layout: &FeatureLayout) {
    let all = vec![true; features.nrows()];
    recompute_derived_at(features, layout, &all);
}

/// Like [`recompute_derived`], but joint velocities are only rewritten on frames where
/// `joints[i]` is set; other frames keep theirs. Root channels are always rewritten.
pub fn recompute_derived_at(features: &mut Array2<f64>, layout: &FeatureLayout, joints: &[bool]) {
    let n = features.nrows();
    let world = world_positions(features, layout);
    let jv = layout.joint_vel();
    for i in 0..n {
        let yaw = features[[i, layout.abs_yaw()]];
        features[[i, FeatureLayout::ROOT_HEIGHT]] = features[[i, layout.abs_pos() + 1]];
        if i == 0 {
            features[[i, FeatureLayout::ROOT_YAW_VEL]] = 0.0;
            features[[i, FeatureLayout::ROOT_PLANAR_VEL]] = 0.0;
            features[[i, FeatureLayout::ROOT_PLANAR_VEL + 1]] = 0.0;
            for c in 0..3 * layout.joints {
                features[[i, jv + c]] = 0.0;
            }
            continue;
        }
        let prev_yaw = features[[i - 1, layout.abs_yaw()]];
        features[[i, FeatureLayout::ROOT_YAW_VEL]] = yaw - prev_yaw;
        let dx = features[[i, layout.abs_pos()]] - features[[i - 1, layout.abs_pos()]];
        let dz = features[[i, layout.abs_pos() + 2]] - features[[i - 1, layout.abs_pos() + 2]];
        let (vx, vz) = to_heading(prev_yaw, dx, dz);
        features[[i, FeatureLayout::ROOT_PLANAR_VEL]] = vx;
        features[[i, FeatureLayout::ROOT_PLANAR_VEL + 1]] = vz;
        if !joints[i] {
            continue;
        }
        for j in 0..layout.joints {
            let d = [
                world[[i, j, 0]] - world[[i - 1, j, 0]],
                world[[i, j, 1]] - world[[i - 1, j, 1]],
                world[[i, j, 2]] - world[[i - 1, j, 2]],
            ];
            let (lx, lz) = to_heading(yaw, d[0], d[2]);
            features[[i, jv + 3 * j]] = lx;
            features[[i, jv + 3 * j + 1]] = d[1];
            features[[i, jv + 3 * j + 2]] = lz;
        }
    }
}

/// Rebuilds the absolute root yaw and planar position by integrating the root
/// velocity channels, so that stitched segments move continuously. The trajectory
/// passes exactly through the absolute root of every `anchors` row (0-based, sorted);
/// the integration residual between two anchors is spread linearly over the frames
/// between them. Without anchors the first frame is the starting point.
pub fn anchor_root(features: &mut Array2<f64>, layout: &FeatureLayout, anchors: &[usize]) {
    let n = features.nrows();
    if n == 0 {
        return;
    }
    let (ya, xa, za) = (layout.abs_yaw(), layout.abs_pos(), layout.abs_pos() + 2);
    let step = |f: &Array2<f64>, i: usize, s: [f64; 3]| {
        let (dx, dz) = rotate_planar(
            s[0],
            f[[i, FeatureLayout::ROOT_PLANAR_VEL]],
            f[[i, FeatureLayout::ROOT_PLANAR_VEL + 1]],
        );
        [s[0] + f[[i, FeatureLayout::ROOT_YAW_VEL]], s[1] + dx, s[2] + dz]
    };
    let back = |f: &Array2<f64>, i: usize, s: [f64; 3]| {
        let yaw = s[0] - f[[i, FeatureLayout::ROOT_YAW_VEL]];
        let (dx, dz) = rotate_planar(
            yaw,
            f[[i, FeatureLayout::ROOT_PLANAR_VEL]],
            f[[i, FeatureLayout::ROOT_PLANAR_VEL + 1]],
        );
        [yaw, s[1] - dx, s[2] - dz]
    };
    let state = |f: &Array2<f64>, i: usize| [f[[i, ya]], f[[i, xa]], f[[i, za]]];
    let first = anchors.first().copied().unwrap_or(0);
    let mut out = vec![[0.0; 3]; n];
    out[first] = state(features, first);
    for i in (0..first).rev() {
        out[i] = back(features, i + 1, out[i + 1]);
    }
    let mut start = first;
    for &end in anchors.iter().skip(1) {
        let mut s = out[start];
        for i in start + 1..=end {
            s = step(features, i, s);
            out[i] = s;
        }
        let target = state(features, end);
        let residual = [target[0] - s[0], target[1] - s[1], target[2] - s[2]];
        let span = (end - start) as f64;
        for (i, o) in out.iter_mut().enumerate().take(end).skip(start + 1) {
            let w = (i - start) as f64 / span;
            for c in 0..3 {
                o[c] += w * residual[c];
            }
        }
        out[end] = target;
        start = end;
    }
    for i in start + 1..n {
        out[i] = step(features, i, out[i - 1]);
    }
    for (i, s) in out.iter().enumerate() {
        features[[i, ya]] = s[0];
        features[[i, xa]] = s[1];
        features[[i, za]] = s[2];
    }
}

/// World planar vector expressed in the heading frame of `yaw`.
#[inline]
pub fn to_heading(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    rotate_planar(-yaw, x, z)
}

/// A partial pose pinned to a 1-based frame position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSpec {
    pub position: usize,
    pub root_yaw: f64,
    pub root_position: [f64; 3],
    pub local_positions: Vec<f64>,
    #[serde(default)]
    pub channel_mask: Vec<bool>,
}

impl KeyframeSpec {
    /// Projects frame `position` (1-based) of `motion` onto the keyframe channels.
    pub fn from_motion(motion: &MotionSequence, position: usize) -> Result<Self> {
        if position == 0 || position > motion.len() {
            return Err(PmgError::InvalidPosition {
                position,
                len: motion.len(),
            });
        }
        let layout = motion.layout();
        let row = motion.features.row(position - 1);
        Ok(Self {
            position,
            root_yaw: row[layout.abs_yaw()],
            root_position: motion.root_position(position - 1),
            local_positions: row
                .slice(ndarray::s![
                    FeatureLayout::LOCAL_POS..FeatureLayout::LOCAL_POS + layout.local_pos_len()
                ])
                .to_vec(),
            channel_mask: layout.keyframe_mask(),
        })
    }

    pub fn validate(&self, layout: &FeatureLayout, len: usize) -> Result<()> {
        if self.position == 0 || self.position > len {
            return Err(PmgError::InvalidPosition {
                position: self.position,
                len,
            });
        }
        if self.local_positions.len() != layout.local_pos_len() {
            return Err(PmgError::schema(
                "local_positions",
                format!(
                    "expected {} values, got {}",
                    layout.local_pos_len(),
                    self.local_positions.len()
                ),
            ));
        }
        if !self.channel_mask.is_empty() && self.channel_mask != layout.keyframe_mask() {
            return Err(PmgError::schema(
                "channel_mask",
                "must mark exactly the absolute root and local position channels",
            ));
        }
        let finite = self.root_yaw.is_finite()
            && self.root_position.iter().all(|v| v.is_finite())
            && self.local_positions.iter().all(|v| v.is_finite());
        if !finite {
            return Err(PmgError::schema("local_positions", "non-finite value"));
        }
        Ok(())
    }

    /// Full-width feature row with the provided channels set and every other channel zero.
    pub fn partial_features(&self, layout: &FeatureLayout) -> Vec<f64> {
        let mut row = vec![0.0; layout.dim()];
        row[FeatureLayout::LOCAL_POS..FeatureLayout::LOCAL_POS + layout.local_pos_len()]
            .copy_from_slice(&self.local_positions);
        row[layout.abs_yaw()] = self.root_yaw;
        row[layout.abs_pos()..layout.abs_pos() + 3].copy_from_slice(&self.root_position);
        row
    }

    /// Values of the provided channels in channel order.
    pub fn given_values(&self, layout: &FeatureLayout) -> Vec<(usize, f64)> {
        let row = self.partial_features(layout);
        layout
            .keyframe_mask()
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(c, _)| (c, row[c]))
            .collect()
    }
}

/// Serializes a motion into the JSON motion-file format.
pub fn encode_motion_file(motion: &MotionSequence) -> Result<Vec<u8>> {
    motion.validate(usize::MAX)?;
    Ok(serde_json::to_vec(&motion_to_json(motion))?)
}

pub fn motion_to_json(motion: &MotionSequence) -> Value {
    let frames: Vec<Vec<f64>> = motion
        .features
        .axis_iter(Axis(0))
        .map(|r| r.to_vec())
        .collect();
    json!({
        "fps": motion.fps,
        "skeleton": motion.skeleton,
        "frames": frames,
    })
}

pub fn decode_motion_file(bytes: &[u8]) -> Result<MotionSequence> {
    let value: Value = serde_json::from_slice(bytes)?;
    motion_from_json(&value)
}

pub fn motion_from_json(value: &Value) -> Result<MotionSequence> {
    let obj = value
        .as_object()
        .ok_or_else(|| PmgError::schema("$", "expected a JSON object"))?;
    let fps = obj
        .get("fps")
        .ok_or_else(|| PmgError::schema("fps", "missing"))?
        .as_u64()
        .filter(|v| *v > 0 && *v <= u32::MAX as u64)
        .ok_or_else(|| PmgError::schema("fps", "expected a positive integer"))? as u32;
    let skeleton: Skeleton = serde_json::from_value(
        obj.get("skeleton")
            .ok_or_else(|| PmgError::schema("skeleton", "missing"))?
            .clone(),
    )
    .map_err(|e| PmgError::schema("skeleton", e.to_string()))?;
    skeleton
        .validate()
        .map_err(|e| PmgError::schema("skeleton", e.to_string()))?;
    let d = skeleton.layout().dim();
    let frames = obj
        .get("frames")
        .ok_or_else(|| PmgError::schema("frames", "missing"))?
        .as_array()
        .ok_or_else(|| PmgError::schema("frames", "expected an array"))?;
    if frames.is_empty() {
        return Err(PmgError::schema("frames", "motion must have at least one frame"));
    }
    let mut features = Array2::zeros((frames.len(), d));
    for (i, frame) in frames.iter().enumerate() {
        let row = frame
            .as_array()
            .filter(|r| r.len() == d)
            .ok_or_else(|| {
                PmgError::schema(format!("frames[{i}]"), format!("expected {d} numbers"))
            })?;
        for (c, v) in row.iter().enumerate() {
            features[[i, c]] = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| PmgError::schema(format!("frames[{i}][{c}]"), "expected a finite number"))?;
        }
    }
    let motion = MotionSequence {
        features,
        fps,
        skeleton,
    };
    motion
        .validate(usize::MAX)
        .map_err(|e| PmgError::schema("frames", e.to_string()))?;
    Ok(motion)
}

/// Local joint positions of a frame as 3-vectors, root excluded.
pub fn local_joints(row: ArrayView1<f64>, layout: &FeatureLayout) -> Vec<[f64; 3]> {
    (0..layout.joints - 1)
        .map(|j| {
            let b = FeatureLayout::LOCAL_POS + 3 * j;
            [row[b], row[b + 1], row[b + 2]]
        })
        .collect()
}
