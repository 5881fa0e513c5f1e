//! Detector landmarks → model keypoints, plus IMU calibration.

use crate::quat::{quat_mul, Quat, QuatError};
use crate::skeleton::{joints, IMU_COUNT, JOINT_COUNT};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("landmark {0:?} missing")]
    MissingLandmark(String),
    #[error("frame {0}: all keypoints coincide, cannot normalize")]
    DegenerateFrame(usize),
    #[error("non-finite coordinate in landmark {0:?}")]
    NonFiniteLandmark(String),
    #[error("keypoint buffer length {len} is not frames x {JOINT_COUNT} x 2")]
    BadKeypointShape { len: usize },
    #[error(transparent)]
    Quat(#[from] QuatError),
}

/// Named 2D detector output for one frame, pixels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LandmarkFrame {
    points: BTreeMap<String, [f64; 2]>,
}

impl LandmarkFrame {
    pub fn new() -> LandmarkFrame {
        LandmarkFrame::default()
    }

    pub fn set(&mut self, name: &str, p: [f64; 2]) -> &mut Self {
        self.points.insert(name.to_string(), p);
        self
    }

    fn get(&self, name: &str) -> Result<[f64; 2], PreprocessError> {
        let p = self
            .points
            .get(name)
            .copied()
            .ok_or_else(|| PreprocessError::MissingLandmark(name.to_string()))?;
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(PreprocessError::NonFiniteLandmark(name.to_string()));
        }
        Ok(p)
    }
}

/// Landmark names a frame must provide.
pub const REQUIRED_LANDMARKS: [&str; 14] = [
    "left_hip",
    "right_hip",
    "left_shoulder",
    "right_shoulder",
    "nose",
    "head",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

fn mid(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5]
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Builds the 17 model keypoints for one frame, still in pixels.
///
/// Spine joints are placed along the hip-center → shoulder-center axis at
/// 25% and 75%; the neck sits 33% of the way from the shoulder center to the
/// nose. Every other joint is a direct copy of its detector landmark.
pub fn derive_composite_joints(lm: &LandmarkFrame) -> Result<[[f64; 2]; JOINT_COUNT], PreprocessError> {
    let hip_l = lm.get("left_hip")?;
    let hip_r = lm.get("right_hip")?;
    let sh_l = lm.get("left_shoulder")?;
    let sh_r = lm.get("right_shoulder")?;
    let nose = lm.get("nose")?;
    let hip_c = mid(hip_l, hip_r);
    let sh_c = mid(sh_l, sh_r);

    let mut out = [[0.0; 2]; JOINT_COUNT];
    out[joints::HIPS] = hip_c;
    out[joints::SPINE] = lerp(hip_c, sh_c, 0.25);
    out[joints::SPINE3] = lerp(hip_c, sh_c, 0.75);
    out[joints::NECK] = lerp(sh_c, nose, 0.33);
    out[joints::HEAD] = lm.get("head")?;
    out[joints::RIGHT_UP_LEG] = hip_r;
    out[joints::LEFT_UP_LEG] = hip_l;
    out[joints::RIGHT_LEG] = lm.get("right_knee")?;
    out[joints::LEFT_LEG] = lm.get("left_knee")?;
    out[joints::RIGHT_FOOT] = lm.get("right_ankle")?;
    out[joints::LEFT_FOOT] = lm.get("left_ankle")?;
    out[joints::LEFT_ARM] = sh_l;
    out[joints::RIGHT_ARM] = sh_r;
    out[joints::LEFT_FORE_ARM] = lm.get("left_elbow")?;
    out[joints::RIGHT_FORE_ARM] = lm.get("right_elbow")?;
    out[joints::LEFT_HAND] = lm.get("left_wrist")?;
    out[joints::RIGHT_HAND] = lm.get("right_wrist")?;
    Ok(out)
}

/// Per-frame normalization: subtract the Hips joint and divide by the larger
/// side of the frame's keypoint bounding box. Scale- and translation-
/// invariant; the root lands exactly at (0, 0).
///
/// `kps` is row-major `[frames, 17, 2]`.
pub fn normalize_keypoints(kps: &[f64], frames: usize) -> Result<Vec<f64>, PreprocessError> {
    if kps.len() != frames * JOINT_COUNT * 2 || frames == 0 {
        return Err(PreprocessError::BadKeypointShape { len: kps.len() });
    }
    let mut out = vec![0.0; kps.len()];
    for t in 0..frames {
        let f = &kps[t * JOINT_COUNT * 2..(t + 1) * JOINT_COUNT * 2];
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..JOINT_COUNT {
            xmin = xmin.min(f[j * 2]);
            xmax = xmax.max(f[j * 2]);
            ymin = ymin.min(f[j * 2 + 1]);
            ymax = ymax.max(f[j * 2 + 1]);
        }
        let scale = (xmax - xmin).max(ymax - ymin);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(PreprocessError::DegenerateFrame(t));
        }
        let root = [f[joints::HIPS * 2], f[joints::HIPS * 2 + 1]];
        let o = &mut out[t * JOINT_COUNT * 2..(t + 1) * JOINT_COUNT * 2];
        for j in 0..JOINT_COUNT {
            o[j * 2] = (f[j * 2] - root[0]) / scale;
            o[j * 2 + 1] = (f[j * 2 + 1] - root[1]) / scale;
        }
    }
    Ok(out)
}

/// Fixed per-sensor mounting rotations plus the one global→camera rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub bone_to_imu: [Quat; IMU_COUNT],
    pub sensor_to_global: [Quat; IMU_COUNT],
    pub global_to_camera: Quat,
}

impl CalibrationSet {
    pub fn identity() -> CalibrationSet {
        CalibrationSet {
            bone_to_imu: [Quat::IDENTITY; IMU_COUNT],
            sensor_to_global: [Quat::IDENTITY; IMU_COUNT],
            global_to_camera: Quat::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<(), QuatError> {
        for q in self
            .bone_to_imu
            .iter()
            .chain(self.sensor_to_global.iter())
            .chain(std::iter::once(&self.global_to_camera))
        {
            Quat::new_checked(q.w, q.x, q.y, q.z)?;
        }
        Ok(())
    }
}

/// One link of the mounting chain: bone→imu ⊗ measurement ⊗ sensor→global ⊗
/// global→camera, yielding the bone orientation in the camera frame.
pub fn bone_orientation_camera(
    q_bi: Quat,
    q_is: Quat,
    q_sg: Quat,
    q_gc: Quat,
) -> Result<Quat, QuatError> {
    let a = quat_mul(q_bi, q_is)?;
    let b = quat_mul(a, q_sg)?;
    quat_mul(b, q_gc)
}

/// Applies the chain to a whole `[frames, 6, 4]` measurement stream.
pub fn calibrate_imu_sequence(
    raw: &[f64],
    frames: usize,
    cal: &CalibrationSet,
) -> Result<Vec<f64>, PreprocessError> {
    if raw.len() != frames * IMU_COUNT * 4 {
        return Err(PreprocessError::BadKeypointShape { len: raw.len() });
    }
    cal.validate()?;
    let mut out = vec![0.0; raw.len()];
    for t in 0..frames {
        for s in 0..IMU_COUNT {
            let off = (t * IMU_COUNT + s) * 4;
            let q_is = Quat::new_checked(raw[off], raw[off + 1], raw[off + 2], raw[off + 3])?;
            let q = bone_orientation_camera(
                cal.bone_to_imu[s],
                q_is,
                cal.sensor_to_global[s],
                cal.global_to_camera,
            )?;
            out[off] = q.w;
            out[off + 1] = q.x;
            out[off + 2] = q.y;
            out[off + 3] = q.z;
        }
    }
    Ok(out)
}
