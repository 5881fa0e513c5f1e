//! Seeded synthetic motion: a rigid articulated body driven by smooth
//! sinusoidal joint angles, projected orthographically for the 2D stream and
//! instrumented with six segment-orientation sensors.

use crate::dataset::Sequence;
use crate::preprocess::{normalize_keypoints, PreprocessError};
use crate::quat::{quat_mul, Quat};
use crate::skeleton::{default_topology, joints, IMU_COUNT, JOINT_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("noise must be ≥ 0, got {0}")]
    NegativeNoise(f64),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Rest-pose offset of each joint from its parent, in the parent's frame.
/// Proportions of a standing figure; +y up, +x subject-left, +z toward the
/// camera (dropped by the orthographic projection).
const BONE_OFFSETS: [[f64; 3]; JOINT_COUNT] = [
    [0.0, 0.0, 0.0],      // Hips (root)
    [-0.10, -0.04, 0.0],  // RightUpLeg
    [0.0, -0.42, 0.0],    // RightLeg
    [0.0, -0.41, 0.0],    // RightFoot
    [0.10, -0.04, 0.0],   // LeftUpLeg
    [0.0, -0.42, 0.0],    // LeftLeg
    [0.0, -0.41, 0.0],    // LeftFoot
    [0.0, 0.11, 0.0],     // Spine
    [0.0, 0.24, 0.0],     // Spine3
    [0.0, 0.12, 0.0],     // Neck
    [0.0, 0.14, 0.0],     // Head
    [0.16, 0.04, 0.0],    // LeftArm
    [0.27, 0.0, 0.0],     // LeftForeArm
    [0.25, 0.0, 0.0],     // LeftHand
    [-0.16, 0.04, 0.0],   // RightArm
    [-0.27, 0.0, 0.0],    // RightForeArm
    [-0.25, 0.0, 0.0],    // RightHand
];

/// Which segment's world orientation each sensor reports.
const SENSOR_SEGMENTS: [usize; IMU_COUNT] = [
    joints::HIPS,
    joints::SPINE3,
    joints::LEFT_LEG,
    joints::RIGHT_LEG,
    joints::LEFT_FORE_ARM,
    joints::RIGHT_FORE_ARM,
];

struct JointMotion {
    axis: [f64; 3],
    // up to three (amplitude, cycles-per-frame, phase) partials
    partials: Vec<(f64, f64, f64)>,
}

impl JointMotion {
    fn angle(&self, t: f64) -> f64 {
        self.partials
            .iter()
            .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum()
    }
}

fn unit_vec<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] =
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Deterministic paired sequence. `noise` is the standard deviation, in
/// radians, of an angular perturbation applied to each sensor reading;
/// `noise = 0` leaves the stream exactly equal to the segment orientations.
pub fn synth_sequence(seed: u64, frames: usize, noise: f64) -> Result<Sequence, SynthError> {
    if frames < 2 {
        return Err(SynthError::TooShort(frames));
    }
    if !(noise >= 0.0) {
        return Err(SynthError::NegativeNoise(noise));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = default_topology();

    let motions: Vec<JointMotion> = (0..JOINT_COUNT)
        .map(|_| {
            let axis = unit_vec(&mut rng);
            let count = rng.gen_range(1..=3);
            let partials = (0..count)
                .map(|_| {
                    let amp = rng.gen_range(0.05..0.35);
                    let freq = rng.gen_range(0.004..0.03);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (amp, freq, phase)
                })
                .collect();
            JointMotion { axis, partials }
        })
        .collect();

    let mut raw2d = vec![0.0; frames * JOINT_COUNT * 2];
    let mut imu = vec![0.0; frames * IMU_COUNT * 4];
    let mut gt3d = vec![0.0; frames * JOINT_COUNT * 3];

    let mut world_rot = [Quat::IDENTITY; JOINT_COUNT];
    let mut world_pos = [[0.0f64; 3]; JOINT_COUNT];

    // Noise draws happen per frame per sensor in fixed order, so two runs
    // with one seed are bitwise identical.
    for t in 0..frames {
        let tf = t as f64;
        for j in 0..JOINT_COUNT {
            let local = Quat::from_axis_angle(motions[j].axis, motions[j].angle(tf));
            match topo.parent[j] {
                None => {
                    world_rot[j] = local;
                    world_pos[j] = [0.0, 1.0, 0.0];
                }
                Some(p) => {
                    world_rot[j] = quat_mul(world_rot[p], local).expect("unit by construction");
                    let limb = world_rot[p].rotate(BONE_OFFSETS[j]);
                    world_pos[j] = [
                        world_pos[p][0] + limb[0],
                        world_pos[p][1] + limb[1],
                        world_pos[p][2] + limb[2],
                    ];
                }
            }
        }
        let root = world_pos[joints::HIPS];
        for j in 0..JOINT_COUNT {
            raw2d[(t * JOINT_COUNT + j) * 2] = world_pos[j][0];
            raw2d[(t * JOINT_COUNT + j) * 2 + 1] = world_pos[j][1];
            let off = (t * JOINT_COUNT + j) * 3;
            gt3d[off] = world_pos[j][0] - root[0];
            gt3d[off + 1] = world_pos[j][1] - root[1];
            gt3d[off + 2] = world_pos[j][2] - root[2];
        }
        for (s, &seg) in SENSOR_SEGMENTS.iter().enumerate() {
            let mut q = world_rot[seg];
            if noise > 0.0 {
                let axis = unit_vec(&mut rng);
                let angle: f64 = {
                    // Box-Muller from two uniform draws keeps rand_distr out
                    // of the hot path and stays reproducible.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    (-2.0f64 * u1.ln()).sqrt() * u2.cos() * noise
                };
                q = quat_mul(Quat::from_axis_angle(axis, angle), q).expect("unit by construction");
            }
            let q = q.canonical();
            let off = (t * IMU_COUNT + s) * 4;
            imu[off] = q.w;
            imu[off + 1] = q.x;
            imu[off + 2] = q.y;
            imu[off + 3] = q.z;
        }
    }

    let keypoints = normalize_keypoints(&raw2d, frames)?;
    Ok(Sequence { id: format!("synth-{seed:08x}-{frames}"), frames, keypoints, imu, gt3d })
}
