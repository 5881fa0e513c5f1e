//! Sequence container and the JSON-lines dataset format.

use crate::skeleton::{IMU_COUNT, JOINT_COUNT};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// One paired sequence: 2D keypoints `[T,17,2]`, orientation stream
/// `[T,6,4]`, ground-truth root-relative 3D `[T,17,3]`. Buffers row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: usize,
    pub keypoints: Vec<f64>,
    pub imu: Vec<f64>,
    pub gt3d: Vec<f64>,
}

impl Sequence {
    pub fn check_shapes(&self) -> Result<(), String> {
        let t = self.frames;
        if t == 0 {
            return Err("zero frames".into());
        }
        if self.keypoints.len() != t * JOINT_COUNT * 2 {
            return Err(format!("keypoints length {} != {}", self.keypoints.len(), t * JOINT_COUNT * 2));
        }
        if self.imu.len() != t * IMU_COUNT * 4 {
            return Err(format!("imu length {} != {}", self.imu.len(), t * IMU_COUNT * 4));
        }
        if self.gt3d.len() != t * JOINT_COUNT * 3 {
            return Err(format!("gt3d length {} != {}", self.gt3d.len(), t * JOINT_COUNT * 3));
        }
        let all = self.keypoints.iter().chain(&self.imu).chain(&self.gt3d);
        if !all.clone().all(|v| v.is_finite()) {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceJson {
    id: String,
    #[serde(rename = "T")]
    frames: usize,
    keypoints: Vec<Vec<[f64; 2]>>,
    imu: Vec<Vec<[f64; 4]>>,
    gt3d: Vec<Vec<[f64; 3]>>,
}

fn nest<const N: usize>(flat: &[f64], frames: usize, per_frame: usize) -> Vec<Vec<[f64; N]>> {
    (0..frames)
        .map(|t| {
            (0..per_frame)
                .map(|j| {
                    let off = (t * per_frame + j) * N;
                    let mut a = [0.0; N];
                    a.copy_from_slice(&flat[off..off + N]);
                    a
                })
                .collect()
        })
        .collect()
}

fn flatten<const N: usize>(
    nested: &[Vec<[f64; N]>],
    frames: usize,
    per_frame: usize,
    what: &str,
) -> Result<Vec<f64>, String> {
    if nested.len() != frames {
        return Err(format!("{what}: {} frames, header says {frames}", nested.len()));
    }
    let mut out = Vec::with_capacity(frames * per_frame * N);
    for (t, row) in nested.iter().enumerate() {
        if row.len() != per_frame {
            return Err(format!("{what}: frame {t} has {} entries, expected {per_frame}", row.len()));
        }
        for a in row {
            out.extend_from_slice(a);
        }
    }
    Ok(out)
}

impl From<&Sequence> for SequenceJson {
    fn from(s: &Sequence) -> SequenceJson {
        SequenceJson {
            id: s.id.clone(),
            frames: s.frames,
            keypoints: nest::<2>(&s.keypoints, s.frames, JOINT_COUNT),
            imu: nest::<4>(&s.imu, s.frames, IMU_COUNT),
            gt3d: nest::<3>(&s.gt3d, s.frames, JOINT_COUNT),
        }
    }
}

impl SequenceJson {
    fn into_sequence(self) -> Result<Sequence, String> {
        let s = Sequence {
            id: self.id,
            frames: self.frames,
            keypoints: flatten::<2>(&self.keypoints, self.frames, JOINT_COUNT, "keypoints")?,
            imu: flatten::<4>(&self.imu, self.frames, IMU_COUNT, "imu")?,
            gt3d: flatten::<3>(&self.gt3d, self.frames, JOINT_COUNT, "gt3d")?,
        };
        s.check_shapes()?;
        Ok(s)
    }
}

/// One JSON object per line. f64 values survive the round trip exactly.
pub fn save_dataset(path: &Path, sequences: &[Sequence]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in sequences {
        let json = SequenceJson::from(s);
        serde_json::to_writer(&mut w, &json).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sequence>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SequenceJson = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Format { line: i + 1, reason: e.to_string() })?;
        out.push(
            parsed
                .into_sequence()
                .map_err(|reason| DatasetError::Format { line: i + 1, reason })?,
        );
    }
    Ok(out)
}
