//! Evaluation metrics: positional error, similarity-aligned positional
//! error, and correct-keypoint percentages.
//!
//! Everything here is host-side arithmetic over finished predictions; no
//! gradients are involved. Values are in the units of the inputs (the
//! conventional reporting unit is millimeters).

use crate::skeleton::JOINT_NAMES;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("frame {0} has no spatial extent to align")]
    DegenerateFrame(usize),
    #[error("metric shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub const PCK_DEFAULT_THRESHOLDS: [f64; 2] = [25.0, 50.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub p1_mm: f64,
    pub p2_mm: f64,
    pub pck: BTreeMap<String, f64>,
    pub per_joint_p1: Vec<f64>,
}

fn dims(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize), MetricError> {
    let (t, j) = match *pred.shape() {
        [t, j, 3] => (t, j),
        _ => return Err(MetricError::ShapeMismatch(format!("pred {:?}", pred.shape()))),
    };
    if gt.shape() != pred.shape() {
        return Err(MetricError::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok((t, j))
}

fn joint_distances(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>, MetricError> {
    let (t, j) = dims(pred, gt)?;
    let p = pred.data();
    let g = gt.data();
    let mut out = Vec::with_capacity(t * j);
    for i in 0..t * j {
        let dx = p[3 * i] - g[3 * i];
        let dy = p[3 * i + 1] - g[3 * i + 1];
        let dz = p[3 * i + 2] - g[3 * i + 2];
        out.push((dx * dx + dy * dy + dz * dz).sqrt());
    }
    Ok(out)
}

/// Mean per-joint position error over all frames.
pub fn metric_p1(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricError> {
    let d = joint_distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-joint mean position error over frames.
pub fn per_joint_p1(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>, MetricError> {
    let (t, j) = dims(pred, gt)?;
    let d = joint_distances(pred, gt)?;
    let mut out = vec![0.0; j];
    for (i, &v) in d.iter().enumerate() {
        out[i % j] += v;
    }
    for v in &mut out {
        *v /= t as f64;
    }
    Ok(out)
}

/// Position error after the best per-frame similarity alignment (rotation,
/// translation, uniform scale; reflections excluded) of the prediction onto
/// the ground truth.
pub fn metric_p2(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricError> {
    let (t, j) = dims(pred, gt)?;
    let p = pred.data();
    let g = gt.data();
    let mut total = 0.0;
    for f in 0..t {
        let xs = &p[f * j * 3..(f + 1) * j * 3];
        let ys = &g[f * j * 3..(f + 1) * j * 3];
        total += aligned_frame_error(xs, ys, j).ok_or(MetricError::DegenerateFrame(f))?;
    }
    Ok(total / t as f64)
}

/// Umeyama similarity alignment of one frame. Returns None when either
/// point set collapses to a single location.
fn aligned_frame_error(xs: &[f64], ys: &[f64], j: usize) -> Option<f64> {
    let jf = j as f64;
    let mut cx = [0.0; 3];
    let mut cy = [0.0; 3];
    for i in 0..j {
        for a in 0..3 {
            cx[a] += xs[3 * i + a] / jf;
            cy[a] += ys[3 * i + a] / jf;
        }
    }
    // cross-covariance H[a][b] = sum_i xc_a * yc_b, plus spread terms
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..j {
        let xc = [xs[3 * i] - cx[0], xs[3 * i + 1] - cx[1], xs[3 * i + 2] - cx[2]];
        let yc = [ys[3 * i] - cy[0], ys[3 * i + 1] - cy[1], ys[3 * i + 2] - cy[2]];
        var_x += xc.iter().map(|v| v * v).sum::<f64>();
        var_y += yc.iter().map(|v| v * v).sum::<f64>();
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] += xc[a] * yc[b];
            }
        }
    }
    if var_x <= 1e-30 || var_y <= 1e-30 {
        return None;
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let sv = svd.singular_values;
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let mut dm = nalgebra::Matrix3::<f64>::identity();
    dm[(2, 2)] = d;
    let r = v_t.transpose() * dm * u.transpose();
    let scale = (sv[0] + sv[1] + d * sv[2]) / var_x;

    let mut total = 0.0;
    for i in 0..j {
        let xc = nalgebra::Vector3::new(
            xs[3 * i] - cx[0],
            xs[3 * i + 1] - cx[1],
            xs[3 * i + 2] - cx[2],
        );
        let aligned = r * xc * scale;
        let dx = aligned[0] + cy[0] - ys[3 * i];
        let dy = aligned[1] + cy[1] - ys[3 * i + 1];
        let dz = aligned[2] + cy[2] - ys[3 * i + 2];
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    Some(total / jf)
}

/// Percentage of errors strictly below each threshold.
pub fn metric_pck(errors: &[f64], thresholds: &[f64]) -> BTreeMap<String, f64> {
    let n = errors.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| {
            let hits = errors.iter().filter(|&&e| e < t).count();
            (format!("{t}"), 100.0 * hits as f64 / n)
        })
        .collect()
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor) -> Result<MetricReport, MetricError> {
    let errors = joint_distances(pred, gt)?;
    Ok(MetricReport {
        p1_mm: errors.iter().sum::<f64>() / errors.len() as f64,
        p2_mm: metric_p2(pred, gt)?,
        pck: metric_pck(&errors, &PCK_DEFAULT_THRESHOLDS),
        per_joint_p1: per_joint_p1(pred, gt)?,
    })
}

/// Fixed-column CSV: id, the two positional errors, both default PCK
/// columns, then one mean-error column per named joint.
pub fn csv_header() -> String {
    let joints: Vec<String> = JOINT_NAMES.iter().map(|n| format!("p1_{n}")).collect();
    format!("sequence_id,p1,p2,pck25,pck50,{}", joints.join(","))
}

pub fn csv_row(id: &str, r: &MetricReport) -> String {
    let joints: Vec<String> = r.per_joint_p1.iter().map(|v| format!("{v}")).collect();
    format!(
        "{id},{},{},{},{},{}",
        r.p1_mm,
        r.p2_mm,
        r.pck.get("25").copied().unwrap_or(f64::NAN),
        r.pck.get("50").copied().unwrap_or(f64::NAN),
        joints.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::Quat;
    use crate::tensor::seeded_randn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(seed: u64, t: usize, j: usize) -> Tensor {
        seeded_randn(&[t, j, 3], seed)
    }

    #[test]
    fn p1_hand_value() {
        let gt = Tensor::from_vec(&[1, 2, 3], vec![0.; 6]).unwrap();
        let pred =
            Tensor::from_vec(&[1, 2, 3], vec![3., 4., 0., 0., 0., 0.]).unwrap();
        let p1 = metric_p1(&pred, &gt).unwrap();
        assert!((p1 - 2.5).abs() < 1e-15);
        let pj = per_joint_p1(&pred, &gt).unwrap();
        assert!((pj[0] - 5.0).abs() < 1e-15);
        assert_eq!(pj[1], 0.0);
    }

    #[test]
    fn similarity_transforms_are_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for trial in 0..100 {
            let gt = random_pose(200 + trial, 3, 8);
            let axis = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let angle = rng.gen::<f64>() * 6.0;
            let q = Quat::from_axis_angle(axis, angle);
            let s = 0.25 + rng.gen::<f64>() * 4.0;
            let t = [rng.gen::<f64>() * 10.0 - 5.0, rng.gen::<f64>(), rng.gen::<f64>()];
            let moved: Vec<f64> = gt
                .data()
                .chunks(3)
                .flat_map(|p| {
                    let r = q.rotate([p[0], p[1], p[2]]);
                    [s * r[0] + t[0], s * r[1] + t[1], s * r[2] + t[2]]
                })
                .collect();
            let pred = Tensor::from_vec(gt.shape(), moved).unwrap();
            let p2 = metric_p2(&pred, &gt).unwrap();
            assert!(p2 <= 1e-8, "trial {trial}: p2 {p2}");
        }
    }

    #[test]
    fn uniform_scale_absorbed() {
        let gt = random_pose(7, 4, 6);
        let pred =
            Tensor::from_vec(gt.shape(), gt.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!(metric_p2(&pred, &gt).unwrap() <= 1e-8);
    }

    #[test]
    fn alignment_never_hurts() {
        for trial in 0..100 {
            let gt = random_pose(300 + trial, 2, 10);
            let noise = random_pose(900 + trial, 2, 10);
            let pred = Tensor::from_vec(
                gt.shape(),
                gt.data().iter().zip(noise.data()).map(|(a, b)| a + 0.3 * b).collect(),
            )
            .unwrap();
            let p1 = metric_p1(&pred, &gt).unwrap();
            let p2 = metric_p2(&pred, &gt).unwrap();
            assert!(p2 <= p1 + 1e-9, "trial {trial}: p2 {p2} > p1 {p1}");
            assert!(p2 > 0.0);
        }
    }

    #[test]
    fn degenerate_prediction_rejected() {
        let gt = random_pose(11, 2, 5);
        let pred = Tensor::from_vec(&[2, 5, 3], vec![1.0; 30]).unwrap();
        assert!(matches!(metric_p2(&pred, &gt), Err(MetricError::DegenerateFrame(0))));
    }

    #[test]
    fn pck_hand_values_and_monotonicity() {
        let errors = [10.0, 30.0, 60.0];
        let pck = metric_pck(&errors, &[25.0, 50.0]);
        assert!((pck["25"] - 100.0 / 3.0).abs() < 1e-12);
        assert!((pck["50"] - 200.0 / 3.0).abs() < 1e-12);

        let zero = [0.0; 4];
        let pck0 = metric_pck(&zero, &[0.001, 25.0]);
        assert_eq!(pck0["0.001"], 100.0);
        assert_eq!(pck0["25"], 100.0);

        // monotone in threshold, invariant under shuffling
        let errs = [5.0, 12.0, 26.0, 49.0, 51.0, 80.0];
        let thresholds = [1.0, 10.0, 25.0, 50.0, 100.0];
        let pck = metric_pck(&errs, &thresholds);
        let vals: Vec<f64> = thresholds.iter().map(|t| pck[&format!("{t}")]).collect();
        for w in vals.windows(2) {
            assert!(w[0] <= w[1]);
        }
        let mut shuffled = errs;
        shuffled.reverse();
        assert_eq!(metric_pck(&shuffled, &thresholds), pck);
    }

    #[test]
    fn report_serializes_and_csv_column_count_is_fixed() {
        let gt = random_pose(13, 4, 17);
        let noise = random_pose(14, 4, 17);
        let pred = Tensor::from_vec(
            gt.shape(),
            gt.data().iter().zip(noise.data()).map(|(a, b)| a + 0.1 * b).collect(),
        )
        .unwrap();
        let report = compute_metrics(&pred, &gt).unwrap();
        assert!(report.p2_mm <= report.p1_mm + 1e-9);
        assert_eq!(report.per_joint_p1.len(), 17);

        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.p1_mm, report.p1_mm);
        assert_eq!(back.pck, report.pck);

        let header = csv_header();
        let row = csv_row("seq-1", &report);
        assert_eq!(header.split(',').count(), 5 + 17);
        assert_eq!(row.split(',').count(), 5 + 17);
        assert!(row.starts_with("seq-1,"));
    }
}
