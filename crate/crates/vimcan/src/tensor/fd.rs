//! Central-difference gradient verification.

use super::{GradGraph, Tensor, TensorError};

/// Outcome of a finite-difference sweep. `max_rel_err` is the worst relative
/// disagreement between analytic and numeric gradients across every
/// coordinate of every parameter.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub const FD_DEFAULT_EPS: f64 = 1e-5;

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh graph and the parameter set, and must return a scalar
/// loss built on that graph with every parameter registered via `leaf`. The
/// function is evaluated twice up front; any bitwise difference in the loss
/// means `f` is not a pure function of its inputs and the check refuses to
/// proceed. Each coordinate is then nudged by ±eps.
///
/// Relative error uses `|a - n| / max(max(|a|, |n|), 1e-6)`. The floor
/// absorbs central-difference rounding noise (about `|loss|·ulp / 2eps`,
/// or ~1e-11 for a unit-scale loss) on coordinates whose true gradient is
/// zero; keep losses mean-reduced so that estimate holds.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    eps: f64,
    mut f: F,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&mut GradGraph, &[Tensor]) -> Result<Tensor, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::EpsOutOfRange(eps));
    }

    let eval = |f: &mut F, params: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = GradGraph::new();
        let loss = f(&mut g, params)?;
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        Ok(loss.data()[0])
    };

    let base1 = eval(&mut f, params)?;
    let base2 = eval(&mut f, params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(TensorError::NonDeterministicFunction);
    }

    // Analytic pass: leaves registered inside f carry node refs back here.
    let mut g = GradGraph::new();
    let bound: Vec<Tensor> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = f(&mut g, &bound)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let grads = g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .map(|p| match grads.of(p) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    let mut work: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    for pi in 0..params.len() {
        for ci in 0..work[pi].len() {
            let orig = work[pi][ci];

            work[pi][ci] = orig + eps;
            let plus = eval_at(&mut f, params, &work)?;
            work[pi][ci] = orig - eps;
            let minus = eval_at(&mut f, params, &work)?;
            work[pi][ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval_at<F>(f: &mut F, templates: &[Tensor], work: &[Vec<f64>]) -> Result<f64, TensorError>
where
    F: FnMut(&mut GradGraph, &[Tensor]) -> Result<Tensor, TensorError>,
{
    let nudged: Vec<Tensor> = templates
        .iter()
        .zip(work)
        .map(|(p, w)| Tensor::from_vec(p.shape(), w.clone()))
        .collect::<Result<_, _>>()?;
    let mut g = GradGraph::new();
    let loss = f(&mut g, &nudged)?;
    Ok(loss.data()[0])
}
