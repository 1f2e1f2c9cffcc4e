use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks `f`'s gradient at `x0` (shape + values) against central
/// differences with step `h`, coordinate by coordinate.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    shape: Vec<usize>,
    x0: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    finite_diff_check_multi(
        |xs| f(&xs[0]),
        &[(shape, x0.to_vec())],
        h,
        tol,
    )
}

/// Multi-input variant: every input is treated as differentiable and
/// checked independently.
pub fn finite_diff_check_multi(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, vals)| Tensor::leaf(shape.clone(), vals.clone()))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check output",
            lhs: out.shape(),
            rhs: vec![1],
        });
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |xs: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let ts: Vec<Tensor> = xs
            .iter()
            .map(|(s, v)| Tensor::from_vec(s.clone(), v.clone()))
            .collect::<Result<_>>()?;
        f(&ts)?.item()
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        pass: true,
    };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (ti, (_, vals)) in inputs.iter().enumerate() {
        for ci in 0..vals.len() {
            let orig = vals[ci];
            work[ti].1[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].1[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].1[ci] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[ti][ci], fd);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = ti;
                report.worst_coord = ci;
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
