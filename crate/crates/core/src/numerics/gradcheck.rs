use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Denominator floor for relative error, so coordinates whose true gradient
/// is ~0 are judged by absolute error instead of noise-dominated ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(dim_err!("checked function must return a scalar, got {:?}", v.shape()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut work = params.to_vec();
    let mut entries = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let rel_err = relative_error(a, numeric);
            max_rel_err = max_rel_err.max(rel_err);
            entries.push(GradCheckEntry { param: pi, index: idx, analytic: a, numeric, rel_err });
        }
    }
    Ok(GradCheckReport { entries, max_rel_err, tol })
}
