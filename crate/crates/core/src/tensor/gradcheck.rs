use super::{RngState, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms. A central
/// difference at step `1e-5` carries roundoff near `1e-11` for an O(1)
/// loss, so exactly-zero gradients (a key bias under softmax, for one)
/// would otherwise show a spurious relative error.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// At most `per_tensor` coordinates per input, chosen from `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

/// Central-difference check of the tape gradient of a scalar function of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, Probe::All)
}

pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    probe: Probe,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 || !v.data()[0].is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let n = inputs[t].numel();
        let coords: Vec<usize> = match probe {
            Probe::All => (0..n).collect(),
            Probe::Sample { per_tensor, seed } if per_tensor < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                RngState::new(seed).fork(t as u64).shuffle(&mut idx);
                idx.truncate(per_tensor);
                idx.sort_unstable();
                idx
            }
            Probe::Sample { .. } => (0..n).collect(),
        };
        for i in coords {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[i]);
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = x0 - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
