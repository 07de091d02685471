use super::{ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};

/// A differentiable computation that can be replayed at any parameter point.
pub trait Program {
    fn build(&self, tape: &mut Tape, params: &ParamVars) -> Result<Var>;
}

impl<F> Program for F
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, params: &ParamVars) -> Result<Var> {
        self(tape, params)
    }
}

/// Records `program` at `point`; the returned var is registered as the loss.
pub fn record<P: Program + ?Sized>(program: &P, point: &ParameterVector) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let params = tape.bind(point)?;
    let out = program.build(&mut tape, &params)?;
    tape.set_loss(out);
    Ok((tape, out))
}

/// Forward value of a scalar program.
pub fn evaluate<P: Program + ?Sized>(program: &P, point: &ParameterVector) -> Result<f64> {
    let (tape, out) = record(program, point)?;
    tape.scalar(out)
}

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares reverse-mode gradients against central differences for every
/// parameter. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<P: Program + ?Sized>(
    program: &P,
    point: &ParameterVector,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let (tape, _) = record(program, point)?;
    let analytic = tape.backward()?;
    let mut entries = Vec::with_capacity(point.len());
    for seg in point.layout().segments() {
        for (k, idx) in seg.range().enumerate() {
            let mut plus = point.clone();
            plus.values_mut()[idx] += step;
            let mut minus = point.clone();
            minus.values_mut()[idx] -= step;
            let numeric = (evaluate(program, &plus)? - evaluate(program, &minus)?) / (2.0 * step);
            let a = analytic.values()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            entries.push(FdEntry {
                name: seg.name.clone(),
                index: k,
                analytic: a,
                numeric,
                relative_error: (a - numeric).abs() / denom,
            });
        }
    }
    let max_relative_error = entries
        .iter()
        .map(|e| e.relative_error)
        .fold(0.0, f64::max);
    Ok(FdReport {
        passed: max_relative_error <= tolerance,
        entries,
        max_relative_error,
        tolerance,
    })
}
