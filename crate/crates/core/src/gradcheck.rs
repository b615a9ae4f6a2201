//! Central finite-difference oracle for tape gradients.
//!
//! The graph under test may produce any shape; it is reduced to a scalar by a
//! fixed random projection so every output element contributes.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::{Fill, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per input (all when `None`).
    pub max_elements: Option<usize>,
    /// Seed for the output projection and element sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn projected<F>(f: &F, inputs: &[Tensor], projection: &Tensor, track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let r = tape.constant(projection.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.reduce(prod, Reduction::Sum, &(0..projection.rank()).collect::<Vec<_>>())?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `f` at `inputs` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], config: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let projection = Tensor::new(&shape, Fill::Uniform(1.0), &mut rng)?;

    let (mut tape, vars, loss) = projected(&f, inputs, &projection, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = projected(&f, perturbed, &projection, false)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: config.tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let elements: Vec<usize> = match config.max_elements {
            Some(m) if m < input.len() => (0..m).map(|_| rng.random_range(0..input.len())).collect(),
            _ => (0..input.len()).collect(),
        };
        for e in elements {
            let x0 = input.data()[e];
            work[k].data_mut()[e] = x0 + config.step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = x0 - config.step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[k].data()[e];
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, e, a, numeric));
            }
        }
    }
    Ok(report)
}
