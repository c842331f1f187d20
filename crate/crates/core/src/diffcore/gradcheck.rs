//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

/// How a tensor-valued op is reduced to the scalar being differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// Plain sum of all output elements.
    Sum,
    /// Sum weighted by fixed pseudo-random cotangents in `[-1, 1]`.
    Random(u64),
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// vanishing gradients are compared in absolute terms.
    pub floor: f64,
    pub projection: Projection,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook forwarded to [`Tape::with_corrupted_op`].
    pub corrupt_op: Option<String>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            projection: Projection::Sum,
            max_coords: None,
            seed: 0,
            corrupt_op: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradCheck {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_projection(mut self, p: Projection) -> Self {
        self.projection = p;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn run<F>(&self, op: F, inputs: &[Tensor]) -> GradReport
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        match self.try_run(&op, inputs) {
            Ok(r) => r,
            Err(e) => GradReport {
                max_rel_err: f64::INFINITY,
                worst: None,
                coords_checked: 0,
                passed: false,
                failure: Some(e.to_string()),
            },
        }
    }

    fn weights_for(&self, shape: &[usize]) -> Option<Tensor> {
        match self.projection {
            Projection::Sum => None,
            Projection::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
            }
        }
    }

    fn project(&self, tape: &Tape, out: Var) -> Result<Var> {
        match self.weights_for(&tape.shape(out)) {
            None => tape.sum(out),
            Some(w) => {
                let w = tape.constant(w);
                let p = tape.mul(out, w)?;
                tape.sum(p)
            }
        }
    }

    fn evaluate<F>(&self, op: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&tape, &vars)?;
        let s = self.project(&tape, out)?;
        Ok(tape.item(s))
    }

    fn try_run<F>(&self, op: &F, inputs: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = match &self.corrupt_op {
            Some(name) => Tape::with_corrupted_op(name),
            None => Tape::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&tape, &vars)?;
        let s = self.project(&tape, out)?;
        let grads = tape.backward(s)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradReport {
            max_rel_err: 0.0,
            worst: None,
            coords_checked: 0,
            passed: true,
            failure: None,
        };
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            let coords: Vec<usize> = match self.max_coords {
                Some(n) if n < input.len() => (0..n).map(|_| rng.gen_range(0..input.len())).collect(),
                _ => (0..input.len()).collect(),
            };
            for j in coords {
                let mut probe: Vec<Tensor> = inputs.to_vec();
                let x0 = input.data()[j];
                probe[i].data_mut()[j] = x0 + self.eps;
                let fp = self.evaluate(op, &probe);
                probe[i].data_mut()[j] = x0 - self.eps;
                let fm = self.evaluate(op, &probe);
                let (fp, fm) = match (fp, fm) {
                    (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                    (a, b) => {
                        let why = a.err().or(b.err()).map_or("non-finite value".to_string(), |e| e.to_string());
                        report.passed = false;
                        report.failure = Some(format!("input {i} coordinate {j}: {why}"));
                        report.max_rel_err = f64::INFINITY;
                        report.worst = Some((i, j));
                        return Ok(report);
                    }
                };
                let numeric = (fp - fm) / (2.0 * self.eps);
                let a = analytic.data()[j];
                if !a.is_finite() {
                    report.passed = false;
                    report.failure = Some(format!("input {i} coordinate {j}: non-finite analytic gradient"));
                    report.max_rel_err = f64::INFINITY;
                    report.worst = Some((i, j));
                    return Ok(report);
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.coords_checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((i, j));
                }
            }
        }
        report.passed = report.max_rel_err <= self.tol;
        Ok(report)
    }
}

/// Shorthand for [`GradCheck::run`] with the given step and tolerance.
pub fn gradcheck<F>(op: F, inputs: &[Tensor], eps: f64, tol: f64) -> GradReport
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck {
        eps,
        tol,
        ..GradCheck::default()
    }
    .run(op, inputs)
}
