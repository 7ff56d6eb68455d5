//! Central-difference verification of analytic gradients, in `f64`.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{invalid, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use std::fmt;

/// Gradients smaller than this are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub index: usize,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {}  max_rel_err={:.3e}  tol={:.0e}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], with_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = with_grad;
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(invalid("gradcheck", "function must return a scalar"));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's gradient of scalar `f` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
pub fn gradcheck<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (index, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradient").to_vec();
        let mut probe = inputs.to_vec();
        let (mut max_rel, mut max_abs) = (0f64, 0f64);
        for (j, a) in analytic.iter().enumerate() {
            let x = input.data()[j];
            probe[index].data_mut()[j] = x + eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.data(o)[0];
            probe[index].data_mut()[j] = x - eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.data(o)[0];
            probe[index].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(*a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(InputReport {
            index,
            numel: input.numel(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        tol,
        inputs: reports,
    })
}

/// Like [`gradcheck`], but differentiates with respect to the parameters
/// `ids` of `store`, which `f` reads through [`Tape::param`].
pub fn gradcheck_params<F>(
    name: &str,
    f: F,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        if t.value(o).numel() != 1 {
            return Err(invalid("gradcheck", "function must return a scalar"));
        }
        Ok(t.data(o)[0])
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape);
    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let numel = store.get(id).numel();
        let analytic = grads
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; numel]);
        let (mut max_rel, mut max_abs) = (0f64, 0f64);
        for (j, a) in analytic.iter().enumerate() {
            let x = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x + eps;
            let plus = loss(&probe)?;
            probe.get_mut(id).data_mut()[j] = x - eps;
            let minus = loss(&probe)?;
            probe.get_mut(id).data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(*a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(InputReport {
            index: id.index(),
            numel,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        tol,
        inputs: reports,
    })
}

/// Reduces `v` to a scalar through a fixed pseudo-random weighting, so every
/// output element gets a distinct upstream gradient.
pub fn random_projection(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let weights = random_tensor(&shape, seed, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

/// Uniform values in `[-bound, bound]`, deterministic in `seed`.
pub fn random_tensor(shape: &[usize], seed: u64, bound: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-bound, bound);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("valid shape")
}
