//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probed is `sum(r * out)` for a fixed random `r`, so every
//! output element contributes to the checked gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ModelCheckpoint, Tape, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-3;
/// Smallest step tried when the stencil straddles a kink.
pub const MIN_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;
/// Magnitude below which differences are compared absolutely rather than relatively.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", what());
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central difference at `STEP`, shrinking the step tenfold while the two
/// one-sided differences disagree beyond `TOLERANCE`. Large disagreement means
/// a ReLU or max-pool switch lies inside the stencil; on smooth functions the
/// smaller step only removes curvature error.
fn central_difference(f0: f64, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let mut h = STEP;
    loop {
        let (plus, minus) = (f(h)?, f(-h)?);
        let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
        if relative_error(fwd, bwd) <= TOLERANCE || h <= MIN_STEP {
            return Ok((plus - minus) / (2.0 * h));
        }
        h /= 10.0;
    }
}

fn projection(t: &Tape<f64>, out: Var, r: &[f64]) -> f64 {
    t.value(out).iter().zip(r).map(|(a, b)| a * b).sum()
}

fn pick(total: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if total <= samples {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, samples).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks an op built from free inputs.
///
/// `build` receives one tracked leaf per entry of `inputs` and returns any
/// output node. Up to `samples` input coordinates are probed.
pub fn check_op<F>(inputs: &[(Vec<usize>, Vec<f64>)], samples: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |vals: &[(Vec<usize>, Vec<f64>)], grad: bool| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut t = Tape::new();
        let mut leaves = Vec::new();
        for (shape, v) in vals {
            leaves.push(t.leaf(shape.clone(), v.clone(), grad)?);
        }
        let out = build(&mut t, &leaves)?;
        Ok((t, out, leaves))
    };
    let (mut tape, out, leaves) = run(inputs, true)?;
    let r: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out_shape = tape.shape(out).to_vec();
    let rv = tape.constant(out_shape, r.clone())?;
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let f0 = projection(&tape, out, &r);

    let sizes: Vec<usize> = inputs.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for flat in pick(total, samples, &mut rng) {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let analytic = tape.grad(leaves[which]).map_or(0.0, |g| g[idx]);
        let numeric = central_difference(f0, |delta| {
            let mut shifted = inputs.to_vec();
            shifted[which].1[idx] += delta;
            let (t, o, _) = run(&shifted, false)?;
            Ok(projection(&t, o, &r))
        })?;
        report.record(analytic, numeric, || format!("input {which}[{idx}]"));
    }
    Ok(report)
}

/// Checks gradients w.r.t. the unfrozen parameters of a checkpoint-driven model.
pub fn check_model<F>(ckpt: &ModelCheckpoint, samples: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::new(ckpt);
    let out = build(&mut g)?;
    let r: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out_shape = g.shape(out).to_vec();
    let rv = g.constant(out_shape, r.clone())?;
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let f0 = projection(&g, out, &r);

    let names: Vec<(String, usize)> = ckpt
        .iter()
        .filter(|(n, _)| !ckpt.is_frozen(n))
        .map(|(n, t)| (n.to_string(), t.numel()))
        .collect();
    let bound: std::collections::HashMap<String, Var> = g.bound().map(|(n, v)| (n.to_string(), v)).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for flat in pick(total, samples, &mut rng) {
        let (mut which, mut idx) = (0, flat);
        while idx >= names[which].1 {
            idx -= names[which].1;
            which += 1;
        }
        let name = &names[which].0;
        let analytic = bound.get(name).and_then(|&v| g.grad(v)).map_or(0.0, |gr| gr[idx]);
        let eval = |delta: f64| -> Result<f64> {
            let mut gp = Graph::<f64>::perturbed(ckpt, name, idx, delta);
            let o = build(&mut gp)?;
            Ok(projection(&gp, o, &r))
        };
        let numeric = central_difference(f0, eval)?;
        report.record(analytic, numeric, || format!("{name}[{idx}]"));
    }
    Ok(report)
}
