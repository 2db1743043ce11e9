//! Central finite-difference gradient checking in double precision.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::detect::HeadLayout;
use crate::error::{Error, Result};
use crate::loss::{gather_anchor_rows, tape_bce_sum, tape_loss_cls, tape_loss_loc};
use crate::mask::SaliencyMask;
use crate::selective::tape_nonlocal;
use crate::tensor::{ConvParams, Tensor};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Magnitude floor in the relative-error denominator, so that gradients which
/// are zero analytically and numerically do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, o: GradCheck) -> GradCheck {
        let (max_rel_error, worst) = if o.max_rel_error > self.max_rel_error {
            (o.max_rel_error, o.worst)
        } else {
            (self.max_rel_error, self.worst)
        };
        GradCheck { max_rel_error, worst, checked: self.checked + o.checked }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Coordinates to probe: all of them, or `limit` spread evenly.
fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    limit: Option<usize>,
) -> Result<GradCheck> {
    if analytic.len() != params.len() {
        return Err(Error::shape("gradient and parameter lengths differ"));
    }
    let mut x = params.to_vec();
    let mut out = GradCheck::default();
    for i in probe_indices(x.len(), limit) {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_error(analytic[i], numeric);
        if out.checked == 0 || e > out.max_rel_error {
            out.max_rel_error = e;
            out.worst = i;
        }
        out.checked += 1;
    }
    Ok(out)
}

/// Checks every input of a scalar function built on a tape.
///
/// `build` receives one var per input, all recorded as leaves, and returns the
/// scalar output. For the numeric side the same function is re-run on fresh
/// tapes with perturbed inputs.
pub fn check_tape_fn(
    build: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
    limit: Option<usize>,
) -> Result<Vec<GradCheck>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut results = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.len()],
        };
        let eval = |x: &[f64]| -> Result<f64> {
            let t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| {
                    if j == k {
                        t.constant(Tensor::new(orig.dims(), x.to_vec()).expect("same length"))
                    } else {
                        t.constant(orig.clone())
                    }
                })
                .collect();
            let o = build(&t, &vs)?;
            Ok(t.value(o).data()[0])
        };
        results.push(finite_diff_check(eval, input.data(), &analytic, eps, limit)?);
    }
    Ok(results)
}

/// `sum_i r_i y_i` with fixed random `r`, so every output coordinate
/// reaches the checked gradient with a distinct weight.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Var {
    let yv = tape.value(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(yv.dims(), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let value: f64 = yv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    tape.custom(Tensor::scalar(value), &[y], move |g| Ok(vec![Some(r.scale(g.data()[0]))]))
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

fn merged(checks: Vec<GradCheck>) -> GradCheck {
    checks.into_iter().fold(GradCheck::default(), GradCheck::merge)
}

/// Named gradient checks of the differentiable operations the detector
/// trains through.
pub fn standard_suites(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = DEFAULT_EPS;

    let mask = Rc::new(SaliencyMask::from_fn(6, 6, |_, _| rng.gen_bool(0.5)));
    let inputs = [
        uniform(&mut rng, [2, 3, 6, 6], -1.0, 1.0),
        uniform(&mut rng, [4, 3, 3, 3], -1.0, 1.0),
        uniform(&mut rng, [4, 1, 1, 1], -1.0, 1.0),
    ];
    let checks = check_tape_fn(
        |t, v| {
            let (y, _) = t.masked_conv2d(v[0], v[1], v[2], Rc::clone(&mask), ConvParams::same(3, 1))?;
            Ok(project(t, y, 1))
        },
        &inputs,
        eps,
        None,
    )?;
    out.push(("masked_conv2d", merged(checks)));

    let inputs = [uniform(&mut rng, [1, 3, 5, 5], -1.0, 1.0), uniform(&mut rng, [1, 1, 5, 5], 0.05, 0.95)];
    let checks = check_tape_fn(|t, v| Ok(project(t, t.soft_mask(v[0], v[1])?, 2)), &inputs, eps, None)?;
    out.push(("soft_mask_apply", merged(checks)));

    let inputs = [
        uniform(&mut rng, [1, 4, 4, 4], -1.0, 1.0),
        uniform(&mut rng, [2, 4, 1, 1], -1.0, 1.0),
        uniform(&mut rng, [2, 4, 1, 1], -1.0, 1.0),
        uniform(&mut rng, [2, 4, 1, 1], -1.0, 1.0),
        uniform(&mut rng, [4, 2, 1, 1], -1.0, 1.0),
        uniform(&mut rng, [4, 1, 1, 1], -1.0, 1.0),
    ];
    let checks = check_tape_fn(
        |t, v| Ok(project(t, tape_nonlocal(t, v[0], [v[1], v[2], v[3], v[4], v[5]])?, 3)),
        &inputs,
        eps,
        None,
    )?;
    out.push(("nonlocal_block", merged(checks)));

    let gt = SaliencyMask::from_fn(6, 6, |_, _| rng.gen_bool(0.4));
    let inputs = [uniform(&mut rng, [1, 1, 6, 6], 0.05, 0.95)];
    let checks = check_tape_fn(
        |t, v| {
            let s = tape_bce_sum(t, v[0], &gt)?;
            t.weighted_sum(&[(s, 1.0 / 36.0)])
        },
        &inputs,
        eps,
        None,
    )?;
    out.push(("loss_mask", merged(checks)));

    let layout = HeadLayout { h: 3, w: 3, anchors: 2, classes: 4 };
    let n = layout.num_anchors();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..layout.classes)).collect();
    let mut include: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    include[0] = true;
    let inputs = [uniform(&mut rng, [1, 8, 3, 3], -3.0, 3.0)];
    let checks = check_tape_fn(
        |t, v| Ok(tape_loss_cls(t, &[(v[0], layout)], &labels, &include)?.0),
        &inputs,
        eps,
        None,
    )?;
    out.push(("loss_cls", merged(checks)));

    // Residuals are kept away from the smooth-L1 kink at |d| = 1.
    let pred = uniform(&mut rng, [1, 8, 3, 3], -1.0, 1.0);
    let rows = gather_anchor_rows(&[&pred], &[layout], 4);
    let targets: Vec<[f32; 4]> = rows
        .chunks(4)
        .map(|r| {
            let mut t = [0.0f32; 4];
            for (k, v) in r.iter().enumerate() {
                let d = if rng.gen_bool(0.5) { rng.gen_range(0.1..0.8) } else { rng.gen_range(1.2..2.0) };
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                // Stored targets are f32; the residual is measured after rounding.
                t[k] = (v - sign * d) as f32;
            }
            t
        })
        .collect();
    let positive: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.5)).collect();
    let checks = check_tape_fn(
        |t, v| Ok(tape_loss_loc(t, &[(v[0], layout)], &targets, &positive)?.0),
        std::slice::from_ref(&pred),
        eps,
        None,
    )?;
    out.push(("loss_loc", merged(checks)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 2.5, 4.0];
        let f = |x: &[f64]| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum());
        let g: Vec<f64> = p.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let r = finite_diff_check(f, &p, &g, DEFAULT_EPS, None).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let r = finite_diff_check(f, &[1.0], &[3.0], DEFAULT_EPS, None).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn probe_limit_spreads() {
        assert_eq!(probe_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(probe_indices(3, Some(5)), vec![0, 1, 2]);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn standard_suites_pass() {
        for (name, c) in standard_suites(0).unwrap() {
            assert!(c.checked > 0, "{name}");
            assert!(c.passes(1e-4), "{name}: {c:?}");
        }
    }
}
