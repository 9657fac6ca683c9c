//! Numerical checks of the per-estimator stability claims.
//!
//! Exact bounds are checked pointwise. Bounds stated only up to an unnamed
//! constant are checked as scale stability: the normalized ratio, maximized
//! over probes at each `n`, may vary by at most [`SCALE_BUDGET`] across the grid.

use std::fmt;

use rayon::prelude::*;

use crate::bounds::{estimate_restriction_set_with, KEpsilon, RestrictionSettings};
use crate::data::{DataGenerator, Dataset, ObsRef, Observation};
use crate::error::{Error, Result};
use crate::estimator::{gaussian_kernel_derivative_sup, Axis, Estimator, Loss};
use crate::rng::{self, Purpose};
use crate::stability::{estimate_delta3, grad_analytic, truncate_dataset, DataGradient, MAX_PROBE_ATTEMPTS};

pub const VERIFY_N: [usize; 3] = [64, 256, 1024];
pub const VERIFY_PROBES: usize = 200;
/// Allowed max/min ratio of a normalized constant across [`VERIFY_N`].
pub const SCALE_BUDGET: f64 = 1.5;
pub const EXACT_SLACK: f64 = 1e-9;

const DELTA3_REPS: usize = 200;
const DELTA3_M: usize = 200;
const KEPS: f64 = 0.5;

/// Gradient routine under test; [`grad_analytic`] in production.
pub type GradFn = fn(&Estimator, Loss, &Dataset, ObsRef<'_>) -> Result<DataGradient>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimCheck {
    pub claim_id: String,
    pub status: Status,
    pub measured: f64,
    pub budget: f64,
    pub detail: String,
}

impl ClaimCheck {
    /// Passes iff `measured <= budget`; NaN fails.
    pub fn new(claim_id: &str, measured: f64, budget: f64, detail: String) -> Self {
        ClaimCheck {
            claim_id: claim_id.to_string(),
            status: if measured <= budget { Status::Pass } else { Status::Fail },
            measured,
            budget,
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{:?},{:?}", self.claim_id, self.status, self.measured, self.budget)
    }
}

pub const CSV_HEADER: &str = "claim_id,status,measured,budget";

fn kink_retry<T>(mut f: impl FnMut() -> Result<Option<T>>) -> Result<Option<T>> {
    for _ in 0..MAX_PROBE_ATTEMPTS {
        match f() {
            Ok(Some(v)) => return Ok(Some(v)),
            Ok(None) | Err(Error::NonDifferentiable(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Evaluates `metric` on `probes` independent `(D, z)` draws, redrawing on
/// kinks and on datasets rejected by `accept`.
fn probe_values<F>(
    gen: &DataGenerator,
    n: usize,
    seed: u64,
    accept: &(dyn Fn(&Dataset) -> bool + Sync),
    metric: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Dataset, &Observation) -> Result<f64> + Sync,
{
    let drawn: Vec<Option<f64>> = (0..VERIFY_PROBES)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::substream(seed, n, j, Purpose::Validation);
            kink_retry(|| {
                let d = gen.sample_with(n, &mut r)?;
                if !accept(&d) {
                    return Ok(None);
                }
                let z = gen.sample_observation(&mut r);
                metric(&d, &z).map(Some)
            })
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = drawn.into_iter().flatten().collect();
    if kept.len() * 2 < VERIFY_PROBES {
        return Err(Error::InsufficientProbes(VERIFY_PROBES * MAX_PROBE_ATTEMPTS));
    }
    Ok(kept)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn any(_: &Dataset) -> bool {
    true
}

/// Max over the grid of per-`n` probe maxima of `metric`.
fn pointwise_max<F>(gen: &DataGenerator, seed: u64, metric: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &Dataset, &Observation) -> Result<f64> + Sync,
{
    let per_n = VERIFY_N
        .iter()
        .map(|&n| probe_values(gen, n, seed, &any, |d, z| metric(n, d, z)).map(|v| max_of(&v)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((max_of(&per_n), per_n))
}

/// `max/min` across the grid of per-`n` probe maxima of `metric`.
fn scale_stability<F>(
    id: &str,
    gen: &DataGenerator,
    seed: u64,
    accept: &(dyn Fn(&Dataset) -> bool + Sync),
    what: &str,
    metric: F,
) -> Result<ClaimCheck>
where
    F: Fn(usize, &Dataset, &Observation) -> Result<f64> + Sync,
{
    let per_n = VERIFY_N
        .iter()
        .map(|&n| probe_values(gen, n, seed, accept, |d, z| metric(n, d, z)).map(|v| max_of(&v)))
        .collect::<Result<Vec<f64>>>()?;
    let lo = per_n.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if lo > 0.0 { max_of(&per_n) / lo } else { f64::INFINITY };
    Ok(ClaimCheck::new(
        id,
        spread,
        SCALE_BUDGET,
        format!("max {what} at n = {VERIFY_N:?}: {per_n:.4?}"),
    ))
}

fn mean_generator() -> Result<DataGenerator> {
    DataGenerator::gaussian_linear(0.0, 5.0, 1.0)
}

fn mean_delta1(grad: GradFn, seed: u64) -> Result<ClaimCheck> {
    let gen = mean_generator()?;
    let est = Estimator::EmpiricalMean { axis: Axis::X };
    let (m, per_n) = pointwise_max(&gen, seed, |n, d, z| {
        Ok(grad(&est, Loss::Absolute, d, z.as_ref())?.norm * (n as f64).sqrt())
    })?;
    Ok(ClaimCheck::new(
        "mean-delta1",
        m,
        1.0 + EXACT_SLACK,
        format!("max ‖grad‖·√n per n: {per_n:.12?}"),
    ))
}

fn mean_delta3(seed: u64) -> Result<ClaimCheck> {
    let gen = mean_generator()?;
    let abs_mean = gen.x_abs_mean().ok_or_else(|| Error::Contract("generator without E|X|".into()))?;
    let est = Estimator::EmpiricalMean { axis: Axis::X };
    let ratios = VERIFY_N
        .iter()
        .map(|&n| {
            let e = estimate_delta3(&est, Loss::Absolute, &gen, n, DELTA3_REPS, DELTA3_M, seed)?;
            Ok((e.estimate - 3.0 * e.std_error) / (2.0 * abs_mean / (n as f64 - 1.0)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ClaimCheck::new(
        "mean-delta3",
        max_of(&ratios),
        1.0,
        format!("(δ3 estimate − 3 SE) / (2E|X|/(n−1)) per n: {ratios:.4?}"),
    ))
}

fn kde_parts() -> Result<(DataGenerator, Estimator, f64)> {
    let h = 0.1;
    Ok((
        DataGenerator::uniform_sine(10.0)?,
        Estimator::Kde {
            bandwidth: h,
            axis: Axis::Y,
        },
        h,
    ))
}

fn kde_delta1(grad: GradFn, seed: u64) -> Result<ClaimCheck> {
    let (gen, est, h) = kde_parts()?;
    let (m, per_n) = pointwise_max(&gen, seed, |n, d, z| {
        Ok(grad(&est, Loss::IdentityAbs, d, z.as_ref())?.norm * h * h * (n as f64).sqrt())
    })?;
    Ok(ClaimCheck::new(
        "kde-delta1",
        m,
        gaussian_kernel_derivative_sup() + EXACT_SLACK,
        format!("max ‖grad‖·h²·√n per n (h = {h}): {per_n:.6?}"),
    ))
}

fn kde_delta3(seed: u64) -> Result<ClaimCheck> {
    let (gen, est, _) = kde_parts()?;
    let excess: Vec<f64> = VERIFY_N
        .iter()
        .map(|&n| {
            let e = estimate_delta3(&est, Loss::IdentityAbs, &gen, n, DELTA3_REPS, DELTA3_M, seed)?;
            Ok(e.estimate - 3.0 * e.std_error)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ClaimCheck::new(
        "kde-delta3",
        max_of(&excess),
        0.0,
        format!("δ3 estimate − 3 SE per n: {}", excess.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")),
    ))
}

fn ols_keps_grad(grad: GradFn, seed: u64) -> Result<ClaimCheck> {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0)?;
    let set = KEpsilon::for_generator(&gen, KEPS);
    let accept = move |d: &Dataset| set.contains(d);
    scale_stability(
        "ols-Keps-grad",
        &gen,
        seed,
        &accept,
        "‖grad‖·√n·(1−ε)/((1+ε)(1+ε+|x|)) over in-K probes",
        |n, d, z| {
            let g = grad(&Estimator::OlsSimple, Loss::Absolute, d, z.as_ref())?;
            let scale = (1.0 + KEPS) / ((1.0 - KEPS) * (n as f64).sqrt()) * (1.0 + KEPS + z.x[0].abs());
            Ok(g.norm / scale)
        },
    )
}

fn ols_keps_slice(seed: u64) -> Result<ClaimCheck> {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0)?;
    let settings = RestrictionSettings {
        probes: 100,
        ..RestrictionSettings::default()
    };
    let (lo_n, hi_n) = (VERIFY_N[0], VERIFY_N[VERIFY_N.len() - 1]);
    let at = |n: usize| {
        estimate_restriction_set_with(
            &Estimator::OlsSimple,
            Loss::Absolute,
            &gen,
            n,
            KEpsilon::for_generator(&gen, KEPS),
            settings,
            seed,
        )
    };
    let (lo, hi) = (at(lo_n)?, at(hi_n)?);
    let p = lo.slice_prob;
    let k = lo.in_k.max(1) as f64;
    Ok(ClaimCheck::new(
        "ols-Keps-slice",
        hi.slice_prob,
        p + 3.0 * (p * (1.0 - p) / k).sqrt(),
        format!("slice probability {p:.4} at n = {lo_n}, {:.4} at n = {hi_n}", hi.slice_prob),
    ))
}

/// `F_q(D) = n^{-(q+1)/2} ‖D‖^{q+1} / (q+1)` composed with the truncator; the
/// gradient is `n^{-(q+1)/2} ‖g_b(D)‖^{q-1} g_b(D)` on coordinates below `b`.
pub fn truncated_functional_gradient(d: &Dataset, q: i32, b: f64) -> Result<DataGradient> {
    let t = truncate_dataset(d, b)?;
    let n = d.n() as f64;
    let r = t.norm();
    let scale = n.powf(-(q as f64 + 1.0) / 2.0) * r.powi(q - 1);
    Ok(DataGradient::new(
        d.coords()
            .iter()
            .zip(t.coords())
            .map(|(&raw, &v)| if raw.abs() < b { scale * v } else { 0.0 })
            .collect(),
    ))
}

fn truncation(q: i32, seed: u64) -> Result<ClaimCheck> {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0)?;
    let b = 1.0;
    scale_stability(
        &format!("trunc-b{q}"),
        &gen,
        seed,
        &any,
        &format!("‖grad‖·√n/b^q (b = {b})"),
        |n, d, _| Ok(truncated_functional_gradient(d, q, b)?.norm * (n as f64).sqrt() / b.powi(q)),
    )
}

/// `∇β̂` from two predictions: `∇T(q1) − ∇T(q0) = (q1 − q0) ∇β̂`.
fn slope_gradient(grad: GradFn, est: &Estimator, d: &Dataset) -> Result<f64> {
    // responses far below every prediction fix the absolute-loss sign at +1
    let far = -1e12;
    let g0 = grad(est, Loss::Absolute, d, Observation::scalar(0.0, far).as_ref())?;
    let g1 = grad(est, Loss::Absolute, d, Observation::scalar(1.0, far).as_ref())?;
    Ok(g1
        .per_coordinate
        .iter()
        .zip(&g0.per_coordinate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn stabilized_ols(grad: GradFn, seed: u64) -> Result<ClaimCheck> {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0)?;
    let (delta, b) = (0.1, 3.0);
    let est = Estimator::OlsStabilized {
        stabilizer: delta,
        truncation: b,
    };
    scale_stability(
        "sols-beta-grad",
        &gen,
        seed,
        &any,
        &format!("‖∇β̂‖·√n·δ/b (δ = {delta}, b = {b})"),
        |n, d, _| Ok(slope_gradient(grad, &est, d)? * (n as f64).sqrt() * delta / b),
    )
}

fn nw_grad(grad: GradFn, seed: u64) -> Result<ClaimCheck> {
    let gen = DataGenerator::gaussian_sine(10.0, 1.0)?;
    let (h, delta) = (0.5, 0.25);
    let est = Estimator::NwStabilized {
        bandwidth: h,
        stabilizer: delta,
    };
    scale_stability(
        "nw-grad",
        &gen,
        seed,
        &any,
        &format!("‖∇T‖/(1/√n + ‖D‖/n) (h = {h}, δ = {delta})"),
        |n, d, z| {
            let g = grad(&est, Loss::Absolute, d, Observation::scalar(z.x[0], -1e12).as_ref())?;
            let n = n as f64;
            Ok(g.norm / (1.0 / n.sqrt() + d.norm() / n))
        },
    )
}

/// Runs every claim with `grad` as the gradient routine, sorted by claim id.
pub fn verify_with(seed: u64, grad: GradFn) -> Result<Vec<ClaimCheck>> {
    let s = |claim: u64| rng::derive_seed(seed, &[Purpose::Validation as u64, claim]);
    let mut checks = vec![
        mean_delta1(grad, s(1))?,
        mean_delta3(s(2))?,
        kde_delta1(grad, s(3))?,
        kde_delta3(s(4))?,
        ols_keps_grad(grad, s(5))?,
        ols_keps_slice(s(6))?,
        truncation(1, s(7))?,
        truncation(2, s(8))?,
        stabilized_ols(grad, s(9))?,
        nw_grad(grad, s(10))?,
    ];
    checks.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
    Ok(checks)
}

pub fn verify_all(seed: u64) -> Result<Vec<ClaimCheck>> {
    verify_with(seed, grad_analytic::<Dataset>)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_follows_budget() {
        assert!(ClaimCheck::new("a", 1.0, 1.0, String::new()).passed());
        assert!(!ClaimCheck::new("a", 1.5, 1.0, String::new()).passed());
        assert!(!ClaimCheck::new("a", f64::NAN, 1.0, String::new()).passed());
        assert_eq!(ClaimCheck::new("x", 0.5, 1.0, String::new()).csv_line(), "x,pass,0.5,1.0");
    }

    #[test]
    fn truncated_gradient_matches_differences() {
        let d = Dataset::from_xy(&[0.3, -2.0, 0.7], &[1.5, -0.2, 0.4]).unwrap();
        let (q, b) = (2, 1.0);
        let f = |d: &Dataset| {
            let t = truncate_dataset(d, b).unwrap();
            (d.n() as f64).powf(-1.5) * t.norm().powi(3) / 3.0
        };
        let g = truncated_functional_gradient(&d, q, b).unwrap();
        for j in 0..d.coords().len() {
            let mut up = d.coords().to_vec();
            let mut down = d.coords().to_vec();
            up[j] += 1e-6;
            down[j] -= 1e-6;
            let fd = (f(&Dataset::from_coords(1, 1, up).unwrap()) - f(&Dataset::from_coords(1, 1, down).unwrap()))
                / 2e-6;
            assert!((fd - g.per_coordinate[j]).abs() < 1e-8, "coordinate {j}");
        }
    }

    #[test]
    fn slope_gradient_of_plain_ols_matches_formula() {
        let d = Dataset::from_xy(&[0.0, 1.0, 3.0], &[1.0, 0.0, 2.0]).unwrap();
        // β = S_xy / S_xx: x̄ = 4/3, S_xx = 14/3; ∂β/∂y_j = (x_j − x̄)/S_xx
        let g = slope_gradient(grad_analytic::<Dataset>, &Estimator::OlsSimple, &d).unwrap();
        let sxx = 14.0 / 3.0;
        let sxy = (0.0 - 4.0 / 3.0) * (1.0 - 1.0) + (1.0 - 4.0 / 3.0) * (0.0 - 1.0) + (3.0 - 4.0 / 3.0) * (2.0 - 1.0);
        let beta = sxy / sxx;
        let mut expected = 0.0;
        for (x, y) in [(0.0, 1.0), (1.0, 0.0), (3.0, 2.0)] {
            let dx: f64 = x - 4.0 / 3.0;
            let dbx = ((y - 1.0) - 2.0 * beta * dx) / sxx;
            let dby = dx / sxx;
            expected += dbx * dbx + dby * dby;
        }
        assert!((g - expected.sqrt()).abs() < 1e-9);
    }
}
