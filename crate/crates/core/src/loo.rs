//! Leave-one-out risk estimates and the Monte Carlo risk oracle.

use crate::data::{DataGenerator, Dataset, ObsRef, Sample};
use crate::error::{Error, Result};
use crate::estimator::{fitted_loss, gaussian_kernel, pointwise_loss, Axis, Estimator, LineFit, Loss};
use crate::rng::{self, Rng};

/// Downdated sums smaller than this fraction of the full-data sum are
/// recomputed from scratch.
pub const DOWNDATE_GUARD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LooMethod {
    Naive,
    Fast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub loo_estimate: f64,
    /// `f_i(Z_i)`: loss of the fit without observation `i`, at observation `i`.
    pub per_fold_losses: Vec<f64>,
    pub method: LooMethod,
}

impl LooResult {
    fn from_losses(per_fold_losses: Vec<f64>, method: LooMethod) -> Self {
        let loo_estimate = per_fold_losses.iter().sum::<f64>() / per_fold_losses.len() as f64;
        LooResult {
            loo_estimate,
            per_fold_losses,
            method,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskOracleResult {
    pub risk: f64,
    pub mc_samples: usize,
    pub std_error: f64,
}

/// Refits on every deleted view.
pub fn loo_naive(est: &Estimator, loss: Loss, d: &Dataset) -> Result<LooResult> {
    est.validate()?;
    est.check_dims(d.k(), d.m())?;
    let losses = (0..d.n())
        .map(|i| pointwise_loss(est, loss, &d.deleted(i), d.observation(i)).map_err(|e| e.in_fold(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LooResult::from_losses(losses, LooMethod::Naive))
}

/// Same folds as [`loo_naive`] from downdated sufficient statistics.
pub fn loo_fast(est: &Estimator, loss: Loss, d: &Dataset) -> Result<LooResult> {
    est.validate()?;
    est.check_dims(d.k(), d.m())?;
    let losses = match *est {
        Estimator::EmpiricalMean { axis } => mean_folds(est, axis, loss, d),
        Estimator::Kde { bandwidth, axis } => kde_folds(bandwidth, axis, loss, d),
        Estimator::NwStabilized {
            bandwidth,
            stabilizer,
        } => nw_folds(bandwidth, stabilizer, loss, d),
        Estimator::OlsSimple => ols_folds(est, None, loss, d)?,
        Estimator::OlsStabilized {
            stabilizer,
            truncation,
        } => ols_folds(est, Some((stabilizer, truncation)), loss, d)?,
    };
    Ok(LooResult::from_losses(losses, LooMethod::Fast))
}

fn mean_folds(est: &Estimator, axis: Axis, loss: Loss, d: &Dataset) -> Vec<f64> {
    let n = d.n();
    let w = axis.width(d.k(), d.m());
    let mut sum = vec![0.0; w];
    let mut abs_sum = vec![0.0; w];
    for o in d.iter() {
        for ((s, a), v) in sum.iter_mut().zip(abs_sum.iter_mut()).zip(axis.pick(o)) {
            *s += v;
            *a += v.abs();
        }
    }
    let nm1 = (n - 1) as f64;
    let mut deleted = vec![0.0; w];
    (0..n)
        .map(|i| {
            let z = d.observation(i);
            let xi = axis.pick(z);
            let mut cancelled = false;
            for j in 0..w {
                let rest = sum[j] - xi[j];
                cancelled |= rest.abs() < 1e-6 * abs_sum[j];
                deleted[j] = rest / nm1;
            }
            if cancelled {
                return pointwise_loss(est, loss, &d.deleted(i), z).expect("mean folds cannot fail");
            }
            loss.eval(&deleted, est.target(z))
        })
        .collect()
}

/// `s_i = Σ_{j≠i} φ((x_i - x_j)/h)` accumulated over unordered pairs.
fn pair_kernel_sums(xs: &[f64], h: f64, ys: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len();
    let mut den = vec![0.0; n];
    let mut num = vec![0.0; n];
    let inv_h = 1.0 / h;
    for i in 0..n {
        for j in 0..i {
            let w = gaussian_kernel((xs[i] - xs[j]) * inv_h);
            den[i] += w;
            den[j] += w;
            if let Some(ys) = ys {
                num[i] += w * ys[j];
                num[j] += w * ys[i];
            }
        }
    }
    (den, num)
}

fn kde_folds(h: f64, axis: Axis, loss: Loss, d: &Dataset) -> Vec<f64> {
    let k = d.k();
    let stride = k + d.m();
    let off = axis.offset(k);
    let xs: Vec<f64> = d.coords().chunks_exact(stride).map(|c| c[off]).collect();
    let (sums, _) = pair_kernel_sums(&xs, h, None);
    let scale = 1.0 / ((xs.len() - 1) as f64 * h);
    xs.iter()
        .zip(&sums)
        .map(|(&x, &s)| loss.eval_scalar(s * scale, x))
        .collect()
}

fn nw_folds(h: f64, delta: f64, loss: Loss, d: &Dataset) -> Vec<f64> {
    let xs: Vec<f64> = d.iter().map(|o| o.x0()).collect();
    let ys: Vec<f64> = d.iter().map(|o| o.y0()).collect();
    let (den, num) = pair_kernel_sums(&xs, h, Some(&ys));
    let ridge = (xs.len() - 1) as f64 * delta;
    (0..xs.len())
        .map(|i| {
            let pred = (num[i] / h) / (den[i] / h + ridge);
            loss.eval_scalar(pred, ys[i])
        })
        .collect()
}

fn ols_folds(est: &Estimator, stabilized: Option<(f64, f64)>, loss: Loss, d: &Dataset) -> Result<Vec<f64>> {
    let n = d.n();
    let nf = n as f64;
    let clamp = |y: f64| match stabilized {
        Some((_, b)) => y.clamp(-b, b),
        None => y,
    };
    let (sx, sy, sty) = d.iter().fold((0.0, 0.0, 0.0), |(a, b, c), o| {
        (a + o.x0(), b + o.y0(), c + clamp(o.y0()))
    });
    let (xm, ym, tm) = (sx / nf, sy / nf, sty / nf);
    let (sxx, sxy) = d.iter().fold((0.0, 0.0), |(a, b), o| {
        let dx = o.x0() - xm;
        (a + dx * dx, b + dx * (clamp(o.y0()) - tm))
    });
    let nm1 = nf - 1.0;
    let shrink = nf / nm1;
    (0..n)
        .map(|i| {
            let z = d.observation(i);
            let (xi, yi) = (z.x0(), z.y0());
            let dx = xi - xm;
            let dt = clamp(yi) - tm;
            let sxx_i = sxx - shrink * dx * dx;
            let cross = shrink * dx * dt;
            let sxy_i = sxy - cross;
            let unstable = sxx_i < DOWNDATE_GUARD * sxx
                || sxy_i.abs() < DOWNDATE_GUARD * (sxy.abs() + cross.abs());
            if unstable {
                return pointwise_loss(est, loss, &d.deleted(i), z).map_err(|e| e.in_fold(i));
            }
            let line = LineFit::from_moments(
                xm + (xm - xi) / nm1,
                ym + (ym - yi) / nm1,
                sxx_i,
                sxy_i,
                nm1,
                stabilized.map(|s| s.0),
            )
            .map_err(|e| e.in_fold(i))?;
            Ok(loss.eval_scalar(line.at(xi), yi))
        })
        .collect()
}

/// Monte Carlo estimate of `E[L(T_D(X), Y) | D]` from `m` fresh draws.
pub fn risk_oracle(
    est: &Estimator,
    loss: Loss,
    d: &Dataset,
    gen: &DataGenerator,
    m: usize,
    seed: u64,
) -> Result<RiskOracleResult> {
    risk_oracle_with(est, loss, d, gen, m, &mut rng::from_seed(seed))
}

/// [`risk_oracle`] drawing from a caller-supplied stream.
pub fn risk_oracle_with(
    est: &Estimator,
    loss: Loss,
    d: &Dataset,
    gen: &DataGenerator,
    m: usize,
    rng: &mut Rng,
) -> Result<RiskOracleResult> {
    if m < 2 {
        return Err(Error::Contract(format!("risk oracle needs M >= 2, got {m}")));
    }
    let (k, mm) = gen.dims();
    if (k, mm) != (d.k(), d.m()) {
        return Err(Error::DimensionMismatch {
            expected: d.k() + d.m(),
            found: k + mm,
        });
    }
    let fitted = est.fit(d)?;
    let mut buf = Vec::with_capacity(k + mm);
    let (mut mean, mut m2) = (0.0, 0.0);
    for t in 1..=m {
        buf.clear();
        gen.push_observation(rng, &mut buf);
        let z = ObsRef {
            x: &buf[..k],
            y: &buf[k..],
        };
        let v = fitted_loss(est, loss, &fitted, z);
        let delta = v - mean;
        mean += delta / t as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (m - 1) as f64;
    Ok(RiskOracleResult {
        risk: mean,
        mc_samples: m,
        std_error: (var / m as f64).sqrt(),
    })
}
