//! Dataset gradients of `D ↦ L(T_D(x), y)`, finite-difference checks and
//! stability profile estimation.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{CoordSample, DataGenerator, Dataset, ObsRef, Sample};
use crate::error::{Error, Result};
use crate::estimator::{fitted_loss, gaussian_kernel, pointwise_loss, scaled_kernel, Estimator, Loss};
use crate::rng::{self, Purpose};

/// Residuals below this are treated as sitting on the absolute-loss kink.
pub const KINK_TOLERANCE: f64 = 1e-12;

/// Attempts per probe before it is dropped.
pub const MAX_PROBE_ATTEMPTS: usize = 10;

/// Candidate slopes in the envelope grid.
pub const ENVELOPE_GRID: usize = 256;

/// Derivative of a scalar loss with respect to every data coordinate, laid
/// out observation by observation with the `x` block before the `y` block.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGradient {
    pub per_coordinate: Vec<f64>,
    pub norm: f64,
}

impl DataGradient {
    pub fn new(per_coordinate: Vec<f64>) -> Self {
        let norm = per_coordinate.iter().map(|v| v * v).sum::<f64>().sqrt();
        DataGradient {
            per_coordinate,
            norm,
        }
    }

    /// `‖self - other‖ / ‖other‖`, or the absolute gap when `other` is zero.
    pub fn relative_error(&self, other: &DataGradient) -> f64 {
        let diff = self
            .per_coordinate
            .iter()
            .zip(&other.per_coordinate)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if other.norm > 0.0 {
            diff / other.norm
        } else {
            diff
        }
    }
}

/// `∂L/∂T` at the prediction.
fn loss_gradient(loss: Loss, pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    match loss {
        Loss::Squared => Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t)).collect()),
        Loss::Absolute => {
            let r: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < KINK_TOLERANCE {
                return Err(Error::NonDifferentiable(norm));
            }
            Ok(r.into_iter().map(|v| v / norm).collect())
        }
        Loss::IdentityAbs => {
            let norm = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonDifferentiable(0.0));
            }
            Ok(pred.iter().map(|v| v / norm).collect())
        }
    }
}

/// Exact gradient of `D ↦ L(T_D(query(z)), target(z))`.
pub fn grad_analytic<S: Sample>(est: &Estimator, loss: Loss, data: &S, z: ObsRef<'_>) -> Result<DataGradient> {
    let q = est.query(z);
    let pred = est.predict(data, q)?;
    let target = est.target(z);
    if loss.has_target() && target.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: target.len(),
        });
    }
    let outer = loss_gradient(loss, &pred, target)?;
    let (k, m) = data.dims();
    let mut g = vec![0.0; data.len() * (k + m)];
    accumulate_estimator_gradient(est, data, q, pred[0], &outer, &mut g);
    Ok(DataGradient::new(g))
}

/// Adds `Σ_c outer[c] ∇_D T_c(q)` into `g`.
fn accumulate_estimator_gradient<S: Sample>(
    est: &Estimator,
    data: &S,
    q: &[f64],
    pred0: f64,
    outer: &[f64],
    g: &mut [f64],
) {
    let (k, m) = data.dims();
    let stride = k + m;
    let n = data.len() as f64;
    match *est {
        Estimator::EmpiricalMean { axis } => {
            let off = axis.offset(k);
            for row in g.chunks_exact_mut(stride) {
                for (c, w) in outer.iter().enumerate() {
                    row[off + c] += w / n;
                }
            }
        }
        Estimator::Kde { bandwidth: h, axis } => {
            let off = axis.offset(k);
            let scale = outer[0] / (n * h * h);
            for (row, o) in g.chunks_exact_mut(stride).zip(data.iter()) {
                let u = (q[0] - axis.pick(o)[0]) / h;
                row[off] += scale * u * gaussian_kernel(u);
            }
        }
        Estimator::OlsSimple => ols_gradient(data, q[0], 0.0, f64::INFINITY, outer[0], g),
        Estimator::OlsStabilized {
            stabilizer,
            truncation,
        } => ols_gradient(data, q[0], stabilizer, truncation, outer[0], g),
        Estimator::NwStabilized {
            bandwidth: h,
            stabilizer,
        } => {
            let den = data.iter().map(|o| scaled_kernel(q[0] - o.x0(), h)).sum::<f64>() + n * stabilizer;
            for (row, o) in g.chunks_exact_mut(stride).zip(data.iter()) {
                let u = q[0] - o.x0();
                let kj = scaled_kernel(u, h);
                row[0] += outer[0] * (u / (h * h)) * kj * (o.y0() - pred0) / den;
                row[1] += outer[0] * kj / den;
            }
        }
    }
}

/// `T = ȳ + β (q - x̄)` with `β = S_{xỹ} / (S_xx + nδ)` and `ỹ` clamped to `[-b, b]`.
fn ols_gradient<S: Sample>(data: &S, q: f64, delta: f64, b: f64, outer: f64, g: &mut [f64]) {
    let n = data.len() as f64;
    let (sx, sty) = data
        .iter()
        .fold((0.0, 0.0), |(a, c), o| (a + o.x0(), c + o.y0().clamp(-b, b)));
    let (xm, tm) = (sx / n, sty / n);
    let (sxx, sxt) = data.iter().fold((0.0, 0.0), |(a, c), o| {
        let dx = o.x0() - xm;
        (a + dx * dx, c + dx * (o.y0().clamp(-b, b) - tm))
    });
    let den = sxx + n * delta;
    let beta = sxt / den;
    let lever = q - xm;
    for (row, o) in g.chunks_exact_mut(2).zip(data.iter()) {
        let dx = o.x0() - xm;
        let yt = o.y0().clamp(-b, b);
        let active = if o.y0().abs() < b { 1.0 } else { 0.0 };
        let dbeta_dx = ((yt - tm) - 2.0 * beta * dx) / den;
        let dbeta_dy = dx * active / den;
        row[0] += outer * (dbeta_dx * lever - beta / n);
        row[1] += outer * (1.0 / n + dbeta_dy * lever);
    }
}

/// Central differences, one coordinate at a time.
pub fn grad_fd<S: Sample>(est: &Estimator, loss: Loss, data: &S, z: ObsRef<'_>, step: f64) -> Result<DataGradient> {
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::Contract(format!("finite-difference step {step} outside [1e-8, 1e-3]")));
    }
    let (k, m) = data.dims();
    let mut coords: Vec<f64> = data.iter().flat_map(|o| o.x.iter().chain(o.y).copied()).collect();
    let mut g = Vec::with_capacity(coords.len());
    for j in 0..coords.len() {
        let orig = coords[j];
        let (up, down) = (orig + step, orig - step);
        coords[j] = up;
        let f_up = pointwise_loss(est, loss, &CoordSample { k, m, coords: &coords }, z)?;
        coords[j] = down;
        let f_down = pointwise_loss(est, loss, &CoordSample { k, m, coords: &coords }, z)?;
        coords[j] = orig;
        g.push((f_up - f_down) / (up - down));
    }
    Ok(DataGradient::new(g))
}

/// Clamps every coordinate to `[-b, b]`.
pub fn truncate_dataset(d: &Dataset, b: f64) -> Result<Dataset> {
    if !(b > 0.0) {
        return Err(Error::Config(format!("truncation level must be positive, got {b}")));
    }
    let coords = d.coords().iter().map(|v| v.clamp(-b, b)).collect();
    Dataset::from_coords(d.k(), d.m(), coords)
}

/// One `(‖∇_D f_D(z)‖, ‖D‖)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientProbe {
    pub grad_norm: f64,
    pub data_norm: f64,
}

/// Hard upper envelope `‖∇_D f_D(z)‖ ≤ δ1 + δ2 ‖D‖` over a probe set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeFit {
    pub delta1_hat: f64,
    pub delta2_hat: f64,
    pub n: usize,
    pub violations: usize,
    pub probes: usize,
}

impl EnvelopeFit {
    #[inline]
    pub fn bound(&self, data_norm: f64) -> f64 {
        self.delta1_hat + self.delta2_hat * data_norm
    }

    pub fn violations_on(&self, probes: &[GradientProbe]) -> usize {
        probes.iter().filter(|p| p.grad_norm > self.bound(p.data_norm)).count()
    }
}

/// Predicate on datasets used to restrict probing.
pub type DatasetFilter<'a> = &'a (dyn Fn(&Dataset) -> bool + Sync);

/// Draws `probes` i.i.d. pairs `(D, z)` and records gradient and data norms.
/// Kink hits and datasets rejected by `accept` are redrawn from the same
/// substream, at most [`MAX_PROBE_ATTEMPTS`] times per probe.
pub fn gradient_probes(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    probes: usize,
    seed: u64,
    accept: Option<DatasetFilter<'_>>,
) -> Result<Vec<GradientProbe>> {
    let drawn: Vec<Option<GradientProbe>> = (0..probes)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::substream(seed, n, j, Purpose::Probe);
            for _ in 0..MAX_PROBE_ATTEMPTS {
                let d = gen.sample_with(n, &mut r)?;
                if accept.is_some_and(|f| !f(&d)) {
                    continue;
                }
                let z = gen.sample_observation(&mut r);
                match grad_analytic(est, loss, &d, z.as_ref()) {
                    Ok(g) => {
                        return Ok(Some(GradientProbe {
                            grad_norm: g.norm,
                            data_norm: d.norm(),
                        }))
                    }
                    Err(Error::NonDifferentiable(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let kept: Vec<GradientProbe> = drawn.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::InsufficientProbes(probes * MAX_PROBE_ATTEMPTS));
    }
    if kept.len() < probes {
        log::debug!("n = {n}: kept {} of {probes} probes", kept.len());
    }
    Ok(kept)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// Minimal envelope over [`ENVELOPE_GRID`] slopes in `[0, max g / min r]`,
/// minimizing `δ1 + δ2 · median r`.
pub fn fit_envelope_points(points: &[GradientProbe], n: usize) -> Result<EnvelopeFit> {
    if points.is_empty() {
        return Err(Error::InsufficientProbes(0));
    }
    let max_g = points.iter().map(|p| p.grad_norm).fold(0.0, f64::max);
    let min_r = points.iter().map(|p| p.data_norm).fold(f64::INFINITY, f64::min);
    let med_r = median(&mut points.iter().map(|p| p.data_norm).collect::<Vec<_>>());
    let top = if min_r > 0.0 { max_g / min_r } else { 0.0 };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..ENVELOPE_GRID {
        let slope = top * i as f64 / (ENVELOPE_GRID - 1) as f64;
        let d1 = points
            .iter()
            .map(|p| (p.grad_norm - slope * p.data_norm).max(0.0))
            .fold(0.0, f64::max);
        let objective = d1 + slope * med_r;
        if objective < best.0 {
            best = (objective, d1, slope);
        }
    }
    let mut fit = EnvelopeFit {
        delta1_hat: best.1,
        delta2_hat: best.2,
        n,
        violations: 0,
        probes: points.len(),
    };
    // rounding in δ1 + δ2·r can leave the binding probe a few ulps above
    while fit.violations_on(points) > 0 {
        fit.delta1_hat = next_up(fit.delta1_hat);
    }
    Ok(fit)
}

/// Samples probes and fits the minimal envelope.
pub fn fit_envelope(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    probes: usize,
    seed: u64,
) -> Result<EnvelopeFit> {
    fit_envelope_filtered(est, loss, gen, n, probes, seed, None)
}

/// [`fit_envelope`] restricted to datasets accepted by `accept`.
pub fn fit_envelope_filtered(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    probes: usize,
    seed: u64,
    accept: Option<DatasetFilter<'_>>,
) -> Result<EnvelopeFit> {
    if probes < 100 {
        return Err(Error::Contract(format!("envelope fit needs at least 100 probes, got {probes}")));
    }
    let points = gradient_probes(est, loss, gen, n, probes, seed, accept)?;
    fit_envelope_points(&points, n)
}

/// Monte Carlo estimate of `|E f_1(Z_1) - E f_D(Z)|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta3Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub reps: usize,
}

impl Delta3Estimate {
    /// `estimate + z · std_error`
    pub fn upper(&self, z: f64) -> f64 {
        self.estimate + z * self.std_error
    }
}

/// Per rep: loss of the fit without observation 1 at observation 1, minus
/// the full fit's mean loss over `m` fresh points. Both share `D`.
pub fn estimate_delta3(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    reps: usize,
    m: usize,
    seed: u64,
) -> Result<Delta3Estimate> {
    if reps < 100 {
        return Err(Error::Contract(format!("delta3 estimate needs at least 100 reps, got {reps}")));
    }
    if m == 0 {
        return Err(Error::Contract("delta3 estimate needs at least one fresh point".into()));
    }
    let diffs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::substream(seed, n, rep, Purpose::Delta3);
            let d = gen.sample_with(n, &mut r)?;
            let held = pointwise_loss(est, loss, &d.deleted(0), d.observation(0))?;
            let fitted = est.fit(&d)?;
            let fresh = (0..m)
                .map(|_| {
                    let z = gen.sample_observation(&mut r);
                    fitted_loss(est, loss, &fitted, z.as_ref())
                })
                .sum::<f64>()
                / m as f64;
            Ok(held - fresh)
        })
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_sd(&diffs);
    Ok(Delta3Estimate {
        estimate: mean.abs(),
        std_error: sd / (reps as f64).sqrt(),
        reps,
    })
}

pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub type PointRate = Arc<dyn Fn(usize, ObsRef<'_>) -> f64 + Send + Sync>;
pub type SizeRate = Arc<dyn Fn(usize) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    Fitted,
}

/// Rates `(δ1(n, z), δ2(n, z), δ3(n))`.
#[derive(Clone)]
pub struct StabilityProfile {
    pub delta1: PointRate,
    pub delta2: PointRate,
    pub delta3: SizeRate,
    pub provenance: Provenance,
}

impl fmt::Debug for StabilityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StabilityProfile")
            .field("provenance", &self.provenance)
            .finish_non_exhaustive()
    }
}

/// One row of a fitted profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub n: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl StabilityProfile {
    pub fn analytic(
        delta1: impl Fn(usize, ObsRef<'_>) -> f64 + Send + Sync + 'static,
        delta2: impl Fn(usize, ObsRef<'_>) -> f64 + Send + Sync + 'static,
        delta3: impl Fn(usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        StabilityProfile {
            delta1: Arc::new(delta1),
            delta2: Arc::new(delta2),
            delta3: Arc::new(delta3),
            provenance: Provenance::Analytic,
        }
    }

    /// Mean with absolute loss: `δ1 = 1/√n`, `δ2 = 0`, `δ3 = 2 E|X| / (n - 1)`.
    pub fn empirical_mean(x_abs_mean: f64) -> Self {
        Self::analytic(
            |n, _| 1.0 / (n as f64).sqrt(),
            |_, _| 0.0,
            move |n| 2.0 * x_abs_mean / (n as f64 - 1.0),
        )
    }

    /// Gaussian KDE with `identity_abs`: `δ1 = φ(1) / (h² √n)`, `δ2 = δ3 = 0`.
    pub fn kde(bandwidth: f64) -> Self {
        let c = gaussian_kernel(1.0) / (bandwidth * bandwidth);
        Self::analytic(move |n, _| c / (n as f64).sqrt(), |_, _| 0.0, |_| 0.0)
    }

    /// Constant-in-`z` rates read from a table. Sizes between rows are
    /// interpolated linearly in `log n`; sizes outside take the nearest row.
    pub fn fitted(mut table: Vec<ProfilePoint>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Contract("fitted profile needs at least one row".into()));
        }
        table.sort_by_key(|p| p.n);
        let table = Arc::new(table);
        let lookup = |table: Arc<Vec<ProfilePoint>>, pick: fn(&ProfilePoint) -> f64| {
            move |n: usize| interpolate(&table, n, pick)
        };
        let d1 = lookup(table.clone(), |p| p.delta1);
        let d2 = lookup(table.clone(), |p| p.delta2);
        Ok(StabilityProfile {
            delta1: Arc::new(move |n, _| d1(n)),
            delta2: Arc::new(move |n, _| d2(n)),
            delta3: Arc::new(lookup(table, |p| p.delta3)),
            provenance: Provenance::Fitted,
        })
    }
}

fn interpolate(table: &[ProfilePoint], n: usize, pick: fn(&ProfilePoint) -> f64) -> f64 {
    let first = &table[0];
    let last = &table[table.len() - 1];
    if n <= first.n {
        return pick(first);
    }
    if n >= last.n {
        return pick(last);
    }
    let hi = table.partition_point(|p| p.n < n);
    let (a, b) = (&table[hi - 1], &table[hi]);
    if b.n == n {
        return pick(b);
    }
    let w = ((n as f64).ln() - (a.n as f64).ln()) / ((b.n as f64).ln() - (a.n as f64).ln());
    pick(a) + w * (pick(b) - pick(a))
}

/// Envelope and `δ3` estimate at one sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub fit: EnvelopeFit,
    pub delta3: Delta3Estimate,
}

/// Settings for [`fit_profile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSettings {
    pub probes: usize,
    pub reps: usize,
    pub oracle_m: usize,
    /// `δ3(n)` is taken as `estimate + z · std_error`.
    pub delta3_z: f64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            probes: 200,
            reps: 200,
            oracle_m: 1000,
            delta3_z: 3.0,
        }
    }
}

/// Fits envelopes and `δ3` over a grid of sample sizes.
pub fn fit_profile(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n_grid: &[usize],
    settings: ProfileSettings,
    seed: u64,
) -> Result<(StabilityProfile, Vec<ProfileRow>)> {
    let rows = n_grid
        .iter()
        .map(|&n| {
            let fit = fit_envelope(est, loss, gen, n, settings.probes, seed)?;
            let delta3 = estimate_delta3(est, loss, gen, n, settings.reps, settings.oracle_m, seed)?;
            Ok(ProfileRow { fit, delta3 })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = rows
        .iter()
        .map(|r| ProfilePoint {
            n: r.fit.n,
            delta1: r.fit.delta1_hat,
            delta2: r.fit.delta2_hat,
            delta3: r.delta3.upper(settings.delta3_z),
        })
        .collect();
    Ok((StabilityProfile::fitted(table)?, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, Observation};
    use crate::estimator::Axis;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn estimators() -> Vec<Estimator> {
        vec![
            Estimator::EmpiricalMean { axis: Axis::X },
            Estimator::Kde {
                bandwidth: 0.5,
                axis: Axis::X,
            },
            Estimator::OlsSimple,
            Estimator::OlsStabilized {
                stabilizer: 0.05,
                truncation: 1.5,
            },
            Estimator::NwStabilized {
                bandwidth: 0.4,
                stabilizer: 0.01,
            },
        ]
    }

    #[test]
    fn mean_gradient_is_exact() {
        let gen = DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap();
        let d = sample_dataset(&gen, 37, 4).unwrap();
        let est = Estimator::EmpiricalMean { axis: Axis::X };
        let z = Observation::scalar(10.0, 0.0);
        let g = grad_analytic(&est, Loss::Absolute, &d, z.as_ref()).unwrap();
        for (i, v) in g.per_coordinate.iter().enumerate() {
            let expected = if i % 2 == 0 { -1.0 / 37.0 } else { 0.0 };
            assert_eq!(*v, expected);
        }
        assert_relative_eq!(g.norm, 1.0 / 37f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn kde_single_point_gradient_is_phi_one() {
        let d = Dataset::from_points(&[0.0, 40.0]).unwrap();
        let est = Estimator::Kde {
            bandwidth: 1.0,
            axis: Axis::X,
        };
        let z = Observation::new(vec![1.0], vec![]).unwrap();
        let g = grad_analytic(&est, Loss::IdentityAbs, &d.deleted(1), z.as_ref()).unwrap();
        assert_eq!(g.per_coordinate.len(), 1);
        assert_relative_eq!(g.per_coordinate[0].abs(), 0.241_970_724_519_143_37, max_relative = 1e-15);
    }

    #[test]
    fn ols_kink_on_the_line_and_fd_agreement_off_it() {
        let d = Dataset::from_xy(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let on = Observation::scalar(1.5, 1.5);
        assert!(matches!(
            grad_analytic(&Estimator::OlsSimple, Loss::Absolute, &d, on.as_ref()),
            Err(Error::NonDifferentiable(_))
        ));
        let off = Observation::scalar(1.5, 4.0);
        let a = grad_analytic(&Estimator::OlsSimple, Loss::Absolute, &d, off.as_ref()).unwrap();
        let f = grad_fd(&Estimator::OlsSimple, Loss::Absolute, &d, off.as_ref(), 1e-5).unwrap();
        assert!(a.relative_error(&f) < 1e-6);
    }

    #[test]
    fn fd_step_is_bounded() {
        let d = Dataset::from_xy(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let z = Observation::scalar(0.3, 0.0);
        let est = Estimator::EmpiricalMean { axis: Axis::X };
        assert!(grad_fd(&est, Loss::Squared, &d, z.as_ref(), 1e-2).is_err());
        assert!(grad_fd(&est, Loss::Squared, &d, z.as_ref(), 1e-9).is_err());
    }

    #[test]
    fn fd_error_is_second_order() {
        let gen = DataGenerator::gaussian_sine(1.0, 0.5).unwrap();
        let d = sample_dataset(&gen, 8, 3).unwrap();
        let z = Observation::scalar(0.2, 0.9);
        let est = Estimator::NwStabilized {
            bandwidth: 0.8,
            stabilizer: 0.05,
        };
        let exact = grad_analytic(&est, Loss::Squared, &d, z.as_ref()).unwrap();
        let e1 = grad_fd(&est, Loss::Squared, &d, z.as_ref(), 1e-3).unwrap().relative_error(&exact);
        let e2 = grad_fd(&est, Loss::Squared, &d, z.as_ref(), 5e-4).unwrap().relative_error(&exact);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn analytic_matches_fd_for_all_pairs() {
        let gen = DataGenerator::gaussian_sine(1.5, 0.8).unwrap();
        let mut r = rng::from_seed(11);
        for est in estimators() {
            for loss in [Loss::Absolute, Loss::Squared, Loss::IdentityAbs] {
                for s in 0..10 {
                    let d = sample_dataset(&gen, 9, s).unwrap();
                    let z = gen.sample_observation(&mut r);
                    let a = match grad_analytic(&est, loss, &d, z.as_ref()) {
                        Ok(a) => a,
                        Err(Error::NonDifferentiable(_)) => continue,
                        Err(e) => panic!("{e}"),
                    };
                    let f = grad_fd(&est, loss, &d, z.as_ref(), 1e-5).unwrap();
                    let err = a.relative_error(&f);
                    assert!(err < 1e-5, "{est} {loss:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn truncation_clamps_coordinates() {
        let d = Dataset::from_coords(1, 0, vec![-5.0, 0.3, 7.0]).unwrap();
        assert_eq!(truncate_dataset(&d, 1.0).unwrap().coords(), &[-1.0, 0.3, 1.0]);
        assert_eq!(truncate_dataset(&d, 7.0).unwrap(), d);
        assert!(truncate_dataset(&d, 0.0).is_err());
    }

    #[test]
    fn mean_envelope_is_one_over_root_n() {
        let gen = DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap();
        let est = Estimator::EmpiricalMean { axis: Axis::X };
        for n in [16, 100] {
            let fit = fit_envelope(&est, Loss::Absolute, &gen, n, 150, 2).unwrap();
            assert!((fit.delta1_hat - 1.0 / (n as f64).sqrt()).abs() < 1e-9);
            assert_eq!(fit.delta2_hat, 0.0);
            assert_eq!(fit.violations, 0);
        }
    }

    #[test]
    fn envelope_rejects_few_probes() {
        let gen = DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap();
        let est = Estimator::EmpiricalMean { axis: Axis::X };
        assert!(fit_envelope(&est, Loss::Absolute, &gen, 10, 50, 0).is_err());
    }

    #[test]
    fn envelope_on_hand_points() {
        let pts = [
            GradientProbe {
                grad_norm: 1.0,
                data_norm: 1.0,
            },
            GradientProbe {
                grad_norm: 2.0,
                data_norm: 2.0,
            },
            GradientProbe {
                grad_norm: 3.0,
                data_norm: 3.0,
            },
        ];
        // slopes up to 3; slope 1 gives δ1 = 0 and the smallest objective 2
        let fit = fit_envelope_points(&pts, 3).unwrap();
        assert_eq!(fit.violations, 0);
        assert!((fit.delta1_hat + fit.delta2_hat * 2.0 - 2.0).abs() < 0.03);
    }

    #[test]
    fn mean_delta3_within_its_bound() {
        let gen = DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap();
        let est = Estimator::EmpiricalMean { axis: Axis::X };
        let n = 20;
        let d3 = estimate_delta3(&est, Loss::Absolute, &gen, n, 400, 200, 9).unwrap();
        let bound = 2.0 * gen.x_abs_mean().unwrap() / (n as f64 - 1.0);
        assert!(d3.estimate <= bound + 3.0 * d3.std_error, "{d3:?} vs {bound}");
    }

    #[test]
    fn kde_delta3_is_zero_within_noise() {
        let gen = DataGenerator::uniform_sine(10.0).unwrap();
        let est = Estimator::Kde {
            bandwidth: 0.1,
            axis: Axis::Y,
        };
        let d3 = estimate_delta3(&est, Loss::IdentityAbs, &gen, 64, 300, 200, 5).unwrap();
        assert!(d3.estimate <= 3.0 * d3.std_error, "{d3:?}");
    }

    #[test]
    fn fitted_profile_interpolates_in_log_n() {
        let p = StabilityProfile::fitted(vec![
            ProfilePoint {
                n: 100,
                delta1: 1.0,
                delta2: 0.0,
                delta3: 0.5,
            },
            ProfilePoint {
                n: 10,
                delta1: 3.0,
                delta2: 1.0,
                delta3: 0.7,
            },
        ])
        .unwrap();
        let z = Observation::scalar(0.0, 0.0);
        assert_eq!((p.delta1)(10, z.as_ref()), 3.0);
        assert_eq!((p.delta1)(5, z.as_ref()), 3.0);
        assert_eq!((p.delta1)(1000, z.as_ref()), 1.0);
        assert_relative_eq!((p.delta2)(31, z.as_ref()), 2.0 - 31f64.log10(), max_relative = 1e-12);
        assert_eq!((p.delta3)(100), 0.5);
        assert_eq!(p.provenance, Provenance::Fitted);
    }

    #[test]
    fn quadratic_functional_does_not_concentrate() {
        // F(D) = ‖D‖² / (2√n) has ‖∇F‖ = ‖D‖/√n, so δ2 = 1/√n and E‖∇F‖² = E‖Z‖².
        let gen = DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap();
        let energy = |n: usize| {
            (0..200)
                .map(|s| sample_dataset(&gen, n, s).unwrap().norm().powi(2) / n as f64)
                .sum::<f64>()
                / 200.0
        };
        assert!(energy(1024) >= 0.5 * energy(64));
    }

    proptest! {
        #[test]
        fn gradient_norm_is_euclidean(v in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            let g = DataGradient::new(v.clone());
            let direct = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((g.norm - direct).abs() <= 1e-12 * direct.max(1e-300));
        }

        #[test]
        fn mean_gradient_norm_is_one_over_root_n(seed in 0u64..10_000, n in 2usize..200) {
            let gen = DataGenerator::gaussian_linear(0.0, 2.0, 1.0).unwrap();
            let d = sample_dataset(&gen, n, seed).unwrap();
            let mut r = rng::from_seed(seed ^ 0xabc);
            let z = gen.sample_observation(&mut r);
            let est = Estimator::EmpiricalMean { axis: Axis::X };
            if let Ok(g) = grad_analytic(&est, Loss::Absolute, &d, z.as_ref()) {
                prop_assert!((g.norm * (n as f64).sqrt() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn envelope_covers_its_probes(
            pts in proptest::collection::vec((0.0f64..10.0, 0.1f64..10.0), 1..60)
        ) {
            let probes: Vec<GradientProbe> = pts
                .iter()
                .map(|&(g, r)| GradientProbe { grad_norm: g, data_norm: r })
                .collect();
            let fit = fit_envelope_points(&probes, 1).unwrap();
            prop_assert_eq!(fit.violations_on(&probes), 0);
            prop_assert!(fit.delta1_hat >= 0.0 && fit.delta2_hat >= 0.0);
        }
    }
}
