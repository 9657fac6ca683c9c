//! Estimators, losses and their closed-form predictions.

use std::f64::consts::PI;
use std::fmt;

use crate::data::{ObsRef, Sample};
use crate::error::{Error, Result};

/// `1 / √(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel sums in fitted models skip points further than this many
/// bandwidths from the query; each skipped term is below `e^{-40.5}`.
pub const KERNEL_CUTOFF: f64 = 9.0;

/// Standard Gaussian density `φ(u)`.
#[inline]
pub fn gaussian_kernel(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// `sup_u |φ'(u)| = φ(1)`, attained at `u = ±1`.
pub fn gaussian_kernel_derivative_sup() -> f64 {
    gaussian_kernel(1.0)
}

/// `K_h(u) = φ(u / h) / h`
#[inline]
pub fn scaled_kernel(u: f64, h: f64) -> f64 {
    gaussian_kernel(u / h) / h
}

/// Which coordinate block an unsupervised estimator reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    #[inline]
    pub fn pick<'a>(self, z: ObsRef<'a>) -> &'a [f64] {
        match self {
            Axis::X => z.x,
            Axis::Y => z.y,
        }
    }

    /// Offset of this block inside one observation's coordinates.
    pub(crate) fn offset(self, k: usize) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => k,
        }
    }

    pub(crate) fn width(self, k: usize, m: usize) -> usize {
        match self {
            Axis::X => k,
            Axis::Y => m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// A statistic mapping a dataset to a predictor.
///
/// The mean and the density estimate are unsupervised: they read one block of
/// every observation (`axis`), are queried at that block of `z`, and their
/// loss target (when the loss has one) is that same block. The regression
/// estimators predict `y` from scalar `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    EmpiricalMean { axis: Axis },
    /// Gaussian kernel density estimate with bandwidth `h`.
    Kde { bandwidth: f64, axis: Axis },
    /// Least squares line.
    OlsSimple,
    /// Least squares line with `n·δ` added to `Σ(x - x̄)²` and responses
    /// clamped to `[-b, b]` inside the slope.
    OlsStabilized { stabilizer: f64, truncation: f64 },
    /// Nadaraya-Watson regression with `n·δ` added to the kernel weight sum.
    NwStabilized { bandwidth: f64, stabilizer: f64 },
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::EmpiricalMean { axis } => write!(f, "empirical_mean[{}]", axis.name()),
            Estimator::Kde { bandwidth, axis } => write!(f, "kde[h={bandwidth}, {}]", axis.name()),
            Estimator::OlsSimple => write!(f, "ols_simple"),
            Estimator::OlsStabilized {
                stabilizer,
                truncation,
            } => write!(f, "ols_stabilized[delta={stabilizer}, b={truncation}]"),
            Estimator::NwStabilized {
                bandwidth,
                stabilizer,
            } => write!(f, "nw_kernel_stabilized[h={bandwidth}, delta={stabilizer}]"),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl Estimator {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Estimator::EmpiricalMean { .. } => "empirical_mean",
            Estimator::Kde { .. } => "kde",
            Estimator::OlsSimple => "ols_simple",
            Estimator::OlsStabilized { .. } => "ols_stabilized",
            Estimator::NwStabilized { .. } => "nw_kernel_stabilized",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Estimator::EmpiricalMean { .. } | Estimator::OlsSimple => Ok(()),
            Estimator::Kde { bandwidth, .. } => positive("bandwidth", bandwidth),
            Estimator::OlsStabilized {
                stabilizer,
                truncation,
            } => {
                positive("stabilizer", stabilizer)?;
                positive("truncation", truncation)
            }
            Estimator::NwStabilized {
                bandwidth,
                stabilizer,
            } => {
                positive("bandwidth", bandwidth)?;
                positive("stabilizer", stabilizer)
            }
        }
    }

    pub fn is_supervised(&self) -> bool {
        !matches!(self, Estimator::EmpiricalMean { .. } | Estimator::Kde { .. })
    }

    /// Checks the sample dimensions this estimator needs.
    pub fn check_dims(&self, k: usize, m: usize) -> Result<()> {
        let need_one = |found: usize| {
            if found == 1 {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: 1, found })
            }
        };
        match self {
            Estimator::EmpiricalMean { axis } => {
                if axis.width(k, m) == 0 {
                    Err(Error::DimensionMismatch { expected: 1, found: 0 })
                } else {
                    Ok(())
                }
            }
            Estimator::Kde { axis, .. } => need_one(axis.width(k, m)),
            _ => {
                need_one(k)?;
                need_one(m)
            }
        }
    }

    /// The input at which the predictor is evaluated for observation `z`.
    #[inline]
    pub fn query<'a>(&self, z: ObsRef<'a>) -> &'a [f64] {
        match self {
            Estimator::EmpiricalMean { axis } | Estimator::Kde { axis, .. } => axis.pick(z),
            _ => z.x,
        }
    }

    /// The loss target for observation `z`.
    #[inline]
    pub fn target<'a>(&self, z: ObsRef<'a>) -> &'a [f64] {
        match self {
            Estimator::EmpiricalMean { axis } | Estimator::Kde { axis, .. } => axis.pick(z),
            _ => z.y,
        }
    }

    /// `T_D(x)` computed directly from the sample. Stabilizers scale with the
    /// number of points actually used.
    pub fn predict<S: Sample>(&self, data: &S, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let (k, m) = data.dims();
        self.check_dims(k, m)?;
        if data.is_empty() {
            return Err(Error::TooFewObservations {
                required: 1,
                found: 0,
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        match *self {
            Estimator::EmpiricalMean { axis } => Ok(mean_of(data, axis)),
            _ => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        found: x.len(),
                    });
                }
                Ok(vec![self.predict_scalar_unchecked(data, x[0])?])
            }
        }
    }

    /// Scalar prediction for the kernel and regression estimators.
    pub(crate) fn predict_scalar_unchecked<S: Sample>(&self, data: &S, x: f64) -> Result<f64> {
        let n = data.len() as f64;
        match *self {
            Estimator::EmpiricalMean { axis } => Ok(mean_of(data, axis)[0]),
            Estimator::Kde { bandwidth, axis } => {
                let s: f64 = data
                    .iter()
                    .map(|o| gaussian_kernel((x - axis.pick(o)[0]) / bandwidth))
                    .sum();
                Ok(s / (n * bandwidth))
            }
            Estimator::OlsSimple => {
                let line = LineFit::from_sample(data, None)?;
                Ok(line.at(x))
            }
            Estimator::OlsStabilized {
                stabilizer,
                truncation,
            } => {
                let line = LineFit::from_sample(data, Some((stabilizer, truncation)))?;
                Ok(line.at(x))
            }
            Estimator::NwStabilized {
                bandwidth,
                stabilizer,
            } => {
                let (num, den) = data.iter().fold((0.0, 0.0), |(num, den), o| {
                    let w = scaled_kernel(x - o.x0(), bandwidth);
                    (num + w * o.y0(), den + w)
                });
                Ok(num / (den + n * stabilizer))
            }
        }
    }

    /// Fits once for repeated evaluation.
    pub fn fit<S: Sample>(&self, data: &S) -> Result<Fitted> {
        self.validate()?;
        let (k, m) = data.dims();
        self.check_dims(k, m)?;
        if data.is_empty() {
            return Err(Error::TooFewObservations {
                required: 1,
                found: 0,
            });
        }
        let n = data.len();
        let model = match *self {
            Estimator::EmpiricalMean { axis } => FittedKind::Constant(mean_of(data, axis)),
            Estimator::Kde { bandwidth, axis } => {
                let mut points: Vec<f64> = data.iter().map(|o| axis.pick(o)[0]).collect();
                points.sort_by(f64::total_cmp);
                FittedKind::Kde {
                    points,
                    bandwidth,
                    scale: 1.0 / (n as f64 * bandwidth),
                }
            }
            Estimator::OlsSimple => FittedKind::Line(LineFit::from_sample(data, None)?),
            Estimator::OlsStabilized {
                stabilizer,
                truncation,
            } => FittedKind::Line(LineFit::from_sample(data, Some((stabilizer, truncation)))?),
            Estimator::NwStabilized {
                bandwidth,
                stabilizer,
            } => {
                let mut pairs: Vec<(f64, f64)> = data.iter().map(|o| (o.x0(), o.y0())).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let (xs, ys) = pairs.into_iter().unzip();
                FittedKind::Nw {
                    xs,
                    ys,
                    bandwidth,
                    ridge: n as f64 * stabilizer,
                }
            }
        };
        Ok(Fitted { model })
    }
}

fn mean_of<S: Sample>(data: &S, axis: Axis) -> Vec<f64> {
    let (k, m) = data.dims();
    let mut acc = vec![0.0; axis.width(k, m)];
    for o in data.iter() {
        for (a, v) in acc.iter_mut().zip(axis.pick(o)) {
            *a += v;
        }
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Least squares line in centered form: `T(x) = ȳ + slope · (x - x̄)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub x_mean: f64,
    pub y_mean: f64,
    pub slope: f64,
}

impl LineFit {
    /// `stabilized = Some((δ, b))` adds `n·δ` to the denominator and clamps
    /// the responses entering the slope to `[-b, b]`.
    pub(crate) fn from_sample<S: Sample>(data: &S, stabilized: Option<(f64, f64)>) -> Result<Self> {
        let n = data.len() as f64;
        let clamp = |y: f64| match stabilized {
            Some((_, b)) => y.clamp(-b, b),
            None => y,
        };
        let (sx, sy, sty) = data.iter().fold((0.0, 0.0, 0.0), |(sx, sy, sty), o| {
            (sx + o.x0(), sy + o.y0(), sty + clamp(o.y0()))
        });
        let (x_mean, y_mean, ty_mean) = (sx / n, sy / n, sty / n);
        let (sxx, sxy) = data.iter().fold((0.0, 0.0), |(sxx, sxy), o| {
            let dx = o.x0() - x_mean;
            (sxx + dx * dx, sxy + dx * (clamp(o.y0()) - ty_mean))
        });
        Self::from_moments(x_mean, y_mean, sxx, sxy, n, stabilized.map(|s| s.0))
    }

    pub(crate) fn from_moments(
        x_mean: f64,
        y_mean: f64,
        sxx: f64,
        sxy: f64,
        n: f64,
        stabilizer: Option<f64>,
    ) -> Result<Self> {
        let den = match stabilizer {
            Some(delta) => sxx + n * delta,
            None => {
                if sxx <= 0.0 {
                    return Err(Error::DegenerateDesign);
                }
                sxx
            }
        };
        Ok(LineFit {
            x_mean,
            y_mean,
            slope: sxy / den,
        })
    }

    #[inline]
    pub fn at(&self, x: f64) -> f64 {
        self.y_mean + self.slope * (x - self.x_mean)
    }

    pub fn intercept(&self) -> f64 {
        self.y_mean - self.slope * self.x_mean
    }
}

/// A fitted predictor. Kernel models keep their support sorted and skip
/// terms beyond [`KERNEL_CUTOFF`] bandwidths.
#[derive(Debug, Clone)]
pub struct Fitted {
    model: FittedKind,
}

#[derive(Debug, Clone)]
enum FittedKind {
    Constant(Vec<f64>),
    Kde {
        points: Vec<f64>,
        bandwidth: f64,
        scale: f64,
    },
    Line(LineFit),
    Nw {
        xs: Vec<f64>,
        ys: Vec<f64>,
        bandwidth: f64,
        ridge: f64,
    },
}

fn window(sorted: &[f64], center: f64, half_width: f64) -> std::ops::Range<usize> {
    let lo = sorted.partition_point(|&p| p < center - half_width);
    let hi = sorted.partition_point(|&p| p <= center + half_width);
    lo..hi.max(lo)
}

impl Fitted {
    /// Prediction at a scalar query (first component for vector means).
    #[inline]
    pub fn predict_scalar(&self, x: f64) -> f64 {
        match &self.model {
            FittedKind::Constant(c) => c[0],
            FittedKind::Kde {
                points,
                bandwidth,
                scale,
            } => {
                let r = window(points, x, KERNEL_CUTOFF * bandwidth);
                let inv_h = 1.0 / bandwidth;
                let s: f64 = points[r].iter().map(|&p| gaussian_kernel((x - p) * inv_h)).sum();
                s * scale
            }
            FittedKind::Line(line) => line.at(x),
            FittedKind::Nw {
                xs,
                ys,
                bandwidth,
                ridge,
            } => {
                let r = window(xs, x, KERNEL_CUTOFF * bandwidth);
                let inv_h = 1.0 / bandwidth;
                let (num, den) = xs[r.clone()]
                    .iter()
                    .zip(&ys[r])
                    .fold((0.0, 0.0), |(num, den), (&xi, &yi)| {
                        let w = gaussian_kernel((x - xi) * inv_h) * inv_h;
                        (num + w * yi, den + w)
                    });
                num / (den + ridge)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        match &self.model {
            FittedKind::Constant(c) => c.clone(),
            _ => vec![self.predict_scalar(x[0])],
        }
    }

    pub fn is_vector_valued(&self) -> bool {
        matches!(&self.model, FittedKind::Constant(c) if c.len() != 1)
    }
}

/// Loss functions. `IdentityAbs` scores the prediction alone, `|T_D(z)|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Absolute,
    Squared,
    IdentityAbs,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Absolute => "absolute",
            Loss::Squared => "squared",
            Loss::IdentityAbs => "identity_abs",
        }
    }

    pub fn has_target(&self) -> bool {
        !matches!(self, Loss::IdentityAbs)
    }

    #[inline]
    pub fn eval_scalar(&self, prediction: f64, target: f64) -> f64 {
        match self {
            Loss::Absolute => (prediction - target).abs(),
            Loss::Squared => (prediction - target) * (prediction - target),
            Loss::IdentityAbs => prediction.abs(),
        }
    }

    /// Vector form: `|·|` is the Euclidean norm.
    pub fn eval(&self, prediction: &[f64], target: &[f64]) -> f64 {
        if prediction.len() == 1 {
            return self.eval_scalar(prediction[0], target.first().copied().unwrap_or(0.0));
        }
        match self {
            Loss::IdentityAbs => prediction.iter().map(|p| p * p).sum::<f64>().sqrt(),
            _ => {
                let sq: f64 = prediction.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
                if *self == Loss::Squared {
                    sq
                } else {
                    sq.sqrt()
                }
            }
        }
    }
}

/// Scalar loss of a prediction; `target` must be absent exactly for `IdentityAbs`.
pub fn loss_eval(loss: Loss, prediction: &[f64], target: Option<&[f64]>) -> Result<f64> {
    match (loss.has_target(), target) {
        (false, None) => Ok(loss.eval(prediction, &[])),
        (false, Some(_)) => Err(Error::Contract("identity_abs takes no target".into())),
        (true, None) => Err(Error::Contract(format!("{} loss needs a target", loss.name()))),
        (true, Some(t)) if t.len() != prediction.len() => Err(Error::DimensionMismatch {
            expected: prediction.len(),
            found: t.len(),
        }),
        (true, Some(t)) => Ok(loss.eval(prediction, t)),
    }
}

/// `f_D(z) = L(T_D(query(z)), target(z))`, refitting from the sample.
pub fn pointwise_loss<S: Sample>(est: &Estimator, loss: Loss, data: &S, z: ObsRef<'_>) -> Result<f64> {
    let pred = est.predict(data, est.query(z))?;
    let target = est.target(z);
    if loss.has_target() && target.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: target.len(),
        });
    }
    Ok(loss.eval(&pred, target))
}

/// `f_D(z)` through a fitted model.
#[inline]
pub fn fitted_loss(est: &Estimator, loss: Loss, fitted: &Fitted, z: ObsRef<'_>) -> f64 {
    if fitted.is_vector_valued() {
        loss.eval(&fitted.predict(est.query(z)), est.target(z))
    } else {
        let t = est.target(z).first().copied().unwrap_or(0.0);
        loss.eval_scalar(fitted.predict_scalar(est.query(z)[0]), t)
    }
}

/// Normal density with standard deviation `s`, used in tests and docs.
pub fn normal_pdf(u: f64, s: f64) -> f64 {
    (-(u * u) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
}
