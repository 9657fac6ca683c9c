//! Observations, datasets, deleted views and the data generators used by the
//! experiments.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// One observation `z = (x, y)` with `x ∈ R^k`, `y ∈ R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Observation {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if let Some(i) = x.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Observation { x, y })
    }

    /// Observation with scalar feature and scalar response.
    pub fn scalar(x: f64, y: f64) -> Self {
        Observation {
            x: vec![x],
            y: vec![y],
        }
    }

    pub fn as_ref(&self) -> ObsRef<'_> {
        ObsRef {
            x: &self.x,
            y: &self.y,
        }
    }
}

/// Borrowed view of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRef<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl ObsRef<'_> {
    pub fn to_owned(&self) -> Observation {
        Observation {
            x: self.x.to_vec(),
            y: self.y.to_vec(),
        }
    }

    /// Scalar feature. Callers check `k == 1` beforehand.
    #[inline]
    pub fn x0(&self) -> f64 {
        self.x[0]
    }

    #[inline]
    pub fn y0(&self) -> f64 {
        self.y[0]
    }
}

/// Anything an estimator can be fitted on: a full dataset or a deleted view.
pub trait Sample {
    fn len(&self) -> usize;
    /// `(k, m)`: feature and response dimensions.
    fn dims(&self) -> (usize, usize);
    fn get(&self, i: usize) -> ObsRef<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iter(&self) -> SampleIter<'_, Self>
    where
        Self: Sized,
    {
        SampleIter {
            sample: self,
            next: 0,
        }
    }
}

pub struct SampleIter<'a, S> {
    sample: &'a S,
    next: usize,
}

impl<'a, S: Sample> Iterator for SampleIter<'a, S> {
    type Item = ObsRef<'a>;

    fn next(&mut self) -> Option<ObsRef<'a>> {
        if self.next < self.sample.len() {
            let obs = self.sample.get(self.next);
            self.next += 1;
            Some(obs)
        } else {
            None
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.sample.len() - self.next;
        (rest, Some(rest))
    }
}

impl<S: Sample> ExactSizeIterator for SampleIter<'_, S> {}

/// An ordered list of `n >= 2` observations stored as one flat coordinate
/// vector, observation-major with the `x` block before the `y` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    k: usize,
    m: usize,
    coords: Vec<f64>,
}

impl Dataset {
    pub fn new(observations: &[Observation]) -> Result<Self> {
        let first = observations.first().ok_or(Error::TooFewObservations {
            required: 2,
            found: 0,
        })?;
        let (k, m) = (first.x.len(), first.y.len());
        let mut coords = Vec::with_capacity(observations.len() * (k + m));
        for obs in observations {
            if obs.x.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: obs.x.len(),
                });
            }
            if obs.y.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: obs.y.len(),
                });
            }
            coords.extend_from_slice(&obs.x);
            coords.extend_from_slice(&obs.y);
        }
        Self::from_coords(k, m, coords)
    }

    pub fn from_coords(k: usize, m: usize, coords: Vec<f64>) -> Result<Self> {
        let stride = k + m;
        if stride == 0 {
            return Err(Error::Contract("observations need at least one coordinate".into()));
        }
        if coords.len() % stride != 0 {
            return Err(Error::Contract(format!(
                "{} coordinates do not divide into observations of width {stride}",
                coords.len()
            )));
        }
        let n = coords.len() / stride;
        if n < 2 {
            return Err(Error::TooFewObservations {
                required: 2,
                found: n,
            });
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Dataset { k, m, coords })
    }

    /// Scalar-feature, scalar-response dataset.
    pub fn from_xy(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                found: ys.len(),
            });
        }
        let coords = xs.iter().zip(ys).flat_map(|(&x, &y)| [x, y]).collect();
        Self::from_coords(1, 1, coords)
    }

    /// Scalar points with no response (`m = 0`).
    pub fn from_points(xs: &[f64]) -> Result<Self> {
        Self::from_coords(1, 0, xs.to_vec())
    }

    pub fn n(&self) -> usize {
        self.coords.len() / (self.k + self.m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Flat coordinates in gradient layout.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn observation(&self, i: usize) -> ObsRef<'_> {
        self.get(i)
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.iter().map(|o| o.to_owned()).collect()
    }

    /// Euclidean norm of the flattened coordinate vector.
    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn deleted(&self, omitted: usize) -> DeletedView<'_> {
        DeletedView::new(self, omitted)
    }

    /// Reorders observations: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation of the observations".into()));
        }
        let stride = self.k + self.m;
        let coords = perm
            .iter()
            .flat_map(|&p| self.coords[p * stride..(p + 1) * stride].iter().copied())
            .collect();
        Ok(Dataset {
            k: self.k,
            m: self.m,
            coords,
        })
    }
}

impl Sample for Dataset {
    fn len(&self) -> usize {
        self.n()
    }

    fn dims(&self) -> (usize, usize) {
        (self.k, self.m)
    }

    #[inline]
    fn get(&self, i: usize) -> ObsRef<'_> {
        let stride = self.k + self.m;
        let row = &self.coords[i * stride..(i + 1) * stride];
        ObsRef {
            x: &row[..self.k],
            y: &row[self.k..],
        }
    }
}

/// Euclidean norm of all `(k + m) · n` coordinates of `d`.
pub fn dataset_norm(d: &Dataset) -> f64 {
    d.norm()
}

/// The dataset with one observation removed. Borrows the parent, never copies.
#[derive(Debug, Clone, Copy)]
pub struct DeletedView<'a> {
    parent: &'a Dataset,
    omitted: usize,
}

impl<'a> DeletedView<'a> {
    /// `omitted` is zero-based.
    pub fn new(parent: &'a Dataset, omitted: usize) -> Self {
        assert!(omitted < parent.n(), "omitted index out of range");
        DeletedView { parent, omitted }
    }

    pub fn parent(&self) -> &'a Dataset {
        self.parent
    }

    pub fn omitted_index(&self) -> usize {
        self.omitted
    }

    /// Copies the view into a fresh dataset (needs `n - 1 >= 2`).
    pub fn materialize(&self) -> Result<Dataset> {
        let (k, m) = self.dims();
        let coords = self
            .iter()
            .flat_map(|o| o.x.iter().chain(o.y.iter()).copied().collect::<Vec<_>>())
            .collect();
        Dataset::from_coords(k, m, coords)
    }
}

impl Sample for DeletedView<'_> {
    fn len(&self) -> usize {
        self.parent.n() - 1
    }

    fn dims(&self) -> (usize, usize) {
        self.parent.dims()
    }

    #[inline]
    fn get(&self, i: usize) -> ObsRef<'_> {
        let j = if i >= self.omitted { i + 1 } else { i };
        self.parent.get(j)
    }
}

/// Flat coordinates without the `n >= 2` invariant; used for perturbation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CoordSample<'a> {
    pub k: usize,
    pub m: usize,
    pub coords: &'a [f64],
}

impl Sample for CoordSample<'_> {
    fn len(&self) -> usize {
        self.coords.len() / (self.k + self.m)
    }

    fn dims(&self) -> (usize, usize) {
        (self.k, self.m)
    }

    fn get(&self, i: usize) -> ObsRef<'_> {
        let stride = self.k + self.m;
        let row = &self.coords[i * stride..(i + 1) * stride];
        ObsRef {
            x: &row[..self.k],
            y: &row[self.k..],
        }
    }
}

/// User-provided sampler for the `custom` generator.
pub type SamplerFn = dyn Fn(&mut Rng) -> Observation + Send + Sync;

#[derive(Clone)]
pub struct CustomLaw {
    pub sampler: Arc<SamplerFn>,
    pub k: usize,
    pub m: usize,
    /// Population variance of each feature coordinate, used to standardize `K_ε`.
    pub var_x: f64,
    pub var_y: f64,
    pub x_abs_mean: Option<f64>,
}

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomLaw")
            .field("k", &self.k)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum GeneratorKind {
    /// `X ~ Uniform(0, 1)`, `Y = sin(frequency · X)`.
    UniformSine { frequency: f64 },
    /// `X ~ N(0, 1)`, `Y | X ~ N(intercept + slope · X, noise_sd²)`.
    GaussianLinear {
        intercept: f64,
        slope: f64,
        noise_sd: f64,
    },
    /// `X ~ N(0, 1)`, `Y | X ~ N(sin(frequency · X), noise_sd²)`.
    GaussianSine { frequency: f64, noise_sd: f64 },
    Custom(CustomLaw),
}

/// A data law with its declared log-Sobolev constant and second moment.
#[derive(Debug, Clone)]
pub struct DataGenerator {
    kind: GeneratorKind,
    sigma2_mu: f64,
    second_moment: f64,
}

impl DataGenerator {
    /// `σ²(μ)` defaults to 1; the constant for this law is not known in closed form.
    pub fn uniform_sine(frequency: f64) -> Result<Self> {
        if !frequency.is_finite() {
            return Err(Error::Config("frequency must be finite".into()));
        }
        let sin2 = if frequency == 0.0 {
            0.0
        } else {
            0.5 - (2.0 * frequency).sin() / (4.0 * frequency)
        };
        Ok(DataGenerator {
            kind: GeneratorKind::UniformSine { frequency },
            sigma2_mu: 1.0,
            second_moment: 1.0 / 3.0 + sin2,
        })
    }

    /// `σ²(μ)` defaults to the top eigenvalue of the joint covariance, the
    /// exact log-Sobolev constant of a Gaussian law.
    pub fn gaussian_linear(intercept: f64, slope: f64, noise_sd: f64) -> Result<Self> {
        check_noise(noise_sd)?;
        if !intercept.is_finite() || !slope.is_finite() {
            return Err(Error::Config("intercept and slope must be finite".into()));
        }
        Ok(DataGenerator {
            kind: GeneratorKind::GaussianLinear {
                intercept,
                slope,
                noise_sd,
            },
            sigma2_mu: top_eigen_2x2(1.0, slope, slope * slope + noise_sd * noise_sd),
            second_moment: 1.0 + intercept * intercept + slope * slope + noise_sd * noise_sd,
        })
    }

    /// `σ²(μ)` defaults to the squared Lipschitz constant of the map
    /// `(g, e) ↦ (g, sin(f g) + s e)` from a standard Gaussian pair.
    pub fn gaussian_sine(frequency: f64, noise_sd: f64) -> Result<Self> {
        check_noise(noise_sd)?;
        if !frequency.is_finite() {
            return Err(Error::Config("frequency must be finite".into()));
        }
        let f2 = frequency * frequency;
        let s2 = noise_sd * noise_sd;
        let lipschitz2 = top_eigen_2x2(1.0 + f2, frequency * noise_sd, s2);
        Ok(DataGenerator {
            kind: GeneratorKind::GaussianSine {
                frequency,
                noise_sd,
            },
            sigma2_mu: lipschitz2,
            second_moment: 1.0 + 0.5 * (1.0 - (-2.0 * f2).exp()) + s2,
        })
    }

    pub fn custom(law: CustomLaw, sigma2_mu: f64, second_moment: f64) -> Result<Self> {
        if law.k + law.m == 0 {
            return Err(Error::Config("custom law must produce coordinates".into()));
        }
        if !(second_moment >= 0.0 && second_moment.is_finite()) {
            return Err(Error::Config("second moment must be finite and nonnegative".into()));
        }
        DataGenerator {
            kind: GeneratorKind::Custom(law),
            sigma2_mu: 1.0,
            second_moment,
        }
        .with_sigma2(sigma2_mu)
    }

    /// Overrides the declared log-Sobolev constant.
    pub fn with_sigma2(mut self, sigma2_mu: f64) -> Result<Self> {
        if !(sigma2_mu > 0.0 && sigma2_mu.is_finite()) {
            return Err(Error::Config(format!("sigma2_mu must be positive, got {sigma2_mu}")));
        }
        self.sigma2_mu = sigma2_mu;
        Ok(self)
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            GeneratorKind::UniformSine { .. } => "uniform_sine",
            GeneratorKind::GaussianLinear { .. } => "gaussian_linear",
            GeneratorKind::GaussianSine { .. } => "gaussian_sine",
            GeneratorKind::Custom(_) => "custom",
        }
    }

    pub fn sigma2_mu(&self) -> f64 {
        self.sigma2_mu
    }

    /// `E‖Z‖²` of one observation.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.kind {
            GeneratorKind::Custom(law) => (law.k, law.m),
            _ => (1, 1),
        }
    }

    /// Population variances `(Var X, Var Y)` per coordinate.
    pub fn variances(&self) -> (f64, f64) {
        match &self.kind {
            GeneratorKind::UniformSine { frequency } => {
                let f = *frequency;
                if f == 0.0 {
                    return (1.0 / 12.0, 0.0);
                }
                let mean = (1.0 - f.cos()) / f;
                let second = 0.5 - (2.0 * f).sin() / (4.0 * f);
                (1.0 / 12.0, second - mean * mean)
            }
            GeneratorKind::GaussianLinear {
                slope, noise_sd, ..
            } => (1.0, slope * slope + noise_sd * noise_sd),
            GeneratorKind::GaussianSine {
                frequency,
                noise_sd,
            } => {
                // sin(fX) has mean 0 for symmetric X.
                let f2 = frequency * frequency;
                (1.0, 0.5 * (1.0 - (-2.0 * f2).exp()) + noise_sd * noise_sd)
            }
            GeneratorKind::Custom(law) => (law.var_x, law.var_y),
        }
    }

    /// `E|X|` for scalar features, when known.
    pub fn x_abs_mean(&self) -> Option<f64> {
        match &self.kind {
            GeneratorKind::UniformSine { .. } => Some(0.5),
            GeneratorKind::GaussianLinear { .. } | GeneratorKind::GaussianSine { .. } => {
                Some((2.0 / std::f64::consts::PI).sqrt())
            }
            GeneratorKind::Custom(law) => law.x_abs_mean,
        }
    }

    pub fn sample_observation(&self, rng: &mut Rng) -> Observation {
        match &self.kind {
            GeneratorKind::Custom(law) => (law.sampler)(rng),
            _ => {
                let (x, y) = self.sample_scalar(rng);
                Observation::scalar(x, y)
            }
        }
    }

    /// Appends one observation's coordinates to `out`.
    pub(crate) fn push_observation(&self, rng: &mut Rng, out: &mut Vec<f64>) {
        match &self.kind {
            GeneratorKind::Custom(law) => {
                let obs = (law.sampler)(rng);
                out.extend_from_slice(&obs.x);
                out.extend_from_slice(&obs.y);
            }
            _ => {
                let (x, y) = self.sample_scalar(rng);
                out.push(x);
                out.push(y);
            }
        }
    }

    #[inline]
    fn sample_scalar(&self, rng: &mut Rng) -> (f64, f64) {
        match self.kind {
            GeneratorKind::UniformSine { frequency } => {
                let x: f64 = rng.random();
                (x, (frequency * x).sin())
            }
            GeneratorKind::GaussianLinear {
                intercept,
                slope,
                noise_sd,
            } => {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                (x, intercept + slope * x + noise_sd * e)
            }
            GeneratorKind::GaussianSine {
                frequency,
                noise_sd,
            } => {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                (x, (frequency * x).sin() + noise_sd * e)
            }
            GeneratorKind::Custom(_) => unreachable!("custom laws sample whole observations"),
        }
    }

    /// Draws `n` i.i.d. observations from `rng`.
    pub fn sample_with(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n < 2 {
            return Err(Error::TooFewObservations {
                required: 2,
                found: n,
            });
        }
        let (k, m) = self.dims();
        let mut coords = Vec::with_capacity(n * (k + m));
        for _ in 0..n {
            self.push_observation(rng, &mut coords);
        }
        Dataset::from_coords(k, m, coords)
    }
}

fn check_noise(noise_sd: f64) -> Result<()> {
    if noise_sd > 0.0 && noise_sd.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("noise_sd must be positive, got {noise_sd}")))
    }
}

/// Largest eigenvalue of the symmetric matrix `[[a, b], [b, c]]`.
fn top_eigen_2x2(a: f64, b: f64, c: f64) -> f64 {
    let half_trace = 0.5 * (a + c);
    let half_gap = 0.5 * (a - c);
    half_trace + (half_gap * half_gap + b * b).sqrt()
}

/// `n` i.i.d. draws from `gen`, bit-identical for identical `(gen, n, seed)`.
pub fn sample_dataset(gen: &DataGenerator, n: usize, seed: u64) -> Result<Dataset> {
    gen.sample_with(n, &mut rng::from_seed(seed))
}
