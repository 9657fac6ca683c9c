//! Monte Carlo experiments: configuration, execution, summaries and output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bounds::{
    bound_data_dependent, bound_main, bound_simplified, bound_z_samples, estimate_restriction_set_with, BoundSpec,
    Growth, KEpsilon, RestrictionSet, RestrictionSettings, TailBound,
};
use crate::data::{DataGenerator, GeneratorKind, Observation};
use crate::error::{Error, Result};
use crate::estimator::{gaussian_kernel, Axis, Estimator, Loss};
use crate::loo::{loo_fast, risk_oracle_with};
use crate::rng::{self, Purpose};
use crate::stability::{fit_profile, ProfileRow, ProfileSettings, StabilityProfile};

/// Environment variable overriding the default worker count.
pub const THREADS_ENV: &str = "LOO_CERTIFY_THREADS";

pub const DEFAULT_N_GRID: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];

/// How the stability profile used by the bounds is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    /// Envelope fits and `δ3` estimates at every `n` of the grid.
    Fitted,
    /// Closed-form rates (empirical mean on `x`, kde).
    Analytic,
    None,
}

impl ProfileKind {
    fn name(self) -> &'static str {
        match self {
            ProfileKind::Fitted => "fitted",
            ProfileKind::Analytic => "analytic",
            ProfileKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictionConfig {
    pub eps_k: f64,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub generator: DataGenerator,
    pub estimator: Estimator,
    pub loss: Loss,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub oracle_m: usize,
    pub eps_tail: f64,
    pub eps_bound_grid: Vec<f64>,
    pub base_seed: u64,
    /// Doubles every bound.
    pub two_sided: bool,
    pub restriction: Option<RestrictionConfig>,
    pub growth: Option<Growth>,
    pub profile: ProfileKind,
    pub profile_settings: ProfileSettings,
    pub bound_z_samples: usize,
}

impl ExperimentConfig {
    /// Defaults for everything except the model.
    pub fn new(name: &str, generator: DataGenerator, estimator: Estimator, loss: Loss) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            generator,
            estimator,
            loss,
            n_grid: DEFAULT_N_GRID.to_vec(),
            reps: 200,
            oracle_m: 100_000,
            eps_tail: 0.02,
            eps_bound_grid: Vec::new(),
            base_seed: 0,
            two_sided: false,
            restriction: None,
            growth: None,
            profile: ProfileKind::None,
            profile_settings: ProfileSettings::default(),
            bound_z_samples: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("name `{}` must be nonempty and use [A-Za-z0-9._-]", self.name));
        }
        self.estimator.validate()?;
        let (k, m) = self.generator.dims();
        self.estimator.check_dims(k, m)?;
        if self.loss == Loss::IdentityAbs && self.estimator.is_supervised() {
            return bad("identity_abs needs an unsupervised estimator".into());
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_grid must be nonempty and strictly increasing".into());
        }
        if self.n_grid[0] < 2 {
            return bad("n_grid entries must be at least 2".into());
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.oracle_m < 2 {
            return bad("oracle_m must be at least 2".into());
        }
        if !(self.eps_tail > 0.0) {
            return bad(format!("eps_tail must be positive, got {}", self.eps_tail));
        }
        if self.eps_bound_grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("eps_bound_grid entries must be positive".into());
        }
        if self.profile != ProfileKind::None || self.restriction.is_some() {
            let Some(growth) = self.growth else {
                return bad("bounds need `growth` and its constants".into());
            };
            BoundSpec::for_generator(&self.generator, growth, self.n_grid[0])?;
            if self.bound_z_samples == 0 {
                return bad("bound_z_samples must be positive".into());
            }
        }
        if self.profile == ProfileKind::Analytic {
            analytic_profile(&self.estimator, self.loss, &self.generator)?;
        }
        if let Some(r) = self.restriction {
            if !(r.eps_k > 0.0) {
                return bad(format!("restriction_eps_k must be positive, got {}", r.eps_k));
            }
            if r.reps < 500 {
                return bad(format!("restriction_reps must be at least 500, got {}", r.reps));
            }
        }
        let s = self.profile_settings;
        if self.profile == ProfileKind::Fitted && (s.probes < 100 || s.reps < 100 || s.oracle_m == 0) {
            return bad("fitted profiles need profile_probes >= 100, profile_reps >= 100, profile_oracle_m >= 1".into());
        }
        Ok(())
    }
}

fn analytic_profile(est: &Estimator, loss: Loss, gen: &DataGenerator) -> Result<StabilityProfile> {
    match (*est, loss) {
        (Estimator::EmpiricalMean { axis: Axis::X }, Loss::Absolute) => match gen.x_abs_mean() {
            Some(m) => Ok(StabilityProfile::empirical_mean(m)),
            None => Err(Error::Config("analytic mean profile needs a generator with known E|X|".into())),
        },
        (Estimator::Kde { bandwidth, .. }, Loss::IdentityAbs) => Ok(StabilityProfile::kde(bandwidth)),
        _ => Err(Error::Config(format!(
            "no analytic profile for {} with {} loss; use profile = fitted",
            est.kind_name(),
            loss.name()
        ))),
    }
}

const KEYS: [&str; 32] = [
    "name",
    "generator",
    "frequency",
    "slope",
    "intercept",
    "noise_sd",
    "sigma2_mu",
    "estimator",
    "axis",
    "bandwidth",
    "stabilizer",
    "truncation",
    "loss",
    "n_grid",
    "reps",
    "oracle_m",
    "eps_tail",
    "eps_bound_grid",
    "base_seed",
    "two_sided",
    "growth",
    "lipschitz_const",
    "c_l",
    "c_q",
    "profile",
    "profile_probes",
    "profile_reps",
    "profile_oracle_m",
    "restriction_eps_k",
    "restriction_reps",
    "bound_z_samples",
    "delta3_z",
];

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|v| v.1)
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn parse_required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{}`", s.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on the first key not consumed, in file order.
    fn finish(self, context: &str) -> Result<()> {
        match self.map.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((key, _)) => Err(Error::Config(format!("key `{key}` does not apply to {context}"))),
        }
    }
}

impl ExperimentConfig {
    /// Parses the flat `key = value` format. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", idx + 1)));
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown key `{key}` on line {}", idx + 1)));
            }
            if map.insert(key.to_string(), (idx, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}` on line {}", idx + 1)));
            }
        }
        let mut f = Fields { map };

        let name = f.require("name")?;
        let generator = match f.require("generator")?.as_str() {
            "uniform_sine" => DataGenerator::uniform_sine(f.parse("frequency")?.unwrap_or(10.0))?,
            "gaussian_linear" => DataGenerator::gaussian_linear(
                f.parse("intercept")?.unwrap_or(0.0),
                f.parse("slope")?.unwrap_or(5.0),
                f.parse("noise_sd")?.unwrap_or(1.0),
            )?,
            "gaussian_sine" => {
                DataGenerator::gaussian_sine(f.parse("frequency")?.unwrap_or(10.0), f.parse("noise_sd")?.unwrap_or(1.0))?
            }
            other => return Err(Error::Config(format!("key `generator`: unknown generator `{other}`"))),
        };
        let generator = match f.parse("sigma2_mu")? {
            Some(s) => generator.with_sigma2(s)?,
            None => generator,
        };
        let axis = |f: &mut Fields, default: Axis| -> Result<Axis> {
            match f.take("axis").as_deref() {
                None => Ok(default),
                Some("x") => Ok(Axis::X),
                Some("y") => Ok(Axis::Y),
                Some(other) => Err(Error::Config(format!("key `axis`: expected x or y, got `{other}`"))),
            }
        };
        let estimator = match f.require("estimator")?.as_str() {
            "empirical_mean" => Estimator::EmpiricalMean {
                axis: axis(&mut f, Axis::X)?,
            },
            "kde" => Estimator::Kde {
                bandwidth: f.parse_required("bandwidth")?,
                axis: axis(&mut f, Axis::X)?,
            },
            "ols_simple" => Estimator::OlsSimple,
            "ols_stabilized" => Estimator::OlsStabilized {
                stabilizer: f.parse_required("stabilizer")?,
                truncation: f.parse_required("truncation")?,
            },
            "nw_kernel_stabilized" => Estimator::NwStabilized {
                bandwidth: f.parse_required("bandwidth")?,
                stabilizer: f.parse_required("stabilizer")?,
            },
            other => return Err(Error::Config(format!("key `estimator`: unknown estimator `{other}`"))),
        };
        let loss = match f.require("loss")?.as_str() {
            "absolute" => Loss::Absolute,
            "squared" => Loss::Squared,
            "identity_abs" => Loss::IdentityAbs,
            other => return Err(Error::Config(format!("key `loss`: unknown loss `{other}`"))),
        };
        let mut cfg = ExperimentConfig::new(&name, generator, estimator, loss);
        if let Some(v) = f.list("n_grid")? {
            cfg.n_grid = v;
        }
        if let Some(v) = f.parse("reps")? {
            cfg.reps = v;
        }
        if let Some(v) = f.parse("oracle_m")? {
            cfg.oracle_m = v;
        }
        if let Some(v) = f.parse("eps_tail")? {
            cfg.eps_tail = v;
        }
        if let Some(v) = f.list("eps_bound_grid")? {
            cfg.eps_bound_grid = v;
        }
        if let Some(v) = f.parse("base_seed")? {
            cfg.base_seed = v;
        }
        if let Some(v) = f.parse("two_sided")? {
            cfg.two_sided = v;
        }
        cfg.growth = match f.take("growth").as_deref() {
            None => None,
            Some("linear") => Some(Growth::Linear {
                lipschitz_const: f.parse_required("lipschitz_const")?,
            }),
            Some("quadratic") => Some(Growth::Quadratic {
                c_l: f.parse_required("c_l")?,
                c_q: f.parse_required("c_q")?,
            }),
            Some(other) => return Err(Error::Config(format!("key `growth`: expected linear or quadratic, got `{other}`"))),
        };
        cfg.profile = match f.take("profile").as_deref() {
            None | Some("none") => ProfileKind::None,
            Some("fitted") => ProfileKind::Fitted,
            Some("analytic") => ProfileKind::Analytic,
            Some(other) => {
                return Err(Error::Config(format!(
                    "key `profile`: expected fitted, analytic or none, got `{other}`"
                )))
            }
        };
        if let Some(v) = f.parse("profile_probes")? {
            cfg.profile_settings.probes = v;
        }
        if let Some(v) = f.parse("profile_reps")? {
            cfg.profile_settings.reps = v;
        }
        if let Some(v) = f.parse("profile_oracle_m")? {
            cfg.profile_settings.oracle_m = v;
        }
        if let Some(v) = f.parse("delta3_z")? {
            cfg.profile_settings.delta3_z = v;
        }
        if let Some(eps_k) = f.parse("restriction_eps_k")? {
            cfg.restriction = Some(RestrictionConfig {
                eps_k,
                reps: f.parse("restriction_reps")?.unwrap_or(500),
            });
        }
        if let Some(v) = f.parse("bound_z_samples")? {
            cfg.bound_z_samples = v;
        }
        f.finish(&format!("generator {} with estimator {}", cfg.generator.name(), cfg.estimator.kind_name()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Inverse of [`ExperimentConfig::from_text`] for the built-in generators.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("generator", self.generator.name().to_string());
        match self.generator.kind() {
            GeneratorKind::UniformSine { frequency } => kv("frequency", format!("{frequency:?}")),
            GeneratorKind::GaussianLinear {
                intercept,
                slope,
                noise_sd,
            } => {
                kv("intercept", format!("{intercept:?}"));
                kv("slope", format!("{slope:?}"));
                kv("noise_sd", format!("{noise_sd:?}"));
            }
            GeneratorKind::GaussianSine {
                frequency,
                noise_sd,
            } => {
                kv("frequency", format!("{frequency:?}"));
                kv("noise_sd", format!("{noise_sd:?}"));
            }
            GeneratorKind::Custom(_) => {}
        }
        kv("sigma2_mu", format!("{:?}", self.generator.sigma2_mu()));
        kv("estimator", self.estimator.kind_name().to_string());
        match self.estimator {
            Estimator::EmpiricalMean { axis } => kv("axis", axis.name().into()),
            Estimator::Kde { bandwidth, axis } => {
                kv("bandwidth", format!("{bandwidth:?}"));
                kv("axis", axis.name().into());
            }
            Estimator::OlsSimple => {}
            Estimator::OlsStabilized {
                stabilizer,
                truncation,
            } => {
                kv("stabilizer", format!("{stabilizer:?}"));
                kv("truncation", format!("{truncation:?}"));
            }
            Estimator::NwStabilized {
                bandwidth,
                stabilizer,
            } => {
                kv("bandwidth", format!("{bandwidth:?}"));
                kv("stabilizer", format!("{stabilizer:?}"));
            }
        }
        kv("loss", self.loss.name().into());
        let join = |v: Vec<String>| v.join(", ");
        kv("n_grid", join(self.n_grid.iter().map(|n| n.to_string()).collect()));
        kv("reps", self.reps.to_string());
        kv("oracle_m", self.oracle_m.to_string());
        kv("eps_tail", format!("{:?}", self.eps_tail));
        kv("eps_bound_grid", join(self.eps_bound_grid.iter().map(|e| format!("{e:?}")).collect()));
        kv("base_seed", self.base_seed.to_string());
        kv("two_sided", self.two_sided.to_string());
        match self.growth {
            Some(Growth::Linear { lipschitz_const }) => {
                kv("growth", "linear".into());
                kv("lipschitz_const", format!("{lipschitz_const:?}"));
            }
            Some(Growth::Quadratic { c_l, c_q }) => {
                kv("growth", "quadratic".into());
                kv("c_l", format!("{c_l:?}"));
                kv("c_q", format!("{c_q:?}"));
            }
            None => {}
        }
        kv("profile", self.profile.name().into());
        if self.profile == ProfileKind::Fitted {
            kv("profile_probes", self.profile_settings.probes.to_string());
            kv("profile_reps", self.profile_settings.reps.to_string());
            kv("profile_oracle_m", self.profile_settings.oracle_m.to_string());
            kv("delta3_z", format!("{:?}", self.profile_settings.delta3_z));
        }
        if let Some(r) = self.restriction {
            kv("restriction_eps_k", format!("{:?}", r.eps_k));
            kv("restriction_reps", r.reps.to_string());
        }
        kv("bound_z_samples", self.bound_z_samples.to_string());
        s
    }
}

pub const PRESET_NAMES: [&str; 3] = ["kde-sine", "ols-gaussian", "nw-stabilized"];

/// Built-in configurations for the three reference experiments.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = match name {
        "kde-sine" => {
            let h = 0.1;
            let mut c = ExperimentConfig::new(
                name,
                DataGenerator::uniform_sine(10.0)?,
                Estimator::Kde {
                    bandwidth: h,
                    axis: Axis::Y,
                },
                Loss::IdentityAbs,
            );
            c.growth = Some(Growth::Linear {
                lipschitz_const: gaussian_kernel(1.0) / (h * h),
            });
            c.profile = ProfileKind::Analytic;
            c.eps_bound_grid = vec![0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];
            c
        }
        "ols-gaussian" => {
            let mut c = ExperimentConfig::new(
                name,
                DataGenerator::gaussian_linear(0.0, 5.0, 1.0)?,
                Estimator::OlsSimple,
                Loss::Absolute,
            );
            c.growth = Some(Growth::Linear { lipschitz_const: 5.2 });
            c.profile = ProfileKind::Fitted;
            c.restriction = Some(RestrictionConfig { eps_k: 0.5, reps: 500 });
            c.eps_bound_grid = vec![0.02, 0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6];
            c
        }
        "nw-stabilized" => {
            let mut c = ExperimentConfig::new(
                name,
                DataGenerator::gaussian_sine(10.0, 1.0)?,
                Estimator::NwStabilized {
                    bandwidth: 0.01,
                    stabilizer: 0.01,
                },
                Loss::Absolute,
            );
            c.growth = Some(Growth::Linear {
                lipschitz_const: 101f64.sqrt(),
            });
            c.profile = ProfileKind::Fitted;
            c.eps_bound_grid = vec![0.02, 0.1, 1.0, 10.0, 100.0, 1e3];
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.two_sided = true;
    cfg.validate()?;
    Ok(cfg)
}

/// One `(n, rep)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub n: usize,
    pub rep: usize,
    pub loo_estimate: f64,
    pub risk: f64,
    /// `risk - loo_estimate`
    pub error: f64,
    pub oracle_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean_error: f64,
    pub std_dev: f64,
    pub tail_freq: f64,
    pub tail_se: f64,
    pub bound_main: Option<TailBound>,
    pub bound_simplified: Option<TailBound>,
    pub bound_data_dependent: Option<TailBound>,
}

/// Bounds at one `(n, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundValues {
    pub main: Option<TailBound>,
    pub simplified: Option<TailBound>,
    pub data_dependent: Option<TailBound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub eps: f64,
    pub bounds: BoundValues,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub records: Vec<Record>,
    pub summaries: Vec<Summary>,
    pub sweep: Vec<SweepRow>,
    pub profile_rows: Vec<ProfileRow>,
    pub restrictions: Vec<RestrictionSet>,
}

/// `(mean, std_dev, tail_freq, tail_se)` of errors; `|error| > eps` is a tail event.
pub fn error_statistics(errors: &[f64], eps: f64) -> (f64, f64, f64, f64) {
    let k = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / k;
    let sd = if errors.len() > 1 {
        (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let tail = errors.iter().filter(|e| e.abs() > eps).count() as f64 / k;
    (mean, sd, tail, (tail * (1.0 - tail) / k).sqrt())
}

/// Everything needed to evaluate bounds for one configuration.
pub struct BoundContext {
    profile: Option<StabilityProfile>,
    pub profile_rows: Vec<ProfileRow>,
    pub restrictions: BTreeMap<usize, RestrictionSet>,
    z_samples: Vec<Observation>,
}

impl BoundContext {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let z_samples = bound_z_samples(&cfg.generator, cfg.bound_z_samples.max(1), cfg.base_seed);
        let (profile, profile_rows) = match cfg.profile {
            ProfileKind::None => (None, Vec::new()),
            ProfileKind::Analytic => (Some(analytic_profile(&cfg.estimator, cfg.loss, &cfg.generator)?), Vec::new()),
            ProfileKind::Fitted => {
                log::info!("{}: fitting stability profile", cfg.name);
                let seed = rng::derive_seed(cfg.base_seed, &[Purpose::Probe as u64]);
                let (p, rows) =
                    fit_profile(&cfg.estimator, cfg.loss, &cfg.generator, &cfg.n_grid, cfg.profile_settings, seed)?;
                (Some(p), rows)
            }
        };
        let mut restrictions = BTreeMap::new();
        if let Some(r) = cfg.restriction {
            for &n in &cfg.n_grid {
                log::info!("{}: restriction set at n = {n}", cfg.name);
                let settings = RestrictionSettings {
                    reps: r.reps,
                    probes: cfg.profile_settings.probes.max(100),
                    ..RestrictionSettings::default()
                };
                let set = KEpsilon::for_generator(&cfg.generator, r.eps_k);
                let rs = estimate_restriction_set_with(
                    &cfg.estimator,
                    cfg.loss,
                    &cfg.generator,
                    n,
                    set,
                    settings,
                    rng::derive_seed(cfg.base_seed, &[Purpose::Restriction as u64]),
                )?;
                restrictions.insert(n, rs);
            }
        }
        Ok(BoundContext {
            profile,
            profile_rows,
            restrictions,
            z_samples,
        })
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, n: usize, eps: f64) -> Result<BoundValues> {
        let side = |b: TailBound| if cfg.two_sided { b.doubled() } else { b };
        let Some(growth) = cfg.growth else {
            return Ok(BoundValues {
                main: None,
                simplified: None,
                data_dependent: None,
            });
        };
        let spec = BoundSpec::for_generator(&cfg.generator, growth, n)?;
        let (main, simplified) = match &self.profile {
            None => (None, None),
            Some(p) => {
                let main = bound_main(&spec, eps, p, &self.z_samples)?;
                let lipschitz = matches!(growth, Growth::Linear { .. })
                    && self.z_samples.iter().all(|z| (p.delta2)(n, z.as_ref()) == 0.0);
                let simplified = if lipschitz {
                    let d1 = |z: crate::data::ObsRef<'_>| (p.delta1)(n, z);
                    Some(side(bound_simplified(&spec, eps, &d1, (p.delta3)(n), &self.z_samples)?))
                } else {
                    None
                };
                (Some(side(main)), simplified)
            }
        };
        let data_dependent = match self.restrictions.get(&n) {
            Some(rs) => Some(side(bound_data_dependent(&spec, eps, rs, &self.z_samples, rs.slice_prob)?)),
            None => None,
        };
        Ok(BoundValues {
            main,
            simplified,
            data_dependent,
        })
    }
}

fn run_cell(cfg: &ExperimentConfig, n: usize, rep: usize) -> Result<Record> {
    let mut data_rng = rng::substream(cfg.base_seed, n, rep, Purpose::Data);
    let d = cfg.generator.sample_with(n, &mut data_rng)?;
    let loo = loo_fast(&cfg.estimator, cfg.loss, &d)?;
    let mut oracle_rng = rng::substream(cfg.base_seed, n, rep, Purpose::Oracle);
    let oracle = risk_oracle_with(&cfg.estimator, cfg.loss, &d, &cfg.generator, cfg.oracle_m, &mut oracle_rng)?;
    Ok(Record {
        n,
        rep,
        loo_estimate: loo.loo_estimate,
        risk: oracle.risk,
        error: oracle.risk - loo.loo_estimate,
        oracle_se: oracle.std_error,
    })
}

/// Runs on the current rayon pool. Output does not depend on its size.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |rep| (n, rep)))
        .collect();
    log::info!("{}: {} cells", cfg.name, cells.len());
    let mut records: Vec<Record> = cells
        .par_iter()
        .map(|&(n, rep)| {
            run_cell(cfg, n, rep).map_err(|e| Error::Repetition {
                n,
                rep,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| (r.n, r.rep));

    let ctx = BoundContext::prepare(cfg)?;
    let mut summaries = Vec::with_capacity(cfg.n_grid.len());
    let mut sweep = Vec::new();
    for &n in &cfg.n_grid {
        let errors: Vec<f64> = records.iter().filter(|r| r.n == n).map(|r| r.error).collect();
        let (mean_error, std_dev, tail_freq, tail_se) = error_statistics(&errors, cfg.eps_tail);
        let at_tail = ctx.evaluate(cfg, n, cfg.eps_tail)?;
        summaries.push(Summary {
            n,
            mean_error,
            std_dev,
            tail_freq,
            tail_se,
            bound_main: at_tail.main,
            bound_simplified: at_tail.simplified,
            bound_data_dependent: at_tail.data_dependent,
        });
        for &eps in &cfg.eps_bound_grid {
            sweep.push(SweepRow {
                n,
                eps,
                bounds: ctx.evaluate(cfg, n, eps)?,
            });
        }
    }
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        records,
        summaries,
        sweep,
        profile_rows: ctx.profile_rows,
        restrictions: ctx.restrictions.into_values().collect(),
    })
}

/// Worker count from `LOO_CERTIFY_THREADS`, else the available parallelism.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

pub fn run_experiment_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult> {
    with_threads(threads, || run_experiment(cfg))?
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_value(b: &Option<TailBound>) -> String {
    b.as_ref().map(|b| num(b.value)).unwrap_or_default()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub const RECORDS_HEADER: [&str; 6] = ["n", "rep", "loo_estimate", "risk", "error", "oracle_se"];
pub const SUMMARY_HEADER: [&str; 8] = [
    "n",
    "std_dev",
    "tail_freq",
    "tail_se",
    "bound_main",
    "bound_simplified",
    "bound_data_dependent",
    "valid_main",
];
pub const BOUNDS_HEADER: [&str; 7] = [
    "n",
    "eps",
    "bound_main",
    "valid_main",
    "bound_simplified",
    "bound_data_dependent",
    "valid_data_dependent",
];

/// Writes `<name>_records.csv`, `<name>_summary.csv` and, when the sweep is
/// nonempty, `<name>_bounds.csv`. Returns the paths written.
pub fn emit_csv(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let records = dir.join(format!("{}_records.csv", result.name));
    write_rows(
        &records,
        &RECORDS_HEADER,
        result.records.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.rep.to_string(),
                num(r.loo_estimate),
                num(r.risk),
                num(r.error),
                num(r.oracle_se),
            ]
        }),
    )?;
    let summary = dir.join(format!("{}_summary.csv", result.name));
    write_rows(
        &summary,
        &SUMMARY_HEADER,
        result.summaries.iter().map(|s| {
            vec![
                s.n.to_string(),
                num(s.std_dev),
                num(s.tail_freq),
                num(s.tail_se),
                opt_value(&s.bound_main),
                opt_value(&s.bound_simplified),
                opt_value(&s.bound_data_dependent),
                s.bound_main.as_ref().map(|b| b.valid.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    let mut written = vec![records, summary];
    if !result.sweep.is_empty() {
        let bounds = dir.join(format!("{}_bounds.csv", result.name));
        write_rows(
            &bounds,
            &BOUNDS_HEADER,
            result.sweep.iter().map(|row| {
                let b = &row.bounds;
                vec![
                    row.n.to_string(),
                    num(row.eps),
                    opt_value(&b.main),
                    b.main.as_ref().map(|x| x.valid.to_string()).unwrap_or_default(),
                    opt_value(&b.simplified),
                    opt_value(&b.data_dependent),
                    b.data_dependent.as_ref().map(|x| x.valid.to_string()).unwrap_or_default(),
                ]
            }),
        )?;
        written.push(bounds);
    }
    Ok(written)
}

/// Least squares line with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<Regression> {
    if points.len() < 2 {
        return Err(Error::Contract(format!("line fit needs at least 2 points, got {}", points.len())));
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("line fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let sse: f64 = points.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r2: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
    })
}

/// OLS on `(log n, log value)`.
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> Result<Regression> {
    if pairs.len() < 3 {
        return Err(Error::Contract(format!("log-log fit needs at least 3 pairs, got {}", pairs.len())));
    }
    if let Some(p) = pairs.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(Error::Contract(format!("log-log fit needs positive values, got ({}, {})", p.0, p.1)));
    }
    fit_line(&pairs.iter().map(|p| (p.0.ln(), p.1.ln())).collect::<Vec<_>>())
}

/// Minimal log-log line chart of one summary column against `n`.
pub fn svg_chart(title: &str, series: &[(f64, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let pts: Vec<(f64, f64)> = series.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title} (log-log vs n)</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    if !pts.is_empty() {
        let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let sx = |x: f64| pad + if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 } * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 } * (h - 2.0 * pad);
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for p in &pts {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>", sx(p.0), sy(p.1));
        }
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">n: {:.0} to {:.0}; value: {:.3e} to {:.3e}</text>",
            h - 12.0,
            x0.exp(),
            x1.exp(),
            y0.exp(),
            y1.exp()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one chart per summary column next to the CSV files.
pub fn emit_svg(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let columns: [(&str, fn(&Summary) -> Option<f64>); 3] = [
        ("std_dev", |s| Some(s.std_dev)),
        ("tail_freq", |s| Some(s.tail_freq)),
        ("bound_main", |s| s.bound_main.as_ref().map(|b| b.value)),
    ];
    let mut out = Vec::new();
    for (col, get) in columns {
        let series: Vec<(f64, f64)> = result.summaries.iter().filter_map(|s| get(s).map(|v| (s.n as f64, v))).collect();
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}_{col}.svg", result.name));
        fs::write(&path, svg_chart(col, &series)).map_err(io_err(&path))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            "small",
            DataGenerator::gaussian_linear(0.0, 5.0, 1.0).unwrap(),
            Estimator::OlsSimple,
            Loss::Absolute,
        );
        c.n_grid = vec![16, 32];
        c.reps = 6;
        c.oracle_m = 200;
        c
    }

    #[test]
    fn loglog_examples() {
        let exact: Vec<(f64, f64)> = [16.0, 64.0, 256.0, 1024.0].iter().map(|&n: &f64| (n, 3.0 / n.sqrt())).collect();
        let f = fit_loglog_slope(&exact).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [16.0, 64.0, 256.0].iter().map(|&n| (n, 2.0)).collect();
        assert!(fit_loglog_slope(&flat).unwrap().slope.abs() < 1e-12);
        let mut bumped: Vec<(f64, f64)> =
            [32.0, 64.0, 128.0, 256.0, 512.0].iter().map(|&n: &f64| (n, 1.0 / n.sqrt())).collect();
        bumped[2].1 *= 1.1;
        assert!((fit_loglog_slope(&bumped).unwrap().slope + 0.5).abs() < 0.05);
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 1.0)]).is_err());
    }

    #[test]
    fn config_round_trip_for_presets() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            let text = cfg.to_text();
            let back = ExperimentConfig::from_text(&text).unwrap();
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn presets_carry_reference_parameters() {
        assert!(matches!(preset("kde-sine").unwrap().estimator, Estimator::Kde { bandwidth, axis: Axis::Y } if bandwidth == 0.1));
        let ols = preset("ols-gaussian").unwrap();
        assert!(matches!(ols.generator.kind(), GeneratorKind::GaussianLinear { slope, .. } if *slope == 5.0));
        let nw = preset("nw-stabilized").unwrap();
        assert!(matches!(nw.estimator, Estimator::NwStabilized { bandwidth, stabilizer } if bandwidth == 0.01 && stabilizer == 0.01));
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            assert_eq!(c.eps_tail, 0.02);
            assert_eq!(c.n_grid, DEFAULT_N_GRID.to_vec());
        }
        assert!(preset("nope").unwrap_err().is_config());
    }

    #[test]
    fn config_errors_name_the_key() {
        let base = "name = t\ngenerator = gaussian_linear\nestimator = ols_simple\nloss = absolute\n";
        let err = ExperimentConfig::from_text(&format!("{base}colour = blue\n")).unwrap_err();
        assert!(err.to_string().contains("`colour`"), "{err}");
        let err = ExperimentConfig::from_text(&format!("{base}reps = 3\nreps = 4\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate key `reps`"));
        let err = ExperimentConfig::from_text(&format!("{base}reps = many\n")).unwrap_err();
        assert!(err.to_string().contains("`reps`"));
        let err = ExperimentConfig::from_text(&format!("{base}bandwidth = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("`bandwidth`"));
        let err = ExperimentConfig::from_text(&format!("{base}n_grid = 64, 32\n")).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentConfig::from_text("name = t\ngenerator = gaussian_linear\nloss = absolute\n").unwrap_err();
        assert!(err.to_string().contains("`estimator`"));
        let ok = ExperimentConfig::from_text(&format!("{base}# comment\n\nreps = 3 # trailing\n")).unwrap();
        assert_eq!(ok.reps, 3);
    }

    #[test]
    fn one_cell_experiment_is_reproducible() {
        let mut c = small();
        c.n_grid = vec![20];
        c.reps = 1;
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.records, b.records);
        let r = a.records[0];
        assert_eq!(r.error, r.risk - r.loo_estimate);
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let c = small();
        let a = run_experiment_threads(&c, 1).unwrap();
        let b = run_experiment_threads(&c, 3).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.summaries, b.summaries);
    }

    #[test]
    fn csv_layout() {
        let c = small();
        let res = run_experiment(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_csv(&res, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let records = fs::read_to_string(&paths[0]).unwrap();
        let mut lines = records.lines();
        assert_eq!(lines.next().unwrap(), RECORDS_HEADER.join(","));
        assert_eq!(records.lines().count(), c.n_grid.len() * c.reps + 1);
        let summary = fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER.join(","));
        // no bounds configured: trailing fields empty
        assert!(summary.lines().nth(1).unwrap().ends_with(",,,,"));
    }

    #[test]
    fn summaries_follow_from_records() {
        let c = small();
        let res = run_experiment(&c).unwrap();
        for s in &res.summaries {
            let errors: Vec<f64> = res.records.iter().filter(|r| r.n == s.n).map(|r| r.error).collect();
            let (_, sd, tail, se) = error_statistics(&errors, c.eps_tail);
            assert_eq!((sd, tail, se), (s.std_dev, s.tail_freq, s.tail_se));
        }
    }

    #[test]
    fn failing_cell_reports_coordinates() {
        let mut c = small();
        c.generator = DataGenerator::uniform_sine(0.0).unwrap();
        c.estimator = Estimator::EmpiricalMean { axis: Axis::Y };
        c.loss = Loss::Absolute;
        c.n_grid = vec![4];
        c.reps = 2;
        // all responses are zero, so every fold sits on the kink; loo still succeeds
        assert!(run_experiment(&c).is_ok());
        let mut d = small();
        d.generator = DataGenerator::uniform_sine(10.0).unwrap();
        d.n_grid = vec![2];
        // with two points every deleted design is a single x-value
        match run_experiment(&d) {
            Err(Error::Repetition { n: 2, rep: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_chart("std_dev", &[(32.0, 0.1), (64.0, 0.07), (128.0, 0.05)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 3);
    }
}
