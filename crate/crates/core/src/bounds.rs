//! Closed-form tail bounds for `L_LOO - L̂_LOO` and the restriction-set
//! machinery behind the data-dependent bound.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{DataGenerator, Dataset, Observation, ObsRef, Sample};
use crate::error::{Error, Result};
use crate::estimator::{fitted_loss, pointwise_loss, Estimator, Loss};
use crate::rng::{self, Purpose};
use crate::stability::{fit_envelope_points, gradient_probes, mean_sd, PointRate, StabilityProfile};

/// `c = 3 · 2¹² · e²` in the restricted sub-Gaussian constant.
pub const C_BNT: f64 = 12288.0 * std::f64::consts::E * std::f64::consts::E;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Growth of `z ↦ E[f_i(z)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Growth {
    Linear { lipschitz_const: f64 },
    /// `|f(z1) - f(z2)| ≤ c_l |z1 - z2| + c_q |z1 - z2|²`
    Quadratic { c_l: f64, c_q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSpec {
    /// Log-Sobolev constant `C1 = σ²(μ)`.
    pub sigma2_mu: f64,
    /// `E|Z_i|²`.
    pub second_moment: f64,
    pub growth: Growth,
    pub n: usize,
}

impl BoundSpec {
    pub fn new(sigma2_mu: f64, second_moment: f64, growth: Growth, n: usize) -> Result<Self> {
        let spec = BoundSpec {
            sigma2_mu,
            second_moment,
            growth,
            n,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn for_generator(gen: &DataGenerator, growth: Growth, n: usize) -> Result<Self> {
        Self::new(gen.sigma2_mu(), gen.second_moment(), growth, n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.sigma2_mu > 0.0 && self.sigma2_mu.is_finite()) {
            return bad(format!("sigma2_mu must be positive, got {}", self.sigma2_mu));
        }
        if !(self.second_moment >= 0.0 && self.second_moment.is_finite()) {
            return bad(format!("second moment must be nonnegative, got {}", self.second_moment));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        match self.growth {
            Growth::Linear { lipschitz_const } if !(lipschitz_const > 0.0) => {
                bad(format!("lipschitz_const must be positive, got {lipschitz_const}"))
            }
            Growth::Quadratic { c_l, c_q } if !(c_l >= 0.0 && c_q > 0.0) => {
                bad(format!("quadratic growth needs c_l >= 0 and c_q > 0, got ({c_l}, {c_q})"))
            }
            _ => Ok(()),
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

/// `exp(-t²/(8C1[a² + b² n (E|Z|² + 16C1)])) ∨ exp(-t/(8C1 b))`
fn gradient_rate(spec: &BoundSpec, t: f64, a: f64, b: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let c1 = spec.sigma2_mu;
    let n = spec.n as f64;
    let var = a * a + b * b * n * (spec.second_moment + 16.0 * c1);
    let gauss = (-t * t / (8.0 * c1 * var)).exp();
    let linear = if b > 0.0 { (-t / (8.0 * c1 * b)).exp() } else { 0.0 };
    gauss.max(linear)
}

/// Fold-wise fluctuation rate at one `z`.
pub fn theta1(spec: &BoundSpec, t: f64, delta1: f64, delta2: f64) -> f64 {
    gradient_rate(spec, t, delta1, delta2)
}

/// Deviation rate of the empirical mean of the expected loss.
pub fn theta2(spec: &BoundSpec, t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let c1 = spec.sigma2_mu;
    let n = spec.n as f64;
    match spec.growth {
        Growth::Linear { lipschitz_const: l } => (-n * t * t / (8.0 * c1 * l * l)).exp(),
        Growth::Quadratic { c_l, c_q } => {
            let var = c_l * c_l + c_q * c_q * (spec.second_moment + 16.0 * c1);
            let gauss = (-n * t * t / (8.0 * c1 * var)).exp();
            let linear = (-n * t / (8.0 * c1 * c_q)).exp();
            gauss.max(linear)
        }
    }
}

/// Deletion-bias rate, evaluated at `E[δ1(n, Z)]` and `E[δ2(n, Z)]`.
pub fn theta3(spec: &BoundSpec, t: f64, e_delta1: f64, e_delta2: f64) -> f64 {
    gradient_rate(spec, t, e_delta1, e_delta2)
}

/// Tail bound for a functional with `‖∇F‖ ≤ δ1 + δ2 ‖D‖`.
pub fn quadconc_bound(spec: &BoundSpec, t: f64, delta1: f64, delta2: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let s2 = spec.sigma2_mu;
    let spread = delta1.powi(2) + delta2.powi(2) * spec.n as f64 * (spec.second_moment + 16.0 * s2);
    if spread == 0.0 {
        return 0.0;
    }
    let sub_gaussian = (-(t * t) / (8.0 * s2 * spread)).exp();
    if delta2 == 0.0 {
        return sub_gaussian;
    }
    sub_gaussian.max((-t / (8.0 * s2 * delta2)).exp())
}

/// `exp(-ε² n / (2λ²)) ∨ exp(-ε n / (2λ))`
pub fn subexp_mean_bound(lambda: f64, n: usize, eps: f64) -> Result<f64> {
    if !(lambda > 0.0 && eps > 0.0) {
        return Err(Error::Contract(format!(
            "sub-exponential bound needs lambda > 0 and eps > 0, got ({lambda}, {eps})"
        )));
    }
    let n = n as f64;
    Ok((-eps * eps * n / (2.0 * lambda * lambda)).exp().max((-eps * n / (2.0 * lambda)).exp()))
}

/// `c · log(e / μ(A)) · σ²_SG(μ)`
pub fn restricted_sg_constant(sigma_sg2: f64, mu_a: f64) -> Result<f64> {
    if !(mu_a > 0.0 && mu_a <= 1.0) {
        return Err(Error::Contract(format!("restriction mass must lie in (0, 1], got {mu_a}")));
    }
    Ok(C_BNT * (1.0 - mu_a.ln()) * sigma_sg2)
}

/// A clipped probability bound with its additive parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TailBound {
    pub value: f64,
    pub components: Vec<(&'static str, f64)>,
    /// Whether `ε` cleared the theorem's threshold.
    pub valid: bool,
}

impl TailBound {
    fn assemble(components: Vec<(&'static str, f64)>, valid: bool) -> Self {
        let sum: f64 = components.iter().map(|c| c.1).sum();
        TailBound {
            value: if valid { sum.min(1.0) } else { 1.0 },
            components,
            valid,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1)
    }

    /// Two-sided version: every component doubled.
    pub fn doubled(&self) -> Self {
        Self::assemble(self.components.iter().map(|&(k, v)| (k, 2.0 * v)).collect(), self.valid)
    }
}

fn check_samples(z_samples: &[Observation]) -> Result<()> {
    if z_samples.is_empty() {
        Err(Error::Contract("bound needs at least one z sample".into()))
    } else {
        Ok(())
    }
}

/// Lipschitz case with `δ2 ≡ 0`: the main bound with the `Z`-expectations
/// replaced by averages over `z_samples`.
pub fn bound_simplified(
    spec: &BoundSpec,
    eps: f64,
    delta1: &dyn Fn(ObsRef<'_>) -> f64,
    delta3: f64,
    z_samples: &[Observation],
) -> Result<TailBound> {
    check_samples(z_samples)?;
    let Growth::Linear { .. } = spec.growth else {
        return Err(Error::Contract("the Lipschitz-case bound needs linear growth".into()));
    };
    let c1 = spec.sigma2_mu;
    let t = eps / 3.0;
    let m = z_samples.len() as f64;
    let d1: Vec<f64> = z_samples.iter().map(|z| delta1(z.as_ref())).collect();
    let fold = |d: f64| if d == 0.0 { 0.0 } else { (-t * t / (8.0 * c1 * d * d)).exp() };
    let first = spec.n as f64 * d1.iter().map(|&d| fold(d)).sum::<f64>() / m;
    let e_d1 = d1.iter().sum::<f64>() / m;
    let shifted = t - delta3;
    let third = if shifted <= 0.0 {
        1.0
    } else if e_d1 == 0.0 {
        0.0
    } else {
        (-shifted * shifted / (8.0 * c1 * e_d1 * e_d1)).exp()
    };
    Ok(TailBound::assemble(
        vec![("n_theta1", first), ("theta2", theta2(spec, t)), ("theta3", third)],
        eps > 3.0 * delta3,
    ))
}

/// `n E[θ1(ε/3, Z)] + θ2(ε/3) + θ3(ε/3 - δ3(n))`.
pub fn bound_main(spec: &BoundSpec, eps: f64, profile: &StabilityProfile, z_samples: &[Observation]) -> Result<TailBound> {
    check_samples(z_samples)?;
    let n = spec.n;
    let t = eps / 3.0;
    let m = z_samples.len() as f64;
    let (mut first, mut e_d1, mut e_d2) = (0.0, 0.0, 0.0);
    for z in z_samples {
        let d1 = (profile.delta1)(n, z.as_ref());
        let d2 = (profile.delta2)(n, z.as_ref());
        first += theta1(spec, t, d1, d2);
        e_d1 += d1;
        e_d2 += d2;
    }
    let delta3 = (profile.delta3)(n);
    Ok(TailBound::assemble(
        vec![
            ("n_theta1", n as f64 * first / m),
            ("theta2", theta2(spec, t)),
            ("theta3", theta3(spec, t - delta3, e_d1 / m, e_d2 / m)),
        ],
        eps > 3.0 * delta3,
    ))
}

/// Wilson score interval lower end for `successes` out of `trials`.
pub fn wilson_lower(successes: usize, trials: usize, z: f64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let center = p + z2 / (2.0 * n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half) / (1.0 + z2 / n)).max(0.0)
}

/// `|(1/n)‖X - x̄‖² - 1| < ε` and `|(1/n)‖Y - ȳ‖² - 1| < ε`.
pub fn k_epsilon_membership(d: &Dataset, eps_k: f64) -> bool {
    KEpsilon::literal(eps_k).contains(d)
}

/// Centered second moments within relative `eps` of reference variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KEpsilon {
    pub eps: f64,
    pub var_x: f64,
    pub var_y: f64,
}

impl KEpsilon {
    /// Reference variances 1.
    pub fn literal(eps: f64) -> Self {
        KEpsilon {
            eps,
            var_x: 1.0,
            var_y: 1.0,
        }
    }

    /// Reference variances taken from the generator, summed over coordinates.
    pub fn for_generator(gen: &DataGenerator, eps: f64) -> Self {
        let (k, m) = gen.dims();
        let (vx, vy) = gen.variances();
        KEpsilon {
            eps,
            var_x: vx * k as f64,
            var_y: vy * m as f64,
        }
    }

    pub fn contains(&self, d: &Dataset) -> bool {
        let (sx, sy) = centered_second_moments(d);
        let close = |s: f64, v: f64| {
            if v > 0.0 {
                (s / v - 1.0).abs() < self.eps
            } else {
                (s - 1.0).abs() < self.eps
            }
        };
        close(sx, self.var_x) && close(sy, self.var_y)
    }
}

/// `((1/n)‖X - x̄‖², (1/n)‖Y - ȳ‖²)` summed over coordinates.
pub fn centered_second_moments(d: &Dataset) -> (f64, f64) {
    let (k, m) = (d.k(), d.m());
    let n = d.n() as f64;
    let mut mean = vec![0.0; k + m];
    for o in d.iter() {
        for (a, v) in mean.iter_mut().zip(o.x.iter().chain(o.y)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut ss = vec![0.0; k + m];
    for o in d.iter() {
        for ((s, v), c) in ss.iter_mut().zip(o.x.iter().chain(o.y)).zip(&mean) {
            *s += (v - c) * (v - c);
        }
    }
    (ss[..k].iter().sum::<f64>() / n, ss[k..].iter().sum::<f64>() / n)
}

/// Monte Carlo summary of a restriction set `K`.
#[derive(Clone)]
pub struct RestrictionSet {
    pub epsilon_k: f64,
    pub set: KEpsilon,
    pub n: usize,
    pub reps: usize,
    pub in_k: usize,
    pub membership_freq: f64,
    /// Wilson 95% lower bound on `μ^{⊗n}(K)`.
    pub mu_k_lower: f64,
    pub c_bnt: f64,
    pub gamma_k: f64,
    pub gamma_se: f64,
    pub delta3k: f64,
    pub delta3k_se: f64,
    /// Gradient bound on `K`; constant in `z` when fitted from probes.
    pub delta1k: PointRate,
    pub delta1k_value: f64,
    /// `P(μ^{⊗(n-1)}(K_1(Z_1)) < 1/2 | D ∈ K)`.
    pub slice_prob: f64,
}

impl fmt::Debug for RestrictionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RestrictionSet")
            .field("epsilon_k", &self.epsilon_k)
            .field("n", &self.n)
            .field("reps", &self.reps)
            .field("in_k", &self.in_k)
            .field("mu_k_lower", &self.mu_k_lower)
            .field("gamma_k", &self.gamma_k)
            .field("delta3k", &self.delta3k)
            .field("delta1k", &self.delta1k_value)
            .field("slice_prob", &self.slice_prob)
            .finish()
    }
}

impl RestrictionSet {
    pub fn membership(&self, d: &Dataset) -> bool {
        self.set.contains(d)
    }
}

/// Settings for [`estimate_restriction_set_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictionSettings {
    pub reps: usize,
    /// Probes for the in-`K` gradient envelope.
    pub probes: usize,
    /// Fresh `(n-1)`-tuples per slice check.
    pub slice_resamples: usize,
}

impl Default for RestrictionSettings {
    fn default() -> Self {
        RestrictionSettings {
            reps: 500,
            probes: 200,
            slice_resamples: 100,
        }
    }
}

/// [`estimate_restriction_set_with`] on `K_ε` centered at the generator's
/// variances, with default probe counts.
pub fn estimate_restriction_set(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    eps_k: f64,
    reps: usize,
    seed: u64,
) -> Result<RestrictionSet> {
    let settings = RestrictionSettings {
        reps,
        ..RestrictionSettings::default()
    };
    estimate_restriction_set_with(est, loss, gen, n, KEpsilon::for_generator(gen, eps_k), settings, seed)
}

struct RepOutcome {
    in_k: bool,
    fresh: f64,
    paired: Option<f64>,
    held_out: Option<f64>,
    slice_low: Option<bool>,
}

/// Per rep: draw `D`, an independent `D'` and a fresh `Z`; record `f_D(Z)`,
/// `f_D(Z'_1)` when both sets are in `K`, `f_1(Z_1)` when `D ∈ K`, and for
/// `D ∈ K` whether fewer than half of the fresh completions of `Z_1` stay in `K`.
pub fn estimate_restriction_set_with(
    est: &Estimator,
    loss: Loss,
    gen: &DataGenerator,
    n: usize,
    set: KEpsilon,
    settings: RestrictionSettings,
    seed: u64,
) -> Result<RestrictionSet> {
    let reps = settings.reps;
    if reps < 500 {
        return Err(Error::Contract(format!("restriction estimate needs at least 500 reps, got {reps}")));
    }
    if !(set.eps > 0.0) {
        return Err(Error::Config(format!("eps_k must be positive, got {}", set.eps)));
    }
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::substream(seed, n, rep, Purpose::Restriction);
            let d = gen.sample_with(n, &mut r)?;
            let d_other = gen.sample_with(n, &mut r)?;
            let z = gen.sample_observation(&mut r);
            let in_k = set.contains(&d);
            let fitted = est.fit(&d)?;
            let fresh = fitted_loss(est, loss, &fitted, z.as_ref());
            let paired = (in_k && set.contains(&d_other)).then(|| fitted_loss(est, loss, &fitted, d_other.observation(0)));
            let held_out = if in_k {
                Some(pointwise_loss(est, loss, &d.deleted(0), d.observation(0))?)
            } else {
                None
            };
            let slice_low = if in_k {
                let (k, m) = gen.dims();
                let first = d.observation(0).to_owned();
                let mut inside = 0;
                let mut coords = Vec::with_capacity(n * (k + m));
                for _ in 0..settings.slice_resamples {
                    coords.clear();
                    coords.extend_from_slice(&first.x);
                    coords.extend_from_slice(&first.y);
                    for _ in 1..n {
                        gen.push_observation(&mut r, &mut coords);
                    }
                    if set.contains(&Dataset::from_coords(k, m, coords.clone())?) {
                        inside += 1;
                    }
                }
                Some(2 * inside < settings.slice_resamples)
            } else {
                None
            };
            Ok(RepOutcome {
                in_k,
                fresh,
                paired,
                held_out,
                slice_low,
            })
        })
        .collect::<Result<_>>()?;

    let in_k = outcomes.iter().filter(|o| o.in_k).count();
    if in_k == 0 {
        return Err(Error::RestrictionTooSmall { reps });
    }
    let fresh: Vec<f64> = outcomes.iter().map(|o| o.fresh).collect();
    let paired: Vec<f64> = outcomes.iter().filter_map(|o| o.paired).collect();
    let held: Vec<f64> = outcomes.iter().filter_map(|o| o.held_out).collect();
    let slice_low = outcomes.iter().filter(|o| o.slice_low == Some(true)).count();

    let (fresh_mean, fresh_sd) = mean_sd(&fresh);
    let (paired_mean, paired_sd) = if paired.is_empty() { (fresh_mean, 0.0) } else { mean_sd(&paired) };
    let (held_mean, held_sd) = mean_sd(&held);
    let se = |sd: f64, k: usize| if k == 0 { 0.0 } else { sd / (k as f64).sqrt() };
    let gamma_se = se(fresh_sd, fresh.len()).hypot(se(paired_sd, paired.len()));
    let delta3k_se = se(paired_sd, paired.len()).hypot(se(held_sd, held.len()));

    let accept = |d: &Dataset| set.contains(d);
    let probe_seed = rng::derive_seed(seed, &[Purpose::Restriction as u64, n as u64]);
    let probes = gradient_probes(est, loss, gen, n, settings.probes, probe_seed, Some(&accept))?;
    let fit = fit_envelope_points(&probes, n)?;
    let max_r = probes.iter().map(|p| p.data_norm).fold(0.0, f64::max);
    let delta1k_value = fit.bound(max_r);

    let mu_k_lower = wilson_lower(in_k, reps, Z_95);
    if mu_k_lower <= 0.0 {
        return Err(Error::RestrictionTooSmall { reps });
    }
    Ok(RestrictionSet {
        epsilon_k: set.eps,
        set,
        n,
        reps,
        in_k,
        membership_freq: in_k as f64 / reps as f64,
        mu_k_lower,
        c_bnt: C_BNT,
        gamma_k: fresh_mean - paired_mean,
        gamma_se,
        delta3k: (paired_mean - held_mean).abs(),
        delta3k_se,
        delta1k: Arc::new(move |_, _| delta1k_value),
        delta1k_value,
        slice_prob: slice_low as f64 / in_k as f64,
    })
}

/// Conditioned bound on `K`:
/// `n E[θ̂_{1,K}(ε/6, Z)] + θ_{2,K}(ε/6) + θ_{3,K}(ε/6 - δ_{3,K}) + θ_{3,K}(ε/6 - γ(K))
///  + (1 - μ_K) + slice_prob`.
pub fn bound_data_dependent(
    spec: &BoundSpec,
    eps: f64,
    rset: &RestrictionSet,
    z_samples: &[Observation],
    slice_prob: f64,
) -> Result<TailBound> {
    check_samples(z_samples)?;
    let n = spec.n;
    let sigma2 = spec.sigma2_mu;
    let c1 = restricted_sg_constant(sigma2, rset.mu_k_lower)?;
    let c2 = 2.0 * rset.c_bnt * sigma2;
    let t = eps / 6.0;
    let m = z_samples.len() as f64;
    let (mut first, mut e_d1) = (0.0, 0.0);
    for z in z_samples {
        let d = (rset.delta1k)(n, z.as_ref());
        if d > 0.0 {
            first += (-t * t / (16.0 * c2 * d * d)).exp();
        }
        e_d1 += d;
    }
    let e_d1 = e_d1 / m;
    let theta3k = |s: f64| {
        if s <= 0.0 {
            1.0
        } else if e_d1 == 0.0 {
            0.0
        } else {
            (-s * s / (8.0 * c1 * e_d1 * e_d1)).exp()
        }
    };
    let valid = eps > 6.0 * rset.delta3k.min(rset.gamma_k);
    Ok(TailBound::assemble(
        vec![
            ("n_theta1_k", n as f64 * first / m),
            ("theta2_k", (-t * t * n as f64 / (8.0 * c1)).exp()),
            ("theta3_k_delta3", theta3k(t - rset.delta3k)),
            ("theta3_k_gamma", theta3k(t - rset.gamma_k)),
            ("outside_k", 1.0 - rset.mu_k_lower),
            ("slice", slice_prob),
        ],
        valid,
    ))
}

/// Seeded `z` samples shared by every bound evaluation of one experiment.
pub fn bound_z_samples(gen: &DataGenerator, count: usize, seed: u64) -> Vec<Observation> {
    let mut r = rng::substream(seed, 0, 0, Purpose::BoundSamples);
    (0..count).map(|_| gen.sample_observation(&mut r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_dataset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn linear(n: usize) -> BoundSpec {
        BoundSpec::new(1.0, 2.0, Growth::Linear { lipschitz_const: 1.0 }, n).unwrap()
    }

    fn zs() -> Vec<Observation> {
        bound_z_samples(&DataGenerator::gaussian_linear(0.0, 1.0, 1.0).unwrap(), 64, 1)
    }

    #[test]
    fn theta1_examples() {
        let s = linear(10);
        assert_relative_eq!(theta1(&s, 2.0, 1.0, 0.0), (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(theta1(&s, 1e-9, 1.0, 0.3), 1.0, max_relative = 1e-12);
        assert_eq!(theta1(&s, 1.0, 0.0, 0.0), 0.0);
        let (a, b) = (theta1(&s, 3.0, 0.1, 0.2), theta1(&s, 6.0, 0.1, 0.2));
        assert!(b < a);
    }

    #[test]
    fn theta2_examples() {
        let s = linear(8);
        assert_relative_eq!(theta2(&s, 1.0), (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(theta2(&s, 1e-10), 1.0, max_relative = 1e-12);
        let quad = BoundSpec::new(1.0, 2.0, Growth::Quadratic { c_l: 1.0, c_q: 1e-12 }, 8).unwrap();
        assert_relative_eq!(theta2(&quad, 1.0), theta2(&s, 1.0), max_relative = 1e-9);
    }

    #[test]
    fn theta3_examples() {
        let s = linear(50);
        assert_eq!(theta3(&s, 0.7, 0.2, 0.0), theta1(&s, 0.7, 0.2, 0.0));
        let s4 = BoundSpec {
            sigma2_mu: 4.0,
            ..s
        };
        let (a, b) = (theta3(&s, 0.7, 0.2, 0.0), theta3(&s4, 0.7, 0.2, 0.0));
        assert_relative_eq!(b, a.powf(0.25), max_relative = 1e-12);
    }

    #[test]
    fn branch_crossover() {
        let s = BoundSpec::new(1.3, 2.0, Growth::Linear { lipschitz_const: 1.0 }, 40).unwrap();
        let (d1, d2) = (0.3, 0.01);
        let t_star = d1 * d1 / d2 + d2 * 40.0 * (2.0 + 16.0 * 1.3);
        let c1 = 1.3;
        let var = d1 * d1 + d2 * d2 * 40.0 * (2.0 + 16.0 * 1.3);
        let g = -t_star * t_star / (8.0 * c1 * var);
        let l = -t_star / (8.0 * c1 * d2);
        assert_relative_eq!(g, l, max_relative = 1e-12);
        // Gaussian branch wins below the crossover, linear above
        let below = t_star * 0.5;
        assert_eq!(quadconc_bound(&s, below, d1, d2), (-below * below / (8.0 * c1 * var)).exp());
        let above = t_star * 2.0;
        assert_eq!(quadconc_bound(&s, above, d1, d2), (-above / (8.0 * c1 * d2)).exp());
    }

    #[test]
    fn subexp_examples() {
        assert_relative_eq!(subexp_mean_bound(1.0, 4, 1.0).unwrap(), (-2.0f64).exp(), max_relative = 1e-15);
        let v = subexp_mean_bound(1.0, 10, 0.5).unwrap();
        assert_eq!(v, (-0.5f64 * 0.5 * 10.0 / 2.0).exp());
        assert!(subexp_mean_bound(0.0, 10, 0.5).is_err());
    }

    #[test]
    fn restricted_constant() {
        assert_relative_eq!(C_BNT, 12288.0 * std::f64::consts::E.powi(2), max_relative = 1e-15);
        assert_relative_eq!(C_BNT, 90_796.721_343_66, max_relative = 1e-10);
        assert_relative_eq!(restricted_sg_constant(2.0, 1.0).unwrap(), 2.0 * C_BNT, max_relative = 1e-15);
        let gap = restricted_sg_constant(2.0, 0.25).unwrap() - restricted_sg_constant(2.0, 0.5).unwrap();
        assert_relative_eq!(gap, C_BNT * 2f64.ln() * 2.0, max_relative = 1e-12);
        assert!(restricted_sg_constant(1.0, 0.0).is_err());
        assert!(restricted_sg_constant(1.0, 1.5).is_err());
    }

    #[test]
    fn simplified_examples() {
        let s = linear(100);
        let z = zs();
        let b = bound_simplified(&s, 0.6, &|_| 0.1, 0.01, &z).unwrap();
        assert_relative_eq!(b.component("n_theta1").unwrap(), 100.0 * theta1(&s, 0.2, 0.1, 0.0), max_relative = 1e-15);
        let edge = bound_simplified(&s, 0.03, &|_| 0.1, 0.01, &z).unwrap();
        assert!(!edge.valid);
        assert_eq!(edge.value, 1.0);
        assert!(bound_simplified(&s, 0.6, &|_| 0.1, 0.0, &[]).is_err());
        let quad = BoundSpec::new(1.0, 2.0, Growth::Quadratic { c_l: 1.0, c_q: 1.0 }, 10).unwrap();
        assert!(bound_simplified(&quad, 0.6, &|_| 0.1, 0.0, &z).is_err());
    }

    #[test]
    fn simplified_decays_with_n_for_the_mean() {
        // δ1 = 1/√n, δ3 = C/(n-1): every exponent grows linearly in n
        let z = zs();
        let eps = 1.5;
        let eval = |n: usize| {
            let s = linear(n);
            bound_simplified(&s, eps, &|_| 1.0 / (n as f64).sqrt(), 1.0 / (n as f64 - 1.0), &z)
                .unwrap()
                .components
                .iter()
                .map(|c| c.1)
                .sum::<f64>()
        };
        let (n1, n2) = (400usize, 800usize);
        let drop = eval(n1).ln() - eval(n2).ln();
        let t = eps / 3.0;
        let expected = t * t * (n2 - n1) as f64 / 8.0 - 2f64.ln();
        assert!(drop >= 0.9 * expected, "{drop} vs {expected}");
    }

    #[test]
    fn main_reduces_to_simplified() {
        let s = linear(64);
        let z = zs();
        let profile = StabilityProfile::analytic(|n, _| 1.0 / (n as f64).sqrt(), |_, _| 0.0, |_| 0.0);
        for eps in [0.1, 0.5, 1.0, 2.0] {
            let a = bound_main(&s, eps, &profile, &z).unwrap();
            let b = bound_simplified(&s, eps, &|_| 1.0 / 8.0, 0.0, &z).unwrap();
            assert!((a.value - b.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn main_is_decreasing_in_eps() {
        let s = BoundSpec::new(1.0, 2.0, Growth::Quadratic { c_l: 1.0, c_q: 0.5 }, 500).unwrap();
        let z = zs();
        let profile = StabilityProfile::analytic(|n, _| 1.0 / (n as f64).sqrt(), |n, _| 1.0 / n as f64, |n| 1.0 / n as f64);
        let mut last = f64::INFINITY;
        for i in 1..40 {
            let b = bound_main(&s, 0.2 * i as f64, &profile, &z).unwrap();
            assert!(b.value > 0.0 && b.value <= 1.0);
            assert!(b.value <= last);
            last = b.value;
        }
        assert!(last < 1.0);
    }

    #[test]
    fn membership_examples() {
        let unit = Dataset::from_xy(&[-1.0, 1.0], &[-1.0, 1.0]).unwrap();
        assert!(k_epsilon_membership(&unit, 1e-9));
        let flat = Dataset::from_xy(&[2.0, 2.0, 2.0], &[-1.0, 0.0, 1.0]).unwrap();
        assert!(!k_epsilon_membership(&flat, 0.99));
    }

    #[test]
    fn wilson_examples() {
        assert_relative_eq!(wilson_lower(100, 100, Z_95), 100.0 / (100.0 + Z_95 * Z_95), max_relative = 1e-12);
        assert!(wilson_lower(0, 100, Z_95) < 1e-15);
        let lo = wilson_lower(50, 100, Z_95);
        assert!((0.40..0.41).contains(&lo));
    }

    #[test]
    fn data_dependent_trivial_case() {
        let s = linear(100);
        let rset = RestrictionSet {
            epsilon_k: 1.0,
            set: KEpsilon::literal(1.0),
            n: 100,
            reps: 500,
            in_k: 500,
            membership_freq: 1.0,
            mu_k_lower: 1.0,
            c_bnt: C_BNT,
            gamma_k: 0.0,
            gamma_se: 0.0,
            delta3k: 0.0,
            delta3k_se: 0.0,
            delta1k: Arc::new(|_, _| 0.0),
            delta1k_value: 0.0,
            slice_prob: 0.0,
        };
        let b = bound_data_dependent(&s, 1.0, &rset, &zs(), 0.0).unwrap();
        assert_eq!(b.component("outside_k"), Some(0.0));
        let t: f64 = 1.0 / 6.0;
        assert_relative_eq!(b.component("theta2_k").unwrap(), (-t * t * 100.0 / (8.0 * C_BNT)).exp(), max_relative = 1e-15);
    }

    #[test]
    fn restriction_set_on_ols() {
        let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0).unwrap();
        let est = Estimator::OlsSimple;
        let r = estimate_restriction_set(&est, Loss::Absolute, &gen, 128, 0.5, 500, 3).unwrap();
        assert!(r.membership_freq >= 0.99, "{r:?}");
        assert!(r.mu_k_lower > 0.98 && r.mu_k_lower <= 1.0);
        assert!(r.delta1k_value > 0.0);
        let huge = estimate_restriction_set(&est, Loss::Absolute, &gen, 64, 1e9, 500, 3).unwrap();
        assert_eq!(huge.membership_freq, 1.0);
        assert!(huge.gamma_k.abs() <= 3.0 * huge.gamma_se, "{huge:?}");
        assert!(estimate_restriction_set(&est, Loss::Absolute, &gen, 64, 0.5, 100, 3).is_err());
    }

    #[test]
    fn empty_restriction_set_errors() {
        let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0).unwrap();
        let r = estimate_restriction_set_with(
            &Estimator::OlsSimple,
            Loss::Absolute,
            &gen,
            32,
            KEpsilon::literal(1e-6),
            RestrictionSettings::default(),
            1,
        );
        assert!(matches!(r, Err(Error::RestrictionTooSmall { .. })));
    }

    proptest! {
        #[test]
        fn theta1_equals_quadconc(
            t in 1e-6f64..50.0, d1 in 0.0f64..3.0, d2 in 0.0f64..1.0,
            s2 in 0.1f64..5.0, m2 in 0.0f64..10.0, n in 1usize..5000,
        ) {
            let s = BoundSpec::new(s2, m2, Growth::Linear { lipschitz_const: 1.0 }, n).unwrap();
            prop_assert!((theta1(&s, t, d1, d2) - quadconc_bound(&s, t, d1, d2)).abs() <= 1e-15);
        }

        #[test]
        fn rates_are_probabilities_and_monotone(
            t in 1e-6f64..20.0, d1 in 0.0f64..3.0, d2 in 0.0f64..1.0, n in 1usize..2000,
        ) {
            let s = BoundSpec::new(1.0, 2.0, Growth::Quadratic { c_l: 0.5, c_q: 0.2 }, n).unwrap();
            for f in [
                theta1(&s, t, d1, d2), theta2(&s, t), theta3(&s, t, d1, d2),
            ] {
                prop_assert!((0.0..=1.0).contains(&f));
            }
            prop_assert!(theta1(&s, 2.0 * t, d1, d2) <= theta1(&s, t, d1, d2));
            prop_assert!(theta2(&s, 2.0 * t) <= theta2(&s, t));
            prop_assert!(theta2(&s.with_n(n + 1), t) <= theta2(&s, t));
        }

        #[test]
        fn branches_recomputed(t in 1e-3f64..10.0, d1 in 1e-3f64..2.0, d2 in 1e-4f64..1.0, n in 1usize..1000) {
            let s = BoundSpec::new(1.7, 3.0, Growth::Linear { lipschitz_const: 1.0 }, n).unwrap();
            let var = d1 * d1 + d2 * d2 * n as f64 * (3.0 + 16.0 * 1.7);
            let g = (-t * t / (8.0 * 1.7 * var)).exp();
            let l = (-t / (8.0 * 1.7 * d2)).exp();
            prop_assert!((theta1(&s, t, d1, d2) - g.max(l)).abs() <= 1e-15);
            prop_assert!((theta3(&s, t, d1, d2) - g.max(l)).abs() <= 1e-15);
        }

        #[test]
        fn membership_is_permutation_symmetric(seed in 0u64..5000, shift in 1usize..20, eps in 0.05f64..0.6) {
            let gen = DataGenerator::gaussian_linear(0.0, 0.5, 0.8).unwrap();
            let d = sample_dataset(&gen, 20, seed).unwrap();
            let perm: Vec<usize> = (0..20).map(|i| (i * 7 + shift) % 20).collect();
            let p = d.permuted(&perm).unwrap();
            prop_assert_eq!(k_epsilon_membership(&d, eps), k_epsilon_membership(&p, eps));
            let k = KEpsilon::for_generator(&gen, eps);
            prop_assert_eq!(k.contains(&d), k.contains(&p));
        }

        #[test]
        fn data_dependent_nonincreasing_in_eps(e1 in 0.01f64..1e5, factor in 1.0f64..10.0) {
            let s = linear(200);
            let rset = RestrictionSet {
                epsilon_k: 0.5,
                set: KEpsilon::literal(0.5),
                n: 200,
                reps: 500,
                in_k: 495,
                membership_freq: 0.99,
                mu_k_lower: 0.97,
                c_bnt: C_BNT,
                gamma_k: 0.01,
                gamma_se: 0.0,
                delta3k: 0.02,
                delta3k_se: 0.0,
                delta1k: Arc::new(|_, _| 0.3),
                delta1k_value: 0.3,
                slice_prob: 0.0,
            };
            let z = zs();
            let a = bound_data_dependent(&s, e1, &rset, &z, 0.0).unwrap();
            let b = bound_data_dependent(&s, e1 * factor, &rset, &z, 0.0).unwrap();
            prop_assert!(b.value <= a.value);
            prop_assert!((0.0..=1.0).contains(&a.value));
        }
    }

    #[test]
    fn kde_bound_double_implementation() {
        // Independent evaluation of the three terms for the density example.
        let gen = DataGenerator::uniform_sine(10.0).unwrap();
        let n = 1024usize;
        let h = 0.1;
        let spec = BoundSpec::for_generator(&gen, Growth::Linear { lipschitz_const: 0.241_970_724_519_143_37 / (h * h) }, n).unwrap();
        let profile = StabilityProfile::kde(h);
        let z = bound_z_samples(&gen, 32, 9);
        let b = bound_main(&spec, 0.02, &profile, &z).unwrap();
        let t = 0.02 / 3.0;
        let c1 = gen.sigma2_mu();
        let d1 = 0.241_970_724_519_143_37 / (h * h * (n as f64).sqrt());
        let l = 0.241_970_724_519_143_37 / (h * h);
        let first = n as f64 * (-(t * t) / (8.0 * c1 * d1 * d1)).exp();
        let second = (-(n as f64) * t * t / (8.0 * c1 * l * l)).exp();
        let third = (-(t * t) / (8.0 * c1 * d1 * d1)).exp();
        assert!((b.value - (first + second + third).min(1.0)).abs() <= 1e-12);
    }
}
