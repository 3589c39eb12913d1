//! Monte Carlo free-energy estimates and numerical checks of the lower- and
//! upper-bound constructions: rare stretches, the trimmed second moment,
//! the penalizing change of measure and the coarse-graining estimate.

use rand::Rng;
use serde::Serialize;

use crate::bounds::{log_m_h, psi};
use crate::disorder::DisorderLaw;
use crate::kernel::{
    defect_kk, green_constant, ln_renewal_from_masses, FamilyKind, GreenReport, RenewalKernel,
    SlowlyVaryingFamily, TiltedKernel,
};
use crate::numerics::{integrate, log_sum_exp, mean_and_stderr, KahanSum};
use crate::partition::{
    log_z, log_z_prefixes, sample_trimmed_path, trimmed_layers, QuenchedInstance,
};
use crate::seeding::{derive_seed, map_replicas, replica_rng};
use crate::{Error, Result};

/// Width of the lower bracket in standard errors.
pub const CONFIDENCE_Z: f64 = 3.0;

/// The `ε` in the rare-stretch gain.
pub const GAIN_EPSILON: f64 = 0.05;

/// Ratio of the geometric grids used by the optimizers.
pub const GRID_RATIO: f64 = 1.2;

/// Largest block length scanned by the rare-stretch optimizer.
pub const MAX_BLOCK_LENGTH: u64 = 1_000_000;

/// Largest `N = e^{c₃/h}` accepted by the coarse-graining check.
pub const COARSE_BUDGET: f64 = 2e4;

/// Largest `log M` for which the trimmed recursion is attempted.
pub const MAX_LOG_LONG_MIN: f64 = 20.0;

const TAG_CALIBRATION: u64 = 0xC411;
const TAG_VALIDATION: u64 = 0xCA11;
const TAG_PATHS: u64 = 0x9A7;

fn check_support(kernel: &RenewalKernel, n: usize) -> Result<()> {
    if n == 0 || n > kernel.support_cap {
        return Err(Error::param(
            "n",
            format!("N = {n} must lie in 1..={}", kernel.support_cap),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Free energy with brackets

/// Constants of the sub-additive correction `𝔊_N = E log Z_N + c₄ log N + c₅`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubadditiveConstants {
    pub c4: f64,
    pub c5: f64,
    /// True when the pair was fitted to Monte Carlo data.
    pub empirical: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeEnergyEstimate {
    pub n: usize,
    pub replicas: usize,
    pub beta: f64,
    pub h: f64,
    pub mean_log_z_per_site: f64,
    pub stderr: f64,
    /// `𝔊_N/N` with the mean in place of `E log Z_N`.
    pub upper_bracket: f64,
    /// `mean − z·stderr`.
    pub lower_bracket: f64,
    pub z: f64,
    pub constants: SubadditiveConstants,
}

/// Estimate with `c₄, c₅` calibrated on `[0, β] × [−|h|, |h|]` from a seed
/// derived from `seed`.
pub fn estimate_free_energy(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    n: usize,
    replicas: usize,
    seed: u64,
) -> Result<FreeEnergyEstimate> {
    check_support(kernel, n)?;
    let options = CalibrationOptions::for_size(n);
    let calibration = calibrate_subadditive_constants(kernel, law, beta, h.abs(), options, seed)?;
    estimate_free_energy_with(
        kernel,
        law,
        beta,
        h,
        n,
        replicas,
        seed,
        calibration.constants,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_free_energy_with(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    n: usize,
    replicas: usize,
    seed: u64,
    constants: SubadditiveConstants,
) -> Result<FreeEnergyEstimate> {
    check_support(kernel, n)?;
    if replicas < 2 {
        return Err(Error::param(
            "replicas",
            format!("need at least 2, got {replicas}"),
        ));
    }
    law.log_mgf(beta)?;
    let samples: Vec<Result<f64>> = map_replicas(seed, replicas, |_, rng| {
        let inst = QuenchedInstance::sample(law, n, beta, h, rng)?;
        Ok(log_z(&inst, kernel).value)
    });
    let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_stderr(&samples);
    let nf = n as f64;
    Ok(FreeEnergyEstimate {
        n,
        replicas,
        beta,
        h,
        mean_log_z_per_site: mean / nf,
        stderr: se / nf,
        upper_bracket: (mean + constants.c4 * nf.ln() + constants.c5) / nf,
        lower_bracket: (mean - CONFIDENCE_Z * se) / nf,
        z: CONFIDENCE_Z,
        constants,
    })
}

// ---------------------------------------------------------------------------
// Sub-additivity calibration

/// One `(β, h, N, M)` point at which `𝔊_{N+M} ≤ 𝔊_N + 𝔊_M` is tested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapTrial {
    pub beta: f64,
    pub h: f64,
    pub n: usize,
    pub m: usize,
}

/// Mean and standard error of `log Z_{N+M} − log Z_N − log Z_M ∘ θ^N` over
/// replicas sharing the disorder of the long system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapSample {
    pub trial: GapTrial,
    pub mean: f64,
    pub stderr: f64,
}

impl GapSample {
    /// Whether the upper end `mean + 2·stderr` sits below the correction.
    pub fn satisfied_by(&self, c4: f64, c5: f64) -> bool {
        let (n, m) = (self.trial.n as f64, self.trial.m as f64);
        self.mean + 2.0 * self.stderr <= c4 * (n * m / (n + m)).ln() + c5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationOptions {
    pub trials: usize,
    pub replicas_per_trial: usize,
    /// System sizes `N, M` are drawn from `2..=max_size`.
    pub max_size: usize,
}

impl CalibrationOptions {
    pub const MIN_TRIALS: usize = 50;

    pub fn for_size(n: usize) -> Self {
        CalibrationOptions {
            trials: Self::MIN_TRIALS,
            replicas_per_trial: 16,
            max_size: (n / 2).clamp(2, 128),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub constants: SubadditiveConstants,
    pub options: CalibrationOptions,
    /// Fraction of a fresh validation set satisfying the fitted pair.
    pub validation_fraction: f64,
}

pub fn draw_gap_trials(
    beta_max: f64,
    h_max: f64,
    trials: usize,
    max_size: usize,
    seed: u64,
) -> Vec<GapTrial> {
    let mut rng = replica_rng(seed, u64::MAX);
    let max_size = max_size.max(2);
    (0..trials)
        .map(|_| GapTrial {
            beta: beta_max * rng.random::<f64>(),
            h: h_max * (2.0 * rng.random::<f64>() - 1.0),
            n: rng.random_range(2..=max_size),
            m: rng.random_range(2..=max_size),
        })
        .collect()
}

pub fn sample_subadditivity_gaps(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    trials: &[GapTrial],
    replicas: usize,
    seed: u64,
) -> Result<Vec<GapSample>> {
    if replicas < 2 {
        return Err(Error::param(
            "replicas",
            format!("need at least 2, got {replicas}"),
        ));
    }
    for t in trials {
        check_support(kernel, t.n + t.m)?;
    }
    let gaps: Vec<Result<f64>> = map_replicas(seed, trials.len() * replicas, |i, rng| {
        let t = trials[i as usize / replicas];
        let long = QuenchedInstance::sample(law, t.n + t.m, t.beta, t.h, rng)?;
        Ok(log_z(&long, kernel).value
            - log_z(&long.window(0, t.n), kernel).value
            - log_z(&long.window(t.n, t.m), kernel).value)
    });
    let gaps = gaps.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(trials
        .iter()
        .zip(gaps.chunks(replicas))
        .map(|(&trial, d)| {
            let (mean, stderr) = mean_and_stderr(d);
            GapSample {
                trial,
                mean,
                stderr,
            }
        })
        .collect())
}

/// Smallest `c₄ + c₅` on the grid `c₄ ∈ [0, 10]`, `c₅ ∈ [0, 20]` (step 1/4)
/// satisfied by every sample; ties go to the smaller `c₄`.
pub fn fit_subadditive_constants(samples: &[GapSample]) -> Result<SubadditiveConstants> {
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=40 {
        let c4 = 0.25 * i as f64;
        for j in 0..=80 {
            let c5 = 0.25 * j as f64;
            if best.is_some_and(|(b4, b5)| c4 + c5 >= b4 + b5) {
                break;
            }
            if samples.iter().all(|s| s.satisfied_by(c4, c5)) {
                best = Some((c4, c5));
                break;
            }
        }
    }
    let (c4, c5) = best.ok_or_else(|| Error::Infeasible {
        what: "fit_subadditive_constants",
        detail: "no grid pair (c4 <= 10, c5 <= 20) satisfies every sample".into(),
    })?;
    Ok(SubadditiveConstants {
        c4,
        c5,
        empirical: true,
    })
}

/// Fraction of `samples` satisfied by `(c₄, c₅)`.
pub fn validate_subadditive_constants(
    constants: &SubadditiveConstants,
    samples: &[GapSample],
) -> f64 {
    if samples.is_empty() {
        return 1.0;
    }
    let ok = samples
        .iter()
        .filter(|s| s.satisfied_by(constants.c4, constants.c5))
        .count();
    ok as f64 / samples.len() as f64
}

pub fn calibrate_subadditive_constants(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta_max: f64,
    h_max: f64,
    options: CalibrationOptions,
    seed: u64,
) -> Result<Calibration> {
    if options.trials < CalibrationOptions::MIN_TRIALS {
        return Err(Error::param(
            "trials",
            format!(
                "need at least {}, got {}",
                CalibrationOptions::MIN_TRIALS,
                options.trials
            ),
        ));
    }
    law.log_mgf(beta_max)?;
    let fit_seed = derive_seed(seed, TAG_CALIBRATION);
    let check_seed = derive_seed(seed, TAG_VALIDATION);
    let fit_trials = draw_gap_trials(beta_max, h_max, options.trials, options.max_size, fit_seed);
    let check_trials = draw_gap_trials(
        beta_max,
        h_max,
        options.trials,
        options.max_size,
        check_seed,
    );
    let fit_samples = sample_subadditivity_gaps(
        kernel,
        law,
        &fit_trials,
        options.replicas_per_trial,
        fit_seed,
    )?;
    let constants = fit_subadditive_constants(&fit_samples)?;
    let check_samples = sample_subadditivity_gaps(
        kernel,
        law,
        &check_trials,
        options.replicas_per_trial,
        check_seed,
    )?;
    Ok(Calibration {
        constants,
        options,
        validation_fraction: validate_subadditive_constants(&constants, &check_samples),
    })
}

// ---------------------------------------------------------------------------
// Rare stretches

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EllChoice {
    Fixed(u64),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RareStretchPlan {
    pub beta: f64,
    pub h: f64,
    /// `λ'(β)`.
    pub q: f64,
    pub ell: u64,
    pub p_ell: f64,
    pub ln_p_ell: f64,
    pub epsilon: f64,
    /// `g(h, ℓ) = hℓ − (5/2 + ε) log ℓ + log L(1/p(ℓ))`.
    pub gain: f64,
    /// `(p(ℓ)/ℓ) g(h, ℓ)`; zero when it underflows.
    pub lower_bound: f64,
    pub ln_lower_bound: f64,
}

/// `log p(ℓ)` and `g(h, ℓ)` at one block length.
fn block_gain(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    q: f64,
    h: f64,
    ell: u64,
) -> Result<(f64, f64)> {
    let ln_p = law.ln_block_tail(0.0, ell, q)?;
    let l = ell as f64;
    let gain = h * l - (2.5 + GAIN_EPSILON) * l.ln() + kernel.ln_l_eff_at_ln(-ln_p);
    Ok((ln_p, gain))
}

/// Geometric block-length grid `1, 2, 3, 4, 5, 6, 8, …` up to `max`.
pub fn geometric_grid(max: u64) -> Vec<u64> {
    let mut grid = vec![1u64];
    while let Some(&last) = grid.last() {
        let next = ((last as f64) * GRID_RATIO).ceil() as u64;
        let next = next.max(last + 1);
        if next > max {
            break;
        }
        grid.push(next);
    }
    grid
}

pub fn rare_stretch_bound(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    ell: EllChoice,
) -> Result<RareStretchPlan> {
    if !(h > 0.0) {
        return Err(Error::domain(
            "rare_stretch_bound",
            format!("h = {h} must be positive"),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::domain(
            "rare_stretch_bound",
            format!("beta = {beta} must be positive"),
        ));
    }
    let q = law.log_mgf_derivative(beta)?;
    let candidates = match ell {
        EllChoice::Fixed(0) => return Err(Error::param("ell", "block length must be >= 1")),
        EllChoice::Fixed(l) => vec![l],
        EllChoice::Auto => geometric_grid(MAX_BLOCK_LENGTH),
    };
    let mut best: Option<RareStretchPlan> = None;
    for &l in &candidates {
        let (ln_p, gain) = block_gain(kernel, law, q, h, l)?;
        let ln_lower = if gain > 0.0 {
            ln_p - (l as f64).ln() + gain.ln()
        } else {
            f64::NEG_INFINITY
        };
        let plan = RareStretchPlan {
            beta,
            h,
            q,
            ell: l,
            p_ell: ln_p.exp(),
            ln_p_ell: ln_p,
            epsilon: GAIN_EPSILON,
            gain,
            lower_bound: ln_lower.exp(),
            ln_lower_bound: ln_lower,
        };
        if matches!(ell, EllChoice::Fixed(_)) {
            return if gain > 0.0 {
                Ok(plan)
            } else {
                Err(Error::Vacuous(format!(
                    "g(h = {h}, ell = {l}) = {gain} <= 0"
                )))
            };
        }
        if gain > 0.0 && best.is_none_or(|b| ln_lower > b.ln_lower_bound) {
            best = Some(plan);
        }
    }
    best.ok_or_else(|| {
        Error::Vacuous(format!(
            "g(h = {h}, ell) <= 0 for every ell <= {MAX_BLOCK_LENGTH}"
        ))
    })
}

/// Where `g(h, ·)` turns positive, next to the asymptotic sufficient length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSignFlip {
    pub h: f64,
    /// Smallest `ℓ` with `g(h, ℓ) > 0` and `g(h, ℓ − 1) ≤ 0` found by the scan.
    pub measured: Option<u64>,
    /// Length above which the gain is positive for small `h`.
    pub asymptotic: f64,
}

pub fn gain_sign_flip(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
) -> Result<GainSignFlip> {
    let q = law.log_mgf_derivative(beta)?;
    let gain = |l: u64| block_gain(kernel, law, q, h, l).map(|(_, g)| g);
    let asymptotic = asymptotic_block_length(&kernel.family, law, beta, h)?;
    let mut measured = None;
    if gain(1)? > 0.0 {
        measured = Some(1);
    } else {
        let grid = geometric_grid(MAX_BLOCK_LENGTH);
        for pair in grid.windows(2) {
            if gain(pair[1])? > 0.0 {
                let (mut lo, mut hi) = (pair[0], pair[1]);
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if gain(mid)? > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                measured = Some(hi);
                break;
            }
        }
    }
    Ok(GainSignFlip {
        h,
        measured,
        asymptotic,
    })
}

/// Block length sufficient for a positive gain as `h → 0`.
pub fn asymptotic_block_length(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
) -> Result<f64> {
    let e = GAIN_EPSILON;
    let u = family.upsilon;
    Ok(match family.kind {
        FamilyKind::SubLogarithmic => (3.5 + 2.0 * e) * (1.0 / h).ln() / h,
        FamilyKind::Logarithmic => (2.5 + u + 2.0 * e) * (1.0 / h).ln() / h,
        FamilyKind::SuperLogarithmic => {
            let sigma = law.rate_function(law.log_mgf_derivative(beta)?)?.sigma;
            (1.0 + e) * h.powf(-u / (u - 1.0)) * sigma.powf(1.0 / (u - 1.0))
        }
    })
}

/// Log of the closed-form lower bound obtained from the rare-stretch gain
/// with the rate `Σ(λ'(β))` computed by the Legendre solver:
/// `−(1+ε)h^{−υ/(υ−1)} Σ^{υ/(υ−1)}`, `−(5/2+υ+ε) Σ log(1/h)/h` or
/// `−(7/2+ε) Σ log(1/h)/h` by family.
pub fn log_rare_stretch_asymptotic(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    epsilon: f64,
) -> Result<f64> {
    let sigma = law.rate_function(law.log_mgf_derivative(beta)?)?.sigma;
    let u = family.upsilon;
    Ok(match family.kind {
        FamilyKind::SubLogarithmic => -(3.5 + epsilon) * sigma * (1.0 / h).ln() / h,
        FamilyKind::Logarithmic => -(2.5 + u + epsilon) * sigma * (1.0 / h).ln() / h,
        FamilyKind::SuperLogarithmic => {
            let p = u / (u - 1.0);
            -(1.0 + epsilon) * h.powf(-p) * sigma.powf(p)
        }
    })
}

// ---------------------------------------------------------------------------
// Trimmed second moment

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrimmedPlan {
    /// Longest collecting excursion.
    pub k: usize,
    /// Shortest non-collecting excursion; the longest is `M²`.
    #[serde(rename = "M")]
    pub long_min: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Number of long/short rounds.
    pub m: usize,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

impl TrimmedPlan {
    /// `k = ⌊c₁ log log(1/h)/h⌋`, `M = ⌊e^{c₂k}⌋`, then as in [`Self::scaled`].
    /// Requires `c₁ > υ + 1` and `c₂ > q₂(β)`.
    pub fn from_constants(
        family: &SlowlyVaryingFamily,
        law: &DisorderLaw,
        beta: f64,
        h: f64,
        c1: f64,
        c2: f64,
    ) -> Result<Self> {
        if !(h > 0.0 && h < (-1.0f64).exp()) {
            return Err(Error::domain(
                "trimmed_plan",
                format!("h = {h} must lie in (0, 1/e)"),
            ));
        }
        if !(c1 > family.upsilon + 1.0) {
            return Err(Error::param(
                "c1",
                format!(
                    "must exceed upsilon + 1 = {}, got {c1}",
                    family.upsilon + 1.0
                ),
            ));
        }
        let q2 = law
            .q2(beta)?
            .finite()
            .ok_or_else(|| Error::domain("trimmed_plan", format!("q2({beta}) is infinite")))?;
        if !(c2 > q2) {
            return Err(Error::param(
                "c2",
                format!("must exceed q2 = {q2}, got {c2}"),
            ));
        }
        let k = (c1 * (1.0 / h).ln().ln() / h).floor().max(1.0);
        let ln_m = c2 * k;
        if ln_m > MAX_LOG_LONG_MIN {
            return Err(Error::Infeasible {
                what: "trimmed_plan",
                detail: format!("M = e^{ln_m:.1} (k = {k}) is not representable at desk scale"),
            });
        }
        let mut plan = Self::scaled(ln_m.exp().floor() as usize, k as usize)?;
        plan.c1 = Some(c1);
        plan.c2 = Some(c2);
        Ok(plan)
    }

    /// Plan with prescribed `M` and `k`: `N = ⌊M²(log M)³⌋`, `m = ⌊N/(M² log M)⌋`.
    pub fn scaled(long_min: usize, k: usize) -> Result<Self> {
        if long_min < 2 || k == 0 || 2 * k > long_min {
            return Err(Error::param(
                "trimmed_plan",
                format!("need M >= 2, k >= 1 and k <= M/2, got M = {long_min}, k = {k}"),
            ));
        }
        let mf = long_min as f64;
        let lm = mf.ln();
        let n = (mf * mf * lm.powi(3)).floor() as usize;
        let m = (n as f64 / (mf * mf * lm)).floor() as usize;
        if m == 0 || m * (long_min * long_min + k) >= n {
            return Err(Error::param(
                "trimmed_plan",
                format!("M = {long_min} leaves no room for the final excursion"),
            ));
        }
        Ok(TrimmedPlan {
            k,
            long_min,
            n,
            m,
            c1: None,
            c2: None,
        })
    }

    pub fn long_max(&self) -> usize {
        self.long_min * self.long_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloValue {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MonteCarloValue {
    fn from_samples(v: &[f64]) -> Self {
        let (mean, stderr) = mean_and_stderr(v);
        MonteCarloValue {
            mean,
            stderr,
            samples: v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrimmedReport {
    pub plan: TrimmedPlan,
    pub beta: f64,
    pub h: f64,
    pub q2: f64,
    /// `log E Z̃` from the disorder-free recursion.
    pub log_first_moment: f64,
    /// `log` of `(½Σ_{M}^{M²}K)^m (½Σ_{1}^{k}e^{hn}K)^m K(N)/3`.
    pub log_first_moment_product: f64,
    pub first_moment_strict: bool,
    /// `E[Z̃²]/E[Z̃]²` from quenched samples.
    pub second_moment_ratio: MonteCarloValue,
    /// `Ẽ^{⊗2}[e^{q₂|Δ ∩ Δ'|}]` from pairs of paths of the annealed measure.
    pub overlap_expectation: MonteCarloValue,
    pub identity_gap_sigmas: f64,
    pub identity_holds: bool,
    /// `m log(1 + e^{kq₂} C k log k log M / M)`, `C = 4c/(c_L log 2)`.
    pub log_induction_bound: f64,
    pub induction_constant: f64,
    /// Range of `K(N − t)/Ê[K(N − τ_{2m}); τ_{2m} < N]` over the support
    /// of `τ_{2m}` under independent jumps.
    pub density_ratio_sup: f64,
    pub density_ratio_inf: f64,
}

/// Sites `(a, b]` of the collecting excursions of a path given its epochs.
fn collecting_intervals(epochs: &[usize]) -> Vec<(usize, usize)> {
    epochs[1..].chunks_exact(2).map(|w| (w[0], w[1])).collect()
}

fn overlap(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

pub fn trimmed_moment_check(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    plan: &TrimmedPlan,
    replicas: usize,
    seed: u64,
) -> Result<TrimmedReport> {
    check_support(kernel, plan.n)?;
    if replicas < 2 {
        return Err(Error::param(
            "replicas",
            format!("need at least 2, got {replicas}"),
        ));
    }
    let q2 = law
        .q2(beta)?
        .finite()
        .ok_or_else(|| Error::domain("trimmed_moment_check", format!("q2({beta}) is infinite")))?;
    let (big_m, k, m, n) = (plan.long_min, plan.k, plan.m, plan.n);
    let annealed = QuenchedInstance::annealed(n, h);
    let layers = trimmed_layers(&annealed, kernel, big_m, k, m)?;
    let log_first = layers.total;

    let long_sum: KahanSum = (big_m..=plan.long_max()).map(|d| kernel.k(d)).collect();
    let short_sum: KahanSum = (1..=k)
        .map(|d| kernel.k(d) * (h * d as f64).exp())
        .collect();
    let log_product = m as f64 * (0.5 * long_sum.value()).ln()
        + m as f64 * (0.5 * short_sum.value()).ln()
        + (kernel.k(n) / 3.0).ln();

    let lhs: Vec<Result<f64>> = map_replicas(seed, replicas, |_, rng| {
        let inst = QuenchedInstance::sample(law, n, beta, h, rng)?;
        let t = trimmed_layers(&inst, kernel, big_m, k, m)?.total;
        Ok((2.0 * (t - log_first)).exp())
    });
    let lhs = lhs.into_iter().collect::<Result<Vec<f64>>>()?;
    let rhs: Vec<Option<f64>> = map_replicas(derive_seed(seed, TAG_PATHS), replicas, |_, rng| {
        let a = sample_trimmed_path(&layers, &annealed, kernel, big_m, k, rng)?;
        let b = sample_trimmed_path(&layers, &annealed, kernel, big_m, k, rng)?;
        let shared = overlap(&collecting_intervals(&a), &collecting_intervals(&b));
        Some((q2 * shared as f64).exp())
    });
    let rhs = rhs
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Infeasible {
            what: "trimmed_moment_check",
            detail: "the trimmed ensemble is empty".into(),
        })?;
    let lhs = MonteCarloValue::from_samples(&lhs);
    let rhs = MonteCarloValue::from_samples(&rhs);
    let spread = lhs.stderr + rhs.stderr;
    let gap = (lhs.mean - rhs.mean).abs();
    let identity_gap_sigmas = if spread > 0.0 {
        gap / spread
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    let c = kernel.max_n_k();
    let c_l = kernel.family.c_l * kernel.normalization;
    let constant = 4.0 * c / (c_l * std::f64::consts::LN_2);
    let (kf, mf) = (k as f64, big_m as f64);
    let log_induction =
        m as f64 * (1.0 + (kf * q2).exp() * constant * kf * kf.ln() * mf.ln() / mf).ln();

    let (sup, inf) = density_ratio_range(kernel, h, plan)?;
    Ok(TrimmedReport {
        plan: *plan,
        beta,
        h,
        q2,
        log_first_moment: log_first,
        log_first_moment_product: log_product,
        first_moment_strict: log_first > log_product,
        second_moment_ratio: lhs,
        overlap_expectation: rhs,
        identity_gap_sigmas,
        identity_holds: gap <= CONFIDENCE_Z * spread,
        log_induction_bound: log_induction,
        induction_constant: constant,
        density_ratio_sup: sup,
        density_ratio_inf: inf,
    })
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate().filter(|(_, x)| **x > 0.0) {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn density_ratio_range(kernel: &RenewalKernel, h: f64, plan: &TrimmedPlan) -> Result<(f64, f64)> {
    let hat =
        TiltedKernel::hat_independent_jumps(kernel, h, plan.long_min, plan.long_max(), plan.k)?;
    let step = |masses: &[f64]| {
        let mut v = vec![0.0];
        v.extend_from_slice(masses);
        v
    };
    let long = step(&hat.masses);
    let short = step(hat.short_masses.as_deref().unwrap_or(&[]));
    let mut law = vec![1.0];
    for _ in 0..plan.m {
        law = convolve(&convolve(&law, &long), &short);
    }
    let n = plan.n;
    let mut mean = KahanSum::default();
    for (t, p) in law.iter().enumerate().take(n) {
        mean.add(p * kernel.k(n - t));
    }
    let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
    for (t, p) in law.iter().enumerate().take(n) {
        if *p > 0.0 {
            let r = kernel.k(n - t) / mean.value();
            sup = sup.max(r);
            inf = inf.min(r);
        }
    }
    Ok((sup, inf))
}

// ---------------------------------------------------------------------------
// Penalization

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenalizationPlan {
    pub b: f64,
    pub h: f64,
    /// `k = ⌊φ(h)/h⌋`.
    pub k: u64,
    /// `φ(h) = b log(L̃(1/h)/L(1/h))`.
    pub phi: f64,
    /// `bλ'(β)`.
    pub event_threshold: f64,
}

impl PenalizationPlan {
    pub fn new(
        family: &SlowlyVaryingFamily,
        law: &DisorderLaw,
        beta: f64,
        h: f64,
        b: f64,
    ) -> Result<Self> {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::param("b", format!("must lie in (0, 1), got {b}")));
        }
        let phi = family.phi(h, b)?;
        Ok(PenalizationPlan {
            b,
            h,
            k: family.penalization_length(h, b)?,
            phi,
            event_threshold: b * law.log_mgf_derivative(beta)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenalizationReport {
    pub plan: PenalizationPlan,
    pub beta: f64,
    /// `Σ(bλ'(β))`, the largest admissible `c₁(β)`.
    pub chernoff_rate: f64,
    /// `−c₁ k`: log of the per-site cost of the density.
    pub log_penalty_budget: f64,
    /// `log P_β(ℰ)` over a stretch of length `k + 1`.
    pub log_tilted_success: f64,
    pub tilted_success: f64,
    /// `−log P_β(ℰᶜ)/(k + 1)`.
    pub tilted_failure_rate: f64,
    /// `2(Σ K_k − 1)` at `k = ⌊φ(h)/h⌋`.
    pub defect_kk: f64,
    pub defect_nonpositive: bool,
    /// `log` of the general upper bound at `(b, β, h)`.
    pub log_bound: f64,
    /// `−Σ(bλ'(β)) φ(h)/h` from the change of measure.
    pub log_bound_change_of_measure: f64,
    /// `q₁(β)`, the limit of the Chernoff rate as `b → 1`.
    pub rate_at_b_one: f64,
}

pub fn penalization_check(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    plan: &PenalizationPlan,
) -> Result<PenalizationReport> {
    if !(h > 0.0) {
        return Err(Error::domain(
            "penalization_check",
            format!("h = {h} must be positive"),
        ));
    }
    let rate = law.rate_function(plan.event_threshold)?.sigma;
    let ell = plan.k + 1;
    let log_success = law.ln_block_tail(beta, ell, plan.event_threshold)?;
    let log_failure = law.ln_block_lower_tail(beta, ell, plan.event_threshold)?;
    let defect = defect_kk(kernel, h, plan.k)?;
    Ok(PenalizationReport {
        plan: *plan,
        beta,
        chernoff_rate: rate,
        log_penalty_budget: -rate * plan.k as f64,
        log_tilted_success: log_success,
        tilted_success: log_success.exp(),
        tilted_failure_rate: -log_failure / ell as f64,
        defect_kk: defect,
        defect_nonpositive: defect <= 0.0,
        log_bound: crate::bounds::log_upper_general(&kernel.family, law, beta, h, plan.b)?,
        log_bound_change_of_measure: -rate * plan.phi / h,
        rate_at_b_one: law.q1(beta)?,
    })
}

/// Fraction of `samples` stretches of length `k` drawn from `P_β` whose sum
/// reaches `bλ'(β)k`.
pub fn tilted_event_frequency(
    law: &DisorderLaw,
    beta: f64,
    b: f64,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let threshold = b * law.log_mgf_derivative(beta)? * k as f64;
    let hits = map_replicas(seed, samples, |_, rng| {
        let mut block = vec![0.0; k];
        law.fill(rng, beta, &mut block);
        block.iter().sum::<f64>() >= threshold
    });
    Ok(hits.iter().filter(|&&x| x).count() as f64 / samples.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Coarse graining

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoarseGrainingReport {
    pub beta: f64,
    pub h: f64,
    pub c3: f64,
    pub eta: f64,
    pub eps: f64,
    /// `θ = 1 − h/c₃`.
    pub theta: f64,
    /// `N = ⌊e^{c₃/h}⌋`.
    pub n: usize,
    /// `log M` with `M = M_{h/c₃}`.
    pub log_m: f64,
    /// `log A` and `log B` with exact `Ǩ_h` renewal masses.
    pub log_a_term: f64,
    pub log_b_term: f64,
    /// `log e³(A + B)`.
    pub log_rho_bound: f64,
    pub rho_at_most_one: bool,
    /// `∫_{e^{c₃/h}}^M L(x)^θ x^{−θ} dx` over `x`; `None` when `M` overflows.
    pub integral_direct: Option<f64>,
    /// The same integral after `x = e^{c₃y/h}`.
    pub integral_substituted: f64,
    /// `(21/L̃(1/h)) · 2 · integral`.
    pub analytic_a_bound: f64,
    pub green: GreenReport,
}

/// `Σ_{d ≤ x} K(d)^θ`: exact over the table, then the integral of `K^θ`.
struct PowerPrefix<'a> {
    kernel: &'a RenewalKernel,
    theta: f64,
    table: Vec<f64>,
}

impl<'a> PowerPrefix<'a> {
    fn new(kernel: &'a RenewalKernel, theta: f64) -> Self {
        let mut acc = KahanSum::default();
        let mut table = Vec::with_capacity(kernel.support_cap + 1);
        table.push(0.0);
        for d in 1..=kernel.support_cap {
            acc.add(kernel.k(d).powf(theta));
            table.push(acc.value());
        }
        PowerPrefix {
            kernel,
            theta,
            table,
        }
    }

    fn ln_k_power_at_ln(&self, s: f64) -> f64 {
        self.theta * (self.kernel.ln_l_eff_at_ln(s) - s)
    }

    /// Prefix sum at `x = e^{ln_x}` (not necessarily representable).
    fn at_ln(&self, ln_x: f64) -> f64 {
        let cap = self.kernel.support_cap;
        if ln_x <= (cap as f64).ln() {
            return self.table[ln_x.exp().round() as usize];
        }
        let lo = (cap as f64 + 0.5).ln();
        let hi = if ln_x < 700.0 {
            (ln_x.exp() + 0.5).ln()
        } else {
            ln_x
        };
        self.table[cap] + integrate(|s| (self.ln_k_power_at_ln(s) + s).exp(), lo, hi, 1e-10, 0.0)
    }

    fn at(&self, x: usize) -> f64 {
        if x <= self.kernel.support_cap {
            self.table[x]
        } else {
            self.at_ln((x as f64).ln())
        }
    }
}

pub fn coarse_graining_check(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    c3: f64,
    eta: f64,
    eps: f64,
) -> Result<CoarseGrainingReport> {
    if !(h > 0.0) {
        return Err(Error::domain(
            "coarse_graining_check",
            format!("h = {h} must be positive"),
        ));
    }
    let q1 = law.q1(beta)?;
    if !(c3 > 0.0 && c3 < q1) {
        return Err(Error::param(
            "c3",
            format!("must lie in (0, q1 = {q1}), got {c3}"),
        ));
    }
    let ln_n = c3 / h;
    if ln_n > COARSE_BUDGET.ln() {
        return Err(Error::Infeasible {
            what: "coarse_graining_check",
            detail: format!("N = e^{ln_n:.2} exceeds {COARSE_BUDGET:.0}"),
        });
    }
    let n = ln_n.exp().floor() as usize;
    check_support(kernel, n.max(1))?;
    let theta = 1.0 - h / c3;
    let log_m = log_m_h(&kernel.family, h / c3, eps)?;

    let tilted = TiltedKernel::check_eta(kernel, h, eta, n)?;
    let renewal = ln_renewal_from_masses(&tilted.masses, n);
    let prefix = PowerPrefix::new(kernel, theta);
    // beyond the table, P(M − j) ≈ P(M) − j K(M)^θ
    let m_in_table = log_m.exp() <= kernel.support_cap as f64;
    let (p_m, k_m_theta) = if m_in_table {
        (None, 0.0)
    } else {
        (
            Some(prefix.at_ln(log_m)),
            prefix.ln_k_power_at_ln(log_m).exp(),
        )
    };
    let m_count = if m_in_table {
        log_m.exp().floor() as usize
    } else {
        usize::MAX
    };
    // Σ_{n=N}^{M} K(n − j)^θ = P(M − j) − P(N − 1 − j)
    let window = |j: usize| -> f64 {
        let upper = match p_m {
            Some(pm) => pm - j as f64 * k_m_theta,
            None => {
                if m_count < j {
                    return 0.0;
                }
                prefix.at(m_count - j)
            }
        };
        (upper - prefix.at(n - 1 - j)).max(0.0)
    };
    let half = n / 2;
    let part = |range: std::ops::Range<usize>| -> f64 {
        let terms: Vec<f64> = range.map(|j| renewal.ln_u[j] + window(j).ln()).collect();
        log_sum_exp(&terms)
    };
    let log_a = if log_m < ln_n {
        f64::NEG_INFINITY
    } else {
        part(0..half)
    };
    let log_b = if log_m < ln_n {
        f64::NEG_INFINITY
    } else {
        part(half..n)
    };
    let log_rho = 3.0 + log_sum_exp(&[log_a, log_b]);

    let ln_l_theta = |s: f64| theta * kernel.ln_l_eff_at_ln(s);
    let integral_direct = (log_m < 700.0 && log_m > ln_n).then(|| {
        let (mut a, b) = (ln_n.exp(), log_m.exp());
        let mut acc = KahanSum::default();
        while a < b {
            let next = (2.0 * a).min(b);
            acc.add(integrate(
                |x| (ln_l_theta(x.ln()) - theta * x.ln()).exp(),
                a,
                next,
                1e-10,
                0.0,
            ));
            a = next;
        }
        acc.value()
    });
    let u = c3 / h;
    let upper = psi(&kernel.family, u, eps);
    let integral_substituted = if upper > 1.0 {
        u * integrate(|y| (ln_l_theta(u * y) + y).exp(), 1.0, upper, 1e-10, 0.0)
    } else {
        0.0
    };
    let tail = kernel.tail(1.0 / h)?;
    let green = green_constant(kernel, h, eta, n)?;
    Ok(CoarseGrainingReport {
        beta,
        h,
        c3,
        eta,
        eps,
        theta,
        n,
        log_m,
        log_a_term: log_a,
        log_b_term: log_b,
        log_rho_bound: log_rho,
        rho_at_most_one: log_rho <= 0.0,
        integral_direct,
        integral_substituted,
        analytic_a_bound: 21.0 / tail * 2.0 * integral_substituted,
        green,
    })
}

/// Monte Carlo comparison of `E[Z_j^θ]` with `e³ P̌_h(j ∈ τ)` for `j ≤ N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractionalMomentSpotCheck {
    pub beta: f64,
    pub h: f64,
    pub c3: f64,
    pub eta: f64,
    pub theta: f64,
    pub n: usize,
    pub replicas: usize,
    /// `max_j log(E[Z_j^θ]/P̌_h(j ∈ τ))`.
    pub max_log_ratio: f64,
    pub argmax: usize,
    /// Sites with `E[Z_j^θ] > e³ P̌_h(j ∈ τ)`.
    pub violations: Vec<usize>,
    pub holds: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn fractional_moment_spot_check(
    kernel: &RenewalKernel,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    c3: f64,
    eta: f64,
    replicas: usize,
    seed: u64,
) -> Result<FractionalMomentSpotCheck> {
    if !(h > 0.0 && c3 > 0.0) {
        return Err(Error::domain(
            "fractional_moment_spot_check",
            "h and c3 must be positive",
        ));
    }
    let ln_n = c3 / h;
    if ln_n > COARSE_BUDGET.ln() {
        return Err(Error::Infeasible {
            what: "fractional_moment_spot_check",
            detail: format!("N = e^{ln_n:.2} exceeds {COARSE_BUDGET:.0}"),
        });
    }
    let n = ln_n.exp().floor() as usize;
    check_support(kernel, n.max(1))?;
    if replicas < 2 {
        return Err(Error::param(
            "replicas",
            format!("need at least 2, got {replicas}"),
        ));
    }
    let theta = 1.0 - h / c3;
    let tilted = TiltedKernel::check_eta(kernel, h, eta, n)?;
    let renewal = ln_renewal_from_masses(&tilted.masses, n);
    let powers: Vec<Result<Vec<f64>>> = map_replicas(seed, replicas, |_, rng| {
        let inst = QuenchedInstance::sample(law, n, beta, h, rng)?;
        Ok(log_z_prefixes(&inst, kernel)
            .iter()
            .map(|z| (theta * z).exp())
            .collect())
    });
    let powers = powers.into_iter().collect::<Result<Vec<Vec<f64>>>>()?;
    let mut best = (f64::NEG_INFINITY, 0);
    let mut violations = Vec::new();
    let mut column = vec![0.0; replicas];
    for j in 1..=n {
        for (slot, row) in column.iter_mut().zip(&powers) {
            *slot = row[j];
        }
        let (mean, _) = mean_and_stderr(&column);
        let r = mean.ln() - renewal.ln_u[j];
        if r > best.0 {
            best = (r, j);
        }
        if r > 3.0 {
            violations.push(j);
        }
    }
    Ok(FractionalMomentSpotCheck {
        beta,
        h,
        c3,
        eta,
        theta,
        n,
        replicas,
        max_log_ratio: best.0,
        argmax: best.1,
        holds: violations.is_empty(),
        violations,
    })
}
