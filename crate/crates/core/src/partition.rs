//! Partition functions of the copolymer model.
//!
//! A path is a renewal set `τ ∋ N` with a sign per excursion; an excursion
//! `(j, n]` has weight `K(n − j)/2` and picks up `e^{S(n) − S(j)}` when it
//! collects the charges `βω_i − λ(β) + h`. Summing both signs gives the
//! factor `(1 + e^{S(n) − S(j)})/2`. Everything is kept in the log domain.

use rand::Rng;

use crate::disorder::DisorderLaw;
use crate::kernel::RenewalKernel;
use crate::numerics::{ln_half_one_plus_exp, mean_and_stderr, LogAccumulator};
use crate::seeding::{map_replicas, ReplicaRng};
use crate::{Error, Result};

/// Largest size accepted by the enumeration oracle.
pub const BRUTE_FORCE_MAX_N: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct QuenchedInstance {
    pub omega: Vec<f64>,
    pub beta: f64,
    pub h: f64,
    pub lambda_beta: f64,
    /// `charges[i - 1] = βω_i − λ(β) + h`.
    pub charges: Vec<f64>,
    /// `S(0..=N)`.
    pub charge_prefix: Vec<f64>,
}

impl QuenchedInstance {
    pub fn new(law: &DisorderLaw, omega: Vec<f64>, beta: f64, h: f64) -> Result<Self> {
        let lambda_beta = law.log_mgf(beta)?;
        Ok(Self::with_lambda(omega, beta, h, lambda_beta))
    }

    fn with_lambda(omega: Vec<f64>, beta: f64, h: f64, lambda_beta: f64) -> Self {
        let charges: Vec<f64> = omega.iter().map(|w| beta * w - lambda_beta + h).collect();
        let mut charge_prefix = Vec::with_capacity(charges.len() + 1);
        let mut s = 0.0;
        charge_prefix.push(s);
        for c in &charges {
            s += c;
            charge_prefix.push(s);
        }
        QuenchedInstance {
            omega,
            beta,
            h,
            lambda_beta,
            charges,
            charge_prefix,
        }
    }

    /// Instance with IID charges drawn from `law`.
    pub fn sample<R: Rng + ?Sized>(
        law: &DisorderLaw,
        n: usize,
        beta: f64,
        h: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut omega = vec![0.0; n];
        law.fill(rng, 0.0, &mut omega);
        Self::new(law, omega, beta, h)
    }

    /// Disorder-free instance: every charge equals `h`. Its partition function
    /// is the annealed one.
    pub fn annealed(n: usize, h: f64) -> Self {
        Self::with_lambda(vec![0.0; n], 0.0, h, 0.0)
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    /// Same couplings on `ω_{start+1}, …, ω_{start+len}`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self::with_lambda(
            self.omega[start..start + len].to_vec(),
            self.beta,
            self.h,
            self.lambda_beta,
        )
    }

    /// Same disorder at a different `h`.
    pub fn with_h(&self, h: f64) -> Self {
        Self::with_lambda(self.omega.clone(), self.beta, h, self.lambda_beta)
    }

    /// `S(b) − S(a)`.
    pub fn charge_between(&self, a: usize, b: usize) -> f64 {
        self.charge_prefix[b] - self.charge_prefix[a]
    }
}

/// Restriction on the renewal/excursion paths.
#[derive(Debug, Clone, PartialEq)]
pub enum PathConstraint {
    Free,
    /// Blocks `(jℓ, (j+1)ℓ]` with `Σ ω ≥ qℓ` are covered by a single
    /// collecting excursion; all other stretches are single non-collecting
    /// excursions.
    RareStretch {
        q: f64,
        ell: usize,
        block_flags: Vec<bool>,
    },
    /// `rounds` alternations of a non-collecting excursion with length in
    /// `[long_min, long_min²]` and a collecting one with length in
    /// `[1, short_max]`, then a non-collecting excursion to `N`.
    Trimmed {
        long_min: usize,
        short_max: usize,
        rounds: usize,
    },
}

impl PathConstraint {
    /// Flags the complete `ℓ`-blocks of `ω` whose sum is at least `qℓ`.
    pub fn rare_stretch(omega: &[f64], q: f64, ell: usize) -> Result<Self> {
        if ell == 0 {
            return Err(Error::param("ell", "block length must be >= 1"));
        }
        let block_flags = omega
            .chunks_exact(ell)
            .map(|b| b.iter().sum::<f64>() >= q * ell as f64)
            .collect();
        Ok(PathConstraint::RareStretch {
            q,
            ell,
            block_flags,
        })
    }

    pub fn trimmed(long_min: usize, short_max: usize, rounds: usize) -> Result<Self> {
        if long_min == 0 || short_max == 0 || rounds == 0 {
            return Err(Error::param(
                "trimmed",
                format!("M, k, m must be >= 1, got M = {long_min}, k = {short_max}, m = {rounds}"),
            ));
        }
        Ok(PathConstraint::Trimmed {
            long_min,
            short_max,
            rounds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPartition {
    /// Natural log of the partition function; `-inf` for an empty ensemble.
    pub value: f64,
    pub n: usize,
}

/// Dynamic-programming options.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DpOptions {
    /// Cap on excursion lengths. Drops paths, so the result is a lower bound.
    pub window: Option<usize>,
}

/// `log Z_{N,ω}` by the exact `O(N²)` recursion.
pub fn log_z(instance: &QuenchedInstance, kernel: &RenewalKernel) -> LogPartition {
    log_z_with(instance, kernel, DpOptions::default())
}

pub fn log_z_with(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    opts: DpOptions,
) -> LogPartition {
    let n = instance.n();
    LogPartition {
        value: log_z_prefixes_with(instance, kernel, opts)[n],
        n,
    }
}

/// `log Z_{j,ω}` for every `j = 0..=N` (entry 0 is `0`), from one recursion.
pub fn log_z_prefixes(instance: &QuenchedInstance, kernel: &RenewalKernel) -> Vec<f64> {
    log_z_prefixes_with(instance, kernel, DpOptions::default())
}

fn log_z_prefixes_with(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    opts: DpOptions,
) -> Vec<f64> {
    let n = instance.n();
    let ln_k = kernel.ln_k_table(n);
    let s = &instance.charge_prefix;
    let window = opts.window.unwrap_or(n).max(1);
    let mut z = vec![f64::NEG_INFINITY; n + 1];
    z[0] = 0.0;
    let mut terms = Vec::with_capacity(n);
    for t in 1..=n {
        terms.clear();
        let lo = t.saturating_sub(window);
        let mut max = f64::NEG_INFINITY;
        for j in lo..t {
            let v = z[j] + ln_k[t - j] + ln_half_one_plus_exp(s[t] - s[j]);
            max = max.max(v);
            terms.push(v);
        }
        let sum: f64 = terms.iter().map(|v| (v - max).exp()).sum();
        z[t] = max + sum.ln();
    }
    z
}

/// Exhaustive sum over every renewal set and every excursion sign.
pub fn brute_force_log_z(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
) -> Result<LogPartition> {
    let n = instance.n();
    if n == 0 || n > BRUTE_FORCE_MAX_N {
        return Err(Error::Infeasible {
            what: "brute_force_log_z",
            detail: format!("N = {n} outside 1..={BRUTE_FORCE_MAX_N}"),
        });
    }
    let ln_k: Vec<f64> = (0..=n).map(|j| kernel.ln_k(j)).collect();
    let mut acc = LogAccumulator::default();
    enumerate(instance, &ln_k, 0, 0.0, &mut acc);
    Ok(LogPartition {
        value: acc.value(),
        n,
    })
}

fn enumerate(
    instance: &QuenchedInstance,
    ln_k: &[f64],
    from: usize,
    ln_weight: f64,
    acc: &mut LogAccumulator,
) {
    let n = instance.n();
    for to in from + 1..=n {
        let collected: f64 = instance.charges[from..to].iter().sum();
        let base = ln_weight + ln_k[to - from] - std::f64::consts::LN_2;
        for w in [base, base + collected] {
            if to == n {
                acc.push(w);
            } else {
                enumerate(instance, ln_k, to, w, acc);
            }
        }
    }
}

/// Partition function restricted by `constraint`. Empty ensembles give `-inf`.
pub fn log_z_restricted(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    constraint: &PathConstraint,
) -> Result<LogPartition> {
    let n = instance.n();
    let value = match constraint {
        PathConstraint::Free => log_z(instance, kernel).value,
        PathConstraint::RareStretch {
            ell, block_flags, ..
        } => rare_stretch_path(instance, kernel, *ell, block_flags)?,
        PathConstraint::Trimmed {
            long_min,
            short_max,
            rounds,
        } => trimmed_layers(instance, kernel, *long_min, *short_max, *rounds)?.total,
    };
    Ok(LogPartition { value, n })
}

fn rare_stretch_path(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    ell: usize,
    flags: &[bool],
) -> Result<f64> {
    let n = instance.n();
    if ell == 0 || flags.len() > n / ell {
        return Err(Error::param(
            "block_flags",
            format!(
                "{} blocks of length {ell} do not fit in N = {n}",
                flags.len()
            ),
        ));
    }
    let half = std::f64::consts::LN_2;
    let mut value = 0.0;
    let mut pos = 0;
    for (j, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let (start, end) = (j * ell, (j + 1) * ell);
        if start > pos {
            value += kernel.ln_k(start - pos) - half;
        }
        value += kernel.ln_k(ell) - half + instance.charge_between(start, end);
        pos = end;
    }
    if pos < n {
        value += kernel.ln_k(n - pos) - half;
    }
    Ok(value)
}

/// Layered log-masses of the trimmed ensemble: `after_round[i][t]` is the
/// log weight of reaching `t` after `i` long/short pairs, `after_long[i][t]`
/// the log weight of reaching `t` with the long excursion of round `i + 1`.
#[derive(Debug, Clone)]
pub struct TrimmedLayers {
    pub after_round: Vec<Vec<f64>>,
    pub after_long: Vec<Vec<f64>>,
    pub total: f64,
}

/// Upper limit on `rounds · N · (M² + k)` for the trimmed recursion.
pub const TRIMMED_BUDGET: f64 = 5e9;

/// Linear-domain layer with a common log scale.
struct Scaled {
    values: Vec<f64>,
    ln_scale: f64,
}

impl Scaled {
    fn normalize(mut values: Vec<f64>, ln_scale: f64) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
            Scaled {
                values,
                ln_scale: ln_scale + max.ln(),
            }
        } else {
            Scaled {
                values,
                ln_scale: f64::NEG_INFINITY,
            }
        }
    }

    fn logs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.ln() + self.ln_scale).collect()
    }
}

pub fn trimmed_layers(
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    long_min: usize,
    short_max: usize,
    rounds: usize,
) -> Result<TrimmedLayers> {
    let n = instance.n();
    let long_max = long_min
        .checked_mul(long_min)
        .ok_or_else(|| Error::Infeasible {
            what: "trimmed",
            detail: format!("M = {long_min} too large"),
        })?;
    let cost = rounds as f64 * n as f64 * (long_max - long_min + 1 + short_max) as f64;
    if cost > TRIMMED_BUDGET {
        return Err(Error::Infeasible {
            what: "trimmed",
            detail: format!("recursion cost {cost:.3e} exceeds {TRIMMED_BUDGET:.1e}"),
        });
    }
    let half_k: Vec<f64> = (0..=n.max(long_max)).map(|d| 0.5 * kernel.k(d)).collect();
    let s = &instance.charge_prefix;
    let mut start = vec![0.0; n + 1];
    start[0] = 1.0;
    let mut layer = Scaled {
        values: start,
        ln_scale: 0.0,
    };
    let mut after_round = vec![layer.logs()];
    let mut after_long = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut mid = vec![0.0; n + 1];
        for (t, slot) in mid.iter_mut().enumerate().skip(long_min) {
            let lo = t.saturating_sub(long_max);
            let mut acc = 0.0;
            for j in lo..=t - long_min {
                acc += layer.values[j] * half_k[t - j];
            }
            *slot = acc;
        }
        let mid = Scaled::normalize(mid, layer.ln_scale);
        after_long.push(mid.logs());
        let mut next = vec![0.0; n + 1];
        for (u, slot) in next.iter_mut().enumerate().skip(1) {
            let lo = u.saturating_sub(short_max);
            let mut acc = 0.0;
            for j in lo..u {
                if mid.values[j] > 0.0 {
                    acc += mid.values[j] * half_k[u - j] * (s[u] - s[j]).exp();
                }
            }
            *slot = acc;
        }
        layer = Scaled::normalize(next, mid.ln_scale);
        after_round.push(layer.logs());
    }
    let mut acc = 0.0;
    for t in 0..n {
        acc += layer.values[t] * half_k[n - t];
    }
    let total = if acc > 0.0 {
        acc.ln() + layer.ln_scale
    } else {
        f64::NEG_INFINITY
    };
    Ok(TrimmedLayers {
        after_round,
        after_long,
        total,
    })
}

/// Draws the renewal epochs `τ_0, …, τ_{2m}` of one trimmed path with
/// probability proportional to its weight in `layers` (the last excursion
/// to `N` included). Returns `None` for an empty ensemble.
pub fn sample_trimmed_path<R: Rng + ?Sized>(
    layers: &TrimmedLayers,
    instance: &QuenchedInstance,
    kernel: &RenewalKernel,
    long_min: usize,
    short_max: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let n = instance.n();
    let rounds = layers.after_long.len();
    let long_max = long_min * long_min;
    let s = &instance.charge_prefix;
    let mut epochs = vec![0usize; 2 * rounds + 1];
    let last = &layers.after_round[rounds];
    let mut t = pick(rng, (0..n).map(|j| (j, last[j] + kernel.ln_k(n - j))))?;
    for i in (0..rounds).rev() {
        epochs[2 * i + 2] = t;
        let mid = &layers.after_long[i];
        let lo = t.saturating_sub(short_max);
        let s_pick = pick(
            rng,
            (lo..t).map(|j| (j, mid[j] + kernel.ln_k(t - j) + s[t] - s[j])),
        )?;
        epochs[2 * i + 1] = s_pick;
        let prev = &layers.after_round[i];
        let lo = s_pick.saturating_sub(long_max);
        let hi = s_pick.checked_sub(long_min)?;
        t = pick(
            rng,
            (lo..=hi).map(|j| (j, prev[j] + kernel.ln_k(s_pick - j))),
        )?;
    }
    debug_assert_eq!(t, 0);
    Some(epochs)
}

/// Index drawn with probability proportional to `exp(log weight)`.
fn pick<R: Rng + ?Sized>(rng: &mut R, items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let items: Vec<(usize, f64)> = items.filter(|(_, w)| *w > f64::NEG_INFINITY).collect();
    let max = items
        .iter()
        .map(|(_, w)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let total: f64 = items.iter().map(|(_, w)| (w - max).exp()).sum();
    let mut target = rng.random::<f64>() * total;
    for &(i, w) in &items {
        target -= (w - max).exp();
        if target < 0.0 {
            return Some(i);
        }
    }
    items.last().map(|(i, _)| *i)
}

/// `log E Z_{N,ω}`: every excursion factor becomes `(1 + e^{h·length})/2`.
pub fn log_annealed_z(kernel: &RenewalKernel, n: usize, h: f64) -> Result<f64> {
    if n == 0 || n > kernel.support_cap {
        return Err(Error::param(
            "n",
            format!("N = {n} must lie in 1..={}", kernel.support_cap),
        ));
    }
    Ok(log_z(&QuenchedInstance::annealed(n, h), kernel).value)
}

/// Monte Carlo estimate of `E[Z^θ]` as `(mean, stderr)`. `log_z_of` maps a
/// replica index and its private RNG to `log Z` for that disorder sample.
pub fn fractional_moment_mc<F>(
    log_z_of: F,
    theta: f64,
    replicas: usize,
    master_seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(u64, &mut ReplicaRng) -> f64 + Sync,
{
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::param(
            "theta",
            format!("must lie in [0, 1], got {theta}"),
        ));
    }
    if replicas < 100 {
        return Err(Error::param(
            "replicas",
            format!("need at least 100, got {replicas}"),
        ));
    }
    let samples = map_replicas(master_seed, replicas, |i, rng| {
        (theta * log_z_of(i, rng)).exp()
    });
    Ok(mean_and_stderr(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{FamilyKind, InterArrival, SlowlyVaryingFamily};
    use crate::seeding::replica_rng;
    use proptest::prelude::*;

    fn kernel() -> RenewalKernel {
        let f = SlowlyVaryingFamily::new(FamilyKind::Logarithmic, 2.0, 1.0).unwrap();
        RenewalKernel::build(f, 1000).unwrap()
    }

    fn gaussian_instance(n: usize, beta: f64, h: f64, seed: u64) -> QuenchedInstance {
        let law = DisorderLaw::gaussian();
        QuenchedInstance::sample(&law, n, beta, h, &mut replica_rng(seed, 0)).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn prefix_invariants() {
        let inst = gaussian_instance(30, 0.7, 0.1, 1);
        assert_eq!(inst.charge_prefix[0], 0.0);
        for i in 1..=30 {
            let c = 0.7 * inst.omega[i - 1] - 0.7f64.powi(2) / 2.0 + 0.1;
            assert_eq!(inst.charges[i - 1], c);
            assert!((inst.charge_between(i - 1, i) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn single_site() {
        let k = kernel();
        let inst = gaussian_instance(1, 1.0, 0.3, 2);
        let c = inst.charges[0];
        let expected = k.k(1).ln() + ((1.0 + c.exp()) / 2.0).ln();
        assert!((log_z(&inst, &k).value - expected).abs() < 1e-14);
    }

    #[test]
    fn two_sites_written_out() {
        let k = kernel();
        let inst = gaussian_instance(2, 0.8, -0.2, 3);
        let s1 = inst.charge_prefix[1];
        let s2 = inst.charge_prefix[2];
        let z = k.k(2) * (1.0 + s2.exp()) / 2.0
            + k.k(1).powi(2) * (1.0 + s1.exp()) * (1.0 + (s2 - s1).exp()) / 4.0;
        assert!(rel(log_z(&inst, &k).value, z.ln()) < 1e-13);
        assert!(rel(brute_force_log_z(&inst, &k).unwrap().value, z.ln()) < 1e-13);
    }

    #[test]
    fn zero_coupling_gives_renewal_mass() {
        let k = kernel();
        let u = k.renewal_mass(40);
        for seed in 0..3 {
            let inst = gaussian_instance(40, 0.0, 0.0, seed);
            assert!(rel(log_z(&inst, &k).value, u[40].ln()) < 1e-12);
        }
        let inst = gaussian_instance(3, 0.0, 0.0, 9);
        assert!(rel(brute_force_log_z(&inst, &k).unwrap().value, u[3].ln()) < 1e-12);
    }

    #[test]
    fn oracle_matches_at_n12() {
        let k = kernel();
        let inst = gaussian_instance(12, 1.0, 0.3, 7);
        let a = log_z(&inst, &k).value;
        let b = brute_force_log_z(&inst, &k).unwrap().value;
        assert!(rel(a, b) < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn oracle_refuses_large_n() {
        let k = kernel();
        let inst = gaussian_instance(21, 1.0, 0.3, 7);
        assert!(brute_force_log_z(&inst, &k).is_err());
    }

    #[test]
    fn floor_and_monotonicity() {
        let k = kernel();
        let inst = gaussian_instance(300, 1.2, 0.0, 5);
        let mut prev = f64::NEG_INFINITY;
        for i in -10..=10 {
            let z = log_z(&inst.with_h(0.05 * i as f64), &k).value;
            assert!(z >= k.ln_k(300) - std::f64::consts::LN_2);
            assert!(z >= prev);
            prev = z;
        }
    }

    #[test]
    fn convex_in_h() {
        let k = kernel();
        let inst = gaussian_instance(200, 1.0, 0.0, 6);
        let d = 0.02;
        let vals: Vec<f64> = (0..30)
            .map(|i| log_z(&inst.with_h(-0.3 + d * i as f64), &k).value)
            .collect();
        for w in vals.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }
    }

    #[test]
    fn zero_coupling_equals_annealed() {
        let k = kernel();
        for h in [-0.2, 0.0, 0.15] {
            let inst = gaussian_instance(150, 0.0, h, 8);
            let a = log_z(&inst, &k).value;
            let b = log_annealed_z(&k, 150, h).unwrap();
            assert!(rel(a, b) < 1e-12);
        }
    }

    #[test]
    fn annealed_limits() {
        let k = kernel();
        let u = k.renewal_mass(500);
        assert!(rel(log_annealed_z(&k, 500, 0.0).unwrap(), u[500].ln()) < 1e-12);
        let neg = log_annealed_z(&k, 800, -0.2).unwrap();
        assert!(neg <= 0.0 && neg >= k.ln_k(800) - std::f64::consts::LN_2);
        assert!(log_annealed_z(&k, 1001, 0.1).is_err());
    }

    #[test]
    fn windowed_recursion_is_a_lower_bound() {
        let k = kernel();
        let inst = gaussian_instance(200, 1.0, 0.1, 4);
        let full = log_z(&inst, &k).value;
        let cut = log_z_with(&inst, &k, DpOptions { window: Some(50) }).value;
        let wide = log_z_with(&inst, &k, DpOptions { window: Some(200) }).value;
        assert!(cut <= full);
        assert_eq!(wide, full);
    }

    #[test]
    fn rare_stretch_all_blocks_is_forced_product() {
        let k = kernel();
        let inst = gaussian_instance(60, 1.0, 0.2, 10);
        let ell = 6;
        let c = PathConstraint::RareStretch {
            q: 0.0,
            ell,
            block_flags: vec![true; 10],
        };
        let got = log_z_restricted(&inst, &k, &c).unwrap().value;
        let mut z = 1.0;
        for j in 0..10 {
            z *= k.k(ell) / 2.0 * inst.charge_between(j * ell, (j + 1) * ell).exp();
        }
        assert!(rel(got, z.ln()) < 1e-12);
    }

    #[test]
    fn rare_stretch_layout() {
        let k = kernel();
        let inst = gaussian_instance(23, 1.0, 0.0, 12);
        let c = PathConstraint::RareStretch {
            q: 0.0,
            ell: 5,
            block_flags: vec![false, true, false, true],
        };
        // above (0,5], collect (5,10], above (10,15], collect (15,20], above (20,23]
        let z = k.k(5) / 2.0 * k.k(5) / 2.0 * inst.charge_between(5, 10).exp() * k.k(5) / 2.0
            * k.k(5)
            / 2.0
            * inst.charge_between(15, 20).exp()
            * k.k(3)
            / 2.0;
        let got = log_z_restricted(&inst, &k, &c).unwrap().value;
        assert!(rel(got, z.ln()) < 1e-12);
        let none = PathConstraint::rare_stretch(&[-1.0; 23], 0.5, 5).unwrap();
        let single = log_z_restricted(&inst, &k, &none).unwrap().value;
        assert!((single - (k.ln_k(23) - std::f64::consts::LN_2)).abs() < 1e-14);
    }

    #[test]
    fn trimmed_single_round_closed_form() {
        let k = kernel();
        let (m_long, n) = (3usize, 14usize);
        let inst = gaussian_instance(n, 0.9, 0.1, 13);
        let c = PathConstraint::trimmed(m_long, 1, 1).unwrap();
        let mut z = 0.0;
        for t1 in m_long..=m_long * m_long {
            let t2 = t1 + 1;
            if t2 >= n {
                continue;
            }
            z += k.k(t1) / 2.0 * k.k(1) / 2.0 * inst.charge_between(t1, t2).exp() * k.k(n - t2)
                / 2.0;
        }
        let got = log_z_restricted(&inst, &k, &c).unwrap().value;
        assert!(rel(got, z.ln()) < 1e-12);
        // not enough room: empty ensemble
        let tiny = gaussian_instance(4, 0.9, 0.1, 13);
        assert_eq!(
            log_z_restricted(&tiny, &k, &c).unwrap().value,
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn prefixes_match_separate_runs() {
        let k = kernel();
        let inst = gaussian_instance(80, 1.0, 0.2, 21);
        let all = log_z_prefixes(&inst, &k);
        for j in [1usize, 17, 80] {
            let sub = log_z(&inst.window(0, j), &k).value;
            assert!((all[j] - sub).abs() < 1e-12 * sub.abs().max(1.0));
        }
    }

    #[test]
    fn trimmed_path_sampler_follows_weights() {
        // M = 2, k = 1, one round, N = 6: long in [2, 4], short 1, last >= 1
        let k = kernel();
        let inst = QuenchedInstance::annealed(6, 0.3);
        let layers = trimmed_layers(&inst, &k, 2, 1, 1).unwrap();
        let weight = |t1: usize| k.k(t1) * k.k(1) * (0.3f64).exp() * k.k(6 - t1 - 1) / 8.0;
        let total: f64 = (2..=4).map(weight).sum();
        assert!((layers.total - total.ln()).abs() < 1e-12);
        let mut rng = replica_rng(5, 0);
        let mut counts = [0usize; 5];
        let draws = 40_000;
        for _ in 0..draws {
            let e = sample_trimmed_path(&layers, &inst, &k, 2, 1, &mut rng).unwrap();
            assert_eq!(e[0], 0);
            assert_eq!(e[2], e[1] + 1);
            counts[e[1]] += 1;
        }
        for t1 in 2..=4 {
            let p = weight(t1) / total;
            let f = counts[t1] as f64 / draws as f64;
            assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / draws as f64).sqrt());
        }
    }

    #[test]
    fn fractional_moment_edge_cases() {
        let k = kernel();
        let law = DisorderLaw::gaussian();
        let (n, beta, h) = (60, 0.5, 0.05);
        let f = |_: u64, rng: &mut ReplicaRng| {
            log_z(
                &QuenchedInstance::sample(&law, n, beta, h, rng).unwrap(),
                &k,
            )
            .value
        };
        let (m0, s0) = fractional_moment_mc(f, 0.0, 100, 1).unwrap();
        assert_eq!((m0, s0), (1.0, 0.0));
        let (m1, s1) = fractional_moment_mc(f, 1.0, 4000, 2).unwrap();
        let annealed = log_annealed_z(&k, n, h).unwrap().exp();
        assert!(
            (m1 - annealed).abs() <= 4.0 * s1,
            "{m1} ± {s1} vs {annealed}"
        );
        let (mh, sh) = fractional_moment_mc(f, 0.5, 400, 3).unwrap();
        assert!(mh <= annealed.powf(0.5) + 3.0 * sh);
        assert!(fractional_moment_mc(f, 0.5, 99, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn recursion_agrees_with_enumeration(
            seed in 0u64..10_000,
            n in 1usize..=9,
            beta in 0.0f64..2.0,
            h in -0.5f64..0.5,
        ) {
            let k = kernel();
            let inst = gaussian_instance(n, beta, h, seed);
            let a = log_z(&inst, &k).value;
            let b = brute_force_log_z(&inst, &k).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }

        #[test]
        fn restricted_never_exceeds_free(seed in 0u64..10_000, q in -0.5f64..1.0, ell in 1usize..8) {
            let k = kernel();
            let inst = gaussian_instance(40, 1.0, 0.1, seed);
            let c = PathConstraint::rare_stretch(&inst.omega, q, ell).unwrap();
            let free = log_z(&inst, &k).value;
            prop_assert!(log_z_restricted(&inst, &k, &c).unwrap().value <= free + 1e-12);
            let t = PathConstraint::trimmed(3, 2, 2).unwrap();
            prop_assert!(log_z_restricted(&inst, &k, &t).unwrap().value <= free + 1e-12);
        }
    }
}
