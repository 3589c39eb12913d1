//! Charge distributions: cumulant function `λ(β) = log E e^{βω}`, the Cramér
//! rate function `Σ(x) = sup_y [xy − λ(y)]`, exponential tilting and seeded
//! samplers.
//!
//! Both built-in laws are centred with unit variance and have `λ` finite on
//! the whole real line. A finite supremum `β̄` of the finite-`λ` domain can be
//! injected with [`DisorderLaw::with_beta_cap`] to exercise the branches where
//! `q₂(β) = λ(2β) − 2λ(β)` is infinite.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{ln_binomial_sf, ln_normal_sf};
use crate::seeding::{replica_rng, ReplicaRng};
use crate::{Error, Result};

/// A real number or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtReal {
    Finite(f64),
    PositiveInfinity,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::PositiveInfinity => None,
        }
    }

    /// `self > x` with `+∞` above every real.
    pub fn exceeds(self, x: f64) -> bool {
        match self {
            ExtReal::Finite(v) => v > x,
            ExtReal::PositiveInfinity => true,
        }
    }
}

impl std::fmt::Display for ExtReal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::PositiveInfinity => write!(f, "+inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    StandardGaussian,
    SymmetricBinary,
}

impl std::str::FromStr for LawKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "standard-gaussian" | "normal" => Ok(LawKind::StandardGaussian),
            "binary" | "symmetric-binary" | "rademacher" => Ok(LawKind::SymmetricBinary),
            other => Err(Error::param(
                "law",
                format!("unknown law `{other}` (expected gaussian or binary)"),
            )),
        }
    }
}

impl std::fmt::Display for LawKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LawKind::StandardGaussian => "gaussian",
            LawKind::SymmetricBinary => "binary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderLaw {
    pub kind: LawKind,
    pub beta_bar: ExtReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltParams {
    pub beta: f64,
}

/// Value of the rate function together with its maximiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFunctionEval {
    pub x: f64,
    pub sigma: f64,
    pub argmax_y: f64,
}

const Y_TOL: f64 = 1e-12;

impl DisorderLaw {
    pub fn new(kind: LawKind) -> Self {
        DisorderLaw {
            kind,
            beta_bar: ExtReal::PositiveInfinity,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(LawKind::StandardGaussian)
    }

    pub fn binary() -> Self {
        Self::new(LawKind::SymmetricBinary)
    }

    /// Same law with the finite-`λ` domain artificially cut at `cap`.
    pub fn with_beta_cap(self, cap: f64) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::param(
                "beta_cap",
                format!("must be positive and finite, got {cap}"),
            ));
        }
        Ok(DisorderLaw {
            beta_bar: ExtReal::Finite(cap),
            ..self
        })
    }

    fn check_beta(&self, beta: f64, what: &'static str) -> Result<()> {
        if !beta.is_finite() {
            return Err(Error::domain(what, format!("beta = {beta} is not finite")));
        }
        if !self.beta_bar.exceeds(beta.abs()) {
            return Err(Error::domain(
                what,
                format!(
                    "|beta| = {} is not below beta_bar = {}",
                    beta.abs(),
                    self.beta_bar
                ),
            ));
        }
        Ok(())
    }

    /// `λ(β) = log E exp(βω₁)`.
    pub fn log_mgf(&self, beta: f64) -> Result<f64> {
        self.check_beta(beta, "log_mgf")?;
        Ok(self.lambda_unchecked(beta))
    }

    fn lambda_unchecked(&self, beta: f64) -> f64 {
        match self.kind {
            LawKind::StandardGaussian => 0.5 * beta * beta,
            LawKind::SymmetricBinary => {
                // log cosh b = |b| + log(1 + e^{-2|b|}) - log 2
                let b = beta.abs();
                b + (-2.0 * b).exp().ln_1p() - LN_2
            }
        }
    }

    /// `λ'(β)`, the mean of `ω₁` under the tilted law `P_β`.
    pub fn log_mgf_derivative(&self, beta: f64) -> Result<f64> {
        self.check_beta(beta, "log_mgf_derivative")?;
        Ok(self.dlambda_unchecked(beta))
    }

    fn dlambda_unchecked(&self, beta: f64) -> f64 {
        match self.kind {
            LawKind::StandardGaussian => beta,
            LawKind::SymmetricBinary => beta.tanh(),
        }
    }

    fn d2lambda_unchecked(&self, beta: f64) -> f64 {
        match self.kind {
            LawKind::StandardGaussian => 1.0,
            LawKind::SymmetricBinary => {
                let c = beta.cosh();
                1.0 / (c * c)
            }
        }
    }

    /// `q₁(β) = βλ'(β) − λ(β)`.
    pub fn q1(&self, beta: f64) -> Result<f64> {
        self.check_beta(beta, "q1")?;
        Ok(beta * self.dlambda_unchecked(beta) - self.lambda_unchecked(beta))
    }

    /// `q₂(β) = λ(2β) − 2λ(β)`, infinite once `2β ≥ β̄`.
    pub fn q2(&self, beta: f64) -> Result<ExtReal> {
        self.check_beta(beta, "q2")?;
        if !self.beta_bar.exceeds(2.0 * beta.abs()) {
            return Ok(ExtReal::PositiveInfinity);
        }
        Ok(ExtReal::Finite(
            self.lambda_unchecked(2.0 * beta) - 2.0 * self.lambda_unchecked(beta),
        ))
    }

    /// `C = lim_{β↗β̄} λ'(β)`: the right end of the domain of `Σ`.
    pub fn derivative_limit(&self) -> ExtReal {
        match (self.kind, self.beta_bar) {
            (_, ExtReal::Finite(cap)) => ExtReal::Finite(self.dlambda_unchecked(cap)),
            (LawKind::StandardGaussian, ExtReal::PositiveInfinity) => ExtReal::PositiveInfinity,
            (LawKind::SymmetricBinary, ExtReal::PositiveInfinity) => ExtReal::Finite(1.0),
        }
    }

    /// `Σ(x) = sup_y [xy − λ(y)]` for `x ∈ [0, C)`, solved numerically.
    ///
    /// Safeguarded Newton on `λ'(y) = x` inside a geometrically grown bracket;
    /// golden-section search on `xy − λ(y)` if Newton does not settle.
    pub fn rate_function(&self, x: f64) -> Result<RateFunctionEval> {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::domain(
                "rate_function",
                format!("x = {x} must be finite and >= 0"),
            ));
        }
        if !self.derivative_limit().exceeds(x) {
            return Err(Error::domain(
                "rate_function",
                format!("x = {x} is not below C = {}", self.derivative_limit()),
            ));
        }
        if x == 0.0 {
            return Ok(RateFunctionEval {
                x,
                sigma: 0.0,
                argmax_y: 0.0,
            });
        }
        let (lo, hi) = self.bracket(x);
        let y = self
            .newton(x, lo, hi)
            .unwrap_or_else(|| self.golden_section(x, lo, hi));
        let sigma = (x * y - self.lambda_unchecked(y)).max(0.0);
        Ok(RateFunctionEval {
            x,
            sigma,
            argmax_y: y,
        })
    }

    fn bracket(&self, x: f64) -> (f64, f64) {
        let mut hi = 1.0;
        loop {
            if let ExtReal::Finite(cap) = self.beta_bar {
                if hi >= cap {
                    hi = cap * (1.0 - 1e-15);
                    return (0.0, hi);
                }
            }
            if self.dlambda_unchecked(hi) >= x {
                return (0.0, hi);
            }
            hi *= 2.0;
        }
    }

    fn newton(&self, x: f64, mut lo: f64, mut hi: f64) -> Option<f64> {
        let mut y = 0.5 * (lo + hi);
        for _ in 0..200 {
            let g = self.dlambda_unchecked(y) - x;
            if g > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let curv = self.d2lambda_unchecked(y);
            let mut next = y - g / curv;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - y).abs() <= Y_TOL * y.abs().max(1.0) || hi - lo <= Y_TOL * hi.max(1.0) {
                return Some(next);
            }
            y = next;
        }
        None
    }

    fn golden_section(&self, x: f64, mut a: f64, mut b: f64) -> f64 {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let f = |y: f64| x * y - self.lambda_unchecked(y);
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        while (b - a).abs() > Y_TOL * b.abs().max(1.0) {
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - inv_phi * (b - a);
            d = a + inv_phi * (b - a);
        }
        0.5 * (a + b)
    }

    /// Probability that a `+1` is drawn under the tilt `β` (binary law).
    fn binary_plus_probability(beta: f64) -> f64 {
        1.0 / (1.0 + (-2.0 * beta).exp())
    }

    /// One draw from the law tilted by `beta` (`beta = 0` is the law itself).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, beta: f64) -> f64 {
        match self.kind {
            LawKind::StandardGaussian => {
                let z: f64 = rng.sample(StandardNormal);
                z + beta
            }
            LawKind::SymmetricBinary => {
                if rng.random_bool(Self::binary_plus_probability(beta)) {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, beta: f64, out: &mut [f64]) {
        for slot in out.iter_mut() {
            *slot = self.draw(rng, beta);
        }
    }

    /// `n` IID draws from `P`, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.sample_tilted(TiltParams { beta: 0.0 }, n, seed)
            .expect("zero tilt is always admissible")
    }

    /// `n` IID draws from `P_β(dω) = e^{βω − λ(β)} P(dω)`.
    pub fn sample_tilted(&self, tilt: TiltParams, n: usize, seed: u64) -> Result<Vec<f64>> {
        self.check_beta(tilt.beta, "sample_tilted")?;
        let mut rng: ReplicaRng = replica_rng(seed, 0);
        let mut out = vec![0.0; n];
        self.fill(&mut rng, tilt.beta, &mut out);
        Ok(out)
    }

    /// `log P_β(ω₁ + … + ω_ℓ ≥ xℓ)`, exact for both laws.
    pub fn ln_block_tail(&self, tilt_beta: f64, ell: u64, x: f64) -> Result<f64> {
        self.check_beta(tilt_beta, "ln_block_tail")?;
        if ell == 0 {
            return Err(Error::param("ell", "block length must be >= 1"));
        }
        let l = ell as f64;
        Ok(match self.kind {
            LawKind::StandardGaussian => ln_normal_sf((x - tilt_beta) * l.sqrt()),
            LawKind::SymmetricBinary => {
                let k = binary_threshold(ell, x);
                if k > ell {
                    f64::NEG_INFINITY
                } else {
                    ln_binomial_sf(ell, k, Self::binary_plus_probability(tilt_beta))
                }
            }
        })
    }

    /// `log P_β(ω₁ + … + ω_ℓ < xℓ)`, the complement of [`Self::ln_block_tail`].
    pub fn ln_block_lower_tail(&self, tilt_beta: f64, ell: u64, x: f64) -> Result<f64> {
        self.check_beta(tilt_beta, "ln_block_lower_tail")?;
        if ell == 0 {
            return Err(Error::param("ell", "block length must be >= 1"));
        }
        let l = ell as f64;
        Ok(match self.kind {
            LawKind::StandardGaussian => ln_normal_sf(-(x - tilt_beta) * l.sqrt()),
            LawKind::SymmetricBinary => {
                let k = binary_threshold(ell, x);
                if k == 0 {
                    f64::NEG_INFINITY
                } else if k > ell {
                    0.0
                } else {
                    // B <= k-1  <=>  ell - B >= ell - k + 1, with ell - B ~ Bin(ell, 1 - p)
                    let p = Self::binary_plus_probability(tilt_beta);
                    ln_binomial_sf(ell, ell - k + 1, 1.0 - p)
                }
            }
        })
    }
}

/// Smallest number of `+1` draws among `ell` for which the block sum reaches `x·ell`.
fn binary_threshold(ell: u64, x: f64) -> u64 {
    let target = 0.5 * ell as f64 * (1.0 + x);
    let rounded = target.round();
    let k = if (target - rounded).abs() <= 1e-9 * target.abs().max(1.0) {
        rounded
    } else {
        target.ceil()
    };
    k.max(0.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_entropy_rate(x: f64) -> f64 {
        0.5 * (1.0 + x) * (1.0 + x).ln() + 0.5 * (1.0 - x) * (1.0 - x).ln()
    }

    #[test]
    fn closed_form_cumulants() {
        let g = DisorderLaw::gaussian();
        assert_eq!(g.log_mgf(0.5).unwrap(), 0.125);
        assert_eq!(g.log_mgf(0.0).unwrap(), 0.0);
        assert_eq!(DisorderLaw::binary().log_mgf(0.0).unwrap(), 0.0);
        let b = DisorderLaw::binary();
        assert!((b.log_mgf(1.0).unwrap() - 1f64.cosh().ln()).abs() < 1e-15);
        for beta in [0.1, 0.7, 1.3] {
            assert!((g.q1(beta).unwrap() - beta * beta / 2.0).abs() < 1e-15);
            assert_eq!(g.q2(beta).unwrap(), ExtReal::Finite(beta * beta));
        }
        let q1 = b.q1(1.0).unwrap();
        assert!((q1 - (1f64.tanh() - 1f64.cosh().ln())).abs() < 1e-15);
    }

    #[test]
    fn binary_q1_matches_numeric_derivative() {
        let b = DisorderLaw::binary();
        let step = 1e-5;
        let d = (b.log_mgf(1.0 + step).unwrap() - b.log_mgf(1.0 - step).unwrap()) / (2.0 * step);
        let q1_numeric = d - b.log_mgf(1.0).unwrap();
        assert!((q1_numeric - b.q1(1.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn small_beta_expansion() {
        for law in [DisorderLaw::gaussian(), DisorderLaw::binary()] {
            for beta in [1e-2, 5e-3, 2e-3] {
                let q1 = law.q1(beta).unwrap();
                let q2 = law.q2(beta).unwrap().finite().unwrap();
                assert!((q1 - beta * beta / 2.0).abs() <= beta.powi(3));
                assert!((q2 - beta * beta).abs() <= beta.powi(3));
            }
        }
    }

    #[test]
    fn beta_domain_is_enforced() {
        let capped = DisorderLaw::binary().with_beta_cap(1.0).unwrap();
        assert!(capped.log_mgf(1.0).is_err());
        assert!(capped.log_mgf(0.99).is_ok());
        assert_eq!(capped.q2(0.6).unwrap(), ExtReal::PositiveInfinity);
        assert!(capped.q2(0.4).unwrap().is_finite());
        assert!(DisorderLaw::gaussian().log_mgf(f64::NAN).is_err());
    }

    #[test]
    fn rate_function_closed_forms() {
        let g = DisorderLaw::gaussian();
        for x in [0.0, 0.3, 1.0, 4.0, 25.0] {
            let r = g.rate_function(x).unwrap();
            assert!((r.sigma - x * x / 2.0).abs() < 1e-10, "x={x}");
        }
        let b = DisorderLaw::binary();
        let r = b.rate_function(0.5).unwrap();
        let expected = (1.5 / 2.0) * 1.5f64.ln() + (0.5 / 2.0) * 0.5f64.ln();
        assert!((r.sigma - expected).abs() < 1e-10);
        for x in [0.05, 0.9, 0.999] {
            let r = b.rate_function(x).unwrap();
            assert!((r.sigma - binary_entropy_rate(x)).abs() < 1e-10, "x={x}");
        }
        assert_eq!(b.rate_function(0.0).unwrap().sigma, 0.0);
    }

    #[test]
    fn binary_rate_function_agrees_with_grid_search() {
        let b = DisorderLaw::binary();
        let x = 0.5;
        let best = (0..200_000)
            .map(|i| i as f64 * 1e-5)
            .map(|y| x * y - b.log_mgf(y).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((b.rate_function(x).unwrap().sigma - best).abs() < 1e-9);
    }

    #[test]
    fn rate_function_domain() {
        assert!(DisorderLaw::binary().rate_function(1.0).is_err());
        assert!(DisorderLaw::gaussian().rate_function(-0.1).is_err());
        let capped = DisorderLaw::gaussian().with_beta_cap(2.0).unwrap();
        assert!(capped.rate_function(2.5).is_err());
        assert!((capped.rate_function(1.5).unwrap().sigma - 1.125).abs() < 1e-10);
    }

    #[test]
    fn samplers_are_deterministic() {
        let g = DisorderLaw::gaussian();
        assert_eq!(g.sample(100, 9), g.sample(100, 9));
        assert_ne!(g.sample(100, 9), g.sample(100, 10));
        let b = DisorderLaw::binary();
        let plain = b.sample(1000, 3);
        let tilted = b.sample_tilted(TiltParams { beta: 0.0 }, 1000, 3).unwrap();
        assert_eq!(plain, tilted);
    }

    #[test]
    fn tilted_binary_frequency() {
        let b = DisorderLaw::binary();
        let beta = 0.4;
        let n = 200_000;
        let v = b.sample_tilted(TiltParams { beta }, n, 5).unwrap();
        let freq = v.iter().filter(|&&w| w > 0.0).count() as f64 / n as f64;
        let p = beta.exp() / (2.0 * beta.cosh());
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se);
    }

    #[test]
    fn block_tails() {
        let g = DisorderLaw::gaussian();
        // P(N(0, 25) >= 25) = P(Z >= 5)
        let v = g.ln_block_tail(0.0, 25, 1.0).unwrap().exp();
        assert!((v / 2.866_515_718_791_939e-7 - 1.0).abs() < 1e-10);
        let up = g.ln_block_tail(0.3, 10, 0.2).unwrap().exp();
        let down = g.ln_block_lower_tail(0.3, 10, 0.2).unwrap().exp();
        assert!((up + down - 1.0).abs() < 1e-14);

        let b = DisorderLaw::binary();
        // sum of 4 signs >= 2  <=>  at least 3 plus signs
        let v = b.ln_block_tail(0.0, 4, 0.5).unwrap().exp();
        assert!((v - 5.0 / 16.0).abs() < 1e-14);
        let w = b.ln_block_lower_tail(0.0, 4, 0.5).unwrap().exp();
        assert!((v + w - 1.0).abs() < 1e-14);
        assert_eq!(b.ln_block_tail(0.0, 4, 1.5).unwrap(), f64::NEG_INFINITY);
    }

    proptest::proptest! {
        #[test]
        fn rate_function_dominates_every_tangent(
            binary in proptest::bool::ANY,
            x in 0.0f64..0.95,
            y in -3.0f64..3.0,
        ) {
            let law = if binary { DisorderLaw::binary() } else { DisorderLaw::gaussian() };
            let sigma = law.rate_function(x).unwrap().sigma;
            let tangent = x * y - law.log_mgf(y).unwrap();
            proptest::prop_assert!(sigma >= tangent - 1e-9);
        }
    }
}
