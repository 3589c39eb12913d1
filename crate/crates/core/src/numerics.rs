//! Small numerical kernels shared across modules: log-domain accumulation,
//! compensated and pairwise summation, adaptive Gauss-Kronrod quadrature and
//! log tail probabilities of the normal and binomial laws.

use std::f64::consts::{LN_2, PI};

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log((1 + e^x) / 2)`, the log-weight of an excursion averaged over its sign.
#[inline]
pub fn ln_half_one_plus_exp(x: f64) -> f64 {
    softplus(x) - LN_2
}

/// Stable `log(sum(exp(v)))`; `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut acc = KahanSum::default();
    for &v in values {
        acc.add((v - max).exp());
    }
    max + acc.value().ln()
}

/// Streaming log-sum-exp with a running maximum and compensated mantissa.
#[derive(Debug, Clone, Copy)]
pub struct LogAccumulator {
    max: f64,
    scaled: KahanSum,
}

impl Default for LogAccumulator {
    fn default() -> Self {
        LogAccumulator {
            max: f64::NEG_INFINITY,
            scaled: KahanSum::default(),
        }
    }
}

impl LogAccumulator {
    pub fn push(&mut self, log_value: f64) {
        if log_value == f64::NEG_INFINITY {
            return;
        }
        if log_value > self.max {
            let rescale = (self.max - log_value).exp();
            self.scaled = self.scaled.scaled(rescale);
            self.max = log_value;
        }
        self.scaled.add((log_value - self.max).exp());
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.value().ln()
        }
    }
}

/// Kahan-Babuska (Neumaier) compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    fn scaled(self, factor: f64) -> Self {
        KahanSum {
            sum: self.sum * factor,
            comp: self.comp * factor,
        }
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Pairwise summation over a fixed binary split of the slice; the result
/// depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean and standard error of the mean (pairwise-summed).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

// Gauss-Kronrod (7, 15) nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]`, bisecting the
/// interval with the largest error estimate until the total estimated error
/// drops below `max(abs_tol, rel_tol * |integral|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (v, e) = gk15(&f, lo, hi);
    let mut pieces = vec![(lo, hi, v, e)];
    for _ in 0..2000 {
        let total: f64 = pieces.iter().map(|p| p.2).sum();
        let err: f64 = pieces.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (l, r, _, _) = pieces.swap_remove(idx);
        let m = 0.5 * (l + r);
        let (v1, e1) = gk15(&f, l, m);
        let (v2, e2) = gk15(&f, m, r);
        pieces.push((l, m, v1, e1));
        pieces.push((m, r, v2, e2));
    }
    let total: KahanSum = pieces.iter().map(|p| p.2).collect();
    sign * total.value()
}

/// `log P(Z >= z)` for a standard normal `Z`, accurate far into the tail.
pub fn ln_normal_sf(z: f64) -> f64 {
    if z < 25.0 {
        (0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills ratio continued fraction, converged to machine precision for z >= 25.
        let mut frac = z;
        for k in (1..=60).rev() {
            frac = z + k as f64 / frac;
        }
        -0.5 * z * z - 0.5 * (2.0 * PI).ln() - frac.ln()
    }
}

/// `log P(B >= k)` for `B ~ Binomial(n, p)`.
pub fn ln_binomial_sf(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k > n {
        return f64::NEG_INFINITY;
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let nf = n as f64;
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let ln_n_fact = ln_gamma(nf + 1.0);
    let mut acc = LogAccumulator::default();
    for j in k..=n {
        let jf = j as f64;
        let term =
            ln_n_fact - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0) + jf * ln_p + (nf - jf) * ln_q;
        acc.push(term);
        // terms decrease past the mode; stop once they no longer register
        if jf > nf * p + 1.0 && term < acc.value() - 40.0 {
            break;
        }
    }
    acc.value().min(0.0)
}
