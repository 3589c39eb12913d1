//! Closed-form bounds on the free energy near `h = 0`.
//!
//! Every bound is carried as its natural logarithm; exponents of order
//! `-100` and below are routine and would underflow as plain values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::disorder::{DisorderLaw, ExtReal};
use crate::kernel::{FamilyKind, SlowlyVaryingFamily};
use crate::{Error, Result};

/// Default `b` for the general upper bound.
pub const DEFAULT_B: f64 = 0.9;
/// Stand-in for the `o(1)` in the super-logarithmic two-sided estimate.
pub const DEFAULT_DELTA: f64 = 0.05;
/// Offset of the default constants from their admissibility thresholds.
pub const CONSTANT_MARGIN: f64 = 0.1;

pub const CSV_COLUMNS: [&str; 10] = [
    "family",
    "upsilon",
    "c_L",
    "beta",
    "h",
    "log_upper_general",
    "log_upper_sharper",
    "log_lower_rss",
    "log_lower_sublog",
    "flags",
];

fn check_h(h: f64, what: &'static str) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(what, format!("h = {h} must be positive")))
    }
}

/// `log` of `exp(−b q₁(β) h⁻¹ log(L̃(1/h)/L(1/h)))`.
pub fn log_upper_general(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    b: f64,
) -> Result<f64> {
    check_h(h, "upper_general")?;
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::param("b", format!("must lie in (0, 1), got {b}")));
    }
    let q1 = law.q1(beta)?;
    Ok(-b * q1 / h * family.ln_tail_over_l(1.0 / h)?)
}

pub fn upper_general(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    b: f64,
) -> Result<f64> {
    Ok(log_upper_general(family, law, beta, h, b)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharperConstants {
    pub c_minus: f64,
    pub c_plus: f64,
    pub delta: f64,
}

impl SharperConstants {
    /// Thresholds plus/minus [`CONSTANT_MARGIN`]; when the upper threshold
    /// is within the margin of zero, half the threshold is used instead.
    pub fn defaults(family: &SlowlyVaryingFamily) -> Self {
        let u = family.upsilon;
        let (lower_threshold, upper_threshold) = match family.kind {
            FamilyKind::SubLogarithmic => (u + 1.0, u),
            FamilyKind::Logarithmic => (2.5 + u, u - 1.0),
            FamilyKind::SuperLogarithmic => (1.0, 1.0),
        };
        let c_plus = if upper_threshold - CONSTANT_MARGIN > 0.0 {
            upper_threshold - CONSTANT_MARGIN
        } else {
            upper_threshold / 2.0
        };
        SharperConstants {
            c_minus: lower_threshold + CONSTANT_MARGIN,
            c_plus,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharperBounds {
    pub log_lower: Option<f64>,
    pub lower_omitted: Option<String>,
    pub log_upper: f64,
    pub constants: SharperConstants,
}

/// Family-specific two-sided estimate, as logs.
pub fn sharper_bounds(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    constants: SharperConstants,
) -> Result<SharperBounds> {
    check_h(h, "sharper_bounds")?;
    let q1 = law.q1(beta)?;
    let inv = 1.0 / h;
    let (log_lower, lower_omitted, log_upper) = match family.kind {
        FamilyKind::SubLogarithmic => {
            let ll = inv.ln().ln();
            let upper = -constants.c_plus * q1 * inv * ll;
            match law.q2(beta)? {
                ExtReal::Finite(q2) => (Some(-constants.c_minus * q2 * inv * ll), None, upper),
                ExtReal::PositiveInfinity => (
                    None,
                    Some(format!(
                        "q2 is infinite at beta = {beta} (2 beta >= beta_bar)"
                    )),
                    upper,
                ),
            }
        }
        FamilyKind::Logarithmic => {
            let l = inv.ln();
            (
                Some(-constants.c_minus * q1 * inv * l),
                None,
                -constants.c_plus * q1 * inv * l,
            )
        }
        FamilyKind::SuperLogarithmic => {
            let core = super_log_core(family, q1, h);
            (
                Some(-(1.0 + constants.delta) * core),
                None,
                -(1.0 - constants.delta) * core,
            )
        }
    };
    Ok(SharperBounds {
        log_lower,
        lower_omitted,
        log_upper,
        constants,
    })
}

/// `(q₁/h)^{υ/(υ−1)}`, i.e. `(h/q₁)^{−υ/(υ−1)}`.
fn super_log_core(family: &SlowlyVaryingFamily, q1: f64, h: f64) -> f64 {
    let u = family.upsilon;
    (q1 / h).powf(u / (u - 1.0))
}

/// Smallest admissible `b` for the rare-stretch bound.
pub fn rss_threshold(family: &SlowlyVaryingFamily) -> f64 {
    match family.kind {
        FamilyKind::SubLogarithmic => 3.5,
        FamilyKind::Logarithmic => 2.5 + family.upsilon,
        FamilyKind::SuperLogarithmic => 1.0,
    }
}

pub fn default_rss_b(family: &SlowlyVaryingFamily) -> f64 {
    rss_threshold(family) + CONSTANT_MARGIN
}

/// Rare-stretch lower bound (log). In the super-logarithmic family the
/// exponent is `−b (q₁/h)^{υ/(υ−1)}`.
pub fn log_rss_bound(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    b: f64,
) -> Result<f64> {
    check_h(h, "rss_bounds")?;
    let threshold = rss_threshold(family);
    if !(b > threshold) {
        return Err(Error::param(
            "b",
            format!(
                "must exceed the {} threshold {threshold}, got {b}",
                family.kind
            ),
        ));
    }
    let q1 = law.q1(beta)?;
    Ok(match family.kind {
        FamilyKind::SubLogarithmic | FamilyKind::Logarithmic => -b * q1 * (1.0 / h).ln() / h,
        FamilyKind::SuperLogarithmic => -b * super_log_core(family, q1, h),
    })
}

pub fn rss_bounds(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h: f64,
    b: f64,
) -> Result<f64> {
    Ok(log_rss_bound(family, law, beta, h, b)?.exp())
}

/// Lower bound of the trimmed second-moment method (sub-logarithmic family
/// only): `−c q₂ log log(1/h)/h`. `None` when `q₂` is infinite.
pub fn log_lower_sublog(law: &DisorderLaw, beta: f64, h: f64, c: f64) -> Result<Option<f64>> {
    check_h(h, "lower_sublog")?;
    Ok(match law.q2(beta)? {
        ExtReal::Finite(q2) => Some(-c * q2 * (1.0 / h).ln().ln() / h),
        ExtReal::PositiveInfinity => None,
    })
}

/// `log M_h` and, when representable, `M_h` rounded down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleValue {
    pub log_value: f64,
    pub count: Option<u64>,
}

pub fn log_m_h(family: &SlowlyVaryingFamily, h: f64, eps: f64) -> Result<f64> {
    check_h(h, "m_h")?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param(
            "eps",
            format!("must lie in (0, 1), got {eps}"),
        ));
    }
    let u = family.upsilon;
    let lh = h.ln().abs();
    Ok((1.0 - eps)
        * match family.kind {
            FamilyKind::SubLogarithmic => u / h * lh.ln(),
            FamilyKind::Logarithmic => (u - 1.0) / h * lh,
            FamilyKind::SuperLogarithmic => h.powf(-u / (u - 1.0)),
        })
}

pub fn m_h(family: &SlowlyVaryingFamily, h: f64, eps: f64) -> Result<ScaleValue> {
    let log_value = log_m_h(family, h, eps)?;
    let raw = log_value.exp().floor();
    let count = (raw.is_finite() && raw < u64::MAX as f64).then_some(raw as u64);
    Ok(ScaleValue { log_value, count })
}

/// Companion of [`m_h`] with `log M_{h/c} = c ψ(c/h)/h`.
pub fn psi(family: &SlowlyVaryingFamily, u: f64, eps: f64) -> f64 {
    let ups = family.upsilon;
    (1.0 - eps)
        * match family.kind {
            FamilyKind::SubLogarithmic => ups * u.ln().ln(),
            FamilyKind::Logarithmic => (ups - 1.0) * u.ln(),
            FamilyKind::SuperLogarithmic => u.powf(1.0 / (ups - 1.0)),
        }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantsUsed {
    pub b_general: f64,
    pub b_rss: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub delta: f64,
    pub c_sublog: f64,
}

impl ConstantsUsed {
    pub fn defaults(family: &SlowlyVaryingFamily) -> Self {
        let sharp = SharperConstants::defaults(family);
        ConstantsUsed {
            b_general: DEFAULT_B,
            b_rss: default_rss_b(family),
            c_plus: sharp.c_plus,
            c_minus: sharp.c_minus,
            delta: sharp.delta,
            c_sublog: family.upsilon + 1.0 + CONSTANT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub family: SlowlyVaryingFamily,
    pub beta: f64,
    pub h: f64,
    pub log_upper_general: f64,
    pub log_upper_sharper: f64,
    pub log_lower_sharper: Option<f64>,
    pub log_lower_rss: f64,
    pub log_lower_sublog: Option<f64>,
    pub constants_used: ConstantsUsed,
    pub flags: Vec<String>,
}

impl BoundReport {
    pub fn evaluate(
        family: &SlowlyVaryingFamily,
        law: &DisorderLaw,
        beta: f64,
        h: f64,
        constants: ConstantsUsed,
    ) -> Result<Self> {
        let log_upper_general = log_upper_general(family, law, beta, h, constants.b_general)?;
        let sharp = sharper_bounds(
            family,
            law,
            beta,
            h,
            SharperConstants {
                c_minus: constants.c_minus,
                c_plus: constants.c_plus,
                delta: constants.delta,
            },
        )?;
        let log_lower_rss = log_rss_bound(family, law, beta, h, constants.b_rss)?;
        let log_lower_sublog = match family.kind {
            FamilyKind::SubLogarithmic => log_lower_sublog(law, beta, h, constants.c_sublog)?,
            _ => None,
        };
        let mut flags = Vec::new();
        if log_lower_rss > log_upper_general {
            flags.push("rss-above-general".to_string());
        }
        if let Some(lo) = sharp.log_lower {
            if lo > sharp.log_upper {
                flags.push("sharper-crossed".to_string());
            }
        }
        if sharp.lower_omitted.is_some() {
            flags.push("lower-omitted-q2-infinite".to_string());
        }
        let all = [
            Some(log_upper_general),
            Some(sharp.log_upper),
            Some(log_lower_rss),
            log_lower_sublog,
        ];
        if all.iter().flatten().any(|v| *v > 0.0) {
            flags.push("exceeds-one".to_string());
        }
        Ok(BoundReport {
            family: *family,
            beta,
            h,
            log_upper_general,
            log_upper_sharper: sharp.log_upper,
            log_lower_sharper: sharp.log_lower,
            log_lower_rss,
            log_lower_sublog,
            constants_used: constants,
            flags,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub rows: Vec<BoundReport>,
    /// Largest grid `h` at and below which `lower_rss ≤ upper_general` holds
    /// on every grid point.
    pub h_star: Option<f64>,
}

/// Bounds over a descending `h` grid.
pub fn bound_table(
    family: &SlowlyVaryingFamily,
    law: &DisorderLaw,
    beta: f64,
    h_grid: &[f64],
    constants: ConstantsUsed,
) -> Result<BoundTable> {
    if h_grid.is_empty() {
        return Err(Error::param("h_grid", "must be nonempty"));
    }
    if h_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("h_grid", "must be strictly descending"));
    }
    let rows = h_grid
        .iter()
        .map(|&h| BoundReport::evaluate(family, law, beta, h, constants))
        .collect::<Result<Vec<_>>>()?;
    let mut h_star = None;
    for row in rows.iter().rev() {
        if row.log_lower_rss <= row.log_upper_general {
            h_star = Some(row.h);
        } else {
            break;
        }
    }
    Ok(BoundTable { rows, h_star })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the rows in the fixed column order of [`CSV_COLUMNS`].
pub fn write_csv<W: Write>(out: &mut W, rows: &[BoundReport]) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.family.kind,
            r.family.upsilon,
            r.family.c_l,
            r.beta,
            r.h,
            r.log_upper_general,
            r.log_upper_sharper,
            r.log_lower_rss,
            opt(r.log_lower_sublog),
            r.flags.join(";")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fam(kind: FamilyKind) -> SlowlyVaryingFamily {
        SlowlyVaryingFamily::new(kind, 2.0, 1.0).unwrap()
    }

    fn grid() -> Vec<f64> {
        (0..8).map(|j| 0.2 * 2f64.powi(-j)).collect()
    }

    #[test]
    fn general_bound_plug_in() {
        let f = fam(FamilyKind::Logarithmic);
        let law = DisorderLaw::gaussian();
        let got = log_upper_general(&f, &law, 1.0, 0.01, 0.9).unwrap();
        let ratio = f.tail_function(100.0).unwrap() / f.l(100.0);
        let expected = -0.9 * 0.5 * 100.0 * ratio.ln();
        assert!((got - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn general_bound_tends_to_one_as_b_vanishes() {
        let f = fam(FamilyKind::SubLogarithmic);
        let law = DisorderLaw::gaussian();
        let v = upper_general(&f, &law, 1.0, 0.05, 1e-9).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        assert!(log_upper_general(&f, &law, 1.0, 0.05, 1.0).is_err());
    }

    #[test]
    fn tail_ratio_asymptotics() {
        // log(L̃/L) / log log x → 1, or (υ−1)/υ in the super-logarithmic family;
        // the sub-logarithmic correction is log log log x, so only monotone
        // approach is checked there
        for (kind, target) in [
            (FamilyKind::SubLogarithmic, 1.0),
            (FamilyKind::Logarithmic, 1.0),
            (FamilyKind::SuperLogarithmic, 0.5),
        ] {
            let mut prev = f64::INFINITY;
            for x in [1e30f64, 1e100, 1e300] {
                let gap = (fam(kind).ln_tail_over_l(x).unwrap() / x.ln().ln() - target).abs();
                assert!(gap <= prev + 1e-9, "{kind}");
                prev = gap;
            }
            assert!(prev < 0.3, "{kind}: {prev}");
        }
        // exact form for the sub-logarithmic family, υ = 2:
        // L̃/L = log x · log log x
        let x = 1e40f64;
        let exact = (x.ln() * x.ln().ln()).ln();
        assert!((fam(FamilyKind::SubLogarithmic).ln_tail_over_l(x).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn super_log_sharper_exponent() {
        let f = fam(FamilyKind::SuperLogarithmic);
        let law = DisorderLaw::gaussian();
        // q1(1) = 1/2, h = 0.05: (h/q1)^{-2} = 100
        let c = SharperConstants {
            c_minus: 0.0,
            c_plus: 0.0,
            delta: 0.0,
        };
        let s = sharper_bounds(&f, &law, 1.0, 0.05, c).unwrap();
        assert!((s.log_upper + 100.0).abs() < 1e-10);
        assert!((s.log_lower.unwrap() + 100.0).abs() < 1e-10);
    }

    #[test]
    fn sharper_lower_omitted_with_infinite_q2() {
        let f = fam(FamilyKind::SubLogarithmic);
        let law = DisorderLaw::binary().with_beta_cap(1.0).unwrap();
        let s = sharper_bounds(&f, &law, 0.9, 0.01, SharperConstants::defaults(&f)).unwrap();
        assert!(s.log_lower.is_none());
        assert!(s.lower_omitted.is_some());
        assert!(log_lower_sublog(&law, 0.9, 0.01, 3.1).unwrap().is_none());
    }

    #[test]
    fn default_constants_follow_rules() {
        let c = SharperConstants::defaults(&fam(FamilyKind::Logarithmic));
        assert!((c.c_minus - 4.6).abs() < 1e-12 && (c.c_plus - 0.9).abs() < 1e-12);
        let narrow = SlowlyVaryingFamily::new(FamilyKind::Logarithmic, 1.05, 1.0).unwrap();
        let c = SharperConstants::defaults(&narrow);
        assert!(c.c_plus > 0.0 && c.c_plus < 0.05 + 1e-12);
    }

    #[test]
    fn rss_forms_and_thresholds() {
        let law = DisorderLaw::gaussian();
        let f = fam(FamilyKind::Logarithmic);
        let h = 0.01;
        let v = log_rss_bound(&f, &law, 1.0, h, 4.55).unwrap();
        assert!((v - (-4.55 * 0.5 * (1.0 / h).ln() / h)).abs() < 1e-9);
        let err = log_rss_bound(&f, &law, 1.0, h, 4.5).unwrap_err();
        assert!(err.to_string().contains("4.5"));
        let lo = log_rss_bound(&f, &law, 1.0, h, 4.6).unwrap();
        let hi = log_rss_bound(&f, &law, 1.0, h, 4.7).unwrap();
        assert!(hi < lo);
        let s = fam(FamilyKind::SuperLogarithmic);
        let v = log_rss_bound(&s, &law, 1.0, 0.05, 1.1).unwrap();
        assert!((v + 110.0).abs() < 1e-9);
    }

    #[test]
    fn scale_and_its_companion_agree() {
        let c3 = 0.4;
        for kind in FamilyKind::ALL {
            let f = fam(kind);
            for h in [0.01, 0.02, 0.05] {
                let direct = log_m_h(&f, h / c3, 0.1).unwrap();
                let via = c3 * psi(&f, c3 / h, 0.1) / h;
                assert!((direct - via).abs() <= 1e-12 * direct.abs(), "{kind} {h}");
            }
        }
        let s = fam(FamilyKind::SuperLogarithmic);
        assert!((log_m_h(&s, 0.1, 0.2).unwrap() - 0.8 * 100.0).abs() < 1e-9);
        assert_eq!(m_h(&s, 0.1, 1.0 - 1e-15).unwrap().count, Some(1));
        assert_eq!(m_h(&s, 1e-3, 0.1).unwrap().count, None);
    }

    #[test]
    fn table_orders_bounds_below_threshold() {
        let law = DisorderLaw::gaussian();
        for kind in FamilyKind::ALL {
            let f = fam(kind);
            let t = bound_table(&f, &law, 1.0, &grid(), ConstantsUsed::defaults(&f)).unwrap();
            let h_star = t.h_star.expect("ordering holds somewhere");
            assert!(h_star > *grid().last().unwrap());
            for r in &t.rows {
                assert!(r.log_upper_general < 0.0 && r.log_lower_rss < 0.0);
            }
            for w in t.rows.windows(2) {
                assert!(w[1].log_upper_general < w[0].log_upper_general);
            }
        }
    }

    #[test]
    fn table_rejects_bad_grids() {
        let f = fam(FamilyKind::Logarithmic);
        let law = DisorderLaw::gaussian();
        let c = ConstantsUsed::defaults(&f);
        assert!(bound_table(&f, &law, 1.0, &[], c).is_err());
        assert!(bound_table(&f, &law, 1.0, &[0.01, 0.02], c).is_err());
    }

    #[test]
    fn csv_schema() {
        let f = fam(FamilyKind::SubLogarithmic);
        let law = DisorderLaw::gaussian();
        let t = bound_table(&f, &law, 1.0, &grid(), ConstantsUsed::defaults(&f)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &t.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        for line in lines {
            assert_eq!(line.split(',').count(), CSV_COLUMNS.len());
        }
    }

    proptest! {
        #[test]
        fn logs_match_their_formulas(beta in 0.05f64..2.0, h in 0.001f64..0.3) {
            let law = DisorderLaw::gaussian();
            let q1 = beta * beta / 2.0;
            let f = fam(FamilyKind::Logarithmic);
            let r = log_rss_bound(&f, &law, beta, h, 4.6).unwrap();
            let sym = -4.6 * q1 * (1.0 / h).ln() / h;
            prop_assert!((r - sym).abs() <= 1e-12 * sym.abs());
            let s = fam(FamilyKind::SuperLogarithmic);
            let r = log_rss_bound(&s, &law, beta, h, 1.1).unwrap();
            let sym = -1.1 * (q1 / h).powi(2);
            prop_assert!((r - sym).abs() <= 1e-12 * sym.abs());
        }
    }
}
