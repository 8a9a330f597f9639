//! Transfer-function algebra and partial-fraction (modal) decomposition.
//!
//! A strictly proper rational function `H(s) = N(s)/D(s)` is expanded as
//!
//! ```text
//! H(s) = Σ_i Σ_{j=1..k_i} r_ij / (s - p_i)^j
//! ```
//!
//! where `p_i` are the roots of `D` with multiplicity `k_i`. Simple poles use
//! `r_i = N(p_i) / D'(p_i)`. For a repeated pole the residues are the Taylor
//! coefficients of `(s - p_i)^k_i H(s)` at `p_i`, obtained from the deflated
//! denominator by exact polynomial shifting and series division.
//!
//! ```
//! use rcmodal::modal::{decompose, Polynomial, TransferFunction};
//!
//! // 1 / ((s+1)(s+2))
//! let h = TransferFunction::new(
//!     Polynomial::new(vec![1.0]).unwrap(),
//!     Polynomial::new(vec![2.0, 3.0, 1.0]).unwrap(),
//! ).unwrap();
//! let d = decompose(&h).unwrap();
//! assert_eq!(d.modes.len(), 2);
//! assert!((d.modes[0].residue.re - 1.0).abs() < 1e-12);
//! assert!((d.modes[1].residue.re + 1.0).abs() < 1e-12);
//! ```

mod poly;
mod roots;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use poly::Polynomial;
pub use roots::{find_poles, Root, ABERTH_MAX_ITER, MULTIPLICITY_RESIDUAL_TOL};

use crate::waveform::{is_valid_grid, Waveform};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModalError {
    #[error("polynomial coefficients must be finite")]
    NonFiniteCoefficient,
    #[error("denominator is the zero polynomial")]
    ZeroDenominator,
    #[error("polynomial degree must be at least 1")]
    DegreeTooLow,
    #[error("transfer function is not strictly proper (deg N = {num}, deg D = {den})")]
    NotStrictlyProper { num: usize, den: usize },
    #[error("root finder did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("gain form requires simple poles")]
    RepeatedPoleUnsupported,
    #[error("gain form requires real poles")]
    ComplexPoleUnsupported,
    #[error("gain form requires strictly negative poles (found {0})")]
    NonNegativePole(f64),
    #[error("time grid must be nonnegative and strictly increasing")]
    InvalidTimeGrid,
    #[error("unsupported document version {0}")]
    VersionMismatch(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `H(s) = N(s) / D(s)`, strictly proper.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Polynomial,
    den: Polynomial,
}

impl TransferFunction {
    pub fn new(num: Polynomial, den: Polynomial) -> Result<Self, ModalError> {
        if den.is_zero() {
            return Err(ModalError::ZeroDenominator);
        }
        if !num.is_zero() && num.degree() >= den.degree() || num.is_zero() && den.degree() == 0 {
            return Err(ModalError::NotStrictlyProper {
                num: num.degree(),
                den: den.degree(),
            });
        }
        Ok(Self { num, den })
    }

    pub fn num(&self) -> &Polynomial {
        &self.num
    }

    pub fn den(&self) -> &Polynomial {
        &self.den
    }

    pub fn order(&self) -> usize {
        self.den.degree()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.num.eval(s) / self.den.eval(s)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.coeffs()[0] / self.den.coeffs()[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TransferFunctionDoc {
            version: FORMAT_VERSION,
            num: self.num.coeffs().to_vec(),
            den: self.den.coeffs().to_vec(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModalError> {
        let doc: TransferFunctionDoc = serde_json::from_str(text)?;
        if doc.version != FORMAT_VERSION {
            return Err(ModalError::VersionMismatch(doc.version));
        }
        Self::new(Polynomial::new(doc.num)?, Polynomial::new(doc.den)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TransferFunctionDoc {
    version: u32,
    num: Vec<f64>,
    den: Vec<f64>,
}

/// One partial-fraction term `residue / (s - pole)^j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub pole: Complex64,
    pub residue: Complex64,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalDecomposition {
    pub modes: Vec<Mode>,
    pub source_order: usize,
}

#[derive(Serialize, Deserialize)]
struct ModeDoc {
    pole_re: f64,
    pole_im: f64,
    residue_re: f64,
    residue_im: f64,
    j: usize,
}

#[derive(Serialize, Deserialize)]
struct DecompositionDoc {
    version: u32,
    modes: Vec<ModeDoc>,
}

impl ModalDecomposition {
    /// Distinct poles with their multiplicity (highest `j` among their modes).
    pub fn poles(&self) -> Vec<(Complex64, usize)> {
        let mut out: Vec<(Complex64, usize)> = Vec::new();
        for m in &self.modes {
            match out.iter_mut().find(|(p, _)| *p == m.pole) {
                Some(entry) => entry.1 = entry.1.max(m.j),
                None => out.push((m.pole, m.j)),
            }
        }
        out
    }

    pub fn multiplicity_sum(&self) -> usize {
        self.poles().iter().map(|(_, k)| k).sum()
    }

    /// Evaluates `Σ r_ij / (s - p_i)^j`.
    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.modes
            .iter()
            .map(|m| m.residue / (s - m.pole).powi(m.j as i32))
            .sum()
    }

    pub fn to_json(&self) -> String {
        let doc = DecompositionDoc {
            version: FORMAT_VERSION,
            modes: self
                .modes
                .iter()
                .map(|m| ModeDoc {
                    pole_re: m.pole.re,
                    pole_im: m.pole.im,
                    residue_re: m.residue.re,
                    residue_im: m.residue.im,
                    j: m.j,
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModalError> {
        let doc: DecompositionDoc = serde_json::from_str(text)?;
        if doc.version != FORMAT_VERSION {
            return Err(ModalError::VersionMismatch(doc.version));
        }
        let modes: Vec<Mode> = doc
            .modes
            .into_iter()
            .map(|m| Mode {
                pole: Complex64::new(m.pole_re, m.pole_im),
                residue: Complex64::new(m.residue_re, m.residue_im),
                j: m.j,
            })
            .collect();
        let mut d = ModalDecomposition {
            modes,
            source_order: 0,
        };
        d.source_order = d.multiplicity_sum();
        Ok(d)
    }
}

/// Partial-fraction expansion of a strictly proper transfer function.
pub fn decompose(h: &TransferFunction) -> Result<ModalDecomposition, ModalError> {
    let roots = find_poles(h.den())?;
    let lead = h.den().leading();
    let mut modes = Vec::with_capacity(h.order());

    for (i, root) in roots.iter().enumerate() {
        let p = root.value;
        if root.multiplicity == 1 {
            // D'(p) as a product over the computed roots.
            let mut dp = Complex64::new(lead, 0.0);
            for (l, other) in roots.iter().enumerate() {
                if l != i {
                    dp *= (p - other.value).powi(other.multiplicity as i32);
                }
            }
            modes.push(Mode {
                pole: p,
                residue: h.num().eval(p) / dp,
                j: 1,
            });
            continue;
        }
        // Deflated denominator Q(s) = D(s) / (s - p)^k, rebuilt from the
        // remaining roots.
        let mut q = vec![Complex64::new(lead, 0.0)];
        for (l, other) in roots.iter().enumerate() {
            if l == i {
                continue;
            }
            for _ in 0..other.multiplicity {
                q = cmul_linear(&q, other.value);
            }
        }
        let k = root.multiplicity;
        let num: Vec<Complex64> = h
            .num()
            .coeffs()
            .iter()
            .map(|&c| Complex64::new(c, 0.0))
            .collect();
        let n_taylor = taylor_at(&num, p, k);
        let q_taylor = taylor_at(&q, p, k);
        // Series division N/Q around p.
        let mut f = vec![Complex64::new(0.0, 0.0); k];
        for m in 0..k {
            let mut acc = n_taylor[m];
            for l in 1..=m {
                acc -= q_taylor[l] * f[m - l];
            }
            f[m] = acc / q_taylor[0];
        }
        // r_{ij} is the (k-j)-th Taylor coefficient.
        for j in 1..=k {
            modes.push(Mode {
                pole: p,
                residue: f[k - j],
                j,
            });
        }
    }
    Ok(ModalDecomposition {
        modes,
        source_order: h.order(),
    })
}

/// Multiplies a complex polynomial by `(s - root)`.
fn cmul_linear(p: &[Complex64], root: Complex64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); p.len() + 1];
    for (k, &c) in p.iter().enumerate() {
        out[k + 1] += c;
        out[k] -= root * c;
    }
    out
}

/// First `count` Taylor coefficients of a polynomial around `at`
/// (`p(at + h) = Σ t_m h^m`), by repeated exact differentiation.
fn taylor_at(p: &[Complex64], at: Complex64, count: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(count);
    let mut d = p.to_vec();
    let mut factorial = 1.0;
    for m in 0..count {
        if m > 0 {
            factorial *= m as f64;
            d = poly::cpoly_derivative(&d);
        }
        out.push(poly::cpoly_eval(&d, at) / factorial);
    }
    out
}

/// A simple real mode in gain form: `gain / (s/rate + 1)`, `rate > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainMode {
    pub rate: f64,
    pub gain: f64,
}

/// Relative imaginary part above which a pole counts as complex.
pub const REAL_POLE_TOL: f64 = 1e-8;

/// Converts simple, real, stable modes to decay-rate/gain pairs.
///
/// With `λ = -p`, the term `r / (s - λ)` equals `(r/p) / (s/p + 1)`. The
/// gains therefore sum to `H(0)`.
pub fn to_gain_form(d: &ModalDecomposition) -> Result<Vec<GainMode>, ModalError> {
    if d.poles().iter().any(|&(_, k)| k > 1) {
        return Err(ModalError::RepeatedPoleUnsupported);
    }
    d.modes
        .iter()
        .map(|m| {
            if m.pole.im.abs() > REAL_POLE_TOL * m.pole.norm() {
                return Err(ModalError::ComplexPoleUnsupported);
            }
            if m.pole.re >= 0.0 {
                return Err(ModalError::NonNegativePole(m.pole.re));
            }
            let rate = -m.pole.re;
            Ok(GainMode {
                rate,
                gain: m.residue.re / rate,
            })
        })
        .collect()
}

/// Unit-step response of a modal expansion sampled at `times`.
///
/// Each term `r / (s - p)^j` contributes the inverse transform of
/// `r / (s (s - p)^j)`:
///
/// ```text
/// r · (-1/p)^j · [1 - e^{pt} Σ_{m<j} (-pt)^m / m!]      (p ≠ 0)
/// r · t^j / j!                                          (p = 0)
/// ```
///
/// Conjugate pairs sum to a real signal; the real part is returned.
pub fn analytic_step_response(
    d: &ModalDecomposition,
    times: &[f64],
) -> Result<Waveform, ModalError> {
    if !is_valid_grid(times) {
        return Err(ModalError::InvalidTimeGrid);
    }
    let values = times
        .iter()
        .map(|&t| d.modes.iter().map(|m| step_term(m, t)).sum::<Complex64>().re)
        .collect();
    Ok(Waveform {
        times: times.to_vec(),
        values,
    })
}

fn step_term(m: &Mode, t: f64) -> Complex64 {
    let p = m.pole;
    let j = m.j as i32;
    if p.norm() == 0.0 {
        let fact: f64 = (1..=m.j).map(|x| x as f64).product();
        return m.residue * t.powi(j) / fact;
    }
    let x = -p * t;
    let mut series = Complex64::new(0.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    for k in 0..m.j {
        if k > 0 {
            term = term * x / k as f64;
        }
        series += term;
    }
    let bracket = Complex64::new(1.0, 0.0) - (p * t).exp() * series;
    m.residue * (-p.inv()).powi(j) * bracket
}

/// Gain-form modes as a single-pole modal decomposition.
pub fn from_gain_form(modes: &[GainMode]) -> ModalDecomposition {
    ModalDecomposition {
        modes: modes
            .iter()
            .map(|g| Mode {
                pole: Complex64::new(-g.rate, 0.0),
                residue: Complex64::new(g.gain * g.rate, 0.0),
                j: 1,
            })
            .collect(),
        source_order: modes.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf(num: &[f64], den: &[f64]) -> TransferFunction {
        TransferFunction::new(
            Polynomial::new(num.to_vec()).unwrap(),
            Polynomial::new(den.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn single_pole() {
        let d = decompose(&tf(&[1.0], &[1.0, 1.0])).unwrap();
        assert_eq!(d.modes.len(), 1);
        assert!((d.modes[0].pole - c(-1.0)).norm() < 1e-15);
        assert!((d.modes[0].residue - c(1.0)).norm() < 1e-15);
        assert_eq!(d.modes[0].j, 1);
    }

    #[test]
    fn two_poles_match_cover_up_limit() {
        let h = tf(&[1.0], &[2.0, 3.0, 1.0]);
        let d = decompose(&h).unwrap();
        // Oracle: (s - p) H(s) evaluated just off the pole.
        for m in &d.modes {
            let eps = 1e-7;
            let s = m.pole + c(eps);
            let limit = (s - m.pole) * h.eval(s);
            assert!((limit - m.residue).norm() / m.residue.norm() < 1e-6);
        }
        assert!((d.modes[0].residue - c(1.0)).norm() < 1e-12);
        assert!((d.modes[1].residue - c(-1.0)).norm() < 1e-12);
    }

    #[test]
    fn double_pole_residues() {
        let d = decompose(&tf(&[1.0], &[1.0, 2.0, 1.0])).unwrap();
        assert_eq!(d.modes.len(), 2);
        assert_eq!(d.modes[0].j, 1);
        assert!(d.modes[0].residue.norm() < 1e-12);
        assert_eq!(d.modes[1].j, 2);
        assert!((d.modes[1].residue - c(1.0)).norm() < 1e-12);
        assert_eq!(d.multiplicity_sum(), 2);
    }

    #[test]
    fn not_strictly_proper_rejected() {
        let r = TransferFunction::new(
            Polynomial::new(vec![1.0, 1.0]).unwrap(),
            Polynomial::new(vec![1.0, 1.0]).unwrap(),
        );
        assert!(matches!(r, Err(ModalError::NotStrictlyProper { .. })));
    }

    #[test]
    fn gain_form_examples() {
        let d = decompose(&tf(&[1.0], &[1.0, 1.0])).unwrap();
        let g = to_gain_form(&d).unwrap();
        assert!((g[0].rate - 1.0).abs() < 1e-15 && (g[0].gain - 1.0).abs() < 1e-15);

        let h = tf(&[1.0], &[2.0, 3.0, 1.0]);
        let g = to_gain_form(&decompose(&h).unwrap()).unwrap();
        assert!((g[0].rate - 1.0).abs() < 1e-12 && (g[0].gain - 1.0).abs() < 1e-12);
        assert!((g[1].rate - 2.0).abs() < 1e-12 && (g[1].gain + 0.5).abs() < 1e-12);
        let sum: f64 = g.iter().map(|m| m.gain).sum();
        // H(0) evaluated directly
        assert!((sum - h.eval(c(0.0)).re).abs() < 1e-12);
        assert!((sum - 0.5).abs() < 1e-12);

        let ladder = tf(&[1.0], &[1.0, 3.0, 1.0]);
        let g = to_gain_form(&decompose(&ladder).unwrap()).unwrap();
        assert_eq!(g.len(), 2);
        let sum: f64 = g.iter().map(|m| m.gain).sum();
        assert!((sum - ladder.eval(c(0.0)).re).abs() < 1e-9);
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gain_form_rejections() {
        let d = decompose(&tf(&[1.0], &[1.0, 2.0, 1.0])).unwrap();
        assert!(matches!(to_gain_form(&d), Err(ModalError::RepeatedPoleUnsupported)));
        let d = decompose(&tf(&[1.0], &[5.0, 2.0, 1.0])).unwrap();
        assert!(matches!(to_gain_form(&d), Err(ModalError::ComplexPoleUnsupported)));
    }

    #[test]
    fn step_response_examples() {
        let d = from_gain_form(&[GainMode { rate: 1.0, gain: 1.0 }]);
        let w = analytic_step_response(&d, &[0.0, 1.0, 50.0]).unwrap();
        assert_eq!(w.values[0], 0.0);
        let oracle = 1.0 - (-1.0f64).exp();
        assert!((w.values[1] - oracle).abs() < 1e-15);
        assert!((oracle - 0.63212).abs() < 1e-5);
        assert!((w.values[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn repeated_pole_step_response() {
        // 1/(s+1)^2 -> step response 1 - e^{-t}(1 + t)
        let d = decompose(&tf(&[1.0], &[1.0, 2.0, 1.0])).unwrap();
        let w = analytic_step_response(&d, &[0.0, 0.5, 2.0]).unwrap();
        for (t, v) in w.times.iter().zip(&w.values) {
            let want = 1.0 - (-t).exp() * (1.0 + t);
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_pair_step_response_is_real() {
        // 5/(s^2+2s+5): step response 1 - e^{-t}(cos 2t + 0.5 sin 2t)
        let d = decompose(&tf(&[5.0], &[5.0, 2.0, 1.0])).unwrap();
        let w = analytic_step_response(&d, &[0.0, 0.3, 1.7]).unwrap();
        for (t, v) in w.times.iter().zip(&w.values) {
            let want = 1.0 - (-t).exp() * ((2.0 * t).cos() + 0.5 * (2.0 * t).sin());
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn step_response_rejects_bad_grid() {
        let d = from_gain_form(&[GainMode { rate: 1.0, gain: 1.0 }]);
        assert!(analytic_step_response(&d, &[1.0, 0.5]).is_err());
        assert!(analytic_step_response(&d, &[-1.0]).is_err());
    }

    #[test]
    fn json_documents() {
        let h = tf(&[1.0], &[1.0, 3.0, 1.0]);
        let text = h.to_json();
        assert_eq!(text, r#"{"version":1,"num":[1.0],"den":[1.0,3.0,1.0]}"#);
        assert_eq!(TransferFunction::from_json(&text).unwrap(), h);
        let d = decompose(&h).unwrap();
        let back = ModalDecomposition::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        assert!(matches!(
            TransferFunction::from_json(r#"{"version":2,"num":[1.0],"den":[1.0,1.0]}"#),
            Err(ModalError::VersionMismatch(2))
        ));
    }
}
