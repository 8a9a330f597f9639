use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ModalError;

/// Real polynomial stored with coefficients ascending by degree:
/// `c[0] + c[1]·s + … + c[d]·s^d`.
///
/// Trailing zeros are trimmed on construction, so the last coefficient is
/// the leading one. The zero polynomial is stored as `[0.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(mut coeffs: Vec<f64>) -> Result<Self, ModalError> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(ModalError::NonFiniteCoefficient);
        }
        while coeffs.len() > 1 && coeffs[coeffs.len() - 1] == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Ok(Self { coeffs })
    }

    pub fn zero() -> Self {
        Self { coeffs: vec![0.0] }
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    /// Monic polynomial with the given real roots.
    pub fn from_real_roots(roots: &[f64]) -> Self {
        let mut coeffs = vec![1.0];
        for &r in roots {
            let mut next = vec![0.0; coeffs.len() + 1];
            for (k, &c) in coeffs.iter().enumerate() {
                next[k + 1] += c;
                next[k] -= r * c;
            }
            coeffs = next;
        }
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[self.coeffs.len() - 1]
    }

    /// Horner evaluation at a complex point.
    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
    }

    pub fn eval_real(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// `Σ |c_k| |s|^k`, the scale against which a residual `|p(s)|` is small.
    pub fn abs_eval(&self, s: Complex64) -> f64 {
        let r = s.norm();
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c.abs())
    }

    pub fn derivative(&self) -> Self {
        if self.coeffs.len() == 1 {
            return Self::zero();
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| k as f64 * c)
            .collect();
        Self::new(coeffs).expect("derivative of finite coefficients is finite")
    }

    /// Substitutes `s = scale·z` and returns the polynomial in `z`.
    pub fn scale_argument(&self, scale: f64) -> Self {
        let mut factor = 1.0;
        let coeffs = self
            .coeffs
            .iter()
            .map(|&c| {
                let out = c * factor;
                factor *= scale;
                out
            })
            .collect();
        Self { coeffs }
    }
}

impl TryFrom<Vec<f64>> for Polynomial {
    type Error = ModalError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Polynomial::new(v)
    }
}

impl From<Polynomial> for Vec<f64> {
    fn from(p: Polynomial) -> Self {
        p.coeffs
    }
}

/// Complex polynomial helpers used by deflation during residue computation.
pub(crate) fn cpoly_eval(coeffs: &[Complex64], s: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
}

pub(crate) fn cpoly_derivative(coeffs: &[Complex64]) -> Vec<Complex64> {
    if coeffs.len() <= 1 {
        return vec![Complex64::new(0.0, 0.0)];
    }
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| c * k as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eval_examples() {
        let p = Polynomial::new(vec![1.0, 3.0, 1.0]).unwrap();
        assert_eq!(p.eval(c(0.0, 0.0)), c(1.0, 0.0));
        let q = Polynomial::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(q.eval(c(-1.0, 0.0)), c(0.0, 0.0));
        // 2 + i^2 = 1
        let r = Polynomial::new(vec![2.0, 0.0, 1.0]).unwrap();
        let i = c(0.0, 1.0);
        let oracle = c(2.0, 0.0) + i * i;
        assert_eq!(r.eval(i), oracle);
        assert_eq!(oracle, c(1.0, 0.0));
    }

    #[test]
    fn derivative_examples() {
        let d = |v: Vec<f64>| Polynomial::new(v).unwrap().derivative();
        assert_eq!(d(vec![1.0, 3.0, 1.0]).coeffs(), &[3.0, 2.0]);
        assert_eq!(d(vec![5.0]).coeffs(), &[0.0]);
        assert!(d(vec![5.0]).is_zero());
        assert_eq!(d(vec![0.0, 0.0, 0.0, 1.0]).coeffs(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn trims_and_rejects_non_finite() {
        let p = Polynomial::new(vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.degree(), 1);
        assert_eq!(Polynomial::new(vec![]).unwrap(), Polynomial::zero());
        assert!(matches!(
            Polynomial::new(vec![1.0, f64::NAN]),
            Err(ModalError::NonFiniteCoefficient)
        ));
    }

    #[test]
    fn from_roots_expands() {
        let p = Polynomial::from_real_roots(&[-1.0, -2.0]);
        assert_eq!(p.coeffs(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn scale_argument_roundtrip() {
        let p = Polynomial::new(vec![1.0, 3.0, 2.0]).unwrap();
        let q = p.scale_argument(10.0);
        assert!((q.eval_real(0.1) - p.eval_real(1.0)).abs() < 1e-12);
    }
}
