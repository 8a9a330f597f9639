#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use rcmodal::modal::{Polynomial, TransferFunction};

/// `Σ_i Σ_k r_ik / (s - p_i)^k` in coefficient form. `poles[i]` carries the
/// pole and one residue per power `1..=m_i`.
pub fn from_poles_and_residues(poles: &[(f64, Vec<f64>)]) -> TransferFunction {
    let all: Vec<f64> = poles
        .iter()
        .flat_map(|(p, r)| std::iter::repeat(*p).take(r.len()))
        .collect();
    let den = Polynomial::from_real_roots(&all);
    let mut num = vec![0.0; all.len()];
    for (i, (p, residues)) in poles.iter().enumerate() {
        for (k, r) in residues.iter().enumerate() {
            let mut rest: Vec<f64> = poles
                .iter()
                .enumerate()
                .filter(|(l, _)| *l != i)
                .flat_map(|(_, (q, rq))| std::iter::repeat(*q).take(rq.len()))
                .collect();
            rest.extend(std::iter::repeat(*p).take(residues.len() - k - 1));
            for (c, x) in num.iter_mut().zip(Polynomial::from_real_roots(&rest).coeffs()) {
                *c += r * x;
            }
        }
    }
    TransferFunction::new(Polynomial::new(num).unwrap(), den).unwrap()
}

/// Negative real poles spaced by ratios in `[1.3, 3]` from a log-uniform
/// scale, each with multiplicity from `mults` and residues of magnitude
/// `[0.1, 1]` in units of the pole, random sign.
pub fn random_rational<R: Rng>(rng: &mut R, mults: &[usize]) -> TransferFunction {
    let mut p = -10f64.powf(rng.gen_range(-2.0..2.0));
    let mut poles = Vec::new();
    for &m in mults {
        let residues = (0..m)
            .map(|k| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.1..1.0) * p.abs().powi(k as i32 + 1)
            })
            .collect();
        poles.push((p, residues));
        p *= rng.gen_range(1.3..3.0);
    }
    from_poles_and_residues(&poles)
}

/// Probe point within a decade of the geometric-mean pole magnitude, off the
/// real axis.
pub fn random_probe<R: Rng>(rng: &mut R, h: &TransferFunction) -> Complex64 {
    let lo = h.den().coeffs()[0].abs().powf(1.0 / h.order() as f64);
    let radius = lo * 10f64.powf(rng.gen_range(-1.0..1.0));
    let angle = std::f64::consts::PI * rng.gen_range(0.05..0.95);
    Complex64::from_polar(radius, angle)
}
