//! Polynomial root finding.
//!
//! Roots come from Aberth–Ehrlich simultaneous iteration on a monic,
//! magnitude-balanced copy of the polynomial. If the iteration stalls, the
//! eigenvalues of the companion matrix are used instead. Computed roots that
//! belong to one multiple root are then merged (see [`find_poles`]).

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::poly::Polynomial;
use super::ModalError;

/// Iteration budget for the Aberth–Ehrlich sweep.
pub const ABERTH_MAX_ITER: usize = 500;

/// Relative residual below which a cluster of `k` computed roots is accepted
/// as a single root of multiplicity `k`.
///
/// The test is applied to `D, D', …, D^(k-1)` at the refined cluster centre.
/// In double precision a `k`-fold root is only resolved to roughly
/// `ε^(1/k)`, so a plain distance threshold cannot separate a computed
/// triple root from three distinct poles.
pub const MULTIPLICITY_RESIDUAL_TOL: f64 = 1e-12;

/// Roots farther apart than this (relative) are never considered for merging.
pub const CLUSTER_CANDIDATE_RADIUS: f64 = 1e-3;

/// A root together with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub value: Complex64,
    pub multiplicity: usize,
}

/// Returns all roots of `den`, counted with multiplicity.
///
/// Roots whose joint residual test passes are merged into one [`Root`] with
/// raised multiplicity. Real polynomials yield exactly real roots or exact
/// conjugate pairs. Output is sorted by descending real part, then by
/// descending imaginary part.
pub fn find_poles(den: &Polynomial) -> Result<Vec<Root>, ModalError> {
    if den.is_zero() {
        return Err(ModalError::ZeroDenominator);
    }
    if den.degree() < 1 {
        return Err(ModalError::DegreeTooLow);
    }

    // Roots at the origin are exact; strip them before scaling.
    let coeffs = den.coeffs();
    let zeros_at_origin = coeffs.iter().take_while(|&&c| c == 0.0).count();
    let reduced = Polynomial::new(coeffs[zeros_at_origin..].to_vec())?;

    let mut roots = Vec::new();
    if reduced.degree() > 0 {
        let scale = (reduced.coeffs()[0] / reduced.leading())
            .abs()
            .powf(1.0 / reduced.degree() as f64);
        let scaled = reduced.scale_argument(scale);
        let lead = scaled.leading();
        let monic = Polynomial::new(scaled.coeffs().iter().map(|c| c / lead).collect())?;

        let raw = match aberth(&monic) {
            Some(r) => r,
            None => companion_roots(&monic)?,
        };
        let mut found = cluster(&monic, raw);
        for r in &mut found {
            r.value *= scale;
        }
        roots.extend(found);
    }
    if zeros_at_origin > 0 {
        roots.push(Root {
            value: Complex64::new(0.0, 0.0),
            multiplicity: zeros_at_origin,
        });
    }
    roots.sort_by(|a, b| {
        b.value
            .re
            .total_cmp(&a.value.re)
            .then(b.value.im.total_cmp(&a.value.im))
    });
    Ok(roots)
}

fn initial_guesses(p: &Polynomial) -> Vec<Complex64> {
    let d = p.degree();
    let c = p.coeffs();
    // Radius from the geometric mean of root magnitudes (1 after balancing),
    // nudged towards the Fujiwara bound when coefficients are lopsided.
    let fujiwara = (0..d)
        .map(|k| (c[k] / c[d]).abs().powf(1.0 / (d - k) as f64))
        .fold(0.0_f64, f64::max);
    let radius = (c[0] / c[d]).abs().powf(1.0 / d as f64).max(1e-3).min(fujiwara.max(1e-3));
    (0..d)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / d as f64 + 0.4;
            Complex64::from_polar(radius, theta)
        })
        .collect()
}

/// Aberth–Ehrlich iteration (Gauss–Seidel ordering). `None` when the budget
/// is exhausted or a non-finite iterate appears.
fn aberth(p: &Polynomial) -> Option<Vec<Complex64>> {
    let d = p.degree();
    let dp = p.derivative();
    let mut z = initial_guesses(p);
    if d == 1 {
        return Some(vec![Complex64::new(-p.coeffs()[0] / p.coeffs()[1], 0.0)]);
    }
    let mut settled = vec![false; d];
    for _ in 0..ABERTH_MAX_ITER {
        let mut all_settled = true;
        for k in 0..d {
            if settled[k] {
                continue;
            }
            let pz = p.eval(z[k]);
            if pz.norm() <= f64::EPSILON * p.abs_eval(z[k]) {
                settled[k] = true;
                continue;
            }
            let ratio = pz / dp.eval(z[k]);
            let repulsion: Complex64 = (0..d)
                .filter(|&j| j != k)
                .map(|j| (z[k] - z[j]).inv())
                .sum();
            let step = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            if !step.re.is_finite() || !step.im.is_finite() {
                return None;
            }
            z[k] -= step;
            if step.norm() <= 4.0 * f64::EPSILON * z[k].norm() {
                settled[k] = true;
            } else {
                all_settled = false;
            }
        }
        if all_settled {
            return Some(z);
        }
    }
    None
}

/// Eigenvalues of the companion matrix of a monic polynomial.
fn companion_roots(p: &Polynomial) -> Result<Vec<Complex64>, ModalError> {
    let d = p.degree();
    let c = p.coeffs();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for i in 1..d {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..d {
        m[(i, d - 1)] = -c[i] / c[d];
    }
    let eig = m.complex_eigenvalues();
    let out: Vec<Complex64> = eig.iter().map(|z| Complex64::new(z.re, z.im)).collect();
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(ModalError::NonConvergence {
            iterations: ABERTH_MAX_ITER,
        });
    }
    Ok(out)
}

fn newton_polish(p: &Polynomial, dp: &Polynomial, mut z: Complex64, iters: usize) -> Complex64 {
    let mut best = p.eval(z).norm();
    for _ in 0..iters {
        let d = dp.eval(z);
        if d.norm() == 0.0 {
            break;
        }
        let cand = z - p.eval(z) / d;
        let r = p.eval(cand).norm();
        if !(r < best) {
            break;
        }
        best = r;
        z = cand;
    }
    z
}

fn relative_residual(p: &Polynomial, z: Complex64) -> f64 {
    let scale = p.abs_eval(z);
    if scale == 0.0 {
        return 0.0;
    }
    p.eval(z).norm() / scale
}

fn snap_real(z: Complex64) -> Complex64 {
    if z.im.abs() <= 1e-10 * z.norm() {
        Complex64::new(z.re, 0.0)
    } else {
        z
    }
}

fn cluster(p: &Polynomial, raw: Vec<Complex64>) -> Vec<Root> {
    let n = raw.len();
    let dp = p.derivative();
    let polished: Vec<Complex64> = raw.iter().map(|&z| newton_polish(p, &dp, z, 3)).collect();

    // Union-find over candidate pairs.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let a = polished[i];
            let b = polished[j];
            if (a - b).norm() <= CLUSTER_CANDIDATE_RADIUS * a.norm().max(b.norm()) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj] = ri;
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if group_of[r] == usize::MAX {
            group_of[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[group_of[r]].push(i);
    }

    let mut out = Vec::with_capacity(n);
    for g in groups {
        if g.len() == 1 {
            out.push(Root {
                value: snap_real(polished[g[0]]),
                multiplicity: 1,
            });
            continue;
        }
        match merged_root(p, g.iter().map(|&i| raw[i])) {
            Some(root) => out.push(root),
            None => out.extend(g.iter().map(|&i| Root {
                value: snap_real(polished[i]),
                multiplicity: 1,
            })),
        }
    }
    enforce_conjugates(&mut out);
    out
}

/// Tests whether a group of computed roots is one multiple root.
fn merged_root(p: &Polynomial, members: impl Iterator<Item = Complex64>) -> Option<Root> {
    let members: Vec<Complex64> = members.collect();
    let k = members.len();
    let centre = members.iter().sum::<Complex64>() / k as f64;

    // Derivatives D^(0..k).
    let mut derivs = vec![p.clone()];
    for _ in 0..k {
        let next = derivs[derivs.len() - 1].derivative();
        derivs.push(next);
    }
    // A k-fold root of D is a simple root of D^(k-1).
    let centre = snap_real(newton_polish(&derivs[k - 1], &derivs[k], centre, 20));
    let ok = derivs[..k]
        .iter()
        .all(|d| relative_residual(d, centre) <= MULTIPLICITY_RESIDUAL_TOL);
    ok.then_some(Root {
        value: centre,
        multiplicity: k,
    })
}

fn enforce_conjugates(roots: &mut [Root]) {
    let n = roots.len();
    let mut used = vec![false; n];
    for i in 0..n {
        if used[i] || roots[i].value.im <= 0.0 {
            continue;
        }
        let target = roots[i].value.conj();
        let partner = (0..n)
            .filter(|&j| !used[j] && j != i && roots[j].value.im < 0.0)
            .filter(|&j| roots[j].multiplicity == roots[i].multiplicity)
            .min_by(|&a, &b| {
                (roots[a].value - target)
                    .norm()
                    .total_cmp(&(roots[b].value - target).norm())
            });
        if let Some(j) = partner {
            let avg = (roots[i].value + roots[j].value.conj()) * 0.5;
            roots[i].value = avg;
            roots[j].value = avg.conj();
            used[i] = true;
            used[j] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(v: &[f64]) -> Polynomial {
        Polynomial::new(v.to_vec()).unwrap()
    }

    #[test]
    fn first_order() {
        let r = find_poles(&poly(&[1.0, 1.0])).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].multiplicity, 1);
        assert!((r[0].value.re + 1.0).abs() < 1e-15);
        assert_eq!(r[0].value.im, 0.0);
    }

    #[test]
    fn quadratic_matches_formula() {
        let r = find_poles(&poly(&[1.0, 3.0, 1.0])).unwrap();
        // Independent oracle: quadratic formula.
        let disc: f64 = 9.0 - 4.0;
        let hi = (-3.0 + disc.sqrt()) / 2.0;
        let lo = (-3.0 - disc.sqrt()) / 2.0;
        assert_eq!(r.len(), 2);
        assert!((r[0].value.re - hi).abs() < 1e-14, "{:?}", r);
        assert!((r[1].value.re - lo).abs() < 1e-14);
        assert!((hi + 0.38197).abs() < 1e-5 && (lo + 2.61803).abs() < 1e-5);
    }

    #[test]
    fn double_root_is_merged() {
        let r = find_poles(&poly(&[1.0, 2.0, 1.0])).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].multiplicity, 2);
        assert!((r[0].value.re + 1.0).abs() < 1e-12);
    }

    #[test]
    fn triple_root_is_merged() {
        // (s+2)^3 (s+5)
        let p = Polynomial::from_real_roots(&[-2.0, -2.0, -2.0, -5.0]);
        let r = find_poles(&p).unwrap();
        assert_eq!(r.len(), 2, "{r:?}");
        assert_eq!(r[0].multiplicity, 3);
        assert!((r[0].value.re + 2.0).abs() < 1e-10);
        assert_eq!(r[1].multiplicity, 1);
    }

    #[test]
    fn close_but_distinct_roots_stay_separate() {
        let p = Polynomial::from_real_roots(&[-1.0, -1.0001]);
        let r = find_poles(&p).unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn complex_pair_is_conjugate() {
        // s^2 + 2s + 5 -> -1 ± 2i
        let r = find_poles(&poly(&[5.0, 2.0, 1.0])).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].value, r[1].value.conj());
        assert!((r[0].value.im - 2.0).abs() < 1e-14);
    }

    #[test]
    fn roots_at_origin() {
        // s^2 (s + 3)
        let r = find_poles(&poly(&[0.0, 0.0, 3.0, 1.0])).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].value, Complex64::new(0.0, 0.0));
        assert_eq!(r[0].multiplicity, 2);
    }

    #[test]
    fn widely_scaled_roots() {
        let roots = [-1e9, -3e10, -2e11, -7e12];
        let p = Polynomial::from_real_roots(&roots);
        let r = find_poles(&p).unwrap();
        let mut got: Vec<f64> = r.iter().map(|x| x.value.re).collect();
        got.sort_by(|a, b| b.total_cmp(a));
        for (g, e) in got.iter().zip(roots.iter()) {
            assert!(((g - e) / e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn companion_fallback_agrees() {
        let p = Polynomial::from_real_roots(&[-1.0, -2.0, -4.0]);
        let mut z = companion_roots(&p).unwrap();
        z.sort_by(|a, b| b.re.total_cmp(&a.re));
        for (got, want) in z.iter().zip([-1.0, -2.0, -4.0]) {
            assert!((got.re - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_is_rejected() {
        assert!(matches!(find_poles(&poly(&[3.0])), Err(ModalError::DegreeTooLow)));
        assert!(matches!(
            find_poles(&Polynomial::zero()),
            Err(ModalError::ZeroDenominator)
        ));
    }
}
