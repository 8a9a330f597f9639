//! Golden-reference transient simulator.
//!
//! Integrates `C dV/dt = -G_int V + e_in · i_drv(v_in)` with the trapezoidal
//! rule on a fixed step. `G_int` holds the network's internal conductances;
//! the driver supplies the current into the input node. Each step solves
//!
//! ```text
//! R(v) = (2/h) C (v - v_prev) - f(v) - f(v_prev) = 0
//! ```
//!
//! by full-step Newton–Raphson. The Jacobian `(2/h)C + G_int - e_in e_inᵀ i'`
//! is rebuilt and factored with dense partial-pivoting LU on every iteration,
//! which is the cubic-cost baseline the surrogate is measured against.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::netgen::{assemble_nodal, NetgenError, NodalSystem, RcNetwork};
use crate::waveform::Waveform;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("Newton did not converge at step {step} (|Δv| = {update:.3e} after {iterations} iterations)")]
    NewtonDivergence {
        step: usize,
        iterations: usize,
        update: f64,
    },
    #[error("singular Jacobian at step {step}")]
    SingularJacobian { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetgenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    /// Ideal 0→vdd source behind the network's source resistor.
    IdealStep,
    /// `i = strength · tanh((vdd - v_in) / knee)`.
    Saturating,
}

impl DriverKind {
    /// Integer label used as the surrogate's device token.
    pub fn label(self) -> usize {
        match self {
            DriverKind::IdealStep => 0,
            DriverKind::Saturating => 1,
        }
    }
}

impl std::str::FromStr for DriverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ideal_step" => Ok(DriverKind::IdealStep),
            "saturating" => Ok(DriverKind::Saturating),
            other => Err(format!("unknown driver kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverModel {
    pub kind: DriverKind,
    /// Volts.
    pub vdd: f64,
    /// Amperes (saturation current of the `saturating` kind).
    pub strength: f64,
    /// Volts.
    pub knee: f64,
}

impl DriverModel {
    pub fn ideal_step(vdd: f64) -> Self {
        DriverModel {
            kind: DriverKind::IdealStep,
            vdd,
            strength: 1.0,
            knee: 1.0,
        }
    }

    /// Saturating driver whose small-signal conductance `strength/knee`
    /// equals the network's source conductance.
    pub fn matched_saturating(vdd: f64, knee: f64, net: &RcNetwork) -> Self {
        DriverModel {
            kind: DriverKind::Saturating,
            vdd,
            strength: knee / net.r[net.input],
            knee,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.vdd > 0.0 && self.strength > 0.0 && self.knee > 0.0;
        let finite = self.vdd.is_finite() && self.strength.is_finite() && self.knee.is_finite();
        if ok && finite {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(
                "driver needs positive finite vdd, strength and knee".into(),
            ))
        }
    }

    /// Current into the input node and its derivative with respect to `v_in`.
    #[inline]
    fn current(&self, v_in: f64, source_conductance: f64) -> (f64, f64) {
        match self.kind {
            DriverKind::IdealStep => (
                source_conductance * (self.vdd - v_in),
                -source_conductance,
            ),
            DriverKind::Saturating => {
                let th = ((self.vdd - v_in) / self.knee).tanh();
                (
                    self.strength * th,
                    -self.strength / self.knee * (1.0 - th * th),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for SimConfig {
    /// 10 ps steps over a 20 ns window.
    fn default() -> Self {
        SimConfig {
            t_end: 20e-9,
            dt: 10e-12,
            newton_tol: 1e-9,
            newton_max_iter: 50,
        }
    }
}

impl SimConfig {
    pub fn with_steps(dt: f64, steps: usize) -> Self {
        SimConfig {
            t_end: dt * steps as f64,
            dt,
            ..SimConfig::default()
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.t_end > 0.0
            && self.dt > 0.0
            && self.dt <= self.t_end
            && self.newton_tol > 0.0
            && self.newton_max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(
                "need t_end > 0, 0 < dt <= t_end, newton_tol > 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimStats {
    pub steps: usize,
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    /// Whether `|R|` fell on every Newton iteration of every step (until it
    /// reached the rounding floor).
    pub residual_monotone: bool,
    /// Wall time of the time-stepping loop alone.
    pub loop_seconds: f64,
}

impl SimStats {
    pub fn seconds_per_step(&self) -> f64 {
        self.loop_seconds / self.steps.max(1) as f64
    }
}

pub fn simulate(net: &RcNetwork, driver: &DriverModel, cfg: &SimConfig) -> Result<Waveform, SimError> {
    simulate_with_stats(net, driver, cfg).map(|(w, _)| w)
}

pub fn simulate_with_stats(
    net: &RcNetwork,
    driver: &DriverModel,
    cfg: &SimConfig,
) -> Result<(Waveform, SimStats), SimError> {
    driver.validate()?;
    cfg.validate()?;
    let sys = assemble_nodal(net)?;
    let Stamps {
        n,
        input,
        g_src,
        g_int,
        cap_over_h,
    } = Stamps::new(&sys, cfg.dt);
    let h = cfg.dt;
    let steps = cfg.steps();

    let mut v = vec![0.0; n];
    let mut v_prev = vec![0.0; n];
    let mut f_prev = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut perm = vec![0usize; n];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(v[sys.output]);

    let mut stats = SimStats {
        steps,
        residual_monotone: true,
        ..SimStats::default()
    };
    let eval_f = |v: &[f64], f: &mut [f64]| -> f64 {
        for i in 0..n {
            let row = &g_int[i * n..(i + 1) * n];
            f[i] = -row.iter().zip(v).map(|(g, x)| g * x).sum::<f64>();
        }
        let (i_drv, di) = driver.current(v[input], g_src);
        f[input] += i_drv;
        di
    };

    let start = Instant::now();
    eval_f(&v_prev, &mut f_prev);
    for step in 1..=steps {
        v.copy_from_slice(&v_prev);
        let mut converged = false;
        let mut last_norm = f64::INFINITY;
        let mut last_update = f64::INFINITY;
        let mut iters = 0;
        while iters < cfg.newton_max_iter {
            iters += 1;
            // Residual and Jacobian at the current iterate.
            let di = eval_f(&v, &mut resid);
            let mut norm = 0.0_f64;
            for i in 0..n {
                resid[i] = cap_over_h[i] * (v[i] - v_prev[i]) - resid[i] - f_prev[i];
                norm = norm.max(resid[i].abs());
            }
            let floor = 1e-12 * cap_over_h.iter().fold(0.0_f64, |m, c| m.max(*c)) * driver.vdd;
            if norm > last_norm && norm > floor {
                stats.residual_monotone = false;
            }
            last_norm = norm;

            jacobian(&g_int, &cap_over_h, input, di, &mut jac);
            if !lu_solve_in_place(&mut jac, &mut perm, &mut resid, n) {
                return Err(SimError::SingularJacobian { step });
            }
            let mut update = 0.0_f64;
            for i in 0..n {
                v[i] -= resid[i];
                update = update.max(resid[i].abs());
            }
            last_update = update;
            if !update.is_finite() {
                break;
            }
            if update <= cfg.newton_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SimError::NewtonDivergence {
                step,
                iterations: iters,
                update: last_update,
            });
        }
        stats.newton_iterations += iters;
        stats.max_newton_iterations = stats.max_newton_iterations.max(iters);
        eval_f(&v, &mut f_prev);
        v_prev.copy_from_slice(&v);
        out.push(v[sys.output]);
    }
    stats.loop_seconds = start.elapsed().as_secs_f64();

    let times = Waveform::uniform_grid(h, steps);
    Ok((
        Waveform {
            times,
            values: out,
        },
        stats,
    ))
}

/// Row-major companion matrices of the trapezoidal step.
struct Stamps {
    n: usize,
    input: usize,
    g_src: f64,
    /// Internal conductances only; the driver owns the source branch.
    g_int: Vec<f64>,
    /// `2C/dt` per node.
    cap_over_h: Vec<f64>,
}

impl Stamps {
    fn new(sys: &NodalSystem, dt: f64) -> Self {
        let n = sys.order();
        let mut g_int = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g_int[i * n + j] = sys.g[(i, j)];
            }
        }
        g_int[sys.input * n + sys.input] -= sys.source_conductance;
        Stamps {
            n,
            input: sys.input,
            g_src: sys.source_conductance,
            g_int,
            cap_over_h: sys.c.iter().map(|c| 2.0 * c / dt).collect(),
        }
    }
}

/// `G_int + 2C/dt - ∂i/∂v` at the input node.
fn jacobian(g_int: &[f64], cap_over_h: &[f64], input: usize, di: f64, jac: &mut [f64]) {
    let n = cap_over_h.len();
    jac.copy_from_slice(g_int);
    for i in 0..n {
        jac[i * n + i] += cap_over_h[i];
    }
    jac[input * n + input] -= di;
}

/// Dense LU with partial pivoting; overwrites `a` with the factors and `b`
/// with the solution of `a x = b`. Returns `false` on a zero pivot.
fn lu_solve_in_place(a: &mut [f64], perm: &mut [usize], b: &mut [f64], n: usize) -> bool {
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return false;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
            perm.swap(k, piv);
        }
        let pivot = a[k * n + k];
        for i in (k + 1)..n {
            let factor = a[i * n + k] / pivot;
            a[i * n + k] = factor;
            for j in (k + 1)..n {
                a[i * n + j] -= factor * a[k * n + j];
            }
        }
    }
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= a[i * n + j] * b[j];
        }
        b[i] = acc;
    }
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= a[i * n + j] * b[j];
        }
        b[i] = acc / a[i * n + i];
    }
    true
}

/// Time spent in the linear solve per time step: the mean Newton iteration
/// count of a full run times the cost of one dense factor-and-solve of the
/// network's Jacobian, timed over at least `min_seconds`.
pub fn solve_seconds_per_step(
    net: &RcNetwork,
    driver: &DriverModel,
    cfg: &SimConfig,
    min_seconds: f64,
) -> Result<f64, SimError> {
    let (_, stats) = simulate_with_stats(net, driver, cfg)?;
    let iterations = stats.newton_iterations as f64 / stats.steps.max(1) as f64;
    let st = Stamps::new(&assemble_nodal(net)?, cfg.dt);
    let n = st.n;
    let (_, di) = driver.current(0.0, st.g_src);
    let mut template = vec![0.0; n * n];
    jacobian(&st.g_int, &st.cap_over_h, st.input, di, &mut template);
    let mut jac = vec![0.0; n * n];
    let mut perm = vec![0usize; n];
    let mut b = vec![0.0; n];
    let mut solves = 0usize;
    let mut batch = 64usize;
    let start = Instant::now();
    loop {
        for _ in 0..batch {
            jac.copy_from_slice(&template);
            b.iter_mut().for_each(|x| *x = 1.0);
            if !lu_solve_in_place(&mut jac, &mut perm, std::hint::black_box(&mut b), n) {
                return Err(SimError::SingularJacobian { step: 0 });
            }
        }
        solves += batch;
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= min_seconds {
            return Ok(iterations * elapsed / solves as f64);
        }
        batch *= 2;
    }
}

/// Mean wall time of `simulate` over `repetitions` runs after one warm-up.
pub fn measure_runtime(
    net: &RcNetwork,
    driver: &DriverModel,
    cfg: &SimConfig,
    repetitions: usize,
) -> Result<f64, SimError> {
    if repetitions < 3 {
        return Err(SimError::InvalidConfig("need at least 3 repetitions".into()));
    }
    simulate(net, driver, cfg)?;
    let start = Instant::now();
    for _ in 0..repetitions {
        std::hint::black_box(simulate(net, driver, cfg)?);
    }
    Ok(start.elapsed().as_secs_f64() / repetitions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::{analytic_step_response, decompose};
    use crate::netgen::{extract_transfer_function, generate_network, Topology};

    fn unit_rc() -> RcNetwork {
        RcNetwork::ladder(vec![1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn first_order_linear_closed_form() {
        let cfg = SimConfig::with_steps(1e-3, 5000);
        let w = simulate(&unit_rc(), &DriverModel::ideal_step(1.0), &cfg).unwrap();
        let err = w
            .times
            .iter()
            .zip(&w.values)
            .map(|(t, v)| (v - (1.0 - (-t).exp())).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-7, "{err}");
    }

    /// Adaptive RK45 (Dormand–Prince) on dv/dt = (I/C) tanh((vdd - v)/knee).
    fn scalar_oracle(rate: f64, vdd: f64, knee: f64, times: &[f64]) -> Vec<f64> {
        let f = |v: f64| rate * ((vdd - v) / knee).tanh();
        let mut out = vec![0.0];
        let (mut t, mut v, mut h) = (0.0_f64, 0.0_f64, 1e-6_f64);
        for &target in &times[1..] {
            while t < target {
                let h_try = h.min(target - t);
                let k1 = f(v);
                let k2 = f(v + h_try * (k1 / 5.0));
                let k3 = f(v + h_try * (3.0 / 40.0 * k1 + 9.0 / 40.0 * k2));
                let k4 = f(v + h_try * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3));
                let k5 = f(v + h_try
                    * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 + 64448.0 / 6561.0 * k3
                        - 212.0 / 729.0 * k4));
                let k6 = f(v + h_try
                    * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 + 46732.0 / 5247.0 * k3
                        + 49.0 / 176.0 * k4
                        - 5103.0 / 18656.0 * k5));
                let v5 = v + h_try
                    * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4
                        - 2187.0 / 6784.0 * k5
                        + 11.0 / 84.0 * k6);
                let k7 = f(v5);
                let v4 = v + h_try
                    * (5179.0 / 57600.0 * k1 + 7571.0 / 16695.0 * k3 + 393.0 / 640.0 * k4
                        - 92097.0 / 339200.0 * k5
                        + 187.0 / 2100.0 * k6
                        + 1.0 / 40.0 * k7);
                let err = (v5 - v4).abs();
                if err <= 1e-13 {
                    t += h_try;
                    v = v5;
                    h = h_try * 2.0;
                } else {
                    h = h_try * 0.5;
                }
            }
            out.push(v);
        }
        out
    }

    #[test]
    fn scalar_saturating_matches_adaptive_oracle() {
        let net = RcNetwork::ladder(vec![500.0], vec![100e-15]).unwrap();
        let driver = DriverModel::matched_saturating(1.1, 0.4, &net);
        let tau = 500.0 * 100e-15;
        let cfg = SimConfig::with_steps(tau / 200.0, 2000);
        let w = simulate(&net, &driver, &cfg).unwrap();
        let oracle = scalar_oracle(driver.strength / 100e-15, 1.1, 0.4, &w.times);
        let err = w
            .values
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn saturating_reaches_vdd() {
        let net = generate_network(4, Topology::Ladder, 2).unwrap();
        let driver = DriverModel::matched_saturating(1.1, 0.4, &net);
        let w = simulate(&net, &driver, &SimConfig::default()).unwrap();
        assert!((w.values.last().unwrap() - 1.1).abs() < 1e-6);
    }

    #[test]
    fn linear_case_matches_modal_response() {
        let net = generate_network(3, Topology::Ladder, 7).unwrap();
        let h = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
        let d = decompose(&h).unwrap();
        let tau_min = d.modes.iter().map(|m| 1.0 / m.pole.norm()).fold(f64::INFINITY, f64::min);
        let tau_max = d.modes.iter().map(|m| 1.0 / m.pole.norm()).fold(0.0, f64::max);
        let dt = tau_min / 200.0;
        let steps = ((3.0 * tau_max / dt) as usize).min(20_000);
        let w = simulate(&net, &DriverModel::ideal_step(1.0), &SimConfig::with_steps(dt, steps)).unwrap();
        let a = analytic_step_response(&d, &w.times).unwrap();
        assert!(w.max_abs_diff(&a) < 1e-6, "{}", w.max_abs_diff(&a));
    }

    #[test]
    fn second_order_convergence() {
        let net = generate_network(3, Topology::Ladder, 3).unwrap();
        let driver = DriverModel::matched_saturating(1.1, 0.4, &net);
        let base_dt = 4e-12;
        let steps = 500;
        let reference = simulate(&net, &driver, &SimConfig::with_steps(base_dt / 16.0, steps * 16)).unwrap();
        let err_at = |factor: usize| {
            let dt = base_dt / factor as f64;
            let w = simulate(&net, &driver, &SimConfig::with_steps(dt, steps * factor)).unwrap();
            w.values
                .iter()
                .enumerate()
                .map(|(k, v)| (v - reference.values[k * 16 / factor]).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err_at(1) / err_at(2);
        assert!((3.0..5.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn monotone_and_bounded() {
        for seed in 0..5 {
            let net = generate_network(2 + seed as usize, Topology::Ladder, seed).unwrap();
            let driver = DriverModel::matched_saturating(1.1, 0.4, &net);
            let cfg = SimConfig::with_steps(0.5e-12, 8000);
            let (w, stats) = simulate_with_stats(&net, &driver, &cfg).unwrap();
            assert!(stats.residual_monotone);
            for pair in w.values.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-12);
            }
            assert!(w.values.iter().all(|&v| (-1e-9..=1.1 + 1e-9).contains(&v)));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let net = unit_rc();
        let driver = DriverModel {
            strength: 1.0,
            ..DriverModel::matched_saturating(1.0, 1e-3, &net)
        };
        let cfg = SimConfig {
            t_end: 10.0,
            dt: 1.0,
            newton_tol: 1e-15,
            newton_max_iter: 2,
        };
        assert!(matches!(
            simulate(&net, &driver, &cfg),
            Err(SimError::NewtonDivergence { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        let net = unit_rc();
        let bad = SimConfig {
            dt: 2.0,
            t_end: 1.0,
            ..SimConfig::default()
        };
        assert!(simulate(&net, &DriverModel::ideal_step(1.0), &bad).is_err());
        assert!(simulate(&net, &DriverModel::ideal_step(-1.0), &SimConfig::default()).is_err());
        assert!(measure_runtime(&net, &DriverModel::ideal_step(1.0), &SimConfig::default(), 2).is_err());
    }

    #[test]
    fn higher_order_costs_more() {
        let cfg = SimConfig::with_steps(10e-12, 1000);
        let small = generate_network(1, Topology::Ladder, 1).unwrap();
        let large = generate_network(10, Topology::Ladder, 1).unwrap();
        let d1 = DriverModel::matched_saturating(1.1, 0.4, &small);
        let d10 = DriverModel::matched_saturating(1.1, 0.4, &large);
        let t1 = measure_runtime(&small, &d1, &cfg, 5).unwrap();
        let t10 = measure_runtime(&large, &d10, &cfg, 5).unwrap();
        assert!(t10 > t1, "{t10} vs {t1}");
    }

    #[test]
    fn lu_solves_small_system() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b = vec![4.0, 3.0];
        let mut perm = vec![0; 2];
        assert!(lu_solve_in_place(&mut a, &mut perm, &mut b, 2));
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);
        let mut z = vec![0.0; 4];
        assert!(!lu_solve_in_place(&mut z, &mut perm, &mut b, 2));
    }
}
