//! Random RC interconnect synthesis, nodal assembly and transfer-function
//! extraction.
//!
//! Every node carries one grounded capacitor and hangs off exactly one
//! resistor from its parent. Node 0 is driven from the source through
//! `r[0]`. A ladder is the path `0 → 1 → … → n-1`; a tree branches randomly
//! with the output at its deepest leaf.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::modal::{self, ModalError, Polynomial, TransferFunction};

pub const MIN_ORDER: usize = 1;
pub const MAX_ORDER: usize = 10;

/// Log-uniform resistor range in ohms.
pub const R_RANGE: (f64, f64) = (100.0, 1_000.0);
/// Log-uniform capacitor range in farads.
pub const C_RANGE: (f64, f64) = (50e-15, 500e-15);

/// Minimum relative separation between extracted poles before a draw is
/// rejected and resampled.
pub const POLE_SEPARATION: f64 = 1e-6;

const MAX_DRAWS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum NetgenError {
    #[error("order {0} outside supported range 1..=10")]
    UnsupportedOrder(usize),
    #[error("nodal system is singular")]
    SingularSystem,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("no draw with distinct real poles after {0} attempts")]
    ResampleExhausted(usize),
    #[error(transparent)]
    Modal(#[from] ModalError),
    #[error("unsupported network document version {0}")]
    VersionMismatch(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ladder,
    Tree,
}

impl std::str::FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ladder" => Ok(Topology::Ladder),
            "tree" => Ok(Topology::Tree),
            other => Err(format!("unknown topology `{other}`")),
        }
    }
}

/// A grounded-capacitor RC tree driven at node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RcNetwork {
    pub topology: Topology,
    /// `r[k]` connects `parent[k]` (or the source when `None`) to node `k`.
    pub r: Vec<f64>,
    /// `c[k]` is node `k`'s capacitance to ground.
    pub c: Vec<f64>,
    pub parent: Vec<Option<usize>>,
    pub input: usize,
    pub output: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    version: u32,
    topology: Topology,
    r: Vec<f64>,
    c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<Vec<Option<usize>>>,
    input: usize,
    output: usize,
}

impl RcNetwork {
    /// Series ladder with the given element values.
    pub fn ladder(r: Vec<f64>, c: Vec<f64>) -> Result<Self, NetgenError> {
        let n = c.len();
        let net = RcNetwork {
            topology: Topology::Ladder,
            parent: (0..n).map(|k| k.checked_sub(1)).collect(),
            r,
            c,
            input: 0,
            output: n.saturating_sub(1),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn order(&self) -> usize {
        self.c.len()
    }

    /// `(from, to, ohms)`; `from == None` is the driving source.
    pub fn resistors(&self) -> Vec<(Option<usize>, usize, f64)> {
        self.parent
            .iter()
            .zip(&self.r)
            .enumerate()
            .map(|(k, (&p, &r))| (p, k, r))
            .collect()
    }

    pub fn validate(&self) -> Result<(), NetgenError> {
        let n = self.c.len();
        let bad = |m: &str| Err(NetgenError::InvalidNetwork(m.to_string()));
        if n == 0 {
            return bad("network has no capacitors");
        }
        if self.r.len() != n || self.parent.len() != n {
            return bad("r, c and parent must have one entry per node");
        }
        if self.r.iter().chain(&self.c).any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("all R and C must be positive and finite");
        }
        if self.input != 0 || self.parent[0].is_some() {
            return bad("node 0 must be the driven input");
        }
        for (k, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return bad("every node k > 0 needs a parent with a smaller index"),
            }
        }
        if self.output >= n {
            return bad("output node out of range");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = NetworkDoc {
            version: modal::FORMAT_VERSION,
            topology: self.topology,
            r: self.r.clone(),
            c: self.c.clone(),
            parent: (self.topology == Topology::Tree).then(|| self.parent.clone()),
            input: self.input,
            output: self.output,
        };
        serde_json::to_string(&doc).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetgenError> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        if doc.version != modal::FORMAT_VERSION {
            return Err(NetgenError::VersionMismatch(doc.version));
        }
        let n = doc.c.len();
        let parent = match (doc.topology, doc.parent) {
            (_, Some(p)) => p,
            (Topology::Ladder, None) => (0..n).map(|k| k.checked_sub(1)).collect(),
            (Topology::Tree, None) => {
                return Err(NetgenError::InvalidNetwork("tree needs a parent list".into()))
            }
        };
        let net = RcNetwork {
            topology: doc.topology,
            r: doc.r,
            c: doc.c,
            parent,
            input: doc.input,
            output: doc.output,
        };
        net.validate()?;
        Ok(net)
    }
}

/// `(G + sC) V = b · V_source`, observed at `output`.
#[derive(Debug, Clone)]
pub struct NodalSystem {
    pub g: DMatrix<f64>,
    /// Diagonal of the capacitance matrix.
    pub c: Vec<f64>,
    pub input_vector: DVector<f64>,
    pub input: usize,
    pub output: usize,
    /// Conductance between the source and the input node.
    pub source_conductance: f64,
}

impl NodalSystem {
    pub fn order(&self) -> usize {
        self.c.len()
    }

    pub fn capacitance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.c.clone()))
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn draw(order: usize, topology: Topology, rng: &mut ChaCha8Rng) -> RcNetwork {
    let r: Vec<f64> = (0..order).map(|_| log_uniform(rng, R_RANGE)).collect();
    let c: Vec<f64> = (0..order).map(|_| log_uniform(rng, C_RANGE)).collect();
    match topology {
        Topology::Ladder => RcNetwork::ladder(r, c).expect("drawn values are valid"),
        Topology::Tree => {
            let mut parent = vec![None];
            let mut children = vec![0usize; order];
            let mut depth = vec![0usize; order];
            for k in 1..order {
                let open: Vec<usize> = (0..k).filter(|&i| children[i] < 2).collect();
                let p = open[rng.gen_range(0..open.len())];
                children[p] += 1;
                depth[k] = depth[p] + 1;
                parent.push(Some(p));
            }
            let output = (0..order)
                .max_by_key(|&k| (depth[k], k))
                .expect("order >= 1");
            RcNetwork {
                topology,
                r,
                c,
                parent,
                input: 0,
                output,
            }
        }
    }
}

/// Draws a random network of the requested order. Draws whose poles are not
/// real, negative and mutually separated are rejected and redrawn from the
/// same stream, so the result is a pure function of `(order, topology, seed)`.
pub fn generate_network(
    order: usize,
    topology: Topology,
    seed: u64,
) -> Result<RcNetwork, NetgenError> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(NetgenError::UnsupportedOrder(order));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_DRAWS {
        let net = draw(order, topology, &mut rng);
        if has_distinct_real_poles(&net)? {
            return Ok(net);
        }
    }
    Err(NetgenError::ResampleExhausted(MAX_DRAWS))
}

fn has_distinct_real_poles(net: &RcNetwork) -> Result<bool, NetgenError> {
    let h = extract_transfer_function(&assemble_nodal(net)?)?;
    let roots = match modal::find_poles(h.den()) {
        Ok(r) => r,
        Err(ModalError::NonConvergence { .. }) => return Ok(false),
        Err(e) => return Err(e.into()),
    };
    if roots.len() != net.order()
        || roots.iter().any(|r| {
            r.multiplicity != 1
                || r.value.re >= 0.0
                || r.value.im.abs() > modal::REAL_POLE_TOL * r.value.norm()
        })
    {
        return Ok(false);
    }
    let separated = roots.iter().enumerate().all(|(i, a)| {
        roots[i + 1..].iter().all(|b| {
            (a.value - b.value).norm() > POLE_SEPARATION * a.value.norm().max(b.value.norm())
        })
    });
    Ok(separated)
}

/// Stamps conductances and capacitances into nodal matrices.
pub fn assemble_nodal(net: &RcNetwork) -> Result<NodalSystem, NetgenError> {
    net.validate()?;
    let n = net.order();
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (from, to, ohms) in net.resistors() {
        let cond = 1.0 / ohms;
        g[(to, to)] += cond;
        match from {
            Some(f) => {
                g[(f, f)] += cond;
                g[(f, to)] -= cond;
                g[(to, f)] -= cond;
            }
            None => b[to] += cond,
        }
    }
    if g.clone().lu().determinant().abs() <= f64::MIN_POSITIVE {
        return Err(NetgenError::SingularSystem);
    }
    Ok(NodalSystem {
        g,
        c: net.c.clone(),
        source_conductance: b[net.input],
        input_vector: b,
        input: net.input,
        output: net.output,
    })
}

/// `H(s) = e_outᵀ (G + sC)⁻¹ b` in coefficient form.
///
/// `C^{-1/2} G C^{-1/2} = Q Λ Qᵀ` is symmetric positive definite, so the
/// poles are `-λ_i` and the residues are `(C^{-1/2}Q)_{out,i} (QᵀC^{-1/2}b)_i`.
/// The denominator is expanded as `Π (1 + s/λ_i)` (all coefficients positive,
/// so no cancellation) and the numerator as `Σ r_i Π_{l≠i}(s + λ_l) / Π λ_l`.
/// Both are built in units of the mean rate and rescaled at the end.
pub fn extract_transfer_function(sys: &NodalSystem) -> Result<TransferFunction, NetgenError> {
    let n = sys.order();
    if sys.c.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(NetgenError::SingularSystem);
    }
    let isq: Vec<f64> = sys.c.iter().map(|c| 1.0 / c.sqrt()).collect();
    let mut s = sys.g.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= isq[i] * isq[j];
        }
    }
    let eig = s.symmetric_eigen();
    let rates: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if rates.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(NetgenError::SingularSystem);
    }
    let scale = rates.iter().sum::<f64>() / n as f64;
    let q = &eig.eigenvectors;
    let residues: Vec<f64> = (0..n)
        .map(|i| {
            let out = isq[sys.output] * q[(sys.output, i)];
            let inp: f64 = (0..n).map(|k| q[(k, i)] * isq[k] * sys.input_vector[k]).sum();
            out * inp / scale
        })
        .collect();
    let scaled: Vec<f64> = rates.iter().map(|l| l / scale).collect();

    // In ŝ = s/scale: D̂(ŝ) = Π(ŝ + λ̂_l) / Πλ̂_l.
    let prod: f64 = scaled.iter().product();
    let expand = |skip: Option<usize>| -> Vec<f64> {
        let mut coeffs = vec![1.0];
        for (l, &lam) in scaled.iter().enumerate() {
            if Some(l) == skip {
                continue;
            }
            let mut next = vec![0.0; coeffs.len() + 1];
            for (k, &c) in coeffs.iter().enumerate() {
                next[k + 1] += c;
                next[k] += lam * c;
            }
            coeffs = next;
        }
        coeffs
    };
    let den_hat: Vec<f64> = expand(None).into_iter().map(|c| c / prod).collect();
    let mut num_hat = vec![0.0; n];
    for (i, &r) in residues.iter().enumerate() {
        for (k, c) in expand(Some(i)).into_iter().enumerate() {
            num_hat[k] += r * c / prod;
        }
    }

    let mut factor = 1.0;
    let mut den = Vec::with_capacity(n + 1);
    let mut num = Vec::with_capacity(n);
    for k in 0..=n {
        den.push(den_hat[k] * factor);
        if k < n {
            num.push(num_hat[k] * factor);
        }
        factor /= scale;
    }
    Ok(TransferFunction::new(Polynomial::new(num)?, Polynomial::new(den)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn unit_ladder(n: usize) -> RcNetwork {
        RcNetwork::ladder(vec![1.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn one_stage() {
        let sys = assemble_nodal(&unit_ladder(1)).unwrap();
        assert_eq!(sys.g[(0, 0)], 1.0);
        assert_eq!(sys.c, vec![1.0]);
        let h = extract_transfer_function(&sys).unwrap();
        assert_eq!(h.num().coeffs(), &[1.0]);
        assert_eq!(h.den().coeffs(), &[1.0, 1.0]);
    }

    #[test]
    fn two_stage_by_hand() {
        let sys = assemble_nodal(&unit_ladder(2)).unwrap();
        // Hand KCL: node 0 sees the source and node 1; node 1 sees node 0.
        let want = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        assert_eq!(sys.g, want);
        assert_eq!(sys.c, vec![1.0, 1.0]);
        let h = extract_transfer_function(&sys).unwrap();
        // Symbolic elimination: V1 = V0/(1+s), (2+s)V0 - V1 = Vs
        // => H = 1/((2+s)(1+s) - 1) = 1/(s^2 + 3s + 1)
        for (got, want) in h.den().coeffs().iter().zip([1.0, 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((h.num().coeffs()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_source_conductance() {
        let net = generate_network(6, Topology::Tree, 3).unwrap();
        let sys = assemble_nodal(&net).unwrap();
        for i in 0..6 {
            let row: f64 = sys.g.row(i).iter().sum();
            assert!((row - sys.input_vector[i]).abs() < 1e-15 * sys.g[(i, i)].abs().max(1.0));
        }
        assert!(sys.g.clone() == sys.g.transpose());
    }

    #[test]
    fn determinism_and_structure() {
        let a = generate_network(1, Topology::Ladder, 42).unwrap();
        assert_eq!(a.r.len(), 1);
        assert_eq!(a.c.len(), 1);
        let h = extract_transfer_function(&assemble_nodal(&a).unwrap()).unwrap();
        assert_eq!(h.order(), 1);
        assert_eq!(a, generate_network(1, Topology::Ladder, 42).unwrap());
        assert_ne!(a, generate_network(1, Topology::Ladder, 43).unwrap());
    }

    #[test]
    fn unsupported_orders() {
        assert!(matches!(
            generate_network(0, Topology::Ladder, 1),
            Err(NetgenError::UnsupportedOrder(0))
        ));
        assert!(matches!(
            generate_network(11, Topology::Ladder, 1),
            Err(NetgenError::UnsupportedOrder(11))
        ));
    }

    #[test]
    fn impedance_scaling_keeps_poles() {
        let net = generate_network(4, Topology::Ladder, 9).unwrap();
        let mut scaled = net.clone();
        scaled.r.iter_mut().for_each(|r| *r *= 7.0);
        scaled.c.iter_mut().for_each(|c| *c /= 7.0);
        let h1 = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
        let h2 = extract_transfer_function(&assemble_nodal(&scaled).unwrap()).unwrap();
        let p1 = modal::find_poles(h1.den()).unwrap();
        let p2 = modal::find_poles(h2.den()).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a.value - b.value).norm() < 1e-10 * a.value.norm());
        }
    }

    #[test]
    fn ladder_dc_gain_is_one() {
        for seed in 0..20 {
            let net = generate_network(1 + seed as usize % 10, Topology::Ladder, seed).unwrap();
            let h = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
            assert!((h.eval(Complex64::new(0.0, 0.0)).re - 1.0).abs() < 1e-9);
        }
    }

    /// Poles via the general (Hessenberg QR) eigen-solver on `-C⁻¹G`.
    fn eigen_oracle(net: &RcNetwork) -> Vec<f64> {
        let sys = assemble_nodal(net).unwrap();
        let n = net.order();
        let mut a = sys.g.clone();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= -1.0 / sys.c[i];
            }
        }
        let mut ev: Vec<f64> = a.complex_eigenvalues().iter().map(|z| z.re).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn poles_match_eigenvalues() {
        for (order, seed, topo) in [(3, 7, Topology::Ladder), (10, 1, Topology::Ladder), (8, 5, Topology::Tree)] {
            let net = generate_network(order, topo, seed).unwrap();
            let h = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
            assert_eq!(h.den().degree(), order);
            let poles = modal::find_poles(h.den()).unwrap();
            assert_eq!(poles.len(), order);
            for (p, e) in poles.iter().zip(eigen_oracle(&net)) {
                assert_eq!(p.multiplicity, 1);
                assert!(p.value.re < 0.0 && p.value.im == 0.0);
                assert!(((p.value.re - e) / e).abs() < 1e-8, "{} vs {e}", p.value.re);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let net = generate_network(5, Topology::Tree, 11).unwrap();
        assert_eq!(RcNetwork::from_json(&net.to_json()).unwrap(), net);
        let ladder = unit_ladder(3);
        let text = ladder.to_json();
        assert_eq!(
            text,
            r#"{"version":1,"topology":"ladder","r":[1.0,1.0,1.0],"c":[1.0,1.0,1.0],"input":0,"output":2}"#
        );
        assert_eq!(RcNetwork::from_json(&text).unwrap(), ladder);
    }

    #[test]
    fn invalid_networks_rejected() {
        assert!(RcNetwork::ladder(vec![1.0, -1.0], vec![1.0, 1.0]).is_err());
        assert!(RcNetwork::ladder(vec![1.0], vec![1.0, 1.0]).is_err());
        assert!(RcNetwork::ladder(vec![], vec![]).is_err());
    }
}
