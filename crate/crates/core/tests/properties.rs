use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcmodal::dataset::{denormalize_waveform, normalize_modes, normalize_waveform, Split};
use rcmodal::modal::{
    analytic_step_response, decompose, from_gain_form, to_gain_form, ModalDecomposition,
    TransferFunction,
};
use rcmodal::netgen::{
    assemble_nodal, extract_transfer_function, generate_network, RcNetwork, Topology,
};
use rcmodal::refsim::{simulate, DriverModel, SimConfig};
use rcmodal::waveform::Waveform;

mod common;

/// Simple poles of degree `1..=max_degree`.
fn rational(max_degree: usize) -> impl Strategy<Value = TransferFunction> {
    (1..=max_degree, any::<u64>()).prop_map(|(d, seed)| {
        common::random_rational(&mut ChaCha8Rng::seed_from_u64(seed), &vec![1; d])
    })
}

/// Up to three poles of multiplicity up to three, total degree at most four.
fn repeated() -> impl Strategy<Value = TransferFunction> {
    prop::collection::vec(1usize..=3, 1..=3)
        .prop_filter("degree <= 4", |m| m.iter().sum::<usize>() <= 4)
        .prop_flat_map(|m| (Just(m), any::<u64>()))
        .prop_map(|(m, seed)| common::random_rational(&mut ChaCha8Rng::seed_from_u64(seed), &m))
}

fn probe(d: &ModalDecomposition, k: usize) -> Complex64 {
    let scale = d.modes.iter().map(|m| m.pole.norm()).fold(1e-3, f64::max);
    let angle = 0.7 + 0.37 * k as f64;
    Complex64::from_polar(scale * (0.3 + 0.11 * k as f64), angle)
}

fn ladder(r: Vec<f64>, c: Vec<f64>) -> RcNetwork {
    RcNetwork::ladder(r, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_matches_direct_evaluation(h in rational(10)) {
        let d = decompose(&h).unwrap();
        for k in 0..20 {
            let s = probe(&d, k);
            let direct = h.eval(s);
            let rel = (direct - d.eval(s)).norm() / direct.norm();
            prop_assert!(rel < 1e-9, "rel {rel:e} at {s}");
        }
    }

    #[test]
    fn repeated_pole_reconstruction_matches(h in repeated(), seed in any::<u64>()) {
        let d = decompose(&h).unwrap();
        prop_assert_eq!(d.multiplicity_sum(), h.order());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let s = common::random_probe(&mut rng, &h);
            let direct = h.eval(s);
            let rel = (direct - d.eval(s)).norm() / direct.norm();
            prop_assert!(rel < 1e-7, "rel {rel:e} at {s}");
        }
    }

    #[test]
    fn multiplicities_sum_to_degree(h in rational(10)) {
        let d = decompose(&h).unwrap();
        prop_assert_eq!(d.multiplicity_sum(), h.order());
    }

    #[test]
    fn residues_equal_the_pole_limit(h in rational(6)) {
        let d = decompose(&h).unwrap();
        for m in &d.modes {
            let step = 1e-5 * m.pole.norm();
            let limit = |dir: f64| {
                let s = m.pole + Complex64::new(dir * step, 0.0);
                (s - m.pole) * h.eval(s)
            };
            let estimate = 0.5 * (limit(1.0) + limit(-1.0));
            let rel = (estimate - m.residue).norm() / m.residue.norm().max(1e-300);
            prop_assert!(rel < 1e-6, "rel {rel:e}");
        }
    }

    #[test]
    fn decomposition_json_round_trips(h in rational(8)) {
        let d = decompose(&h).unwrap();
        let back = ModalDecomposition::from_json(&d.to_json()).unwrap();
        prop_assert_eq!(back, d);
        let h2 = TransferFunction::from_json(&h.to_json()).unwrap();
        prop_assert_eq!(h2, h);
    }

    #[test]
    fn network_poles_are_real_negative_and_complete(
        order in 1usize..=10,
        tree in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let topology = if tree { Topology::Tree } else { Topology::Ladder };
        let net = generate_network(order, topology, seed).unwrap();
        let h = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
        prop_assert_eq!(h.order(), net.order());
        let d = decompose(&h).unwrap();
        for m in &d.modes {
            prop_assert_eq!(m.j, 1);
            prop_assert!(m.pole.re < 0.0);
            prop_assert!(m.pole.im.abs() < 1e-8 * m.pole.norm());
        }
        if topology == Topology::Ladder {
            prop_assert!((h.dc_gain() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn network_poles_are_eigenvalues_of_the_pencil(order in 1usize..=10, seed in any::<u64>()) {
        let net = generate_network(order, Topology::Tree, seed).unwrap();
        let sys = assemble_nodal(&net).unwrap();
        let n = sys.order();
        let a = DMatrix::from_fn(n, n, |i, j| -sys.g[(i, j)] / sys.c[i]);
        let mut eig: Vec<f64> = a.complex_eigenvalues().iter().map(|z| z.re).collect();
        let d = decompose(&extract_transfer_function(&sys).unwrap()).unwrap();
        let mut poles: Vec<f64> = d.modes.iter().map(|m| m.pole.re).collect();
        eig.sort_by(f64::total_cmp);
        poles.sort_by(f64::total_cmp);
        for (e, p) in eig.iter().zip(&poles) {
            prop_assert!((e - p).abs() < 1e-8 * e.abs(), "{e} vs {p}");
        }
    }

    #[test]
    fn impedance_scaling_preserves_poles(order in 1usize..=6, seed in any::<u64>(), k in 0.1..10.0f64) {
        let net = generate_network(order, Topology::Ladder, seed).unwrap();
        let mut scaled = net.clone();
        scaled.r.iter_mut().for_each(|r| *r *= k);
        scaled.c.iter_mut().for_each(|c| *c /= k);
        let poles = |n: &RcNetwork| {
            let h = extract_transfer_function(&assemble_nodal(n).unwrap()).unwrap();
            let mut p: Vec<f64> = decompose(&h).unwrap().modes.iter().map(|m| m.pole.re).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        for (a, b) in poles(&net).iter().zip(poles(&scaled).iter()) {
            prop_assert!((a - b).abs() < 1e-9 * a.abs());
        }
    }

    #[test]
    fn network_json_round_trips(order in 1usize..=10, tree in any::<bool>(), seed in any::<u64>()) {
        let topology = if tree { Topology::Tree } else { Topology::Ladder };
        let net = generate_network(order, topology, seed).unwrap();
        prop_assert_eq!(RcNetwork::from_json(&net.to_json()).unwrap(), net);
    }

    #[test]
    fn gain_form_round_trips(h in rational(8)) {
        let d = decompose(&h).unwrap();
        let gains = to_gain_form(&d).unwrap();
        let dc: f64 = gains.iter().map(|g| g.gain).sum();
        prop_assert!((dc - h.dc_gain()).abs() < 1e-8 * h.dc_gain().abs().max(1.0));
        let back = from_gain_form(&gains);
        for k in 0..5 {
            let s = probe(&d, k);
            let rel = (back.eval(s) - d.eval(s)).norm() / d.eval(s).norm();
            prop_assert!(rel < 1e-12);
        }
    }

    #[test]
    fn waveform_normalization_inverts(values in prop::collection::vec(-10.0..10.0f64, 2..200)) {
        prop_assume!(values.iter().cloned().fold(f64::MIN, f64::max)
            - values.iter().cloned().fold(f64::MAX, f64::min) > 1e-6);
        let (norm, lo, hi) = normalize_waveform(&values).unwrap();
        prop_assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize_waveform(&norm, lo, hi);
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(hi.abs()).max(lo.abs()));
        }
    }

    #[test]
    fn mode_normalization_is_idempotent(order in 1usize..=10, seed in any::<u64>()) {
        let net = generate_network(order, Topology::Tree, seed).unwrap();
        let gains = rcmodal::dataset::network_modes(&net).unwrap();
        let (once, _, _) = normalize_modes(&gains).unwrap();
        let as_gains: Vec<_> = once
            .iter()
            .map(|m| rcmodal::modal::GainMode { rate: m.rate, gain: m.gain })
            .collect();
        let (twice, p, a) = normalize_modes(&as_gains).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!((p, a), (1.0, 1.0));
        prop_assert_eq!(once.len(), order);
    }

    #[test]
    fn splits_are_eighty_ten_ten(count in 10usize..500) {
        let n = |s| (0..count).filter(|&i| Split::of(i, count) == s).count();
        prop_assert_eq!(n(Split::Train), (count * 8).div_ceil(10));
        prop_assert!(n(Split::Val) + n(Split::Test) == count - n(Split::Train));
        prop_assert!(Split::of(count - 1, count) == Split::Test);
    }

    #[test]
    fn waveform_csv_round_trips(values in prop::collection::vec(-1e3..1e3f64, 1..50)) {
        let w = Waveform::new(Waveform::uniform_grid(1e-11, values.len() - 1), values).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let back = Waveform::read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back, w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ladder_responses_stay_bounded_and_monotone(
        order in 1usize..=6,
        seed in any::<u64>(),
        saturating in any::<bool>(),
    ) {
        let net = generate_network(order, Topology::Ladder, seed).unwrap();
        let vdd = 1.1;
        let driver = if saturating {
            DriverModel::matched_saturating(vdd, 0.6, &net)
        } else {
            DriverModel::ideal_step(vdd)
        };
        let w = simulate(&net, &driver, &SimConfig::with_steps(10e-12, 600)).unwrap();
        for pair in w.values.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-12);
        }
        prop_assert!(w.values.iter().all(|&v| (-1e-9..=vdd + 1e-9).contains(&v)));
    }

    #[test]
    fn ideal_step_matches_modal_response(r in prop::collection::vec(100.0..1000.0f64, 1..=4),
                                         c_scale in 0.5..5.0f64) {
        let n = r.len();
        let net = ladder(r, vec![c_scale * 1e-13; n]);
        let h = extract_transfer_function(&assemble_nodal(&net).unwrap()).unwrap();
        let d = decompose(&h).unwrap();
        let tau_min = d.modes.iter().map(|m| 1.0 / m.pole.norm()).fold(f64::INFINITY, f64::min);
        let tau_max = d.modes.iter().map(|m| 1.0 / m.pole.norm()).fold(0.0, f64::max);
        let dt = tau_min / 200.0;
        let steps = ((3.0 * tau_max / dt).ceil() as usize).min(20_000);
        let cfg = SimConfig::with_steps(dt, steps);
        let sim = simulate(&net, &DriverModel::ideal_step(1.0), &cfg).unwrap();
        let exact = analytic_step_response(&d, &sim.times).unwrap();
        prop_assert!(sim.max_abs_diff(&exact) < 1e-6);
    }
}

#[test]
fn two_stage_ladder_is_textbook() {
    let net = ladder(vec![1.0, 1.0], vec![1.0, 1.0]);
    let sys = assemble_nodal(&net).unwrap();
    assert_eq!(sys.g, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]));
    assert_eq!(sys.c, vec![1.0, 1.0]);
    let h = extract_transfer_function(&sys).unwrap();
    let den = h.den().coeffs();
    let norm = h.num().coeffs()[0];
    for (got, want) in den.iter().zip([1.0, 3.0, 1.0]) {
        assert!((got / norm - want).abs() < 1e-12);
    }
}
